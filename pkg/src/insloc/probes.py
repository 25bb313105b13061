"""Frozen-encoder readout probes.

Localization probe: split an image into a sqrt(M) x sqrt(M) grid, embed
each patch box through the frozen backbone + RoI pooling + detection
head, and fit a linear classifier that predicts the patch index.
Classification probe: embed whole-image boxes of augmented views and
predict the instance id. Probe embeddings follow the detection path (the
contrastive projection MLP is discarded, the usual momentum-contrast
evaluation protocol). Both probes standardize embeddings on the
probe-train split and train a multinomial logistic regression by
full-batch gradient descent; the encoder is never touched.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass

import numpy as np

from .boxes import BBox
from .imaging import AugmentParams, Gallery, augment_view, resize_bilinear
from .nn import Backbone, image_batch_to_tensor
from .rng import substream
from .roialign import assign_fpn_level, roi_align_forward


@dataclass(frozen=True)
class ProbeConfig:
    m_patches: int = 9           # perfect square
    steps: int = 500
    lr: float = 0.5
    eval_frac: float = 0.2       # localization: held-out fraction of images
    views_train: int = 8         # classification: augmented views per instance
    views_eval: int = 8
    seed: int = 0
    isolated_patches: bool = False

    def __post_init__(self):
        root = math.isqrt(self.m_patches)
        if root * root != self.m_patches or self.m_patches < 1:
            raise ValueError(f"m_patches must be a perfect square, got {self.m_patches}")
        if self.steps < 1 or self.lr <= 0:
            raise ValueError("probe steps must be >= 1 and lr positive")
        if not 0 < self.eval_frac < 1:
            raise ValueError("eval_frac must be in (0,1)")
        if self.views_train < 1 or self.views_eval < 1:
            raise ValueError("view counts must be >= 1")


def patch_grid_boxes(image_h: int, image_w: int, m: int) -> list[BBox]:
    """The sqrt(M) x sqrt(M) tiling of the image, in continuous coordinates
    (tiles cover every pixel and overlap nowhere)."""
    root = math.isqrt(m)
    if root * root != m:
        raise ValueError(f"M must be a perfect square, got {m}")
    boxes = []
    for r in range(root):
        for c in range(root):
            boxes.append(BBox(
                c * image_w / root, r * image_h / root,
                (c + 1) * image_w / root, (r + 1) * image_h / root,
            ))
    return boxes


def _embed_boxes(encoder: Backbone, image: np.ndarray, boxes,
                 roi_specs) -> np.ndarray:
    """Forward one image, pool each box, and pass through the detection
    head (the contrastive projection MLP is excluded, as in standard
    momentum-contrast evaluation). Raw features, not normalized. Pyramid
    encoders pool at the scale-assigned level."""
    x = image_batch_to_tensor([image])
    maps = encoder.forward(x, keep=False)
    out = []
    for box in boxes:
        if len(maps) == 1:
            lvl = 0
        else:
            lvl = assign_fpn_level(box, num_levels=len(maps))
        pooled = roi_align_forward(maps[lvl], box, 0, roi_specs[lvl])
        out.append(encoder.readout_forward(pooled[None])[0])
    return np.stack(out)


def extract_patch_embedding(encoder: Backbone, image: np.ndarray,
                            patch_index: int, m: int, roi_specs) -> np.ndarray:
    """Embedding of one grid patch of the image (frozen encoder,
    detection-head features, unnormalized)."""
    if not 0 <= patch_index < m:
        raise IndexError(f"patch_index {patch_index} outside [0,{m})")
    h, w = image.shape[:2]
    box = patch_grid_boxes(h, w, m)[patch_index]
    return _embed_boxes(encoder, image, [box], roi_specs)[0]


def _image_patch_embeddings(encoder: Backbone, image: np.ndarray, m: int,
                            roi_specs, isolated: bool) -> np.ndarray:
    """All M patch embeddings of one image (single backbone forward).

    isolated=True crops each patch, upsamples it to full image size, and
    forwards it alone instead of RoI-pooling from the full-image features.
    """
    h, w = image.shape[:2]
    boxes = patch_grid_boxes(h, w, m)
    if not isolated:
        return _embed_boxes(encoder, image, boxes, roi_specs)
    out = []
    full = BBox(0.0, 0.0, float(w), float(h))
    for box in boxes:
        patch = image[int(box.y1):int(math.ceil(box.y2)),
                      int(box.x1):int(math.ceil(box.x2))]
        patch = resize_bilinear(patch, h, w)
        out.append(_embed_boxes(encoder, patch, [full], roi_specs)[0])
    return np.stack(out)


class LinearProbe:
    """Multinomial logistic regression with train-split standardization."""

    def __init__(self, weights: np.ndarray, bias: np.ndarray,
                 mean: np.ndarray, std: np.ndarray):
        self.weights = weights  # (D,L)
        self.bias = bias        # (L,)
        self.mean = mean
        self.std = std

    def logits(self, embeddings: np.ndarray) -> np.ndarray:
        z = (embeddings - self.mean) / self.std
        return z @ self.weights + self.bias

    def predict(self, embeddings: np.ndarray) -> np.ndarray:
        return self.logits(embeddings).argmax(axis=1)

    def accuracy(self, embeddings: np.ndarray, labels: np.ndarray) -> float:
        return float((self.predict(embeddings) == np.asarray(labels)).mean())


def probe_loss_and_grads(x: np.ndarray, labels: np.ndarray, weights: np.ndarray,
                         bias: np.ndarray):
    """Mean softmax cross-entropy and its analytic gradients (dW, db)."""
    n = x.shape[0]
    logits = x @ weights + bias
    logits = logits - logits.max(axis=1, keepdims=True)
    exp = np.exp(logits)
    p = exp / exp.sum(axis=1, keepdims=True)
    loss = float(-np.log(p[np.arange(n), labels]).mean())
    p[np.arange(n), labels] -= 1.0
    p /= n
    return loss, x.T @ p, p.sum(axis=0)


def train_linear_probe(embeddings: np.ndarray, labels,
                       config: ProbeConfig) -> LinearProbe:
    """Full-batch gradient descent on softmax cross-entropy; the encoder
    that produced the embeddings is untouched."""
    labels = np.asarray(labels, dtype=np.int64)
    if embeddings.ndim != 2 or embeddings.shape[0] != labels.shape[0]:
        raise ValueError(
            f"embeddings {embeddings.shape} and labels {labels.shape} misaligned"
        )
    classes = np.unique(labels)
    n_classes = int(labels.max()) + 1
    if len(classes) < 2:
        raise ValueError(f"probe needs >= 2 distinct labels, got {len(classes)}")
    if embeddings.shape[0] < n_classes:
        raise ValueError(
            f"{embeddings.shape[0]} samples for {n_classes} classes"
        )
    x = embeddings.astype(np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    std[std < 1e-8] = 1.0
    x = (x - mean) / std
    d = x.shape[1]
    weights = np.zeros((d, n_classes))
    bias = np.zeros(n_classes)
    for _ in range(config.steps):
        _, gw, gb = probe_loss_and_grads(x, labels, weights, bias)
        weights -= config.lr * gw
        bias -= config.lr * gb
    return LinearProbe(weights, bias, mean, std)


def _gallery_split(k: int, eval_frac: float, rng) -> tuple[np.ndarray, np.ndarray]:
    perm = rng.permutation(k)
    n_eval = max(1, int(round(eval_frac * k)))
    return perm[n_eval:], perm[:n_eval]


def localization_probe_accuracy(encoder: Backbone, gallery: Gallery,
                                config: ProbeConfig, roi_specs) -> float:
    """Top-1 accuracy of the M-way patch-index probe on held-out images.
    Chance level is 1/M."""
    m = config.m_patches
    if m == 1:
        return 1.0
    rng = substream(config.seed, "probe-split")
    train_ids, eval_ids = _gallery_split(len(gallery), config.eval_frac, rng)

    def collect(ids):
        embs, labels = [], []
        for i in ids:
            e = _image_patch_embeddings(encoder, gallery.images[i], m,
                                        roi_specs, config.isolated_patches)
            embs.append(e)
            labels.append(np.arange(m))
        return np.concatenate(embs), np.concatenate(labels)

    x_train, y_train = collect(train_ids)
    x_eval, y_eval = collect(eval_ids)
    probe = train_linear_probe(x_train, y_train, config)
    return probe.accuracy(x_eval, y_eval)


def classification_probe_accuracy(encoder: Backbone, gallery: Gallery,
                                  config: ProbeConfig, aug: AugmentParams,
                                  roi_specs,
                                  return_train_accuracy: bool = False):
    """Top-1 instance-label accuracy on held-out augmented views; embeddings
    are whole-image-box RoI features through the detection head. Chance
    is 1/K."""
    k = len(gallery)
    size = gallery.images.shape[1]
    view_aug = dataclasses.replace(aug, view_size=size)
    full = BBox(0.0, 0.0, float(size), float(size))
    rng = substream(config.seed, "probe-views")
    x_train, y_train, x_eval, y_eval = [], [], [], []
    for inst in range(k):
        for v in range(config.views_train + config.views_eval):
            view = augment_view(gallery.images[inst], view_aug, rng)
            emb = _embed_boxes(encoder, view, [full], roi_specs)[0]
            if v < config.views_train:
                x_train.append(emb)
                y_train.append(inst)
            else:
                x_eval.append(emb)
                y_eval.append(inst)
    x_train, y_train = np.stack(x_train), np.array(y_train)
    x_eval, y_eval = np.stack(x_eval), np.array(y_eval)
    probe = train_linear_probe(x_train, y_train, config)
    eval_acc = probe.accuracy(x_eval, y_eval)
    if return_train_accuracy:
        return eval_acc, probe.accuracy(x_train, y_train)
    return eval_acc


def probe_tsv_row(mode: str, m: int, loc_acc: float, cls_acc: float,
                  seed: int) -> str:
    return f"{mode}\t{m}\t{loc_acc:.4f}\t{cls_acc:.4f}\t{seed}"
