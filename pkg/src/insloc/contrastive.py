"""Momentum-contrast machinery: the InfoNCE loss over a FIFO memory queue
of negatives, the EMA key encoder, and the full region-contrastive step
(pool, project, normalize, contrast, enqueue) for both backbone styles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boxes import BBox, augment_bbox
from .nn import (Backbone, BackboneConfig, ShapeError, image_batch_to_tensor,
                 l2_normalize, l2_normalize_backward)
from .roialign import RoiSpec, roi_align_batch, roi_align_batch_backward

UNIT_NORM_TOL = 1e-3


class MemoryQueue:
    """Fixed-capacity FIFO ring of unit-norm negative embeddings.

    prefill="random" fills the ring with random unit vectors so the loss
    is well-defined from step 0; prefill="empty" grows until full and only
    written rows are used as negatives.
    """

    def __init__(self, capacity: int, dim: int,
                 rng: np.random.Generator | None = None,
                 prefill: str = "random", dtype=np.float32):
        if capacity < 1 or dim < 1:
            raise ValueError(f"queue needs positive capacity/dim, got {capacity},{dim}")
        if prefill not in ("random", "empty"):
            raise ValueError(f"prefill must be 'random' or 'empty', got {prefill!r}")
        self.capacity = capacity
        self.dim = dim
        self.cursor = 0
        if prefill == "random":
            if rng is None:
                raise ValueError("random prefill requires an rng")
            rows = rng.standard_normal((capacity, dim))
            rows /= np.sqrt((rows * rows).sum(axis=1, keepdims=True))
            self.storage = rows.astype(dtype)
            self.filled = capacity
        else:
            self.storage = np.zeros((capacity, dim), dtype=dtype)
            self.filled = 0

    def negatives(self) -> np.ndarray:
        return self.storage[:self.filled]

    def enqueue(self, keys: np.ndarray) -> None:
        keys = np.asarray(keys)
        if keys.ndim != 2 or keys.shape[1] != self.dim:
            raise ShapeError(f"enqueue: expected (b,{self.dim}), got {keys.shape}")
        b = keys.shape[0]
        if b > self.capacity:
            raise ValueError(f"enqueue of {b} rows exceeds capacity {self.capacity}")
        if b == 0:
            return
        _require_unit_rows(keys, "enqueue keys", tol=1e-4)
        idx = (self.cursor + np.arange(b)) % self.capacity
        self.storage[idx] = keys.astype(self.storage.dtype)
        self.cursor = int((self.cursor + b) % self.capacity)
        self.filled = min(self.filled + b, self.capacity)


def _require_unit_rows(v: np.ndarray, what: str, tol: float = UNIT_NORM_TOL) -> None:
    norms = np.sqrt((v.astype(np.float64) ** 2).sum(axis=1))
    dev = np.abs(norms - 1.0)
    if np.any(dev > tol):
        bad = int(np.argmax(dev))
        raise ValueError(
            f"{what}: row {bad} has norm {norms[bad]:.6f}, "
            f"deviates from 1 by more than {tol}"
        )


def info_nce_loss(q: np.ndarray, k_pos: np.ndarray, queue: MemoryQueue,
                  tau: float) -> tuple[float, np.ndarray]:
    """Softmax contrastive loss of each query against its positive key plus
    the queue's negatives, at temperature tau. Returns (mean loss, dL/dq);
    keys and queue entries are stop-gradient."""
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    if q.shape != k_pos.shape or q.ndim != 2:
        raise ShapeError(f"info_nce: q {q.shape} vs k_pos {k_pos.shape}")
    _require_unit_rows(q, "info_nce queries")
    _require_unit_rows(k_pos, "info_nce positive keys")
    negs = queue.negatives()
    b = q.shape[0]
    l_pos = (q * k_pos).sum(axis=1, keepdims=True) / tau       # (B,1)
    l_neg = (q @ negs.T) / tau if len(negs) else np.zeros((b, 0), dtype=q.dtype)
    logits = np.concatenate([l_pos, l_neg], axis=1).astype(np.float64)
    m = logits.max(axis=1, keepdims=True)
    exp = np.exp(logits - m)
    z = exp.sum(axis=1, keepdims=True)
    loss = float(np.mean(-(logits[:, :1] - m) + np.log(z)))
    p = exp / z                                                # (B,1+N)
    grad_q = (p[:, :1] * k_pos - k_pos + p[:, 1:] @ negs) / (tau * b)
    return loss, grad_q.astype(q.dtype)


class EncoderPair:
    """Trainable query encoder plus its EMA key twin. The key encoder is
    only ever written by momentum_update, never by gradients."""

    def __init__(self, query: Backbone, key: Backbone, momentum: float):
        if not 0.0 <= momentum <= 1.0:
            raise ValueError(f"EMA momentum must be in [0,1], got {momentum}")
        qp, kp = query.named_params(), key.named_params()
        if qp.keys() != kp.keys():
            raise ShapeError("encoder pair: parameter names differ")
        for name in qp:
            if qp[name].shape != kp[name].shape:
                raise ShapeError(
                    f"encoder pair: {name} shapes {qp[name].shape} vs {kp[name].shape}"
                )
        self.query = query
        self.key = key
        self.momentum = momentum

    @classmethod
    def create(cls, cfg: BackboneConfig, rng: np.random.Generator,
               momentum: float, dtype=np.float32) -> "EncoderPair":
        query = Backbone(cfg, rng, dtype)
        key = Backbone(cfg, None, dtype)
        key.copy_params_from(query)
        return cls(query, key, momentum)


def momentum_update(pair: EncoderPair) -> None:
    """theta_key <- m*theta_key + (1-m)*theta_query, elementwise."""
    m = pair.momentum
    qp = pair.query.named_params()
    for name, kparam in pair.key.named_params().items():
        qparam = qp[name]
        if qparam.shape != kparam.shape:
            raise ShapeError(f"momentum_update: {name} {qparam.shape} vs {kparam.shape}")
        kparam[...] = m * kparam + (1.0 - m) * qparam


@dataclass
class StepStats:
    pos_sim: float
    level_losses: list = field(default_factory=list)
    query_boxes: list = field(default_factory=list)
    key_boxes: list = field(default_factory=list)


def insloc_step_loss(pair: EncoderPair, query_samples, key_samples,
                     queues, tau: float, roi_specs,
                     box_aug_enabled: bool = True, anchors=None,
                     iou_threshold: float = 0.5,
                     rng: np.random.Generator | None = None,
                     anchor_array=None,
                     enqueue: bool = True) -> tuple[float, StepStats]:
    """One contrastive step over a batch of composite pairs.

    Query features are pooled at (optionally anchor-augmented) query boxes,
    key features always at the ground-truth key boxes. Single-map mode uses
    one queue; pyramid mode pools every level, takes the mean of per-level
    losses against per-level queues, and enqueues keys level by level.
    Fills the query encoder's gradient buffers (zeroing them first); the
    key encoder gets no gradients.
    """
    n_maps = pair.query.num_maps()
    if len(queues) != n_maps or len(roi_specs) != n_maps:
        raise ValueError(
            f"expected {n_maps} queues/roi_specs for this backbone, "
            f"got {len(queues)}/{len(roi_specs)}"
        )
    if len(query_samples) != len(key_samples) or not query_samples:
        raise ValueError("query and key sample lists must be non-empty and aligned")
    b = len(query_samples)

    q_boxes = [s.bbox for s in query_samples]
    if box_aug_enabled:
        if anchors is None or rng is None:
            raise ValueError("box augmentation requires anchors and an rng")
        q_boxes = [augment_bbox(bx, anchors, iou_threshold, rng, anchor_array)
                   for bx in q_boxes]
    k_boxes = [s.bbox for s in key_samples]
    batch_idx = list(range(b))

    imgs_q = image_batch_to_tensor([s.image for s in query_samples])
    imgs_k = image_batch_to_tensor([s.image for s in key_samples])

    pair.query.zero_grads()
    pair.query.clear_caches()
    maps_q = pair.query.forward(imgs_q, keep=True)
    maps_k = pair.key.forward(imgs_k, keep=False)

    weight = 1.0 / n_maps
    total_loss = 0.0
    pos_sims = []
    level_losses = []
    pending = []  # (grad_vq, norm_cache, q_boxes, fmap_shape, spec) per level
    to_enqueue = []
    for lvl in range(n_maps):
        pooled_q = roi_align_batch(maps_q[lvl], q_boxes, batch_idx, roi_specs[lvl])
        pooled_k = roi_align_batch(maps_k[lvl], k_boxes, batch_idx, roi_specs[lvl])
        emb_q = pair.query.head_forward(pooled_q, keep=True)
        emb_k = pair.key.head_forward(pooled_k, keep=False)
        vq, cache_q = l2_normalize(emb_q)
        vk, _ = l2_normalize(emb_k)
        loss_l, grad_vq = info_nce_loss(vq, vk, queues[lvl], tau)
        total_loss += weight * loss_l
        level_losses.append(loss_l)
        pos_sims.append(float((vq * vk).sum(axis=1).mean()))
        pending.append((grad_vq * weight, cache_q,
                        maps_q[lvl].shape, roi_specs[lvl]))
        to_enqueue.append(vk)

    # head caches are a LIFO stack shared across levels: unwind in reverse
    grad_maps = [None] * n_maps
    for lvl in range(n_maps - 1, -1, -1):
        grad_vq, cache_q, fmap_shape, spec = pending[lvl]
        grad_emb = l2_normalize_backward(grad_vq, cache_q)
        grad_pooled = pair.query.head_backward(grad_emb)
        grad_maps[lvl] = roi_align_batch_backward(
            grad_pooled, q_boxes, batch_idx, spec, fmap_shape
        )
    pair.query.backward(grad_maps)

    if enqueue:
        for queue, vk in zip(queues, to_enqueue):
            queue.enqueue(vk)

    stats = StepStats(pos_sim=float(np.mean(pos_sims)),
                      level_losses=level_losses,
                      query_boxes=q_boxes, key_boxes=k_boxes)
    return float(total_loss), stats
