"""Pretraining loop: SGD with momentum and weight decay, cosine learning
rate, the region-contrastive and holistic-baseline modes, and bit-exact
binary checkpointing.

Per-step randomness is derived from (seed, stage, step) substreams, so a
resumed run needs no mutable RNG internals: restoring parameters, queue
contents, optimizer velocities, and the step counter reproduces the
uninterrupted run bit for bit.
"""

from __future__ import annotations

import dataclasses
import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from .boxes import AnchorConfig, BBox, boxes_to_array, clipped_anchor_grid
from .composition import CompositeSample, CompositionParams, make_pair
from .contrastive import (EncoderPair, MemoryQueue, insloc_step_loss,
                          momentum_update)
from .imaging import AugmentParams, Gallery, augment_view, generate_gallery
from .nn import BackboneConfig, ShapeError
from .rng import substream
from .roialign import RoiSpec

MODES = ("insloc-c4", "insloc-fpn", "baseline-holistic")


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    """Half-cosine decay from base_lr at step 0 to 0 at total_steps."""
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0,{total_steps}]")
    if total_steps == 0:
        return base_lr
    return 0.5 * base_lr * (1.0 + np.cos(np.pi * step / total_steps))


def sgd_step(params: dict, grads: dict, lr: float, momentum: float,
             weight_decay: float, velocities: dict) -> None:
    """g <- grad + wd*theta; v <- momentum*v + g; theta <- theta - lr*v."""
    for name, theta in params.items():
        g = grads[name]
        v = velocities[name]
        if g.shape != theta.shape or v.shape != theta.shape:
            raise ShapeError(
                f"sgd_step: {name} param {theta.shape}, grad {g.shape}, "
                f"velocity {v.shape}"
            )
        step_g = g + weight_decay * theta
        v[...] = momentum * v + step_g
        theta[...] = theta - lr * v


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "insloc-c4"
    steps: int = 2000
    batch_size: int = 32
    base_lr: float = 0.03
    sgd_momentum: float = 0.9
    weight_decay: float = 1e-4
    temperature: float = 0.2
    queue_capacity: int = 1024
    queue_prefill: str = "random"
    ema_momentum: float = 0.999
    seed: int = 0
    gallery_k: int = 256
    gallery_size: int = 64
    augment: AugmentParams = field(default_factory=AugmentParams)
    composition: CompositionParams | None = None
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    iou_threshold: float = 0.5
    box_aug: bool = True
    backbone: BackboneConfig | None = None
    roi_output_size: int = 7
    roi_sampling: int = 2

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        for name in ("base_lr", "temperature"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if not 0 <= self.sgd_momentum < 1:
            raise ValueError("sgd_momentum must be in [0,1)")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0 <= self.ema_momentum <= 1:
            raise ValueError("ema_momentum must be in [0,1]")
        if self.queue_capacity < 1:
            raise ValueError("queue_capacity must be >= 1")
        if self.seed < 0 or self.seed >= 2 ** 64:
            raise ValueError("seed must fit in a u64")
        if self.gallery_k < 3:
            raise ValueError("gallery_k must be >= 3 (instance + 2 backgrounds)")
        if not 0 < self.iou_threshold < 1:
            raise ValueError("iou_threshold must be in (0,1)")
        if self.composition is None:
            aspect = (0.5, 2.0) if self.mode == "insloc-fpn" else (1.0 / 3.0, 3.0)
            object.__setattr__(self, "composition", CompositionParams(
                composite_size=self.gallery_size, fg_aspect=aspect))
        if self.backbone is None:
            variant = "fpn" if self.mode == "insloc-fpn" else "c4"
            object.__setattr__(self, "backbone", BackboneConfig(variant=variant))

    def canonical_text(self) -> str:
        """Flat, sorted key=value form; the basis of the config hash."""
        lines = []

        def emit(prefix, obj):
            for f in dataclasses.fields(obj):
                v = getattr(obj, f.name)
                if dataclasses.is_dataclass(v):
                    emit(f"{prefix}{f.name}.", v)
                else:
                    lines.append(f"{prefix}{f.name}={v!r}")

        emit("", self)
        return "\n".join(sorted(lines)) + "\n"


def config_hash(config: TrainConfig) -> int:
    digest = hashlib.sha256(config.canonical_text().encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class Trace:
    loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    pos_sim: list = field(default_factory=list)


class TrainState:
    """Everything a run owns: encoders, queues, optimizer velocities,
    gallery, precomputed anchors, RoI specs, the step counter, metrics."""

    def __init__(self, config: TrainConfig):
        self.config = config
        self.gallery: Gallery = generate_gallery(
            config.gallery_k, config.gallery_size, config.seed
        )
        init_rng = substream(config.seed, "init")
        self.pair = EncoderPair.create(config.backbone, init_rng,
                                       config.ema_momentum)
        strides = self.pair.query.feature_strides()
        self.roi_specs = [
            RoiSpec(output_size=config.roi_output_size,
                    sampling=config.roi_sampling,
                    spatial_scale=1.0 / s)
            for s in strides
        ]
        dim = config.backbone.embed_dim
        self.queues = [
            MemoryQueue(config.queue_capacity, dim,
                        rng=substream(config.seed, "queue", lvl),
                        prefill=config.queue_prefill)
            for lvl in range(len(strides))
        ]
        self.velocities = {
            name: np.zeros_like(p)
            for name, p in self.pair.query.named_params().items()
        }
        size = config.composition.composite_size
        self.anchor_boxes = clipped_anchor_grid(config.anchors, size, size)
        self.anchor_array = boxes_to_array(self.anchor_boxes)
        self.step = 0
        self.trace = Trace()

    # ---- one optimization step ---------------------------------------------

    def _make_batch(self) -> tuple[list[CompositeSample], list[CompositeSample]]:
        cfg = self.config
        sample_rng = substream(cfg.seed, "sample", self.step)
        pair_rng = substream(cfg.seed, "pair", self.step)
        ids = sample_rng.integers(0, cfg.gallery_k, size=cfg.batch_size)
        queries, keys = [], []
        if cfg.mode == "baseline-holistic":
            size = cfg.composition.composite_size
            full = BBox(0.0, 0.0, float(size), float(size))
            aug = dataclasses.replace(cfg.augment, view_size=size)
            for inst in ids:
                v1 = augment_view(self.gallery.images[inst], aug, pair_rng)
                v2 = augment_view(self.gallery.images[inst], aug, pair_rng)
                queries.append(CompositeSample(v1, full, int(inst), -1))
                keys.append(CompositeSample(v2, full, int(inst), -1))
        else:
            for inst in ids:
                q, k = make_pair(self.gallery, int(inst), cfg.augment,
                                 cfg.composition, pair_rng)
                queries.append(q)
                keys.append(k)
        return queries, keys

    def train_step(self) -> tuple[float, float, float]:
        """Run one step; returns (loss, lr, positive cosine similarity)."""
        cfg = self.config
        lr = cosine_lr(self.step, cfg.steps, cfg.base_lr)
        queries, keys = self._make_batch()
        box_aug = cfg.box_aug and cfg.mode != "baseline-holistic"
        loss, stats = insloc_step_loss(
            self.pair, queries, keys, self.queues, cfg.temperature,
            self.roi_specs, box_aug_enabled=box_aug,
            anchors=self.anchor_boxes, iou_threshold=cfg.iou_threshold,
            rng=substream(cfg.seed, "boxaug", self.step),
            anchor_array=self.anchor_array,
        )
        sgd_step(self.pair.query.named_params(), self.pair.query.named_grads(),
                 lr, cfg.sgd_momentum, cfg.weight_decay, self.velocities)
        momentum_update(self.pair)
        self.step += 1
        self.trace.loss.append(loss)
        self.trace.lr.append(lr)
        self.trace.pos_sim.append(stats.pos_sim)
        return loss, lr, stats.pos_sim

    def run(self, until_step: int | None = None, metrics=None) -> None:
        """Advance to until_step (default: config.steps), streaming
        step<TAB>loss<TAB>lr lines to `metrics` if given."""
        target = self.config.steps if until_step is None else until_step
        if target > self.config.steps:
            raise ValueError(f"cannot run past config.steps={self.config.steps}")
        while self.step < target:
            at = self.step
            loss, lr, _ = self.train_step()
            if metrics is not None:
                metrics.write(f"{at}\t{loss:.6f}\t{lr:.6f}\n")


def pretrain(config: TrainConfig, metrics=None) -> TrainState:
    """Full run per config; deterministic in config.seed."""
    state = TrainState(config)
    state.run(metrics=metrics)
    return state


# ---------------------------------------------------------------------------
# checkpoint format: magic "ILCK", u32 version, u64 config hash, u64 step,
# u32 blob count, then per blob: u32 name length, name bytes, u8 dtype tag
# (0=float32, 1=uint32), u8 rank, rank x u64 dims, raw little-endian 32-bit
# values. Everything little-endian.
# ---------------------------------------------------------------------------

MAGIC = b"ILCK"
CKPT_VERSION = 1
_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<u4")}
_TAG_FOR = {np.dtype(np.float32): 0, np.dtype(np.uint32): 1}


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    version: int
    config_hash: int
    step: int
    blobs: dict  # name -> ndarray (float32 or uint32)


def write_checkpoint(path, step: int, cfg_hash: int, blobs: dict) -> None:
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", CKPT_VERSION))
        f.write(struct.pack("<Q", cfg_hash))
        f.write(struct.pack("<Q", step))
        f.write(struct.pack("<I", len(blobs)))
        for name in sorted(blobs):
            arr = np.ascontiguousarray(blobs[name])
            tag = _TAG_FOR.get(arr.dtype)
            if tag is None:
                raise CheckpointError(
                    f"blob {name!r}: dtype {arr.dtype} not storable "
                    "(float32 or uint32 only)"
                )
            nb = name.encode("utf-8")
            f.write(struct.pack("<I", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", tag, arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<Q", d))
            f.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        blob = f.read()

    def need(pos, n, what):
        if pos + n > len(blob):
            raise CheckpointError(
                f"byte {pos}: truncated checkpoint, need {n} bytes for {what}, "
                f"have {len(blob) - pos}"
            )
        return blob[pos:pos + n], pos + n

    raw, pos = need(0, 4, "magic")
    if raw != MAGIC:
        raise CheckpointError(f"byte 0: bad magic {raw!r}, expected {MAGIC!r}")
    raw, pos = need(pos, 4, "version")
    version = struct.unpack("<I", raw)[0]
    if version != CKPT_VERSION:
        raise CheckpointError(
            f"byte 4: unsupported version {version}, expected {CKPT_VERSION}"
        )
    raw, pos = need(pos, 8, "config hash")
    cfg_hash = struct.unpack("<Q", raw)[0]
    raw, pos = need(pos, 8, "step")
    step = struct.unpack("<Q", raw)[0]
    raw, pos = need(pos, 4, "blob count")
    count = struct.unpack("<I", raw)[0]
    blobs = {}
    for _ in range(count):
        raw, pos = need(pos, 4, "name length")
        nlen = struct.unpack("<I", raw)[0]
        raw, pos = need(pos, nlen, "name")
        name = raw.decode("utf-8")
        raw, pos = need(pos, 2, "dtype/rank")
        tag, rank = struct.unpack("<BB", raw)
        if tag not in _DTYPE_TAGS:
            raise CheckpointError(f"byte {pos - 2}: unknown dtype tag {tag}")
        dims = []
        for _ in range(rank):
            raw, pos = need(pos, 8, "dim")
            dims.append(struct.unpack("<Q", raw)[0])
        n_values = int(np.prod(dims)) if dims else 1
        raw, pos = need(pos, 4 * n_values, f"blob {name!r} data")
        blobs[name] = np.frombuffer(raw, dtype=_DTYPE_TAGS[tag]).reshape(dims).copy()
    if pos != len(blob):
        raise CheckpointError(
            f"byte {pos}: {len(blob) - pos} trailing bytes after last blob"
        )
    return Checkpoint(version=version, config_hash=cfg_hash, step=step, blobs=blobs)


def _u32_pair(value: int) -> list[int]:
    return [value & 0xFFFFFFFF, (value >> 32) & 0xFFFFFFFF]


def state_blobs(state: TrainState) -> dict:
    blobs = {}
    for name, p in state.pair.query.named_params().items():
        blobs[f"q/{name}"] = p
    for name, p in state.pair.key.named_params().items():
        blobs[f"k/{name}"] = p
    for name, v in state.velocities.items():
        blobs[f"v/{name}"] = v
    for lvl, queue in enumerate(state.queues):
        blobs[f"queue{lvl}/storage"] = queue.storage
        blobs[f"queue{lvl}/meta"] = np.array([queue.cursor, queue.filled],
                                             dtype=np.uint32)
    # per-step streams are pure in (seed, step); record the derivation inputs
    blobs["rng/state"] = np.array(
        _u32_pair(state.config.seed) + _u32_pair(state.step), dtype=np.uint32
    )
    return blobs


def save_checkpoint(path, state: TrainState) -> None:
    write_checkpoint(path, state.step, config_hash(state.config),
                     state_blobs(state))


def resume(config: TrainConfig, path) -> TrainState:
    """Rebuild a TrainState from a checkpoint written under this config."""
    ckpt = load_checkpoint(path)
    expect = config_hash(config)
    if ckpt.config_hash != expect:
        raise CheckpointError(
            f"checkpoint config hash {ckpt.config_hash:#018x} does not match "
            f"this config ({expect:#018x})"
        )
    state = TrainState(config)
    state.step = ckpt.step
    for name, p in state.pair.query.named_params().items():
        p[...] = ckpt.blobs[f"q/{name}"]
    for name, p in state.pair.key.named_params().items():
        p[...] = ckpt.blobs[f"k/{name}"]
    for name, v in state.velocities.items():
        v[...] = ckpt.blobs[f"v/{name}"]
    for lvl, queue in enumerate(state.queues):
        queue.storage[...] = ckpt.blobs[f"queue{lvl}/storage"]
        meta = ckpt.blobs[f"queue{lvl}/meta"]
        queue.cursor, queue.filled = int(meta[0]), int(meta[1])
    return state
