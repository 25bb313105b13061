"""Dense layers with hand-wired forward and backward passes.

Everything is plain numpy. There is no autodiff tape: each layer caches
what its own backward needs (a LIFO stack, so a layer reused several
times per step, like the FPN's shared MLP head, backpropagates correctly
when unwound in reverse order). Parameters live in float32 by default;
a float64 path exists for finite-difference gradient checks.

Layer contract: forward followed by backward never mutates parameter
values, only the gradient buffers, and every parameter has exactly one
gradient buffer of the same shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

DEFAULT_DTYPE = np.float32


class ShapeError(ValueError):
    """Raised when tensor shapes do not line up."""


def require_shape(name: str, arr: np.ndarray, expected: tuple) -> None:
    """Check arr.shape against expected; None entries are wildcards."""
    if len(arr.shape) != len(expected) or any(
        e is not None and a != e for a, e in zip(arr.shape, expected)
    ):
        raise ShapeError(f"{name}: expected shape {expected}, got {arr.shape}")


def uniform_fan_in(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    # sqrt(6/fan_in) keeps activation variance roughly constant through
    # rectifier stacks; smaller gains stall contrastive training at desk scale
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Layer:
    """Base class: named parameters, matching gradient buffers, cache stack."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache: list = []

    def add_param(self, name: str, value: np.ndarray) -> None:
        self.params[name] = value
        self.grads[name] = np.zeros_like(value)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def clear_cache(self) -> None:
        self._cache.clear()

    def param_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def _pop_cache(self, op: str):
        if not self._cache:
            raise RuntimeError(f"{op}: backward called without a saved forward activation")
        return self._cache.pop()


class Conv2d(Layer):
    """Cross-correlation with bias, via im2col and a single BLAS matmul."""

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1,
                 pad: int = 0, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        fan_in = in_ch * kernel * kernel
        if rng is None:
            weight = np.zeros((out_ch, in_ch, kernel, kernel), dtype=dtype)
        else:
            weight = uniform_fan_in(rng, (out_ch, in_ch, kernel, kernel), fan_in, dtype)
        self.add_param("w", weight)
        self.add_param("b", np.zeros(out_ch, dtype=dtype))

    def out_hw(self, h: int, w: int) -> tuple[int, int]:
        k, s, p = self.kernel, self.stride, self.pad
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(
                f"conv2d: input {h}x{w} too small for kernel {k}, stride {s}, pad {p}"
            )
        return ho, wo

    def _cols(self, x: np.ndarray) -> tuple[np.ndarray, int, int]:
        b, c, h, w = x.shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.out_hw(h, w)
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        sb, sc, sh, sw = xp.strides
        win = np.lib.stride_tricks.as_strided(
            xp, (b, c, ho, wo, k, k), (sb, sc, sh * s, sw * s, sh, sw)
        )
        cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(
            b * ho * wo, c * k * k
        )
        return cols, ho, wo

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != self.in_ch:
            raise ShapeError(
                f"conv2d: expected input (B,{self.in_ch},H,W), got {x.shape} "
                f"for weight {self.params['w'].shape}"
            )
        b = x.shape[0]
        cols, ho, wo = self._cols(x)
        wmat = self.params["w"].reshape(self.out_ch, -1)
        out = cols @ wmat.T + self.params["b"]
        y = out.reshape(b, ho, wo, self.out_ch).transpose(0, 3, 1, 2)
        if keep:
            self._cache.append((cols, x.shape))
        return np.ascontiguousarray(y)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        cols, x_shape = self._pop_cache("conv2d")
        b, c, h, w = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        ho, wo = self.out_hw(h, w)
        if grad_out.shape != (b, self.out_ch, ho, wo):
            raise ShapeError(
                f"conv2d backward: grad_out {grad_out.shape} does not match "
                f"forward output {(b, self.out_ch, ho, wo)}"
            )
        go = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(-1, self.out_ch)
        wmat = self.params["w"].reshape(self.out_ch, -1)
        self.grads["w"] += (go.T @ cols).reshape(self.params["w"].shape)
        self.grads["b"] += go.sum(axis=0)
        gcols = (go @ wmat).reshape(b, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
        gxp = np.zeros((b, c, h + 2 * p, w + 2 * p), dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                gxp[:, :, i:i + s * ho:s, j:j + s * wo:s] += gcols[:, :, :, :, i, j]
        return gxp[:, :, p:p + h, p:p + w] if p else gxp


class ReLU(Layer):
    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        y = np.maximum(x, 0)
        if keep:
            self._cache.append(x > 0)
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        mask = self._pop_cache("relu")
        if grad_out.shape != mask.shape:
            raise ShapeError(
                f"relu backward: grad_out {grad_out.shape} vs forward {mask.shape}"
            )
        return grad_out * mask


class MaxPool2d(Layer):
    def __init__(self, kernel: int, stride: int | None = None):
        super().__init__()
        self.kernel = kernel
        self.stride = kernel if stride is None else stride

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        b, c, h, w = x.shape
        k, s = self.kernel, self.stride
        ho, wo = (h - k) // s + 1, (w - k) // s + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"maxpool2d: input {h}x{w} too small for kernel {k}")
        sb, sc, sh, sw = x.strides
        win = np.lib.stride_tricks.as_strided(
            x, (b, c, ho, wo, k, k), (sb, sc, sh * s, sw * s, sh, sw)
        )
        flat = win.reshape(b, c, ho, wo, k * k)
        arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        if keep:
            self._cache.append((arg, x.shape))
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        arg, x_shape = self._pop_cache("maxpool2d")
        b, c, h, w = x_shape
        k, s = self.kernel, self.stride
        ho, wo = arg.shape[2], arg.shape[3]
        gx = np.zeros(x_shape, dtype=grad_out.dtype)
        oh = np.arange(ho)[:, None] * s
        ow = np.arange(wo)[None, :] * s
        rows = oh[None, None] + arg // k
        cols = ow[None, None] + arg % k
        bi = np.arange(b)[:, None, None, None]
        ci = np.arange(c)[None, :, None, None]
        np.add.at(gx, (bi, ci, rows, cols), grad_out)
        return gx


class ChannelNorm(Layer):
    """Parameter-free per-sample, per-channel standardization over H,W."""

    def __init__(self, eps: float = 1e-5):
        super().__init__()
        self.eps = eps

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        mu = x.mean(axis=(2, 3), keepdims=True)
        var = x.var(axis=(2, 3), keepdims=True)
        inv = 1.0 / np.sqrt(var + self.eps)
        y = (x - mu) * inv
        if keep:
            self._cache.append((y, inv))
        return y

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        y, inv = self._pop_cache("channelnorm")
        g_mean = grad_out.mean(axis=(2, 3), keepdims=True)
        gy_mean = (grad_out * y).mean(axis=(2, 3), keepdims=True)
        return inv * (grad_out - g_mean - y * gy_mean)


class Linear(Layer):
    def __init__(self, in_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_dim, self.out_dim = in_dim, out_dim
        if rng is None:
            weight = np.zeros((out_dim, in_dim), dtype=dtype)
        else:
            weight = uniform_fan_in(rng, (out_dim, in_dim), in_dim, dtype)
        self.add_param("w", weight)
        self.add_param("b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        if x.ndim != 2 or x.shape[1] != self.in_dim:
            raise ShapeError(
                f"linear: expected input (B,{self.in_dim}), got {x.shape}"
            )
        if keep:
            self._cache.append(x)
        return x @ self.params["w"].T + self.params["b"]

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        x = self._pop_cache("linear")
        if grad_out.shape != (x.shape[0], self.out_dim):
            raise ShapeError(
                f"linear backward: grad_out {grad_out.shape} vs output "
                f"{(x.shape[0], self.out_dim)}"
            )
        self.grads["w"] += grad_out.T @ x
        self.grads["b"] += grad_out.sum(axis=0)
        return grad_out @ self.params["w"]


class MlpHead(Layer):
    """Two-layer projection head: linear, rectifier, linear. Output is raw
    (unit-sphere projection is a separate op)."""

    def __init__(self, in_dim: int, hidden_dim: int, out_dim: int,
                 rng: np.random.Generator | None = None, dtype=DEFAULT_DTYPE):
        super().__init__()
        self.in_dim, self.hidden_dim, self.out_dim = in_dim, hidden_dim, out_dim
        self.fc1 = Linear(in_dim, hidden_dim, rng, dtype)
        self.act = ReLU()
        self.fc2 = Linear(hidden_dim, out_dim, rng, dtype)

    def sublayers(self) -> dict[str, Layer]:
        return {"fc1": self.fc1, "fc2": self.fc2}

    def forward(self, x: np.ndarray, keep: bool = True) -> np.ndarray:
        return self.fc2.forward(self.act.forward(self.fc1.forward(x, keep), keep), keep)

    def backward(self, grad_out: np.ndarray) -> np.ndarray:
        return self.fc1.backward(self.act.backward(self.fc2.backward(grad_out)))

    def zero_grads(self) -> None:
        self.fc1.zero_grads()
        self.fc2.zero_grads()

    def clear_cache(self) -> None:
        for sub in (self.fc1, self.act, self.fc2):
            sub.clear_cache()

    def param_count(self) -> int:
        return self.fc1.param_count() + self.fc2.param_count()


def l2_normalize(v: np.ndarray, eps: float = 1e-12) -> tuple[np.ndarray, tuple]:
    """Project rows of (B,D) onto the unit sphere. Returns (output, cache)."""
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize: expected (B,D), got {v.shape}")
    norms = np.sqrt((v * v).sum(axis=1))
    if np.any(norms <= eps):
        bad = int(np.argmin(norms))
        raise ValueError(
            f"l2_normalize: degenerate input, row {bad} has norm {norms[bad]:.3e}"
        )
    y = v / norms[:, None]
    return y, (y, norms)


def l2_normalize_backward(grad_out: np.ndarray, cache: tuple) -> np.ndarray:
    """Full quotient-rule Jacobian: g/|v| - y (g.y)/|v|."""
    y, norms = cache
    dots = (grad_out * y).sum(axis=1, keepdims=True)
    return (grad_out - y * dots) / norms[:, None]


def global_mean_pool(x: np.ndarray) -> tuple[np.ndarray, tuple]:
    """(B,C,H,W) -> (B,C) spatial mean. Returns (output, cache)."""
    return x.mean(axis=(2, 3)), x.shape


def global_mean_pool_backward(grad_out: np.ndarray, shape: tuple) -> np.ndarray:
    b, c, h, w = shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), shape).astype(
        grad_out.dtype
    )


def upsample_nearest(x: np.ndarray, factor: int) -> np.ndarray:
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_backward(grad_out: np.ndarray, factor: int) -> np.ndarray:
    b, c, h, w = grad_out.shape
    return grad_out.reshape(b, c, h // factor, factor, w // factor, factor).sum(
        axis=(3, 5)
    )


@dataclass(frozen=True)
class BackboneConfig:
    """Toy CNN config. Defaults give total stride 16 at the single (C4-style)
    pooling map; the FPN variant exposes all four stage maps through lateral
    connections at a common width."""

    variant: str = "c4"
    widths: tuple = (16, 32, 64, 64)
    stage_strides: tuple = (2, 2, 2, 2)
    kernel: int = 3
    fpn_channels: int = 64
    embed_dim: int = 128
    hidden_dim: int = 0  # 0 means same as the head input width
    channel_norm: bool = False

    def __post_init__(self):
        if self.variant not in ("c4", "fpn"):
            raise ValueError(f"variant must be 'c4' or 'fpn', got {self.variant!r}")
        if len(self.widths) != len(self.stage_strides) or not self.widths:
            raise ValueError("widths and stage_strides must be non-empty and aligned")
        if any(s < 1 for s in self.stage_strides) or any(w < 1 for w in self.widths):
            raise ValueError("widths and strides must be positive")
        if self.variant == "fpn" and len(self.widths) != 4:
            raise ValueError("fpn variant requires exactly 4 stages")

    @property
    def cumulative_strides(self) -> tuple:
        out, acc = [], 1
        for s in self.stage_strides:
            acc *= s
            out.append(acc)
        return tuple(out)

    @property
    def total_stride(self) -> int:
        return self.cumulative_strides[-1]

    @property
    def head_in(self) -> int:
        return self.widths[-1] if self.variant == "c4" else self.fpn_channels

    @property
    def mlp_hidden(self) -> int:
        return self.hidden_dim if self.hidden_dim > 0 else self.head_in

    def expected_param_count(self) -> int:
        """Closed-form parameter count (conv: co*ci*k*k+co, linear: o*i+o)."""

        def conv(ci, co, k):
            return co * ci * k * k + co

        def lin(i, o):
            return o * i + o

        n, ci = 0, 3
        for w in self.widths:
            n += conv(ci, w, self.kernel)
            ci = w
        if self.variant == "fpn":
            for w in self.widths:
                n += conv(w, self.fpn_channels, 1)
        else:
            n += conv(self.widths[-1], self.widths[-1], self.kernel)
        n += lin(self.head_in, self.mlp_hidden) + lin(self.mlp_hidden, self.embed_dim)
        return n


class Backbone:
    """Fixed toy CNN with an explicit backward pass.

    C4 variant: 4 rectified conv stages, one feature map (last stage), and a
    post-RoI head of one conv stage plus the 2-layer MLP. FPN variant: 1x1
    lateral convs on every stage output, top-down nearest-neighbor upsampling
    additions, 4 output maps, and a shared MLP head after RoI pooling.
    """

    def __init__(self, cfg: BackboneConfig, rng: np.random.Generator | None = None,
                 dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = dtype
        self.stages: list[Conv2d] = []
        self.stage_acts: list[ReLU] = []
        self.stage_norms: list[ChannelNorm] = []
        ci = 3
        for w, s in zip(cfg.widths, cfg.stage_strides):
            self.stages.append(Conv2d(ci, w, cfg.kernel, stride=s, pad=cfg.kernel // 2,
                                      rng=rng, dtype=dtype))
            self.stage_acts.append(ReLU())
            self.stage_norms.append(ChannelNorm())
            ci = w
        self.fpn_lateral: list[Conv2d] = []
        self.head_conv: Conv2d | None = None
        self.head_act: ReLU | None = None
        if cfg.variant == "fpn":
            for w in cfg.widths:
                self.fpn_lateral.append(Conv2d(w, cfg.fpn_channels, 1, rng=rng,
                                               dtype=dtype))
        else:
            self.head_conv = Conv2d(cfg.widths[-1], cfg.widths[-1], cfg.kernel,
                                    stride=1, pad=cfg.kernel // 2, rng=rng, dtype=dtype)
            self.head_act = ReLU()
        self.mlp = MlpHead(cfg.head_in, cfg.mlp_hidden, cfg.embed_dim, rng, dtype)
        self._pool_caches: list = []

    # ---- feature extraction -------------------------------------------------

    def feature_strides(self) -> list[int]:
        if self.cfg.variant == "c4":
            return [self.cfg.total_stride]
        return list(self.cfg.cumulative_strides)

    def num_maps(self) -> int:
        return 1 if self.cfg.variant == "c4" else len(self.stages)

    def forward(self, x: np.ndarray, keep: bool = True) -> list[np.ndarray]:
        """Image batch (B,3,H,W) to feature map list (1 for C4, 4 for FPN)."""
        if x.ndim != 4 or x.shape[1] != 3:
            raise ShapeError(f"backbone: expected (B,3,H,W), got {x.shape}")
        total = self.cfg.total_stride
        if x.shape[2] % total or x.shape[3] % total:
            raise ShapeError(
                f"backbone: spatial size {x.shape[2]}x{x.shape[3]} not divisible "
                f"by total stride {total}"
            )
        outs = []
        h = x.astype(self.dtype, copy=False)
        for conv, norm, act in zip(self.stages, self.stage_norms, self.stage_acts):
            h = conv.forward(h, keep)
            if self.cfg.channel_norm:
                h = norm.forward(h, keep)
            h = act.forward(h, keep)
            outs.append(h)
        if self.cfg.variant == "c4":
            return [outs[-1]]
        laterals = [lat.forward(c, keep) for lat, c in zip(self.fpn_lateral, outs)]
        strides = self.cfg.cumulative_strides
        maps = [None] * len(laterals)
        maps[-1] = laterals[-1]
        for i in range(len(laterals) - 2, -1, -1):
            factor = strides[i + 1] // strides[i]
            maps[i] = laterals[i] + upsample_nearest(maps[i + 1], factor)
        return maps

    def backward(self, grad_maps: list[np.ndarray]) -> np.ndarray:
        """Adjoint of forward; grad_maps aligns with forward's output list."""
        if self.cfg.variant == "c4":
            g_stage = [None] * len(self.stages)
            g_stage[-1] = grad_maps[0]
        else:
            strides = self.cfg.cumulative_strides
            gl = [g.copy() for g in grad_maps]
            for i in range(len(gl) - 1):
                factor = strides[i + 1] // strides[i]
                gl[i + 1] += upsample_nearest_backward(gl[i], factor)
            g_stage = [lat.backward(g) for lat, g in zip(self.fpn_lateral, gl)]
        g = None
        for i in range(len(self.stages) - 1, -1, -1):
            gi = g_stage[i] if g is None else (
                g if g_stage[i] is None else g + g_stage[i]
            )
            gi = self.stage_acts[i].backward(gi)
            if self.cfg.channel_norm:
                gi = self.stage_norms[i].backward(gi)
            g = self.stages[i].backward(gi)
        return g

    # ---- post-RoI head ------------------------------------------------------

    def head_forward(self, pooled: np.ndarray, keep: bool = True) -> np.ndarray:
        """RoI-pooled features (B,C,P,P) to raw embeddings (B,embed_dim)."""
        h = pooled
        if self.head_conv is not None:
            h = self.head_act.forward(self.head_conv.forward(h, keep), keep)
        v, shape = global_mean_pool(h)
        if keep:
            self._pool_caches.append(shape)
        return self.mlp.forward(v, keep)

    def head_backward(self, grad_emb: np.ndarray) -> np.ndarray:
        gv = self.mlp.backward(grad_emb)
        if not self._pool_caches:
            raise RuntimeError("head backward called without a saved forward")
        gh = global_mean_pool_backward(gv, self._pool_caches.pop())
        if self.head_conv is not None:
            gh = self.head_conv.backward(self.head_act.backward(gh))
        return gh

    def readout_forward(self, pooled: np.ndarray) -> np.ndarray:
        """Detection-head features for readout probes: the post-RoI conv
        stage (single-map variant) or the pooled pyramid features,
        spatially averaged. The contrastive projection MLP is excluded;
        readouts follow the detection path, as in standard momentum-contrast
        evaluation where the projection head is discarded."""
        h = pooled
        if self.head_conv is not None:
            h = self.head_act.forward(self.head_conv.forward(h, keep=False),
                                      keep=False)
        v, _ = global_mean_pool(h)
        return v

    def readout_dim(self) -> int:
        return self.cfg.head_in

    # ---- parameter plumbing -------------------------------------------------

    def _layer_map(self) -> dict[str, Layer]:
        layers = {f"stage{i}": conv for i, conv in enumerate(self.stages)}
        for i, lat in enumerate(self.fpn_lateral):
            layers[f"lateral{i}"] = lat
        if self.head_conv is not None:
            layers["head_conv"] = self.head_conv
        layers["mlp/fc1"] = self.mlp.fc1
        layers["mlp/fc2"] = self.mlp.fc2
        return layers

    def named_params(self) -> dict[str, np.ndarray]:
        return {
            f"{ln}/{pn}": p
            for ln, layer in self._layer_map().items()
            for pn, p in layer.params.items()
        }

    def named_grads(self) -> dict[str, np.ndarray]:
        return {
            f"{ln}/{pn}": g
            for ln, layer in self._layer_map().items()
            for pn, g in layer.grads.items()
        }

    def zero_grads(self) -> None:
        for layer in self._layer_map().values():
            layer.zero_grads()

    def clear_caches(self) -> None:
        for layer in self.stages + self.stage_acts + self.stage_norms + self.fpn_lateral:
            layer.clear_cache()
        if self.head_conv is not None:
            self.head_conv.clear_cache()
            self.head_act.clear_cache()
        self.mlp.clear_cache()
        self._pool_caches.clear()

    def param_count(self) -> int:
        return sum(p.size for p in self.named_params().values())

    def copy_params_from(self, other: "Backbone") -> None:
        mine, theirs = self.named_params(), other.named_params()
        for name, p in mine.items():
            if p.shape != theirs[name].shape:
                raise ShapeError(
                    f"copy_params_from: {name} shape {theirs[name].shape} vs {p.shape}"
                )
            p[...] = theirs[name]


def image_batch_to_tensor(images) -> np.ndarray:
    """Stack HxWx3 float images into a (B,3,H,W) float32 tensor."""
    arr = np.stack([np.asarray(im) for im in images])
    return np.ascontiguousarray(arr.transpose(0, 3, 1, 2), dtype=DEFAULT_DTYPE)
