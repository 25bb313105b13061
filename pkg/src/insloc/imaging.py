"""Images, the procedural instance gallery, view augmentation, PPM I/O.

An image is an HxWx3 float32 array with channel values in [0,1]. The
gallery is a deterministic stand-in for a photo collection: each instance
is a distinct procedural composite (gradient base, oriented stripes,
blobs, a convex polygon) drawn from its own seeded substream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rng import substream

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


def as_image(arr: np.ndarray) -> np.ndarray:
    a = np.asarray(arr, dtype=np.float32)
    if a.ndim != 3 or a.shape[2] != 3:
        raise ValueError(f"image must be HxWx3, got {a.shape}")
    return a


def clamp01(img: np.ndarray) -> np.ndarray:
    return np.clip(img, 0.0, 1.0)


@dataclass(frozen=True)
class Gallery:
    images: np.ndarray       # (K,H,W,3) float32
    instance_ids: tuple      # 0..K-1
    seed: int

    def __len__(self) -> int:
        return len(self.instance_ids)


@dataclass(frozen=True)
class AugmentParams:
    """Photometric/geometric augmentation menu with MoCo-v2 style defaults."""

    view_size: int = 32
    crop_area: tuple = (0.5, 1.0)       # fraction of source area
    crop_aspect: tuple = (3.0 / 4.0, 4.0 / 3.0)
    brightness: float = 0.4
    contrast: float = 0.4
    saturation: float = 0.4
    grayscale_prob: float = 0.2
    blur_prob: float = 0.5
    blur_sigma: tuple = (0.1, 2.0)
    flip_prob: float = 0.5

    def __post_init__(self):
        for name in ("grayscale_prob", "blur_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must be in [0,1], got {p}")
        for name in ("crop_area", "crop_aspect", "blur_sigma"):
            lo, hi = getattr(self, name)
            if not (0 < lo <= hi):
                raise ValueError(f"{name} range ({lo},{hi}) must satisfy 0 < lo <= hi")
        if self.view_size < 1:
            raise ValueError("view_size must be >= 1")
        for name in ("brightness", "contrast", "saturation"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} strength must be >= 0")


# ---------------------------------------------------------------------------
# procedural gallery
# ---------------------------------------------------------------------------

def _coord_grid(size: int) -> tuple[np.ndarray, np.ndarray]:
    ax = (np.arange(size, dtype=np.float32) + 0.5) / size
    return np.meshgrid(ax, ax, indexing="ij")  # yy, xx in (0,1)


def _gradient_base(rng, size, c0, c1):
    yy, xx = _coord_grid(size)
    theta = rng.uniform(0, 2 * math.pi)
    t = (math.cos(theta) * xx + math.sin(theta) * yy + 1.0) / 2.0
    return c0[None, None, :] + t[..., None] * (c1 - c0)[None, None, :]


def _stripes_mask(rng, size):
    # wavelength stretches toward the bottom, a perspective-like texture
    # gradient shared by every instance (see generate_instance)
    yy, xx = _coord_grid(size)
    theta = rng.uniform(0, 2 * math.pi)
    wavelength = rng.uniform(0.12, 0.4) * (0.55 + 0.9 * yy)
    phase = rng.uniform(0, 2 * math.pi)
    wave = np.sin(2 * math.pi * (math.cos(theta) * xx + math.sin(theta) * yy)
                  / wavelength + phase)
    sharp = rng.uniform(2.0, 8.0)
    return 1.0 / (1.0 + np.exp(-sharp * wave))


def _blob_mask(rng, size):
    yy, xx = _coord_grid(size)
    mask = np.zeros((size, size), dtype=np.float32)
    for _ in range(int(rng.integers(1, 3))):
        cy, cx = rng.uniform(0.15, 0.85, size=2)
        sigma = rng.uniform(0.08, 0.22) * (0.55 + 0.9 * cy)  # lower = bigger
        mask = np.maximum(mask, np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2)
                                       / (2 * sigma * sigma)))
    return mask


def _polygon_mask(rng, size):
    n = int(rng.integers(3, 7))
    cy, cx = rng.uniform(0.3, 0.7, size=2)
    radius = rng.uniform(0.15, 0.35) * (0.6 + 0.8 * cy)
    angles = np.sort(rng.uniform(0, 2 * math.pi, size=n))
    pys = cy + radius * np.sin(angles)
    pxs = cx + radius * np.cos(angles)
    yy, xx = _coord_grid(size)
    inside = np.ones((size, size), dtype=bool)
    for i in range(n):
        y0, x0 = pys[i], pxs[i]
        y1, x1 = pys[(i + 1) % n], pxs[(i + 1) % n]
        # vertices are angle-sorted, so the polygon is convex and "inside"
        # is a fixed side of every edge
        cross = (x1 - x0) * (yy - y0) - (y1 - y0) * (xx - x0)
        inside &= cross >= 0
    return inside.astype(np.float32)


def _illumination_profile(size: int) -> np.ndarray:
    """Shared scene lighting: brighter top, darker corners. Every instance
    gets the same profile, mimicking the spatial regularities of natural
    photographs (and giving localization readouts real content to read)."""
    yy, xx = _coord_grid(size)
    r2 = ((yy - 0.5) ** 2 + (xx - 0.5) ** 2) / 0.5
    return ((1.12 - 0.30 * yy) * (1.0 - 0.25 * r2)).astype(np.float32)[..., None]


def generate_instance(seed: int, index: int, size: int) -> np.ndarray:
    rng = substream(seed, "gallery", index)
    palette = rng.uniform(0.05, 0.95, size=(5, 3)).astype(np.float32)
    img = _gradient_base(rng, size, palette[0], palette[1])
    stripes = _stripes_mask(rng, size)[..., None]
    img = img * (1 - 0.6 * stripes) + palette[2][None, None, :] * (0.6 * stripes)
    blob = _blob_mask(rng, size)[..., None]
    img = img * (1 - 0.7 * blob) + palette[3][None, None, :] * (0.7 * blob)
    poly = _polygon_mask(rng, size)[..., None]
    img = img * (1 - 0.8 * poly) + palette[4][None, None, :] * (0.8 * poly)
    img = img * _illumination_profile(size)
    return clamp01(img).astype(np.float32)


def generate_gallery(k: int, size: int, seed: int) -> Gallery:
    """K distinct procedural instances, bit-identical for a given seed."""
    if k < 2:
        raise ValueError(f"gallery needs at least 2 instances, got {k}")
    images = np.stack([generate_instance(seed, i, size) for i in range(k)])
    return Gallery(images=images, instance_ids=tuple(range(k)), seed=seed)


# ---------------------------------------------------------------------------
# resampling and augmentation
# ---------------------------------------------------------------------------

def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Half-pixel-aligned bilinear resampling with edge clamping."""
    img = as_image(img)
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[:2]
    if (out_h, out_w) == (h, w):
        return img.copy()

    def axis(n_in, n_out):
        src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = (src - lo).astype(np.float32)
        return lo, hi, frac

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = img[y0][:, x0] * (1 - fx)[None, :, None] + img[y0][:, x1] * fx[None, :, None]
    bot = img[y1][:, x0] * (1 - fx)[None, :, None] + img[y1][:, x1] * fx[None, :, None]
    return (top * (1 - fy)[:, None, None] + bot * fy[:, None, None]).astype(np.float32)


def grayscale(img: np.ndarray) -> np.ndarray:
    lum = img @ LUMA
    return np.repeat(lum[..., None], 3, axis=2)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian with edge padding; kernel normalized to sum 1,
    so constant regions pass through (up to float rounding)."""
    if sigma <= 0:
        return img.copy()
    radius = max(1, int(math.ceil(3.0 * sigma)))
    t = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(t * t) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    kernel = kernel.astype(np.float32)
    out = img
    for ax in (0, 1):
        padded = np.pad(out, [(radius, radius) if a == ax else (0, 0)
                              for a in range(3)], mode="edge")
        acc = np.zeros_like(img)
        for i, kv in enumerate(kernel):
            sl = [slice(None)] * 3
            sl[ax] = slice(i, i + img.shape[ax])
            acc += kv * padded[tuple(sl)]
        out = acc
    return out


def _random_resized_crop(img: np.ndarray, p: AugmentParams,
                         rng: np.random.Generator) -> np.ndarray:
    h, w = img.shape[:2]
    for _ in range(10):
        area = rng.uniform(*p.crop_area) * h * w
        log_r = rng.uniform(math.log(p.crop_aspect[0]), math.log(p.crop_aspect[1]))
        ratio = math.exp(log_r)
        cw = int(round(math.sqrt(area * ratio)))
        ch = int(round(math.sqrt(area / ratio)))
        if 0 < cw <= w and 0 < ch <= h:
            y0 = int(rng.integers(0, h - ch + 1))
            x0 = int(rng.integers(0, w - cw + 1))
            crop = img[y0:y0 + ch, x0:x0 + cw]
            return resize_bilinear(crop, p.view_size, p.view_size)
    return resize_bilinear(img, p.view_size, p.view_size)


def _color_jitter(img: np.ndarray, p: AugmentParams,
                  rng: np.random.Generator) -> np.ndarray:
    out = img
    if p.brightness > 0:
        f = rng.uniform(1 - p.brightness, 1 + p.brightness)
        out = clamp01(out * f)
    if p.contrast > 0:
        f = rng.uniform(1 - p.contrast, 1 + p.contrast)
        mean = float((out @ LUMA).mean())
        out = clamp01(mean + f * (out - mean))
    if p.saturation > 0:
        f = rng.uniform(1 - p.saturation, 1 + p.saturation)
        lum = (out @ LUMA)[..., None]
        out = clamp01(lum + f * (out - lum))
    return out


def augment_view(img: np.ndarray, p: AugmentParams,
                 rng: np.random.Generator) -> np.ndarray:
    """Random resized crop, then color jitter, grayscale, blur, flip."""
    out = _random_resized_crop(as_image(img), p, rng)
    out = _color_jitter(out, p, rng)
    if rng.random() < p.grayscale_prob:
        out = grayscale(out)
    if rng.random() < p.blur_prob:
        sigma = rng.uniform(*p.blur_sigma)
        out = gaussian_blur(out, sigma)
    if rng.random() < p.flip_prob:
        out = out[:, ::-1, :]
    return clamp01(np.ascontiguousarray(out, dtype=np.float32))


# ---------------------------------------------------------------------------
# PPM (P6) I/O
# ---------------------------------------------------------------------------

class PpmError(ValueError):
    pass


def write_ppm(img: np.ndarray, path) -> None:
    """Binary PPM, header exactly 'P6\\n<w> <h>\\n255\\n' then RGB bytes."""
    img = as_image(img)
    h, w = img.shape[:2]
    data = np.floor(clamp01(img) * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:2] != b"P6":
        raise PpmError(f"byte 0: expected magic 'P6', got {blob[:2]!r}")
    pos = 2

    def token(pos):
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise PpmError(f"byte {start}: truncated header")
        return blob[start:pos], pos

    tok_w, pos = token(pos)
    tok_h, pos = token(pos)
    tok_max, pos = token(pos)
    try:
        w, h, maxval = int(tok_w), int(tok_h), int(tok_max)
    except ValueError as e:
        raise PpmError(f"byte {pos}: non-numeric header token ({e})") from None
    if maxval != 255:
        raise PpmError(f"byte {pos}: unsupported maxval {maxval}, expected 255")
    if w < 1 or h < 1:
        raise PpmError(f"byte {pos}: invalid dimensions {w}x{h}")
    pos += 1  # single whitespace byte separates header from payload
    payload = blob[pos:]
    expected = 3 * w * h
    if len(payload) != expected:
        raise PpmError(
            f"byte {pos}: payload length {len(payload)}, expected {expected} "
            f"for {w}x{h}"
        )
    arr = np.frombuffer(payload, dtype=np.uint8).reshape(h, w, 3)
    return (arr.astype(np.float32) / 255.0)
