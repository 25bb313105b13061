"""Oracle battery: independent reference implementations and the checks
that gate a build.

The reference paths here deliberately share no code with the kernels they
verify: RoIAlign is checked against a direct per-sample evaluation of the
zero-padded bilinear field, backward passes against central finite
differences, the contrastive loss against a closed-form scalar, and the
anchor filter against an exhaustive IoU scan.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from .boxes import AnchorConfig, BBox, augment_candidates, clipped_anchor_grid, iou
from .contrastive import MemoryQueue, info_nce_loss
from .gradcheck import max_rel_error, numerical_grad
from .nn import Conv2d, Linear, MlpHead, l2_normalize, l2_normalize_backward
from .probes import probe_loss_and_grads
from .roialign import RoiSpec, roi_align_backward, roi_align_forward


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------

def bilinear_field_value(plane: np.ndarray, y: float, x: float) -> float:
    """Direct evaluation of the bilinear interpolant of one 2-D map at a
    continuous point, zero outside the sample grid."""
    h, w = plane.shape
    y0, x0 = math.floor(y), math.floor(x)
    total = 0.0
    for yy, wy in ((y0, y0 + 1 - y), (y0 + 1, y - y0)):
        for xx, wx in ((x0, x0 + 1 - x), (x0 + 1, x - x0)):
            if 0 <= yy < h and 0 <= xx < w:
                total += wy * wx * float(plane[yy, xx])
    return total


def roi_align_oracle(fmap: np.ndarray, box: BBox, batch_index: int,
                     spec: RoiSpec) -> np.ndarray:
    """Sample-by-sample RoIAlign via the direct bilinear formula."""
    _, c, _, _ = fmap.shape
    off = 0.5 if spec.aligned else 0.0
    x1 = box.x1 * spec.spatial_scale - off
    y1 = box.y1 * spec.spatial_scale - off
    bw = (box.x2 - box.x1) * spec.spatial_scale / spec.output_size
    bh = (box.y2 - box.y1) * spec.spatial_scale / spec.output_size
    p, s = spec.output_size, spec.sampling
    out = np.zeros((c, p, p))
    for ci in range(c):
        plane = fmap[batch_index, ci]
        for ph in range(p):
            for pw in range(p):
                acc = 0.0
                for iy in range(s):
                    for ix in range(s):
                        y = y1 + (ph + (iy + 0.5) / s) * bh
                        x = x1 + (pw + (ix + 0.5) / s) * bw
                        acc += bilinear_field_value(plane, y, x)
                out[ci, ph, pw] = acc / (s * s)
    return out


# ---------------------------------------------------------------------------
# check battery
# ---------------------------------------------------------------------------

@dataclass
class CheckResult:
    name: str
    passed: bool
    max_error: float
    threshold: float
    seconds: float


def _random_box(rng, h_img: float, w_img: float, min_side: float = 2.0) -> BBox:
    x1 = rng.uniform(0, w_img - min_side)
    y1 = rng.uniform(0, h_img - min_side)
    x2 = rng.uniform(x1 + min_side, w_img)
    y2 = rng.uniform(y1 + min_side, h_img)
    return BBox(x1, y1, x2, y2)


def check_roialign_dense_oracle(trials: int = 100, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 3))
        hf, wf = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        fmap = rng.standard_normal((2, c, hf, wf))
        spec = RoiSpec(output_size=int(rng.integers(1, 4)),
                       sampling=int(rng.integers(1, 3)),
                       spatial_scale=float(rng.choice([1.0, 0.5, 0.25])),
                       aligned=bool(rng.integers(0, 2)))
        scale_up = 1.0 / spec.spatial_scale
        box = _random_box(rng, hf * scale_up, wf * scale_up,
                          min_side=2.0 * scale_up)
        bi = int(rng.integers(0, 2))
        got = roi_align_forward(fmap, box, bi, spec)
        want = roi_align_oracle(fmap, box, bi, spec)
        worst = max(worst, float(np.abs(got - want).max()))
    return worst


def check_roialign_adjointness(trials: int = 20, seed: int = 1) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 3))
        hf, wf = int(rng.integers(4, 10)), int(rng.integers(4, 10))
        x = rng.standard_normal((2, c, hf, wf))
        spec = RoiSpec(output_size=int(rng.integers(1, 4)),
                       sampling=int(rng.integers(1, 3)),
                       spatial_scale=1.0,
                       aligned=bool(rng.integers(0, 2)))
        box = _random_box(rng, hf, wf)
        g = rng.standard_normal((c, spec.output_size, spec.output_size))
        fx = roi_align_forward(x, box, 0, spec)
        fty = roi_align_backward(g, box, 0, spec, x.shape)
        lhs = float((fx * g).sum())
        rhs = float((x * fty).sum())
        worst = max(worst, abs(lhs - rhs) / max(1.0, abs(lhs)))
    return worst


def check_conv2d_gradients(seed: int = 2) -> float:
    rng = np.random.default_rng(seed)
    conv = Conv2d(2, 3, 3, stride=2, pad=1, rng=rng, dtype=np.float64)
    x = rng.standard_normal((2, 2, 6, 6))
    g = rng.standard_normal(conv.forward(x, keep=False).shape)

    def loss_of_input(xv):
        return float((conv.forward(xv, keep=False) * g).sum())

    conv.zero_grads()
    conv.forward(x)
    gx = conv.backward(g)
    worst = max_rel_error(gx, numerical_grad(loss_of_input, x))
    w0 = conv.params["w"].copy()

    def loss_of_weight(wv):
        conv.params["w"][...] = wv
        out = float((conv.forward(x, keep=False) * g).sum())
        conv.params["w"][...] = w0
        return out

    worst = max(worst, max_rel_error(conv.grads["w"],
                                     numerical_grad(loss_of_weight, w0)))
    return worst


def check_l2norm_gradients(seed: int = 3) -> float:
    rng = np.random.default_rng(seed)
    v = rng.standard_normal((4, 6))
    g = rng.standard_normal((4, 6))
    y, cache = l2_normalize(v)
    gv = l2_normalize_backward(g, cache)

    def loss(vv):
        return float((l2_normalize(vv)[0] * g).sum())

    return max_rel_error(gv, numerical_grad(loss, v))


def check_mlp_head_gradients(seed: int = 4) -> float:
    rng = np.random.default_rng(seed)
    head = MlpHead(5, 7, 4, rng=rng, dtype=np.float64)
    x = rng.standard_normal((3, 5))
    g = rng.standard_normal((3, 4))

    def loss_of_input(xv):
        return float((head.forward(xv, keep=False) * g).sum())

    head.zero_grads()
    head.forward(x)
    gx = head.backward(g)
    worst = max_rel_error(gx, numerical_grad(loss_of_input, x))
    for layer in (head.fc1, head.fc2):
        w0 = layer.params["w"].copy()

        def loss_of_weight(wv, layer=layer, w0=w0):
            layer.params["w"][...] = wv
            out = float((head.forward(x, keep=False) * g).sum())
            layer.params["w"][...] = w0
            return out

        worst = max(worst, max_rel_error(layer.grads["w"],
                                         numerical_grad(loss_of_weight, w0)))
    return worst


def check_linear_gradients(seed: int = 5) -> float:
    rng = np.random.default_rng(seed)
    lin = Linear(6, 4, rng=rng, dtype=np.float64)
    x = rng.standard_normal((3, 6))
    g = rng.standard_normal((3, 4))
    lin.zero_grads()
    lin.forward(x)
    gx = lin.backward(g)

    def loss_of_input(xv):
        return float((lin.forward(xv, keep=False) * g).sum())

    worst = max_rel_error(gx, numerical_grad(loss_of_input, x))
    w0 = lin.params["w"].copy()

    def loss_of_weight(wv):
        lin.params["w"][...] = wv
        out = float((lin.forward(x, keep=False) * g).sum())
        lin.params["w"][...] = w0
        return out

    return max(worst, max_rel_error(lin.grads["w"],
                                    numerical_grad(loss_of_weight, w0)))


def check_infonce_gradients(seed: int = 6) -> float:
    rng = np.random.default_rng(seed)
    b, d = 3, 8
    queue = MemoryQueue(16, d, rng=rng, prefill="random", dtype=np.float64)
    q = rng.standard_normal((b, d))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    k = rng.standard_normal((b, d))
    k /= np.linalg.norm(k, axis=1, keepdims=True)
    _, grad_q = info_nce_loss(q, k, queue, tau=0.2)

    def loss(qv):
        return info_nce_loss(qv, k, queue, tau=0.2)[0]

    return max_rel_error(grad_q, numerical_grad(loss, q, h=1e-7))


def check_infonce_closed_form() -> float:
    d = 16
    q = np.zeros((1, d))
    q[0, 0] = 1.0
    queue = MemoryQueue(8, d, prefill="empty")
    negs = np.zeros((8, d))
    for i in range(8):
        negs[i, i + 1] = 1.0   # orthogonal to q and to each other
    queue.enqueue(negs)
    loss, _ = info_nce_loss(q, q.copy(), queue, tau=0.2)
    expected = -math.log(math.exp(5.0) / (math.exp(5.0) + 8.0))
    return abs(loss - expected)


def check_probe_loss_gradients(seed: int = 7) -> float:
    rng = np.random.default_rng(seed)
    n, d, l = 12, 5, 3
    x = rng.standard_normal((n, d))
    labels = rng.integers(0, l, size=n)
    w = rng.standard_normal((d, l))
    b = rng.standard_normal(l)
    _, gw, gb = probe_loss_and_grads(x, labels, w, b)

    def loss_w(wv):
        return probe_loss_and_grads(x, labels, wv, b)[0]

    def loss_b(bv):
        return probe_loss_and_grads(x, labels, w, bv)[0]

    return max(max_rel_error(gw, numerical_grad(loss_w, w)),
               max_rel_error(gb, numerical_grad(loss_b, b)))


def check_anchor_iou_scan(seed: int = 8) -> float:
    """Candidate filter vs an exhaustive scan with its own IoU loop."""
    rng = np.random.default_rng(seed)
    anchors = clipped_anchor_grid(AnchorConfig(), 64, 64)
    worst = 0.0
    for _ in range(50):
        gt = _random_box(rng, 64, 64, min_side=8.0)
        got = len(augment_candidates(gt, anchors, 0.5))
        brute = 0
        for a in anchors:
            ix = max(0.0, min(a.x2, gt.x2) - max(a.x1, gt.x1))
            iy = max(0.0, min(a.y2, gt.y2) - max(a.y1, gt.y1))
            inter = ix * iy
            union = (a.x2 - a.x1) * (a.y2 - a.y1) + gt.area - inter
            if inter / union > 0.5:
                brute += 1
        worst = max(worst, abs(got - brute))
    return worst


def check_iou_properties(seed: int = 9) -> float:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(500):
        a = _random_box(rng, 50, 50)
        b = _random_box(rng, 50, 50)
        v1, v2 = iou(a, b), iou(b, a)
        worst = max(worst, abs(v1 - v2))
        if not 0.0 <= v1 <= 1.0:
            worst = max(worst, 1.0)
        worst = max(worst, abs(iou(a, a) - 1.0))
    half = BBox(0, 0, 10, 5)
    whole = BBox(0, 0, 10, 10)
    worst = max(worst, abs(iou(half, whole) - 0.5))
    return worst


def check_queue_fifo() -> float:
    queue = MemoryQueue(4, 2, prefill="empty")

    def rows(*vals):
        out = np.zeros((len(vals), 2), dtype=np.float32)
        for i, v in enumerate(vals):
            out[i] = [math.cos(v), math.sin(v)]
        return out

    a, b, c, d, e, f = (rows(v)[0] for v in (0.1, 0.2, 0.3, 0.4, 0.5, 0.6))
    queue.enqueue(np.stack([a, b]))
    queue.enqueue(np.stack([c, d]))
    queue.enqueue(np.stack([e, f]))
    expected = np.stack([e, f, c, d])
    return float(np.abs(queue.storage - expected).max())


CHECKS = [
    ("roialign-dense-oracle", check_roialign_dense_oracle, 1e-6),
    ("roialign-adjointness", check_roialign_adjointness, 1e-6),
    ("gradcheck-conv2d", check_conv2d_gradients, 1e-6),
    ("gradcheck-linear", check_linear_gradients, 1e-6),
    ("gradcheck-l2norm", check_l2norm_gradients, 1e-6),
    ("gradcheck-mlp-head", check_mlp_head_gradients, 1e-6),
    ("gradcheck-infonce", check_infonce_gradients, 1e-6),
    ("gradcheck-probe-loss", check_probe_loss_gradients, 1e-6),
    ("infonce-closed-form", check_infonce_closed_form, 1e-5),
    ("anchor-iou-scan", check_anchor_iou_scan, 0.5),
    ("iou-properties", check_iou_properties, 1e-9),
    ("queue-fifo", check_queue_fifo, 0.0),
]


def run_selfcheck(out=None) -> list[CheckResult]:
    """Run every check, print one pass/fail line each."""
    results = []
    for name, fn, threshold in CHECKS:
        t0 = time.perf_counter()
        err = float(fn())
        dt = time.perf_counter() - t0
        passed = err <= threshold
        results.append(CheckResult(name, passed, err, threshold, dt))
        if out is not None:
            status = "PASS" if passed else "FAIL"
            out.write(f"{status}  {name}: error {err:.3e} "
                      f"(threshold {threshold:.1e}, {dt:.2f}s)\n")
    return results
