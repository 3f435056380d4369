"""Disparity-driven view synthesis and refocusing.

Forward warping scatters every center-view pixel x to x + (q_u*D(x),
q_v*D(x)) with bilinear splat weights; accumulated color is normalized by
accumulated weight, and targets that collect almost no weight are holes.
Out-of-frame splats are dropped, so frame borders produce holes too.

The derivative of the warped image with respect to the disparity map is
estimated numerically: each pixel's disparity is perturbed by +-h and only
its splat footprint is re-evaluated, which agrees with re-running the
whole warp because a single pixel only touches the 4x4 target window
around its splat position. The derivative with respect to the source
colors is exact, since warping is linear in them.

The internals are batched: the training loop warps every (sample, view)
pair of a minibatch in one call, with per-item angular offsets. Public
per-image functions delegate with batch size one.

Refocusing is the classic shift-and-add: every view is resampled by its
disparity-proportional offset and the stack is averaged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError, ShapeError
from .lightfield import LightField

HOLE_EPS = 1e-4
GRAD_STEP = 0.01
DEFAULT_D_MAX = 4.0


@dataclass(frozen=True)
class DisparityMap:
    """Per-pixel disparity aligned to the center view, in pixels per unit
    angular step. Positive values are nearer than the focal plane and
    render brighter in the 8-bit export."""

    data: np.ndarray
    d_max: float = DEFAULT_D_MAX

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 2:
            raise ShapeError(f"disparity map must be 2-D, got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise NumericError("disparity map contains non-finite values")
        if np.max(np.abs(data)) > self.d_max + 1e-6:
            raise ValueError(f"disparity magnitude exceeds d_max={self.d_max}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)


@dataclass(frozen=True)
class WarpedView:
    image: np.ndarray          # (C, H, W)
    hole_mask: np.ndarray      # (H, W) bool, True where no splat landed
    q: tuple[int, int]


def _disp_array(disp) -> np.ndarray:
    if isinstance(disp, DisparityMap):
        return disp.data
    return np.asarray(disp)


def _check_warp_args(image: np.ndarray, disp: np.ndarray, d_max: float) -> None:
    if image.ndim != 3:
        raise ShapeError(f"image must be (C, H, W), got {image.shape}")
    if disp.shape != image.shape[1:]:
        raise ShapeError(f"disparity {disp.shape} does not match image {image.shape[1:]}")
    if not np.all(np.isfinite(disp)):
        raise NumericError("disparity contains non-finite values")
    if d_max is not None and disp.size and np.max(np.abs(disp)) > d_max + 1e-6:
        raise ValueError(f"disparity magnitude exceeds d_max={d_max}")


# ---------------------------------------------------------------------------
# batched core: items are (image, disparity, q) triples


def _positions(disps: np.ndarray, qu: np.ndarray, qv: np.ndarray):
    """Splat positions for a batch: (B*H*W,) row and column coordinates."""
    b, h, w = disps.shape
    ii, jj = np.indices((h, w))
    ti = (ii[None] + qu[:, None, None] * disps).reshape(-1)
    tj = (jj[None] + qv[:, None, None] * disps).reshape(-1)
    return ti, tj


def _batched_accumulators(images: np.ndarray, disps: np.ndarray,
                          qu: np.ndarray, qv: np.ndarray):
    """Bilinear splat accumulators for all items at once: weight sums
    (B, H*W) and color sums (B, C, H*W). Scatter-adds go through
    np.bincount, which accumulates sequentially in float64."""
    b, c, h, w = images.shape
    ti, tj = _positions(disps, qu, qv)
    i0 = np.floor(ti).astype(np.int64)
    j0 = np.floor(tj).astype(np.int64)
    fi = ti - i0
    fj = tj - j0
    img_flat = images.transpose(1, 0, 2, 3).reshape(c, -1)
    item = np.repeat(np.arange(b, dtype=np.int64), h * w) * (h * w)
    size = b * h * w

    wsum = np.zeros(size, dtype=np.float64)
    csum = np.zeros((c, size), dtype=np.float64)
    for rows, cols, wt in (
        (i0, j0, (1 - fi) * (1 - fj)),
        (i0, j0 + 1, (1 - fi) * fj),
        (i0 + 1, j0, fi * (1 - fj)),
        (i0 + 1, j0 + 1, fi * fj),
    ):
        valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        if not valid.any():
            continue
        lin = (item + rows * w + cols)[valid]
        wv = wt[valid]
        wsum += np.bincount(lin, weights=wv, minlength=size)
        for ch in range(c):
            csum[ch] += np.bincount(lin, weights=wv * img_flat[ch][valid], minlength=size)
    return wsum.reshape(b, h * w), csum.reshape(c, b, h * w).transpose(1, 0, 2)


def _forward_warp_batched(images: np.ndarray, disps: np.ndarray,
                          qu: np.ndarray, qv: np.ndarray,
                          hole_eps: float = HOLE_EPS, return_acc: bool = False):
    """(B,C,H,W), (B,H,W), (B,), (B,) -> warped (B,C,H,W), holes (B,H,W)."""
    b, c, h, w = images.shape
    wsum, csum = _batched_accumulators(images, disps, qu, qv)
    holes = wsum < hole_eps
    safe = np.where(holes, 1.0, wsum)
    out = np.where(holes[:, None, :], 0.0, csum / safe[:, None, :])
    warped = out.reshape(b, c, h, w).astype(images.dtype, copy=False)
    if return_acc:
        return warped, holes.reshape(b, h, w), (wsum, csum)
    return warped, holes.reshape(b, h, w)


def _grad_source_batched(images: np.ndarray, disps: np.ndarray,
                         qu: np.ndarray, qv: np.ndarray, upstream: np.ndarray,
                         hole_eps: float = HOLE_EPS, acc=None) -> np.ndarray:
    """Exact adjoint w.r.t. source colors: route each target's normalized
    upstream gradient back through the splat weights (holes emit a
    constant 0 and route nothing)."""
    b, c, h, w = images.shape
    wsum = acc[0] if acc is not None else _batched_accumulators(images, disps, qu, qv)[0]
    holes = wsum < hole_eps
    safe = np.where(holes, 1.0, wsum)
    u_over_w = np.where(holes[:, None, :], 0.0,
                        np.asarray(upstream).reshape(b, c, -1) / safe[:, None, :])
    u_flat = np.ascontiguousarray(u_over_w.transpose(1, 0, 2)).reshape(c, -1)

    ti, tj = _positions(disps, qu, qv)
    i0 = np.floor(ti).astype(np.int64)
    j0 = np.floor(tj).astype(np.int64)
    fi = ti - i0
    fj = tj - j0
    item = np.repeat(np.arange(b, dtype=np.int64), h * w) * (h * w)
    grad = np.zeros((c, b * h * w), dtype=np.float64)
    for rows, cols, wt in (
        (i0, j0, (1 - fi) * (1 - fj)),
        (i0, j0 + 1, (1 - fi) * fj),
        (i0 + 1, j0, fi * (1 - fj)),
        (i0 + 1, j0 + 1, fi * fj),
    ):
        valid = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
        if not valid.any():
            continue
        lin = (item + rows * w + cols)[valid]
        for ch in range(c):
            grad[ch][valid] += wt[valid] * u_flat[ch][lin]
    return grad.reshape(c, b, h * w).transpose(1, 0, 2).reshape(b, c, h, w)


def _window_hats(py: np.ndarray, px: np.ndarray, wr: np.ndarray, wc: np.ndarray) -> np.ndarray:
    """Bilinear hat weights of splat position (py, px) evaluated on a 4x4
    integer window; cells outside the 2x2 corner set get weight 0
    automatically."""
    hr = np.maximum(0.0, 1.0 - np.abs(py[:, None] - wr))
    hc = np.maximum(0.0, 1.0 - np.abs(px[:, None] - wc))
    return hr[:, :, None] * hc[:, None, :]


def _grad_disparity_batched(images: np.ndarray, disps: np.ndarray,
                            qu: np.ndarray, qv: np.ndarray, upstream: np.ndarray,
                            step: float = GRAD_STEP,
                            hole_eps: float = HOLE_EPS, acc=None) -> np.ndarray:
    """Central-difference gradient w.r.t. each disparity pixel, contracted
    with `upstream` over channels and target pixels.

    Perturbing one pixel's disparity by +-h moves only its own splat, so
    the two perturbed outputs differ from the base warp only on the 4x4
    target window around the splat position; evaluating both signs there
    reproduces the full-recompute finite difference exactly (up to float
    associativity). Math runs in the images' dtype; out-of-frame window
    cells are neutralized by zeroing the upstream gathered there.
    """
    b, c, h, w = images.shape
    if np.max(np.abs(qu)) * step >= 1.0 or np.max(np.abs(qv)) * step >= 1.0:
        raise ValueError("perturbation step too large for the 4x4 footprint window")
    dtype = images.dtype if images.dtype in (np.float32, np.float64) else np.float64
    wsum, csum = acc if acc is not None else _batched_accumulators(images, disps, qu, qv)
    wsum_flat = wsum.reshape(-1).astype(dtype, copy=False)
    csum_flat = np.ascontiguousarray(csum.transpose(1, 0, 2)).reshape(c, -1).astype(dtype, copy=False)
    up_flat = np.ascontiguousarray(
        np.asarray(upstream, dtype=dtype).reshape(b, c, -1).transpose(1, 0, 2)
    ).reshape(c, -1)

    ti_all, tj_all = _positions(disps, qu, qv)
    ti_all = ti_all.astype(dtype, copy=False)
    tj_all = tj_all.astype(dtype, copy=False)
    img_flat = images.reshape(b, c, -1).transpose(1, 0, 2).reshape(c, -1)
    item_all = np.repeat(np.arange(b, dtype=np.int64), h * w) * (h * w)
    dqu_all = np.repeat(qu, h * w).astype(dtype) * step
    dqv_all = np.repeat(qv, h * w).astype(dtype) * step
    offs = np.arange(-1, 3, dtype=np.int64)

    total = b * h * w
    grad = np.empty(total, dtype=np.float64)
    # chunk the position axis: the 4x4 window arrays are 16x the position
    # count, so bounded chunks keep temporaries cache-sized
    chunk = max(4096, min(total, 16384))
    for lo in range(0, total, chunk):
        sl = slice(lo, min(lo + chunk, total))
        ti, tj = ti_all[sl], tj_all[sl]
        i0 = np.floor(ti).astype(np.int64)
        j0 = np.floor(tj).astype(np.int64)
        wr = i0[:, None] + offs[None, :]
        wc = j0[:, None] + offs[None, :]
        val2d = ((wr >= 0) & (wr < h))[:, :, None] & ((wc >= 0) & (wc < w))[:, None, :]
        lin = (item_all[sl][:, None, None]
               + np.clip(wr, 0, h - 1)[:, :, None] * w
               + np.clip(wc, 0, w - 1)[:, None, :])
        # gathers once per chunk; garbage at clipped out-of-frame cells is
        # annihilated by the zeroed upstream
        ws_base = wsum_flat[lin]
        cs_win = csum_flat[:, lin]
        u_win = up_flat[:, lin] * val2d
        wr_f = wr.astype(dtype)
        wc_f = wc.astype(dtype)
        w_base = _window_hats(ti, tj, wr_f, wc_f)
        img_px = img_flat[:, sl]

        one = np.asarray(1.0, dtype=dtype)
        zero = np.asarray(0.0, dtype=dtype)
        acc_chunk = np.zeros(ti.shape[0], dtype=np.float64)
        for sign in (1.0, -1.0):
            w_pert = _window_hats(ti + dtype.type(sign) * dqu_all[sl],
                                  tj + dtype.type(sign) * dqv_all[sl], wr_f, wc_f)
            dw = w_pert - w_base
            ws2 = ws_base + dw
            filled = ws2 >= hole_eps
            denom = np.where(filled, ws2, one)
            for ch in range(c):
                cs2 = cs_win[ch] + img_px[ch][:, None, None] * dw
                out = np.where(filled, cs2 / denom, zero)
                acc_chunk += sign * np.einsum("pij,pij->p", u_win[ch], out, dtype=np.float64)
        grad[sl] = acc_chunk / (2.0 * step)
    return grad.reshape(b, h, w)


# ---------------------------------------------------------------------------
# per-image API


def forward_warp(center: np.ndarray, disp, q: tuple[int, int],
                 d_max: float = DEFAULT_D_MAX, hole_eps: float = HOLE_EPS) -> WarpedView:
    """Synthesize view q from the center view and its disparity map."""
    disp = _disp_array(disp)
    center = np.asarray(center)
    _check_warp_args(center, disp, d_max)
    out, holes = _forward_warp_batched(center[None], disp[None],
                                       np.array([q[0]]), np.array([q[1]]),
                                       hole_eps=hole_eps)
    return WarpedView(image=out[0], hole_mask=holes[0], q=(int(q[0]), int(q[1])))


def warp_grad_source(center: np.ndarray, disp, q: tuple[int, int],
                     upstream: np.ndarray, d_max: float = DEFAULT_D_MAX,
                     hole_eps: float = HOLE_EPS) -> np.ndarray:
    """Gradient of the warp w.r.t. the source colors, contracted with
    `upstream`; exact because warping is linear in the colors."""
    disp = _disp_array(disp)
    center = np.asarray(center)
    _check_warp_args(center, disp, d_max)
    return _grad_source_batched(center[None], disp[None],
                                np.array([q[0]]), np.array([q[1]]),
                                np.asarray(upstream)[None], hole_eps=hole_eps)[0]


def warp_grad_disparity(center: np.ndarray, disp, q: tuple[int, int],
                        upstream: np.ndarray, step: float = GRAD_STEP,
                        d_max: float = DEFAULT_D_MAX, hole_eps: float = HOLE_EPS) -> np.ndarray:
    """Numeric (central-difference) warp Jacobian w.r.t. disparity,
    contracted with `upstream`. See `_grad_disparity_batched`."""
    disp = _disp_array(disp)
    center = np.asarray(center)
    _check_warp_args(center, disp, d_max)
    if upstream.shape != center.shape:
        raise ShapeError(f"upstream {upstream.shape} does not match image {center.shape}")
    if q[0] == 0 and q[1] == 0:
        return np.zeros(disp.shape)
    return _grad_disparity_batched(center[None], disp[None],
                                   np.array([q[0]]), np.array([q[1]]),
                                   np.asarray(upstream)[None], step=step,
                                   hole_eps=hole_eps)[0]


def backward_warp(view: np.ndarray, disp, q: tuple[int, int],
                  d_max: float = DEFAULT_D_MAX) -> np.ndarray:
    """Sample `view` at x + q*D(x) with bilinear interpolation, borders
    clamped. Inverse-sampling counterpart of forward_warp, used by
    round-trip tests and refocusing."""
    disp = _disp_array(disp)
    view = np.asarray(view)
    _check_warp_args(view, disp, d_max)
    c, h, w = view.shape
    qu, qv = q
    ii, jj = np.indices((h, w))
    si = np.clip(ii + qu * disp, 0.0, h - 1.0)
    sj = np.clip(jj + qv * disp, 0.0, w - 1.0)
    i0 = np.minimum(np.floor(si).astype(np.int64), max(h - 2, 0))
    j0 = np.minimum(np.floor(sj).astype(np.int64), max(w - 2, 0))
    fi = si - i0
    fj = sj - j0
    i1 = np.minimum(i0 + 1, h - 1)
    j1 = np.minimum(j0 + 1, w - 1)
    out = np.empty_like(view)
    for ch in range(c):
        v = view[ch]
        out[ch] = ((1 - fi) * (1 - fj) * v[i0, j0] + (1 - fi) * fj * v[i0, j1]
                   + fi * (1 - fj) * v[i1, j0] + fi * fj * v[i1, j1])
    return out


# ---------------------------------------------------------------------------
# training-graph op


def warp_views_op(center, disp, qs: list[tuple[int, int]],
                  d_max: float = DEFAULT_D_MAX, hole_eps: float = HOLE_EPS,
                  grad_step: float = GRAD_STEP):
    """Differentiable batched forward warp for the training graph.

    center: Tensor (N, C, H, W); disp: Tensor (N, 1, H, W); qs: list of Q
    angular offsets. Returns (warped Tensor (N*Q, C, H, W), hole channel
    ndarray (N*Q, 1, H, W)) with items ordered sample-major.

    Backward routes the upstream gradient through the exact color adjoint
    into `center` and through the central-difference disparity Jacobian
    into `disp`; the hole channel is a constant.
    """
    from .autodiff.tensor import _accumulate, _make

    if center.data.ndim != 4 or disp.data.ndim != 4 or disp.data.shape[1] != 1:
        raise ShapeError("warp_views_op expects center (N,C,H,W) and disp (N,1,H,W)")
    if center.data.shape[0] != disp.data.shape[0] or center.data.shape[2:] != disp.data.shape[2:]:
        raise ShapeError(
            f"center {center.data.shape} and disparity {disp.data.shape} are misaligned"
        )
    if not np.all(np.isfinite(disp.data)):
        raise NumericError("disparity contains non-finite values")
    if np.max(np.abs(disp.data)) > d_max + 1e-6:
        raise ValueError(f"disparity magnitude exceeds d_max={d_max}")
    n, c, h, w = center.data.shape
    nq = len(qs)
    qu = np.tile(np.array([q[0] for q in qs], dtype=np.float64), n)
    qv = np.tile(np.array([q[1] for q in qs], dtype=np.float64), n)
    images = np.repeat(center.data, nq, axis=0)
    disps = np.repeat(disp.data[:, 0], nq, axis=0)
    out, holes, acc = _forward_warp_batched(images, disps, qu, qv,
                                            hole_eps=hole_eps, return_acc=True)
    holes_ch = holes[:, None].astype(center.data.dtype)

    def backward(g):
        if center.requires_grad:
            gc = _grad_source_batched(images, disps, qu, qv, g, hole_eps=hole_eps, acc=acc)
            gc = gc.reshape(n, nq, c, h, w).sum(axis=1).astype(center.data.dtype)
            _accumulate(center, gc)
        if disp.requires_grad:
            gd = _grad_disparity_batched(images, disps, qu, qv, g,
                                         step=grad_step, hole_eps=hole_eps, acc=acc)
            gd = gd.reshape(n, nq, h, w).sum(axis=1)[:, None].astype(disp.data.dtype)
            _accumulate(disp, gd)

    warped = _make(out, (center, disp), backward, "warp_views")
    return warped, holes_ch


# ---------------------------------------------------------------------------
# refocusing


def refocus(lf: LightField, d: float) -> np.ndarray:
    """Shift-and-add refocusing: resample every view by its angular offset
    times d and average. At the true disparity of a constant-depth scene
    this re-aligns all views onto the center view."""
    if not np.isfinite(d):
        raise ValueError("refocus disparity must be finite")
    acc = np.zeros((lf.channels, lf.height, lf.width), dtype=np.float64)
    flat = np.full((lf.height, lf.width), float(d))
    for qu, qv in lf.angular_offsets():
        acc += backward_warp(lf.view(qu, qv).astype(np.float64), flat, (qu, qv), d_max=None)
    out = acc / (lf.grid_size ** 2)
    return np.clip(out, 0.0, 1.0)


def gradient_energy(image: np.ndarray) -> float:
    """Sum of squared forward differences; the sharpness score used to
    compare refocus planes."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[None]
    gy = np.diff(img, axis=1)
    gx = np.diff(img, axis=2)
    return float(np.square(gy).sum() + np.square(gx).sum())
