"""Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray plus an optional gradient accumulator and a
backward closure that routes upstream gradients to its parents. Image
tensors use channels-first layout N x C x H x W throughout; convolution
kernels are O x C x k x k.

The op set is deliberately small: exactly what the three reconstruction
networks and their losses need. There is no general broadcasting; shapes
must match except for the documented scalar cases (scale, clip bounds,
per-channel bias).

Gradients accumulate additively across fan-out, so a tensor consumed
twice receives the sum of both contributions. Callers zero grads between
optimizer steps by setting `.grad = None`.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError, ShapeError

# Finite checks on every op output. Cheap at the scales this engine is
# meant for; tests flip it off to probe error paths.
CHECK_FINITE = True


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op", "_op_meta")

    def __init__(self, data, requires_grad=False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
        if not np.issubdtype(self.data.dtype, np.floating):
            self.data = self.data.astype(np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self._op_meta = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        """Constant view of this tensor's values, cut off from the tape."""
        return Tensor(self.data, requires_grad=False)

    def backward(self, seed=None):
        """Backpropagate from this tensor through the tape.

        Without a seed the tensor must be scalar (the usual loss case).
        A seed of the tensor's own shape starts the sweep from a
        non-scalar root, which the training pipeline uses to chain
        externally computed gradients into the graph.
        """
        if seed is None:
            if self.data.size != 1:
                raise ContractError(
                    "backward from a non-scalar requires an explicit seed gradient"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=self.data.dtype)
            if seed.shape != self.data.shape:
                raise ShapeError(
                    f"seed gradient shape {seed.shape} != tensor shape {self.data.shape}"
                )
        order = _toposort(self)
        _accumulate(self, seed)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, op={self.op}, requires_grad={self.requires_grad})"


def _toposort(root: Tensor) -> list[Tensor]:
    """Parents-before-children ordering; iterative to spare the recursion
    limit on deep tapes. Visits each node exactly once."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accumulate(node: Tensor, g: np.ndarray) -> None:
    if node.grad is None:
        node.grad = g.copy()
    else:
        node.grad = node.grad + g


def _make(data, parents, backward, op, meta=None) -> Tensor:
    if CHECK_FINITE and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values in output of op '{op}'")
    out = Tensor(data)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    out.op = op
    out._op_meta = meta
    return out


def _as_tensor(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.data.dtype))


def _check_match(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op}: operand shapes {a.data.shape} and {b.data.shape} differ")
    if a.data.dtype != b.data.dtype:
        raise ShapeError(f"{op}: operand dtypes {a.data.dtype} and {b.data.dtype} differ")


# ---------------------------------------------------------------------------
# convolution


def conv_output_extent(extent: int, k: int, stride: int, padding: int) -> int:
    return (extent + 2 * padding - k) // stride + 1


def _pad_spatial(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


def _im2col(xp: np.ndarray, k: int, stride: int):
    """Padded input (N,C,Hp,Wp) -> window matrix (C*k*k, N*Ho*Wo).

    Row-major over (c, ki, kj): each row is one kernel tap gathered over
    every output position, a nearly contiguous strided copy. The layout
    makes both conv directions single large GEMMs against the kernel
    reshaped to (O, C*k*k).
    """
    n, c, hp, wp = xp.shape
    ho = (hp - k) // stride + 1
    wo = (wp - k) // stride + 1
    cols = np.empty((c * k * k, n * ho * wo), dtype=xp.dtype)
    idx = 0
    for cc in range(c):
        for ki in range(k):
            for kj in range(k):
                np.copyto(cols[idx].reshape(n, ho, wo),
                          xp[:, cc, ki:ki + stride * ho:stride, kj:kj + stride * wo:stride])
                idx += 1
    return cols, ho, wo


def _col2im(gcols: np.ndarray, n: int, c: int, hp: int, wp: int, k: int, stride: int,
            ho: int, wo: int, dtype) -> np.ndarray:
    """Adjoint of _im2col: scatter-add tap rows back to the padded input.
    The c*k*k loop keeps every add a strided vector op."""
    out = np.zeros((n, c, hp, wp), dtype=dtype)
    idx = 0
    for cc in range(c):
        for ki in range(k):
            for kj in range(k):
                out[:, cc, ki:ki + stride * ho:stride,
                    kj:kj + stride * wo:stride] += gcols[idx].reshape(n, ho, wo)
                idx += 1
    return out


def _to_channel_major(x: np.ndarray) -> np.ndarray:
    """(N, O, H, W) -> (O, N*H*W) with plane-contiguous copies."""
    o = x.shape[1]
    return x.transpose(1, 0, 2, 3).reshape(o, -1)


def _from_channel_major(mat: np.ndarray, n: int, h: int, w: int) -> np.ndarray:
    return np.ascontiguousarray(mat.reshape(-1, n, h, w).transpose(1, 0, 2, 3))


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of N x C x H x W input with O x C x k x k kernel.

    Output spatial extent is floor((H + 2*padding - k) / stride) + 1.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d expects 4-D input and kernel")
    n, c, h, w = x.data.shape
    o, ck, kh, kw = kernel.data.shape
    if kh != kw:
        raise ShapeError("conv2d kernels must be square")
    if ck != c:
        raise ShapeError(f"conv2d: input has {c} channels, kernel expects {ck}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError("conv2d: input and kernel dtypes differ")
    k = kh
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be >= 1 and padding >= 0")
    if k > h + 2 * padding or k > w + 2 * padding:
        raise ShapeError(f"conv2d: kernel {k} exceeds padded input {h + 2 * padding}x{w + 2 * padding}")

    xp = _pad_spatial(x.data, padding)
    cols, ho, wo = _im2col(xp, k, stride)
    kmat = kernel.data.reshape(o, -1)
    out = _from_channel_major(kmat @ cols, n, ho, wo)

    def backward(g):
        gmat = _to_channel_major(g)
        if kernel.requires_grad:
            gk = (gmat @ cols.T).reshape(kernel.data.shape)
            _accumulate(kernel, gk)
        if x.requires_grad:
            gcols = kmat.T @ gmat
            gp = _col2im(gcols, n, c, h + 2 * padding, w + 2 * padding, k, stride, ho, wo, x.data.dtype)
            if padding:
                gp = gp[:, :, padding:padding + h, padding:padding + w]
            _accumulate(x, gp)

    return _make(out, (x, kernel), backward, "conv2d")


def conv2d_transpose(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0,
                     output_size: tuple[int, int] | None = None) -> Tensor:
    """Exact adjoint of conv2d with the same kernel and hyperparameters.

    Maps N x O x Ho x Wo to N x C x H x W. The default output extent is
    (Ho - 1) * stride - 2 * padding + k, the smallest conv2d input that
    produces Ho; `output_size` selects any other valid preimage, which
    matters when the strided forward pass dropped a remainder.
    """
    if x.data.ndim != 4 or kernel.data.ndim != 4:
        raise ShapeError("conv2d_transpose expects 4-D input and kernel")
    n, o_in, ho, wo = x.data.shape
    o, c, kh, kw = kernel.data.shape
    if kh != kw:
        raise ShapeError("conv2d_transpose kernels must be square")
    if o_in != o:
        raise ShapeError(f"conv2d_transpose: input has {o_in} channels, kernel expects {o}")
    if x.data.dtype != kernel.data.dtype:
        raise ShapeError("conv2d_transpose: input and kernel dtypes differ")
    k = kh
    if output_size is None:
        h = (ho - 1) * stride - 2 * padding + k
        w = (wo - 1) * stride - 2 * padding + k
    else:
        h, w = output_size
        if conv_output_extent(h, k, stride, padding) != ho or conv_output_extent(w, k, stride, padding) != wo:
            raise ShapeError(
                f"conv2d_transpose: output_size {h}x{w} is not a conv2d preimage of {ho}x{wo}"
            )
    if h <= 0 or w <= 0:
        raise ShapeError(f"conv2d_transpose: output extent {h}x{w} is non-positive")

    kmat = kernel.data.reshape(o, -1)
    xmat = _to_channel_major(x.data)
    gcols = kmat.T @ xmat
    outp = _col2im(gcols, n, c, h + 2 * padding, w + 2 * padding, k, stride, ho, wo, x.data.dtype)
    out = outp[:, :, padding:padding + h, padding:padding + w] if padding else outp
    out = np.ascontiguousarray(out)

    def backward(g):
        gp = _pad_spatial(g, padding)
        cols, gho, gwo = _im2col(gp, k, stride)
        if x.requires_grad:
            gx = _from_channel_major(kmat @ cols, n, gho, gwo)
            _accumulate(x, gx)
        if kernel.requires_grad:
            gk = (xmat @ cols.T).reshape(kernel.data.shape)
            _accumulate(kernel, gk)

    return _make(out, (x, kernel), backward, "conv2d_transpose")


# ---------------------------------------------------------------------------
# elementwise


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0

    def backward(g):
        _accumulate(x, g * mask)

    return _make(np.maximum(x.data, 0), (x,), backward, "relu")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)

    def backward(g):
        _accumulate(x, g * (1.0 - out * out))

    return _make(out, (x,), backward, "tanh")


def add(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_match(a, b, "add")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward, "add")


def sub(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_match(a, b, "sub")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g)
        if b.requires_grad:
            _accumulate(b, -g)

    return _make(a.data - b.data, (a, b), backward, "sub")


def mul(a: Tensor, b) -> Tensor:
    b = _as_tensor(b, a)
    _check_match(a, b, "mul")

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g * b.data)
        if b.requires_grad:
            _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward, "mul")


def scale(x: Tensor, s: float) -> Tensor:
    s = float(s)

    def backward(g):
        _accumulate(x, g * s)

    return _make(x.data * s, (x,), backward, "scale")


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp values to [lo, hi]; gradient is zero outside the open interval."""
    inside = (x.data > lo) & (x.data < hi)

    def backward(g):
        _accumulate(x, g * inside)

    return _make(np.clip(x.data, lo, hi), (x,), backward, "clip", meta={"lo": lo, "hi": hi})


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Per-channel bias for N x C x H x W tensors; b has shape (C,)."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.data.shape[0] != x.data.shape[1]:
        raise ShapeError(f"add_bias: bias {b.data.shape} does not match channels of {x.data.shape}")

    def backward(g):
        if x.requires_grad:
            _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=(0, 2, 3)))

    return _make(x.data + b.data.reshape(1, -1, 1, 1), (x, b), backward, "add_bias")


# ---------------------------------------------------------------------------
# structure


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack along the channel axis: (N,C1,H,W) + (N,C2,H,W) -> (N,C1+C2,H,W)."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects 4-D tensors")
    sa, sb = a.data.shape, b.data.shape
    if sa[0] != sb[0] or sa[2:] != sb[2:]:
        raise ShapeError(f"concat_channels: non-channel dims differ, {sa} vs {sb}")
    if a.data.dtype != b.data.dtype:
        raise ShapeError("concat_channels: dtypes differ")
    c1 = sa[1]

    def backward(g):
        if a.requires_grad:
            _accumulate(a, g[:, :c1])
        if b.requires_grad:
            _accumulate(b, g[:, c1:])

    return _make(np.concatenate([a.data, b.data], axis=1), (a, b), backward, "concat_channels")


def crop_center(x: Tensor, size: tuple[int, int]) -> Tensor:
    """Center spatial crop of a 4-D tensor; gradient zero-pads back."""
    h, w = size
    n, c, hh, ww = x.data.shape
    if h > hh or w > ww:
        raise ShapeError(f"crop_center: crop {h}x{w} exceeds input {hh}x{ww}")
    if (hh - h) % 2 or (ww - w) % 2:
        raise ShapeError("crop_center: margins must be even")
    t, l = (hh - h) // 2, (ww - w) // 2

    def backward(g):
        gx = np.zeros_like(x.data)
        gx[:, :, t:t + h, l:l + w] = g
        _accumulate(x, gx)

    return _make(x.data[:, :, t:t + h, l:l + w].copy(), (x,), backward, "crop_center")


def tensor_sum(x: Tensor) -> Tensor:
    def backward(g):
        _accumulate(x, np.full_like(x.data, g))

    return _make(np.asarray(x.data.sum(), dtype=x.data.dtype), (x,), backward, "sum")


def mse_loss(pred: Tensor, target, mode: str = "mean") -> Tensor:
    """Squared-error loss summed over every element (channels and pixels),
    or normalized by the element count in "mean" mode."""
    target = _as_tensor(target, pred)
    _check_match(pred, target, "mse_loss")
    if mode not in ("sum", "mean"):
        raise ValueError(f"mse_loss: unknown mode {mode!r}")
    diff = pred.data - target.data
    value = np.square(diff).sum()
    norm = diff.size if mode == "mean" else 1
    value = value / norm

    def backward(g):
        gd = (2.0 / norm) * diff * g
        if pred.requires_grad:
            _accumulate(pred, gd)
        if target.requires_grad:
            _accumulate(target, -gd)

    return _make(np.asarray(value, dtype=pred.data.dtype), (pred, target), backward, "mse_loss")
