"""Finite-difference verification of the backward rules.

`grad_check` compares every analytic gradient produced by the tape
against central differences of the forward value. It runs in 64-bit only;
the default step 1e-6 balances truncation against round-off for
activations of order one.

ReLU and clip have kinks where the analytic subgradient and the numeric
difference legitimately disagree, so callers draw inputs, measure
`kink_margin`, and redraw until no activation input sits near a kink
before checking.
"""

from __future__ import annotations

import numpy as np

from ..errors import ContractError, NumericError
from ..rng import SplitMix64
from .tensor import Tensor, _toposort


def kink_margin(root: Tensor) -> float:
    """Smallest distance of any relu/clip input to its nondifferentiable
    point, over the whole tape below `root`. Infinite if none present."""
    margin = np.inf
    for node in _toposort(root):
        if node.op == "relu":
            x = node._parents[0].data
            if x.size:
                margin = min(margin, float(np.min(np.abs(x))))
        elif node.op == "clip":
            x = node._parents[0].data
            lo, hi = node._op_meta["lo"], node._op_meta["hi"]
            if x.size:
                margin = min(margin, float(np.min(np.abs(x - lo))), float(np.min(np.abs(x - hi))))
    return margin


def grad_check(fn, inputs: list[Tensor], eps: float = 1e-6,
               probes: int | None = None, seed: int = 0,
               kink_exclude: float | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    fn(*inputs) must rebuild the graph from scratch and return a scalar
    loss Tensor. Every element of every requires_grad input is probed,
    or a seeded random subset of `probes` elements per input when the
    parameter count makes exhaustive probing too slow. The relative
    error is |analytic - numeric| / max(|analytic|, |numeric|, 1e-12).

    With `kink_exclude` set, any probe whose perturbed forward passes
    bring a relu/clip input within that distance of its kink is dropped
    from the check set; central differences are simply wrong across a
    kink, and large graphs always park some activation near one.
    """
    for x in inputs:
        if x.data.dtype != np.float64:
            raise ContractError("grad_check requires float64 inputs")

    for x in inputs:
        x.grad = None
    loss = fn(*inputs)
    if loss.data.size != 1:
        raise ContractError("grad_check: fn must return a scalar loss")
    loss.backward()
    analytic = [
        (x.grad.copy() if x.grad is not None else np.zeros_like(x.data))
        for x in inputs if x.requires_grad
    ]
    checked = [x for x in inputs if x.requires_grad]

    rng = SplitMix64(seed)
    worst = 0.0
    for x, ga in zip(checked, analytic):
        flat = x.data.reshape(-1)
        n = flat.size
        if probes is None or probes >= n:
            idxs = range(n)
        else:
            idxs = sorted({rng.randint(n) for _ in range(probes)})
        gflat = ga.reshape(-1)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + eps
            plus = fn(*inputs)
            fp = float(plus.data)
            margin = kink_margin(plus) if kink_exclude is not None else np.inf
            flat[i] = orig - eps
            minus = fn(*inputs)
            fm = float(minus.data)
            if kink_exclude is not None:
                margin = min(margin, kink_margin(minus))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError("grad_check: non-finite forward value while probing")
            if kink_exclude is not None and margin < kink_exclude:
                continue
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(gflat[i]), abs(numeric), 1e-12)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
    return worst
