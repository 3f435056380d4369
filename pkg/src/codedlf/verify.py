"""Gradient-soundness sweep: finite-difference checks for every
registered tensor op and for the three networks as composed graphs.

Used by the `codedlf gradcheck` CLI command and the acceptance suite.
Everything runs in float64 with the default 1e-6 step; relu/clip probes
that land near a kink are excluded (the analytic subgradient and a
central difference legitimately disagree there).
"""

from __future__ import annotations

import numpy as np

from . import networks
from .autodiff import Tensor, grad_check, kink_margin
from .autodiff import tensor as ops
from .rng import SplitMix64, derive_seed

DEFAULT_TOLERANCE = 1e-4


def _rand(rng: SplitMix64, shape, scale=1.0):
    n = int(np.prod(shape))
    return Tensor((rng.normals(n).reshape(shape) * scale), requires_grad=True)


def _with_margin(builder, seed, attempts=60, min_margin=1e-3):
    """Draw inputs until no relu/clip input sits near its kink."""
    for k in range(attempts):
        fn, inputs = builder(SplitMix64(derive_seed(seed, k)))
        if kink_margin(fn(*inputs)) > min_margin:
            return fn, inputs
    raise RuntimeError("could not draw kink-free inputs")


def op_grad_checks(seed: int = 0) -> dict[str, float]:
    """Max relative FD error per registered op, on small random tensors."""
    results: dict[str, float] = {}

    def check(name, builder, probes=None, kink_exclude=None):
        fn, inputs = _with_margin(builder, derive_seed(seed, hash(name) & 0xFFFF))
        results[name] = grad_check(fn, inputs, probes=probes, kink_exclude=kink_exclude)

    def sum_of(t):
        return ops.tensor_sum(t)

    check("conv2d", lambda r: (
        lambda x, k: sum_of(ops.conv2d(x, k, stride=2, padding=1)),
        [_rand(r, (2, 2, 7, 7)), _rand(r, (3, 2, 3, 3))],
    ))
    check("conv2d_transpose", lambda r: (
        lambda x, k: sum_of(ops.conv2d_transpose(x, k, stride=2, padding=1)),
        [_rand(r, (1, 3, 4, 4)), _rand(r, (3, 2, 3, 3))],
    ))
    check("relu", lambda r: (
        lambda x: ops.mse_loss(ops.relu(x), np.full((5, 5), 0.25), mode="sum"),
        [_rand(r, (5, 5))],
    ))
    check("tanh", lambda r: (
        lambda x: ops.mse_loss(ops.tanh(x), np.full((6,), -0.4), mode="sum"),
        [_rand(r, (6,))],
    ))
    check("add", lambda r: (
        lambda a, b: ops.mse_loss(ops.add(a, b), np.zeros((4, 4)), mode="sum"),
        [_rand(r, (4, 4)), _rand(r, (4, 4))],
    ))
    check("sub", lambda r: (
        lambda a, b: ops.mse_loss(ops.sub(a, b), np.ones((3, 3)), mode="sum"),
        [_rand(r, (3, 3)), _rand(r, (3, 3))],
    ))
    check("mul", lambda r: (
        lambda a, b: sum_of(ops.mul(a, b)),
        [_rand(r, (8,)), _rand(r, (8,))],
    ))
    check("scale", lambda r: (
        lambda x: sum_of(ops.scale(x, -2.5)),
        [_rand(r, (7,))],
    ))
    check("clip", lambda r: (
        lambda x: ops.mse_loss(ops.clip(x, -0.5, 0.5), np.full((9,), 0.1), mode="sum"),
        [_rand(r, (9,))],
    ))
    check("add_bias", lambda r: (
        lambda x, b: ops.mse_loss(ops.add_bias(x, b), np.zeros((2, 3, 3, 3)), mode="sum"),
        [_rand(r, (2, 3, 3, 3)), _rand(r, (3,))],
    ))
    check("concat_channels", lambda r: (
        lambda a, b: ops.mse_loss(ops.concat_channels(a, b),
                                  np.zeros((1, 5, 4, 4)), mode="sum"),
        [_rand(r, (1, 2, 4, 4)), _rand(r, (1, 3, 4, 4))],
    ))
    check("crop_center", lambda r: (
        lambda x: ops.mse_loss(ops.crop_center(x, (3, 3)), np.zeros((1, 1, 3, 3)), mode="sum"),
        [_rand(r, (1, 1, 7, 7))],
    ))
    check("sum", lambda r: (
        lambda x: ops.tensor_sum(ops.mul(x, x)),
        [_rand(r, (11,))],
    ))
    check("mse_loss_sum", lambda r: (
        lambda p: ops.mse_loss(p, np.full((4, 4), 0.3), mode="sum"),
        [_rand(r, (4, 4))],
    ))
    check("mse_loss_mean", lambda r: (
        lambda p: ops.mse_loss(p, np.full((4, 4), -0.1), mode="mean"),
        [_rand(r, (4, 4))],
    ))
    return results


def network_grad_checks(seed: int = 0, probes: int = 6) -> dict[str, float]:
    """FD checks through each full network as a composed graph, probing a
    seeded subset of every parameter tensor."""
    cfg = networks.toy_config(channels=3)
    params = networks.init_weights(cfg, derive_seed(seed, 0xA11), dtype=np.float64)
    rng = SplitMix64(derive_seed(seed, 0xF00D))
    results: dict[str, float] = {}

    def run(name, fn, tensors):
        results[name] = grad_check(fn, tensors, probes=probes,
                                   seed=derive_seed(seed, hash(name) & 0xFFFF),
                                   kink_exclude=2e-5)

    view_in = Tensor(rng.uniforms(3 * 14 * 14).reshape(1, 3, 14, 14))
    view_params = networks.subset(params, "view.")
    view_target = rng.uniforms(3 * 4 * 4).reshape(1, 3, 4, 4)

    def view_loss(*tensors):
        return ops.mse_loss(networks.viewnet_forward(params, cfg, view_in),
                            view_target, mode="sum")

    run("viewnet", view_loss, list(view_params.values()))

    coded = Tensor(rng.uniforms(3 * 9 * 9).reshape(1, 3, 9, 9))
    center = Tensor(rng.uniforms(3 * 9 * 9).reshape(1, 3, 9, 9))
    n_probe = cfg.probe_channel_count
    probes = Tensor(rng.uniforms(n_probe * 81).reshape(1, n_probe, 9, 9)) if n_probe else None
    disp_target = rng.uniforms(81).reshape(1, 1, 9, 9) - 0.5
    disp_params = networks.subset(params, "disp.")

    def disp_loss(*tensors):
        return ops.mse_loss(networks.dispnet_forward(params, cfg, coded, center, probes),
                            disp_target, mode="sum")

    run("dispnet", disp_loss, list(disp_params.values()))

    warped = Tensor(rng.uniforms(3 * 8 * 8).reshape(1, 3, 8, 8))
    holes = Tensor((rng.uniforms(64).reshape(1, 1, 8, 8) > 0.8).astype(np.float64))
    warp_target = rng.uniforms(3 * 8 * 8).reshape(1, 3, 8, 8)
    warp_params = networks.subset(params, "warp.")

    def warp_loss(*tensors):
        return ops.mse_loss(networks.warpnet_forward(params, cfg, warped, holes),
                            warp_target, mode="sum")

    run("warpnet", warp_loss, list(warp_params.values()))
    return results


def run_all(seed: int = 0, probes: int = 6) -> dict[str, float]:
    results = op_grad_checks(seed)
    results.update(network_grad_checks(seed, probes=probes))
    return results
