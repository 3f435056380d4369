"""Staged training and full-pipeline inference.

The recipe has three stages. `pretrain_view` fits ViewNet alone to map
coded images to ground-truth center views. `pretrain_disp_warp` trains
DispNet and WarpNet together against photo-consistency over all non-center
views, with the ground-truth center as the warp source; the loss gradient
reaches DispNet through the numeric warp Jacobian. `joint` swaps the
ViewNet estimate in for the ground-truth center and updates everything,
with an optional auxiliary center-view term keeping ViewNet anchored.

Network inputs are coded images divided by the per-pixel mask weight sum,
which maps them into [0, 1] and makes a zero-disparity scene's input equal
its center view exactly.

Every random choice (weights, scene set, split, epoch order) derives from
one root seed through tagged SplitMix64 streams, so two runs with the same
config produce bit-identical checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import networks
from .autodiff import Adam, Tensor, clip_global_norm
from .autodiff import tensor as ops
from .coded import CodedImage, CodeMask, capture, gen_mask, modulation, view_weight_sum
from .errors import NumericError, ShapeError
from .lightfield import (
    LayerSpec,
    LightField,
    SceneSpec,
    SyntheticScene,
    box_blur,
    ellipse_mask,
    load_lightfield,
    make_synthetic,
    procedural_texture,
)
from .metrics import psnr, ssim
from .networks import NetworkConfig
from .rng import SplitMix64, derive_seed
from .warping import DisparityMap, backward_warp, forward_warp, warp_views_op

STAGES = ("pretrain_view", "pretrain_disp_warp", "joint")
_STAGE_PARAM_PREFIXES = {
    "pretrain_view": ("view.",),
    "pretrain_disp_warp": ("disp.", "warp."),
    "joint": ("view.", "disp.", "warp."),
}


def lr_schedule(epoch: int, base_lr: float, factor: float = 0.8, period: int = 5) -> float:
    """Piecewise-constant decay: base_lr * factor ** floor(epoch / period)."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return base_lr * factor ** (epoch // period)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class TrainConfig:
    """Full training recipe. Defaults mirror the published schedule
    (lr 1e-4 decayed by 0.8 every 5 epochs, 30 pretraining epochs, 5
    joint epochs, 120-pixel patches, 7x7 views, 15x15 mask); the toy
    recipe in `toy_train_config` overrides them for desk-scale runs."""

    epochs_view: int = 30
    epochs_disp_warp: int = 30
    epochs_joint: int = 5
    base_lr: float = 1e-4
    lr_factor: float = 0.8
    lr_period: int = 5
    batch_size: int = 8
    patch_size: int = 120
    angular_radius: int = 3
    channels: int = 3
    mask_seed: int = 7
    mask_tile: int = 15
    mask_shift: int = 1
    loss_mode: str = "mean"
    precision: str = "f32"
    seed: int = 0
    aux_center_weight: float = 1.0
    hole_weight: float = 1.0
    disp_warmup_epochs: int = 0
    disp_inputs_from_estimate: bool = False
    grad_clip: float = 10.0
    val_fraction: float = 0.15
    val_interval: int = 5
    dataset: str = "toy:32"
    network: NetworkConfig = field(default_factory=networks.reference_config)

    def __post_init__(self):
        if self.loss_mode not in ("sum", "mean"):
            raise ValueError(f"loss_mode must be 'sum' or 'mean', got {self.loss_mode!r}")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be 'f32' or 'f64', got {self.precision!r}")
        if self.network.channels != self.channels:
            raise ValueError("network channels must match dataset channels")

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64

    def stage_epochs(self, stage: str) -> int:
        return {"pretrain_view": self.epochs_view,
                "pretrain_disp_warp": self.epochs_disp_warp,
                "joint": self.epochs_joint}[stage]


def toy_train_config(**overrides) -> TrainConfig:
    """Desk-scale recipe: 48-pixel scenes, 5x5 views, quarter-width nets."""
    defaults = dict(
        epochs_view=40,
        epochs_disp_warp=28,
        disp_warmup_epochs=20,
        epochs_joint=6,
        base_lr=3e-3,
        lr_factor=0.8,
        lr_period=12,
        batch_size=2,
        patch_size=48,
        angular_radius=2,
        channels=3,
        hole_weight=0.1,
        disp_inputs_from_estimate=True,
        val_interval=10,
        dataset="toy:32",
        network=replace(networks.toy_config(channels=3), disp_correction_bound=1.5),
    )
    defaults.update(overrides)
    return TrainConfig(**defaults)


_NETWORK_PRESETS = {"reference": networks.reference_config, "toy": networks.toy_config}


def config_keys() -> list[str]:
    """Every key accepted in config files and --set overrides."""
    plain = [f.name for f in fields(TrainConfig) if f.name != "network"]
    net = [f"network.{f.name}" for f in fields(NetworkConfig)]
    return plain + ["network.preset"] + net


def _parse_value(current, raw: str):
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"expected boolean, got {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    if isinstance(current, tuple):
        items = []
        for v in raw.split(","):
            v = v.strip()
            if not v:
                continue
            try:
                items.append(int(v))
            except ValueError:
                items.append(float(v))
        return tuple(items)
    return raw


def apply_overrides(config: TrainConfig, overrides: dict[str, str]) -> TrainConfig:
    """Apply dotted-key string overrides; unknown keys raise with the full
    list of valid keys."""
    valid = set(config_keys())
    plain: dict = {}
    net = config.network
    for key, raw in overrides.items():
        if key not in valid:
            raise KeyError(
                f"unknown config key {key!r}; valid keys: {', '.join(sorted(valid))}"
            )
        if key == "network.preset":
            net = _NETWORK_PRESETS[raw](channels=net.channels)
        elif key.startswith("network."):
            name = key.split(".", 1)[1]
            net = replace(net, **{name: _parse_value(getattr(net, name), raw)})
        else:
            plain[key] = _parse_value(getattr(config, key), raw)
    if "channels" in plain and plain["channels"] != net.channels:
        net = replace(net, channels=plain["channels"])
    return replace(config, network=net, **plain)


def save_config(config: TrainConfig, path) -> None:
    lines = ["# codedlf training configuration"]
    for f in fields(TrainConfig):
        if f.name == "network":
            continue
        lines.append(f"{f.name} = {getattr(config, f.name)}")
    for f in fields(NetworkConfig):
        value = getattr(config.network, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        lines.append(f"network.{f.name} = {value}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_config(path) -> TrainConfig:
    overrides: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = line.split("=", 1)
        overrides[key.strip()] = raw.strip()
    return apply_overrides(TrainConfig(), overrides)


# ---------------------------------------------------------------------------
# datasets


@dataclass
class TrainSample:
    lf: LightField
    coded: CodedImage
    coded_norm: np.ndarray
    gt_disparity: np.ndarray | None = None
    occlusion: np.ndarray | None = None
    pseudo_disparity: np.ndarray | None = None
    probe_cache: np.ndarray | None = None


def match_disparity(lf: LightField, d_lo: float = -2.4, d_hi: float = 2.4,
                    candidates: int = 25) -> np.ndarray:
    """Photo-consistency pseudo-disparity by brute-force cost-volume search:
    for each candidate d, sample every view at x + q*d and score against
    the center view; take the per-pixel argmin with a parabolic refine.

    Self-supervised (no disparity labels involved); used to warm up
    DispNet before the numeric warp-Jacobian phase, whose early gradient
    at desk scale is too noisy to pull a fresh network off the D = 0
    plateau.
    """
    c0 = lf.view(0, 0).astype(np.float64)
    h, w = lf.height, lf.width
    qs = _offsets(lf.angular_radius)
    cands = np.linspace(d_lo, d_hi, candidates)
    cost = np.zeros((candidates, h, w))
    for qu, qv in qs:
        view = lf.view(qu, qv).astype(np.float64)
        for di, d in enumerate(cands):
            samp = backward_warp(view, np.full((h, w), d), (qu, qv), d_max=None)
            cost[di] += np.square(samp - c0).sum(axis=0)
    best = np.argmin(cost, axis=0)
    step = cands[1] - cands[0]
    bm = np.clip(best, 1, candidates - 2)
    ii, jj = np.indices((h, w))
    c_l, c_c, c_r = cost[bm - 1, ii, jj], cost[bm, ii, jj], cost[bm + 1, ii, jj]
    denom = c_l - 2 * c_c + c_r
    offset = np.where(np.abs(denom) > 1e-12, 0.5 * (c_l - c_r) / np.maximum(denom, 1e-12), 0.0)
    return cands[best] + np.clip(offset, -1.0, 1.0) * step


def make_toy_scenes(count: int, seed: int, size: int = 48, angular_radius: int = 2,
                    channels: int = 3, d_range: float = 2.0,
                    back_range: float = 0.5) -> list[SyntheticScene]:
    """Seeded two-layer scenes: a full background plane near the focal
    plane (|d| <= back_range, as in refocused plenoptic captures) plus an
    elliptical foreground blob anywhere in [-d_range, d_range], at least
    half a pixel apart."""
    rng = SplitMix64(derive_seed(seed, 0x5CE4E))
    scenes = []
    for i in range(count):
        while True:
            d_back = (rng.uniform() * 2 - 1) * back_range
            d_front = (rng.uniform() * 2 - 1) * d_range
            if abs(d_front - d_back) >= 0.5:
                break
        cy = size * (0.3 + 0.4 * rng.uniform())
        cx = size * (0.3 + 0.4 * rng.uniform())
        ry = size * (0.15 + 0.15 * rng.uniform())
        rx = size * (0.15 + 0.15 * rng.uniform())
        angle = rng.uniform() * np.pi
        blob = ellipse_mask(size, size, cy, cx, ry, rx, angle)
        tex_seed = derive_seed(seed, 0x7E4, i)
        back_tex = procedural_texture(derive_seed(tex_seed, 0), channels, size, size,
                                      smooth_radius=3, contrast=0.11)
        front_tex = procedural_texture(derive_seed(tex_seed, 1), channels, size, size,
                                       smooth_radius=3, contrast=0.11)
        spec = SceneSpec(
            height=size, width=size, angular_radius=angular_radius, channels=channels,
            layers=(LayerSpec(disparity=d_back, texture=back_tex),
                    LayerSpec(disparity=d_front, texture=front_tex, opacity=blob)),
        )
        scenes.append(make_synthetic(spec, seed=derive_seed(tex_seed, 2)))
    return scenes


def probe_channels(coded_norm_crop: np.ndarray, center: np.ndarray, mask: CodeMask,
                   grid_size: int, full_hw: tuple[int, int], crop_off: tuple[int, int],
                   probes: tuple[float, ...]) -> np.ndarray:
    """Forward-model residual features for DispNet: for each probe
    disparity t, synthesize the coded image the mask would produce if the
    whole scene sat at t (mask-weighted average of the shifted center)
    and report the per-pixel mismatch with the observed coded image,
    normalized by the mean mismatch across probes.

    Residuals dip near the true disparity, giving the network a local,
    mask-aware matching signal it cannot realistically infer from raw
    inputs at desk-scale data volume. Computable from exactly the inputs
    DispNet already receives plus the known mask.
    """
    radius = (grid_size - 1) // 2
    c, h, w = center.shape
    top, left = crop_off
    qs = [(qu, qv) for qu in range(-radius, radius + 1) for qv in range(-radius, radius + 1)]
    fmaps = []
    for q in qs:
        f_full = modulation(mask, q, *full_hw)
        fmaps.append(f_full[top:top + h, left:left + w])
    fsum = np.maximum(np.sum(fmaps, axis=0), 1e-6)

    # dense cost volume over refinement candidates (the declared probes
    # fall on every refine-th slice), each slice 3x3 box-smoothed: one
    # pixel of synthesis mismatch is too noisy to rank candidates
    probe_vals = np.asarray(probes, dtype=np.float64)
    refine = 5
    n_dense = (len(probes) - 1) * refine + 1
    cands = np.linspace(probe_vals[0], probe_vals[-1], n_dense)
    coded64 = coded_norm_crop.astype(np.float64)
    center64 = center.astype(np.float64)
    cost = np.empty((n_dense, h, w))
    for pi, t in enumerate(cands):
        synth = np.zeros((c, h, w))
        shift = np.full((h, w), -float(t))
        for f_q, q in zip(fmaps, qs):
            synth += f_q[None] * backward_warp(center64, shift, q, d_max=None)
        synth /= fsum[None]
        cost[pi] = box_blur(np.square(coded64 - synth).mean(axis=0), 1)

    feats = np.empty((len(probes) + 1, h, w))
    resid = cost[::refine]
    feats[:-1] = resid / (resid.mean(axis=0, keepdims=True) + 1e-9)
    # matched-filter point estimate: windowed argmin with parabolic refine
    best = np.argmin(cost, axis=0)
    step = cands[1] - cands[0]
    bm = np.clip(best, 1, n_dense - 2)
    ii, jj = np.indices((h, w))
    c_l, c_c, c_r = cost[bm - 1, ii, jj], cost[bm, ii, jj], cost[bm + 1, ii, jj]
    denom = c_l - 2 * c_c + c_r
    offset = np.where(np.abs(denom) > 1e-15, 0.5 * (c_l - c_r) / np.maximum(denom, 1e-15), 0.0)
    d_init = cands[best] + np.clip(offset, -1.0, 1.0) * step
    feats[-1] = d_init / max(abs(probe_vals).max(), 1.0)
    return feats


def normalize_coded(coded: CodedImage | np.ndarray, mask: CodeMask, grid_size: int,
                    dtype=np.float32) -> np.ndarray:
    data = coded.data if isinstance(coded, CodedImage) else np.asarray(coded)
    norm = view_weight_sum(mask, grid_size, data.shape[1], data.shape[2])
    norm = np.maximum(norm, 1e-6)
    return (data / norm[None]).astype(dtype)


def prepare_samples(config: TrainConfig, scenes=None) -> tuple[list[TrainSample], CodeMask]:
    """Capture + normalize each scene. `scenes` may be SyntheticScene or
    LightField objects; with None, the config's dataset spec is realized
    ("toy:<n>" procedural scenes or "dir:<path>" of .lf4 files)."""
    mask = gen_mask(config.mask_seed, config.mask_tile, config.mask_shift)
    if scenes is None:
        kind, _, arg = config.dataset.partition(":")
        if kind == "toy":
            scenes = make_toy_scenes(int(arg or "32"), seed=derive_seed(config.seed, 0xDA7A),
                                     size=config.patch_size,
                                     angular_radius=config.angular_radius,
                                     channels=config.channels)
        elif kind == "dir":
            paths = sorted(Path(arg).glob("*.lf4"))
            if not paths:
                raise FileNotFoundError(f"no .lf4 files under {arg}")
            scenes = [load_lightfield(p) for p in paths]
        else:
            raise ValueError(f"unknown dataset spec {config.dataset!r}")
    samples = []
    for scene in scenes:
        if isinstance(scene, SyntheticScene):
            lf, gt_d, occ = scene.lightfield, scene.disparity, scene.occlusion
        else:
            lf, gt_d, occ = scene, None, None
        if lf.angular_radius != config.angular_radius:
            raise ShapeError(
                f"scene has angular radius {lf.angular_radius}, config expects {config.angular_radius}"
            )
        coded = capture(lf, mask, dtype=config.dtype)
        samples.append(TrainSample(
            lf=lf,
            coded=coded,
            coded_norm=normalize_coded(coded, mask, lf.grid_size, config.dtype),
            gt_disparity=gt_d,
            occlusion=occ,
        ))
    return samples, mask


def split_indices(n: int, val_fraction: float, seed: int) -> tuple[list[int], list[int]]:
    order = list(range(n))
    SplitMix64(derive_seed(seed, 0x5711)).shuffle(order)
    n_val = int(round(n * val_fraction))
    n_val = min(max(n_val, 1 if val_fraction > 0 and n > 1 else 0), n - 1) if n > 1 else 0
    return sorted(order[n_val:]), sorted(order[:n_val])


# ---------------------------------------------------------------------------
# stage losses


def _crop_center_np(arr: np.ndarray, hw: tuple[int, int]) -> np.ndarray:
    h, w = hw
    hh, ww = arr.shape[-2:]
    t, l = (hh - h) // 2, (ww - w) // 2
    return arr[..., t:t + h, l:l + w]


def _offsets(radius: int) -> list[tuple[int, int]]:
    return [(qu, qv) for qu in range(-radius, radius + 1)
            for qv in range(-radius, radius + 1) if (qu, qv) != (0, 0)]


def _batch_views_target(batch: list[TrainSample], qs, hw, dtype) -> np.ndarray:
    """(B*Q, C, h, w) ground-truth views, cropped, sample-major."""
    out = []
    for s in batch:
        for q in qs:
            out.append(_crop_center_np(s.lf.view(*q), hw))
    return np.stack(out).astype(dtype)


def render_views(center: Tensor, disp: Tensor, params: dict, cfg: NetworkConfig,
                 qs):
    """Warp the center estimate to every q and refine with WarpNet; the
    shared photo-consistency path reused by both later training stages.
    Returns (refined views Tensor, hole channel ndarray)."""
    warped, holes = warp_views_op(center, disp, qs, d_max=cfg.d_max)
    return networks.warpnet_forward(params, cfg, warped, Tensor(holes)), holes


def photo_loss(rendered: Tensor, targets: np.ndarray, holes: np.ndarray,
               mode: str, hole_weight: float) -> Tensor:
    """Squared error over all rendered views. With hole_weight < 1, pixels
    the forward warp could not reach count less: disocclusions and border
    strips carry no alignment information, and at desk scale (smooth
    textures, small crops) their zero-fill penalty otherwise exceeds any
    misalignment cost and drives the disparity estimate toward zero."""
    if hole_weight >= 1.0:
        return ops.mse_loss(rendered, targets, mode=mode)
    c = rendered.shape[1]
    weights = np.where(np.repeat(holes, c, axis=1) > 0,
                       np.asarray(hole_weight, dtype=targets.dtype),
                       np.asarray(1.0, dtype=targets.dtype))
    diff = ops.sub(rendered, Tensor(targets))
    weighted = ops.mul(ops.mul(diff, diff), Tensor(weights))
    total = ops.tensor_sum(weighted)
    if mode == "mean":
        return ops.scale(total, 1.0 / targets.size)
    return total


def stage_loss(stage: str, config: TrainConfig, params: dict,
               batch: list[TrainSample]) -> Tensor:
    cfg = config.network
    dtype = config.dtype
    coded_full = np.stack([s.coded_norm for s in batch]).astype(dtype)
    m = cfg.crop_margin
    hw = (coded_full.shape[2] - 2 * m, coded_full.shape[3] - 2 * m)
    centers_gt = np.stack([_crop_center_np(s.lf.view(0, 0), hw) for s in batch]).astype(dtype)

    if stage == "pretrain_view":
        est = networks.viewnet_forward(params, cfg, Tensor(coded_full))
        return ops.mse_loss(est, centers_gt, mode=config.loss_mode)

    qs = _offsets(config.angular_radius)
    coded_crop_np = _crop_center_np(coded_full, hw)
    coded_crop = Tensor(coded_crop_np)
    targets = _batch_views_target(batch, qs, hw, dtype)

    def batch_probes(centers: np.ndarray, cache: bool) -> Tensor | None:
        """Residual probe channels per batch item; constant w.r.t. the
        tape (matched-filter features, not a gradient path)."""
        if not cfg.disp_probes:
            return None
        mask = gen_mask(config.mask_seed, config.mask_tile, config.mask_shift)
        full_hw = coded_full.shape[2:]
        out = []
        for bi, s in enumerate(batch):
            if cache and s.probe_cache is not None:
                out.append(s.probe_cache)
                continue
            feats = probe_channels(coded_crop_np[bi], centers[bi], mask,
                                   s.lf.grid_size, full_hw, (m, m), cfg.disp_probes)
            if cache:
                s.probe_cache = feats
            out.append(feats)
        return Tensor(np.stack(out).astype(dtype))

    if stage in ("disp_warmup", "pretrain_disp_warp"):
        # DispNet inputs: ground-truth center per the published recipe, or
        # the frozen ViewNet estimate so the matching features already sit
        # on the inference distribution (the estimate's residual ghosting
        # biases them, and the network must learn that bias)
        if config.disp_inputs_from_estimate:
            est = networks.viewnet_forward(params, cfg, Tensor(coded_full), inference=True)
            centers_in = est.data
        else:
            centers_in = centers_gt
        center_in = Tensor(centers_in)
        disp = networks.dispnet_forward(params, cfg, coded_crop, center_in,
                                        batch_probes(centers_in, cache=True))
        if stage == "disp_warmup":
            # regress the view-matching pseudo-disparity; WarpNet trains on
            # renders from those labels, no gradient through the warp yet
            bound = cfg.d_max - 0.05
            labels = np.stack([
                np.clip(_crop_center_np(s.pseudo_disparity, hw), -bound, bound)
                for s in batch
            ])[:, None].astype(dtype)
            disp_term = ops.mse_loss(disp, labels, mode=config.loss_mode)
            rendered, holes = render_views(Tensor(centers_gt), Tensor(labels), params, cfg, qs)
            warp_term = photo_loss(rendered, targets, holes, config.loss_mode, config.hole_weight)
            return ops.add(disp_term, warp_term)
        rendered, holes = render_views(Tensor(centers_gt), disp, params, cfg, qs)
        return photo_loss(rendered, targets, holes, config.loss_mode, config.hole_weight)

    if stage == "joint":
        est = networks.viewnet_forward(params, cfg, Tensor(coded_full))
        disp = networks.dispnet_forward(params, cfg, coded_crop, est,
                                        batch_probes(est.data, cache=False))
        rendered, holes = render_views(est, disp, params, cfg, qs)
        loss = photo_loss(rendered, targets, holes, config.loss_mode, config.hole_weight)
        if config.aux_center_weight > 0:
            aux = ops.mse_loss(est, centers_gt, mode=config.loss_mode)
            loss = ops.add(loss, ops.scale(aux, config.aux_center_weight))
        return loss

    raise ValueError(f"unknown stage {stage!r}")


# ---------------------------------------------------------------------------
# reconstruction + evaluation


def reconstruct(coded: CodedImage, params: dict, cfg: NetworkConfig, mask: CodeMask,
                angular_radius: int, dtype=np.float32):
    """Full inference: coded image -> (LightField, DisparityMap, center).

    The center slot of the returned light field holds the ViewNet output;
    every other view is forward-warped from it and refined by WarpNet.
    """
    data = coded.data if isinstance(coded, CodedImage) else np.asarray(coded)
    if data.ndim != 3:
        raise ShapeError(f"coded image must be (C, H, W), got {data.shape}")
    grid = 2 * angular_radius + 1
    x = normalize_coded(data, mask, grid, dtype)
    est_t = networks.viewnet_forward(params, cfg, Tensor(x[None]), inference=True)
    est = est_t.data[0]
    hw = est.shape[1:]
    m = cfg.crop_margin
    coded_crop_np = _crop_center_np(x, hw)
    coded_crop = Tensor(coded_crop_np[None])
    probes = None
    if cfg.disp_probes:
        feats = probe_channels(coded_crop_np, est, mask, grid, x.shape[1:], (m, m),
                               cfg.disp_probes)
        probes = Tensor(feats[None].astype(dtype))
    disp_t = networks.dispnet_forward(params, cfg, coded_crop, est_t.detach(), probes)
    disp = disp_t.data[0, 0]

    qs = _offsets(angular_radius)
    warped, holes = warp_views_op(Tensor(est[None]), Tensor(disp[None, None]), qs,
                                  d_max=cfg.d_max)
    refined = networks.warpnet_forward(params, cfg, warped, Tensor(holes))
    views = np.empty((grid, grid) + est.shape, dtype=np.float32)
    views[angular_radius, angular_radius] = est
    for idx, (qu, qv) in enumerate(qs):
        views[qu + angular_radius, qv + angular_radius] = np.clip(refined.data[idx], 0.0, 1.0)
    lf = LightField(np.clip(views, 0.0, 1.0))
    return lf, DisparityMap(np.asarray(disp, dtype=np.float64), d_max=cfg.d_max), est


@dataclass(frozen=True)
class EvalRow:
    q_u: int
    q_v: int
    psnr: float
    ssim: float


@dataclass(frozen=True)
class EvalTable:
    rows: tuple[EvalRow, ...]
    mean_psnr: float
    mean_ssim: float

    def as_text(self) -> str:
        lines = [f"{'q_u':>4} {'q_v':>4} {'psnr_db':>10} {'ssim':>8}"]
        for r in self.rows:
            lines.append(f"{r.q_u:>4} {r.q_v:>4} {r.psnr:>10.3f} {r.ssim:>8.4f}")
        lines.append(f"{'mean':>9} {self.mean_psnr:>10.3f} {self.mean_ssim:>8.4f}")
        return "\n".join(lines)

    def as_records(self) -> list[dict]:
        recs = [{"q_u": r.q_u, "q_v": r.q_v, "psnr": r.psnr, "ssim": r.ssim}
                for r in self.rows]
        recs.append({"q_u": None, "q_v": None, "psnr": self.mean_psnr, "ssim": self.mean_ssim})
        return recs


def evaluate(lf_pred: LightField, lf_gt: LightField) -> EvalTable:
    """Per-view PSNR/SSIM plus their means over all grid_size^2 views."""
    if lf_pred.views.shape != lf_gt.views.shape:
        raise ShapeError(
            f"prediction {lf_pred.views.shape} and ground truth {lf_gt.views.shape} differ"
        )
    rows = []
    for qu, qv in lf_pred.angular_offsets():
        a, b = lf_pred.view(qu, qv), lf_gt.view(qu, qv)
        rows.append(EvalRow(qu, qv, psnr(a, b), ssim(a, b)))
    mean_psnr = float(np.mean([r.psnr for r in rows]))
    mean_ssim = float(np.mean([r.ssim for r in rows]))
    return EvalTable(tuple(rows), mean_psnr, mean_ssim)


# ---------------------------------------------------------------------------
# the training loop


@dataclass
class TrainReport:
    rows: list[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def deterministic_rows(self) -> list[dict]:
        """Report rows minus wall-clock timing, for determinism checks."""
        return [{k: v for k, v in row.items() if k != "seconds"} for row in self.rows]

    def to_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for row in self.rows:
                fh.write(json.dumps(row) + "\n")
            fh.write(json.dumps({"type": "summary", **self.summary}) + "\n")

    def summary_text(self) -> str:
        lines = [f"{k}: {v}" for k, v in self.summary.items()]
        for row in self.rows:
            if row.get("type") == "epoch":
                lines.append(
                    f"[{row['stage']}] epoch {row['epoch']:3d}  loss {row['loss']:.6e}  lr {row['lr']:.2e}"
                )
            elif row.get("type") == "val":
                lines.append(
                    f"[{row['stage']}] epoch {row['epoch']:3d}  val_psnr {row['mean_psnr']:.2f} dB"
                    f"  val_ssim {row['mean_ssim']:.4f}"
                )
        return "\n".join(lines)


def _checkpoint_meta(config: TrainConfig, stage: str, epoch: int, adam_t: int) -> dict:
    meta = {
        "meta/stage_id": float(STAGES.index(stage)),
        "meta/epoch": float(epoch),
        "meta/adam_t": float(adam_t),
        "meta/angular_radius": float(config.angular_radius),
        "meta/mask_tile": float(config.mask_tile),
        "meta/mask_shift": float(config.mask_shift),
        "meta/patch_size": float(config.patch_size),
    }
    meta.update(networks.seed_to_words(config.mask_seed))
    return meta


def _write_checkpoint(path, params, config, stage, epoch, opt: Adam) -> None:
    arrays = {}
    for name, m in opt.state.m.items():
        arrays[f"optim/m/{name}"] = m
    for name, v in opt.state.v.items():
        arrays[f"optim/v/{name}"] = v
    networks.save_checkpoint(path, params, config.network,
                             scalars=_checkpoint_meta(config, stage, epoch, opt.state.t),
                             arrays=arrays)


def _validation_row(stage, epoch, config, params, samples, val_idx) -> dict | None:
    if not val_idx:
        return None
    cfg = config.network
    m = cfg.crop_margin
    psnrs, ssims = [], []
    mask = gen_mask(config.mask_seed, config.mask_tile, config.mask_shift)
    for i in val_idx:
        s = samples[i]
        hw = (s.lf.height - 2 * m, s.lf.width - 2 * m)
        if stage == "pretrain_view":
            est = networks.viewnet_forward(params, cfg, Tensor(s.coded_norm[None]),
                                           inference=True).data[0]
            gt = _crop_center_np(s.lf.view(0, 0), hw)
            psnrs.append(psnr(est, gt))
            ssims.append(ssim(est, gt))
        else:
            lf_pred, _, _ = reconstruct(s.coded, params, cfg, mask,
                                        config.angular_radius, config.dtype)
            gt = LightField(_crop_center_np(s.lf.views, hw))
            table = evaluate(lf_pred, gt)
            psnrs.append(table.mean_psnr)
            ssims.append(table.mean_ssim)
    finite = [p for p in psnrs if np.isfinite(p)]
    return {
        "type": "val", "stage": stage, "epoch": epoch,
        "mean_psnr": float(np.mean(finite)) if finite else float("inf"),
        "mean_ssim": float(np.mean(ssims)),
        "per_scene_psnr": [float(p) for p in psnrs],
    }


def train_stage(stage: str, config: TrainConfig, samples: list[TrainSample],
                params: dict, train_idx: list[int], val_idx: list[int],
                report: TrainReport, ckpt_dir=None, start_epoch: int = 0,
                resume_opt: dict | None = None) -> Adam:
    """Run one stage in place on `params`, appending rows to `report`;
    returns the stage optimizer (for final-state checkpointing).

    A non-finite loss aborts the stage: parameters roll back to the last
    completed epoch, a last-good checkpoint is written when a checkpoint
    directory is configured, and NumericError propagates.
    """
    if stage not in STAGES:
        raise ValueError(f"unknown stage {stage!r}; expected one of {STAGES}")
    warmup = config.disp_warmup_epochs if stage == "pretrain_disp_warp" else 0
    if warmup > 0:
        for i in train_idx:
            if samples[i].pseudo_disparity is None:
                bound = config.network.d_max - 0.05
                samples[i].pseudo_disparity = match_disparity(
                    samples[i].lf, d_lo=-bound, d_hi=bound)
    prefixes = _STAGE_PARAM_PREFIXES[stage]
    trained = {k: v for k, v in params.items() if k.startswith(prefixes)}
    opt = Adam(trained, lr=config.base_lr)
    if resume_opt:
        for name in trained:
            if f"optim/m/{name}" in resume_opt:
                opt.state.m[name] = resume_opt[f"optim/m/{name}"].astype(config.dtype).copy()
                opt.state.v[name] = resume_opt[f"optim/v/{name}"].astype(config.dtype).copy()
        opt.state.t = int(resume_opt.get("t", 0))

    epochs = config.stage_epochs(stage)
    last_good = {k: v.data.copy() for k, v in trained.items()}
    for epoch in range(start_epoch, epochs):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, config.base_lr, config.lr_factor, config.lr_period)
        opt.lr = lr
        order = list(train_idx)
        SplitMix64(derive_seed(config.seed, 0xE60C, STAGES.index(stage), epoch)).shuffle(order)
        losses = []
        phase = "disp_warmup" if epoch < warmup else stage
        try:
            for lo in range(0, len(order), config.batch_size):
                batch = [samples[i] for i in order[lo:lo + config.batch_size]]
                opt.zero_grad()
                loss = stage_loss(phase, config, params, batch)
                value = float(loss.data)
                if not np.isfinite(value):
                    raise NumericError(f"non-finite loss in stage {stage!r} epoch {epoch}")
                loss.backward()
                grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data))
                         for k, p in trained.items()}
                if config.grad_clip > 0:
                    clip_global_norm(grads, config.grad_clip)
                opt.step(grads)
                losses.append(value)
        except NumericError:
            for k, v in last_good.items():
                trained[k].data = v
            if ckpt_dir is not None:
                _write_checkpoint(Path(ckpt_dir) / f"ckpt_{stage}_lastgood.clfc",
                                  params, config, stage, epoch - 1, opt)
            raise
        last_good = {k: v.data.copy() for k, v in trained.items()}
        row = {
            "type": "epoch", "stage": stage, "epoch": epoch,
            "loss": float(np.mean(losses)) if losses else 0.0,
            "lr": lr,
            "batches": len(losses),
            "seconds": round(time.perf_counter() - t0, 3),
        }
        if phase != stage:
            row["phase"] = phase
        report.rows.append(row)
        if val_idx and ((epoch + 1) % config.val_interval == 0 or epoch == epochs - 1):
            row = _validation_row(stage, epoch, config, params, samples, val_idx)
            if row:
                report.rows.append(row)
        if ckpt_dir is not None:
            _write_checkpoint(Path(ckpt_dir) / f"ckpt_{stage}_{epoch:03d}.clfc",
                              params, config, stage, epoch, opt)
    return opt


def run_training(config: TrainConfig, scenes=None, stages=None, ckpt_dir=None,
                 resume: str | None = None):
    """Run the requested stages (default: all three, in order) and return
    (params, report, samples, mask)."""
    stages = list(stages) if stages else list(STAGES)
    for s in stages:
        if s not in STAGES:
            raise ValueError(f"unknown stage {s!r}")
    if ckpt_dir is not None:
        Path(ckpt_dir).mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    samples, mask = prepare_samples(config, scenes)
    train_idx, val_idx = split_indices(len(samples), config.val_fraction, config.seed)

    start_stage_idx, start_epoch = 0, 0
    resume_opt = None
    if resume is not None:
        params, scalars, arrays = networks.load_checkpoint(resume, config.network)
        for p in params.values():
            p.data = p.data.astype(config.dtype)
        ck_stage = STAGES[int(scalars["meta/stage_id"])]
        if ck_stage in stages:
            start_stage_idx = stages.index(ck_stage)
            start_epoch = int(scalars["meta/epoch"]) + 1
            resume_opt = dict(arrays)
            resume_opt["t"] = scalars["meta/adam_t"]
    else:
        params = networks.init_weights(config.network, derive_seed(config.seed, 0x1417),
                                       dtype=config.dtype)

    report = TrainReport()
    report.summary = {
        "seed": config.seed,
        "mask_seed": config.mask_seed,
        "stages": stages,
        "train_indices": train_idx,
        "val_indices": val_idx,
        "precision": config.precision,
    }
    last_opt = None
    for si in range(start_stage_idx, len(stages)):
        stage = stages[si]
        first = start_epoch if si == start_stage_idx else 0
        last_opt = train_stage(stage, config, samples, params, train_idx, val_idx, report,
                               ckpt_dir=ckpt_dir, start_epoch=first,
                               resume_opt=resume_opt if si == start_stage_idx else None)
    report.summary["wall_clock_s"] = round(time.perf_counter() - t0, 3)
    if ckpt_dir is not None and last_opt is not None:
        final_stage = stages[-1]
        _write_checkpoint(Path(ckpt_dir) / "checkpoint_final.clfc", params, config,
                          final_stage, max(config.stage_epochs(final_stage) - 1, 0), last_opt)
    return params, report, samples, mask
