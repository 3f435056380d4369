"""The three reconstruction networks and their checkpoint container.

ViewNet maps the (normalized) coded image to a center-view estimate: two
unpadded opening convolutions (7x7 then 5x5, which cost 10 pixels of
border), then a conv/deconv trunk with symmetric skip additions and a
linear head. DispNet maps the coded image stacked with the center view to
a disparity map bounded by d_max through a scaled tanh: a strided
encoder, a mirrored transposed-conv decoder, one long skip from input
features concatenated back in, and exactly four head convolutions.
WarpNet refines a warped view given its hole mask as an extra input
channel: four convolutions adding a residual onto the warped image, so
zero-initialized heads start at identity.

All parameters live in a flat name -> Tensor dict, which keeps the
optimizer, the gradient checker and the checkpoint format trivial.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, fields

import numpy as np

from .autodiff import tensor as ops
from .autodiff.tensor import Tensor
from .errors import FormatError, ShapeError
from .rng import SplitMix64, derive_seed

CHECKPOINT_MAGIC = b"CLFC"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    channels: int = 3
    view_width: int = 64
    view_pairs: int = 3
    view_open_kernels: tuple[int, ...] = (7, 5)
    view_residual: bool = True
    disp_enc: tuple[int, ...] = (32, 64, 128)
    disp_dec: tuple[int, ...] = (64, 32, 32)
    disp_skip: int = 32
    disp_head: tuple[int, ...] = (64, 64, 32)
    disp_probes: tuple[float, ...] = ()
    disp_correction_bound: float = 1.0
    warp_width: int = 32
    d_max: float = 4.0

    @property
    def crop_margin(self) -> int:
        """Pixels lost per border by the unpadded opening layers."""
        return sum(k - 1 for k in self.view_open_kernels) // 2

    @property
    def probe_channel_count(self) -> int:
        """Residual channel per probe disparity plus one softargmin
        point-estimate channel."""
        return len(self.disp_probes) + 1 if self.disp_probes else 0

    def validate(self) -> None:
        if self.channels not in (1, 3):
            raise ValueError(f"channels must be 1 or 3, got {self.channels}")
        if self.view_pairs < 1:
            raise ValueError("ViewNet needs at least one conv/deconv pair")
        if len(self.disp_enc) != len(self.disp_dec):
            raise ValueError("DispNet decoder must mirror the encoder depth")
        if len(self.disp_head) != 3:
            raise ValueError("DispNet head is exactly four convolutions: three hidden plus the output layer")
        if self.d_max <= 0:
            raise ValueError("d_max must be positive")
        widths = (self.view_width, self.disp_skip, self.warp_width,
                  *self.disp_enc, *self.disp_dec, *self.disp_head)
        if any(v < 1 for v in widths):
            raise ValueError("layer widths must be positive")
        if any(k < 1 or k % 2 == 0 for k in self.view_open_kernels):
            raise ValueError("opening kernels must be odd and positive")


def reference_config(channels: int = 3) -> NetworkConfig:
    return NetworkConfig(channels=channels)


def toy_config(channels: int = 3, d_max: float = 3.0) -> NetworkConfig:
    """Quarter-width variant that trains in minutes on a CPU. DispNet gets
    forward-model residual probes: without them, reading disparity out of
    mask-phase ghosting needs far more data and width than desk scale
    affords."""
    return NetworkConfig(
        channels=channels,
        view_width=16,
        disp_enc=(8, 16, 32),
        disp_dec=(16, 8, 8),
        disp_skip=8,
        disp_head=(16, 16, 8),
        disp_probes=(-2.5, -1.875, -1.25, -0.625, 0.0, 0.625, 1.25, 1.875, 2.5),
        warp_width=8,
        d_max=d_max,
    )


# ---------------------------------------------------------------------------
# parameters


def _layer_specs(cfg: NetworkConfig) -> list[tuple[str, int, int, int, bool]]:
    """(name, in_channels, out_channels, kernel, transposed) for every conv
    layer, in a fixed order that also fixes the initialization stream.
    Plain conv kernels are stored (out, in, k, k); transposed-conv kernels
    (in, out, k, k), matching conv2d_transpose's adjoint layout."""
    c = cfg.channels
    specs: list[tuple[str, int, int, int, bool]] = []
    for i, k in enumerate(cfg.view_open_kernels):
        specs.append((f"view.open{i}", c if i == 0 else cfg.view_width, cfg.view_width, k, False))
    for i in range(cfg.view_pairs):
        specs.append((f"view.enc{i + 1}", cfg.view_width, cfg.view_width, 3, False))
    for i in range(cfg.view_pairs, 0, -1):
        specs.append((f"view.dec{i}", cfg.view_width, cfg.view_width, 3, True))
    specs.append(("view.head", cfg.view_width, c, 3, False))

    disp_in = 2 * c + cfg.probe_channel_count
    specs.append(("disp.skip", disp_in, cfg.disp_skip, 3, False))
    prev = disp_in
    for i, width in enumerate(cfg.disp_enc):
        specs.append((f"disp.enc{i + 1}", prev, width, 3, False))
        prev = width
    for i, width in enumerate(cfg.disp_dec):
        specs.append((f"disp.dec{i + 1}", prev, width, 3, True))
        prev = width
    prev = cfg.disp_dec[-1] + cfg.disp_skip
    for i, width in enumerate(cfg.disp_head):
        specs.append((f"disp.head{i + 1}", prev, width, 3, False))
        prev = width
    specs.append(("disp.head4", prev, 1, 3, False))

    prev = c + 1
    for i in range(3):
        specs.append((f"warp.conv{i + 1}", prev, cfg.warp_width, 3, False))
        prev = cfg.warp_width
    specs.append(("warp.conv4", prev, c, 3, False))
    return specs


def init_weights(cfg: NetworkConfig, seed: int, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in-scaled uniform init (bound sqrt(6/fan_in)), biases zero.
    Same seed gives bit-identical parameters."""
    cfg.validate()
    rng = SplitMix64(derive_seed(seed, 0x1A17))
    params: dict[str, Tensor] = {}
    for name, in_c, out_c, k, transposed in _layer_specs(cfg):
        fan_in = in_c * k * k
        bound = np.sqrt(6.0 / fan_in)
        w = (rng.uniforms(out_c * in_c * k * k) * 2.0 - 1.0) * bound
        shape = (in_c, out_c, k, k) if transposed else (out_c, in_c, k, k)
        params[f"{name}.w"] = Tensor(w.reshape(shape).astype(dtype), requires_grad=True)
        params[f"{name}.b"] = Tensor(np.zeros(out_c, dtype=dtype), requires_grad=True)
    return params


def _conv(params, name, x, stride=1, padding=1):
    h = ops.conv2d(x, params[f"{name}.w"], stride=stride, padding=padding)
    return ops.add_bias(h, params[f"{name}.b"])


def _deconv(params, name, x, stride=1, padding=1, output_size=None):
    h = ops.conv2d_transpose(x, params[f"{name}.w"], stride=stride, padding=padding,
                             output_size=output_size)
    return ops.add_bias(h, params[f"{name}.b"])


# ---------------------------------------------------------------------------
# forwards


def viewnet_forward(params: dict, cfg: NetworkConfig, coded: Tensor,
                    inference: bool = False) -> Tensor:
    """Center-view estimate from the normalized coded image. Output is
    smaller than the input by 2 * crop_margin; values are clipped to
    [0, 1] at inference only."""
    h = coded
    for i in range(len(cfg.view_open_kernels)):
        h = ops.relu(_conv(params, f"view.open{i}", h, padding=0))
    trunk_in = h
    enc_outs = []
    for i in range(cfg.view_pairs):
        h = ops.relu(_conv(params, f"view.enc{i + 1}", h))
        enc_outs.append(h)
    partners = [trunk_in] + enc_outs[:-1]
    for i in range(cfg.view_pairs, 0, -1):
        h = ops.relu(ops.add(_deconv(params, f"view.dec{i}", h), partners[i - 1]))
    out = _conv(params, "view.head", h)
    if cfg.view_residual:
        out = ops.add(out, ops.crop_center(coded, out.shape[2:]))
    if inference:
        out = ops.clip(out, 0.0, 1.0)
    return out


def dispnet_forward(params: dict, cfg: NetworkConfig, coded: Tensor,
                    center: Tensor, probes: Tensor | None = None) -> Tensor:
    """Disparity map from the coded image stacked with the center view;
    |output| <= d_max by the scaled-tanh head.

    When the config declares probe disparities, `probes` must carry the
    matching forward-model residual channels (see
    training.probe_channels); they are stacked onto the input."""
    if coded.shape[0] != center.shape[0] or coded.shape[2:] != center.shape[2:]:
        raise ShapeError(
            f"coded {coded.shape} and center {center.shape} are misaligned"
        )
    x = ops.concat_channels(coded, center)
    if cfg.disp_probes:
        if probes is None:
            raise ShapeError("this DispNet config requires probe residual channels")
        if probes.shape[1] != cfg.probe_channel_count:
            raise ShapeError(
                f"expected {cfg.probe_channel_count} probe channels, got {probes.shape[1]}"
            )
        x = ops.concat_channels(x, probes)
    elif probes is not None:
        raise ShapeError("probe channels supplied but the config declares none")
    skip = ops.relu(_conv(params, "disp.skip", x))
    sizes = [x.shape[2:]]
    h = x
    for i in range(len(cfg.disp_enc)):
        h = ops.relu(_conv(params, f"disp.enc{i + 1}", h, stride=2))
        sizes.append(h.shape[2:])
    for i in range(len(cfg.disp_dec)):
        h = ops.relu(_deconv(params, f"disp.dec{i + 1}", h, stride=2,
                             output_size=sizes[-(i + 2)]))
    h = ops.concat_channels(h, skip)
    for i in range(len(cfg.disp_head)):
        h = ops.relu(_conv(params, f"disp.head{i + 1}", h))
    raw = _conv(params, "disp.head4", h)
    if not cfg.disp_probes:
        return ops.scale(ops.tanh(raw), cfg.d_max)
    # probe configs predict a bounded correction to the matched-filter
    # point estimate (the last probe channel); encoder-decoder regression
    # alone cannot reproduce its sub-pixel precision
    d_init = probes.data[:, -1:] * max(abs(p) for p in cfg.disp_probes)
    corr = ops.scale(ops.tanh(raw), cfg.disp_correction_bound)
    return ops.clip(ops.add(corr, Tensor(d_init.astype(corr.data.dtype))),
                    -cfg.d_max, cfg.d_max)


def warpnet_forward(params: dict, cfg: NetworkConfig, warped: Tensor,
                    holes: Tensor) -> Tensor:
    """Refine a forward-warped view; the hole mask rides along as an input
    channel and the stack adds a residual onto the warped image."""
    x = ops.concat_channels(warped, holes)
    h = x
    for i in range(3):
        h = ops.relu(_conv(params, f"warp.conv{i + 1}", h))
    res = _conv(params, "warp.conv4", h)
    return ops.add(res, warped)


def subset(params: dict, prefix: str) -> dict:
    return {k: v for k, v in params.items() if k.startswith(prefix)}


# ---------------------------------------------------------------------------
# checkpoints


def config_hash(cfg: NetworkConfig) -> bytes:
    text = "\n".join(f"{f.name}={getattr(cfg, f.name)!r}" for f in fields(cfg))
    return hashlib.sha256(text.encode()).digest()


def save_checkpoint(path, params: dict, cfg: NetworkConfig,
                    scalars: dict[str, float] | None = None,
                    arrays: dict[str, np.ndarray] | None = None) -> None:
    """CLFC container: magic, u32 version, 32-byte config hash, then
    records [u32 name length, name, u32 rank, u32 dims..., f32 data].

    `scalars` become rank-0 records (conventionally under "meta/"),
    `arrays` extra float records (optimizer state under "optim/").
    Records are written in sorted name order.
    """
    entries: dict[str, np.ndarray] = {k: v.data for k, v in params.items()}
    for k, v in (arrays or {}).items():
        entries[k] = np.asarray(v)
    for k, v in (scalars or {}).items():
        entries[k] = np.asarray(float(v), dtype=np.float32)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config_hash(cfg))
        for name in sorted(entries):
            arr = np.asarray(entries[name], dtype="<f4", order="C")
            raw = name.encode()
            fh.write(struct.pack("<I", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            for d in arr.shape:
                fh.write(struct.pack("<I", d))
            fh.write(arr.tobytes(order="C"))


def load_checkpoint(path, cfg: NetworkConfig | None = None):
    """Returns (params, scalars, arrays): parameter Tensors (requires_grad
    set), "meta/" scalars, and any other records. With a config given,
    the stored hash must match."""
    with open(path, "rb") as fh:
        if fh.read(4) != CHECKPOINT_MAGIC:
            raise FormatError(f"{path}: not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != CHECKPOINT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        stored_hash = fh.read(32)
        if len(stored_hash) != 32:
            raise FormatError(f"{path}: truncated header")
        if cfg is not None and stored_hash != config_hash(cfg):
            raise FormatError(f"{path}: checkpoint was written for a different network config")
        entries: dict[str, np.ndarray] = {}
        while True:
            head = fh.read(4)
            if not head:
                break
            (nlen,) = struct.unpack("<I", head)
            name = fh.read(nlen).decode()
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank)) if rank else ()
            count = int(np.prod(dims)) if dims else 1
            payload = fh.read(4 * count)
            if len(payload) != 4 * count:
                raise FormatError(f"{path}: truncated record {name!r}")
            entries[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    params: dict[str, Tensor] = {}
    scalars: dict[str, float] = {}
    arrays: dict[str, np.ndarray] = {}
    for name, arr in entries.items():
        if name.startswith("meta/"):
            scalars[name] = float(arr.reshape(-1)[0])
        elif name.startswith("optim/"):
            arrays[name] = arr
        else:
            params[name] = Tensor(arr, requires_grad=True)
    return params, scalars, arrays


def seed_to_words(seed: int) -> dict[str, float]:
    """Split a u64 seed into four 16-bit words, each exactly representable
    as float32, for storage inside the checkpoint record format."""
    return {f"meta/mask_seed_w{i}": float((seed >> (16 * i)) & 0xFFFF) for i in range(4)}


def words_to_seed(scalars: dict[str, float]) -> int:
    return sum(int(scalars[f"meta/mask_seed_w{i}"]) << (16 * i) for i in range(4))
