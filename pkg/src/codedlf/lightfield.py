"""4-D light-field data model, file I/O, and synthetic oracle scenes.

A light field is a nu x nu grid of sub-aperture views, each C x H x W with
samples in [0, 1]. Angular indices q = (q_u, q_v) run over {-r..r} squared
with the center view at q = (0, 0); q_u indexes the vertical angular axis
(view rows) and q_v the horizontal one, matching spatial (row, col) order.

Synthetic scenes are layered fronto-parallel planes: each layer carries a
constant disparity d, and view q shows the layer shifted so that content
at center-view position x appears at x + q*d. The generator returns the
ground-truth center-view disparity and an occlusion mask alongside the
views, which is what makes the warping and training code testable without
real captures.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError
from .rng import SplitMix64, derive_seed

LF4_MAGIC = b"LF4\0"
LF4_VERSION = 1


# ---------------------------------------------------------------------------
# data model


class LightField:
    """Immutable stack of sub-aperture views, shape (nu, nu, C, H, W)."""

    def __init__(self, views):
        views = np.array(views, copy=True)
        if views.ndim != 5:
            raise ShapeError(f"LightField expects a 5-D view array, got {views.shape}")
        nu, nv = views.shape[:2]
        if nu != nv or nu % 2 == 0:
            raise ShapeError(f"view grid must be square with odd extent, got {nu}x{nv}")
        if views.shape[2] not in (1, 3):
            raise ShapeError(f"channels must be 1 or 3, got {views.shape[2]}")
        if not np.issubdtype(views.dtype, np.floating):
            views = views.astype(np.float32)
        if not np.all(np.isfinite(views)):
            raise ShapeError("light-field samples must be finite")
        if views.min() < 0.0 or views.max() > 1.0:
            raise ShapeError("light-field samples must lie in [0, 1]")
        views.setflags(write=False)
        self.views = views

    @property
    def grid_size(self) -> int:
        return self.views.shape[0]

    @property
    def angular_radius(self) -> int:
        return (self.views.shape[0] - 1) // 2

    @property
    def channels(self) -> int:
        return self.views.shape[2]

    @property
    def height(self) -> int:
        return self.views.shape[3]

    @property
    def width(self) -> int:
        return self.views.shape[4]

    def view(self, q_u: int, q_v: int) -> np.ndarray:
        """Sub-aperture view at angular offset (q_u, q_v), each in {-r..r}."""
        r = self.angular_radius
        if abs(q_u) > r or abs(q_v) > r:
            raise IndexError(f"angular index ({q_u}, {q_v}) outside radius {r}")
        return self.views[q_u + r, q_v + r]

    def angular_offsets(self) -> list[tuple[int, int]]:
        r = self.angular_radius
        return [(qu, qv) for qu in range(-r, r + 1) for qv in range(-r, r + 1)]

    def __eq__(self, other):
        return isinstance(other, LightField) and np.array_equal(self.views, other.views)


def center_view(lf: LightField) -> np.ndarray:
    """The view at q = (0, 0)."""
    return lf.view(0, 0)


def epi(lf: LightField, axis: str, index: int) -> np.ndarray:
    """Epipolar-plane image: one spatial row (or column) stacked across the
    angular axis. Horizontal mode fixes q_u = 0 and returns (C, nu, W);
    vertical fixes q_v = 0 and returns (C, nu, H)."""
    r = lf.angular_radius
    if axis == "horizontal":
        if not 0 <= index < lf.height:
            raise IndexError(f"row {index} out of range for height {lf.height}")
        return np.ascontiguousarray(lf.views[r, :, :, index, :].transpose(1, 0, 2))
    if axis == "vertical":
        if not 0 <= index < lf.width:
            raise IndexError(f"column {index} out of range for width {lf.width}")
        return np.ascontiguousarray(lf.views[:, r, :, :, index].transpose(1, 0, 2))
    raise ValueError(f"axis must be 'horizontal' or 'vertical', got {axis!r}")


def extract_patches(lf: LightField, spatial: int, stride: int) -> list[LightField]:
    """Cut spatial x spatial patches at identical coordinates across all
    views; pure sub-arrays, no resampling. Count per axis is
    floor((extent - spatial) / stride) + 1."""
    if spatial > lf.height or spatial > lf.width:
        raise ShapeError(f"patch size {spatial} exceeds views {lf.height}x{lf.width}")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    patches = []
    for oi in range(0, lf.height - spatial + 1, stride):
        for oj in range(0, lf.width - spatial + 1, stride):
            patches.append(LightField(lf.views[:, :, :, oi:oi + spatial, oj:oj + spatial]))
    return patches


# ---------------------------------------------------------------------------
# packed binary container


def save_lightfield(lf: LightField, path, layout: str = "packed_binary",
                    bit_depth: int = 8) -> None:
    """Write a light field either as the `.lf4` packed container (float32,
    bit-exact round trip) or as a directory of per-view PNGs plus a
    manifest. PNG grids quantize to the requested bit depth; 16-bit is
    single-channel only."""
    if layout == "packed_binary":
        _save_lf4(lf, path)
    elif layout == "view_grid_images":
        _save_view_grid(lf, path, bit_depth)
    else:
        raise ValueError(f"unknown layout {layout!r}")


def load_lightfield(path, layout: str = "packed_binary") -> LightField:
    if layout == "packed_binary":
        return _load_lf4(path)
    if layout == "view_grid_images":
        return _load_view_grid(path)
    raise ValueError(f"unknown layout {layout!r}")


def _save_lf4(lf: LightField, path) -> None:
    data = lf.views.astype(np.float32)
    nu, nv, c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(LF4_MAGIC)
        fh.write(struct.pack("<7I", LF4_VERSION, nu, nv, c, h, w, 0))
        fh.write(data.tobytes(order="C"))


def write_lf4_array(arr: np.ndarray, path) -> None:
    """Store a bare (C, H, W) array as a single-view `.lf4` (nu = 1). Used
    for coded-image sidecars and disparity maps; values are not required
    to lie in [0, 1], the container just records float32 samples."""
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3:
        raise ShapeError(f"expected (C, H, W) array, got {arr.shape}")
    data = np.ascontiguousarray(arr, dtype=np.float32)
    c, h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(LF4_MAGIC)
        fh.write(struct.pack("<7I", LF4_VERSION, 1, 1, c, h, w, 0))
        fh.write(data.tobytes(order="C"))


def read_lf4_array(path) -> np.ndarray:
    """Read any `.lf4` payload as a raw float32 array (nu, nv, C, H, W)."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != LF4_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {LF4_MAGIC!r}")
        header = fh.read(28)
        if len(header) != 28:
            raise FormatError(f"{path}: truncated header")
        version, nu, nv, c, h, w, dtype_code = struct.unpack("<7I", header)
        if version != LF4_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if dtype_code != 0:
            raise FormatError(f"{path}: unsupported dtype code {dtype_code}")
        count = nu * nv * c * h * w
        payload = fh.read(4 * count)
        if len(payload) != 4 * count:
            raise FormatError(f"{path}: truncated payload")
        return np.frombuffer(payload, dtype="<f4").reshape(nu, nv, c, h, w).copy()


def _load_lf4(path) -> LightField:
    return LightField(read_lf4_array(path))


def _save_view_grid(lf: LightField, path, bit_depth: int) -> None:
    from PIL import Image

    if bit_depth not in (8, 16):
        raise ValueError("bit_depth must be 8 or 16")
    if bit_depth == 16 and lf.channels != 1:
        raise ValueError("16-bit view grids are single-channel only")
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    r = lf.angular_radius
    peak = (1 << bit_depth) - 1
    for qu, qv in lf.angular_offsets():
        img = lf.view(qu, qv)
        quant = np.round(img * peak).astype(np.uint16 if bit_depth == 16 else np.uint8)
        name = f"view_{qu + r}_{qv + r}.png"
        if lf.channels == 1:
            Image.fromarray(quant[0]).save(out / name)
        else:
            Image.fromarray(quant.transpose(1, 2, 0)).save(out / name)
    manifest = {"angular_radius": r, "channels": lf.channels, "bit_depth": bit_depth}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _load_view_grid(path) -> LightField:
    from PIL import Image

    root = Path(path)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"{root}: missing manifest.json")
    manifest = json.loads(manifest_path.read_text())
    r = int(manifest["angular_radius"])
    channels = int(manifest["channels"])
    bit_depth = int(manifest["bit_depth"])
    if r < 0:
        raise FormatError(f"{root}: invalid angular_radius {r}")
    nu = 2 * r + 1
    peak = float((1 << bit_depth) - 1)

    missing = [
        f"view_{i}_{j}.png"
        for i in range(nu) for j in range(nu)
        if not (root / f"view_{i}_{j}.png").exists()
    ]
    if missing:
        raise FileNotFoundError(f"{root}: missing view files: {', '.join(missing)}")

    views = None
    for i in range(nu):
        for j in range(nu):
            with Image.open(root / f"view_{i}_{j}.png") as im:
                arr = np.asarray(im)
            if arr.ndim == 2:
                arr = arr[None]
            else:
                arr = arr.transpose(2, 0, 1)
            if arr.shape[0] != channels:
                raise FormatError(f"{root}: view_{i}_{j}.png has {arr.shape[0]} channels, manifest says {channels}")
            img = arr.astype(np.float32) / peak
            if views is None:
                views = np.empty((nu, nu) + img.shape, dtype=np.float32)
            elif img.shape != views.shape[2:]:
                raise FormatError(
                    f"{root}: view_{i}_{j}.png size {img.shape} differs from {tuple(views.shape[2:])}"
                )
            views[i, j] = img
    return LightField(views)


# ---------------------------------------------------------------------------
# synthetic layered scenes


@dataclass(frozen=True)
class LayerSpec:
    """One fronto-parallel plane: constant disparity in pixels per unit
    angular step, an optional explicit texture (C, H, W), and an optional
    opacity mask (H, W) with 1 = present. texture=None draws a procedural
    texture from the scene seed; opacity=None means fully opaque."""

    disparity: float
    texture: np.ndarray | None = None
    opacity: np.ndarray | None = None


@dataclass(frozen=True)
class SceneSpec:
    """Back-to-front layer list plus output dimensions."""

    height: int
    width: int
    angular_radius: int
    layers: tuple[LayerSpec, ...]
    channels: int = 3

    def __post_init__(self):
        if not self.layers:
            raise ValueError("SceneSpec needs at least one layer")
        for layer in self.layers:
            if not np.isfinite(layer.disparity):
                raise ValueError("layer disparities must be finite")


@dataclass(frozen=True)
class SyntheticScene:
    """Rendered light field plus the oracle maps the renderer knows."""

    lightfield: LightField
    disparity: np.ndarray        # (H, W) center-view ground truth
    occlusion: np.ndarray        # (H, W) bool, True where some view loses the pixel
    spec: SceneSpec = field(repr=False, default=None)


def box_blur(img: np.ndarray, radius: int, passes: int = 1) -> np.ndarray:
    """Separable box blur with edge clamping, cumsum-based."""
    out = img.astype(np.float64)
    size = 2 * radius + 1
    for _ in range(passes):
        for axis in (0, 1):
            padded = np.concatenate(
                [np.repeat(out.take([0], axis=axis), radius, axis=axis),
                 out,
                 np.repeat(out.take([-1], axis=axis), radius, axis=axis)],
                axis=axis,
            )
            csum = np.cumsum(padded, axis=axis)
            zero = np.zeros_like(csum.take([0], axis=axis))
            csum = np.concatenate([zero, csum], axis=axis)
            hi = csum.take(range(size, csum.shape[axis]), axis=axis)
            lo = csum.take(range(0, csum.shape[axis] - size), axis=axis)
            out = (hi - lo) / size
    return out


def procedural_texture(seed: int, channels: int, height: int, width: int,
                       smooth_radius: int = 7, contrast: float = 0.13) -> np.ndarray:
    """Smoothed-noise texture with correlated RGB channels, values well
    inside [0, 1]. Smoothness is what keeps bilinear interpolation error
    far below the oracle tolerances."""
    rng = SplitMix64(seed)
    base = rng.uniforms(height * width).reshape(height, width)
    base = box_blur(base, smooth_radius, passes=3)
    sd = base.std()
    if sd < 1e-9:
        sd = 1.0
    z = (base - base.mean()) / sd
    # tanh squash instead of clipping: bounded without curvature kinks,
    # slope `contrast` at the mean
    lum = 0.5 + 0.4 * np.tanh(z * contrast / 0.4)
    tex = np.empty((channels, height, width))
    for c in range(channels):
        gain = 0.7 + 0.3 * rng.uniform()
        shift = (rng.uniform() - 0.5) * 0.1
        tex[c] = 0.5 + (lum - 0.5) * gain + shift
    return np.clip(tex, 0.0, 1.0)


def ellipse_mask(height: int, width: int, cy: float, cx: float,
                 ry: float, rx: float, angle: float = 0.0) -> np.ndarray:
    """Binary elliptical mask; the usual foreground blob for toy scenes."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    ca, sa = np.cos(angle), np.sin(angle)
    u = (ca * dy + sa * dx) / ry
    v = (-sa * dy + ca * dx) / rx
    return (u * u + v * v) <= 1.0


def _shift_sample(padded: np.ndarray, margin: int, dy: float, dx: float,
                  height: int, width: int) -> np.ndarray:
    """Bilinear sample of a margin-padded 2-D array at (y - dy, x - dx)
    for every output pixel. Integer shifts reduce to exact slicing."""
    y0 = margin - dy
    x0 = margin - dx
    iy = int(np.floor(y0))
    ix = int(np.floor(x0))
    fy = y0 - iy
    fx = x0 - ix
    block = padded[iy:iy + height + 1, ix:ix + width + 1]
    top = (1 - fx) * block[:height, :width] + fx * block[:height, 1:width + 1]
    bot = (1 - fx) * block[1:height + 1, :width] + fx * block[1:height + 1, 1:width + 1]
    return (1 - fy) * top + fy * bot


def _pad_edge(img: np.ndarray, margin: int) -> np.ndarray:
    return np.pad(img, ((margin, margin), (margin, margin)), mode="edge")


def make_synthetic(spec: SceneSpec, seed: int = 0) -> SyntheticScene:
    """Render the layered scene into a light field.

    Each view q shows layer content shifted by q * d_layer (bilinear
    sampling), composited back-to-front. Also emits the center-view
    disparity map (front-most layer wins) and the multi-view occlusion
    mask: a pixel owned by layer l counts as occluded if any view hides
    it behind a nearer layer.
    """
    h, w, r, c = spec.height, spec.width, spec.angular_radius, spec.channels
    nu = 2 * r + 1
    max_d = max(abs(layer.disparity) for layer in spec.layers)
    margin = int(np.ceil(max_d * r)) + 2

    # materialize textures/opacities at padded size
    textures = []
    opacities = []
    for li, layer in enumerate(spec.layers):
        if layer.texture is None:
            tex = procedural_texture(derive_seed(seed, 101, li), c, h + 2 * margin, w + 2 * margin)
        else:
            if layer.texture.shape != (c, h, w):
                raise ShapeError(f"layer {li} texture shape {layer.texture.shape} != {(c, h, w)}")
            tex = np.stack([_pad_edge(layer.texture[ch], margin) for ch in range(c)])
        textures.append(np.clip(tex, 0.0, 1.0))
        if layer.opacity is None:
            op = np.ones((h + 2 * margin, w + 2 * margin))
        else:
            if layer.opacity.shape != (h, w):
                raise ShapeError(f"layer {li} opacity shape {layer.opacity.shape} != {(h, w)}")
            op = np.pad(layer.opacity.astype(np.float64), margin, mode="constant")
        opacities.append(op)
    if spec.layers[0].opacity is not None:
        raise ValueError("the back-most layer must be fully opaque")

    views = np.zeros((nu, nu, c, h, w))
    for qu in range(-r, r + 1):
        for qv in range(-r, r + 1):
            canvas = np.zeros((c, h, w))
            for li, layer in enumerate(spec.layers):
                dy, dx = qu * layer.disparity, qv * layer.disparity
                alpha = _shift_sample(opacities[li], margin, dy, dx, h, w)
                for ch in range(c):
                    shifted = _shift_sample(textures[li][ch], margin, dy, dx, h, w)
                    canvas[ch] = alpha * shifted + (1 - alpha) * canvas[ch]
            views[qu + r, qv + r] = np.clip(canvas, 0.0, 1.0)

    # ground-truth disparity: front-most layer owning each center pixel
    disparity = np.full((h, w), spec.layers[0].disparity)
    owner = np.zeros((h, w), dtype=np.int64)
    ctr = slice(margin, margin + h), slice(margin, margin + w)
    for li, layer in enumerate(spec.layers[1:], start=1):
        present = opacities[li][ctr] > 0.5
        disparity[present] = layer.disparity
        owner[present] = li

    # occlusion: pixel of layer l hidden behind layer l' > l in some view;
    # relative shifts reach 2*max_d*r, so re-pad opacities (zeros: a layer
    # does not extend beyond its mask)
    occ_margin = int(np.ceil(2 * max_d * r)) + 2
    occlusion = np.zeros((h, w), dtype=bool)
    for li in range(len(spec.layers)):
        mine = owner == li
        if not mine.any():
            continue
        d_l = spec.layers[li].disparity
        for lj in range(li + 1, len(spec.layers)):
            # pixel p of layer l sits at p + q*d_l in view q; layer j covers
            # positions y with alpha_j(y - q*d_j) set, so the test point in
            # alpha_j's own frame is p + q*(d_l - d_j)
            rel = d_l - spec.layers[lj].disparity
            op_j = np.pad(opacities[lj][ctr], occ_margin, mode="constant")
            for qu in range(-r, r + 1):
                for qv in range(-r, r + 1):
                    cover = _shift_sample(op_j, occ_margin, -qu * rel, -qv * rel, h, w) > 0.5
                    occlusion |= mine & cover

    return SyntheticScene(LightField(views), disparity, occlusion, spec)
