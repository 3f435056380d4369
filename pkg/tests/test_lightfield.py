import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from codedlf.errors import FormatError, ShapeError
from codedlf.lightfield import (
    LayerSpec,
    LightField,
    SceneSpec,
    center_view,
    ellipse_mask,
    epi,
    extract_patches,
    load_lightfield,
    make_synthetic,
    procedural_texture,
    read_lf4_array,
    save_lightfield,
    write_lf4_array,
)


def constant_lf(nu=3, c=1, h=8, w=8, value=0.5):
    return LightField(np.full((nu, nu, c, h, w), value, dtype=np.float32))


def single_plane_scene(d, h=24, w=24, r=2, seed=7):
    spec = SceneSpec(height=h, width=w, angular_radius=r,
                     layers=(LayerSpec(disparity=d),))
    return make_synthetic(spec, seed=seed)


# ---------------------------------------------------------------------------
# data model


def test_even_grid_rejected():
    with pytest.raises(ShapeError):
        LightField(np.zeros((2, 2, 1, 4, 4)))


def test_out_of_range_samples_rejected():
    with pytest.raises(ShapeError):
        LightField(np.full((1, 1, 1, 2, 2), 1.5))


def test_center_view_constant():
    lf = constant_lf(value=0.25)
    assert np.all(center_view(lf) == 0.25)


def test_center_view_degenerate_single_view():
    img = np.random.default_rng(0).uniform(0, 1, (1, 1, 3, 6, 6)).astype(np.float32)
    lf = LightField(img)
    assert np.array_equal(center_view(lf), img[0, 0])


def test_center_view_matches_scene_render():
    scene = single_plane_scene(d=1.0)
    # the center view of a rendered scene is the q=(0,0) render itself
    assert np.array_equal(center_view(scene.lightfield), scene.lightfield.view(0, 0))
    # and for a single opaque layer it equals the layer texture window
    zero = single_plane_scene(d=0.0, seed=3)
    for qu, qv in zero.lightfield.angular_offsets():
        assert np.allclose(zero.lightfield.view(qu, qv), center_view(zero.lightfield), atol=1e-12)


# ---------------------------------------------------------------------------
# EPI


def test_epi_zero_disparity_rows_identical():
    scene = single_plane_scene(d=0.0)
    e = epi(scene.lightfield, "horizontal", index=10)
    for row in range(e.shape[1]):
        assert np.allclose(e[:, row, :], e[:, 0, :], atol=1e-12)


def _align_rms(e, d, r):
    """Shift EPI row j by (j - r) * d and compare to the center row."""
    c, nu, w = e.shape
    xs = np.arange(w, dtype=np.float64)
    worst = []
    for j in range(nu):
        off = (j - r) * d
        src = xs + off
        valid = (src >= 0) & (src <= w - 1)
        i0 = np.clip(np.floor(src).astype(int), 0, w - 2)
        f = src - i0
        for ch in range(c):
            row = e[ch, j]
            interp = (1 - f) * row[i0] + f * row[i0 + 1]
            diff = (interp - e[ch, r])[valid]
            worst.append(np.sqrt(np.mean(diff ** 2)))
    return max(worst)


@pytest.mark.parametrize("d", [-2, -1, 0, 1, 2])
def test_epi_alignment_integer_disparities(d):
    scene = single_plane_scene(d=float(d))
    lf = scene.lightfield
    e = epi(lf, "horizontal", index=lf.height // 2)
    assert _align_rms(e, d, lf.angular_radius) <= 1e-3


@pytest.mark.parametrize("d", [-3.0, -1.6, 0.7, 2.4, 3.0])
def test_epi_alignment_fractional_disparities(d):
    scene = single_plane_scene(d=d, h=32, w=32)
    lf = scene.lightfield
    e = epi(lf, "horizontal", index=lf.height // 2)
    assert _align_rms(e, d, lf.angular_radius) <= 1e-3


def test_epi_vertical_alignment():
    scene = single_plane_scene(d=1.0)
    lf = scene.lightfield
    e = epi(lf, "vertical", index=lf.width // 2)
    assert _align_rms(e, 1.0, lf.angular_radius) <= 1e-3


def test_epi_single_view_is_image_row():
    img = np.random.default_rng(1).uniform(0, 1, (1, 1, 1, 5, 7)).astype(np.float32)
    lf = LightField(img)
    e = epi(lf, "horizontal", index=3)
    assert e.shape == (1, 1, 7)
    assert np.array_equal(e[0, 0], img[0, 0, 0, 3])


def test_epi_index_out_of_bounds():
    lf = constant_lf()
    with pytest.raises(IndexError):
        epi(lf, "horizontal", index=99)


# ---------------------------------------------------------------------------
# patches


def test_extract_patches_count():
    lf = constant_lf(h=8, w=8)
    patches = extract_patches(lf, spatial=4, stride=4)
    assert len(patches) == 4
    assert all(p.height == 4 and p.width == 4 for p in patches)


def test_extract_patch_full_size_is_identity():
    scene = single_plane_scene(d=1.0)
    lf = scene.lightfield
    (only,) = extract_patches(lf, spatial=lf.height, stride=1)
    assert only == lf


def test_extract_patches_are_exact_subarrays():
    scene = single_plane_scene(d=0.5)
    lf = scene.lightfield
    stride, spatial = 5, 8
    patches = extract_patches(lf, spatial, stride)
    per_axis = (lf.height - spatial) // stride + 1
    assert len(patches) == per_axis * per_axis
    idx = 0
    for oi in range(0, lf.height - spatial + 1, stride):
        for oj in range(0, lf.width - spatial + 1, stride):
            assert np.array_equal(
                patches[idx].views, lf.views[:, :, :, oi:oi + spatial, oj:oj + spatial]
            )
            idx += 1


def test_extract_patches_too_large():
    with pytest.raises(ShapeError):
        extract_patches(constant_lf(h=8, w=8), spatial=9, stride=1)


# ---------------------------------------------------------------------------
# packed binary container


def test_lf4_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(2)
    views = rng.uniform(0, 1, (3, 3, 3, 6, 5)).astype(np.float32)
    lf = LightField(views)
    path = tmp_path / "x.lf4"
    save_lightfield(lf, path, layout="packed_binary")
    back = load_lightfield(path, layout="packed_binary")
    assert np.array_equal(back.views, views)
    assert back.views.dtype == np.float32


@settings(max_examples=15, deadline=None)
@given(nu=st.sampled_from([1, 3, 5]), c=st.sampled_from([1, 3]),
       h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_lf4_roundtrip_property(tmp_path_factory, nu, c, h, w, seed):
    tmp = tmp_path_factory.mktemp("lf4")
    views = np.random.default_rng(seed).uniform(0, 1, (nu, nu, c, h, w)).astype(np.float32)
    path = tmp / "r.lf4"
    save_lightfield(LightField(views), path)
    assert np.array_equal(load_lightfield(path).views, views)


def test_lf4_magic_rejected(tmp_path):
    path = tmp_path / "bad.lf4"
    path.write_bytes(b"NOPE" + b"\0" * 32)
    with pytest.raises(FormatError):
        load_lightfield(path)


def test_lf4_truncated_payload(tmp_path):
    path = tmp_path / "t.lf4"
    save_lightfield(constant_lf(), path)
    data = path.read_bytes()
    path.write_bytes(data[:-8])
    with pytest.raises(FormatError):
        load_lightfield(path)


def test_lf4_sidecar_array_roundtrip(tmp_path):
    arr = np.random.default_rng(3).standard_normal((3, 4, 5)).astype(np.float32)
    path = tmp_path / "raw.lf4"
    write_lf4_array(arr, path)
    back = read_lf4_array(path)
    assert back.shape == (1, 1, 3, 4, 5)
    assert np.array_equal(back[0, 0], arr)


# ---------------------------------------------------------------------------
# view-grid images


def test_view_grid_8bit_quantization_bound(tmp_path):
    rng = np.random.default_rng(4)
    views = rng.uniform(0, 1, (3, 3, 3, 8, 8)).astype(np.float32)
    lf = LightField(views)
    save_lightfield(lf, tmp_path / "grid", layout="view_grid_images", bit_depth=8)
    back = load_lightfield(tmp_path / "grid", layout="view_grid_images")
    assert np.max(np.abs(back.views - views)) <= 0.5 / 255 + 1e-9


def test_view_grid_16bit_maps_peak_to_one(tmp_path):
    # write a 16-bit grayscale grid with PIL directly (independent writer)
    from PIL import Image

    root = tmp_path / "grid16"
    root.mkdir()
    raw = np.arange(16, dtype=np.uint32).reshape(4, 4) * (65535 // 15)
    raw = raw.astype(np.uint16)
    raw[0, 0] = 65535
    for i in range(3):
        for j in range(3):
            Image.fromarray(raw).save(root / f"view_{i}_{j}.png")
    (root / "manifest.json").write_text(
        json.dumps({"angular_radius": 1, "channels": 1, "bit_depth": 16})
    )
    lf = load_lightfield(root, layout="view_grid_images")
    assert lf.views[0, 0, 0, 0, 0] == 1.0
    assert np.allclose(lf.views[1, 1, 0], raw.astype(np.float64) / 65535)


def test_view_grid_missing_files_listed(tmp_path):
    lf = constant_lf(nu=3)
    save_lightfield(lf, tmp_path / "g", layout="view_grid_images")
    (tmp_path / "g" / "view_0_1.png").unlink()
    (tmp_path / "g" / "view_2_2.png").unlink()
    with pytest.raises(FileNotFoundError) as exc:
        load_lightfield(tmp_path / "g", layout="view_grid_images")
    assert "view_0_1.png" in str(exc.value)
    assert "view_2_2.png" in str(exc.value)


def test_view_grid_inconsistent_sizes(tmp_path):
    from PIL import Image

    lf = constant_lf(nu=3, c=1)
    save_lightfield(lf, tmp_path / "g", layout="view_grid_images")
    Image.fromarray(np.zeros((4, 4), dtype=np.uint8), mode="L").save(tmp_path / "g" / "view_1_1.png")
    with pytest.raises(FormatError):
        load_lightfield(tmp_path / "g", layout="view_grid_images")


def test_view_grid_16bit_rgb_rejected(tmp_path):
    lf = constant_lf(nu=1, c=3)
    with pytest.raises(ValueError):
        save_lightfield(lf, tmp_path / "g", layout="view_grid_images", bit_depth=16)


# ---------------------------------------------------------------------------
# synthetic scenes


def test_synthetic_zero_disparity_views_identical():
    scene = single_plane_scene(d=0.0)
    lf = scene.lightfield
    c0 = center_view(lf)
    for qu, qv in lf.angular_offsets():
        assert np.array_equal(lf.view(qu, qv), c0)
    assert np.all(scene.disparity == 0.0)
    assert not scene.occlusion.any()


def test_synthetic_integer_shift_oracle():
    scene = single_plane_scene(d=1.0)
    lf = scene.lightfield
    c0 = center_view(lf)
    v = lf.view(0, 1)
    # view content at x equals center content at x - q*d
    assert np.allclose(v[:, :, 1:], c0[:, :, :-1], atol=1e-12)
    v2 = lf.view(1, 0)
    assert np.allclose(v2[:, 1:, :], c0[:, :-1, :], atol=1e-12)


def test_synthetic_two_layer_disparity_map():
    h = w = 24
    mask = ellipse_mask(h, w, cy=12, cx=12, ry=5, rx=7)
    spec = SceneSpec(
        height=h, width=w, angular_radius=1,
        layers=(LayerSpec(disparity=-0.5), LayerSpec(disparity=1.5, opacity=mask)),
    )
    scene = make_synthetic(spec, seed=11)
    assert np.all(scene.disparity[mask] == 1.5)
    assert np.all(scene.disparity[~mask] == -0.5)
    # occlusion band hugs the blob boundary, background side only
    assert scene.occlusion.any()
    assert not scene.occlusion[mask].any()
    interior = ~ellipse_mask(h, w, 12, 12, ry=5 + 3, rx=7 + 3)
    assert not scene.occlusion[interior].any()


def test_synthetic_explicit_texture_window():
    tex = procedural_texture(5, 1, 12, 12)
    spec = SceneSpec(height=12, width=12, angular_radius=1, channels=1,
                     layers=(LayerSpec(disparity=0.0, texture=tex),))
    scene = make_synthetic(spec, seed=0)
    assert np.allclose(center_view(scene.lightfield), tex, atol=1e-12)


def test_back_layer_must_be_opaque():
    mask = ellipse_mask(8, 8, 4, 4, 2, 2)
    with pytest.raises(ValueError):
        make_synthetic(SceneSpec(height=8, width=8, angular_radius=1,
                                 layers=(LayerSpec(disparity=0.0, opacity=mask),)))
