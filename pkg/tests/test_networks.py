import numpy as np
import pytest

from codedlf.autodiff import Tensor, mse_loss
from codedlf.errors import FormatError, ShapeError
from codedlf.networks import (
    NetworkConfig,
    config_hash,
    dispnet_forward,
    init_weights,
    load_checkpoint,
    reference_config,
    save_checkpoint,
    seed_to_words,
    subset,
    toy_config,
    viewnet_forward,
    warpnet_forward,
    words_to_seed,
)


def toy_params(seed=0, channels=3, dtype=np.float64):
    cfg = toy_config(channels=channels)
    return cfg, init_weights(cfg, seed, dtype=dtype)


def rand_img(seed, shape):
    return np.random.default_rng(seed).uniform(0, 1, shape)


# ---------------------------------------------------------------------------
# ViewNet


def test_viewnet_zero_weights_zero_output():
    cfg, params = toy_params()
    for p in params.values():
        p.data[:] = 0.0
    x = Tensor(np.zeros((1, 3, 20, 20)))
    out = viewnet_forward(params, cfg, x)
    assert out.shape == (1, 3, 10, 10)
    assert np.all(out.data == 0.0)


def test_viewnet_reference_output_size_120_to_110():
    # the reference 7x7 + 5x5 unpadded opening maps 120x120 to 110x110
    cfg = reference_config(channels=1)
    assert cfg.crop_margin == 5
    params = init_weights(cfg, seed=1, dtype=np.float32)
    x = Tensor(rand_img(0, (1, 1, 120, 120)).astype(np.float32))
    out = viewnet_forward(params, cfg, x)
    assert out.shape == (1, 1, 110, 110)


def test_viewnet_undersized_input_rejected():
    cfg, params = toy_params()
    with pytest.raises(ShapeError):
        viewnet_forward(params, cfg, Tensor(np.zeros((1, 3, 6, 6))))


def test_viewnet_inference_clips():
    cfg, params = toy_params(seed=3)
    x = Tensor(rand_img(1, (1, 3, 20, 20)))
    out = viewnet_forward(params, cfg, x, inference=True)
    assert out.data.min() >= 0.0 and out.data.max() <= 1.0


def test_viewnet_single_step_overfit_decreases_loss():
    from codedlf.autodiff import Adam

    cfg, params = toy_params(seed=4)
    x = Tensor(rand_img(2, (1, 3, 18, 18)))
    target = rand_img(3, (1, 3, 8, 8))
    opt = Adam(subset(params, "view."), lr=1e-3)
    losses = []
    for _ in range(8):
        opt.zero_grad()
        loss = mse_loss(viewnet_forward(params, cfg, x), target)
        loss.backward()
        opt.step()
        losses.append(float(loss.data))
    assert losses[-1] < losses[0]


# ---------------------------------------------------------------------------
# DispNet


def probe_input(seed, cfg, h, w):
    return Tensor(rand_img(seed, (1, cfg.probe_channel_count, h, w)))


def test_dispnet_output_bounded_by_dmax():
    cfg, params = toy_params(seed=5)
    for seed in range(8):
        coded = Tensor(rand_img(seed, (1, 3, 19, 23)))
        center = Tensor(rand_img(seed + 50, (1, 3, 19, 23)))
        d = dispnet_forward(params, cfg, coded, center, probe_input(seed + 90, cfg, 19, 23))
        assert d.shape == (1, 1, 19, 23)
        assert np.max(np.abs(d.data)) <= cfg.d_max


def test_dispnet_zero_final_layer_gives_zero_disparity():
    # pure scaled-tanh head (no probe channels): zero weights mean D == 0
    cfg = NetworkConfig(channels=3, disp_probes=())
    params = init_weights(cfg, seed=6, dtype=np.float64)
    params["disp.head4.w"].data[:] = 0.0
    params["disp.head4.b"].data[:] = 0.0
    coded = Tensor(rand_img(4, (1, 3, 16, 16)))
    center = Tensor(rand_img(5, (1, 3, 16, 16)))
    d = dispnet_forward(params, cfg, coded, center)
    assert np.all(d.data == 0.0)


def test_dispnet_probe_config_zero_head_returns_point_estimate():
    cfg, params = toy_params(seed=6)
    params["disp.head4.w"].data[:] = 0.0
    params["disp.head4.b"].data[:] = 0.0
    coded = Tensor(rand_img(4, (1, 3, 16, 16)))
    center = Tensor(rand_img(5, (1, 3, 16, 16)))
    probes = probe_input(6, cfg, 16, 16)
    d = dispnet_forward(params, cfg, coded, center, probes)
    expected = np.clip(probes.data[:, -1:] * 2.5, -cfg.d_max, cfg.d_max)
    assert np.allclose(d.data, expected, atol=1e-12)


def test_dispnet_misaligned_inputs_rejected():
    cfg, params = toy_params()
    with pytest.raises(ShapeError):
        dispnet_forward(params, cfg, Tensor(np.zeros((1, 3, 16, 16))),
                        Tensor(np.zeros((1, 3, 14, 14))))


def test_dispnet_requires_declared_probes():
    cfg, params = toy_params()
    x = Tensor(rand_img(8, (1, 3, 16, 16)))
    with pytest.raises(ShapeError):
        dispnet_forward(params, cfg, x, x)
    plain = NetworkConfig(channels=3, disp_probes=())
    plain_params = init_weights(plain, seed=0, dtype=np.float64)
    with pytest.raises(ShapeError):
        dispnet_forward(plain_params, plain, x, x, probe_input(9, cfg, 16, 16))


def test_dispnet_odd_sizes_roundtrip_through_strides():
    cfg, params = toy_params(seed=7)
    coded = Tensor(rand_img(6, (1, 3, 21, 17)))
    center = Tensor(rand_img(7, (1, 3, 21, 17)))
    d = dispnet_forward(params, cfg, coded, center, probe_input(10, cfg, 21, 17))
    assert d.shape == (1, 1, 21, 17)


# ---------------------------------------------------------------------------
# WarpNet


def test_warpnet_identity_when_residual_zero():
    cfg, params = toy_params(seed=8)
    params["warp.conv4.w"].data[:] = 0.0
    params["warp.conv4.b"].data[:] = 0.0
    warped = Tensor(rand_img(8, (2, 3, 12, 12)))
    holes = Tensor(np.zeros((2, 1, 12, 12)))
    out = warpnet_forward(params, cfg, warped, holes)
    assert np.array_equal(out.data, warped.data)


def test_warpnet_all_hole_input_finite():
    cfg, params = toy_params(seed=9)
    warped = Tensor(np.zeros((1, 3, 10, 10)))
    holes = Tensor(np.ones((1, 1, 10, 10)))
    out = warpnet_forward(params, cfg, warped, holes)
    assert np.all(np.isfinite(out.data))


# ---------------------------------------------------------------------------
# init


def test_init_weights_deterministic():
    cfg = toy_config()
    a = init_weights(cfg, seed=42)
    b = init_weights(cfg, seed=42)
    assert a.keys() == b.keys()
    for k in a:
        assert np.array_equal(a[k].data, b[k].data)


def test_init_weights_seed_sensitivity():
    cfg = toy_config()
    a = init_weights(cfg, seed=1)
    b = init_weights(cfg, seed=2)
    assert any(not np.array_equal(a[k].data, b[k].data) for k in a)


def test_forward_finite_for_many_seeds():
    cfg = toy_config(channels=1)
    x = rand_img(10, (1, 1, 16, 16))
    for seed in range(100):
        params = init_weights(cfg, seed=seed, dtype=np.float64)
        out = viewnet_forward(params, cfg, Tensor(x))
        assert np.all(np.isfinite(out.data))


def test_invalid_config_rejected():
    with pytest.raises(ValueError):
        init_weights(NetworkConfig(channels=2), seed=0)
    with pytest.raises(ValueError):
        init_weights(NetworkConfig(disp_head=(4, 4)), seed=0)
    with pytest.raises(ValueError):
        init_weights(NetworkConfig(d_max=-1.0), seed=0)


# ---------------------------------------------------------------------------
# checkpoints


def test_checkpoint_roundtrip_bit_identical_forward(tmp_path):
    cfg = toy_config()
    params = init_weights(cfg, seed=11, dtype=np.float32)
    x = Tensor(rand_img(11, (1, 3, 16, 16)).astype(np.float32))
    before = viewnet_forward(params, cfg, x).data
    path = tmp_path / "net.clfc"
    save_checkpoint(path, params, cfg, scalars={"meta/epoch": 3.0, **seed_to_words(123456789)})
    loaded, scalars, arrays = load_checkpoint(path, cfg)
    assert loaded.keys() == params.keys()
    after = viewnet_forward(loaded, cfg, x).data
    assert np.array_equal(before, after)
    assert scalars["meta/epoch"] == 3.0
    assert words_to_seed(scalars) == 123456789
    assert arrays == {}


def test_checkpoint_config_hash_mismatch(tmp_path):
    cfg = toy_config()
    params = init_weights(cfg, seed=12)
    path = tmp_path / "net.clfc"
    save_checkpoint(path, params, cfg)
    with pytest.raises(FormatError):
        load_checkpoint(path, reference_config())


def test_checkpoint_optimizer_arrays_roundtrip(tmp_path):
    cfg = toy_config(channels=1)
    params = init_weights(cfg, seed=13, dtype=np.float32)
    moments = {"optim/m/view.head.w": np.ones_like(params["view.head.w"].data)}
    path = tmp_path / "opt.clfc"
    save_checkpoint(path, params, cfg, arrays=moments)
    _, _, arrays = load_checkpoint(path, cfg)
    assert np.array_equal(arrays["optim/m/view.head.w"], moments["optim/m/view.head.w"])


def test_checkpoint_bad_magic(tmp_path):
    p = tmp_path / "x.clfc"
    p.write_bytes(b"JUNKJUNKJUNK")
    with pytest.raises(FormatError):
        load_checkpoint(p)


def test_config_hash_distinguishes_configs():
    assert config_hash(toy_config()) != config_hash(reference_config())
    assert config_hash(toy_config()) == config_hash(toy_config())


def test_seed_words_roundtrip_extremes():
    for seed in (0, 1, 0xFFFF_FFFF_FFFF_FFFF, 0x1234_5678_9ABC_DEF0):
        assert words_to_seed(seed_to_words(seed)) == seed
