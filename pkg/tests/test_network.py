import numpy as np
import pytest

from cubemix.autodiff import Tensor, count_flops, grad_check, sum_, dot
from cubemix.errors import ConfigError, DimensionError
from cubemix.mixer import CubicMixerParams, MixerBlockParams
from cubemix.network import (
    ABLATIONS,
    NetworkConfig,
    NetworkParams,
    SLICE_PLANES,
    SliceMaps,
    apply_ablation,
    deblur_forward,
    identity_params,
    init_params,
    local_feature_fuse,
    mixer_param_count,
    multiscale_forward,
    param_count,
    scale_path,
    slice_apply,
    slice_apply_poly,
)
from cubemix.training.metrics import psnr

SMALL = NetworkConfig(image_width=16, image_height=16, path_scales=(1.0, 0.5, 0.25), blocks_per_path=1)


def rand(shape, seed=0):
    return np.random.default_rng(seed).standard_normal(shape)


def smooth_image(W, H, seed=0):
    """Sum of a few low-frequency sinusoids, in [0, 1]."""
    rng = np.random.default_rng(seed)
    x = np.arange(W)[:, None, None] / W
    y = np.arange(H)[None, :, None] / H
    img = np.full((W, H, 3), 0.5)
    for _ in range(3):
        fx, fy = rng.integers(0, 2, size=2)
        img = img + 0.1 * rng.uniform(-1, 1, 3) * np.cos(2 * np.pi * (fx * x + fy * y) + rng.uniform(0, 6))
    return np.clip(img, 0, 1)


def identity_stack(W, H, C=3, n=1):
    stack = CubicMixerParams.init(n, W, H, C, rng=np.random.default_rng(0))
    blocks = []
    for b in stack.blocks:
        kw = b.named()
        for k in ("w2", "b2", "w4", "b4", "w6", "b6"):
            kw[k] = Tensor(np.zeros_like(kw[k].data))
        blocks.append(MixerBlockParams(**kw))
    return CubicMixerParams(blocks)


# --- config -----------------------------------------------------------------

def test_default_config():
    cfg = NetworkConfig()
    assert cfg.path_scales == (0.25, 0.125, 0.0625)
    assert cfg.processing_sizes() == [(24, 24), (12, 12), (6, 6)]
    assert cfg.fused_channels == 12


@pytest.mark.parametrize(
    "kw",
    [
        dict(path_scales=(0.5, 0.5, 0.25)),
        dict(path_scales=(0.25, 0.5, 0.125)),
        dict(path_scales=(1.5, 0.5, 0.25)),
        dict(path_scales=(0.25, 0.125, 0.03)),  # 96 * 0.03 < 4
        dict(path_sizes=((8, 8), (4, 4), (3, 4))),
        dict(blocks_per_path=0),
        dict(lfe_kernel=5),
        dict(slicing_mode="cubic"),
    ],
)
def test_config_rejects(kw):
    with pytest.raises(ConfigError):
        NetworkConfig(**kw)


# --- scale path -------------------------------------------------------------

def test_scale_path_unit_scale_identity():
    b = Tensor(rand((12, 12, 3)))
    ident = identity_stack(12, 12)
    np.testing.assert_allclose(scale_path(b, 1.0, ident, ident).data, b.data, atol=1e-9)


@pytest.mark.parametrize("scale", [1.0, 0.5, 0.34])
def test_scale_path_constant(scale):
    b = Tensor(np.full((12, 12, 3), 0.3))
    w = h = int(np.floor(12 * scale))
    ident = identity_stack(w, h)
    out = scale_path(b, scale, ident, ident)
    assert out.shape == (w, h, 3)
    np.testing.assert_allclose(out.data, 0.3, atol=1e-12)


def test_scale_path_too_small():
    ident = identity_stack(3, 3)
    with pytest.raises(ConfigError):
        scale_path(Tensor(rand((12, 12, 3))), 0.25, ident, ident)


# --- multiscale -------------------------------------------------------------

def test_multiscale_identity_is_resampling_roundtrip():
    cfg = NetworkConfig(image_width=96, image_height=96)
    params = identity_params(cfg)
    b = smooth_image(96, 96, seed=1)
    # reference image: b plus fixed noise, so PSNR(b, ref) is finite
    ref = b + np.random.default_rng(2).normal(0, 0.05, b.shape)
    maps = multiscale_forward(Tensor(b), params, cfg)
    assert [m.shape for m in maps] == [(96, 96, 3)] * 3
    for m in maps:
        assert abs(psnr(m.data, ref) - psnr(b, ref)) < 0.5


def test_multiscale_zero_input():
    cfg = NetworkConfig(image_width=64, image_height=64)
    maps = multiscale_forward(Tensor(np.zeros((64, 64, 3))), identity_params(cfg), cfg)
    for m in maps:
        np.testing.assert_array_equal(m.data, 0.0)


# --- fusion and slicing -----------------------------------------------------

def test_fuse_bias_only_gives_identity_maps():
    cfg = NetworkConfig(image_width=16, image_height=16, path_scales=(0.5, 0.375, 0.25))
    params = identity_params(cfg)
    b = Tensor(rand((16, 16, 3)))
    m = local_feature_fuse(b, b, b, b, params)
    assert m.planes.shape == (16, 16, 6)
    for name in SLICE_PLANES:
        expected = 1.0 if name.startswith("W") else 0.0
        np.testing.assert_array_equal(m.plane(name), expected)


def test_lfe_kernel_changes_result():
    cfg3 = SMALL
    cfg1 = SMALL.replace(lfe_kernel=1)
    p3, p1 = init_params(cfg3, 0, np.float64), init_params(cfg1, 0, np.float64)
    rng = np.random.default_rng(1)
    head = Tensor(rng.standard_normal(p3.head_w.shape))
    p3 = p3.with_tensors({"head_w": head})
    k1 = p3.conv3_w.data[1:2, 1:2]
    p1 = p1.with_tensors({"head_w": head, "conv3_w": Tensor(k1)})
    b = Tensor(rng.uniform(size=(16, 16, 3)))
    m3 = local_feature_fuse(b, b, b, b, p3).planes.data
    m1 = local_feature_fuse(b, b, b, b, p1).planes.data
    assert np.max(np.abs(m3 - m1)) > 1e-3


def test_slice_identity_and_target():
    b = Tensor(rand((5, 4, 3)))
    ones, zeros = np.ones((5, 4, 3)), np.zeros((5, 4, 3))
    np.testing.assert_array_equal(slice_apply(b, SliceMaps.from_planes(ones, zeros)).data, b.data)
    target = rand((5, 4, 3), 1)
    np.testing.assert_array_equal(slice_apply(b, SliceMaps.from_planes(zeros, target)).data, target)


def test_slice_scalar_arithmetic():
    b = Tensor(np.full((3, 3, 3), 0.5))
    out = slice_apply(b, SliceMaps.from_planes(np.full((3, 3, 3), 2.0), np.full((3, 3, 3), -0.5)))
    np.testing.assert_array_equal(out.data, 0.5)


def test_slice_planes_are_per_channel():
    b = Tensor(np.ones((2, 2, 3)))
    scales = np.stack([np.full((2, 2), v) for v in (1.0, 2.0, 3.0)], -1)
    offsets = np.stack([np.full((2, 2), v) for v in (0.1, 0.2, 0.3)], -1)
    out = slice_apply(b, SliceMaps.from_planes(scales, offsets)).data
    np.testing.assert_allclose(out[0, 0], [1.1, 2.2, 3.3])


def test_slice_is_invertible_where_scales_nonzero():
    rng = np.random.default_rng(2)
    b = rng.uniform(size=(6, 6, 3))
    scales = rng.uniform(0.5, 2, size=(6, 6, 3)) * rng.choice([-1, 1], size=(6, 6, 3))
    offsets = rng.standard_normal((6, 6, 3))
    out = slice_apply(Tensor(b), SliceMaps.from_planes(scales, offsets)).data
    np.testing.assert_allclose((out - offsets) / scales, b, atol=1e-12)


def test_slice_size_mismatch():
    with pytest.raises(DimensionError):
        slice_apply(Tensor(rand((4, 4, 3))), SliceMaps.from_planes(np.ones((5, 4, 3)), np.zeros((5, 4, 3))))
    with pytest.raises(DimensionError):
        SliceMaps(Tensor(np.zeros((4, 4, 5))))


def test_polynomial_slice():
    b = Tensor(rand((4, 4, 3)))
    ones, zeros = np.ones((4, 4, 3)), np.zeros((4, 4, 3))
    np.testing.assert_allclose(slice_apply_poly(b, SliceMaps.from_planes(ones, zeros)).data, b.data**2)
    half = SliceMaps.from_planes(zeros, np.full((4, 4, 3), 0.5))
    np.testing.assert_array_equal(slice_apply_poly(b, half).data, 0.25)
    rnd = SliceMaps.from_planes(rand((4, 4, 3), 1), rand((4, 4, 3), 2))
    assert np.all(slice_apply_poly(b, rnd).data >= 0)


# --- end to end -------------------------------------------------------------

@pytest.mark.parametrize("mode", ["affine", "polynomial"])
def test_forward_shape(mode):
    cfg = SMALL.replace(slicing_mode=mode)
    b = np.random.default_rng(0).uniform(size=(16, 16, 3))
    assert deblur_forward(Tensor(b), init_params(cfg, 0), cfg).shape == (16, 16, 3)
    assert deblur_forward(Tensor(np.stack([b, b])), init_params(cfg, 0), cfg).shape == (2, 16, 16, 3)


@pytest.mark.parametrize("cfg", [NetworkConfig(), NetworkConfig(image_width=64, image_height=80)])
def test_identity_network_is_exact(cfg):
    b = np.random.default_rng(3).uniform(size=(cfg.image_width, cfg.image_height, 3))
    out = deblur_forward(Tensor(b), identity_params(cfg), cfg).data
    np.testing.assert_array_equal(out, b)


def test_default_init_starts_at_identity_for_every_variant():
    b = np.random.default_rng(4).uniform(size=(16, 16, 3))
    for ab in ABLATIONS:
        cfg = apply_ablation(SMALL, ab)
        out = deblur_forward(Tensor(b), init_params(cfg, 0, np.float64), cfg).data
        np.testing.assert_allclose(out, b, atol=1e-12, err_msg=ab)


def test_forward_deterministic():
    cfg = SMALL
    b = np.random.default_rng(5).uniform(size=(16, 16, 3))
    p = init_params(cfg, 7)
    p = p.with_tensors({"head_w": Tensor(np.full(p.head_w.shape, 0.01, np.float32))})
    a1 = deblur_forward(Tensor(b.astype(np.float32)), p, cfg).data
    a2 = deblur_forward(Tensor(b.astype(np.float32)), p, cfg).data
    assert a1.tobytes() == a2.tobytes()


def test_end_to_end_gradient_small():
    cfg = SMALL
    params = init_params(cfg, 0, np.float64)
    rng = np.random.default_rng(6)
    params = params.with_tensors({
        "head_w": Tensor(rng.standard_normal(params.head_w.shape) * 0.1),
        "conv3_b": Tensor(rng.standard_normal(params.conv3_b.shape) * 0.1),
    })
    names = list(params.named())
    b = rng.uniform(size=(16, 16, 3))
    w = rng.standard_normal((16, 16, 3))

    def f(x, *tensors):
        return dot(deblur_forward(x, params.with_tensors(dict(zip(names, tensors))), cfg), w)

    rep = grad_check(f, b, *[t.data for t in params.named().values()], sample=6)
    assert rep.passed, rep


# --- counting ---------------------------------------------------------------

def test_param_count_empty_and_enumerated():
    assert param_count(NetworkParams()) == 0
    p = init_params(NetworkConfig())
    assert param_count(p) == sum(t.data.size for t in p.named().values())


def test_doubling_blocks_doubles_mixer_params():
    one = mixer_param_count(init_params(NetworkConfig(blocks_per_path=1)))
    two = mixer_param_count(init_params(NetworkConfig(blocks_per_path=2)))
    assert two == 2 * one


def test_fixed_path_sizes_decouple_resolution():
    sizes = ((24, 24), (12, 12), (6, 6))
    small = NetworkConfig(image_width=96, image_height=96, path_sizes=sizes)
    large = NetworkConfig(image_width=192, image_height=192, path_sizes=sizes)
    assert param_count(init_params(small)) == param_count(init_params(large))

    def stages(cfg):
        b = Tensor(np.zeros((cfg.image_width, cfg.image_height, 3)))
        with count_flops() as fc:
            deblur_forward(b, init_params(cfg), cfg)
        return fc.by_stage

    s, l = stages(small), stages(large)
    assert s["mixer"] == l["mixer"]
    assert l["fullres"] / s["fullres"] == pytest.approx(4.0, rel=0.05)


# --- ablations --------------------------------------------------------------

def test_ablation_switches_touch_only_their_component():
    base = NetworkConfig()
    full_names = {k: v.shape for k, v in init_params(base).named().items()}
    diffs = {}
    for ab in ABLATIONS:
        cfg = apply_ablation(base, ab)
        names = {k: v.shape for k, v in init_params(cfg).named().items()}
        changed = {k for k in full_names.keys() | names.keys() if full_names.get(k) != names.get(k)}
        diffs[ab] = changed
    assert diffs["full"] == diffs["d-real"] == diffs["d-imag"] == set()
    assert diffs["wo-ms"] and all(k.startswith(("path1.", "path2.")) for k in diffs["wo-ms"])
    assert diffs["wo-ss"] == {"head_w", "head_b"}
    assert diffs["wo-lfe"] == {"conv3_w"}
    assert apply_ablation(base, "d-real").spectral_input == "real"
    assert apply_ablation(base, "d-imag").spectral_input == "imag"
    with pytest.raises(ConfigError):
        apply_ablation(base, "wo-cm")
