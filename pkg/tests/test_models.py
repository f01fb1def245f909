import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pedmri import autodiff as ad
from pedmri.geometry import IcosaScheme, build_scheme
from pedmri.models import (ModelConfig, encode, forward, init_params, parameter_count, pe_forward, pe_tokenize,
                           shcnn_forward, sinusoidal_pe, toy_config, vanilla_forward, vanilla_tokenize)

from conftest import random_unit


def zeros_like_params(cfg):
    return {k: np.zeros_like(v) for k, v in init_params(cfg, np.float64).items()}


def test_full_size_defaults():
    cfg = ModelConfig()
    assert (cfg.embed_dim, cfg.n_layers, cfg.n_heads, cfg.ffn_dim, cfg.mlp_hidden, cfg.max_seq_len) == \
        (256, 6, 8, 1024, 256, 200)
    assert cfg.head_dim == 32


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(embed_dim=250, n_heads=8)
    with pytest.raises(ValueError):
        ModelConfig(model_type="cnn")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({"layers": 3})
    assert ModelConfig.from_dict(ModelConfig(scheme_level="icosa6").to_dict()).scheme_level == "ICOSA6"


@pytest.mark.parametrize("model_type", ["pe", "vanilla", "shcnn"])
@pytest.mark.parametrize("size", ["toy", "full"])
def test_parameter_count_matches_enumeration(model_type, size):
    cfg = toy_config(model_type) if size == "toy" else ModelConfig(model_type=model_type)
    assert parameter_count(cfg) == sum(v.size for v in init_params(cfg).values())


def test_full_pe_parameter_count_frozen():
    assert parameter_count(ModelConfig()) == 4_889_134


@settings(max_examples=20, deadline=None)
@given(mt=st.sampled_from(["pe", "vanilla", "shcnn"]), heads=st.integers(1, 4), hd=st.integers(1, 4),
       layers=st.integers(1, 3), ffn=st.integers(1, 20), mlp=st.integers(1, 20), ch=st.integers(1, 12))
def test_parameter_count_property(mt, heads, hd, layers, ffn, mlp, ch):
    e = 2 * heads * hd
    cfg = ModelConfig(model_type=mt, embed_dim=e, n_heads=heads, n_layers=layers, ffn_dim=ffn,
                      mlp_hidden=mlp, sh_channels=ch)
    assert parameter_count(cfg) == sum(v.size for v in init_params(cfg).values())


def test_init_is_seeded():
    a, b = init_params(toy_config("pe", seed=4)), init_params(toy_config("pe", seed=4))
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = init_params(toy_config("pe", seed=5))
    assert any(a[k].tobytes() != c[k].tobytes() for k in a)


def test_sinusoidal_pe_values():
    pe = sinusoidal_pe(20, 256)
    assert pe.shape == (20, 256)
    np.testing.assert_array_equal(pe[0, 0::2], 0.0)
    np.testing.assert_array_equal(pe[0, 1::2], 1.0)
    assert pe[1, 0] == pytest.approx(np.sin(1.0), abs=1e-15)
    assert pe[1, 0] == pytest.approx(0.841471, abs=1e-6)
    assert pe[3, 5] == pytest.approx(np.cos(3 / 10000 ** (4 / 256)), abs=1e-15)
    assert np.all(np.abs(pe) <= 1.0)
    with pytest.raises(ValueError):
        sinusoidal_pe(4, 7)


@pytest.mark.parametrize("level,n", [("icosa6", 20), ("icosa21", 80), ("icosa46", 320)])
def test_pe_tokenize_counts(rng, level, n):
    tok = pe_tokenize(rng.standard_normal((3, 3, 3, n)), build_scheme(level))
    assert tok.shape == (1, n, 27)


def test_pe_tokenize_offset_order(rng):
    patch = rng.standard_normal((3, 3, 3, 20))
    tok = pe_tokenize(patch, 20)[0]
    for j in (0, 11):
        expect = [patch[dx + 1, dy + 1, dz + 1, j]
                  for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
        np.testing.assert_array_equal(tok[j], expect)


def test_pe_tokenize_mismatch(rng):
    with pytest.raises(ad.ShapeError):
        pe_tokenize(rng.standard_normal((3, 3, 3, 21)), build_scheme("icosa6"))
    with pytest.raises(ad.ShapeError):
        pe_tokenize(rng.standard_normal((3, 3, 2, 20)))


def test_pe_tokenize_permutation_contract(rng):
    s = build_scheme("icosa6")
    perm = rng.permutation(20)
    patch = rng.standard_normal((3, 3, 3, 20))
    permuted = IcosaScheme(s.level, s.vertices, s.faces[perm], s.centroids[perm])
    a = pe_tokenize(patch[..., perm], permuted)
    b = pe_tokenize(patch, s)[:, perm]
    np.testing.assert_array_equal(a, b)


def test_vanilla_tokens(rng):
    dirs = random_unit(rng, 30)
    dirs = np.vstack([dirs, -dirs])
    tok = vanilla_tokenize(rng.standard_normal((3, 3, 3, 60)), dirs)
    assert tok.shape == (1, 60, 30)
    np.testing.assert_array_equal(tok[0, :, 27:], dirs)


def test_vanilla_overflow(rng):
    dirs = random_unit(rng, 101)
    dirs = np.vstack([dirs, -dirs])
    cfg = toy_config("vanilla")
    with pytest.raises(ad.ShapeError):
        vanilla_forward(init_params(cfg), np.zeros((3, 3, 3, 202)), dirs, cfg)


@pytest.mark.parametrize("model_type", ["pe", "vanilla", "shcnn"])
def test_output_shapes_and_range(rng, model_type):
    cfg = toy_config(model_type)
    dirs = random_unit(rng, 6) if model_type == "vanilla" else None
    c = {"pe": 20, "vanilla": 6, "shcnn": cfg.sh_channels}[model_type]
    fwf, fod = forward(init_params(cfg), cfg, rng.standard_normal((4, 3, 3, 3, c)) * 5, dirs)
    assert fwf.shape == (4,) and fod.shape == (4, 45)
    assert np.all((fwf.data > 0) & (fwf.data < 1))


def test_full_size_pe_output_shapes(rng):
    cfg = ModelConfig(scheme_level="icosa6")
    fwf, fod = pe_forward(init_params(cfg), rng.standard_normal((3, 3, 3, 20)).astype(np.float32), cfg)
    assert fwf.shape == (1,) and fod.shape == (1, 45)
    assert fwf.data.dtype == np.float32


@pytest.mark.parametrize("model_type", ["pe", "vanilla", "shcnn"])
def test_zero_parameters(rng, model_type):
    cfg = toy_config(model_type)
    dirs = random_unit(rng, 6) if model_type == "vanilla" else None
    c = {"pe": 20, "vanilla": 6, "shcnn": cfg.sh_channels}[model_type]
    params = zeros_like_params(cfg)
    fwf, fod = forward(params, cfg, rng.standard_normal((2, 3, 3, 3, c)), dirs)
    np.testing.assert_array_equal(fwf.data, 0.5)
    np.testing.assert_array_equal(fod.data, 0.0)


def test_permutation_invariance_without_pe(rng):
    cfg = toy_config("pe", embed_dim=16, n_heads=4, n_layers=2)
    params = init_params(cfg, np.float64)
    patch = rng.standard_normal((2, 3, 3, 3, 20))
    perm = rng.permutation(20)
    a = pe_forward(params, patch, cfg, use_pe=False)
    b = pe_forward(params, patch[..., perm], cfg, use_pe=False)
    np.testing.assert_allclose(a[0].data, b[0].data, atol=1e-12)
    np.testing.assert_allclose(a[1].data, b[1].data, atol=1e-12)
    # the positional encoding breaks the symmetry
    c = pe_forward(params, patch[..., perm], cfg)
    assert not np.allclose(pe_forward(params, patch, cfg)[1].data, c[1].data, atol=1e-9)


def test_attention_rows_sum_to_one(rng):
    cfg = toy_config("pe", n_layers=2)
    trace = []
    pe_forward(init_params(cfg), rng.standard_normal((3, 3, 3, 3, 20)).astype(np.float32), cfg, trace=trace)
    assert len(trace) == 2
    for attn in trace:
        assert attn.shape == (3, cfg.n_heads, 20, 20)
        np.testing.assert_allclose(attn.sum(axis=-1), 1.0, atol=1e-6)


def test_encode_mean_pools(rng):
    cfg = toy_config("pe")
    params = init_params(cfg, np.float64)
    out = encode(params, cfg, rng.standard_normal((2, 20, 27)))
    assert out.shape == (2, cfg.embed_dim)


def test_shcnn_conv3_output_is_single_voxel(rng):
    cfg = ModelConfig(model_type="shcnn")
    trace = []
    shcnn_forward(init_params(cfg), rng.standard_normal((3, 3, 3, 45)).astype(np.float32), cfg, trace)
    assert trace[0].shape == (1, 1, 1, 1, 45)


def test_shcnn_zero_convs_is_pure_shortcut(rng):
    cfg = toy_config("shcnn")
    params = init_params(cfg, np.float64)
    for k in params:
        if k.startswith("conv"):
            params[k] = np.zeros_like(params[k])
    patch = rng.standard_normal((2, 3, 3, 3, cfg.sh_channels))
    fwf, fod = shcnn_forward(params, patch, cfg)
    # the heads applied directly to the centre voxel's coefficients
    h = patch[:, 1, 1, 1, :]
    gelu = lambda x: ad.gelu(ad.Tensor(x)).data
    hid = gelu(h @ params["fod_head.hidden.weight"] + params["fod_head.hidden.bias"])
    np.testing.assert_allclose(fod.data, hid @ params["fod_head.out.weight"] + params["fod_head.out.bias"],
                               atol=1e-12)


def test_shcnn_channel_check(rng):
    cfg = toy_config("shcnn")
    with pytest.raises(ad.ShapeError):
        shcnn_forward(init_params(cfg), rng.standard_normal((3, 3, 3, 7)), cfg)


def test_forward_deterministic(rng):
    cfg = toy_config("pe")
    params = init_params(cfg)
    x = rng.standard_normal((2, 3, 3, 3, 20)).astype(np.float32)
    a, b = pe_forward(params, x, cfg), pe_forward(params, x, cfg)
    assert a[1].data.tobytes() == b[1].data.tobytes()


def test_vanilla_requires_dirs(rng):
    cfg = toy_config("vanilla")
    with pytest.raises(ValueError):
        forward(init_params(cfg), cfg, np.zeros((3, 3, 3, 6)))
