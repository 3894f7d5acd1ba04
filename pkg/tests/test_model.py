import numpy as np
import pytest

from deeptx import autodiff as ad
from deeptx import model as mdl
from deeptx.autodiff import Tensor


def test_default_config_layout():
    cfg = mdl.variant("deeptx")
    assert cfg.widths == (128, 128, 128, 256, 256, 256, 256, 256, 128, 128, 128)
    assert cfg.dilations == ((1, 1), (1, 1), (2, 3), (2, 3), (3, 5), (3, 5), (3, 5), (2, 3), (2, 3), (1, 1), (1, 1))
    assert cfg.kernel == (3, 3)
    assert cfg.in_channels == 17 and cfg.out_channels == 16


@pytest.mark.parametrize("name,target", [("deeptx", 963_100), ("64x11", 114_700)])
def test_param_count_matches_reference(name, target):
    n = mdl.param_count(mdl.variant(name))
    assert abs(n - target) / target < 0.05


def test_param_count_is_exact_scalar_count():
    cfg = mdl.variant("xxs")
    m = mdl.DeepTxModel.init(cfg)
    stored = m.n_params() + sum(b.size for b in m.buffers.values())
    assert mdl.param_count(cfg) == stored
    assert mdl.param_count(cfg) <= 50_000


def test_param_count_without_blocks():
    cfg = mdl.ModelConfig(widths=(), dilations=())
    assert mdl.param_count(cfg) == 17 * 16 + 16


def test_unknown_variant():
    with pytest.raises(ValueError):
        mdl.variant("huge")


def test_history_changes_input_depth():
    assert mdl.ModelConfig(history=3).in_channels == 2 * 8 * 3 + 1
    with pytest.raises(ValueError):
        mdl.ModelConfig(history=4)


def test_preprocess_planes(rng):
    est = rng.normal(size=(2, 3, 5, 4, 2)) + 1j * rng.normal(size=(2, 3, 5, 4, 2))
    x = mdl.preprocess([est], np.array([6, 3]), 6)
    assert x.shape == (2, 3, 5, 17)
    np.testing.assert_allclose(x[0, ..., -1], 1.0)
    np.testing.assert_allclose(x[1, ..., -1], 0.5)
    np.testing.assert_allclose(x[..., :8], est.reshape(2, 3, 5, 8).real, rtol=1e-6)
    np.testing.assert_allclose(x[..., 8:16], est.reshape(2, 3, 5, 8).imag, rtol=1e-6)
    zero = mdl.preprocess(np.zeros((3, 5, 4, 2), complex), 2, 4)
    assert np.all(zero[..., :16] == 0) and np.allclose(zero[..., 16], 0.5)


def test_preprocess_errors():
    e = np.zeros((3, 5, 4, 2), complex)
    with pytest.raises(ValueError):
        mdl.preprocess([e], 7, 6)
    with pytest.raises(ValueError):
        mdl.preprocess([e], 1, 6, history=2)
    with pytest.raises(ValueError):
        mdl.preprocess([e, np.zeros((3, 4, 4, 2), complex)], 1, 6)


def test_default_forward_shape():
    m = mdl.DeepTxModel.init(mdl.variant("deeptx"), seed=0, dtype=np.float32)
    x = mdl.preprocess(np.zeros((1, 14, 168, 4, 2), complex), 1, 6)
    out = mdl.forward(m, x)
    assert out.shape == (1, 14, 168, 4, 2, 2)
    assert np.all(np.isfinite(out.data))


def test_forward_deterministic(rng):
    cfg = mdl.variant("16x2")
    a = mdl.DeepTxModel.init(cfg, seed=3)
    b = mdl.DeepTxModel.init(cfg, seed=3)
    x = rng.normal(size=(2, 6, 8, 17)).astype(np.float32)
    np.testing.assert_array_equal(mdl.forward(a, x).data, mdl.forward(b, x).data)


def test_output_layout_matches_planes(f64, rng):
    cfg = mdl.ModelConfig(widths=(), dilations=())
    m = mdl.DeepTxModel.init(cfg, seed=0)
    x = rng.normal(size=(1, 2, 3, 17))
    raw = mdl.forward_raw(m, x).data
    z = ad.to_complex(mdl.forward(m, x).data)
    np.testing.assert_allclose(z.real.reshape(1, 2, 3, 8), raw[..., :8])
    np.testing.assert_allclose(z.imag.reshape(1, 2, 3, 8), raw[..., 8:])


def test_zero_output_conv_gives_zero_channel_and_zf_error():
    from deeptx import beamforming as bf

    m = mdl.DeepTxModel.init(mdl.variant("16x2"), seed=0)
    m.params["conv_out.w"].data[:] = 0
    out = mdl.forward(m, np.ones((1, 4, 6, 17), np.float32))
    assert np.all(out.data == 0)
    with pytest.raises(ad.SingularMatrixError):
        bf.zf_exact(ad.transpose(out, (0, 1, 2, 4, 3, 5)))


def test_nan_activation_names_block():
    m = mdl.DeepTxModel.init(mdl.variant("16x3"), seed=0)
    m.params["block1.pw2.b"].data[0] = np.nan
    with pytest.raises(FloatingPointError, match="block 2"):
        mdl.forward(m, np.ones((1, 4, 6, 17), np.float32))


def test_input_shape_checked():
    m = mdl.DeepTxModel.init(mdl.variant("16x2"), seed=0)
    with pytest.raises(ad.ShapeError):
        mdl.forward(m, np.ones((1, 4, 6, 16), np.float32))


def test_l2_penalty_examples(f64):
    assert mdl.l2_activation_penalty(ad.complex_tensor(np.zeros(4, complex)), 1.0).data == 0
    unit = ad.complex_tensor(np.exp(1j * np.arange(4.0)))
    assert float(mdl.l2_activation_penalty(unit, 1.0).data) == pytest.approx(1.0)
    assert float(mdl.l2_activation_penalty(unit * np.sqrt(2), 1.0).data) == pytest.approx(2.0)


def test_dilation_enlarges_receptive_field():
    full = mdl.receptive_field(mdl.variant("deeptx"))
    short = mdl.receptive_field(mdl.variant("shorter_dilations"))
    none = mdl.receptive_field(mdl.variant("no_dilations"))
    assert none[0] < short[0] < full[0] and none[1] < short[1] < full[1]
    assert none == (1 + 11 * 2 * 2, 1 + 11 * 2 * 2)


def test_separable_blocks_cost_less():
    cfg = mdl.variant("deeptx")
    c = cfg.widths[0]
    for w in cfg.widths:
        sep, full = mdl.block_multiplies(c, w, cfg.kernel)
        assert sep < full
        c = w


def test_translation_consistency(f64, rng):
    cfg = mdl.ModelConfig(widths=(8, 8), dilations=((1, 1), (1, 1)))
    m = mdl.DeepTxModel.init(cfg, seed=1)
    for b in m.buffers:
        m.buffers[b] = rng.uniform(0.5, 1.5, m.buffers[b].shape)
    radius = (mdl.receptive_field(cfg)[0] - 1) // 2
    x = rng.normal(size=(1, 20, 20, 17))
    padded = np.pad(x, ((0, 0), (5, 5), (5, 5), (0, 0)))
    a = mdl.forward_raw(m, x).data
    b = mdl.forward_raw(m, padded).data[:, 5:-5, 5:-5]
    inner = slice(radius, 20 - radius)
    np.testing.assert_allclose(a[:, inner, inner], b[:, inner, inner], atol=1e-5)


def test_training_mode_updates_running_stats(rng):
    m = mdl.DeepTxModel.init(mdl.variant("16x2"), seed=0)
    before = m.buffers["block0.norm1.mean"].copy()
    mdl.forward(m, rng.normal(size=(2, 4, 6, 17)).astype(np.float32), training=True)
    assert not np.array_equal(before, m.buffers["block0.norm1.mean"])
    frozen = m.buffers["block0.norm1.mean"].copy()
    mdl.forward(m, rng.normal(size=(2, 4, 6, 17)).astype(np.float32))
    np.testing.assert_array_equal(frozen, m.buffers["block0.norm1.mean"])


def test_checkpoint_round_trip(tmp_path, rng):
    m = mdl.DeepTxModel.init(mdl.variant("xxs"), seed=2, dtype=np.float32)
    mdl.forward(m, rng.normal(size=(2, 4, 6, 17)).astype(np.float32), training=True)
    path = tmp_path / "m.dtxm"
    mdl.save_checkpoint(path, m)
    back = mdl.load_checkpoint(path)
    assert back.config == m.config
    assert list(back.params) == list(m.params)
    for k in m.params:
        np.testing.assert_array_equal(back.params[k].data, m.params[k].data)
    for k in m.buffers:
        np.testing.assert_array_equal(back.buffers[k], m.buffers[k])


def test_checkpoint_errors(tmp_path):
    m = mdl.DeepTxModel.init(mdl.variant("16x2"), seed=0, dtype=np.float32)
    path = tmp_path / "m.dtxm"
    mdl.save_checkpoint(path, m)
    blob = path.read_bytes()
    (tmp_path / "bad").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(mdl.CheckpointError, match="magic"):
        mdl.load_checkpoint(tmp_path / "bad")
    (tmp_path / "short").write_bytes(blob[:-10])
    with pytest.raises(mdl.CheckpointError):
        mdl.load_checkpoint(tmp_path / "short")


def test_config_json_round_trip():
    cfg = mdl.variant("xs", tau_max=3, history=2)
    assert mdl.ModelConfig.from_json(cfg.to_json()) == cfg
