import io

import numpy as np
import pytest

from eegmtl.model import (
    ModelConfig,
    MTLTransformer,
    WeightMismatch,
    checksum,
    load_model,
    load_weights,
    save_weights,
    state_dict,
)
from eegmtl.rng import RngStream
from eegmtl.tensor import backward


@pytest.fixture(scope="module")
def batch():
    cfg = ModelConfig.desk()
    r = RngStream(9)
    x = r.child("x").normal((4, 1, cfg.channels, cfg.timesteps))
    return x, r.child("g").normal((4, 2)) * 50 + 150, r.child("p").normal(4)


def test_desk_shapes(batch):
    x, _, _ = batch
    m = MTLTransformer(ModelConfig.desk(use_pupil=True)).eval()
    out = m.forward(x)
    assert out.gaze_pred.shape == (4, 2)
    assert out.recon.shape == x.shape
    assert out.pupil_pred.shape == (4, 1)
    single = m.forward(x[0])
    np.testing.assert_allclose(single.gaze_pred.data.reshape(2), out.gaze_pred.data[0], rtol=1e-5, atol=1e-5)


def test_config_validation():
    with pytest.raises(ValueError, match="patch_grid"):
        ModelConfig.desk(patch_grid=(3, 3))
    with pytest.raises(ValueError, match="heads"):
        ModelConfig.desk(encoder_heads=3)
    with pytest.raises(ValueError):
        ModelConfig.desk(alpha_recon=-1)
    with pytest.raises(ValueError):
        ModelConfig.preset("huge")
    with pytest.raises(ValueError):
        ModelConfig.desk().with_variant("mtl3")


def test_paper_config_grid():
    cfg = ModelConfig.paper()
    assert cfg.derived_grid() == (16, 14)
    assert cfg.num_patches == 224


def test_variants_select_heads():
    base = MTLTransformer(ModelConfig.desk().with_variant("base"))
    mtl2 = MTLTransformer(ModelConfig.desk().with_variant("mtl2"))
    assert base.decoder is None and base.pupil_head is None
    assert mtl2.decoder is None and mtl2.pupil_head is not None
    with pytest.raises(ValueError, match="reconstruction"):
        base.reconstruct(base.represent(np.zeros((1, 8, 64))))


def test_init_shared_across_variants():
    a = MTLTransformer(ModelConfig.desk().with_variant("base"), seed=3)
    b = MTLTransformer(ModelConfig.desk(use_pupil=True), seed=3)
    pa, pb = a.parameters(), b.parameters()
    for k in pa:
        np.testing.assert_array_equal(pa[k].data, pb[k].data)


def test_input_geometry_rejected():
    m = MTLTransformer(ModelConfig.desk())
    with pytest.raises(ValueError, match="geometry"):
        m.represent(np.zeros((2, 1, 8, 65)))


def test_l2_covers_main_parameters_only():
    m = MTLTransformer(ModelConfig.desk(use_pupil=True))
    want = sum(float(np.sum(p.data.astype(np.float64) ** 2)) for k, p in m.named_parameters()
               if k.startswith(("encoder.", "gaze_head.")))
    assert m.l2_term().item() == pytest.approx(want, rel=1e-5)
    assert not any(k.startswith(("decoder.", "pupil_head.")) for k in m.main_parameters())


def test_total_loss_decomposition(batch):
    x, g, p = batch
    cfg = ModelConfig.desk(use_pupil=True, alpha_recon=7.0, alpha_pupil=0.5, l2_coeff=1e-3, dtype="float64")
    out = MTLTransformer(cfg).total_loss(x, g, p, rng=RngStream(0))
    v = out.loss_values()
    assert v["total"] == pytest.approx(v["main"] + 7.0 * v["recon"] + 0.5 * v["pupil"] + 1e-3 * v["l2"], rel=1e-12)


def test_disabled_heads_report_zero(batch):
    x, g, _ = batch
    out = MTLTransformer(ModelConfig.desk().with_variant("base")).total_loss(x, g, rng=RngStream(0))
    assert out.loss_values()["recon"] == 0.0 and out.loss_values()["pupil"] == 0.0


def test_pupil_target_required(batch):
    x, g, _ = batch
    with pytest.raises(ValueError, match="has-pupil"):
        MTLTransformer(ModelConfig.desk(use_pupil=True)).total_loss(x, g, rng=RngStream(0))


def test_train_mode_needs_dropout_stream(batch):
    x, g, _ = batch
    with pytest.raises(ValueError, match="rng"):
        MTLTransformer(ModelConfig.desk()).total_loss(x, g)


def test_decoder_gets_no_gradient_when_weight_zero(batch):
    """With the reconstruction weight at 0 the decoder is outside the gradient path of the objective."""
    x, g, _ = batch
    m = MTLTransformer(ModelConfig.desk(alpha_recon=0.0, dtype="float64"))
    backward(m.total_loss(x, g, rng=RngStream(0)).losses["total"])
    for k, p in m.named_parameters():
        if k.startswith("decoder."):
            assert not p.grad.any(), k


def test_gaze_buffers_apply_affine(batch):
    x, _, _ = batch
    m = MTLTransformer(ModelConfig.desk()).eval()
    raw = m.forward(x).gaze_pred.data
    m.set_target_stats([100.0, 50.0], [2.0, 3.0])
    np.testing.assert_allclose(m.forward(x).gaze_pred.data, raw * [2.0, 3.0] + [100.0, 50.0], rtol=1e-6)


def test_weights_roundtrip_bitwise(batch):
    x, _, _ = batch
    m = MTLTransformer(ModelConfig.desk(), seed=4).eval()
    m.set_target_stats([1.0, 2.0], [3.0, 4.0])
    buf = io.BytesIO()
    save_weights(m, buf, {"note": "x"})
    m2, meta = load_model(buf.getvalue())
    assert meta["note"] == "x"
    assert checksum(state_dict(m)) == checksum(state_dict(m2))
    np.testing.assert_array_equal(m.eval().forward(x).gaze_pred.data, m2.eval().forward(x).gaze_pred.data)


def test_load_shape_mismatch_names_tensor():
    buf = io.BytesIO()
    save_weights(MTLTransformer(ModelConfig.desk()), buf)
    buf.seek(0)
    other = MTLTransformer(ModelConfig.desk(pred_hidden=16))
    with pytest.raises(WeightMismatch) as err:
        load_weights(other, buf)
    assert "gaze_head.fc1.weight" in err.value.offenders


def test_load_missing_tensor():
    buf = io.BytesIO()
    save_weights(MTLTransformer(ModelConfig.desk().with_variant("base")), buf)
    buf.seek(0)
    with pytest.raises(WeightMismatch, match="missing"):
        load_weights(MTLTransformer(ModelConfig.desk()), buf)


def test_encoder_only_load():
    src = MTLTransformer(ModelConfig.desk(), seed=1)
    dst = MTLTransformer(ModelConfig.desk(), seed=2)
    head_before = checksum({k: p.data for k, p in dst.named_parameters() if k.startswith("gaze_head.")})
    buf = io.BytesIO()
    save_weights(src, buf)
    buf.seek(0)
    load_weights(dst, buf, allow=("encoder.",))
    enc = lambda m: checksum({k: p.data for k, p in m.named_parameters() if k.startswith("encoder.")})
    assert enc(src) == enc(dst)
    assert checksum({k: p.data for k, p in dst.named_parameters() if k.startswith("gaze_head.")}) == head_before
