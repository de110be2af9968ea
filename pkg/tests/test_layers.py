import numpy as np
import pytest

from eegmtl.nn import LayerKind, LayerSpec, build, init_parameters
from eegmtl.nn import layers as L
from eegmtl.rng import RngStream


def test_paper_geometry_specs():
    stem = LayerSpec(LayerKind.CONV2D, 1, 256, (1, 36), (1, 36), (0, 2))
    dw = LayerSpec(LayerKind.DEPTHWISE_CONV2D, 256, 768, (8, 1), (8, 1))
    assert stem.output_shape((1, 128, 500)) == (256, 128, 14)
    assert dw.output_shape((256, 128, 14)) == (768, 16, 14)
    assert dw.multiplier == 3
    spatial = LayerSpec(LayerKind.TRANSPOSED_CONV, 768, 256, (1, 36), (1, 36), (0, 2))
    temporal = LayerSpec(LayerKind.TRANSPOSED_CONV, 256, 1, (8, 1), (8, 1))
    assert temporal.output_shape(spatial.output_shape((768, 16, 14))) == (1, 128, 500)


def test_spec_errors():
    with pytest.raises(ValueError, match="channels"):
        LayerSpec(LayerKind.CONV2D, 2, 4, (3, 3)).output_shape((3, 8, 8))
    with pytest.raises(ValueError, match="multiple"):
        LayerSpec(LayerKind.DEPTHWISE_CONV2D, 3, 4, (1, 1)).output_shape((3, 8, 8))
    with pytest.raises(ValueError, match="divisible"):
        LayerSpec(LayerKind.MULTI_HEAD_ATTENTION, 10, 10, heads=3).output_shape((5, 10))
    with pytest.raises(ValueError):
        build(LayerSpec(LayerKind.EMBEDDING_TABLE))


@pytest.mark.parametrize("spec, in_shape", [
    (LayerSpec(LayerKind.CONV2D, 2, 3, (2, 3), (1, 2), (1, 0)), (2, 2, 7, 9)),
    (LayerSpec(LayerKind.DEPTHWISE_CONV2D, 2, 4, (3, 1), (3, 1)), (2, 2, 9, 5)),
    (LayerSpec(LayerKind.TRANSPOSED_CONV, 2, 3, (2, 2), (2, 2)), (1, 2, 3, 4)),
    (LayerSpec(LayerKind.UPSAMPLE, target=(6, 10)), (1, 2, 3, 4)),
    (LayerSpec(LayerKind.MLP_BLOCK, 8, hidden=16), (2, 5, 8)),
    (LayerSpec(LayerKind.MULTI_HEAD_ATTENTION, 8, heads=2), (2, 5, 8)),
    (LayerSpec(LayerKind.LAYER_NORM, 8), (2, 5, 8)),
    (LayerSpec(LayerKind.INSTANCE_NORM, 2), (2, 2, 3, 3)),
])
def test_output_shape_agrees_with_forward(spec, in_shape):
    layer = build(spec, np.float64)
    init_parameters(layer, RngStream(0))
    x = np.random.default_rng(0).normal(size=in_shape)
    assert layer(x).shape == spec.output_shape(in_shape)


def test_parameter_names_and_init():
    blk = L.TransformerBlock(8, 2, 4, dtype=np.float64)
    init_parameters(blk, RngStream(5), "blk.")
    names = dict(blk.named_parameters())
    assert "attn.query.weight" in names and "mlp.fc2.bias" in names
    assert names["mlp.fc1.weight"].shape == (8, 32)
    np.testing.assert_array_equal(names["norm1.weight"].data, 1.0)
    np.testing.assert_array_equal(names["attn.out.bias"].data, 0.0)
    w = names["mlp.fc2.weight"].data
    assert abs(w.std() - 1 / np.sqrt(32)) < 0.03


def test_init_is_layout_independent():
    a, b = L.MLPBlock(4, 8, np.float64), L.MLPBlock(4, 8, np.float64)
    init_parameters(a, RngStream(1), "m.")
    init_parameters(b.fc2, RngStream(1), "m.fc2.")
    np.testing.assert_array_equal(a.fc2.weight.data, b.fc2.weight.data)


def test_dropout_layer_train_eval():
    d = L.Dropout(0.5)
    x = np.ones((10, 10))
    d.eval()
    np.testing.assert_array_equal(d(x).data, x)
    d.train()
    assert (d(x, RngStream(0)).data == 0).any()
    with pytest.raises(ValueError):
        L.Dropout(1.5)
