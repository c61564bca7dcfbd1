import numpy as np
import pytest

from zeroshot_quant import graph as g
from zeroshot_quant.errors import InvalidModel
from zeroshot_quant.folding import fold_bn, fold_layer
from zeroshot_quant.harness import build_model, random_model
from zeroshot_quant.tensor import gaussian_tensor


def _bn(gamma, beta, mean, std, eps):
    return g.BNParams(np.asarray(gamma, np.float32), np.asarray(beta, np.float32),
                      np.asarray(mean, np.float32), np.asarray(std, np.float32), eps)


def _weight(seed=0, o=2):
    return gaussian_tensor((o, 3, 3, 3), 0, 1, seed)


def test_identity_fold():
    std = np.array([0.5, 2.0])
    spec = g.LayerSpec(0, g.CONV, _weight(), bn=_bn(std, [0, 0], [0, 0], std, 0.0))
    out = fold_layer(spec)
    assert out.bn is None
    np.testing.assert_allclose(out.weight, spec.weight, rtol=1e-7)
    assert np.all(out.bias == 0)


def test_fold_by_hand():
    spec = g.LayerSpec(0, g.CONV, _weight(o=1), bn=_bn([2.0], [0.1], [0.5], [1.0], 0.0))
    out = fold_layer(spec)
    np.testing.assert_allclose(out.weight, 2 * spec.weight, rtol=1e-7)
    np.testing.assert_allclose(out.bias, [-0.9], rtol=1e-6)


def test_existing_bias_is_folded_through():
    spec = g.LayerSpec(0, g.CONV, _weight(o=1), np.array([0.3], np.float32),
                       bn=_bn([2.0], [0.1], [0.5], [1.0], 0.0))
    np.testing.assert_allclose(fold_layer(spec).bias, [2 * (0.3 - 0.5) + 0.1], rtol=1e-6)


def test_fold_is_idempotent_on_bn_free_models():
    model = build_model("tiny-cnn")
    folded, report = fold_bn(model)
    assert folded == model
    assert not any(report.folded.values()) and report.deviation == {}


@pytest.mark.parametrize("seed", range(5))
def test_folded_matches_unfolded(seed):
    model = random_model(seed, bn_prob=1.0, head=True)
    folded, report = fold_bn(model)
    assert not folded.has_bn
    assert set(report.deviation) == {s.id for s in model.layers if s.bn is not None}
    x = gaussian_tensor((16,) + model.input_shape, 0, 1, seed + 100)
    a, _ = g.forward(model, x)
    b, _ = g.forward(folded, x)
    assert np.all(np.abs(a - b) <= 1e-4 * (1 + np.abs(a)))


def test_bn_on_non_conv_layer_is_invalid():
    spec = g.LayerSpec(0, g.CONV, _weight())
    bad = g.ModelGraph([spec, g.LayerSpec(1, g.POOL)], (3, 4, 4))
    object.__setattr__(bad.layers[1], "bn", _bn([1, 1], [0, 0], [0, 0], [1, 1], 1e-5))
    with pytest.raises(InvalidModel):
        fold_bn(bad)
