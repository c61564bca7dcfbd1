import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from zeroshot_quant import graph as g
from zeroshot_quant.autodiff import finite_diff_check
from zeroshot_quant.calib import SubstituteSet, estimate_substitutes
from zeroshot_quant.distill import (LOSS_KINDS, DistillConfig, StatsMatchLoss, distill,
                                    distill_loss, load_distilled, save_distilled, stat_distance,
                                    stats_of, zscore_loss)
from zeroshot_quant.errors import InvalidArgument, ParseError, UnsupportedVersion
from zeroshot_quant.harness import build_model, random_model
from zeroshot_quant.tensor import ChannelStats, gaussian_tensor

finite = st.floats(-50, 50, allow_nan=False)
positive = st.floats(0, 50, allow_nan=False)


def cs(mean, std):
    return ChannelStats(np.atleast_1d(mean), np.atleast_1d(std))


def test_zscore_equal_stats_is_zero():
    assert zscore_loss(cs([1.0, -2.0], [0.3, 0.0]), cs([1.0, -2.0], [0.3, 0.0])) == 0.0


def test_zscore_unit_example():
    assert math.isclose(zscore_loss(cs(1.0, 1.0), cs(0.0, 1.0), s=1e-12), 1 / math.sqrt(2),
                        abs_tol=1e-6)


def test_zscore_guard_example():
    assert math.isclose(zscore_loss(cs(1.0, 0.0), cs(0.0, 0.0), s=1e-6), 1 / (math.sqrt(2) * 1e-6),
                        rel_tol=1e-6)


def test_zscore_length_mismatch():
    with pytest.raises(InvalidArgument):
        zscore_loss(cs([0.0, 1.0], [1.0, 1.0]), cs(0.0, 1.0))


@given(st.lists(st.tuples(finite, positive, finite, positive), min_size=1, max_size=8))
def test_zscore_is_symmetric(rows):
    mu_u, sd_u, mu_v, sd_v = map(np.array, zip(*rows))
    assert math.isclose(zscore_loss(cs(mu_u, sd_u), cs(mu_v, sd_v)),
                        zscore_loss(cs(mu_v, sd_v), cs(mu_u, sd_u)), rel_tol=1e-6, abs_tol=1e-6)


@given(finite, finite, positive, positive)
def test_zscore_doubles_with_mean_gap(mu_v, gap, sd_u, sd_v):
    one = zscore_loss(cs(mu_v + gap, sd_u), cs(mu_v, sd_v))
    two = zscore_loss(cs(mu_v + 2 * gap, sd_u), cs(mu_v, sd_v))
    assert math.isclose(two, 2 * one, rel_tol=1e-6, abs_tol=1e-6)


@pytest.mark.parametrize("kind", LOSS_KINDS)
def test_stat_distance_gradients(kind):
    rng = np.random.default_rng(1)
    mu_u, mu_v = rng.normal(size=5), rng.normal(size=5)
    sd_u, sd_v = rng.uniform(0.2, 2, 5), rng.uniform(0.2, 2, 5)
    val, g_mu, g_sig = stat_distance(kind, mu_u, sd_u, mu_v, sd_v)
    if kind != "kl":
        assert val >= 0
    assert np.isfinite(val)
    eps = 1e-6
    for i in range(5):
        for arr, grad in ((mu_u, g_mu), (sd_u, g_sig)):
            up, dn = arr.copy(), arr.copy()
            up[i] += eps
            dn[i] -= eps
            args_up = (up, sd_u) if arr is mu_u else (mu_u, up)
            args_dn = (dn, sd_u) if arr is mu_u else (mu_u, dn)
            fd = (stat_distance(kind, *args_up, mu_v, sd_v)[0]
                  - stat_distance(kind, *args_dn, mu_v, sd_v)[0]) / (2 * eps)
            assert abs(fd - grad[i]) <= 1e-5 * max(1, abs(grad[i]))


def test_variant_definitions():
    mu_u, mu_v = np.array([1.0, 2.0]), np.array([0.0, 0.0])
    sd_u, sd_v = np.array([1.0, 3.0]), np.array([1.0, 1.0])
    assert stat_distance("l1", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(1.5 + 1.0)
    assert stat_distance("l1mu", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(1.5)
    assert stat_distance("l1sigma", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(1.0)
    assert stat_distance("l2", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(2.5 + 2.0)
    assert stat_distance("l2mu", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(2.5)
    assert stat_distance("l2sigma", mu_u, sd_u, mu_v, sd_v)[0] == pytest.approx(2.0)
    assert stat_distance("kl", mu_u, sd_v, mu_v, sd_v)[0] == pytest.approx(1.0)


def _exact_fixture():
    """One 1x1 identity conv and data standardised per channel, with the
    substitute set equal to the data's own statistics."""
    model = g.ModelGraph([g.LayerSpec(0, g.CONV, np.eye(2, dtype=np.float32)[:, :, None, None])],
                         (2, 3, 3))
    y = gaussian_tensor((4, 2, 3, 3), 0, 1, 0).astype(np.float64)
    mu, sd = y.mean(axis=(0, 2, 3), keepdims=True), y.std(axis=(0, 2, 3), keepdims=True)
    y = (y - mu) / sd
    return model, y


def test_loss_vanishes_when_everything_matches():
    model, y = _exact_fixture()
    subs = SubstituteSet([(0, ChannelStats([0.0, 0.0], [1.0, 1.0]))])
    assert distill_loss(model, y, subs) < 1e-9


def test_single_layer_is_sum_of_two_terms():
    model = build_model("gaussian-4layer", input_shape=(2, 4, 4))
    model = g.ModelGraph(model.layers[:1], model.input_shape)
    y = gaussian_tensor((3, 2, 4, 4), 0.2, 1.3, 5)
    subs = SubstituteSet([(0, ChannelStats([0.5, -0.1], [0.7, 2.0]))])
    out, trace = g.forward(model, y.astype(np.float64), trace=True)
    expect = zscore_loss(stats_of(trace[0]), subs[0]) + zscore_loss(stats_of(y), cs([0, 0], [1, 1]))
    assert math.isclose(distill_loss(model, y, subs), expect, rel_tol=1e-9)


@pytest.mark.parametrize("seed", range(5))
def test_compositional_oracle(seed):
    model = random_model(seed, head=True)
    subs = estimate_substitutes(model)
    y = gaussian_tensor((3,) + model.input_shape, 0.1, 1.1, seed).astype(np.float64)
    _, trace = g.forward(model, y, trace=True)
    total = sum(zscore_loss(stats_of(trace[lid]), subs[lid]) for lid in subs.ids())
    c = model.input_shape[0]
    total += zscore_loss(stats_of(y), cs(np.zeros(c), np.ones(c)))
    assert abs(distill_loss(model, y, subs) - total) <= 1e-6


@pytest.mark.parametrize("kind", ["zscore", "l2", "kl"])
def test_distill_loss_gradient(kind):
    model = random_model(7, head=True)
    subs = estimate_substitutes(model)
    y = gaussian_tensor((3,) + model.input_shape, 0, 1, 2)
    assert finite_diff_check(model, y, StatsMatchLoss(model, subs, kind)) <= 1e-3


def test_missing_or_foreign_substitutes():
    model = build_model("gaussian-4layer", input_shape=(2, 4, 4))
    subs = estimate_substitutes(model)
    with pytest.raises(InvalidArgument, match="no substitute"):
        StatsMatchLoss(model, SubstituteSet(subs.entries[:-1]))
    with pytest.raises(InvalidArgument, match="unknown layers"):
        StatsMatchLoss(model, SubstituteSet(subs.entries + [(99, subs[0])]))


def test_already_optimal_start_barely_moves():
    model, _ = _exact_fixture()
    subs = SubstituteSet([(0, ChannelStats([0.0, 0.0], [1.0, 1.0]))])
    dd = distill(model, subs, DistillConfig(batch=64))
    assert dd.final_loss <= dd.initial_loss
    assert dd.loss_history[-1] <= 1.05 * dd.initial_loss + 1e-12


def test_distill_is_deterministic_and_best_so_far():
    model = build_model("gaussian-4layer", input_shape=(2, 4, 4), seed=3)
    subs = estimate_substitutes(model)
    cfg = DistillConfig(iterations=40, learning_rate=1e-2, seed=9)
    a, b = distill(model, subs, cfg), distill(model, subs, cfg)
    assert a == b
    assert len(a.loss_history) == 40 and a.final_loss == min([a.initial_loss] + a.loss_history)
    assert a.final_loss == pytest.approx(distill_loss(model, a.data.astype(np.float64), subs),
                                         rel=1e-4)
    assert distill(model, subs, DistillConfig(iterations=40, learning_rate=1e-2, seed=10)) != a


@pytest.mark.parametrize("field,value", [("iterations", 0), ("learning_rate", 0.0), ("guard", 0.0),
                                         ("batch", 0), ("loss_kind", "huber")])
def test_config_validation(field, value):
    with pytest.raises(InvalidArgument):
        DistillConfig(**{field: value})


def test_distilled_round_trip_and_corruption(tmp_path):
    model = build_model("gaussian-4layer", input_shape=(2, 4, 4))
    dd = distill(model, estimate_substitutes(model), DistillConfig(iterations=5))
    d = save_distilled(dd, tmp_path / "y")
    assert load_distilled(d) == dd
    blob = d / "data.bin"
    raw = blob.read_bytes()
    blob.write_bytes(raw[:-1])
    with pytest.raises(ParseError, match="truncated"):
        load_distilled(d)
    blob.write_bytes(raw)
    meta = json.loads((d / "meta.json").read_text())
    (d / "meta.json").write_text(json.dumps({**meta, "format": "gzsq-distilled/2"}))
    with pytest.raises(UnsupportedVersion):
        load_distilled(d)
    (d / "meta.json").write_text(json.dumps({**meta, "shape": ["a"]}))
    with pytest.raises(ParseError):
        load_distilled(d)
