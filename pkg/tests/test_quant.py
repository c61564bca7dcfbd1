import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oracles import brute_force_histogram_range
from zeroshot_quant import graph as g
from zeroshot_quant import quant as q
from zeroshot_quant.errors import EmptyObserver, InvalidArgument, ParseError, UnsupportedVersion
from zeroshot_quant.harness import build_model, eval_accuracy, gen_dataset, train_tiny
from zeroshot_quant.tensor import gaussian_tensor


def test_affine_unit_range():
    p = q.compute_qparams(0.0, 1.0, 8, q.PER_TENSOR, q.AFFINE)
    assert float(p.scale) == 255 and float(p.zero_point) == 0


def test_symmetric_unit_range():
    p = q.compute_qparams(-1.0, 1.0, 8, q.PER_TENSOR, q.SYMMETRIC)
    assert float(p.scale) == 127 and float(p.zero_point) == 0


def test_affine_offset_range_maps_endpoints():
    p = q.compute_qparams(-0.5, 1.5, 8, q.PER_TENSOR, q.AFFINE)
    assert float(p.scale) == 127.5 and float(p.zero_point) == 64
    assert q.quantize(-0.5, p) == 0 and q.quantize(1.5, p) == 255


def test_quantize_by_hand_and_clamping():
    p = q.compute_qparams(0.0, 1.0, 8)
    assert q.quantize(0.5, p) == 128
    assert q.dequantize(128, p) == pytest.approx(128 / 255)
    assert q.quantize(1e6, p) == 255 and q.quantize(-1e6, p) == 0


def test_round_half_away_from_zero():
    assert q.round_half_away([-2.5, -1.5, -0.5, 0.5, 1.5, 2.49]).tolist() == [-3, -2, -1, 1, 2, 2]


def test_degenerate_range_is_widened():
    p = q.compute_qparams(2.0, 2.0, 8)
    assert q.dequantize(q.quantize(2.0, p), p) == pytest.approx(2.0, abs=0.5 / float(p.scale))
    assert float(p.scale) == 255


@pytest.mark.parametrize("lo,hi,kw", [(1.0, 0.0, {}), (0.0, 1.0, {"bits": 9}),
                                      (0.0, 1.0, {"bits": 1}), (0.0, np.inf, {}),
                                      (0.0, 1.0, {"symmetry": "odd"})])
def test_invalid_qparams(lo, hi, kw):
    with pytest.raises(InvalidArgument):
        q.compute_qparams(lo, hi, **kw)


def test_symmetric_requires_zero_point():
    with pytest.raises(InvalidArgument):
        q.QuantParams(np.float64(1.0), np.float64(1.0), 8, q.PER_TENSOR, q.SYMMETRIC)


schemes = st.tuples(st.sampled_from([2, 4, 8]), st.sampled_from([q.SYMMETRIC, q.AFFINE]),
                    st.sampled_from([q.PER_TENSOR, q.PER_CHANNEL]))
tensors = arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 6)),
                 elements=st.floats(-100, 100, allow_nan=False, allow_subnormal=False))


def _params_for(x, bits, sym, gran):
    if gran == q.PER_CHANNEL:
        return q.compute_qparams(x.min(axis=1), x.max(axis=1), bits, gran, sym)
    return q.compute_qparams(float(x.min()), float(x.max()), bits, gran, sym)


@given(tensors, schemes)
def test_in_range_error_is_at_most_half_a_step(x, scheme):
    bits, sym, gran = scheme
    p = _params_for(x, bits, sym, gran)
    err = np.abs(q.fake_quantize(x, p) - x)
    half = 0.5 / p._broadcast(p.scale, x.ndim)
    assert np.all(err <= half + 1e-7)
    codes = q.quantize(x, p)
    assert np.all(codes >= p.qmin) and np.all(codes <= p.qmax) and np.all(codes == np.round(codes))


@given(tensors, schemes)
def test_fake_quantize_is_idempotent(x, scheme):
    p = _params_for(x, *scheme)
    once = q.fake_quantize(x, p)
    assert q.fake_quantize(once, p).tobytes() == once.tobytes()


@given(tensors, st.sampled_from([2, 4, 8]))
def test_symmetric_params_cover_symmetric_range(x, bits):
    p = _params_for(x, bits, q.SYMMETRIC, q.PER_TENSOR)
    assert float(p.zero_point) == 0
    assert q.dequantize(p.qmin, p) == -q.dequantize(p.qmax, p)


@pytest.mark.parametrize("seed", range(40))
@pytest.mark.parametrize("bits", [2, 4, 8])
@pytest.mark.parametrize("sym", [q.SYMMETRIC, q.AFFINE])
def test_per_channel_error_never_exceeds_per_tensor(seed, bits, sym):
    rng = np.random.default_rng(seed)
    w = rng.normal(0, rng.uniform(0.05, 1.0, (8, 1, 1, 1)), (8, 4, 3, 3))
    pc = q.PerChannelMinMaxObserver().observe(w).finalize(bits, sym)
    pt = q.MinMaxObserver().observe(w).finalize(bits, sym)
    err_pc = ((q.fake_quantize(w, pc) - w) ** 2).sum()
    err_pt = ((q.fake_quantize(w, pt) - w) ** 2).sum()
    assert err_pc <= err_pt


def test_identity_params_are_exact():
    x = gaussian_tensor((3, 4), 0, 5, 0)
    p = q.compute_qparams(-1.0, 1.0, 32)
    assert p.identity and q.fake_quantize(x, p) is x


# ---------------------------------------------------------------- observers

def test_minmax_union():
    obs = q.MinMaxObserver()
    obs.observe(np.array([-2.0, 1.0]))
    obs.observe(np.array([0.5, 3.0]))
    assert obs.range() == (-2.0, 3.0)


def test_per_channel_lengths():
    w = gaussian_tensor((5, 2, 3, 3), 0, 1, 0)
    p = q.PerChannelMinMaxObserver().observe(w).finalize()
    assert p.scale.shape == (5,)


@pytest.mark.parametrize("obs", [q.MinMaxObserver(), q.PerChannelMinMaxObserver(),
                                 q.HistogramObserver(16)])
def test_finalize_without_data(obs):
    with pytest.raises(EmptyObserver):
        obs.finalize()


@given(st.lists(arrays(np.float64, st.integers(1, 40),
                       elements=st.floats(-1e3, 1e3, allow_nan=False)), min_size=1, max_size=5))
def test_histogram_counts_everything(batches):
    obs = q.HistogramObserver(64)
    for b in batches:
        obs.observe(b)
    assert obs.count == sum(b.size for b in batches)
    assert obs.lo == min(b.min() for b in batches) and obs.hi == max(b.max() for b in batches)


def test_histogram_on_uniform_data_keeps_full_support():
    x = np.random.default_rng(0).uniform(-1, 3, 200_000)
    obs = q.HistogramObserver().observe(x)
    lo, hi = obs.finalize_range(8, q.AFFINE)
    width = (obs.hi - obs.lo) / obs.bins
    assert abs(lo - obs.lo) <= width and abs(hi - obs.hi) <= width


def _near_tie(counts, lo, hi, bits, sym, got, want):
    e = np.linspace(lo, hi, len(counts) + 1)
    s = q.SYMMETRIC if sym else q.AFFINE
    a = q.histogram_error(counts, e, got[0], got[1], bits, s)[0]
    b = q.histogram_error(counts, e, want[0], want[1], bits, s)[0]
    return abs(a - b) <= 1e-9 * max(1.0, abs(b))


@pytest.mark.parametrize("seed", range(12))
@pytest.mark.parametrize("sym", [False, True])
def test_histogram_matches_brute_force(seed, sym):
    rng = np.random.default_rng(seed)
    data = np.concatenate([rng.normal(rng.uniform(-2, 2), rng.uniform(0.1, 1), 400),
                           rng.standard_t(2, 40) * 3])
    bins = int(rng.choice([8, 16, 32]))
    bits = int(rng.choice([2, 3, 4, 8]))
    obs = q.HistogramObserver(bins).observe(data)
    got = obs.finalize_range(bits, q.SYMMETRIC if sym else q.AFFINE)
    lo, hi, _ = brute_force_histogram_range(obs.counts.tolist(), obs.lo, obs.hi, bits,
                                            obs.stride(), sym)
    assert np.allclose(got, (lo, hi), rtol=0, atol=1e-12) or _near_tie(
        obs.counts, obs.lo, obs.hi, bits, sym, got, (lo, hi))


def test_histogram_rebin_preserves_mass():
    obs = q.HistogramObserver(32)
    obs.observe(np.linspace(0, 1, 100))
    obs.observe(np.linspace(-4, 5, 50))
    assert obs.count == 150 and obs.lo == -4 and obs.hi == 5


def test_histogram_clips_outliers():
    rng = np.random.default_rng(3)
    x = np.concatenate([rng.normal(0, 1, 50_000), [60.0]])
    obs = q.HistogramObserver().observe(x)
    # at 4 bits the step noise on 50k samples outweighs clipping one point
    lo, hi = obs.finalize_range(4, q.AFFINE)
    assert hi < 10
    # at 8 bits the same objective keeps it
    assert obs.finalize_range(8, q.AFFINE)[1] > 50


# ---------------------------------------------------------------- models

@pytest.fixture(scope="module")
def trained():
    train = gen_dataset("gaussian-blobs", 4, 100, seed=1)
    test = gen_dataset("gaussian-blobs", 4, 100, seed=1, split="test")
    model = train_tiny(build_model("tiny-cnn-bn", seed=1, head="flatten"), train, seed=1)
    return model, train, test


def test_calibrate_single_batch_equals_trace_extrema(trained):
    model = trained[0]
    x = trained[1].samples[:16]
    params = q.calibrate_activations(model, x, "minmax")
    _, trace = g.forward(model, x, trace=True)
    for lid, t in trace:
        assert params[lid] == q.compute_qparams(float(t.min()), float(t.max()), 8)
    assert params["input"] == q.compute_qparams(float(x.min()), float(x.max()), 8)


def test_calibrate_two_batches_is_union(trained):
    model, train, _ = trained
    a, b = train.samples[:8], train.samples[8:40]
    both = q.calibrate_activations(model, [a, b], "minmax")
    _, ta = g.forward(model, a, trace=True)
    _, tb = g.forward(model, b, trace=True)
    for lid, t in ta:
        lo = min(float(t.min()), float(tb[lid].min()))
        hi = max(float(t.max()), float(tb[lid].max()))
        assert both[lid] == q.compute_qparams(lo, hi, 8)


def test_w8_accuracy_close_to_fp32(trained):
    model, train, test = trained
    fp32 = eval_accuracy(model, test)
    assert fp32 >= 0.9
    acts = q.calibrate_activations(model, train.samples[:64], "minmax")
    qm = q.quantize_model(model, acts, 8)
    assert abs(eval_accuracy(qm, test) - fp32) <= 0.02


def test_identity_quantization_is_exact(trained):
    model, _, test = trained
    acts = q.calibrate_activations(model, test.samples[:4], bits=32)
    qm = q.quantize_model(model, acts, 32)
    assert np.array_equal(q.quantized_forward(qm, test.samples), g.forward(model, test.samples)[0])
    assert eval_accuracy(qm, test) == eval_accuracy(model, test)


def test_two_bit_weights_do_not_beat_eight_bit(trained):
    model, train, test = trained
    acts = q.calibrate_activations(model, train.samples[:64])
    a8 = eval_accuracy(q.quantize_model(model, acts, 8), test)
    a2 = eval_accuracy(q.quantize_model(model, acts, 2), test)
    assert a2 <= a8


def test_missing_activation_params(trained):
    model = trained[0]
    acts = q.calibrate_activations(model, trained[1].samples[:8])
    del acts[model.layers[1].id]
    with pytest.raises(InvalidArgument, match="missing activation"):
        q.quantize_model(model, acts)


def test_weight_codes_are_stored_in_eight_bits(trained):
    model = trained[0]
    acts = q.calibrate_activations(model, trained[1].samples[:8])
    sym = q.quantize_model(model, acts, 4, q.PER_CHANNEL, q.SYMMETRIC)
    aff = q.quantize_model(model, acts, 4, q.PER_TENSOR, q.AFFINE)
    assert all(c.dtype == np.int8 for c in sym.weight_codes.values())
    assert all(c.dtype == np.uint8 and c.max() <= 15 for c in aff.weight_codes.values())
    assert not sym.model.has_bn


def test_distinct_calibration_sources_give_distinct_params(trained):
    model, train, _ = trained
    a = q.calibrate_activations(model, train.samples[:32], "minmax")
    b = q.calibrate_activations(model, gaussian_tensor((32,) + model.input_shape, 0, 1, 0),
                                "minmax")
    assert any(a[k] != b[k] for k in a)


@pytest.mark.parametrize("gran,sym", [(q.PER_CHANNEL, q.SYMMETRIC), (q.PER_TENSOR, q.AFFINE)])
def test_qmodel_round_trip(tmp_path, trained, gran, sym):
    model = trained[0]
    acts = q.calibrate_activations(model, trained[1].samples[:8])
    qm = q.quantize_model(model, acts, 4, gran, sym)
    q.save_qmodel(qm, tmp_path / "qm")
    assert q.is_qmodel(tmp_path / "qm")
    assert q.load_qmodel(tmp_path / "qm") == qm


def test_act_params_round_trip(tmp_path, trained):
    acts = q.calibrate_activations(trained[0], trained[1].samples[:8])
    q.save_act_params(acts, tmp_path / "a.json")
    assert q.load_act_params(tmp_path / "a.json") == acts


def _mutate(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_qmodel_corruption(tmp_path, trained):
    model = trained[0]
    acts = q.calibrate_activations(model, trained[1].samples[:8])
    d = q.save_qmodel(q.quantize_model(model, acts, 4), tmp_path / "qm")
    qp = d / "qparams.json"
    original = qp.read_text()
    blob = d / "layer0.wq.bin"
    raw = blob.read_bytes()
    blob.write_bytes(bytes([100]) + raw[1:])
    with pytest.raises(ParseError, match="out of range"):
        q.load_qmodel(d)
    blob.write_bytes(raw[:-2])
    with pytest.raises(ParseError, match="truncated"):
        q.load_qmodel(d)
    blob.write_bytes(raw)
    _mutate(qp, lambda doc: doc["activations"].pop("0"))
    with pytest.raises(ParseError, match="missing activation"):
        q.load_qmodel(d)
    qp.write_text(original)
    _mutate(qp, lambda doc: doc["weights"]["0"].update(dtype="<f4"))
    with pytest.raises(ParseError, match="dtype"):
        q.load_qmodel(d)
    qp.write_text(original)
    _mutate(qp, lambda doc: doc["weights"]["0"].update(rounding="banker"))
    with pytest.raises(ParseError):
        q.load_qmodel(d)
    qp.write_text(original)
    _mutate(qp, lambda doc: doc.update(format="gzsq-qmodel/2"))
    with pytest.raises(UnsupportedVersion):
        q.load_qmodel(d)
    qp.write_text(original[: len(original) // 2])
    with pytest.raises(ParseError):
        q.load_qmodel(d)
