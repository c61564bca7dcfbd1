"""Uniform quantization: parameters, observers, fake-quantized inference.

Scales are multiplicative: ``q = clamp(round(x * scale + zero_point))`` and
``x' = (q - zero_point) / scale``. Rounding is half away from zero. Affine
codes live in ``[0, 2^b - 1]``; symmetric codes in ``[-(2^(b-1) - 1),
2^(b-1) - 1]`` with a zero point of exactly 0.

``bits == 32`` is the disabled setting: the params are an identity and
``fake_quantize`` returns its input untouched.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import graph as g
from .errors import EmptyObserver, InvalidArgument, ParseError
from .folding import fold_bn

SYMMETRIC = "symmetric"
AFFINE = "affine"
PER_TENSOR = "per-tensor"
PER_CHANNEL = "per-channel"
IDENTITY_BITS = 32
ROUNDING = "half-away-from-zero"

QMODEL_FORMAT = "gzsq-qmodel/1"
ACTPARAMS_FORMAT = "gzsq-actparams/1"


def round_half_away(v):
    v = np.asarray(v, dtype=np.float64)
    t = np.trunc(v)
    frac = v - t
    return t + np.sign(v) * (np.abs(frac) >= 0.5)


def code_range(bits, symmetry):
    if symmetry == SYMMETRIC:
        top = 2 ** (bits - 1) - 1
        return -top, top
    return 0, 2 ** bits - 1


def _check_scheme(bits, granularity, symmetry):
    if bits != IDENTITY_BITS and not 2 <= bits <= 8:
        raise InvalidArgument(f"bits must be in [2, 8] (or {IDENTITY_BITS} to disable), got {bits}")
    if granularity not in (PER_TENSOR, PER_CHANNEL):
        raise InvalidArgument(f"unknown granularity {granularity!r}")
    if symmetry not in (SYMMETRIC, AFFINE):
        raise InvalidArgument(f"unknown symmetry {symmetry!r}")


@dataclass(frozen=True)
class QuantParams:
    """Scale/zero-point pair; per-channel params hold one entry per slice
    along ``axis``."""

    scale: np.ndarray
    zero_point: np.ndarray
    bits: int
    granularity: str = PER_TENSOR
    symmetry: str = AFFINE
    axis: int = 0

    def __post_init__(self):
        _check_scheme(self.bits, self.granularity, self.symmetry)
        scale = np.asarray(self.scale, dtype=np.float64)
        zp = np.asarray(self.zero_point, dtype=np.float64)
        if scale.shape != zp.shape:
            raise InvalidArgument("scale and zero_point shapes differ")
        if self.granularity == PER_TENSOR and scale.ndim != 0:
            raise InvalidArgument("per-tensor params must be scalars")
        if self.granularity == PER_CHANNEL and scale.ndim != 1:
            raise InvalidArgument("per-channel params must be 1-D")
        if not np.all(scale > 0) or not np.all(np.isfinite(scale)):
            raise InvalidArgument("scale must be positive and finite")
        if self.symmetry == SYMMETRIC and np.any(zp != 0):
            raise InvalidArgument("symmetric params require zero_point == 0")
        object.__setattr__(self, "scale", scale)
        object.__setattr__(self, "zero_point", zp)

    @property
    def identity(self):
        return self.bits == IDENTITY_BITS

    @property
    def qmin(self):
        return code_range(self.bits, self.symmetry)[0]

    @property
    def qmax(self):
        return code_range(self.bits, self.symmetry)[1]

    def _broadcast(self, arr, ndim):
        if self.granularity == PER_TENSOR:
            return arr
        shape = [1] * ndim
        shape[self.axis] = -1
        return arr.reshape(shape)

    def __eq__(self, other):
        if not isinstance(other, QuantParams):
            return NotImplemented
        return (self.bits == other.bits and self.granularity == other.granularity
                and self.symmetry == other.symmetry and self.axis == other.axis
                and self.scale.shape == other.scale.shape
                and self.scale.tobytes() == other.scale.tobytes()
                and self.zero_point.tobytes() == other.zero_point.tobytes())

    def to_dict(self):
        return {"scale": self.scale.tolist(), "zero_point": self.zero_point.tolist(),
                "bits": self.bits, "granularity": self.granularity,
                "symmetry": self.symmetry, "axis": self.axis, "rounding": ROUNDING}

    @classmethod
    def from_dict(cls, doc):
        if doc.get("rounding", ROUNDING) != ROUNDING:
            raise InvalidArgument(f"unsupported rounding mode {doc.get('rounding')!r}")
        return cls(np.asarray(doc["scale"], dtype=np.float64),
                   np.asarray(doc["zero_point"], dtype=np.float64),
                   int(doc["bits"]), doc["granularity"], doc["symmetry"],
                   int(doc.get("axis", 0)))

    @classmethod
    def disabled(cls):
        return cls(np.float64(1.0), np.float64(0.0), IDENTITY_BITS, PER_TENSOR, SYMMETRIC)


def compute_qparams(range_min, range_max, bits=8, granularity=PER_TENSOR,
                    symmetry=AFFINE, axis=0):
    """Params mapping ``[range_min, range_max]`` onto the full code range.

    Scalars give per-tensor params, 1-D arrays per-channel params. An empty
    range (min == max) is widened to ``[v - 0.5, v + 0.5]``.
    """
    _check_scheme(bits, granularity, symmetry)
    if bits == IDENTITY_BITS:
        return QuantParams.disabled()
    lo = np.asarray(range_min, dtype=np.float64)
    hi = np.asarray(range_max, dtype=np.float64)
    if lo.shape != hi.shape:
        raise InvalidArgument("range_min and range_max shapes differ")
    if granularity == PER_TENSOR and lo.ndim != 0:
        raise InvalidArgument("per-tensor params need scalar ranges")
    if granularity == PER_CHANNEL and lo.ndim != 1:
        raise InvalidArgument("per-channel params need 1-D ranges")
    if not (np.all(np.isfinite(lo)) and np.all(np.isfinite(hi))):
        raise InvalidArgument("range bounds must be finite")
    if np.any(hi < lo):
        raise InvalidArgument("range_max must be >= range_min")
    flat = hi == lo
    lo = np.where(flat, lo - 0.5, lo)
    hi = np.where(flat, hi + 0.5, hi)
    if symmetry == SYMMETRIC:
        top = 2 ** (bits - 1) - 1
        scale = top / np.maximum(np.abs(lo), np.abs(hi))
        zp = np.zeros_like(scale)
    else:
        scale = (2 ** bits - 1) / (hi - lo)
        zp = round_half_away(-scale * lo)
    return QuantParams(scale, zp, bits, granularity, symmetry, axis)


def quantize(x, p):
    """Integer codes (as float64 holding integers) for ``x`` under ``p``."""
    x = np.asarray(x, dtype=np.float64)
    if p.identity:
        return x.copy()
    scale = p._broadcast(p.scale, x.ndim)
    zp = p._broadcast(p.zero_point, x.ndim)
    # + 0.0 turns a rounded -0.0 into +0.0 so fake_quantize is bit-idempotent
    return np.clip(round_half_away(x * scale + zp), p.qmin, p.qmax) + 0.0


def dequantize(q, p):
    q = np.asarray(q, dtype=np.float64)
    if p.identity:
        return q.copy()
    return (q - p._broadcast(p.zero_point, q.ndim)) / p._broadcast(p.scale, q.ndim)


def fake_quantize(x, p):
    """``dequantize(quantize(x))`` in the input's float dtype."""
    x = np.asarray(x)
    if p.identity:
        return x
    dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
    return dequantize(quantize(x, p), p).astype(dtype)


# ---------------------------------------------------------------- observers

class MinMaxObserver:
    """Running global extrema."""

    kind = "minmax"

    def __init__(self):
        self.min = None
        self.max = None
        self.count = 0

    def observe(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.size == 0:
            return self
        lo, hi = float(t.min()), float(t.max())
        self.min = lo if self.min is None else min(self.min, lo)
        self.max = hi if self.max is None else max(self.max, hi)
        self.count += t.size
        return self

    def _require(self):
        if self.count == 0:
            raise EmptyObserver("observer has seen no data")

    def range(self):
        self._require()
        return self.min, self.max

    def finalize(self, bits=8, symmetry=AFFINE):
        lo, hi = self.range()
        return compute_qparams(lo, hi, bits, PER_TENSOR, symmetry)


class PerChannelMinMaxObserver(MinMaxObserver):
    """Running extrema for every slice along ``axis`` (0 = output channel
    for OIHW weights)."""

    kind = "per-channel-minmax"

    def __init__(self, axis=0):
        super().__init__()
        self.axis = axis

    def observe(self, t):
        t = np.asarray(t, dtype=np.float64)
        if t.size == 0:
            return self
        moved = np.moveaxis(t, self.axis, 0).reshape(t.shape[self.axis], -1)
        lo, hi = moved.min(axis=1), moved.max(axis=1)
        if self.min is not None and self.min.shape != lo.shape:
            raise InvalidArgument(
                f"channel count changed from {self.min.size} to {lo.size}")
        self.min = lo if self.min is None else np.minimum(self.min, lo)
        self.max = hi if self.max is None else np.maximum(self.max, hi)
        self.count += t.size
        return self

    def finalize(self, bits=8, symmetry=SYMMETRIC):
        lo, hi = self.range()
        return compute_qparams(lo, hi, bits, PER_CHANNEL, symmetry, self.axis)


class HistogramObserver:
    """Histogram of observed values over a uniform grid of ``bins`` bins.

    When a new tensor falls outside the current support, the grid is
    widened to the union and existing counts are moved to the new bin that
    contains each old bin's centre. ``finalize`` picks the bin-aligned
    sub-range with the smallest expected squared quantization error.
    """

    kind = "histogram"

    def __init__(self, bins=2048):
        if bins < 1:
            raise InvalidArgument("bins must be >= 1")
        self.bins = bins
        self.counts = np.zeros(bins, dtype=np.int64)
        self.lo = None
        self.hi = None

    @property
    def count(self):
        return int(self.counts.sum())

    def edges(self):
        return np.linspace(self.lo, self.hi, self.bins + 1)

    def _bin_index(self, values, lo, hi):
        if hi == lo:
            return np.zeros(values.shape, dtype=np.int64)
        idx = np.floor((values - lo) / (hi - lo) * self.bins).astype(np.int64)
        return np.clip(idx, 0, self.bins - 1)

    def observe(self, t):
        t = np.asarray(t, dtype=np.float64).reshape(-1)
        if t.size == 0:
            return self
        if not np.all(np.isfinite(t)):
            raise InvalidArgument("histogram observer received non-finite values")
        lo, hi = float(t.min()), float(t.max())
        if self.lo is None:
            self.lo, self.hi = lo, hi
        elif lo < self.lo or hi > self.hi:
            new_lo, new_hi = min(lo, self.lo), max(hi, self.hi)
            e = self.edges()
            centres = (e[:-1] + e[1:]) / 2
            moved = np.zeros(self.bins, dtype=np.int64)
            np.add.at(moved, self._bin_index(centres, new_lo, new_hi), self.counts)
            self.counts = moved
            self.lo, self.hi = new_lo, new_hi
        np.add.at(self.counts, self._bin_index(t, self.lo, self.hi), 1)
        return self

    def stride(self):
        return max(1, self.bins // 128)

    def candidates(self):
        """Bin-edge indices scanned by :meth:`finalize_range`."""
        return np.unique(np.append(np.arange(0, self.bins + 1, self.stride()), self.bins))

    def finalize_range(self, bits=8, symmetry=AFFINE):
        """Chosen ``(lo, hi)`` sub-range of the support.

        Every pair of candidate edges ``s < t`` is scored; the first pair in
        ``(s, t)`` order with the smallest error wins. Symmetric schemes
        score the range ``[-m, m]`` with ``m`` the larger bound magnitude
        and return it in that form.
        """
        if self.count == 0:
            raise EmptyObserver("observer has seen no data")
        if self.hi == self.lo:
            return self.lo, self.hi
        e = self.edges()
        cand = self.candidates()
        s, t = np.meshgrid(cand, cand, indexing="ij")
        keep = s < t
        s, t = s[keep], t[keep]
        if symmetry == SYMMETRIC:
            m = np.maximum(np.abs(e[s]), np.abs(e[t]))
            levels, inverse = np.unique(m, return_inverse=True)
            scores = np.concatenate([
                histogram_error(self.counts, e, -lv, lv, bits, AFFINE, symmetric=True)
                for lv in levels])
            k = int(np.argmin(scores[inverse]))
            return -float(m[k]), float(m[k])
        k = int(np.argmin(self._aligned_error(s, t, bits)))
        return float(e[s[k]]), float(e[t[k]])

    def _aligned_error(self, s, t, bits):
        # Candidate bounds sit on bin edges, so every bin is either fully
        # inside or fully outside; the clipping integrals reduce to moment
        # sums over whole bins.
        c = self.counts.astype(np.float64)
        j = np.arange(self.bins, dtype=np.float64)
        w = (self.hi - self.lo) / self.bins
        pre = [np.concatenate([[0.0], np.cumsum(c * j ** p)]) for p in range(3)]
        total = [q[-1] for q in pre]
        sf = s.astype(np.float64)
        tf = t.astype(np.float64)
        p0, p1, p2 = (q[s] for q in pre)                 # bins j < s
        a0, a1, a2 = (tot - q[t] for tot, q in zip(total, pre))  # bins j >= t
        below = 3 * (sf * sf * p0 - 2 * sf * p1 + p2) - 3 * (sf * p0 - p1) + p0
        above = 3 * (a2 - 2 * tf * a1 + tf * tf * a0) + 3 * (a1 - tf * a0) + a0
        inside = pre[0][t] - pre[0][s]
        step = (tf - sf) * w / (2 ** bits - 1)
        return inside * step * step / 12.0 + w * w / 3.0 * (above + below)

    def finalize(self, bits=8, symmetry=AFFINE):
        lo, hi = self.finalize_range(bits, symmetry)
        return compute_qparams(lo, hi, bits, PER_TENSOR, symmetry)


def histogram_error(counts, edges, lo, hi, bits, symmetry, symmetric=None):
    """Expected squared error (summed over elements) of quantizing the
    histogram density onto the grid implied by ``[lo, hi]``.

    Each bin is treated as uniform mass. Inside the clip range the error is
    the rounding-noise variance ``step^2 / 12``; outside it is the squared
    distance to the nearest clip bound, integrated exactly. ``hi`` may be a
    vector of candidate upper bounds.
    """
    hi = np.atleast_1d(np.asarray(hi, dtype=np.float64))[:, None]
    lo = np.full_like(hi, lo)
    if symmetric is None:
        symmetric = symmetry == SYMMETRIC
    if symmetric:
        m = np.maximum(np.abs(lo), np.abs(hi))
        lo, hi = -m, m
        step = m / (2 ** (bits - 1) - 1)
    else:
        step = (hi - lo) / (2 ** bits - 1)
    u = edges[None, :-1]
    v = edges[None, 1:]
    w = v - u
    c = counts[None, :].astype(np.float64)
    inside = np.clip(np.minimum(v, hi) - np.maximum(u, lo), 0.0, None)
    err = c * (inside / w) * step * step / 12.0
    a = np.maximum(u, hi)
    above = np.where(v > hi, ((v - hi) ** 3 - (a - hi) ** 3) / (3.0 * w), 0.0)
    b = np.minimum(v, lo)
    below = np.where(u < lo, ((lo - u) ** 3 - (lo - b) ** 3) / (3.0 * w), 0.0)
    err = err + c * (above + below)
    return err.sum(axis=1)


OBSERVERS = {"minmax": MinMaxObserver, "histogram": HistogramObserver}


def make_observer(kind, bins=2048):
    if kind == "minmax":
        return MinMaxObserver()
    if kind == "histogram":
        return HistogramObserver(bins)
    if kind == "per-channel-minmax":
        return PerChannelMinMaxObserver()
    raise InvalidArgument(f"unknown observer {kind!r}; choose minmax or histogram")


# ---------------------------------------------------------------- calibration

def _batches(model, calib_data):
    if isinstance(calib_data, np.ndarray):
        calib_data = [calib_data]
    batches = [g.check_input(model, b) for b in calib_data]
    if not batches:
        raise InvalidArgument("no calibration data")
    return batches


def calibrate_activations(model, calib_data, observer_kind="histogram", bits=8,
                          symmetry=AFFINE, bins=2048):
    """Per-tensor activation params for the model input (key ``"input"``)
    and every layer output, from one traced forward pass per batch."""
    batches = _batches(model, calib_data)
    if bits == IDENTITY_BITS:
        return {k: QuantParams.disabled() for k in ["input"] + [s.id for s in model.layers]}
    observers = {"input": make_observer(observer_kind, bins)}
    for spec in model.layers:
        observers[spec.id] = make_observer(observer_kind, bins)
    for batch in batches:
        _, trace = g.forward(model, batch, trace=True)
        observers["input"].observe(batch)
        for lid, t in trace:
            observers[lid].observe(t)
    return {k: obs.finalize(bits, symmetry) for k, obs in observers.items()}


def activation_ranges(act_params):
    """Representable ``(lo, hi)`` per key, for reports."""
    out = {}
    for k, p in act_params.items():
        if p.identity:
            continue
        out[str(k)] = [float(dequantize(p.qmin, p)), float(dequantize(p.qmax, p))]
    return out


def save_act_params(act_params, path):
    doc = {"format": ACTPARAMS_FORMAT,
           "activations": {str(k): p.to_dict() for k, p in act_params.items()}}
    Path(path).write_text(json.dumps(doc, indent=1))


def _params_table(doc, path):
    out = {}
    try:
        for k, v in doc.items():
            out["input" if k == "input" else int(k)] = QuantParams.from_dict(v)
    except (KeyError, TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed quantization params: {exc}", path=str(path)) from exc
    return out


def _read_json(path, what):
    path = Path(path)
    if not path.is_file():
        raise ParseError(f"missing {what}", path=str(path))
    try:
        doc = json.loads(path.read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed {what}: {exc.msg}", path=str(path), offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError(f"{what} root must be an object", path=str(path), offset=0)
    return doc


def load_act_params(path):
    doc = _read_json(path, "activation params")
    g.check_format(doc, ACTPARAMS_FORMAT, path)
    if not isinstance(doc.get("activations"), dict):
        raise ParseError("activation params need an 'activations' object", path=str(path))
    return _params_table(doc["activations"], path)


# ---------------------------------------------------------------- model

@dataclass
class QuantizedModel:
    """Float graph plus integer weight codes and activation params.

    ``model`` is the graph the codes were taken from (BN folded when weights
    are quantized); ``sim_model`` carries the dequantized weights used for
    simulated inference.
    """

    model: g.ModelGraph
    weight_params: dict
    weight_codes: dict
    act_params: dict
    sim_model: g.ModelGraph

    def __eq__(self, other):
        if not isinstance(other, QuantizedModel):
            return NotImplemented
        return (self.model == other.model and self.sim_model == other.sim_model
                and self.weight_params == other.weight_params
                and self.act_params == other.act_params
                and self.weight_codes.keys() == other.weight_codes.keys()
                and all(np.array_equal(self.weight_codes[k], other.weight_codes[k])
                        for k in self.weight_codes))

    @property
    def input_shape(self):
        return self.model.input_shape


def _code_dtype(p):
    return np.int8 if p.symmetry == SYMMETRIC else np.uint8


def _sim_model(model, weight_params, weight_codes):
    layers = []
    for spec in model.layers:
        p = weight_params.get(spec.id)
        if p is not None and not p.identity:
            w = dequantize(weight_codes[spec.id].astype(np.float64), p).astype(np.float32)
            spec = g.LayerSpec(spec.id, spec.kind, w, spec.bias, spec.stride, spec.padding,
                               spec.bn, spec.activation, spec.source)
        layers.append(spec)
    return g.ModelGraph(layers, model.input_shape, model.name, model.version)


def _check_act_params(model, act_params):
    missing = [k for k in ["input"] + [s.id for s in model.layers] if k not in act_params]
    if missing:
        raise InvalidArgument(f"missing activation params for {missing}")


def quantize_model(model, act_params, weight_bits=8, weight_granularity=PER_CHANNEL,
                   weight_symmetry=SYMMETRIC):
    """Quantize every conv-like layer's weights (biases stay float).

    Live BN is folded first unless ``weight_bits`` is 32, in which case the
    weights are left exactly as they are.
    """
    _check_scheme(weight_bits, weight_granularity, weight_symmetry)
    _check_act_params(model, act_params)
    if weight_bits != IDENTITY_BITS and model.has_bn:
        model, _ = fold_bn(model, n_probe=0)
    params, codes = {}, {}
    for spec in model.layers:
        if not spec.conv_like:
            continue
        if weight_bits == IDENTITY_BITS:
            params[spec.id] = QuantParams.disabled()
            continue
        w = spec.weight.astype(np.float64)
        if weight_granularity == PER_CHANNEL:
            obs = PerChannelMinMaxObserver(axis=0).observe(w)
            p = compute_qparams(obs.min, obs.max, weight_bits, PER_CHANNEL, weight_symmetry)
        else:
            p = compute_qparams(float(w.min()), float(w.max()), weight_bits, PER_TENSOR,
                                weight_symmetry)
        params[spec.id] = p
        codes[spec.id] = quantize(w, p).astype(_code_dtype(p))
    act = {k: act_params[k] for k in ["input"] + [s.id for s in model.layers]}
    return QuantizedModel(model, params, codes, act, _sim_model(model, params, codes))


def quantized_forward(qm, x):
    """Simulated integer inference: weights are already fake-quantized and
    every layer boundary (including the input) is fake-quantized."""
    x = g.check_input(qm.sim_model, x)
    act = qm.act_params
    _check_act_params(qm.sim_model, act)
    h = fake_quantize(x.astype(np.float32, copy=False), act["input"])
    return g.run_layers(qm.sim_model, h, transform=lambda lid, t: fake_quantize(t, act[lid])).output


def predict(model_or_qm, x):
    if isinstance(model_or_qm, QuantizedModel):
        return quantized_forward(model_or_qm, x)
    return g.forward(model_or_qm, x)[0]


def save_qmodel(qm, path):
    directory = Path(path)
    g.save_model(qm.model, directory)
    weights = {}
    for lid, p in qm.weight_params.items():
        entry = p.to_dict()
        if lid in qm.weight_codes:
            code = qm.weight_codes[lid]
            name = f"layer{lid}.wq.bin"
            (directory / name).write_bytes(code.tobytes())
            entry.update({"blob": name, "dtype": np.dtype(code.dtype).str,
                          "shape": list(code.shape)})
        weights[str(lid)] = entry
    doc = {"format": QMODEL_FORMAT, "weights": weights,
           "activations": {str(k): p.to_dict() for k, p in qm.act_params.items()}}
    (directory / "qparams.json").write_text(json.dumps(doc, indent=1))
    return directory


def is_qmodel(path):
    return (Path(path) / "qparams.json").is_file()


def load_qmodel(path):
    directory = Path(path)
    model = g.load_model(directory)
    qpath = directory / "qparams.json"
    doc = _read_json(qpath, "qparams.json")
    g.check_format(doc, QMODEL_FORMAT, qpath)
    if not isinstance(doc.get("weights"), dict) or not isinstance(doc.get("activations"), dict):
        raise ParseError("qparams.json needs 'weights' and 'activations' objects", path=str(qpath))
    params = _params_table(doc["weights"], qpath)
    codes = {}
    for key, entry in doc["weights"].items():
        if not isinstance(entry, dict) or "blob" not in entry:
            continue
        lid = int(key)
        dtype = entry.get("dtype")
        if dtype not in ("|i1", "|u1"):
            raise ParseError(f"layer {lid}: unsupported code dtype {dtype!r}", path=str(qpath))
        codes[lid] = g._read_blob(directory, entry, dtype=dtype)
        p = params[lid]
        if np.any(codes[lid] < p.qmin) or np.any(codes[lid] > p.qmax):
            raise ParseError(f"layer {lid}: weight code out of range", path=str(directory / entry["blob"]))
    acts = _params_table(doc["activations"], qpath)
    try:
        _check_act_params(model, acts)
        for spec in model.layers:
            if spec.conv_like and (spec.id not in params
                                   or (not params[spec.id].identity and spec.id not in codes)):
                raise InvalidArgument(f"layer {spec.id} has no weight params")
    except InvalidArgument as exc:
        raise ParseError(str(exc), path=str(qpath)) from exc
    return QuantizedModel(model, params, codes, acts, _sim_model(model, params, codes))
