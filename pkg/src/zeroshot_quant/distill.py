"""Calibration-data synthesis by matching activation statistics.

A batch initialised from N(0, 1) is optimised with Adam so that the
per-channel statistics of every traced activation approach the substitute
set, under the Z-score distance (or one of the ablation distances).
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import graph as g
from .autodiff import Loss, LossValue, Tape, channel_moments, channel_moments_backward
from .calib import stat_bearing
from .errors import InvalidArgument, NumericFault, ParseError
from .optim import Adam
from .tensor import ChannelStats, gaussian_tensor, make_rng

DISTILLED_FORMAT = "gzsq-distilled/1"

LOSS_KINDS = ("zscore", "l1", "l1mu", "l1sigma", "l2", "l2mu", "l2sigma", "kl")


@dataclass
class DistillConfig:
    iterations: int = 500
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch: int = 8
    seed: int = 0
    guard: float = 1e-6
    loss_kind: str = "zscore"

    def __post_init__(self):
        if self.iterations < 1:
            raise InvalidArgument("iterations must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidArgument("learning_rate must be > 0")
        if not self.guard > 0:
            raise InvalidArgument("guard must be > 0")
        if self.batch < 1:
            raise InvalidArgument("batch must be >= 1")
        if self.loss_kind not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss kind {self.loss_kind!r}; choose from {LOSS_KINDS}")


def stat_distance(kind, mu_u, sig_u, mu_v, sig_v, s=1e-6):
    """Distance between two stats vectors and its gradient w.r.t. (mu_u, sig_u).

    Channel-wise distances are averaged over channels; ``kl`` compares the
    std vectors as whole (renormalised) distributions.
    """
    c = mu_u.size
    dmu = mu_u - mu_v
    dsig = sig_u - sig_v
    zero = np.zeros_like(mu_u)
    if kind == "zscore":
        denom = np.sqrt((sig_u + s) ** 2 + (sig_v + s) ** 2)
        per = np.abs(dmu) / denom
        g_mu = np.sign(dmu) / denom / c
        g_sig = -np.abs(dmu) * (sig_u + s) / denom ** 3 / c
        return float(per.mean()), g_mu, g_sig
    if kind in ("l1", "l1mu", "l1sigma"):
        use_mu = kind != "l1sigma"
        use_sig = kind != "l1mu"
        value = (np.abs(dmu).mean() if use_mu else 0.0) + (np.abs(dsig).mean() if use_sig else 0.0)
        return (float(value), np.sign(dmu) / c if use_mu else zero,
                np.sign(dsig) / c if use_sig else zero)
    if kind in ("l2", "l2mu", "l2sigma"):
        use_mu = kind != "l2sigma"
        use_sig = kind != "l2mu"
        value = ((dmu ** 2).mean() if use_mu else 0.0) + ((dsig ** 2).mean() if use_sig else 0.0)
        return (float(value), 2 * dmu / c if use_mu else zero,
                2 * dsig / c if use_sig else zero)
    if kind == "kl":
        a = sig_u + s
        b = sig_v + s
        p = a / a.sum()
        q = b / b.sum()
        log_ratio = np.log(p / q)
        kl = float((p * log_ratio).sum())
        d_kl = (log_ratio - kl) / a.sum()
        return 1.0 - 0.5 * kl, zero, -0.5 * d_kl
    raise InvalidArgument(f"unknown loss kind {kind!r}")


def zscore_loss(u, v, s=1e-6):
    """Channel-averaged |mu_u - mu_v| / sqrt((sigma_u + s)^2 + (sigma_v + s)^2)."""
    if len(u) != len(v):
        raise InvalidArgument(f"stats length mismatch: {len(u)} vs {len(v)}")
    if not s > 0:
        raise InvalidArgument("guard s must be > 0")
    return stat_distance("zscore", u.mean, u.std, v.mean, v.std, s)[0]


class StatsMatchLoss(Loss):
    """Sum over traced layers of a stats distance to the substitutes, plus a
    unit-Gaussian prior on the input's per-channel statistics."""

    def __init__(self, model, subs, kind="zscore", s=1e-6, prior=True):
        if kind not in LOSS_KINDS:
            raise InvalidArgument(f"unknown loss kind {kind!r}")
        self.kind = kind
        self.s = s
        self.prior = prior
        self.targets = []
        known = set(subs.ids())
        model_ids = {spec.id for spec in model.layers}
        for spec in model.layers:
            if stat_bearing(spec):
                if spec.id not in known:
                    raise InvalidArgument(f"no substitute for traced layer {spec.id}")
                st = subs[spec.id]
                if len(st) != spec_channels(model, spec):
                    raise InvalidArgument(
                        f"substitute for layer {spec.id} has {len(st)} channels, "
                        f"layer has {spec_channels(model, spec)}")
                self.targets.append((spec.id, st))
        extra = known - model_ids
        if extra:
            raise InvalidArgument(f"substitutes reference unknown layers {sorted(extra)}")
        self.layer_values = {}

    def evaluate(self, x, output, trace):
        total = LossValue(0.0)
        self.layer_values = {}
        for lid, st in self.targets:
            t = trace[lid]
            mu, sig = channel_moments(t)
            val, g_mu, g_sig = stat_distance(self.kind, mu, sig, st.mean, st.std, self.s)
            self.layer_values[lid] = val
            grad = channel_moments_backward(t, mu, sig, g_mu, g_sig, self.s)
            total = total + LossValue(val, d_post={lid: grad})
        if self.prior:
            mu, sig = channel_moments(x)
            c = mu.size
            val, g_mu, g_sig = stat_distance(self.kind, mu, sig, np.zeros(c), np.ones(c), self.s)
            self.layer_values["input"] = val
            grad = channel_moments_backward(x, mu, sig, g_mu, g_sig, self.s)
            total = total + LossValue(val, d_input=grad)
        return total


class BNStatsLoss(Loss):
    """Squared distance between conv-output statistics and stored BN
    statistics (the BN-statistics baseline); no input prior.

    ``targets`` maps layer id -> (running_mean, running_std). They are
    matched at each layer's raw conv output, so on a folded model the taps
    already include the folded scale and shift.
    """

    def __init__(self, targets):
        if not targets:
            raise InvalidArgument("BN-statistics loss needs at least one BN layer")
        self.targets = dict(targets)
        self.layer_values = {}

    def evaluate(self, x, output, trace):
        total = LossValue(0.0)
        for lid, (rm, rs) in self.targets.items():
            t = trace.pre_bn[lid]
            mu, sig = channel_moments(t)
            val, g_mu, g_sig = stat_distance("l2", mu, sig, rm, rs)
            self.layer_values[lid] = val
            grad = channel_moments_backward(t, mu, sig, g_mu, g_sig)
            total = total + LossValue(val, d_pre_bn={lid: grad})
        return total


def bn_targets(model):
    return {spec.id: (spec.bn.running_mean.astype(np.float64),
                      spec.bn.running_std.astype(np.float64))
            for spec in model.layers if spec.bn is not None}


def spec_channels(model, spec):
    shapes = dict(zip([s.id for s in model.layers], g.infer_shapes(model)))
    return shapes[spec.id][0]


def distill_loss(model, y, subs, loss_kind="zscore", s=1e-6):
    y = g.check_input(model, y).astype(np.float64)
    loss = StatsMatchLoss(model, subs, loss_kind, s)
    fp = g.run_layers(model, y)
    return loss.evaluate(y, fp.output, fp.trace(model)).value


@dataclass
class DistilledData:
    data: np.ndarray
    loss_history: list
    initial_loss: float
    final_loss: float
    layer_losses: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __eq__(self, other):
        if not isinstance(other, DistilledData):
            return NotImplemented
        return (self.data.dtype == other.data.dtype and self.data.shape == other.data.shape
                and self.data.tobytes() == other.data.tobytes()
                and self.loss_history == other.loss_history
                and self.initial_loss == other.initial_loss
                and self.final_loss == other.final_loss
                and self.layer_losses == other.layer_losses
                and self.config == other.config)


def optimize_input(model, loss, config):
    """Adam on the input batch for ``config.iterations`` steps.

    ``loss_history[t]`` is the loss after update ``t + 1``; the returned data
    is the best iterate seen, including the initial one.
    """
    rng = make_rng(config.seed)
    y = gaussian_tensor((config.batch,) + model.input_shape, 0.0, 1.0, rng).astype(np.float64)
    opt = Adam(config.learning_rate, config.beta1, config.beta2, config.adam_eps)
    params = {"y": y}

    def evaluate(step):
        tape = Tape(model, params["y"], loss)
        if not np.isfinite(tape.loss.value):
            raise NumericFault(f"non-finite loss at iteration {step}", where=step)
        return tape

    tape = evaluate(0)
    initial = tape.loss.value
    best = initial
    best_y = y.copy()
    best_layers = dict(getattr(loss, "layer_values", {}))
    history = []
    for step in range(config.iterations):
        grads = tape.backward()
        opt.step(params, {"y": grads.d_input})
        try:
            tape = evaluate(step + 1)
        except NumericFault as exc:
            raise NumericFault(str(exc), where=step + 1) from exc
        value = tape.loss.value
        history.append(value)
        if value < best:
            best = value
            best_y = params["y"].copy()
            best_layers = dict(getattr(loss, "layer_values", {}))
    return DistilledData(best_y.astype(np.float32), history, initial, best,
                         {str(k): v for k, v in best_layers.items()}, asdict(config))


def distill(model, subs, config=None):
    """Synthesize calibration data whose activation statistics match ``subs``."""
    config = config or DistillConfig()
    loss = StatsMatchLoss(model, subs, config.loss_kind, config.guard)
    return optimize_input(model, loss, config)


def distill_bn_baseline(model, targets, config=None):
    """Baseline synthesis against stored BN statistics (squared distance)."""
    config = config or DistillConfig()
    return optimize_input(model, BNStatsLoss(targets), config)


def save_distilled(dd, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "data.bin").write_bytes(np.asarray(dd.data, dtype="<f4").tobytes())
    meta = {"format": DISTILLED_FORMAT, "shape": list(dd.data.shape),
            "seed": dd.config.get("seed"), "config": dd.config,
            "initial_loss": dd.initial_loss, "final_loss": dd.final_loss,
            "layer_losses": dd.layer_losses, "loss_history": dd.loss_history}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_distilled(path):
    directory = Path(path)
    mpath = directory / "meta.json"
    if not mpath.is_file():
        raise ParseError("missing meta.json", path=str(mpath))
    try:
        meta = json.loads(mpath.read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed meta.json: {exc.msg}", path=str(mpath),
                         offset=exc.pos) from exc
    if not isinstance(meta, dict):
        raise ParseError("meta.json root must be an object", path=str(mpath), offset=0)
    g.check_format(meta, DISTILLED_FORMAT, mpath)
    try:
        shape = tuple(int(s) for s in meta["shape"])
        data = g._read_blob(directory, {"blob": "data.bin", "shape": shape})
        return DistilledData(data, list(meta["loss_history"]), meta["initial_loss"],
                             meta["final_loss"], dict(meta.get("layer_losses", {})),
                             dict(meta.get("config", {})))
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ParseError):
            raise
        raise ParseError(f"malformed meta.json: {exc}", path=str(mpath)) from exc


def stats_of(t):
    mu, sig = channel_moments(np.asarray(t, dtype=np.float64))
    return ChannelStats(mu, sig)
