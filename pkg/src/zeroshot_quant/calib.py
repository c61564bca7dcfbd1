"""BN-statistic substitutes estimated from weights alone.

Starting from a unit-Gaussian input, per-channel (mean, std) pairs are
propagated through the network: each conv-like layer adds its weight mean
and combines variances, adjusting channel counts between layers with a
configurable resize rule when they differ.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as g
from .errors import InvalidArgument, ParseError
from .tensor import ChannelStats, weight_channel_stats

SUBSTITUTES_FORMAT = "gzsq-substitutes/1"

RULES = ("min", "mean-min", "mean+min", "mean", "max-mean", "max+mean", "max", "repeat")


def _fmean(v):
    return math.fsum(v) / len(v)


def apply_rule(rule, values, target_c):
    """Resize ``values`` to ``target_c`` entries with one of :data:`RULES`."""
    v = np.asarray(values, dtype=np.float64)
    if rule == "repeat":
        return np.resize(v, target_c)
    lo = float(v.min())
    hi = float(v.max())
    mu = _fmean(v.tolist())
    scalar = {
        "min": lo,
        "mean-min": mu - lo,
        "mean+min": mu + lo,
        "mean": mu,
        "max-mean": hi - mu,
        "max+mean": hi + mu,
        "max": hi,
    }
    if rule not in scalar:
        raise InvalidArgument(f"unknown resize rule {rule!r}; choose from {RULES}")
    return np.full(target_c, scalar[rule], dtype=np.float64)


@dataclass(frozen=True)
class EsaPolicy:
    expansion_mean: str = "repeat"
    expansion_std: str = "repeat"
    contraction_mean: str = "mean-min"
    contraction_std: str = "mean-min"

    def __post_init__(self):
        for name in ("expansion_mean", "expansion_std", "contraction_mean", "contraction_std"):
            if getattr(self, name) not in RULES:
                raise InvalidArgument(f"{name}: unknown rule {getattr(self, name)!r}")

    def to_dict(self):
        return {"expansion_mean": self.expansion_mean, "expansion_std": self.expansion_std,
                "contraction_mean": self.contraction_mean,
                "contraction_std": self.contraction_std}


@dataclass
class PolicyTable:
    """Default policy plus per-layer overrides keyed by layer id."""

    default: EsaPolicy = field(default_factory=EsaPolicy)
    layers: dict = field(default_factory=dict)

    def for_layer(self, layer_id):
        return self.layers.get(layer_id, self.default)

    @classmethod
    def from_dict(cls, doc):
        default = EsaPolicy(**doc.get("default", {}))
        layers = {int(k): EsaPolicy(**{**default.to_dict(), **v})
                  for k, v in doc.get("layers", {}).items()}
        return cls(default, layers)

    def to_dict(self):
        return {"default": self.default.to_dict(),
                "layers": {str(k): v.to_dict() for k, v in sorted(self.layers.items())}}


def load_policy(path):
    try:
        doc = json.loads(Path(path).read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed policy file: {exc.msg}", path=str(path),
                         offset=exc.pos) from exc
    try:
        return PolicyTable.from_dict(doc)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ParseError(f"malformed policy file: {exc}", path=str(path)) from exc


def esa_adjust(stats, target_c, policy=None):
    """Resize a stats vector to ``target_c`` channels (expansion/contraction)."""
    policy = policy or EsaPolicy()
    if target_c < 1:
        raise InvalidArgument(f"target channel count must be >= 1, got {target_c}")
    if len(stats) == 0:
        raise InvalidArgument("cannot adjust empty statistics")
    if len(stats) == target_c:
        return stats
    if target_c > len(stats):
        rules = (policy.expansion_mean, policy.expansion_std)
    else:
        rules = (policy.contraction_mean, policy.contraction_std)
    mean = apply_rule(rules[0], stats.mean, target_c)
    std = np.maximum(apply_rule(rules[1], stats.std, target_c), 0.0)
    return ChannelStats(mean, std)


def se_step(prev, w_stats, fold_bias=None):
    """One propagation step: mean adds, variances add; bias shifts the mean."""
    if len(prev) != len(w_stats):
        raise InvalidArgument(
            f"channel mismatch {len(prev)} vs {len(w_stats)}: resize the statistics first")
    mean = w_stats.mean + prev.mean
    if fold_bias is not None:
        fold_bias = np.asarray(fold_bias, dtype=np.float64).reshape(-1)
        if fold_bias.size != len(prev):
            raise InvalidArgument(
                f"bias length {fold_bias.size} does not match {len(prev)} channels")
        mean = mean + fold_bias
    std = np.sqrt(w_stats.std * w_stats.std + prev.std * prev.std)
    return ChannelStats(mean, std)


@dataclass
class SubstituteSet:
    entries: list  # [(layer id, ChannelStats)]
    folded_before: bool = False

    def __getitem__(self, layer_id):
        for lid, st in self.entries:
            if lid == layer_id:
                return st
        raise KeyError(layer_id)

    def __contains__(self, layer_id):
        return any(lid == layer_id for lid, _ in self.entries)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [lid for lid, _ in self.entries]

    def __eq__(self, other):
        if not isinstance(other, SubstituteSet):
            return NotImplemented
        return (self.folded_before == other.folded_before
                and self.ids() == other.ids()
                and all(a == b for (_, a), (_, b) in zip(self.entries, other.entries)))

    def to_dict(self):
        return {"format": SUBSTITUTES_FORMAT, "folded_before": self.folded_before,
                "layers": [{"id": lid, "mean": st.mean.tolist(), "std": st.std.tolist()}
                           for lid, st in self.entries]}

    @classmethod
    def from_dict(cls, doc, path=None):
        g.check_format(doc, SUBSTITUTES_FORMAT, path)
        try:
            entries = [(int(e["id"]), ChannelStats(e["mean"], e["std"]))
                       for e in doc["layers"]]
            return cls(entries, bool(doc.get("folded_before", False)))
        except (KeyError, TypeError, ValueError, AttributeError) as exc:
            raise ParseError(f"malformed substitute set: {exc}", path=path) from exc


def save_substitutes(subs, path):
    Path(path).write_text(json.dumps(subs.to_dict(), indent=1))


def load_substitutes(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("missing substitute file", path=str(path))
    try:
        doc = json.loads(path.read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed substitute file: {exc.msg}", path=str(path),
                         offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("substitute file root must be an object", path=str(path), offset=0)
    return SubstituteSet.from_dict(doc, path=str(path))


def stat_bearing(spec):
    return spec.conv_like or spec.kind == g.ADD


def estimate_substitutes(model, policies=None, folded_before=False, include_bias=True):
    """Walk the model and build one substitute per conv-like or add layer.

    Layers with a live BN use (beta, |gamma|) directly. Other conv-like layers
    propagate the incoming statistics (unit Gaussian for the first layer).
    ``include_bias`` adds each layer's bias to its mean, which is how folded
    BN shifts are accounted for.
    """
    if isinstance(policies, EsaPolicy):
        policies = PolicyTable(default=policies)
    policies = policies or PolicyTable()
    if folded_before and model.has_bn:
        raise InvalidArgument("folded_before requires a BN-free (folded) model")
    diags = g.validate_graph(model)
    if diags:
        raise InvalidArgument("invalid model: " + "; ".join(diags))
    shapes = dict(zip([s.id for s in model.layers], g.infer_shapes(model)))
    cur = None
    by_id = {}
    entries = []
    in_shape = model.input_shape
    for spec in model.layers:
        try:
            if spec.conv_like:
                o = spec.out_channels
                if spec.bn is not None:
                    sub = ChannelStats(spec.bn.beta.astype(np.float64),
                                       np.abs(spec.bn.gamma.astype(np.float64)))
                else:
                    prev = (ChannelStats.constant(0.0, 1.0, o) if cur is None
                            else esa_adjust(cur, o, policies.for_layer(spec.id)))
                    bias = spec.bias if include_bias else None
                    sub = se_step(prev, weight_channel_stats(spec.weight), bias)
                cur = sub
                entries.append((spec.id, sub))
            elif spec.kind == g.ADD:
                other = by_id.get(spec.source)
                if cur is None or other is None:
                    raise InvalidArgument("add operand has no propagated statistics")
                sub = ChannelStats(cur.mean + other.mean,
                                   np.sqrt(cur.std * cur.std + other.std * other.std))
                cur = sub
                entries.append((spec.id, sub))
            elif spec.kind == g.FLATTEN and cur is not None:
                _, h, w = in_shape
                cur = ChannelStats(np.repeat(cur.mean, h * w), np.repeat(cur.std, h * w))
        except InvalidArgument as exc:
            raise InvalidArgument(f"layer {spec.id}: {exc}") from exc
        if cur is not None:
            by_id[spec.id] = cur
        in_shape = shapes[spec.id]
    return SubstituteSet(entries, folded_before=folded_before)
