"""Batch-norm folding into the preceding convolution."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as g
from .errors import InvalidModel
from .tensor import gaussian_tensor, make_rng


@dataclass
class FoldReport:
    folded: dict = field(default_factory=dict)     # layer id -> bool
    deviation: dict = field(default_factory=dict)  # layer id -> max rel. deviation

    def summary(self):
        n = sum(self.folded.values())
        worst = max(self.deviation.values(), default=0.0)
        return f"folded {n} layer(s); max relative deviation {worst:.3e}"


def fold_layer(spec):
    """Return a copy of ``spec`` with its BN absorbed into weight and bias."""
    bn = spec.bn
    if bn is None:
        return spec
    if not spec.conv_like:
        raise InvalidModel(f"layer {spec.id}: batch-norm not attached to a conv-like layer")
    denom = bn.denom(np.float64)
    scale = bn.gamma.astype(np.float64) / denom
    w = spec.weight.astype(np.float64) * scale.reshape(-1, 1, 1, 1)
    b = np.zeros(spec.out_channels) if spec.bias is None else spec.bias.astype(np.float64)
    b = scale * (b - bn.running_mean.astype(np.float64)) + bn.beta.astype(np.float64)
    return g.LayerSpec(spec.id, spec.kind, w.astype(np.float32), b.astype(np.float32),
                       spec.stride, spec.padding, None, spec.activation, spec.source)


def fold_bn(model, n_probe=4, seed=0):
    """Fold every BN into its conv; returns ``(folded_model, FoldReport)``.

    The report compares each folded layer's output against the original on
    ``n_probe`` random N(0, 1) inputs, as max |a - b| / (1 + |a|).
    """
    for spec in model.layers:
        if spec.bn is not None and not spec.conv_like:
            raise InvalidModel(
                f"layer {spec.id}: batch-norm not attached to a conv-like layer")
    layers = [fold_layer(spec) for spec in model.layers]
    folded = g.ModelGraph(layers, model.input_shape, model.name, model.version)
    report = FoldReport()
    changed = [s.id for s in model.layers if s.bn is not None]
    for spec in model.layers:
        report.folded[spec.id] = spec.bn is not None
    if changed and n_probe > 0:
        x = gaussian_tensor((n_probe,) + model.input_shape, 0.0, 1.0, make_rng(seed))
        _, ta = g.forward(model, x, trace=True)
        _, tb = g.forward(folded, x, trace=True)
        for lid in changed:
            a = ta[lid].astype(np.float64)
            b = tb[lid].astype(np.float64)
            report.deviation[lid] = float(np.max(np.abs(a - b) / (1 + np.abs(a))))
    return folded, report
