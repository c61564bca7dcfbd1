"""Reverse-mode gradients through a ModelGraph.

A loss is any :class:`Loss` subclass: it evaluates a scalar from the model
output and activation trace and returns the adjoints of the taps it read.
The tape then pulls those adjoints back through every layer to the input
(and, on request, to the weights). Plain callables are rejected, since their
adjoint is unknown.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graph as g
from .errors import InvalidArgument, NumericFault, UnsupportedOp
from .tensor import make_rng

STD_GUARD = 1e-6


@dataclass
class LossValue:
    value: float
    d_output: np.ndarray | None = None
    d_post: dict = field(default_factory=dict)    # layer id -> adjoint of f^n
    d_pre_bn: dict = field(default_factory=dict)  # layer id -> adjoint of conv output
    d_input: np.ndarray | None = None             # direct dependence on the input

    def __add__(self, other):
        def merge(a, b):
            out = dict(a)
            for k, v in b.items():
                out[k] = out[k] + v if k in out else v
            return out

        def add(a, b):
            if a is None:
                return b
            return a if b is None else a + b

        return LossValue(self.value + other.value, add(self.d_output, other.d_output),
                         merge(self.d_post, other.d_post),
                         merge(self.d_pre_bn, other.d_pre_bn),
                         add(self.d_input, other.d_input))


class Loss:
    """Base class for differentiable objectives."""

    def evaluate(self, x, output, trace) -> LossValue:
        raise NotImplementedError

    def __call__(self, x, output, trace):
        return self.evaluate(x, output, trace).value

    def __add__(self, other):
        return SumOfLosses([self, other])


class SumOfLosses(Loss):
    def __init__(self, terms):
        self.terms = list(terms)

    def evaluate(self, x, output, trace):
        total = None
        for term in self.terms:
            v = term.evaluate(x, output, trace)
            total = v if total is None else total + v
        return total


class SumOutput(Loss):
    def evaluate(self, x, output, trace):
        return LossValue(float(output.sum()), d_output=np.ones_like(output))


class LinearLoss(Loss):
    """<direction, output> plus optional <d_k, f^k> for traced layers."""

    def __init__(self, direction, tap_directions=None):
        self.direction = direction
        self.tap_directions = dict(tap_directions or {})

    def evaluate(self, x, output, trace):
        d = self.direction.astype(output.dtype)
        value = float((d * output).sum())
        d_post = {}
        for lid, dk in self.tap_directions.items():
            dk = dk.astype(output.dtype)
            value += float((dk * trace[lid]).sum())
            d_post[lid] = dk
        return LossValue(value, d_output=d, d_post=d_post)


class QuadraticLoss(Loss):
    def __init__(self, target):
        self.target = np.asarray(target, dtype=np.float64)

    def evaluate(self, x, output, trace):
        r = output - self.target
        return LossValue(0.5 * float((r * r).sum()), d_output=r)


class CrossEntropyLoss(Loss):
    """Mean softmax cross-entropy of (N, K, 1, 1) logits against labels."""

    def __init__(self, labels):
        self.labels = np.asarray(labels, dtype=np.int64)

    def evaluate(self, x, output, trace):
        logits = output.reshape(output.shape[0], -1)
        shifted = logits - logits.max(axis=1, keepdims=True)
        logp = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
        n = logits.shape[0]
        value = -float(logp[np.arange(n), self.labels].mean())
        grad = np.exp(logp)
        grad[np.arange(n), self.labels] -= 1.0
        return LossValue(value, d_output=(grad / n).reshape(output.shape))


def channel_moments(t):
    """Per-channel mean and population std of an NCHW tensor (float64)."""
    m = t.shape[0] * t.shape[2] * t.shape[3]
    mu = t.mean(axis=(0, 2, 3))
    c = t - mu.reshape(1, -1, 1, 1)
    sigma = np.sqrt((c * c).sum(axis=(0, 2, 3)) / m)
    return mu, sigma


def channel_moments_backward(t, mu, sigma, d_mu, d_sigma, guard=STD_GUARD):
    """Adjoint of :func:`channel_moments`.

    d(sigma)/dx uses (x - mu) / (M * (sigma + guard)) so constant channels
    (sigma = 0) stay finite.
    """
    m = t.shape[0] * t.shape[2] * t.shape[3]
    c = t - mu.reshape(1, -1, 1, 1)
    coef = (d_sigma / (m * (sigma + guard))).reshape(1, -1, 1, 1)
    return (d_mu / m).reshape(1, -1, 1, 1) + c * coef


@dataclass
class Gradients:
    d_input: np.ndarray
    loss: float
    d_weights: dict | None = None  # layer id -> {"weight", "bias", "gamma", "beta"}


class Tape:
    """Primal values of one forward pass plus the loss evaluated on them."""

    def __init__(self, model, x, loss_fn, bn_mode="inference", params=None):
        if not isinstance(loss_fn, Loss):
            raise UnsupportedOp(
                f"loss {loss_fn!r} is not built from differentiable primitives")
        self.model = model
        self.x = x
        self.loss_fn = loss_fn
        self.bn_mode = bn_mode
        self.params = params or {}
        self.forward = g.run_layers(model, x, bn_mode=bn_mode, keep_cache=True,
                                    params=params)
        self.trace = self.forward.trace(model)
        self.loss = loss_fn.evaluate(x, self.forward.output, self.trace)
        if not np.isfinite(self.loss.value):
            raise NumericFault("non-finite loss value", where="loss")

    def replay_loss(self):
        return self.loss_fn.evaluate(self.x, self.forward.output, self.trace).value

    def _param(self, spec, name, default):
        return self.params.get(spec.id, {}).get(name, default)

    def backward(self, wrt_weights=False):
        model = self.model
        fp = self.forward
        lv = self.loss
        adj = {}

        def accumulate(key, val):
            if val is None:
                return
            adj[key] = adj[key] + val if key in adj else val

        for lid, d in lv.d_post.items():
            accumulate(lid, d)
        if model.layers:
            accumulate(model.layers[-1].id, lv.d_output)
        else:
            accumulate("input", lv.d_output)
        d_weights = {} if wrt_weights else None
        layers = model.layers
        for idx in range(len(layers) - 1, -1, -1):
            spec = layers[idx]
            cache = fp.caches[spec.id]
            prev_key = layers[idx - 1].id if idx > 0 else "input"
            g_out = adj.pop(spec.id, None)
            d_pre = lv.d_pre_bn.get(spec.id)
            if g_out is None and d_pre is None:
                continue
            if g_out is not None:
                mask = g.activation_mask(cache.y, spec.activation)
                g_y = g_out if mask is None else g_out * mask
            else:
                g_y = None
            if spec.conv_like:
                w = self._param(spec, "weight", spec.weight).astype(cache.x.dtype)
                grads = {}
                g_z = None
                if g_y is not None:
                    if spec.bn is not None:
                        bn = spec.bn
                        gamma = self._param(spec, "gamma", bn.gamma).astype(g_y.dtype)
                        inv = cache.inv_std.reshape(1, -1, 1, 1)
                        dxhat = g_y * gamma.reshape(1, -1, 1, 1)
                        if self.bn_mode == "train":
                            m = g_y.shape[0] * g_y.shape[2] * g_y.shape[3]
                            xhat = cache.xhat
                            g_z = inv / m * (m * dxhat
                                             - dxhat.sum(axis=(0, 2, 3), keepdims=True)
                                             - xhat * (dxhat * xhat).sum(axis=(0, 2, 3),
                                                                         keepdims=True))
                        else:
                            g_z = dxhat * inv
                        if wrt_weights:
                            grads["gamma"] = (g_y * cache.xhat).sum(axis=(0, 2, 3))
                            grads["beta"] = g_y.sum(axis=(0, 2, 3))
                    else:
                        g_z = g_y
                if d_pre is not None:
                    g_z = d_pre if g_z is None else g_z + d_pre
                dx, dw = g.conv2d_backward(cache.in_shape, cache.x, w, g_z, spec.stride,
                                           spec.padding, spec.groups, wrt_weights)
                if wrt_weights:
                    grads["weight"] = dw
                    if self._param(spec, "bias", spec.bias) is not None:
                        grads["bias"] = g_z.sum(axis=(0, 2, 3))
                    d_weights[spec.id] = grads
                g_in = dx
            elif spec.kind == g.ADD:
                g_in = g_y
                accumulate(spec.source, g_y)
            elif spec.kind == g.POOL:
                _, _, h, w_ = cache.in_shape
                g_in = np.broadcast_to(g_y / (h * w_), cache.in_shape).copy()
            else:
                g_in = g_y.reshape(cache.in_shape)
            if not np.all(np.isfinite(g_in)):
                raise NumericFault(f"non-finite gradient at layer {spec.id}", where=spec.id)
            accumulate(prev_key, g_in)
        d_input = adj.pop("input", None)
        if d_input is None:
            d_input = np.zeros_like(self.x)
        if lv.d_input is not None:
            d_input = d_input + lv.d_input
        if not np.all(np.isfinite(d_input)):
            raise NumericFault("non-finite input gradient", where="input")
        return Gradients(d_input=d_input, loss=lv.value, d_weights=d_weights)


def backward(model, x, loss_fn, wrt_weights=False):
    """Exact reverse-mode gradient of ``loss_fn`` w.r.t. the input (and weights).

    Evaluated in float64 regardless of the input dtype.
    """
    x = g.check_input(model, x).astype(np.float64)
    return Tape(model, x, loss_fn).backward(wrt_weights=wrt_weights)


def _kink_signature(model, x):
    fp = g.run_layers(model, x, keep_cache=True)
    sig = []
    for spec in model.layers:
        if spec.activation != "none":
            y = fp.caches[spec.id].y
            if spec.activation == "relu":
                sig.append(y > 0)
            else:
                sig.append((y > 0) & (y < 6))
    return sig


def finite_diff_check(model, x, loss_fn, epsilon=1e-3, n_coords=64, seed=0,
                      include_weights=False):
    """Max relative error of analytic vs central-difference gradients.

    Coordinates are drawn with a seeded generator. A coordinate whose
    perturbation flips any ReLU/ReLU6 region is non-differentiable within
    the stencil and is replaced by another draw.
    """
    if not epsilon > 0:
        raise InvalidArgument(f"epsilon must be > 0, got {epsilon}")
    x = g.check_input(model, x).astype(np.float64)
    grads = backward(model, x, loss_fn, wrt_weights=include_weights)
    rng = make_rng(seed)
    base_sig = _kink_signature(model, x)

    def loss_at(m, xx):
        fp = g.run_layers(m, xx)
        return loss_fn.evaluate(xx, fp.output, fp.trace(m)).value

    def smooth(m, xp, xm):
        for s0, sp, sm in zip(base_sig, _kink_signature(m, xp), _kink_signature(m, xm)):
            if not (np.array_equal(s0, sp) and np.array_equal(s0, sm)):
                return False
        return True

    worst = 0.0
    order = rng.permutation(x.size)
    checked = 0
    for flat in order:
        if checked >= n_coords:
            break
        xp = x.copy()
        xm = x.copy()
        xp.flat[flat] += epsilon
        xm.flat[flat] -= epsilon
        if not smooth(model, xp, xm):
            continue
        fd = (loss_at(model, xp) - loss_at(model, xm)) / (2 * epsilon)
        a = grads.d_input.flat[flat]
        worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
        checked += 1
    if include_weights:
        for spec in model.layers:
            if not spec.conv_like:
                continue
            dw = grads.d_weights[spec.id]["weight"]
            picks = rng.permutation(dw.size)[:max(8, n_coords // max(1, len(model.layers)))]
            for flat in picks:
                vals = []
                ok = True
                for sign in (1, -1):
                    w = spec.weight.astype(np.float64)
                    w.flat[flat] += sign * epsilon
                    m = _with_weight(model, spec.id, w)
                    if not all(np.array_equal(a, b) for a, b in
                               zip(base_sig, _kink_signature(m, x))):
                        ok = False
                        break
                    vals.append(loss_at(m, x))
                if not ok:
                    continue
                fd = (vals[0] - vals[1]) / (2 * epsilon)
                a = dw.flat[flat]
                worst = max(worst, abs(a - fd) / max(1.0, abs(a)))
    return worst


class _F64Layer(g.LayerSpec):
    """LayerSpec that keeps a float64 weight (for finite-difference probes)."""

    def __post_init__(self):
        pass


def _with_weight(model, layer_id, weight):
    layers = []
    for spec in model.layers:
        if spec.id == layer_id:
            spec = _F64Layer(spec.id, spec.kind, weight, spec.bias, spec.stride,
                             spec.padding, spec.bn, spec.activation, spec.source)
        layers.append(spec)
    return g.ModelGraph(layers, model.input_shape, model.name, model.version)
