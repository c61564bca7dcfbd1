"""Model description, forward inference with activation taps, and the
on-disk model format.

Supported topology: a sequential chain of layers where ``add`` layers may
pull a second operand from any earlier layer (residual links). Every layer
consumes the output of the layer before it; the first consumes the model
input.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import InvalidArgument, NumericFault, ParseError, UnsupportedVersion

MODEL_FORMAT = "gzsq-model/1"
_FORMAT_PREFIX = "gzsq-model/"

CONV = "conv2d"
DEPTHWISE = "depthwise_conv2d"
FC = "fully_connected"
ADD = "add"
POOL = "global_avg_pool"
FLATTEN = "flatten"

LAYER_KINDS = (CONV, DEPTHWISE, FC, ADD, POOL, FLATTEN)
CONV_LIKE = (CONV, DEPTHWISE, FC)
ACTIVATIONS = ("none", "relu", "relu6")


def _same_bits(a, b):
    if a is None or b is None:
        return a is None and b is None
    a = np.asarray(a)
    b = np.asarray(b)
    return a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(eq=False)
class BNParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_std: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        for name in ("gamma", "beta", "running_mean", "running_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float32).reshape(-1))

    @property
    def channels(self):
        return self.gamma.size

    def denom(self, dtype=np.float64):
        rs = self.running_std.astype(dtype)
        return np.sqrt(rs * rs + dtype(self.eps))

    def __eq__(self, other):
        if not isinstance(other, BNParams):
            return NotImplemented
        return (all(_same_bits(getattr(self, n), getattr(other, n))
                    for n in ("gamma", "beta", "running_mean", "running_std"))
                and float(self.eps).hex() == float(other.eps).hex())


@dataclass(eq=False)
class LayerSpec:
    id: int
    kind: str
    weight: np.ndarray | None = None
    bias: np.ndarray | None = None
    stride: int = 1
    padding: int = 0
    bn: BNParams | None = None
    activation: str = "none"
    source: int | None = None  # residual operand of an ``add`` layer

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise InvalidArgument(f"layer {self.id}: unknown kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"layer {self.id}: unknown activation {self.activation!r}")
        if self.weight is not None:
            self.weight = np.asarray(self.weight, dtype=np.float32)
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float32).reshape(-1)

    @property
    def conv_like(self):
        return self.kind in CONV_LIKE

    @property
    def out_channels(self):
        return None if self.weight is None else self.weight.shape[0]

    @property
    def groups(self):
        return self.weight.shape[0] if self.kind == DEPTHWISE else 1

    def __eq__(self, other):
        if not isinstance(other, LayerSpec):
            return NotImplemented
        return (self.id == other.id and self.kind == other.kind
                and self.stride == other.stride and self.padding == other.padding
                and self.activation == other.activation and self.source == other.source
                and _same_bits(self.weight, other.weight)
                and _same_bits(self.bias, other.bias)
                and (self.bn == other.bn if self.bn is not None and other.bn is not None
                     else self.bn is None and other.bn is None))


@dataclass(eq=False)
class ModelGraph:
    layers: list
    input_shape: tuple
    name: str = "model"
    version: str = "1"

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)

    def layer(self, layer_id):
        for spec in self.layers:
            if spec.id == layer_id:
                return spec
        raise KeyError(layer_id)

    def index_of(self, layer_id):
        for i, spec in enumerate(self.layers):
            if spec.id == layer_id:
                return i
        raise KeyError(layer_id)

    @property
    def has_bn(self):
        return any(spec.bn is not None for spec in self.layers)

    def __eq__(self, other):
        if not isinstance(other, ModelGraph):
            return NotImplemented
        return (self.input_shape == other.input_shape and self.name == other.name
                and self.version == other.version
                and len(self.layers) == len(other.layers)
                and all(a == b for a, b in zip(self.layers, other.layers)))


class ActivationTrace:
    """Post-activation output of every layer, in forward order.

    ``pre_bn`` additionally holds the raw convolution output (before BN and
    activation) of each conv-like layer.
    """

    def __init__(self, entries, pre_bn):
        self.entries = list(entries)
        self.pre_bn = dict(pre_bn)
        self._by_id = dict(self.entries)

    def __getitem__(self, layer_id):
        return self._by_id[layer_id]

    def __contains__(self, layer_id):
        return layer_id in self._by_id

    def __iter__(self):
        return iter(self.entries)

    def __len__(self):
        return len(self.entries)

    def ids(self):
        return [i for i, _ in self.entries]


# ---------------------------------------------------------------- kernels

def conv2d(x, w, b=None, stride=1, padding=0, groups=1):
    """Direct NCHW x OIHW convolution (cross-correlation), grouped."""
    n, c, _, _ = x.shape
    o, i, kh, kw = w.shape
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    oh, ow = win.shape[2], win.shape[3]
    if groups == 1:
        out = np.tensordot(win, w, axes=([1, 4, 5], [1, 2, 3]))  # n,oh,ow,o
        out = out.transpose(0, 3, 1, 2)
    else:
        g = groups
        win = win.reshape(n, g, c // g, oh, ow, kh, kw)
        wg = w.reshape(g, o // g, i, kh, kw)
        out = np.einsum("ngchwij,gkcij->ngkhw", win, wg).reshape(n, o, oh, ow)
    if b is not None:
        out = out + b.reshape(1, -1, 1, 1)
    return np.ascontiguousarray(out)


def conv2d_backward(x_shape, win_source, w, grad, stride, padding, groups, need_weight):
    """Gradients of conv2d w.r.t. its input and (optionally) its weight.

    ``win_source`` is the unpadded forward input.
    """
    n, c, h, wd = x_shape
    o, i, kh, kw = w.shape
    _, _, oh, ow = grad.shape
    dxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=grad.dtype)
    if groups == 1:
        for p in range(kh):
            for q in range(kw):
                contrib = np.tensordot(grad, w[:, :, p, q], axes=([1], [0]))  # n,oh,ow,c
                dxp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += \
                    contrib.transpose(0, 3, 1, 2)
    else:
        g = groups
        gg = grad.reshape(n, g, o // g, oh, ow)
        wg = w.reshape(g, o // g, i, kh, kw)
        for p in range(kh):
            for q in range(kw):
                contrib = np.einsum("ngkhw,gkc->ngchw", gg, wg[:, :, :, p, q])
                dxp[:, :, p:p + stride * oh:stride, q:q + stride * ow:stride] += \
                    contrib.reshape(n, c, oh, ow)
    dx = dxp[:, :, padding:padding + h, padding:padding + wd] if padding else dxp
    dw = None
    if need_weight:
        xp = win_source
        if padding:
            xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
        if groups == 1:
            dw = np.tensordot(grad, win, axes=([0, 2, 3], [0, 2, 3]))  # o,c,kh,kw
        else:
            g = groups
            win = win.reshape(n, g, c // g, oh, ow, kh, kw)
            gg = grad.reshape(n, g, o // g, oh, ow)
            dw = np.einsum("ngkhw,ngchwij->gkcij", gg, win).reshape(o, i, kh, kw)
    return np.ascontiguousarray(dx), dw


def apply_activation(y, kind):
    if kind == "relu":
        return np.maximum(y, 0)
    if kind == "relu6":
        return np.clip(y, 0, 6)
    return y


def activation_mask(y, kind):
    """Derivative of the activation; 0 at the kinks (boundaries inclusive)."""
    if kind == "relu":
        return (y > 0).astype(y.dtype)
    if kind == "relu6":
        return ((y > 0) & (y < 6)).astype(y.dtype)
    return None


# ---------------------------------------------------------------- shapes

def _layer_out_shape(spec, shape, shapes_by_id):
    """Output (c, h, w) of ``spec`` given input shape; raises InvalidArgument."""
    c, h, w = shape
    if spec.conv_like:
        if spec.weight is None or spec.weight.ndim != 4:
            raise InvalidArgument(f"layer {spec.id}: conv-like layer needs a 4-D weight")
        o, i, kh, kw = spec.weight.shape
        if spec.kind == DEPTHWISE:
            if i != 1 or o != c:
                raise InvalidArgument(
                    f"layer {spec.id}: depthwise weight {spec.weight.shape} "
                    f"does not match {c} input channels")
        elif spec.kind == FC:
            if (h, w) != (1, 1) or kh != 1 or kw != 1:
                raise InvalidArgument(
                    f"layer {spec.id}: fully-connected needs a 1x1 spatial input "
                    f"and 1x1 kernel, got input {shape}")
            if i != c:
                raise InvalidArgument(
                    f"layer {spec.id}: expects {i} input features, got {c}")
        elif i != c:
            raise InvalidArgument(
                f"layer {spec.id}: expects {i} input channels, got {c}")
        if spec.stride < 1 or spec.padding < 0:
            raise InvalidArgument(f"layer {spec.id}: invalid stride/padding")
        oh = (h + 2 * spec.padding - kh) // spec.stride + 1
        ow = (w + 2 * spec.padding - kw) // spec.stride + 1
        if oh < 1 or ow < 1:
            raise InvalidArgument(f"layer {spec.id}: kernel larger than padded input")
        return (o, oh, ow)
    if spec.kind == ADD:
        if spec.source not in shapes_by_id:
            raise InvalidArgument(
                f"layer {spec.id}: add source {spec.source} is not an earlier layer")
        if shapes_by_id[spec.source] != shape:
            raise InvalidArgument(
                f"layer {spec.id}: add operand shapes differ "
                f"({shapes_by_id[spec.source]} vs {shape})")
        return shape
    if spec.kind == POOL:
        return (c, 1, 1)
    return (c * h * w, 1, 1)


def infer_shapes(model):
    """Per-layer output shapes (c, h, w); raises on the first inconsistency."""
    shapes = {}
    out = []
    shape = model.input_shape
    for spec in model.layers:
        shape = _layer_out_shape(spec, shape, shapes)
        shapes[spec.id] = shape
        out.append(shape)
    return out


def validate_graph(model):
    """Human-readable diagnostics; an empty list means the model is valid."""
    diags = []
    seen = set()
    shapes = {}
    shape = model.input_shape
    if len(shape) != 3 or any(s < 1 for s in shape):
        diags.append(f"model: invalid input shape {shape}")
        return diags
    for spec in model.layers:
        lid = spec.id
        if lid in seen:
            diags.append(f"layer {lid}: duplicate layer id")
        if spec.conv_like and spec.weight is None:
            diags.append(f"layer {lid}: {spec.kind} layer carries no weights")
        if not spec.conv_like:
            if spec.weight is not None or spec.bias is not None:
                diags.append(f"layer {lid}: {spec.kind} layer must not carry weights")
            if spec.bn is not None:
                diags.append(f"layer {lid}: batch-norm attached to non-conv {spec.kind} layer")
        if spec.kind == ADD and spec.source not in seen:
            diags.append(f"layer {lid}: add source {spec.source} is not an earlier layer")
        o = spec.out_channels
        if o is not None and spec.bias is not None and spec.bias.size != o:
            diags.append(f"layer {lid}: bias length {spec.bias.size} != out channels {o}")
        if spec.bn is not None:
            bn = spec.bn
            lens = {v.size for v in (bn.gamma, bn.beta, bn.running_mean, bn.running_std)}
            if len(lens) != 1:
                diags.append(f"layer {lid}: batch-norm vectors differ in length")
            elif o is not None and bn.channels != o:
                diags.append(f"layer {lid}: batch-norm length {bn.channels} != out channels {o}")
            if np.any(bn.running_std < 0):
                diags.append(f"layer {lid}: negative batch-norm running std")
            if not bn.eps > 0:
                diags.append(f"layer {lid}: batch-norm epsilon must be positive")
        seen.add(lid)
        if shape is None:
            continue
        if spec.kind == ADD and spec.source not in shapes:
            shape = None
            continue
        try:
            shape = _layer_out_shape(spec, shape, shapes)
            shapes[lid] = shape
        except InvalidArgument as exc:
            msg = str(exc)
            if msg not in diags and "not an earlier layer" not in msg:
                diags.append(msg)
            shape = None
    return diags


# ---------------------------------------------------------------- forward

@dataclass
class LayerCache:
    x: np.ndarray | None = None        # layer input
    z: np.ndarray | None = None        # conv output (pre-BN)
    xhat: np.ndarray | None = None     # BN-normalized value
    inv_std: np.ndarray | None = None  # per-channel 1/sqrt(var+eps) used by BN
    y: np.ndarray | None = None        # pre-activation value
    in_shape: tuple | None = None


@dataclass
class ForwardPass:
    output: np.ndarray
    outputs: dict
    pre_bn: dict
    caches: dict = field(default_factory=dict)
    batch_stats: dict = field(default_factory=dict)

    def trace(self, model):
        return ActivationTrace([(s.id, self.outputs[s.id]) for s in model.layers],
                               self.pre_bn)


def run_layers(model, x, *, bn_mode="inference", keep_cache=False, params=None,
               transform=None):
    """Shared forward engine used by inference, autodiff and the trainer.

    ``params`` optionally overrides weights per layer id with a dict of
    ``weight``/``bias``/``gamma``/``beta`` arrays (used by the trainer).
    ``bn_mode='train'`` normalizes with batch statistics and records them.
    ``transform(layer_id, h)`` rewrites each layer's output before it is
    passed on (used for fake-quantized inference).
    """
    dtype = np.float64 if x.dtype == np.float64 else np.float32
    h = x.astype(dtype, copy=False)
    outputs = {}
    pre_bn = {}
    caches = {}
    batch_stats = {}
    for spec in model.layers:
        p = params.get(spec.id, {}) if params else {}
        cache = LayerCache(in_shape=h.shape) if keep_cache else None
        if spec.conv_like:
            w = p.get("weight", spec.weight).astype(dtype, copy=False)
            b = p.get("bias", spec.bias)
            b = None if b is None else b.astype(dtype, copy=False)
            z = conv2d(h, w, b, spec.stride, spec.padding, spec.groups)
            pre_bn[spec.id] = z
            if keep_cache:
                cache.x = h
                cache.z = z
            y = z
            if spec.bn is not None:
                bn = spec.bn
                gamma = p.get("gamma", bn.gamma).astype(dtype, copy=False)
                beta = p.get("beta", bn.beta).astype(dtype, copy=False)
                if bn_mode == "train":
                    mu = z.mean(axis=(0, 2, 3))
                    var = z.var(axis=(0, 2, 3))
                    batch_stats[spec.id] = (mu, np.sqrt(var))
                    inv = 1.0 / np.sqrt(var + bn.eps)
                else:
                    mu = bn.running_mean.astype(dtype)
                    inv = (1.0 / bn.denom(np.float64)).astype(dtype)
                xhat = (z - mu.reshape(1, -1, 1, 1)) * inv.reshape(1, -1, 1, 1)
                y = xhat * gamma.reshape(1, -1, 1, 1) + beta.reshape(1, -1, 1, 1)
                if keep_cache:
                    cache.xhat = xhat
                    cache.inv_std = inv
        elif spec.kind == ADD:
            y = h + outputs[spec.source]
        elif spec.kind == POOL:
            y = h.mean(axis=(2, 3), keepdims=True)
        else:
            y = h.reshape(h.shape[0], -1, 1, 1)
        if keep_cache:
            cache.y = y
            caches[spec.id] = cache
        h = apply_activation(y, spec.activation)
        if transform is not None:
            h = transform(spec.id, h)
        if not np.all(np.isfinite(h)):
            raise NumericFault(f"non-finite activation in layer {spec.id}", where=spec.id)
        outputs[spec.id] = h
    return ForwardPass(h, outputs, pre_bn, caches, batch_stats)


def check_input(model, x):
    x = np.asarray(x)
    if x.ndim != 4 or tuple(x.shape[1:]) != model.input_shape:
        raise InvalidArgument(
            f"input shape {x.shape} does not match model input (N, {model.input_shape})")
    if x.shape[0] < 1:
        raise InvalidArgument("empty batch")
    return x


def forward(model, x, trace=False):
    """Run inference; returns ``(output, ActivationTrace | None)``."""
    x = check_input(model, x)
    fp = run_layers(model, x)
    return fp.output, (fp.trace(model) if trace else None)


# ---------------------------------------------------------------- storage

def _write_blob(path, arr):
    data = np.asarray(arr, dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(data)


def _read_blob(directory, entry, dtype="<f4"):
    if not isinstance(entry, dict) or "blob" not in entry or "shape" not in entry:
        raise ParseError("malformed blob reference", path=str(directory / "manifest.json"))
    name = entry["blob"]
    if not isinstance(name, str) or os.sep in name or name.startswith("."):
        raise ParseError(f"illegal blob name {name!r}", path=str(directory / "manifest.json"))
    shape = entry["shape"]
    if not isinstance(shape, (list, tuple)) or not all(type(s) is int for s in shape):
        raise ParseError(f"blob {name!r}: invalid shape {shape!r}",
                         path=str(directory / "manifest.json"))
    shape = tuple(shape)
    if any(s < 0 for s in shape):
        raise ParseError(f"blob {name!r}: negative dimension in {shape}",
                         path=str(directory / "manifest.json"))
    path = directory / name
    if not path.is_file():
        raise ParseError(f"missing blob {name!r}", path=str(path))
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    expected = math.prod(shape) * itemsize
    if len(raw) != expected:
        kind = "truncated" if len(raw) < expected else "oversized"
        raise ParseError(f"{kind} blob {name!r}: expected {expected} bytes, got {len(raw)}",
                         path=str(path), offset=min(len(raw), expected))
    return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(np.dtype(dtype).type)


def _read_manifest(path):
    raw = path.read_bytes() if path.is_file() else None
    if raw is None:
        raise ParseError("missing manifest.json", path=str(path))
    try:
        doc = json.loads(raw.decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ParseError("manifest is not UTF-8", path=str(path), offset=exc.start) from exc
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed manifest: {exc.msg}", path=str(path), offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("manifest root must be an object", path=str(path), offset=0)
    return doc


def check_format(doc, expected, path):
    fmt = doc.get("format")
    prefix = expected.rsplit("/", 1)[0] + "/"
    if not isinstance(fmt, str) or not fmt.startswith(prefix):
        raise ParseError(f"not a {prefix[:-1]} document (format={fmt!r})", path=str(path))
    if fmt != expected:
        raise UnsupportedVersion(f"unsupported format version {fmt!r}, expected {expected!r}")


def _vec(arr, directory, stem):
    name = f"{stem}.bin"
    _write_blob(directory / name, arr)
    return {"blob": name, "shape": list(np.shape(arr))}


def model_manifest(model, directory):
    """Write all blobs of ``model`` into ``directory``; return the manifest dict."""
    layers = []
    for spec in model.layers:
        entry = {"id": spec.id, "kind": spec.kind, "stride": spec.stride,
                 "padding": spec.padding, "activation": spec.activation,
                 "source": spec.source, "weight": None, "bias": None, "bn": None}
        stem = f"layer{spec.id}"
        if spec.weight is not None:
            entry["weight"] = _vec(spec.weight, directory, f"{stem}.weight")
        if spec.bias is not None:
            entry["bias"] = _vec(spec.bias, directory, f"{stem}.bias")
        if spec.bn is not None:
            bn = spec.bn
            entry["bn"] = {"eps": float(bn.eps)}
            for name in ("gamma", "beta", "running_mean", "running_std"):
                entry["bn"][name] = _vec(getattr(bn, name), directory, f"{stem}.bn.{name}")
        layers.append(entry)
    return {"format": MODEL_FORMAT, "name": model.name, "version": model.version,
            "input_shape": list(model.input_shape), "layers": layers}


def save_model(model, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = model_manifest(model, directory)
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1))
    return directory


def model_from_manifest(doc, directory):
    mpath = directory / "manifest.json"
    check_format(doc, MODEL_FORMAT, mpath)
    try:
        layers = []
        for entry in doc["layers"]:
            weight = bias = bn = None
            if entry.get("weight") is not None:
                weight = _read_blob(directory, entry["weight"])
            if entry.get("bias") is not None:
                bias = _read_blob(directory, entry["bias"])
            if entry.get("bn") is not None:
                b = entry["bn"]
                bn = BNParams(*(_read_blob(directory, b[n]) for n in
                                ("gamma", "beta", "running_mean", "running_std")),
                              eps=float(b["eps"]))
            layers.append(LayerSpec(id=int(entry["id"]), kind=entry["kind"], weight=weight,
                                    bias=bias, stride=int(entry["stride"]),
                                    padding=int(entry["padding"]), bn=bn,
                                    activation=entry["activation"], source=entry.get("source")))
        return ModelGraph(layers, tuple(doc["input_shape"]), name=doc.get("name", "model"),
                          version=doc.get("version", "1"))
    except (ParseError, UnsupportedVersion):
        raise
    except (KeyError, TypeError, AttributeError) as exc:
        raise ParseError(f"malformed manifest: missing or invalid field {exc}",
                         path=str(mpath)) from exc
    except ValueError as exc:
        raise ParseError(f"malformed manifest: {exc}", path=str(mpath)) from exc


def load_model(path):
    directory = Path(path)
    doc = _read_manifest(directory / "manifest.json")
    return model_from_manifest(doc, directory)
