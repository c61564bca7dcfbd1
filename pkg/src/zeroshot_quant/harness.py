"""Desk-scale experiment harness: synthetic datasets, fixture models, a tiny
trainer, accuracy evaluation and the calibration comparison grid."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import graph as g
from . import quant as q
from .autodiff import CrossEntropyLoss, Tape
from .calib import estimate_substitutes
from .distill import DistillConfig, bn_targets, distill, distill_bn_baseline
from .errors import InvalidArgument, NumericFault, ParseError
from .folding import fold_bn
from .optim import Adam
from .tensor import gaussian_tensor, make_rng

DATASET_FORMAT = "gzsq-dataset/1"
REPORT_FORMAT = "gzsq-report/1"
DATASET_KINDS = ("gaussian-blobs", "striped-patterns")
HEADS = ("pool", "flatten")
MODEL_KINDS = ("tiny-cnn", "tiny-cnn-bn", "tiny-resnet", "gaussian-4layer")
METHODS = ("unit-gaussian", "gzsq-distilled", "zeroq-bn-baseline", "real-train-subset")
SPLITS = ("train", "test")


# ---------------------------------------------------------------- datasets

@dataclass
class Dataset:
    samples: np.ndarray  # (N, c, h, w) float32
    labels: np.ndarray   # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        if self.samples.ndim != 4:
            raise InvalidArgument(f"samples must be N x c x h x w, got {self.samples.shape}")
        if self.samples.shape[0] != self.labels.size:
            raise InvalidArgument(
                f"{self.samples.shape[0]} samples but {self.labels.size} labels")
        if self.classes < 2:
            raise InvalidArgument("a dataset needs at least 2 classes")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.classes):
            raise InvalidArgument(f"labels must lie in [0, {self.classes})")
        if self.split not in SPLITS:
            raise InvalidArgument(f"split must be one of {SPLITS}")

    def __len__(self):
        return self.labels.size

    @property
    def shape(self):
        return tuple(self.samples.shape[1:])

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.classes == other.classes and self.split == other.split
                and self.samples.shape == other.samples.shape
                and self.samples.tobytes() == other.samples.tobytes()
                and np.array_equal(self.labels, other.labels))


def _split_rng(seed, split):
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, SPLITS.index(split)])))


def gen_dataset(kind, classes=4, n_per_class=100, shape=(3, 8, 8), seed=0, split="train",
                separation=6.0, noise=1.0):
    """Balanced synthetic image classification data.

    ``gaussian-blobs``: every class has a fixed smooth mean image; samples
    add N(0, noise^2) pixel noise. ``separation`` is the Euclidean distance
    between any two class means in units of ``noise`` (class means are
    mutually orthogonal, so all pairs are equally far apart).

    ``striped-patterns``: class k is a sinusoidal grating at orientation
    ``k * pi / classes`` with a random phase and per-channel gain per sample,
    plus pixel noise. Class mean images are all zero, so no linear classifier
    beats chance on raw pixels.

    Both kinds are scaled so the expected per-pixel variance is 1, the way
    real images are normalised before they reach a network.

    Class templates depend only on ``seed``; the samples also depend on
    ``split``, so train and test splits share classes but not samples.
    """
    if kind not in DATASET_KINDS:
        raise InvalidArgument(f"unknown dataset kind {kind!r}; choose from {DATASET_KINDS}")
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or any(s < 1 for s in shape):
        raise InvalidArgument(f"shape must be (c, h, w) with positive sizes, got {shape}")
    if classes < 2:
        raise InvalidArgument("classes must be >= 2")
    if n_per_class < 1:
        raise InvalidArgument("n_per_class must be >= 1")
    if split not in SPLITS:
        raise InvalidArgument(f"split must be one of {SPLITS}")
    if not noise > 0:
        raise InvalidArgument("noise must be > 0")
    c, h, w = shape
    dim = c * h * w
    template_rng = make_rng(seed)
    rng = _split_rng(seed, split)
    labels = np.repeat(np.arange(classes), n_per_class)
    n = labels.size
    if kind == "gaussian-blobs":
        if classes > dim:
            raise InvalidArgument(f"at most {dim} classes fit orthogonal means in shape {shape}")
        coarse = template_rng.standard_normal((classes, c, (h + 1) // 2, (w + 1) // 2))
        smooth = np.kron(coarse, np.ones((1, 1, 2, 2)))[:, :, :h, :w].reshape(classes, dim)
        basis, _ = np.linalg.qr(smooth.T)  # orthonormal columns spanning the templates
        means = basis.T * (separation * noise / math.sqrt(2.0))
        x = means[labels] + noise * rng.standard_normal((n, dim))
        samples = x.reshape(n, c, h, w)
        pixel_var = noise ** 2 + separation ** 2 * noise ** 2 / (2.0 * dim)
    else:
        yy, xx = np.meshgrid(np.arange(h) / h, np.arange(w) / w, indexing="ij")
        freq = 2.0
        gains = template_rng.uniform(0.5, 1.5, (classes, c))
        theta = np.pi * labels / classes
        phase = rng.uniform(0, 2 * np.pi, n)
        arg = (2 * np.pi * freq * (np.cos(theta)[:, None, None] * xx
                                    + np.sin(theta)[:, None, None] * yy) + phase[:, None, None])
        amp = rng.uniform(1.0, 2.0, n)
        jitter = rng.uniform(0.8, 1.2, (n, c))
        wave = np.sin(arg)[:, None] * (gains[labels] * jitter * amp[:, None])[:, :, None, None]
        samples = wave + noise * rng.standard_normal((n, c, h, w))
        # E[sin^2] = 1/2, E[amp^2] = 7/3, E[jitter^2] = 1 + 0.4^2/12
        pixel_var = 0.5 * (7.0 / 3.0) * (1 + 0.16 / 12) * float(np.mean(gains ** 2)) + noise ** 2
    samples = samples / math.sqrt(pixel_var)
    order = rng.permutation(n)
    return Dataset(samples[order].astype(np.float32), labels[order], classes, split)


def save_dataset(ds, path):
    directory = Path(path)
    directory.mkdir(parents=True, exist_ok=True)
    (directory / "data.bin").write_bytes(np.asarray(ds.samples, dtype="<f4").tobytes())
    (directory / "labels.csv").write_text("".join(f"{int(v)}\n" for v in ds.labels))
    n, c, h, w = ds.samples.shape
    meta = {"format": DATASET_FORMAT, "N": n, "c": c, "h": h, "w": w, "K": ds.classes,
            "split": ds.split}
    (directory / "meta.json").write_text(json.dumps(meta, indent=1))
    return directory


def load_dataset(path):
    directory = Path(path)
    mpath = directory / "meta.json"
    if not mpath.is_file():
        raise ParseError("missing meta.json", path=str(mpath))
    try:
        meta = json.loads(mpath.read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed meta.json: {exc.msg}", path=str(mpath), offset=exc.pos) from exc
    if not isinstance(meta, dict):
        raise ParseError("meta.json root must be an object", path=str(mpath), offset=0)
    g.check_format(meta, DATASET_FORMAT, mpath)
    try:
        n, c, h, w, k = (int(meta[key]) for key in ("N", "c", "h", "w", "K"))
        split = meta.get("split", "train")
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed meta.json: {exc}", path=str(mpath)) from exc
    samples = g._read_blob(directory, {"blob": "data.bin", "shape": [n, c, h, w]})
    lpath = directory / "labels.csv"
    if not lpath.is_file():
        raise ParseError("missing labels.csv", path=str(lpath))
    labels = []
    offset = 0
    for line in lpath.read_text(errors="replace").splitlines(keepends=True):
        text = line.strip()
        if text:
            try:
                labels.append(int(text))
            except ValueError:
                raise ParseError(f"bad label {text!r}", path=str(lpath), offset=offset) from None
        offset += len(line)
    if len(labels) != n:
        raise ParseError(f"expected {n} labels, found {len(labels)}", path=str(lpath))
    try:
        return Dataset(samples, np.array(labels, dtype=np.int64), k, split)
    except InvalidArgument as exc:
        raise ParseError(str(exc), path=str(directory)) from exc


# ---------------------------------------------------------------- models

def _kaiming(rng, shape):
    fan_in = int(np.prod(shape[1:]))
    return (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)


def _bn(c):
    return g.BNParams(np.ones(c, np.float32), np.zeros(c, np.float32),
                      np.zeros(c, np.float32), np.ones(c, np.float32))


def build_model(kind, input_shape=(3, 8, 8), classes=4, width=8, seed=0, conv_scale=1.0,
                head="pool"):
    """Fixture architectures with seeded initial weights.

    ``gaussian-4layer`` is the distillation fixture: four linear 3x3 convs
    at constant width, weights drawn from N(0.1, 0.05^2).

    ``conv_scale`` multiplies the He-initialised conv weights. Behind a BN
    layer the network function does not depend on it, but the running
    statistics the BN layers store do (small conv weights are what weight
    decay leaves behind in trained BN networks).

    ``head="pool"`` averages the last feature map before the classifier,
    which makes the network blind to position; ``head="flatten"`` feeds
    every position to the classifier (needed for the blob data, whose
    classes differ only in spatial layout).
    """
    rng = make_rng(seed)
    c, h, w = (int(s) for s in input_shape)
    if kind == "gaussian-4layer":
        layers = [g.LayerSpec(i, g.CONV, gaussian_tensor((c, c, 3, 3), 0.1, 0.05, rng),
                              None, 1, 1) for i in range(4)]
        return g.ModelGraph(layers, (c, h, w), name=kind)
    if kind not in MODEL_KINDS:
        raise InvalidArgument(f"unknown model kind {kind!r}; choose from {MODEL_KINDS}")
    wide = 2 * width
    with_bn = kind in ("tiny-cnn-bn", "tiny-resnet")

    def conv(i, cin, cout, stride, act):
        weight = _kaiming(rng, (cout, cin, 3, 3)) * np.float32(conv_scale)
        bias = None if with_bn else np.zeros(cout, np.float32)
        return g.LayerSpec(i, g.CONV, weight, bias, stride, 1,
                           _bn(cout) if with_bn else None, act)

    if kind == "tiny-resnet":
        layers = [conv(0, c, width, 1, "relu"), conv(1, width, width, 1, "relu"),
                  conv(2, width, width, 1, "none"),
                  g.LayerSpec(3, g.ADD, activation="relu", source=0),
                  conv(4, width, wide, 2, "relu")]
    else:
        layers = [conv(0, c, width, 1, "relu"), conv(1, width, wide, 2, "relu")]
    if head not in HEADS:
        raise InvalidArgument(f"unknown head {head!r}; choose from {HEADS}")
    nid = len(layers)
    if head == "pool":
        layers.append(g.LayerSpec(nid, g.POOL))
        nid += 1
        features = wide
    else:
        features = wide * ((h - 1) // 2 + 1) * ((w - 1) // 2 + 1)
    layers += [g.LayerSpec(nid, g.FLATTEN),
               g.LayerSpec(nid + 1, g.FC, _kaiming(rng, (classes, features, 1, 1)),
                           np.zeros(classes, np.float32))]
    return g.ModelGraph(layers, (c, h, w), name=kind)


# ---------------------------------------------------------------- training

def _initial_params(model):
    params = {}
    for spec in model.layers:
        if not spec.conv_like:
            continue
        p = {"weight": spec.weight.astype(np.float64)}
        if spec.bias is not None:
            p["bias"] = spec.bias.astype(np.float64)
        if spec.bn is not None:
            p["gamma"] = spec.bn.gamma.astype(np.float64)
            p["beta"] = spec.bn.beta.astype(np.float64)
        params[spec.id] = p
    return params


def train_tiny(model, dataset, epochs=20, lr=1e-2, seed=0, batch_size=32, momentum=0.1):
    """Cross-entropy training with Adam; BN layers use batch statistics and
    keep exponential running averages (``momentum`` weight on the new batch).
    """
    if epochs < 0:
        raise InvalidArgument("epochs must be >= 0")
    if batch_size < 1:
        raise InvalidArgument("batch_size must be >= 1")
    out_shape = g.infer_shapes(model)[-1]
    if out_shape[0] != dataset.classes or out_shape[1:] != (1, 1):
        raise InvalidArgument(
            f"model output {out_shape} does not match {dataset.classes} classes")
    g.check_input(model, dataset.samples[:1])
    if epochs == 0:
        return model
    rng = make_rng(seed)
    params = _initial_params(model)
    running = {s.id: [s.bn.running_mean.astype(np.float64),
                      s.bn.running_std.astype(np.float64) ** 2]
               for s in model.layers if s.bn is not None}
    flat = {(lid, name): arr for lid, p in params.items() for name, arr in p.items()}
    opt = Adam(lr)
    x_all = dataset.samples.astype(np.float64)
    n = len(dataset)
    for epoch in range(epochs):
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            tape = Tape(model, x_all[idx], CrossEntropyLoss(dataset.labels[idx]),
                        bn_mode="train", params=params)
            grads = tape.backward(wrt_weights=True)
            if not math.isfinite(grads.loss):
                raise NumericFault(f"training diverged in epoch {epoch}", where=epoch)
            opt.step(flat, {(lid, name): grads.d_weights[lid][name] for lid, name in flat})
            for lid, (mu, std) in tape.forward.batch_stats.items():
                rm, rv = running[lid]
                running[lid] = [(1 - momentum) * rm + momentum * mu,
                                (1 - momentum) * rv + momentum * std * std]
        if not all(np.all(np.isfinite(a)) for a in flat.values()):
            raise NumericFault(f"training diverged in epoch {epoch}", where=epoch)
    layers = []
    for spec in model.layers:
        if spec.conv_like:
            p = params[spec.id]
            bn = spec.bn
            if bn is not None:
                rm, rv = running[spec.id]
                bn = g.BNParams(p["gamma"].astype(np.float32), p["beta"].astype(np.float32),
                                rm.astype(np.float32), np.sqrt(rv).astype(np.float32), bn.eps)
            bias = p["bias"].astype(np.float32) if "bias" in p else None
            spec = g.LayerSpec(spec.id, spec.kind, p["weight"].astype(np.float32), bias,
                               spec.stride, spec.padding, bn, spec.activation, spec.source)
        layers.append(spec)
    return g.ModelGraph(layers, model.input_shape, model.name, model.version)


def predict_labels(model, samples, batch=256):
    """Arg-max class per sample; ties go to the lowest class id."""
    preds = []
    for start in range(0, samples.shape[0], batch):
        out = q.predict(model, samples[start:start + batch])
        preds.append(np.argmax(out.reshape(out.shape[0], -1), axis=1))
    return np.concatenate(preds) if preds else np.zeros(0, dtype=np.int64)


def eval_accuracy(model, dataset, batch=256):
    """Top-1 accuracy of a float or quantized model."""
    if len(dataset) == 0:
        return 0.0
    return float(np.mean(predict_labels(model, dataset.samples, batch) == dataset.labels))


# ---------------------------------------------------------------- comparison

@dataclass(frozen=True)
class QuantConfig:
    name: str = "W8A8"
    weight_bits: int = 8
    weight_granularity: str = q.PER_CHANNEL
    weight_symmetry: str = q.SYMMETRIC
    act_bits: int = 8
    act_symmetry: str = q.AFFINE
    observer: str = "histogram"

    def __post_init__(self):
        q._check_scheme(self.weight_bits, self.weight_granularity, self.weight_symmetry)
        q._check_scheme(self.act_bits, q.PER_TENSOR, self.act_symmetry)
        q.make_observer(self.observer)

    @classmethod
    def wa(cls, wbits, abits, **kw):
        return cls(name=f"W{wbits}A{abits}", weight_bits=wbits, act_bits=abits, **kw)

    def to_dict(self):
        return dict(self.__dict__)


@dataclass
class GridSpec:
    """Everything :func:`compare_calibrations` varies or holds fixed."""

    methods: tuple = METHODS
    configs: tuple = (QuantConfig.wa(8, 8),)
    runs: int = 10
    seed: int = 0
    calib_batch: int = 8
    distill: DistillConfig = field(default_factory=DistillConfig)
    baseline_lr: float = 0.5

    def __post_init__(self):
        unknown = [m for m in self.methods if m not in METHODS]
        if unknown:
            raise InvalidArgument(f"unknown calibration methods {unknown}; choose from {METHODS}")
        if self.runs < 1:
            raise InvalidArgument("runs must be >= 1")
        if self.calib_batch < 1:
            raise InvalidArgument("calib_batch must be >= 1")
        if not self.configs:
            raise InvalidArgument("at least one quantization config is required")
        names = [c.name for c in self.configs]
        if len(set(names)) != len(names):
            raise InvalidArgument(f"duplicate config names in {names}")

    @classmethod
    def from_dict(cls, doc):
        doc = dict(doc)
        configs = tuple(QuantConfig(**c) for c in doc.pop("configs", [QuantConfig.wa(8, 8).to_dict()]))
        dcfg = DistillConfig(**doc.pop("distill", {}))
        methods = tuple(doc.pop("methods", METHODS))
        return cls(methods=methods, configs=configs, distill=dcfg, **doc)

    def to_dict(self):
        return {"methods": list(self.methods), "configs": [c.to_dict() for c in self.configs],
                "runs": self.runs, "seed": self.seed, "calib_batch": self.calib_batch,
                "distill": dict(self.distill.__dict__), "baseline_lr": self.baseline_lr}


def load_grid(path):
    path = Path(path)
    if not path.is_file():
        raise ParseError("missing grid file", path=str(path))
    try:
        doc = json.loads(path.read_text(errors="replace"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"malformed grid file: {exc.msg}", path=str(path), offset=exc.pos) from exc
    if not isinstance(doc, dict):
        raise ParseError("grid file root must be an object", path=str(path), offset=0)
    try:
        return GridSpec.from_dict(doc)
    except (TypeError, ValueError, KeyError, AttributeError) as exc:
        raise ParseError(f"malformed grid file: {exc}", path=str(path)) from exc


@dataclass
class CalibRun:
    data: np.ndarray
    model: g.ModelGraph
    loss_history: list | None = None
    initial_loss: float | None = None
    final_loss: float | None = None


REFERENCE = {"dataset": "striped-patterns", "classes": 4, "n_per_class": 100,
             "shape": (3, 8, 8), "noise": 2.5, "model": "tiny-cnn-bn", "conv_scale": 0.1,
             "epochs": 20, "lr": 1e-2}


def reference_setup(seed=0, **overrides):
    """The pinned desk-scale fixture: ``(trained_model, train, test)``."""
    ref = {**REFERENCE, **overrides}
    data = dict(classes=ref["classes"], n_per_class=ref["n_per_class"], shape=ref["shape"],
                seed=seed, noise=ref["noise"])
    train = gen_dataset(ref["dataset"], split="train", **data)
    test = gen_dataset(ref["dataset"], split="test", **data)
    model = build_model(ref["model"], ref["shape"], ref["classes"], seed=seed,
                        conv_scale=ref["conv_scale"])
    return train_tiny(model, train, ref["epochs"], ref["lr"], seed=seed), train, test


def _calibration_data(method, fold, model, folded, train, grid, run_seed):
    """Calibration batch for one (method, fold timing, run)."""
    shape = (grid.calib_batch,) + model.input_shape
    target = folded if fold == "before" else model
    if method == "unit-gaussian":
        return CalibRun(gaussian_tensor(shape, 0.0, 1.0, run_seed), target)
    if method == "real-train-subset":
        rng = make_rng(run_seed)
        idx = np.sort(rng.choice(len(train), size=min(grid.calib_batch, len(train)), replace=False))
        return CalibRun(train.samples[idx], target)
    cfg = DistillConfig(**{**grid.distill.__dict__, "seed": run_seed, "batch": grid.calib_batch})
    if method == "gzsq-distilled":
        subs = estimate_substitutes(target, folded_before=(fold == "before"))
        dd = distill(target, subs, cfg)
    else:
        cfg = DistillConfig(**{**cfg.__dict__, "learning_rate": grid.baseline_lr})
        dd = distill_bn_baseline(target, bn_targets(model), cfg)
    return CalibRun(dd.data, target, dd.loss_history, dd.initial_loss, dd.final_loss)


def _skip_reason(method, model, train):
    if method == "zeroq-bn-baseline" and not model.has_bn:
        return "requires live batch-norm statistics; model has none"
    if method == "real-train-subset" and (train is None or train.split != "train"):
        return "requires the train split"
    return None


def _mean_std(values):
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


@dataclass
class ComparisonReport:
    fp32_accuracy: float
    cells: list        # one dict per (method, fold, config)
    grid: dict
    model_name: str
    extras: dict = field(default_factory=dict)  # in-memory only: histories, samples

    def cell(self, method, config, fold=None):
        for c in self.cells:
            if c["method"] == method and c["config"] == config and (fold is None or c["fold"] == fold):
                return c
        raise KeyError((method, config, fold))

    def to_dict(self):
        histories = {f"{m}/{f}/run0": list(h)
                     for (m, f), h in self.extras.get("histories", {}).items()}
        return {"format": REPORT_FORMAT, "model": self.model_name,
                "fp32": {"accuracy": self.fp32_accuracy}, "grid": self.grid,
                "cells": self.cells, "loss_histories": histories}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def to_text(self):
        configs = [c["name"] for c in self.grid["configs"]]
        rows = []
        for c in self.cells:
            key = (c["method"], c["fold"])
            if key not in rows:
                rows.append(key)
        head = ["method", "fold"] + configs
        lines = [["FP32", "-"] + [f"{self.fp32_accuracy:.4f}"] * len(configs)]
        for method, fold in rows:
            line = [method, fold]
            for name in configs:
                c = self.cell(method, name, fold)
                if c["skipped"]:
                    line.append("skipped")
                else:
                    line.append(f"{c['mean']:.4f} ± {c['std']:.4f}")
            lines.append(line)
        widths = [max(len(str(r[i])) for r in [head] + lines) for i in range(len(head))]
        fmt = lambda r: "  ".join(str(v).ljust(wd) for v, wd in zip(r, widths)).rstrip()
        out = [fmt(head), fmt(["-" * wd for wd in widths])] + [fmt(r) for r in lines]
        out.append(f"runs={self.grid['runs']} seed={self.grid['seed']}; mean ± std of top-1 accuracy")
        skipped = sorted({(c["method"], c["reason"]) for c in self.cells if c["skipped"]})
        out += [f"skipped {m}: {r}" for m, r in skipped]
        return "\n".join(out) + "\n"


def compare_calibrations(model, test, train=None, grid=None):
    """Evaluate every (method x fold timing x quant config) cell.

    BN-bearing models get two fold timings: ``before`` folds BN into the
    convs ahead of data synthesis, ``after`` synthesises on the live-BN
    model. BN-free models have the single timing ``none``. Each cell holds
    the mean and std of top-1 accuracy over ``grid.runs`` seeds
    (``grid.seed + r``); incompatible method/model pairs become skipped cells.
    """
    grid = grid or GridSpec()
    folded = fold_bn(model, n_probe=0)[0] if model.has_bn else model
    folds = ("before", "after") if model.has_bn else ("none",)
    fp32 = eval_accuracy(model, test)
    cells = []
    extras = {"histories": {}, "samples": {}}
    for method in grid.methods:
        reason = _skip_reason(method, model, train)
        for fold in folds:
            accs = {c.name: [] for c in grid.configs}
            ranges = {}
            losses = []
            if reason is None:
                for r in range(grid.runs):
                    run = _calibration_data(method, fold, model, folded, train, grid, grid.seed + r)
                    if r == 0:
                        extras["samples"][(method, fold)] = run.data
                        if run.loss_history is not None:
                            extras["histories"][(method, fold)] = run.loss_history
                    if run.final_loss is not None:
                        losses.append({"initial": run.initial_loss, "final": run.final_loss})
                    for cfg in grid.configs:
                        act = q.calibrate_activations(run.model, run.data, cfg.observer,
                                                      cfg.act_bits, cfg.act_symmetry)
                        qm = q.quantize_model(run.model, act, cfg.weight_bits,
                                              cfg.weight_granularity, cfg.weight_symmetry)
                        accs[cfg.name].append(eval_accuracy(qm, test))
                        if r == 0:
                            ranges[cfg.name] = q.activation_ranges(act)
            for cfg in grid.configs:
                cell = {"method": method, "fold": fold, "config": cfg.name,
                        "skipped": reason is not None, "reason": reason}
                if reason is None:
                    mean, std = _mean_std(accs[cfg.name])
                    cell.update({"accuracies": accs[cfg.name], "mean": mean, "std": std,
                                 "ranges_run0": ranges[cfg.name], "distill_losses": losses,
                                 "loss_history": (f"{method}/{fold}/run0"
                                                  if (method, fold) in extras["histories"]
                                                  else None)})
                cells.append(cell)
    return ComparisonReport(fp32, cells, grid.to_dict(), model.name, extras)


# ---------------------------------------------------------------- random models

def random_model(seed, max_conv=5, bn_prob=0.5, residual_prob=0.3, head=False):
    """A small random graph for audits: 1..``max_conv`` conv-like layers with
    varying widths (so channel counts expand and contract), mixed
    activations, optional BN, bias, depthwise layers and residual adds.
    ``head=True`` appends pool, flatten and a fully-connected layer.
    """
    rng = make_rng(seed)
    c = int(rng.integers(1, 5))
    hw = int(rng.integers(4, 7))
    shape = (c, hw, hw)
    layers = []
    shapes = {}
    n_conv = int(rng.integers(1, max_conv + 1))
    lid = 0
    cur = shape
    for _ in range(n_conv):
        cin, h, w = cur
        depthwise = cin > 1 and rng.random() < 0.2
        k = int(rng.choice([1, 3]))
        stride = 2 if (min(h, w) >= 5 and rng.random() < 0.25) else 1
        cout = cin if depthwise else int(rng.integers(1, 7))
        wshape = (cout, 1, k, k) if depthwise else (cout, cin, k, k)
        weight = gaussian_tensor(wshape, float(rng.normal(0, 0.05)),
                                 float(math.sqrt(2.0 / (wshape[1] * k * k))), rng)
        bias = gaussian_tensor((cout,), 0.0, 0.1, rng) if rng.random() < 0.5 else None
        bn = None
        if rng.random() < bn_prob:
            bn = g.BNParams(gaussian_tensor((cout,), 1.0, 0.3, rng),
                            gaussian_tensor((cout,), 0.0, 0.3, rng),
                            gaussian_tensor((cout,), 0.0, 0.3, rng),
                            rng.uniform(0.5, 1.5, cout).astype(np.float32))
        act = str(rng.choice(g.ACTIVATIONS))
        spec = g.LayerSpec(lid, g.DEPTHWISE if depthwise else g.CONV, weight, bias,
                           stride, k // 2, bn, act)
        layers.append(spec)
        cur = g._layer_out_shape(spec, cur, shapes)
        shapes[lid] = cur
        lid += 1
        match = [i for i, s in shapes.items() if s == cur and i != lid - 1]
        if match and rng.random() < residual_prob:
            src = int(rng.choice(match))
            layers.append(g.LayerSpec(lid, g.ADD, activation=str(rng.choice(g.ACTIVATIONS)),
                                      source=src))
            shapes[lid] = cur
            lid += 1
    if head:
        classes = int(rng.integers(2, 5))
        layers += [g.LayerSpec(lid, g.POOL), g.LayerSpec(lid + 1, g.FLATTEN),
                   g.LayerSpec(lid + 2, g.FC, _kaiming(rng, (classes, cur[0], 1, 1)),
                               np.zeros(classes, np.float32))]
    return g.ModelGraph(layers, shape, name=f"random-{seed}")
