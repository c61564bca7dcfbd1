"""``gzsq`` command-line frontend.

Every subcommand accepts ``--config job.json`` (flags override its values)
and ``--dry-run`` (print the resolved job and exit). Each run writes a
``job.json`` sidecar next to its output that replays it via ``--config``.

Exit status: 0 success, 1 usage error, 2 data/model error, 3 numeric
fault. Failures print one line to stderr:
``error: code=<code> exit=<status> message=<text>``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import calib, distill, folding, harness, quant
from . import graph as g
from .autodiff import LinearLoss, QuadraticLoss, finite_diff_check
from .errors import NumericFault, ParseError, QuantToolkitError
from .tensor import gaussian_tensor, make_rng

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
JOB_FORMAT = "gzsq-job/1"
BIT_CHOICES = (2, 3, 4, 5, 6, 7, 8, quant.IDENTITY_BITS)


class UsageError(Exception):
    code = "usage"


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _shape(text):
    try:
        parts = tuple(int(p) for p in str(text).replace("x", ",").split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use c,h,w") from None
    if len(parts) != 3:
        raise argparse.ArgumentTypeError(f"bad shape {text!r}; use c,h,w")
    return parts


# ---------------------------------------------------------------- commands

def _sidecar(out, job):
    out = Path(out)
    target = out / "job.json" if out.is_dir() else out.with_name(out.name + ".job.json")
    target.write_text(json.dumps(job, indent=1, sort_keys=True))


def _load_any_model(path):
    if quant.is_qmodel(path):
        return quant.load_qmodel(path)
    return g.load_model(path)


def _checked_model(path):
    model = g.load_model(path)
    diags = g.validate_graph(model)
    if diags:
        raise ParseError("invalid model: " + "; ".join(diags), path=str(path))
    return model


def cmd_gen_model(a, out):
    model = harness.build_model(a.kind, a.input_shape, a.classes, a.width, a.seed, a.conv_scale,
                                a.head)
    g.save_model(model, a.out)
    print(f"wrote {a.kind} model with {len(model.layers)} layers to {a.out}", file=out)


def cmd_gen_data(a, out):
    ds = harness.gen_dataset(a.kind, a.classes, a.n_per_class, a.shape, a.seed, a.split,
                             a.separation, a.noise)
    harness.save_dataset(ds, a.out)
    print(f"wrote {len(ds)} {a.split} samples ({a.classes} classes) to {a.out}", file=out)


def cmd_train(a, out):
    model = _checked_model(a.model)
    ds = harness.load_dataset(a.dataset)
    trained = harness.train_tiny(model, ds, a.epochs, a.lr, a.seed, a.batch_size)
    g.save_model(trained, a.out)
    print(f"train top1 {harness.eval_accuracy(trained, ds):.4f}", file=out)


def cmd_fold_bn(a, out):
    folded, report = folding.fold_bn(_checked_model(a.model))
    g.save_model(folded, a.out)
    print(report.summary(), file=out)


def cmd_estimate_stats(a, out):
    model = _checked_model(a.model)
    policy = calib.load_policy(a.policy) if a.policy else None
    if a.fold_before:
        model = folding.fold_bn(model, n_probe=0)[0]
    subs = calib.estimate_substitutes(model, policy, folded_before=a.fold_before)
    calib.save_substitutes(subs, a.out)
    print(f"wrote {len(subs)} substitutes to {a.out}", file=out)


def cmd_distill(a, out):
    model = _checked_model(a.model)
    subs = calib.load_substitutes(a.subs)
    if subs.folded_before and model.has_bn:
        model = folding.fold_bn(model, n_probe=0)[0]
    cfg = distill.DistillConfig(iterations=a.iters, learning_rate=a.lr, batch=a.batch,
                                seed=a.seed, loss_kind=a.loss)
    dd = distill.distill(model, subs, cfg)
    distill.save_distilled(dd, a.out)
    print(f"initial loss {dd.initial_loss:.6g}", file=out)
    print(f"final loss {dd.final_loss:.6g}", file=out)


def _calib_batches(path, input_shape, max_samples):
    meta_path = Path(path) / "meta.json"
    if not meta_path.is_file():
        raise ParseError("calibration data needs a meta.json", path=str(meta_path))
    try:
        fmt = json.loads(meta_path.read_text(errors="replace")).get("format", "")
    except (json.JSONDecodeError, AttributeError) as exc:
        raise ParseError("malformed meta.json", path=str(meta_path)) from exc
    if str(fmt).startswith("gzsq-dataset/"):
        data = harness.load_dataset(path).samples
    else:
        data = distill.load_distilled(path).data
    if max_samples:
        data = data[:max_samples]
    return g.check_input(g.ModelGraph([], input_shape), data)


def cmd_calibrate(a, out):
    model = _checked_model(a.model)
    data = _calib_batches(a.calib_data, model.input_shape, a.max_samples)
    params = quant.calibrate_activations(model, data, a.observer, a.abits, a.asym, a.bins)
    quant.save_act_params(params, a.out)
    print(f"calibrated {len(params)} activation tensors on {data.shape[0]} samples", file=out)


def cmd_quantize(a, out):
    model = _checked_model(a.model)
    act = quant.load_act_params(a.qparams)
    qm = quant.quantize_model(model, act, a.wbits, a.wscheme, a.wsym)
    quant.save_qmodel(qm, a.out)
    print(f"wrote W{a.wbits} quantized model to {a.out}", file=out)


def cmd_eval(a, out):
    model = _load_any_model(a.model)
    ds = harness.load_dataset(a.dataset)
    print(f"top1 {harness.eval_accuracy(model, ds):.4f}", file=out)


def cmd_compare(a, out):
    model = _checked_model(a.model)
    test = harness.load_dataset(a.dataset)
    train = harness.load_dataset(a.train) if a.train else None
    grid = harness.load_grid(a.grid) if a.grid else harness.GridSpec()
    overrides = {k: v for k, v in (("runs", a.runs), ("seed", a.seed)) if v is not None}
    if overrides:
        grid = harness.GridSpec.from_dict({**grid.to_dict(), **overrides})
    report = harness.compare_calibrations(model, test, train, grid)
    path = Path(a.out)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(report.to_json())
    text = report.to_text()
    path.with_suffix(".txt").write_text(text)
    from .plotting import render_report
    figures = render_report(report, path.parent / (path.stem + "_figures"))
    print(text, end="", file=out)
    for fig in figures:
        print(f"figure {fig}", file=out)


def _audit_one(model, a, seed):
    rng = make_rng(seed)
    x = gaussian_tensor((2,) + model.input_shape, 0.0, 1.0, rng).astype(np.float64)
    shapes = g.infer_shapes(model)
    out_dir = rng.standard_normal((2,) + shapes[-1])
    taps = {s.id: rng.standard_normal((2,) + sh) * 0.5 for s, sh in zip(model.layers, shapes)}
    loss = LinearLoss(out_dir, taps) + QuadraticLoss(rng.standard_normal((2,) + shapes[-1]))
    return finite_diff_check(model, x, loss, a.eps, a.coords, seed, include_weights=True)


def cmd_check_grad(a, out):
    if a.model is None and not a.random:
        raise UsageError("check-grad needs a model path or --random N")
    models = []
    if a.model is not None:
        models.append((str(a.model), _checked_model(a.model)))
    for k in range(a.random or 0):
        models.append((f"random-{a.seed + k}", harness.random_model(a.seed + k, head=k % 2 == 1)))
    worst = 0.0
    failed = []
    for name, model in models:
        err = _audit_one(model, a, a.seed)
        worst = max(worst, err)
        status = "ok" if err <= a.tol else "FAIL"
        if err > a.tol:
            failed.append(name)
        print(f"{name}: layers={len(model.layers)} max_rel_err={err:.3e} {status}", file=out)
    print(f"checked {len(models)} model(s); worst {worst:.3e}; tolerance {a.tol:g}", file=out)
    if failed:
        raise NumericFault(f"gradient check exceeded {a.tol:g} on {', '.join(failed)}",
                           where="check-grad")


# ---------------------------------------------------------------- parser

COMMANDS = {}


def _command(name, func, help_text, required=()):
    COMMANDS[name] = (func, help_text, tuple(required))


_command("gen-model", cmd_gen_model, "create a fixture model", ["out"])
_command("gen-data", cmd_gen_data, "create a synthetic dataset", ["out"])
_command("train", cmd_train, "train a model on a dataset", ["model", "dataset", "out"])
_command("fold-bn", cmd_fold_bn, "fold batch-norm into the preceding convs", ["model", "out"])
_command("estimate-stats", cmd_estimate_stats, "estimate per-layer substitute statistics",
         ["model", "out"])
_command("distill", cmd_distill, "synthesize calibration data", ["model", "subs", "out"])
_command("calibrate", cmd_calibrate, "compute activation quantization params",
         ["model", "calib_data", "out"])
_command("quantize", cmd_quantize, "quantize model weights", ["model", "qparams", "out"])
_command("eval", cmd_eval, "print top-1 accuracy", ["model", "dataset"])
_command("compare", cmd_compare, "run the calibration comparison grid",
         ["model", "dataset", "out"])
_command("check-grad", cmd_check_grad, "finite-difference gradient audit", [])


def build_parser():
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="gzsq", description="Zero-shot post-training quantization toolkit.",
                     formatter_class=fmt)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    ps = {}
    for name, (_, help_text, _) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.add_argument("--config", help="JSON job file; explicit flags override it")
        p.add_argument("--dry-run", action="store_true",
                       help="print the resolved job as JSON and exit")
        ps[name] = p

    p = ps["gen-model"]
    p.add_argument("--kind", choices=harness.MODEL_KINDS, default="tiny-cnn")
    p.add_argument("--input-shape", type=_shape, default=(3, 8, 8), help="c,h,w")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--width", type=int, default=8)
    p.add_argument("--conv-scale", type=float, default=1.0)
    p.add_argument("--head", choices=harness.HEADS, default="pool",
                   help="classifier head: global average pool or flatten")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = ps["gen-data"]
    p.add_argument("--kind", choices=harness.DATASET_KINDS, default="striped-patterns")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--n-per-class", type=int, default=100)
    p.add_argument("--shape", type=_shape, default=(3, 8, 8), help="c,h,w")
    p.add_argument("--split", choices=harness.SPLITS, default="train")
    p.add_argument("--separation", type=float, default=6.0)
    p.add_argument("--noise", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = ps["train"]
    p.add_argument("model", nargs="?")
    p.add_argument("dataset", nargs="?")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--lr", type=float, default=1e-2)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")

    p = ps["fold-bn"]
    p.add_argument("model", nargs="?")
    p.add_argument("--out")

    p = ps["estimate-stats"]
    p.add_argument("model", nargs="?")
    p.add_argument("--policy", help="JSON resize-rule policy (default + per-layer overrides)")
    timing = p.add_mutually_exclusive_group()
    timing.add_argument("--fold-before", dest="fold_before", action="store_true", default=False,
                        help="fold BN first and propagate the folded biases")
    timing.add_argument("--fold-after", dest="fold_before", action="store_false",
                        help="keep live BN (fold after synthesis)")
    p.add_argument("--out")

    p = ps["distill"]
    p.add_argument("model", nargs="?")
    p.add_argument("subs", nargs="?")
    p.add_argument("--iters", type=int, default=500)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--batch", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=distill.LOSS_KINDS, default="zscore")
    p.add_argument("--out")

    p = ps["calibrate"]
    p.add_argument("model", nargs="?")
    p.add_argument("calib_data", nargs="?", help="distilled-data or dataset directory")
    p.add_argument("--observer", choices=("minmax", "histogram"), default="histogram")
    p.add_argument("--abits", type=int, choices=BIT_CHOICES, default=8,
                   metavar="{2..8,32}", help="32 disables activation quantization")
    p.add_argument("--asym", choices=(quant.AFFINE, quant.SYMMETRIC), default=quant.AFFINE)
    p.add_argument("--bins", type=int, default=2048)
    p.add_argument("--max-samples", type=int, default=0, help="0 = use all")
    p.add_argument("--out")

    p = ps["quantize"]
    p.add_argument("model", nargs="?")
    p.add_argument("qparams", nargs="?")
    p.add_argument("--wbits", type=int, choices=BIT_CHOICES, default=8,
                   metavar="{2..8,32}", help="32 keeps float weights")
    p.add_argument("--wscheme", choices=(quant.PER_CHANNEL, quant.PER_TENSOR),
                   default=quant.PER_CHANNEL)
    p.add_argument("--wsym", choices=(quant.SYMMETRIC, quant.AFFINE), default=quant.SYMMETRIC)
    p.add_argument("--out")

    p = ps["eval"]
    p.add_argument("model", nargs="?", help="model or quantized-model directory")
    p.add_argument("dataset", nargs="?")

    p = ps["compare"]
    p.add_argument("model", nargs="?")
    p.add_argument("dataset", nargs="?", help="evaluation (test) dataset")
    p.add_argument("--train", help="train-split dataset for the real-data baseline")
    p.add_argument("--grid", help="JSON grid file (methods, configs, distill settings)")
    p.add_argument("--runs", type=int, default=None, help="overrides the grid (grid default 10)")
    p.add_argument("--seed", type=int, default=None, help="overrides the grid (grid default 0)")
    p.add_argument("--out")

    p = ps["check-grad"]
    p.add_argument("model", nargs="?")
    p.add_argument("--random", type=int, default=0, help="also audit N random small models")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=64)
    p.add_argument("--eps", type=float, default=1e-3)
    p.add_argument("--tol", type=float, default=1e-3)
    return parser, ps


def _jsonable(v):
    return list(v) if isinstance(v, tuple) else v


def resolve(argv):
    """Parse ``argv`` (config file + flags) into ``(command, namespace)``."""
    parser, subparsers = build_parser()
    if not argv:
        raise UsageError("missing subcommand; see --help")
    first = parser.parse_args(argv)
    if first.command is None:
        raise UsageError("missing subcommand; see --help")
    if first.config:
        path = Path(first.config)
        if not path.is_file():
            raise ParseError("missing config file", path=str(path))
        try:
            doc = json.loads(path.read_text(errors="replace"))
        except json.JSONDecodeError as exc:
            raise ParseError(f"malformed config: {exc.msg}", path=str(path), offset=exc.pos) from exc
        if isinstance(doc, dict) and "args" in doc:
            if doc.get("command") not in (None, first.command):
                raise UsageError(f"config is for {doc.get('command')!r}, not {first.command!r}")
            doc = doc["args"]
        if not isinstance(doc, dict):
            raise ParseError("config root must be an object", path=str(path), offset=0)
        sp = subparsers[first.command]
        known = {act.dest for act in sp._actions}
        unknown = sorted(set(doc) - known - {"config", "dry_run"})
        if unknown:
            raise UsageError(f"unknown config keys for {first.command}: {unknown}")
        sp.set_defaults(**{k: tuple(v) if k in ("shape", "input_shape") else v
                           for k, v in doc.items() if k not in ("config", "dry_run")})
        first = parser.parse_args(argv)
    missing = [r for r in COMMANDS[first.command][2] if getattr(first, r, None) is None]
    if missing:
        raise UsageError(f"{first.command}: missing required {', '.join(missing)}")
    return first.command, first


def job_document(command, ns):
    args = {k: _jsonable(v) for k, v in vars(ns).items()
            if k not in ("command", "config", "dry_run")}
    return {"format": JOB_FORMAT, "command": command, "args": args}


def main(argv=None, out=None, err=None):
    out = out or sys.stdout
    err = err or sys.stderr
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        command, ns = resolve(argv)
        job = job_document(command, ns)
        if ns.dry_run:
            print(json.dumps(job, indent=1, sort_keys=True), file=out)
            return EXIT_OK
        COMMANDS[command][0](ns, out)
        if getattr(ns, "out", None):
            _sidecar(ns.out, job)
        return EXIT_OK
    except SystemExit as exc:  # --help
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    except UsageError as exc:
        return _fail(err, "usage", EXIT_USAGE, exc)
    except NumericFault as exc:
        return _fail(err, exc.code, EXIT_NUMERIC, exc)
    except QuantToolkitError as exc:
        return _fail(err, exc.code, EXIT_DATA, exc)
    except OSError as exc:
        return _fail(err, "io-error", EXIT_DATA, exc)


def _fail(err, code, status, exc):
    message = " ".join(str(exc).split()) or type(exc).__name__
    print(f"error: code={code} exit={status} message={message}", file=err)
    return status


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
