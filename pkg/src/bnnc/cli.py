"""Command-line interface: ``bnnc <command> [options]``.

Exit codes: 0 success, 2 usage error, 3 data error, 4 compile error,
5 training divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import analysis, datasets
from .compiler import (
    CompileError,
    QuantPlan,
    SerializationError,
    compile_model,
    load_compiled,
    save_compiled,
    to_bytes,
)
from .fixedpoint import FormatError, parse_format
from .kernels import run_batch
from .nn import (
    ModelFormatError,
    ShapeError,
    accuracy,
    confusion_matrix,
    load_model,
    model_forward,
    per_class_accuracy,
    roc_auc,
    save_model,
)
from .training import (
    VARIANTS,
    TrainingError,
    build_model,
    recipe,
    train,
    variant_config,
    width_search,
    write_history_csv,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_COMPILE, EXIT_DIVERGED = 0, 2, 3, 4, 5
DEFAULT_ARCH = {"mnist": [784, 128, 128, 128, 10], "jet": [16, 64, 32, 32, 5]}
log = logging.getLogger("bnnc")


class UsageError(Exception):
    pass


# -- helpers -----------------------------------------------------------------

def _precision(text: str):
    try:
        return parse_format(text)
    except FormatError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _ii_list(text: str) -> list[int]:
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            lo, hi = part.split("..")
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    if not out or min(out) < 1:
        raise argparse.ArgumentTypeError(f"bad II list {text!r}")
    return out


def _arch(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad architecture {text!r}") from None


def _override(text: str):
    idx, _, fmt = text.partition("=")
    try:
        return int(idx), parse_format(fmt)
    except (ValueError, FormatError):
        raise argparse.ArgumentTypeError(f"override must look like 3=fixed<16,6>, got {text!r}") from None


def _candidates(text: str) -> dict:
    """``"1:64,128;2:32,64"`` -> {1: [64, 128], 2: [32, 64]}."""
    out = {}
    for block in text.split(";"):
        if not block.strip():
            continue
        pos, _, widths = block.partition(":")
        out[int(pos)] = [int(w) for w in widths.split(",")]
    return out


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)


def _run_config(args) -> dict:
    return {k: (str(v) if not isinstance(v, (int, float, str, bool, list, type(None))) else v)
            for k, v in sorted(vars(args).items()) if k != "func"}


def _save_run_config(args, out_path) -> None:
    if out_path:
        _write_json(str(out_path) + ".run.json", _run_config(args))


def _schedule(args) -> dict:
    """Schedule flags the user set; unset ones fall back to the variant recipe."""
    keys = ("lr", "lr_decay", "epochs")
    return {k: getattr(args, k) for k in keys if getattr(args, k, None) is not None}


def _load_splits(args, model_meta: dict | None = None) -> dict:
    """Train/val/test splits for the requested dataset, deterministic in the split seed."""
    split_seed = args.split_seed
    if args.dataset == "mnist":
        parts = datasets.load_mnist_dir(args.data_dir, split_seed=split_seed)
        tr, va = datasets.split_indices(len(parts["train"]), [0.75, 0.25], split_seed)
        return {"train": parts["train"].subset(tr, "train"),
                "val": parts["train"].subset(va, "val"), "test": parts["test"]}
    if not args.jet_csv:
        raise UsageError("--jet-csv is required for --dataset jet")
    pool = datasets.load_jet_csv(args.jet_csv, standardize=False)
    names = ["train", "val", "test"]
    splits = datasets.split_dataset(pool, [0.6, 0.2, 0.2], names, split_seed)
    std = (model_meta or {}).get("standardization")
    if std is None:
        datasets.standardize_splits(splits)
    else:
        for ds in splits.values():
            ds.x = (ds.x - np.asarray(std["mean"])) / np.asarray(std["std"])
            ds.meta["standardization"] = std
    return splits


def _plan(args) -> QuantPlan:
    overrides = dict(args.override or [])
    kw = dict(default=args.precision, overrides=overrides, drop_softmax=args.drop_softmax,
              softmax_mode=args.softmax_mode)
    if args.io_precision is not None:
        kw["io"] = args.io_precision
    if args.softmax_lut is not None:
        kw["softmax_lut"] = args.softmax_lut
    return QuantPlan(**kw)


def _read_inputs(args, width: int) -> np.ndarray:
    if args.zero:
        return np.zeros((1, width))
    if args.input is None:
        raise UsageError("give --input <file.npy|file.csv> or --zero")
    path = args.input
    if path.endswith(".npy"):
        x = np.load(path)
    else:
        x = np.loadtxt(path, delimiter=",", ndmin=2)
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


# -- commands ----------------------------------------------------------------

def cmd_train(args) -> int:
    quant = variant_config(args.variant)
    splits = _load_splits(args)
    arch = args.arch or DEFAULT_ARCH[args.dataset]
    cfg = recipe(args.variant, **_schedule(args), optimizer=args.optimizer,
                 batch_size=args.batch_size, seed=args.seed)
    model = build_model(arch, quant, seed=args.seed)
    trained, history = train(model, quant, cfg, (splits["train"].x, splits["train"].y),
                             (splits["val"].x, splits["val"].y))
    trained.meta.update({"variant": args.variant, "dataset": args.dataset,
                         "split_seed": args.split_seed, "run_config": _run_config(args)})
    if "standardization" in splits["train"].meta:
        trained.meta["standardization"] = splits["train"].meta["standardization"]
    out = args.out or f"{args.variant}.json"
    save_model(trained, out)
    write_history_csv(history, args.history or os.path.splitext(out)[0] + "_history.csv")
    test_acc = accuracy(np.argmax(model_forward(trained, splits["test"].x), axis=1),
                        splits["test"].y)
    print(f"saved {out}; final val_acc {history[-1]['val_acc']:.4f}; test_acc {test_acc:.4f}")
    return EXIT_OK


def cmd_compile(args) -> int:
    model = load_model(args.model)
    compiled = compile_model(model, _plan(args))
    out = args.out or os.path.splitext(args.model)[0] + ".bnnc"
    save_compiled(compiled, out)
    _save_run_config(args, out)
    for p in compiled.precisions:
        print(p.describe())
    print(f"saved {out} ({len(to_bytes(compiled))} bytes)")
    return EXIT_OK


def _load_runnable(args):
    """Return ``(compiled or None, model or None)``."""
    compiled = load_compiled(args.compiled) if args.compiled else None
    model = load_model(args.model) if args.model else None
    if compiled is None and model is None:
        raise UsageError("give --model and/or --compiled")
    return compiled, model


def cmd_infer(args) -> int:
    compiled, model = _load_runnable(args)
    width = compiled.input_width if compiled is not None else model.input_width
    x = _read_inputs(args, width)
    if compiled is not None:
        scores, cls = run_batch(compiled, x)
    else:
        scores = model_forward(model, x)
        cls = np.argmax(scores, axis=1)
    for s, c in zip(scores, cls):
        print(json.dumps({"scores": [float(v) for v in s], "class": int(c)}))
    return EXIT_OK


def _metrics(scores: np.ndarray, y: np.ndarray, classes: int) -> dict:
    pred = np.argmax(scores, axis=1)
    aucs = []
    for c in range(classes):
        pos = y == c
        aucs.append(roc_auc(scores[:, c], pos) if 0 < pos.sum() < len(y) else None)
    return {"accuracy": accuracy(pred, y),
            "per_class_accuracy": [per_class_accuracy(pred, y, c, classes) for c in range(classes)],
            "per_class_auc": aucs,
            "confusion_matrix": confusion_matrix(pred, y, classes).tolist(),
            "confusion_matrix_normalized": confusion_matrix(pred, y, classes, True).tolist()}


def cmd_evaluate(args) -> int:
    compiled, model = _load_runnable(args)
    splits = _load_splits(args, model.meta if model is not None else None)
    ds = splits[args.split]
    classes = compiled.classes if compiled is not None else model.classes
    report = {"split": args.split, "examples": len(ds)}
    if model is not None:
        report["float"] = _metrics(model_forward(model, ds.x), ds.y, classes)
    if compiled is not None:
        scores, _ = run_batch(compiled, ds.x, threads=args.threads)
        report["compiled"] = _metrics(scores, ds.y, classes)
    if model is not None and compiled is not None:
        report["accuracy_drift"] = report["compiled"]["accuracy"] - report["float"]["accuracy"]
    if args.out:
        _write_json(args.out, report)
        _save_run_config(args, args.out)
    summary = {k: v["accuracy"] for k, v in report.items() if isinstance(v, dict)}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_profile(args) -> int:
    compiled, model = _load_runnable(args)
    splits = _load_splits(args, model.meta if model is not None else None)
    calib = splits[args.split].x[:args.samples]
    target = model if model is not None else compiled
    profiles = analysis.profile(target, _plan(args), calib)
    out = args.out or "profile.csv"
    analysis.write_profile_csv(profiles, out)
    if args.json:
        analysis.write_profile_json(profiles, args.json)
    _save_run_config(args, out)
    for p in profiles:
        flag = "  OVERFLOW" if p.overflow_frac > 0 else ""
        print(f"[{p.layer}] {p.kind}: [{p.min:.3g}, {p.max:.3g}] alloc [{p.alloc_lo:.3g}, "
              f"{p.alloc_hi:.3g}] overflow {p.overflow_frac:.4f}{flag}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    if args.compiled:
        compiled = load_compiled(args.compiled)
    elif args.model:
        compiled = compile_model(load_model(args.model), _plan(args))
    else:
        raise UsageError("give --compiled or --model")
    cfg = analysis.load_cost_config(args.cost_config)
    curve = analysis.ii_scan(compiled, args.ii, cfg)
    out = args.out or "scan.csv"
    analysis.write_scan_csv(curve, out)
    _save_run_config(args, out)
    print("heuristic pre-synthesis estimate; units are model scores, not device percentages")
    for e in curve:
        print(f"ii={e.ii} latency={e.latency_ns:.0f}ns dsp={e.dsp_count} lut={e.lut_score:.0f} "
              f"ff={e.ff_score:.0f} bram={e.bram_score}")
    return EXIT_OK


def cmd_search(args) -> int:
    quant = variant_config(args.variant)
    splits = _load_splits(args)
    arch = args.arch or DEFAULT_ARCH[args.dataset]
    cfg = recipe(args.variant, **_schedule(args), batch_size=args.batch_size, seed=args.seed)
    result = width_search(arch, quant, args.budget, cfg, (splits["train"].x, splits["train"].y),
                          (splits["val"].x, splits["val"].y), _candidates(args.candidates),
                          seed=args.seed)
    report = {"best_arch": result.best_arch,
              "records": [{"arch": r.arch, "val_loss": r.val_loss, "val_acc": r.val_acc}
                          for r in result.records]}
    out = args.out or "search.json"
    _write_json(out, report)
    _save_run_config(args, out)
    print(json.dumps({"best_arch": result.best_arch}))
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def _add_common(p) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", help="JSON file of option defaults; flags override it")
    p.add_argument("--out", help="output path")
    p.add_argument("-v", "--verbose", action="store_true")


def _add_data(p) -> None:
    p.add_argument("--dataset", choices=["mnist", "jet"], default="mnist")
    p.add_argument("--data-dir", default=os.environ.get("BNNC_MNIST_DIR", "data/mnist"))
    p.add_argument("--jet-csv")
    p.add_argument("--split-seed", type=int, default=0)


def _add_plan(p) -> None:
    p.add_argument("--precision", type=_precision, default=parse_format("fixed<16,6>"),
                   help="default format, e.g. fixed<16,6>")
    p.add_argument("--io-precision", type=_precision)
    p.add_argument("--override", type=_override, action="append",
                   help="per-layer format, e.g. 3=fixed<18,8> (repeatable)")
    p.add_argument("--softmax-lut", type=_precision)
    p.add_argument("--softmax-mode", choices=["max_subtract", "pairwise"], default="max_subtract")
    p.add_argument("--drop-softmax", action="store_true")


def _add_models(p) -> None:
    p.add_argument("--model", help="trained model JSON")
    p.add_argument("--compiled", help="compiled model file")


def _add_training(p) -> None:
    p.add_argument("--variant", choices=sorted(VARIANTS), default="baseline")
    p.add_argument("--arch", type=_arch, help="comma-separated widths, input to classes")
    p.add_argument("--epochs", type=int, help="default: the variant recipe")
    p.add_argument("--lr", type=float, help="default: the variant recipe")
    p.add_argument("--lr-decay", type=float, help="per-epoch factor; default: the variant recipe")
    p.add_argument("--batch-size", type=int, default=128)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnnc", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model variant")
    _add_common(p), _add_data(p), _add_training(p)
    p.add_argument("--optimizer", choices=["adam", "sgd"], default="adam")
    p.add_argument("--history", help="history CSV path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("compile", help="lower a trained model")
    _add_common(p), _add_plan(p)
    p.add_argument("model")
    p.set_defaults(func=cmd_compile)

    p = sub.add_parser("infer", help="run inference on inputs")
    _add_common(p), _add_models(p)
    p.add_argument("--input")
    p.add_argument("--zero", action="store_true", help="use an all-zero input")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="accuracy, per-class AUC and confusion matrix")
    _add_common(p), _add_data(p), _add_models(p)
    p.add_argument("--split", choices=["train", "val", "test"], default="test")
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("profile", help="per-layer output ranges against allocated formats")
    _add_common(p), _add_data(p), _add_models(p), _add_plan(p)
    p.add_argument("--split", choices=["train", "val", "test"], default="val")
    p.add_argument("--samples", type=int, default=2000)
    p.add_argument("--json", help="also write the profile as JSON")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("estimate", help="resource/latency scan over initiation intervals")
    _add_common(p), _add_models(p), _add_plan(p)
    p.add_argument("--ii", type=_ii_list, default=[1], help="e.g. 1..64 or 1,2,4")
    p.add_argument("--cost-config", help="cost-model JSON (defaults to the bundled one)")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("search", help="random search over hidden widths")
    _add_common(p), _add_data(p), _add_training(p)
    p.add_argument("--budget", type=int, default=4)
    p.add_argument("--candidates", default="1:64,128,256;2:64,128,256;3:64,128,256")
    p.set_defaults(func=cmd_search)
    return parser


def _apply_config_file(parser, argv) -> argparse.Namespace:
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        with open(args.config) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        parser.error(f"cannot read config {args.config}: {exc}")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest: a for a in sub._actions}
    defaults = {}
    for key, value in values.items():
        dest = key.replace("-", "_")
        if dest not in known:
            parser.error(f"unknown option {key!r} in {args.config}")
        action = known[dest]
        if action.type is not None and isinstance(value, str):
            value = action.type(value)
        elif action.type is not None and isinstance(value, list) and dest != "arch":
            value = [action.type(v) for v in value]
        defaults[dest] = value
    sub.set_defaults(**defaults)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config_file(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"bnnc: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except CompileError as exc:
        print(f"bnnc: compile error: {exc}", file=sys.stderr)
        return EXIT_COMPILE
    except TrainingError as exc:
        print(f"bnnc: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (datasets.DataError, ModelFormatError, SerializationError, ShapeError, OSError) as exc:
        print(f"bnnc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
