"""Operator command line: dataset generation, training, evaluation, gradient
checking, and SVG plots from metrics logs.

Exit codes: 0 success, 2 I/O or format errors, 3 bad arguments or
configuration, 4 training divergence, 5 gradient-check failure.

ADLD_THREADS pins BLAS thread counts before numpy loads; 0 means strict
single-threaded determinism mode (also the default: the workloads here are
faster without BLAS threading).
"""

import os
import sys


def _configure_threads() -> None:
    raw = os.environ.get("ADLD_THREADS", "0")
    try:
        n = max(1, int(raw)) if raw != "0" else 1
    except ValueError:
        n = 1
    for var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, str(n))


_configure_threads()

import argparse
import json
from pathlib import Path

import numpy as np

from . import evaluation as ev
from . import gradcheck as gc
from . import losses as lo
from . import networks as nets
from . import synthdata as sd
from . import training as tr
from .tensor import FormatError

EXIT_OK = 0
EXIT_IO = 2
EXIT_ARGS = 3
EXIT_DIVERGED = 4
EXIT_GRADCHECK = 5


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# Config files: flat key=value with [model]/[train]/[data]/[eval] sections

CONFIG_DEFAULTS = {
    "model": {
        "image_size": "176",
        "au_count": "6",
        "au_set": "bp4d6",
        "width_scale": "1.0",
    },
    "train": {
        "mode": "adld",
        "batch_size": "16",
        "epochs": "10",
        "iters_per_epoch": "0",
        "seed": "1",
        "lambda_l": "0.6",
        "lambda_ad_l": "400",
        "lambda_ad_f": "1.2",
        "lambda_r": "3",
        "lambda_cc": "40",
        "lr_a": "5e-5",
        "lr_b": "1e-4",
        "beta1_a": "0.5",
        "beta2_a": "0.9",
        "beta1_b": "0.95",
        "beta2_b": "0.999",
        "clip_norm": "10",
        "checkpoint_every": "1",
    },
    "data": {
        "source_dir": "",
        "target_dir": "",
        "flip_rate": "0.25",
    },
    "eval": {
        "feed": "latent",
        "threshold": "0.5",
        "batch_size": "64",
    },
}


def parse_config_file(path) -> dict:
    """Sectioned key=value file; unknown sections or keys are rejected."""
    values = {s: dict(d) for s, d in CONFIG_DEFAULTS.items()}
    section = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if line.startswith("[") and line.endswith("]"):
                section = line[1:-1].strip()
                if section not in values:
                    raise UsageError(f"{path}:{lineno}: unknown section [{section}]")
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value, got {line!r}")
            if section is None:
                raise UsageError(f"{path}:{lineno}: key outside any section")
            key, val = (part.strip() for part in line.split("=", 1))
            if key not in values[section]:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r} in [{section}]")
            values[section][key] = val
    return values


def effective_config_text(values: dict) -> str:
    lines = []
    for section in sorted(values):
        lines.append(f"[{section}]")
        for key in sorted(values[section]):
            lines.append(f"{key}={values[section][key]}")
        lines.append("")
    return "\n".join(lines)


def train_config_from_values(values: dict, mode: str | None = None) -> tr.TrainConfig:
    m = values["model"]
    t = values["train"]
    weights = lo.LossWeights(
        lambda_l=float(t["lambda_l"]),
        lambda_ad_l=float(t["lambda_ad_l"]),
        lambda_ad_f=float(t["lambda_ad_f"]),
        lambda_r=float(t["lambda_r"]),
        lambda_cc=float(t["lambda_cc"]),
    )
    return tr.TrainConfig(
        mode=mode or t["mode"],
        image_size=int(m["image_size"]),
        au_count=int(m["au_count"]),
        au_set=m["au_set"],
        width_scale=float(m["width_scale"]),
        batch_size=int(t["batch_size"]),
        epochs=int(t["epochs"]),
        iters_per_epoch=int(t["iters_per_epoch"]),
        seed=int(t["seed"]),
        weights=weights,
        lr_a=float(t["lr_a"]),
        lr_b=float(t["lr_b"]),
        beta1_a=float(t["beta1_a"]),
        beta2_a=float(t["beta2_a"]),
        beta1_b=float(t["beta1_b"]),
        beta2_b=float(t["beta2_b"]),
        clip_norm=float(t["clip_norm"]),
        checkpoint_every=int(t["checkpoint_every"]),
        eval_feed=values["eval"]["feed"],
    )


# ---------------------------------------------------------------------------
# Commands


def cmd_gen_data(args) -> int:
    if args.count <= 0:
        raise UsageError(f"--count must be positive, got {args.count}")
    if args.size % 4 != 0 or args.size < 32:
        raise UsageError(f"--size must be >= 32 and divisible by 4, got {args.size}")
    out = Path(args.out)
    manifest = sd.generate_dataset(
        out, args.domain, args.count, args.seed, args.size,
        au_set=args.au_set, split=args.split, flip_rate=args.flip_rate,
    )
    records = sd.read_dataset(out)
    rates = sd.empirical_rates(records, "aus")
    payload = {
        "manifest": str(manifest),
        "count": len(records),
        "au_set": args.au_set,
        "empirical_rates": {str(au): round(float(r), 4) for au, r in zip(sd.AU_SETS[args.au_set]["aus"], rates)},
    }
    print(json.dumps(payload))
    return EXIT_OK


def cmd_train(args) -> int:
    values = parse_config_file(args.config) if args.config else {s: dict(d) for s, d in CONFIG_DEFAULTS.items()}
    if args.source:
        values["data"]["source_dir"] = args.source
    if args.target:
        values["data"]["target_dir"] = args.target
    if args.mode:
        if args.mode not in tr.MODES:
            raise UsageError(f"unknown mode {args.mode!r}; choose from {sorted(tr.MODES)}")
        values["train"]["mode"] = args.mode
    if args.seed is not None:
        values["train"]["seed"] = str(args.seed)
    try:
        config = train_config_from_values(values)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if not values["data"]["source_dir"] or not values["data"]["target_dir"]:
        raise UsageError("--source and --target dataset directories are required")
    source = sd.read_dataset(values["data"]["source_dir"])
    target = sd.read_dataset(values["data"]["target_dir"])
    for name, recs in (("source", source), ("target", target)):
        labelled = [r for r in recs if r.aus is not None]
        if labelled and labelled[0].aus.size != config.au_count:
            raise UsageError(
                f"{name} dataset carries {labelled[0].aus.size} AUs but the config expects {config.au_count}"
            )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "effective.cfg").write_text(effective_config_text(values))
    try:
        final = tr.train(config, source, target, out, resume=args.resume)
    except lo.DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(json.dumps({"checkpoint": str(final), "metrics": str(out / "metrics.csv")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    params, _, meta = nets.load_checkpoint(args.checkpoint)
    records = sd.read_dataset(args.data)
    labelled = [r for r in records if r.aus is not None]
    if not labelled:
        raise UsageError(f"dataset {args.data} carries no AU labels to evaluate against")
    report = ev.evaluate_dataset(
        labelled,
        params,
        args.domain,
        feed=args.feed,
        threshold=args.threshold,
        mode=str(meta.get("mode", "")),
    )
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    ops = None if args.op in (None, "all") else [args.op]
    try:
        results = gc.run_checks(ops=ops, seeds=args.seeds, base_seed=args.seed, corrupt=args.corrupt)
    except KeyError as exc:
        raise UsageError(str(exc)) from exc
    print(json.dumps({k: float(v) for k, v in results.items()}, indent=1))
    failures = [k for k, v in results.items() if v >= gc.TOLERANCE]
    if args.corrupt:
        if "corrupted_tanh" in failures:
            print("corrupted backward rule detected, as expected", file=sys.stderr)
            return EXIT_GRADCHECK
        print("mutation test failed to trip", file=sys.stderr)
        return EXIT_GRADCHECK
    if failures:
        print(f"gradient checks failed: {failures}", file=sys.stderr)
        return EXIT_GRADCHECK
    return EXIT_OK


_SVG_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#e377c2")


def cmd_plot(args) -> int:
    rows = tr.read_metrics(args.metrics)
    if not rows:
        raise UsageError(f"{args.metrics} has no data rows")
    series = [s.strip() for s in args.series.split(",") if s.strip()]
    for name in series:
        if name not in tr.CSV_COLUMNS:
            raise UsageError(f"unknown series {name!r}; choose from {tr.CSV_COLUMNS[2:]}")
    width, height, margin = 720, 420, 50
    xs = [r["iter"] for r in rows]
    polylines = []
    all_vals = []
    for name in series:
        pts = [(x, r[name]) for x, r in zip(xs, rows) if r[name] is not None]
        if not pts:
            raise UsageError(f"series {name!r} is empty in this log")
        polylines.append((name, pts))
        all_vals.extend(v for _, v in pts)
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(all_vals), max(all_vals)
    if x_hi == x_lo:
        x_hi = x_lo + 1
    if y_hi == y_lo:
        y_hi = y_lo + 1

    def sx(x):
        return margin + (x - x_lo) / (x_hi - x_lo) * (width - 2 * margin)

    def sy(y):
        return height - margin - (y - y_lo) / (y_hi - y_lo) * (height - 2 * margin)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{margin}" y1="{height - margin}" x2="{width - margin}" y2="{height - margin}" stroke="black"/>',
        f'<line x1="{margin}" y1="{margin}" x2="{margin}" y2="{height - margin}" stroke="black"/>',
        f'<text x="{width // 2}" y="{height - 12}" font-size="12" text-anchor="middle">iteration</text>',
        f'<text x="{margin}" y="{margin - 10}" font-size="11">{y_hi:.4g}</text>',
        f'<text x="{margin}" y="{height - margin + 14}" font-size="11">{y_lo:.4g}</text>',
    ]
    for k, (name, pts) in enumerate(polylines):
        color = _SVG_COLORS[k % len(_SVG_COLORS)]
        coords = " ".join(f"{sx(x):.2f},{sy(v):.2f}" for x, v in pts)
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{coords}"/>')
        parts.append(
            f'<text x="{width - margin + 4}" y="{margin + 16 * k}" font-size="11" fill="{color}">{name}</text>'
        )
    parts.append("</svg>")
    Path(args.out).write_text("\n".join(parts))
    print(json.dumps({"plot": str(args.out), "series": series}))
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> _Parser:
    parser = _Parser(prog="adld", description="AU label transfer through a latent feature domain")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--domain", required=True, choices=["source", "target"])
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=176, help="crop size the dataset is meant for")
    g.add_argument("--au-set", default="bp4d6", choices=sorted(sd.AU_SETS))
    g.add_argument("--split", default="train", choices=sorted(sd.SPLIT_POOLS))
    g.add_argument("--flip-rate", type=float, default=0.25)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--source")
    t.add_argument("--target")
    t.add_argument("--out", required=True)
    t.add_argument("--mode")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint directory to resume from")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--domain", required=True, choices=["source", "target"])
    e.add_argument("--feed", default="latent", choices=["latent", "raw"])
    e.add_argument("--threshold", type=float, default=0.5)
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="finite-difference checks for every op")
    c.add_argument("--op", default="all")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--corrupt", action="store_true", help="negative test: corrupt a backward rule")
    c.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("plot", help="SVG line chart from a metrics log")
    p.add_argument("--metrics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--series", required=True, help="comma-separated CSV column names")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS
    except (FileNotFoundError, FormatError, sd.ManifestError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ARGS


if __name__ == "__main__":
    sys.exit(main())
