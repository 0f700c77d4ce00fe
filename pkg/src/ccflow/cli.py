"""Command line entry point: ``ccflow {gen,train,eval,sweep-seqlen,curves,stats}``.

Every command writes ``config.ini`` (the fully resolved configuration) and
``run.json`` (content hashes of the config and of every input) next to its
outputs. Exit codes: 0 ok, 1 usage, 2 data, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import ast
import configparser
import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from . import metrics, ofr
from . import scenario as sc
from . import training as T
from .errors import CCFlowError, ConfigError, ContractError, DataError, GenerationError, NumericalError, ShapeError

log = logging.getLogger("ccflow")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
SECTIONS = ("world", "model", "train")


class UsageError(CCFlowError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


# ------------------------------------------------------------------ config

def parse_value(text: str):
    low = text.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    if low in ("none", ""):
        return None
    try:
        return ast.literal_eval(text.strip())
    except (ValueError, SyntaxError):
        return text.strip()


def format_value(v) -> str:
    if isinstance(v, (list, tuple)):
        return "(" + ", ".join(format_value(x) for x in v) + ("," if len(v) == 1 else "") + ")"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def load_config(path: str | None, overrides: list[str]) -> dict[str, dict]:
    """Read an INI file and apply ``section.key=value`` overrides."""
    cfg: dict[str, dict] = {s: {} for s in SECTIONS}
    if path:
        parser = configparser.ConfigParser()
        try:
            with open(path) as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise DataError(f"cannot read config {path}: {exc}") from exc
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}") from exc
        for section in parser.sections():
            if section not in SECTIONS:
                raise UsageError(f"unknown config section [{section}]; expected one of {SECTIONS}")
            cfg[section].update({k: parse_value(v) for k, v in parser.items(section)})
    for item in overrides:
        key, sep, value = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"--set expects section.key=value with section in {SECTIONS}, got {item!r}")
        cfg[section][name.strip()] = parse_value(value)
    return cfg


def _build(cls, values: dict, what: str):
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise UsageError(f"unknown {what} keys: {', '.join(unknown)}")
    return cls(**values)


def render_config(resolved: dict[str, dict]) -> str:
    lines = []
    for section in sorted(resolved):
        lines.append(f"[{section}]")
        lines += [f"{k} = {format_value(v)}" for k, v in sorted(resolved[section].items())]
        lines.append("")
    return "\n".join(lines)


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_run_files(out: Path, command: str, resolved: dict[str, dict], inputs: dict[str, str]):
    out.mkdir(parents=True, exist_ok=True)
    text = render_config(resolved)
    (out / "config.ini").write_text(text)
    run = {"command": command, "config_sha256": hashlib.sha256(text.encode()).hexdigest(),
           "inputs": dict(sorted(inputs.items()))}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n")


def dataset_hash(root: Path) -> str:
    return sha256_file(root / "manifest.jsonl")


# ------------------------------------------------------------------ helpers

def workers() -> int:
    return max(1, int(os.environ.get("CCFLOW_THREADS", "1")))


def load_samples(data: str, split: str) -> tuple[sc.Dataset, list[sc.SampleRecord]]:
    ds = sc.Dataset(data)
    samples = ds.samples(None if split == "all" else split)
    if not samples:
        raise DataError(f"dataset {data} has no samples in split {split!r}")
    return ds, samples


def fit_to_grid(samples, size: int):
    """Center-crop samples larger than the model grid (train-on-crop protocol)."""
    H = samples[0].inputs.shape[-1]
    if H == size:
        return samples
    if H < size:
        raise ShapeError(f"samples are {H}x{H}, model expects {size}x{size}")
    return [T.center_crop(s, size) for s in samples]


def resolve_checkpoint(path: str) -> Path:
    p = Path(path)
    if p.is_dir():
        return T.best_checkpoint(p)
    if not p.exists():
        raise DataError(f"checkpoint {p} not found")
    return p


def load_for_eval(args, samples):
    ckpt = resolve_checkpoint(args.checkpoint)
    config, params, header = T.load_model(ckpt)
    samples = fit_to_grid(samples, config.grid_size)
    if samples[0].inputs.shape[1] != config.input_channels:
        raise ShapeError(f"dataset has {samples[0].inputs.shape[1]} input channels, "
                         f"checkpoint expects {config.input_channels}")
    return ckpt, config, params, header, samples


def _csv_text(rows) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


def _fmt(v) -> str:
    return metrics._fmt(v) if isinstance(v, float) else str(v)


# -------------------------------------------------------------------- svg

def line_chart_svg(xs, ys, title: str, xlabel: str = "waypoint", ylabel: str = "") -> str:
    """Plain SVG polyline chart; deterministic text, no timestamps."""
    W, H, pad = 480, 320, 48
    finite = [y for y in ys if not math.isnan(y)]
    lo, hi = (min(finite), max(finite)) if finite else (0.0, 1.0)
    if hi - lo < 1e-9:
        lo, hi = lo - 0.5, hi + 0.5
    x0, x1 = min(xs), max(xs)
    span_x = (x1 - x0) or 1

    def px(x):
        return pad + (x - x0) / span_x * (W - 2 * pad)

    def py(y):
        return H - pad - (y - lo) / (hi - lo) * (H - 2 * pad)

    pts = " ".join(f"{px(x):.2f},{py(y):.2f}" for x, y in zip(xs, ys) if not math.isnan(y))
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
           f'<rect width="{W}" height="{H}" fill="white"/>',
           f'<text x="{W / 2:.0f}" y="20" text-anchor="middle" font-family="sans-serif" font-size="14">{title}</text>',
           f'<line x1="{pad}" y1="{H - pad}" x2="{W - pad}" y2="{H - pad}" stroke="black"/>',
           f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{H - pad}" stroke="black"/>']
    for x in xs:
        out.append(f'<text x="{px(x):.2f}" y="{H - pad + 16}" text-anchor="middle" font-family="sans-serif" '
                   f'font-size="11">{x}</text>')
    for y in (lo, (lo + hi) / 2, hi):
        out.append(f'<text x="{pad - 6}" y="{py(y) + 4:.2f}" text-anchor="end" font-family="sans-serif" '
                   f'font-size="11">{y:.3f}</text>')
    out.append(f'<text x="{W / 2:.0f}" y="{H - 10}" text-anchor="middle" font-family="sans-serif" '
               f'font-size="12">{xlabel}</text>')
    if ylabel:
        out.append(f'<text x="14" y="{H / 2:.0f}" text-anchor="middle" font-family="sans-serif" font-size="12" '
                   f'transform="rotate(-90 14 {H / 2:.0f})">{ylabel}</text>')
    if pts:
        out.append(f'<polyline points="{pts}" fill="none" stroke="#1f77b4" stroke-width="2"/>')
        for x, y in zip(xs, ys):
            if not math.isnan(y):
                out.append(f'<circle cx="{px(x):.2f}" cy="{py(y):.2f}" r="3" fill="#1f77b4"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


# --------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    cfg = load_config(args.config, args.set)
    world = _build(sc.WorldConfig, {**sc.PRESETS[args.preset], **cfg["world"]}, "world") \
        if args.preset else _build(sc.WorldConfig, cfg["world"], "world")
    if args.count < 1 or not 0 <= args.val_count <= args.count:
        raise UsageError("need count >= 1 and 0 <= val-count <= count")
    out = Path(args.out)
    manifest = sc.build_dataset(world, sc.derive_seeds(args.seed, args.count), out,
                                val_count=args.val_count, workers=workers())
    resolved = {"world": world.to_dict(), "gen": {"preset": args.preset, "count": args.count,
                                                  "seed": args.seed, "val_count": args.val_count}}
    write_run_files(out, "gen", resolved, {})
    print(manifest)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    ds, train_samples = load_samples(args.data, "train")
    val_samples = ds.samples("val")
    model_over = dict(cfg["model"])
    if args.ablate:
        model_over["ablation"] = args.ablate
    if args.latent is not None:
        model_over["latent_channels"] = args.latent
    train_over = dict(cfg["train"])
    for key in ("epochs", "seed", "max_steps", "batch_size"):
        if getattr(args, key) is not None:
            train_over[key] = getattr(args, key)
    tcfg = _build(T.TrainConfig, train_over, "train")
    probe = T.center_crop(train_samples[0], tcfg.crop_size) if tcfg.crop_size else train_samples[0]
    unknown = set(model_over) - {f.name for f in dataclasses.fields(T.M.ModelConfig)}
    if unknown:
        raise UsageError(f"unknown model keys: {', '.join(sorted(unknown))}")
    model_config = T.model_config_for(probe, **model_over)
    out = Path(args.out)
    write_run_files(out, "train", {"model": model_config.to_dict(), "train": tcfg.to_dict(),
                                   "world": ds.info.get("config", {})},
                    {"dataset": dataset_hash(ds.root)})
    result = T.train(model_config, tcfg, train_samples, val_samples, out,
                     meta={"history_frames": train_samples[0].history_frames})
    for p in result.checkpoints:
        print(p)
    return EXIT_OK


def _reports(args, samples):
    if args.oracle:
        return None, T.oracle_reports(samples)
    ckpt, config, params, _, samples = load_for_eval(args, samples)
    return ckpt, T.evaluate_samples(params, config, samples)


def _eval_inputs(args, ds, ckpt) -> dict:
    inputs = {"dataset": dataset_hash(ds.root)}
    if ckpt is not None:
        inputs["checkpoint"] = sha256_file(ckpt)
    return inputs


def cmd_eval(args) -> int:
    ds, samples = load_samples(args.data, args.split)
    ckpt, reports = _reports(args, samples)
    out = Path(args.out)
    write_run_files(out, "eval", {"eval": {"split": args.split, "oracle": args.oracle,
                                           "checkpoint": str(ckpt) if ckpt else None}},
                    _eval_inputs(args, ds, ckpt))
    ids = [ds.records[i]["seed"] for i in (range(len(ds)) if args.split == "all" else ds.split(args.split))]
    (out / "report.csv").write_text(metrics.report_csv(reports, ids))
    means = metrics.aggregate(reports).means()
    print(" ".join(f"{c}={means[c]:.4f}" for c in metrics.COLUMNS))
    return EXIT_OK


def spearman(xs, ys) -> float:
    pairs = [(x, y) for x, y in zip(xs, ys) if not math.isnan(y)]
    if len(pairs) < 2 or len({y for _, y in pairs}) < 2:
        return float("nan")
    return float(spearmanr(*zip(*pairs)).statistic)


def cmd_sweep(args) -> int:
    ds, samples = load_samples(args.data, args.split)
    ckpt, config, params, header, samples = load_for_eval(args, samples)
    available = samples[0].history_frames
    lengths = args.lengths or list(range(1, available + 1))
    bad = [L for L in lengths if not 1 <= L <= available]
    if bad:
        raise UsageError(f"input lengths {bad} outside the {available} available history frames")
    trained = header.get("extra", {}).get("history_frames") or available
    rows = [("mode", "input_length") + metrics.COLUMNS]
    summary = [("mode", "reset_every", "spearman_length_vs_observed_auc")]
    for mode, reset in (("carry", None), ("reset", trained)):
        aucs = []
        for L in lengths:
            means = metrics.aggregate(T.evaluate_samples(params, config, samples, input_length=L,
                                                         reset_every=reset)).means()
            aucs.append(means["observed_auc"])
            rows.append((mode, L) + tuple(_fmt(means[c]) for c in metrics.COLUMNS))
        summary.append((mode, reset if reset is not None else "none", _fmt(spearman(lengths, aucs))))
    out = Path(args.out)
    write_run_files(out, "sweep-seqlen", {"sweep": {"split": args.split, "lengths": tuple(lengths),
                                                    "checkpoint": str(ckpt), "reset_every": trained}},
                    _eval_inputs(args, ds, ckpt))
    (out / "sweep.csv").write_text(_csv_text(rows))
    (out / "sweep_summary.csv").write_text(_csv_text(summary))
    print(_csv_text(summary), end="")
    return EXIT_OK


def cmd_curves(args) -> int:
    ds, samples = load_samples(args.data, args.split)
    ckpt, reports = _reports(args, samples)
    agg = metrics.aggregate(reports)
    out = Path(args.out)
    write_run_files(out, "curves", {"curves": {"split": args.split, "oracle": args.oracle,
                                               "checkpoint": str(ckpt) if ckpt else None}},
                    _eval_inputs(args, ds, ckpt))
    rows = [("waypoint",) + metrics.COLUMNS]
    rows += [(k + 1,) + tuple(_fmt(v) for v in agg.values[k]) for k in range(agg.waypoints)]
    (out / "curves.csv").write_text(_csv_text(rows))
    xs = list(range(1, agg.waypoints + 1))
    for j, name in enumerate(metrics.COLUMNS):
        (out / f"{name}.svg").write_text(line_chart_svg(xs, [float(v) for v in agg.values[:, j]], name,
                                                        ylabel=name))
    print(out / "curves.csv")
    return EXIT_OK


def cmd_stats(args) -> int:
    ds, samples = load_samples(args.data, args.split)
    report = sc.dataset_stats(samples)
    out = Path(args.out)
    write_run_files(out, "stats", {"stats": {"split": args.split}}, {"dataset": dataset_hash(ds.root)})
    rows = [("bin_lo", "bin_hi", "count", "fraction")]
    rows += [(lo, hi, c, _fmt(f)) for lo, hi, c, f in report.hist_rows()]
    (out / "flow_hist.csv").write_text(_csv_text(rows))
    ofr.write(out / "density.ofr", np.stack([report.observed_density, report.occluded_density]),
              ["observed_density", "occluded_density"], {"samples": report.samples})
    (out / "stats.json").write_text(json.dumps({"samples": report.samples,
                                                "occupied_cells": report.occupied_cells,
                                                "histogram_total": int(report.flow_hist.sum())},
                                               indent=2, sort_keys=True) + "\n")
    print(out / "flow_hist.csv")
    return EXIT_OK


# ----------------------------------------------------------------- parser

def _lengths(text: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ccflow", description="Occupancy and flow forecasting experiments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, data=True):
        sp.add_argument("--config", help="INI file with [world], [model] and [train] sections")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
        sp.add_argument("--out", required=True)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory")

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    common(g, data=False)
    g.add_argument("--preset", choices=sorted(sc.PRESETS))
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-count", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--ablate", choices=[a for a in T.M.ABLATIONS if a != "none"])
    t.add_argument("--latent", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("eval", cmd_eval, "per-waypoint metric report"),
                                 ("curves", cmd_curves, "metrics against forecast horizon"),
                                 ("sweep-seqlen", cmd_sweep, "metrics against input sequence length")):
        e = sub.add_parser(name, help=helptext)
        common(e)
        e.add_argument("--split", default="val", choices=("train", "val", "all"))
        if name == "sweep-seqlen":
            e.add_argument("--checkpoint", required=True, help="checkpoint file or run directory")
            e.add_argument("--lengths", type=_lengths, help="comma-separated input lengths")
        else:
            src = e.add_mutually_exclusive_group(required=True)
            src.add_argument("--checkpoint", help="checkpoint file or run directory")
            src.add_argument("--oracle", action="store_true", help="score the ground truth itself")
        e.set_defaults(func=func)

    s = sub.add_parser("stats", help="dataset distribution report")
    common(s)
    s.add_argument("--split", default="all", choices=("train", "val", "all"))
    s.set_defaults(func=cmd_stats)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    T.configure_threads()
    try:
        return args.func(args)
    except NumericalError as exc:
        print(f"ccflow: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"ccflow: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, ShapeError, GenerationError) as exc:
        print(f"ccflow: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
