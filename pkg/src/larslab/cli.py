"""``larslab`` command line: memscan, gradcheck, train, estimate, niah.

Exit codes: 0 success, 1 runtime or numerical failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from dataclasses import replace
from pathlib import Path

from larslab import __version__
from larslab import config as C
from larslab import engine as E
from larslab.adapters import attach
from larslab.harness import (CSV_COLUMNS, TrainingDiverged, adapter_gradcheck, measure_step,
                             run_point, sweep, train, write_csv)
from larslab.memory import estimate_peak, fit_growth_rate
from larslab.tasks import make_task
from larslab.transformer import ConfigError, build_backbone, site_dims

EXIT_OK, EXIT_FAIL, EXIT_USAGE = 0, 1, 2
GRADCHECK_TOL = 1e-5
_UNITS = {"": 1, "B": 1, "KB": 1024, "MB": 1024 ** 2, "GB": 1024 ** 3}


class UsageError(Exception):
    pass


def parse_bytes(text: str) -> int:
    """``"1KB"`` -> 1024. Units are binary: B, KB, MB, GB."""
    m = re.fullmatch(r"\s*(\d+(?:\.\d+)?)\s*([KMG]?B?)\s*", text.upper())
    if not m:
        raise argparse.ArgumentTypeError(f"bad byte size {text!r} (try 512MB)")
    return int(float(m.group(1)) * _UNITS[m.group(2)])


def parse_list(text: str, cast=str) -> list:
    items = [t.strip() for t in text.split(",") if t.strip()]
    try:
        return [cast(t) for t in items]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad list {text!r}") from None


def _int_list(text):
    return parse_list(text, int)


# --------------------------------------------------------------------------
# config plumbing
# --------------------------------------------------------------------------

def _load_config(args) -> C.ExperimentConfig:
    cfg = C.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    adapter = dict(cfg.adapter)
    for key in ("R", "pooling", "gelu_position"):
        val = getattr(args, key, None)
        if val is not None:
            adapter[key] = val
    if getattr(args, "targets", None):
        adapter["targets"] = parse_list(args.targets)
    train_over = {k: v for k, v in (("steps", getattr(args, "steps", None)),
                                     ("lr", getattr(args, "lr", None))) if v is not None}
    try:
        return replace(cfg, adapter=adapter, train=replace(cfg.train, **train_over))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _labels(text: str | None, default) -> list[str]:
    labels = parse_list(text) if text is not None else list(default)
    for label in labels:
        C.check_adapter_label(label)
    if not labels:
        raise UsageError("no adapters given")
    return labels


def _check_writable(path) -> Path:
    path = Path(path)
    parent = path.parent if str(path.parent) else Path(".")
    if not parent.is_dir() or not os.access(parent, os.W_OK) or path.is_dir():
        raise UsageError(f"cannot write to {path}")
    return path


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------

def cmd_memscan(args) -> int:
    cfg = _load_config(args)
    out = _check_writable(args.out)
    if args.S_grid is not None:
        dimension, grid = "S", args.S_grid
    else:
        dimension = args.dimension or cfg.sweep.dimension
        grid = args.grid if args.grid is not None else list(cfg.sweep.grid)
    if not grid:
        raise UsageError("empty sweep grid")
    if dimension == "S" and len(set(grid)) != len(grid):
        raise UsageError("duplicate S values in grid")
    labels = _labels(args.adapters, cfg.sweep.adapters)
    if args.batch is not None:
        cfg = replace(cfg, sweep=replace(cfg.sweep, batch_size=args.batch))
    rows = sweep(dimension, grid, cfg, labels, train_run=args.train, budget=args.budget,
                 timing=args.timing, jobs=args.jobs)
    try:
        write_csv(rows, out)
    except OSError as exc:
        raise UsageError(f"cannot write {out}: {exc}") from None
    print(f"wrote {len(rows)} rows to {out}")

    failed = sum(1 for r in rows if r["step_peak_adapter_bytes"] == "error")
    if dimension == "S" and len(grid) >= 3:
        _report_slopes(rows, labels, grid)
    return EXIT_FAIL if failed else EXIT_OK


def _report_slopes(rows, labels, grid) -> None:
    per = len(grid)
    total_slopes = {}
    for i, label in enumerate(labels):
        chunk = rows[i * per:(i + 1) * per]
        if any(not isinstance(r["step_peak_adapter_bytes"], int) for r in chunk):
            print(f"{label:13s} slope: n/a (unmeasured rows)")
            continue
        ad = fit_growth_rate([(r["S"], r["step_peak_adapter_bytes"]) for r in chunk])
        tot = fit_growth_rate([(r["S"], r["step_peak_adapter_bytes"] + r["step_peak_base_bytes"])
                               for r in chunk])
        total_slopes[label] = tot[0]
        print(f"{label:13s} adapter slope {ad[0]:12.4f} B/token  R2 {ad[2]:.6f}   "
              f"total slope {tot[0]:14.4f} B/token")
    lars = next((lb for lb in ("lars", "lars-fixed") if lb in total_slopes), None)
    if lars and "lora" in total_slopes and total_slopes["lora"] > 0:
        cut = (total_slopes["lora"] - total_slopes[lars]) / total_slopes["lora"]
        print(f"growth-rate reduction {lars} vs lora: {100 * cut:.2f}%")


def cmd_gradcheck(args) -> int:
    cfg = _load_config(args)
    label = args.adapter or cfg.adapter.get("kind", "lars")
    spec = cfg.spec(label)
    worst = 0.0
    for site in spec.targets:
        in_dim, out_dim = site_dims(cfg.backbone, site)
        try:
            errs = adapter_gradcheck(spec, in_dim, out_dim, site, seed=cfg.backbone.seed,
                                     eps=args.eps)
        except E.NonFiniteGradient as exc:
            name = getattr(exc, "tensor", "?")
            print(f"{site}.{name}: non-finite value ({exc})", file=sys.stderr)
            return EXIT_FAIL
        for name, err in errs.items():
            if not math.isfinite(err):
                print(f"{site}.{name}: non-finite error", file=sys.stderr)
                return EXIT_FAIL
            flag = "ok" if err < GRADCHECK_TOL else "FAIL"
            print(f"{site:9s} {name:7s} max_rel_err {err:.3e}  {flag}")
            worst = max(worst, err)
    print(f"{spec.label} R={spec.R}: worst {worst:.3e} (tolerance {GRADCHECK_TOL:.0e})")
    return EXIT_OK if worst < GRADCHECK_TOL else EXIT_FAIL


def cmd_train(args) -> int:
    cfg = _load_config(args)
    if args.task is not None:
        cfg = replace(cfg, task=replace(cfg.task, kind=args.task))
    out = _check_writable(args.out) if args.out else None
    spec = cfg.spec(args.adapter)
    model = build_backbone(cfg.backbone)
    adapters = attach(model, spec, seed=cfg.backbone.seed)
    task = make_task(cfg.task.kind, **cfg.task.make_kwargs(cfg.backbone.vocab))
    try:
        report = train(model, adapters, task, cfg.train)
    except TrainingDiverged as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_FAIL
    doc = {
        "config": cfg.to_dict() | {"adapter": spec.to_dict()},
        "report": report.to_dict(timing=args.timing),
        "params_trainable": adapters.trainable_count(),
        "note": "fixed-length batches; every position counts toward throughput",
    }
    if out is not None:
        out.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    scopes = " ".join(f"{k}={v}" for k, v in sorted(report.peak_scope_bytes.items()))
    tps = f"{report.tokens_per_sec:.0f}" if args.timing else "-"
    loss = f"{report.final_loss:.4f}" if report.losses else "-"
    print(f"{spec.label} steps={report.steps} final_loss={loss} final_acc={report.final_acc:.3f} "
          f"peak_bytes[{scopes}] tokens/sec={tps}")
    return EXIT_OK


def cmd_estimate(args) -> int:
    cfg = _load_config(args)
    labels = _labels(args.adapters, [cfg.spec().label])
    S_values = args.S if args.S is not None else [cfg.task.S]
    B = args.batch if args.batch is not None else cfg.sweep.batch_size
    if not S_values:
        raise UsageError("no sequence lengths given")
    mismatches = 0
    header = (f"{'adapter':13s} {'S':>5s} {'params':>10s} {'grads':>9s} {'optim':>9s} "
              f"{'base_act':>11s} {'adapter_act':>11s} {'total':>11s}")
    print(f"B={B} flash={args.flash} gc_factor={args.gc_factor}")
    print(header)
    for label in labels:
        spec = cfg.spec(label)
        for S in S_values:
            bb = replace(cfg.backbone, max_S=max(cfg.backbone.max_S, S))
            n_cls = cfg.task.num_classes if cfg.task.kind == "seqclass" else cfg.task.num_passkeys
            est = estimate_peak(bb, spec, B, S, gc_factor=args.gc_factor, flash=args.flash,
                                num_classes=n_cls)
            print(f"{spec.label:13s} {S:5d} {est.params_bytes:10d} {est.grads_bytes:9d} "
                  f"{est.optimizer_bytes:9d} {est.base_act_bytes:11d} "
                  f"{est.adapter_act_bytes:11d} {est.total_bytes:11d}")
            if args.verify:
                mismatches += _verify(cfg, bb, spec, B, S, est, args)
    if args.verify:
        print(f"mismatches: {mismatches}")
    return EXIT_FAIL if mismatches else EXIT_OK


def _verify(cfg, bb, spec, B, S, est, args) -> int:
    model = build_backbone(bb)
    adapters = attach(model, spec, seed=bb.seed)
    kwargs = replace(cfg.task, S=S).make_kwargs(bb.vocab) | {"num_examples": B}
    ledger, *_ = measure_step(model, adapters, make_task(cfg.task.kind, **kwargs), B)
    checks = [("adapter_act", est.adapter_act_bytes, ledger.adapter_bytes())]
    if args.flash or args.gc_factor != 1.0:
        print(f"{'':13s} {'':5s}   base_act: ledger {ledger.bytes_for(E.BASE_SCOPE)} "
              "(estimate uses analytic toggles, not compared)")
    else:
        checks.append(("base_act", est.base_act_bytes, ledger.bytes_for(E.BASE_SCOPE)))
    checks.append(("loss_act", est.loss_act_bytes, ledger.bytes_for("loss")))
    bad = 0
    for name, want, got in checks:
        ok = want == got
        bad += not ok
        print(f"{'':13s} {'':5s}   {name:11s} est {want:11d}  ledger {got:11d}  "
              f"{'match' if ok else 'MISMATCH'}")
    return bad


def cmd_niah(args) -> int:
    cfg = _load_config(args)
    out = _check_writable(args.out)
    S = args.S if args.S is not None else cfg.task.S
    task = replace(cfg.task, kind="niah_toy", S=S)
    cfg = replace(cfg, task=task, backbone=replace(cfg.backbone, max_S=max(cfg.backbone.max_S, S)))
    labels = _labels(args.adapters, ("lars", "lora"))
    rows = [run_point(cfg, label, train_run=True, timing=args.timing) for label in labels]
    write_csv(rows, out)
    for label, row in zip(labels, rows):
        acc = row["final_acc"]
        shown = f"{acc:.3f}" if isinstance(acc, float) else acc
        print(f"{label:13s} S={S} niah_acc={shown}")
    print(f"chance {1 / cfg.task.num_passkeys:.3f}; wrote {out}")
    return EXIT_FAIL if any(r["final_acc"] == "error" for r in rows) else EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

class _Formatter(argparse.ArgumentDefaultsHelpFormatter, argparse.RawDescriptionHelpFormatter):
    pass


def _defaults_epilog() -> str:
    text = json.dumps(C.ExperimentConfig().to_dict(), indent=1, sort_keys=True)
    return ("config file defaults (JSON; unknown keys are rejected):\n" + text
            + f"\n\n{C.SEED_ENV}=<int> overrides every seed in the config.")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON experiment config")
    common.add_argument("--seed", type=int, help="override every seed in the config")
    common.add_argument("--timing", action="store_true",
                        help="report wall-clock throughput (makes outputs non-reproducible)")
    common.add_argument("-v", "--verbose", action="store_true")

    adapter = argparse.ArgumentParser(add_help=False)
    adapter.add_argument("--R", type=int, help="adapter rank")
    adapter.add_argument("--pooling", choices=("fixed", "learned"))
    adapter.add_argument("--gelu-position", dest="gelu_position",
                         choices=("before_proj", "after_proj"))
    adapter.add_argument("--targets", help="comma list of sites, e.g. attn_o,mlp_down")

    p = argparse.ArgumentParser(prog="larslab", formatter_class=_Formatter,
                                description=__doc__, epilog=_defaults_epilog())
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    labels = ",".join(C.ADAPTER_LABELS)

    m = sub.add_parser("memscan", parents=[common, adapter], formatter_class=_Formatter,
                       help="one forward+backward per grid point; CSV of ledger vs estimate")
    m.add_argument("--S-grid", dest="S_grid", type=_int_list,
                   help="comma list of sequence lengths (shorthand for --dimension S --grid)")
    m.add_argument("--dimension", choices=C.SWEEP_DIMENSIONS, help="sweep dimension")
    m.add_argument("--grid", type=parse_list, help="comma list of grid values")
    m.add_argument("--adapters", help=f"comma list from {labels}")
    m.add_argument("--batch", type=int, help="batch size per grid point")
    m.add_argument("--budget", type=parse_bytes, help="skip points whose estimate exceeds this")
    m.add_argument("--jobs", type=int, default=1, help="parallel grid points")
    m.add_argument("--train", action="store_true", help="train each point instead of one step")
    m.add_argument("--out", required=True, help="CSV path")
    m.set_defaults(func=cmd_memscan)

    g = sub.add_parser("gradcheck", parents=[common, adapter], formatter_class=_Formatter,
                       help="finite differences on every adapter tensor at float64")
    g.add_argument("--adapter", help=f"one of {labels}")
    g.add_argument("--eps", type=float, default=1e-5)
    g.set_defaults(func=cmd_gradcheck)

    t = sub.add_parser("train", parents=[common, adapter], formatter_class=_Formatter,
                       help="train one adapter and write a JSON report")
    t.add_argument("--adapter", help=f"one of {labels}")
    t.add_argument("--task", choices=("seqclass", "niah_toy"))
    t.add_argument("--steps", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--out", help="JSON report path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("estimate", parents=[common, adapter], formatter_class=_Formatter,
                       help="closed-form memory breakdown, optionally checked against the ledger")
    e.add_argument("--adapters", help=f"comma list from {labels}")
    e.add_argument("--batch", type=int)
    e.add_argument("--S", type=_int_list, help="comma list of sequence lengths")
    e.add_argument("--flash", action="store_true", help="drop the S^2 attention term")
    e.add_argument("--gc-factor", dest="gc_factor", type=float, default=1.0,
                   help="multiply base activations (checkpointing model)")
    e.add_argument("--verify", action="store_true", help="run one step and compare with the ledger")
    e.set_defaults(func=cmd_estimate)

    n = sub.add_parser("niah", parents=[common, adapter], formatter_class=_Formatter,
                       help="train adapters on passkey retrieval under equal budgets")
    n.add_argument("--adapters", help=f"comma list from {labels}")
    n.add_argument("--S", type=int)
    n.add_argument("--steps", type=int)
    n.add_argument("--lr", type=float)
    n.add_argument("--out", required=True, help="CSV path")
    n.set_defaults(func=cmd_niah)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, argparse.ArgumentTypeError) as exc:
        print(f"larslab {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, OSError) as exc:
        print(f"larslab {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_FAIL


__all__ = ["CSV_COLUMNS", "build_parser", "main", "parse_bytes"]
