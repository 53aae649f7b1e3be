"""Command-line runner: ``idflow {train,sample,eval,check}``.

All outputs go to the run directory given by ``--out`` under fixed names.
Exit codes: 0 success, 1 failed checks, 2 usage or configuration error,
3 non-finite training loss.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import platform
import sys
import time
from typing import Optional

import numpy as np

from . import __version__
from .checks import FAULTS, SUITES, run_suite, write_check_csv
from .config import ConfigError, RunConfig, load_config_dict, resolve
from .exceptions import InvalidArgumentError
from .geometry import read_frame_table, write_frame_table
from .nn import load_checkpoint, save_checkpoint
from .runner import ABLATION_COLUMNS, ablation_table, draw_samples, evaluate, train_model
from .sampler import write_trajectory_csv
from .tasks import read_samples_csv, write_samples_csv

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE, EXIT_NONFINITE = 0, 1, 2, 3

MANIFEST = "manifest.json"
LOSS_CSV = "loss.csv"
CHECKPOINT = "checkpoint.bin"
SAMPLES_CSV = "samples.csv"
FRAMES_TXT = "frames.txt"
TRAJECTORY_CSV = "trajectory.csv"
REPORT_JSON = "report.json"
REPORT_CSV = "report.csv"
ABLATION_CSV = "ablation.csv"
CHECK_CSV = "check.csv"


def _versions() -> dict:
    import scipy
    import torch

    return {
        "idflow": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def _write_manifest(out: str, command: str, entry: dict) -> None:
    """Add ``entry`` under ``commands[command]`` in the run manifest."""
    path = os.path.join(out, MANIFEST)
    manifest = {"commands": {}}
    if os.path.exists(path):
        with open(path) as fh:
            try:
                manifest = json.load(fh)
            except json.JSONDecodeError:
                pass
    manifest.setdefault("commands", {})[command] = entry
    manifest["versions"] = _versions()
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _prepare_out(out: str) -> str:
    try:
        os.makedirs(out, exist_ok=True)
    except OSError as exc:
        raise ConfigError("--out", f"cannot create run directory ({exc.strerror})") from None
    if not os.access(out, os.W_OK):
        raise ConfigError("--out", f"run directory {out!r} is not writable")
    return out


def _config_from_args(args, base: Optional[dict] = None) -> RunConfig:
    if args.config:
        base = load_config_dict(args.config)
    return resolve(base or {}, args.set or (), seed=args.seed)


def _fmt(v) -> str:
    if v is None:
        return ""
    return f"{v:.17g}" if isinstance(v, float) else str(v)


# -- commands ----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = _prepare_out(args.out)
    start = time.perf_counter()
    model, history = train_model(cfg)
    wall = time.perf_counter() - start
    with open(os.path.join(out, LOSS_CSV), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["step", "loss", "branch", "k"])
        for row in history.rows():
            w.writerow([row["step"], _fmt(row["loss"]), row["branch"], row["k"]])
    finite = all(np.isfinite(history.losses))
    entry = {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "label": cfg.label,
        "steps_run": len(history.losses),
        "loss": [_fmt(v) for v in history.losses],
        "branch": list(history.branches),
        "final_loss": _fmt(history.losses[-1]) if history.losses else None,
        "wall_clock_s": wall,
        "status": "ok" if finite else "non-finite loss",
    }
    if not finite:
        _write_manifest(out, "train", entry)
        print(f"error: non-finite loss at step {len(history.losses) - 1}", file=sys.stderr)
        return EXIT_NONFINITE
    save_checkpoint(os.path.join(out, CHECKPOINT), model, {"run_config": cfg.to_dict(), "label": cfg.label})
    entry["outputs"] = [CHECKPOINT, LOSS_CSV]
    _write_manifest(out, "train", entry)
    print(f"trained {cfg.label} model for {len(history.losses)} steps -> {out}")
    return EXIT_OK


def _load_model(path: str):
    if not os.path.exists(path):
        raise ConfigError("--checkpoint", f"no checkpoint at {path!r}")
    try:
        return load_checkpoint(path)
    except (InvalidArgumentError, ValueError, KeyError) as exc:
        raise ConfigError("--checkpoint", f"unreadable checkpoint ({exc})") from None


def _config_for_model(args, metadata: dict) -> RunConfig:
    cfg = _config_from_args(args, metadata.get("run_config", {}))
    if getattr(args, "strict_paper", False):
        cfg = dataclasses.replace(cfg, sample=dataclasses.replace(cfg.sample, final_completion=False))
    return cfg


def cmd_sample(args) -> int:
    ckpt = args.checkpoint or os.path.join(args.out, CHECKPOINT)
    model, metadata = _load_model(ckpt)
    cfg = _config_for_model(args, metadata)
    out = _prepare_out(args.out)
    start = time.perf_counter()
    x, traj = draw_samples(cfg, model)
    wall = time.perf_counter() - start
    if cfg.net.head == "se3":
        samples_name = FRAMES_TXT
        chains = [x[i] for i in range(x.batch_shape[0])]
        write_frame_table(os.path.join(out, samples_name), chains)
    else:
        samples_name = SAMPLES_CSV
        write_samples_csv(os.path.join(out, samples_name), x)
    write_trajectory_csv(os.path.join(out, TRAJECTORY_CSV), traj, cfg.sample.refinements)
    _write_manifest(
        out,
        "sample",
        {
            "config": cfg.to_dict(),
            "seed": cfg.seed,
            "checkpoint": os.path.basename(ckpt),
            "strict_paper": bool(args.strict_paper),
            "nfe": traj.nfe_count,
            "extra_evals": traj.extra_evals,
            "outputs": [samples_name, TRAJECTORY_CSV],
            "wall_clock_s": wall,
        },
    )
    print(f"wrote {cfg.n_samples} samples (NFE {traj.nfe_count}) -> {out}")
    return EXIT_OK


def _read_samples(cfg: RunConfig, path: str):
    if not os.path.exists(path):
        raise ConfigError("--samples", f"no sample file at {path!r}")
    try:
        if cfg.net.head == "se3":
            chains = read_frame_table(path)
            if not chains:
                raise InvalidArgumentError(f"{path}: no chains")
            return chains
        return read_samples_csv(path)
    except (InvalidArgumentError, ValueError) as exc:
        raise ConfigError("--samples", str(exc)) from None


def cmd_eval(args) -> int:
    ckpt = args.checkpoint or os.path.join(args.out, CHECKPOINT)
    model, metadata = (None, {})
    if args.checkpoint or os.path.exists(ckpt):
        model, metadata = _load_model(ckpt)
    cfg = _config_for_model(args, metadata)
    out = _prepare_out(args.out)
    default_name = FRAMES_TXT if cfg.net.head == "se3" else SAMPLES_CSV
    samples = _read_samples(cfg, args.samples or os.path.join(out, default_name))
    references = None
    if args.references:
        references = _read_samples(cfg, args.references)
    try:
        report = evaluate(cfg, samples, references, model=model)
    except InvalidArgumentError as exc:
        raise ConfigError("--samples", str(exc)) from None
    report.metadata["label"] = metadata.get("label")
    report.save(os.path.join(out, REPORT_JSON), os.path.join(out, REPORT_CSV))
    outputs = [REPORT_JSON, REPORT_CSV]
    if args.ablation:
        if model is None:
            raise ConfigError("--ablation", "the refinement ablation needs a checkpoint")
        rows = ablation_table(cfg, model)
        with open(os.path.join(out, ABLATION_CSV), "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(ABLATION_COLUMNS)
            for row in rows:
                w.writerow([_fmt(row[c]) for c in ABLATION_COLUMNS])
        outputs.append(ABLATION_CSV)
    _write_manifest(out, "eval", {"config": cfg.to_dict(), "seed": cfg.seed, "outputs": outputs})
    print(json.dumps(report.table_row(), sort_keys=True))
    return EXIT_OK


def cmd_check(args) -> int:
    out = _prepare_out(args.out)
    try:
        results = run_suite(args.suite, seed=args.seed or 0, faults=args.inject_fault or ())
    except InvalidArgumentError as exc:
        raise ConfigError("--suite", str(exc)) from None
    write_check_csv(os.path.join(out, CHECK_CSV), results)
    failed = [r for r in results if not r.passed]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status} {r.suite}/{r.name}: max error {r.max_error:.3g} (tol {r.tolerance:g})")
    _write_manifest(
        out,
        "check",
        {"suite": args.suite, "seed": args.seed or 0, "faults": list(args.inject_fault or ()), "failed": [r.name for r in failed]},
    )
    if failed:
        print("failing checks: " + ", ".join(f"{r.suite}/{r.name}" for r in failed), file=sys.stderr)
        return EXIT_CHECK_FAILED
    return EXIT_OK


# -- argument parsing ----------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="idflow", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        p.add_argument("--out", default="run", help="run directory (default: ./run)")
        p.add_argument("--seed", type=int, default=None, help="override the run seed")
        if config:
            p.add_argument("--config", help="JSON run configuration")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a dotted config key")

    p = sub.add_parser("train", help="train a flow map and write a checkpoint")
    common(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="draw samples from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint file (default: <out>/checkpoint.bin)")
    p.add_argument("--strict-paper", action="store_true", help="stop at t = 1 - dt without the completion jump")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="score samples and write a report")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint used for idempotency and ablations")
    p.add_argument("--samples", help="sample file (default: <out>/samples.csv or frames.txt)")
    p.add_argument("--references", help="paired reference samples")
    p.add_argument("--ablation", action="store_true", help="write the refinement-count table")
    p.add_argument("--strict-paper", action="store_true", help="ablation trajectories stop at t = 1 - dt")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("check", help="run numerical self-checks")
    common(p, config=False)
    p.add_argument("--suite", default="all", help=f"one of {', '.join(SUITES)} or all")
    p.add_argument("--inject-fault", action="append", choices=FAULTS, help="deliberately break one routine")
    p.set_defaults(func=cmd_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except InvalidArgumentError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
