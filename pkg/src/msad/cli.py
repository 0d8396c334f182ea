"""Command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error.
Logs go to standard error; results are written to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

from . import __version__
from .core import ConfigError, DataError, MsadError
from .pipeline import (
    RunConfig,
    load_config_file,
    load_report,
    report_dir,
    run_all,
    run_build_bank,
    run_evaluate,
    run_extract,
    run_fit_gate,
    run_score,
    write_manifest,
)

log = logging.getLogger("msad")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="TOML or JSON run configuration")
    p.add_argument("--dataset", help="dataset root")
    p.add_argument("--out", help="output directory")
    p.add_argument("--modalities", help="comma list, e.g. rgb,ir,pc")
    p.add_argument("--fusion", choices=["gate", "max", "mean"])
    p.add_argument("--coreset-ratio", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--nu", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--kernel", choices=["rbf", "linear"])
    p.add_argument("--workers", type=int, help="worker processes (default: $MSAD_WORKERS or CPU count)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="msad", description="Multi-sensor anomaly detection pipeline")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    parser.add_argument("-q", "--quiet", action="store_true")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True, help="dataset root to write")
    p.add_argument("--config", help="TOML or JSON file; its [synth] table holds generator settings")
    p.add_argument("--seed", type=int)
    p.add_argument("--categories", help="comma list of category names")
    p.add_argument("--train-count", type=int)
    p.add_argument("--test-normal", type=int)
    p.add_argument("--test-abnormal", type=int)

    p = sub.add_parser("align", help="register two scans with ICP and optionally merge them")
    p.add_argument("src", help="cloud to move")
    p.add_argument("dst", help="reference cloud")
    p.add_argument("--init", help="initial transform file (12 numbers)")
    p.add_argument("--max-iter", type=int, default=100)
    p.add_argument("--tol", type=float, default=1e-12)
    p.add_argument("--out", required=True, help="transform file to write")
    p.add_argument("--merged", help="write the merged cloud here")
    p.add_argument("--dedup-radius", type=float, default=None)

    for name, text in [
        ("extract", "compute per-sample feature files"),
        ("build-bank", "build per-modality memory banks"),
        ("score", "score test samples against the banks"),
        ("fit-gate", "fit the one-class SVM gating units"),
        ("evaluate", "compute the evaluation report"),
        ("run", "extract, build-bank, score, fit-gate, evaluate and report"),
    ]:
        _pipeline_flags(sub.add_parser(name, help=text))

    p = sub.add_parser("report", help="render figures and tables from an evaluated output directory")
    p.add_argument("results", help="output directory of a previous evaluate")
    return parser


def _run_config(args) -> RunConfig:
    doc = load_config_file(args.config) if args.config else {}
    overrides = {
        "dataset": args.dataset,
        "out": args.out,
        "modalities": args.modalities,
        "fusion": args.fusion,
        "coreset_ratio": args.coreset_ratio,
        "seed": args.seed,
        "nu": args.nu,
        "gamma": args.gamma,
        "kernel": args.kernel,
        "workers": args.workers,
    }
    doc.update({k: v for k, v in overrides.items() if v is not None})
    if args.config and doc.get("dataset"):
        # relative paths in a config file are relative to the file
        base = Path(args.config).resolve().parent
        if args.dataset is None and not Path(doc["dataset"]).is_absolute():
            doc["dataset"] = str(base / doc["dataset"])
    return RunConfig.from_dict(doc)


def cmd_synth(args) -> int:
    from .synth import SynthConfig, generate_dataset

    doc = {}
    if args.config:
        doc = dict(load_config_file(args.config).get("synth", {}))
    for key in ("seed", "train_count", "test_normal", "test_abnormal"):
        if getattr(args, key) is not None:
            doc[key] = getattr(args, key)
    if args.categories:
        doc["categories"] = [c.strip() for c in args.categories.split(",") if c.strip()]
    try:
        config = SynthConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    t = time.perf_counter()
    manifest = generate_dataset(config, args.out)
    n = sum(len(c["samples"]) for c in manifest["categories"].values())
    log.info("synth: %d samples in %.1fs under %s", n, time.perf_counter() - t, args.out)
    return EXIT_OK


def cmd_align(args) -> int:
    from .ingest import load_point_cloud, save_point_cloud
    from .registration import DEFAULT_DEDUP_RADIUS, icp_align, load_transform, merge_scans, save_transform

    src = load_point_cloud(args.src)
    dst = load_point_cloud(args.dst)
    init = load_transform(args.init) if args.init else None
    res = icp_align(src, dst, init=init, max_iter=args.max_iter, tol=args.tol)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    save_transform(res.transform, args.out)
    summary = {"rmse": res.rmse, "iterations": res.iterations, "converged": res.converged, "rmse_trace": res.rmse_trace}
    Path(args.out).with_suffix(".json").write_text(json.dumps(summary, indent=2) + "\n")
    log.info("align: rmse %.6g after %d iterations (converged=%s)", res.rmse, res.iterations, res.converged)
    if args.merged:
        radius = DEFAULT_DEDUP_RADIUS if args.dedup_radius is None else args.dedup_radius
        merged = merge_scans(dst, src, res.transform, radius)
        save_point_cloud(merged, args.merged)
        log.info("align: merged cloud with %d points -> %s", len(merged), args.merged)
    return EXIT_OK


def cmd_report(args) -> int:
    from .report import render_report

    report = load_report(args.results)
    rdir = report_dir(args.results)
    (rdir / "report.txt").write_text(report.to_text())
    (rdir / "report.csv").write_text(report.to_csv())
    paths = render_report(report, rdir)
    for p in paths:
        log.info("report: %s", p)
    sys.stdout.write(report.to_text())
    return EXIT_OK


_STAGES = {
    "extract": run_extract,
    "build-bank": run_build_bank,
    "score": run_score,
    "fit-gate": run_fit_gate,
}


def _dispatch(args) -> int:
    if args.command == "synth":
        return cmd_synth(args)
    if args.command == "align":
        return cmd_align(args)
    if args.command == "report":
        return cmd_report(args)
    cfg = _run_config(args)
    if args.command in _STAGES:
        _STAGES[args.command](cfg)
        return EXIT_OK
    t = time.perf_counter()
    report = run_evaluate(cfg) if args.command == "evaluate" else run_all(cfg)
    if args.command == "run":
        write_manifest(cfg, "run", {"total": time.perf_counter() - t})
    sys.stdout.write(report.to_text())
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING if args.quiet else (logging.DEBUG if args.verbose > 1 else logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return _dispatch(args)
    except ConfigError as exc:
        print(f"msad: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FileNotFoundError, ValueError) as exc:
        print(f"msad: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except MsadError as exc:
        print(f"msad: error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
