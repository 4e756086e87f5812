"""Command-line driver: ``nmcdr {prepare,synth,run,sweep,stability,report}``.

Common flags: ``--config PATH`` (TOML), ``--set section.key=value``
(repeatable), ``--seed N``, ``--out DIR``, ``--jobs N``.  ``NMCDR_LOG``
selects the log level (error, warn, info, debug).  Exit status: 0 on
success, 2 for configuration errors, 1 for any other failure.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, replace
from pathlib import Path

from .config import ConfigError, ExperimentConfig, json_schema, load
from .io_utils import atomic_write_text, dump_json

log = logging.getLogger("nmcdr")

LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("NMCDR_LOG", "warn").strip().lower()
    if name not in LOG_LEVELS:
        raise ConfigError(f"NMCDR_LOG must be one of {sorted(LOG_LEVELS)}, got {name!r}")
    logging.basicConfig(level=LOG_LEVELS[name], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def _config(args) -> ExperimentConfig:
    cfg = load(args.config, args.set)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out=args.out)
    return cfg


def cmd_prepare(cfg: ExperimentConfig, args) -> int:
    from .experiment import build_dataset, save_prepared
    if cfg.data.prepared:
        raise ConfigError("prepare reads raw files or the synthetic generator; unset data.prepared")
    ds, sp = build_dataset(cfg)
    stats = save_prepared(cfg.out, ds, sp, cfg)
    print(dump_json(stats), end="")
    return 0


def cmd_synth(cfg: ExperimentConfig, args) -> int:
    from .synth import generate, write
    paths = write(generate(cfg.synth), cfg.out)
    for k, p in paths.items():
        print(f"{k}\t{p}")
    return 0


def cmd_run(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_experiment
    outcome = run_experiment(cfg, cfg.out)
    for name, m in outcome.report.domains.items():
        print(f"{name}\tHR@10={m.hr:.4f}\tNDCG@10={m.ndcg:.4f}\tusers={m.users}")
    return 0


def cmd_sweep(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_sweep
    result = run_sweep(cfg, cfg.out, args.jobs)
    for s in result["summary"]:
        print(f"{s['variant']}\t{result['parameter']}={s['value']}\tNDCG@10 {s['ndcg_mean']:.4f} "
              f"+/- {s['ndcg_std']:.4f} (best {s['ndcg_best']:.4f}, n={s['runs']})")
    return 0


def cmd_stability(cfg: ExperimentConfig, args) -> int:
    from .experiment import run_stability
    result = run_stability(cfg)
    atomic_write_text(Path(cfg.out) / "stability.json", dump_json(result))
    print(f"configurations={result['configurations']} trials={result['trials']} "
          f"all_within_bound={str(result['all_within_bound']).lower()}")
    return 0


def cmd_report(cfg: ExperimentConfig, args) -> int:
    from .experiment import collect_reports, plot_csv, summarize
    rows = collect_reports(args.runs or [cfg.out])
    if not rows:
        raise FileNotFoundError(f"no report.json found under {args.runs or [cfg.out]}")
    summary = summarize(rows)
    out = Path(cfg.out)
    atomic_write_text(out / "summary.json", dump_json({"runs": rows, "summary": summary}))
    atomic_write_text(out / "plotdata" / "report_K_u.csv", plot_csv("K_u", summary))
    for s in summary:
        print(f"{s['variant']}\tK_u={s['value']}\tNDCG@10 {s['ndcg_mean']:.4f} +/- {s['ndcg_std']:.4f} "
              f"best {s['ndcg_best']:.4f}\tHR@10 {s['hr_mean']:.4f}\tn={s['runs']}")
    return 0


def cmd_schema(cfg: ExperimentConfig, args) -> int:
    print(dump_json(json_schema()), end="")
    return 0


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "run": cmd_run, "sweep": cmd_sweep,
            "stability": cmd_stability, "report": cmd_report, "schema": cmd_schema}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML experiment configuration")
    common.add_argument("--set", metavar="K=V", action="append", default=[],
                        help="override one setting, e.g. --set train.lr=1e-3 (repeatable)")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", metavar="DIR", help="output directory")
    common.add_argument("--jobs", type=int, default=1, help="parallel processes for sweep")
    parser = argparse.ArgumentParser(prog="nmcdr", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "prepare": "index the two domains, expose overlap, split, write stats.json",
        "synth": "generate a synthetic two-domain dataset with known factors",
        "run": "train, evaluate and write history, report and checkpoint",
        "sweep": "run [sweep] parameter x variants x seeds and write plot data",
        "stability": "perturbation-stability diagnostic of the compressed model",
        "report": "aggregate report.json files (mean, std, best over seeds)",
        "schema": "print the JSON-schema of the configuration file",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "report":
            p.add_argument("runs", nargs="*", help="run directories or report.json files")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _setup_logging()
        if args.jobs < 1:
            raise ConfigError("--jobs must be >= 1")
        cfg = _config(args)
        log.debug("resolved configuration: %s", asdict(cfg))
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"nmcdr: configuration error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # surfaced with a nonzero status, traceback at debug level
        log.debug("failure", exc_info=True)
        print(f"nmcdr {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
