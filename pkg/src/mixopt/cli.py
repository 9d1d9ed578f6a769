"""``mixopt`` command line.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
from scipy.linalg import LinAlgError

from . import harness
from .dataset import AGE_GRID, DataError, parse_mix_table
from .gp import FitError
from .gwp import MissingFactorError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default from config)")
    common.add_argument("--mixes", help="mixes.csv (overrides config)")
    common.add_argument("--strengths", help="strengths.csv (overrides config)")
    common.add_argument("--factors", help="factors.csv (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="mixopt", description="GP strength models, GWP scoring and mix optimization.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("ingest", parents=[common], help="validate and normalize mix/strength tables")
    sub.add_parser("generate-synthetic", parents=[common], help="write a synthetic dataset from the configured oracle")
    sub.add_parser("train-phasewise", parents=[common], help="phase-wise fits evaluated on held-out mixes")
    p = sub.add_parser("predict", parents=[common], help="strength curves with 95%% bands for query mixes")
    p.add_argument("--query", required=True, help="mixes.csv of compositions to predict")
    p.add_argument("--ages", type=float, nargs="+", default=list(AGE_GRID))
    sub.add_parser("evaluate", parents=[common], help="hold out mixes, fit, and report R² / RMSE by age")
    p = sub.add_parser("suggest", parents=[common], help="propose a batch of mixes by qLogEHVI")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--campaign", action="store_true", help="run the closed-loop synthetic campaign instead")
    sub.add_parser("inverse", parents=[common], help="candidate mixes per strength threshold and GWP bin")
    sub.add_parser("gwp", parents=[common], help="cradle-to-gate GWP of every mix")
    return parser


def resolve_config(args) -> harness.RunConfig:
    config = harness.load_config(args.config)
    return config.with_overrides(seed=args.seed, out=args.out, mixes=args.mixes, strengths=args.strengths, factors=args.factors)


def run(args) -> int:
    config = resolve_config(args)
    cmd = args.command
    if cmd == "ingest":
        harness.cmd_ingest(config)
    elif cmd == "generate-synthetic":
        harness.cmd_generate_synthetic(config)
    elif cmd == "train-phasewise":
        reports = harness.train_phasewise(config)
        summary = harness.phasewise_summary(reports)
        print(f"{summary['n_reports']} phase reports; final R² {summary['final_r2_mean']:.3f}, RMSE {summary['final_rmse_mean_ksi']:.3f} ksi")
    elif cmd == "predict":
        try:
            queries = parse_mix_table(Path(args.query).read_text(encoding="utf-8"))
        except OSError as exc:
            raise harness.ConfigError(f"cannot read query file: {exc}") from exc
        sys.stdout.write(harness.cmd_predict(config, harness.load_dataset(config), queries, args.ages))
    elif cmd == "evaluate":
        sys.stdout.write(harness.cmd_evaluate(config, harness.load_dataset(config)).to_csv())
    elif cmd == "suggest":
        if args.campaign:
            res = harness.run_bo_campaign(config, config.seed)
            print("hypervolume by round:", " ".join(f"{v:.6g}" for v in res.hv_trajectory))
        else:
            res = harness.cmd_suggest(config, harness.load_dataset(config), args.iteration)
            print(f"log acquisition {res.batch.acquisition:.6g}; HV {res.hv_before:.6g} -> {res.hv_after_predicted:.6g} (predicted)")
    elif cmd == "inverse":
        result, _ = harness.cmd_inverse(config, harness.load_dataset(config))
        short = sum(c.shortfall for c in result)
        print(f"{len(result.cells)} cells, {short} with shortfall")
    elif cmd == "gwp":
        sys.stdout.write(harness.cmd_gwp(config, harness.load_dataset(config)))
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return run(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, MissingFactorError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (FitError, LinAlgError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
