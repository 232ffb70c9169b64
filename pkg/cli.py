# cli.py

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Dict, List, Optional

import pandas as pd
from pydantic import BaseModel, Field

from funcount.config import configure_logging, load_settings
from funcount.decomposition import load_decomposition
from funcount.errors import FuncountError, InputFormatError
from funcount.fiteval import compare_mae
from funcount.ingest import load_count_curves, load_dataset, load_subjects
from funcount.metrics import roc_frame
from funcount.outputs import atomic_write_text, file_digest, write_csv
from funcount.simulate import simulate_cohort, write_cohort
from services.pipeline_flow import (
    METHODS,
    MODELS,
    evaluate_predictions,
    run_decomposition,
    run_grid,
    run_prediction,
)

logger = logging.getLogger("funcount.cli")

MANIFEST_NAME = "run_manifest.json"


class RunManifest(BaseModel):
    command: str = Field(description="Subcommand that was run.")
    argv: List[str] = Field(description="Arguments after the program name, replayable by `rerun`.")
    flags: Dict[str, str] = Field(description="Parsed option values.")
    seed: Optional[int] = Field(default=None, description="Root seed, when the command uses one.")
    inputs: Dict[str, str] = Field(default_factory=dict, description="Input path -> sha256 digest.")


# ---------- Argument types ----------

def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be at least 1, got {value}")
    return value


def split_ratio(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not 0.0 < value < 1.0:
        raise argparse.ArgumentTypeError(f"must lie strictly between 0 and 1, got {value}")
    return value


def penalty_weight(text: str) -> Optional[float]:
    if text == "auto":
        return None
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected 'auto' or a number, got {text!r}")
    if value < 0:
        raise argparse.ArgumentTypeError(f"must be nonnegative, got {value}")
    return value


def build_parser(default_k: int, default_m: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="funcount",
        description="Functional decompositions of activity-count curves and survey-weighted mortality prediction.",
    )
    parser.add_argument("--threads", type=positive_int, default=None, help="Override FUNCOUNT_THREADS.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="Write a simulated cohort (accel5.csv, covariates.csv, mortality.csv).")
    p.add_argument("--n", type=positive_int, default=300)
    p.add_argument("--death-rate", type=split_ratio, default=0.06)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("fit", help="Fit one decomposition and write JSON, MAE and effect curves.")
    p.add_argument("--method", choices=METHODS, required=True)
    p.add_argument("--input", required=True, help="accel5.csv or minute-level accel.csv")
    p.add_argument("--wear", default=None, help="Wear file for minute-level input (default: wear.csv next to it).")
    p.add_argument("--k", type=positive_int, default=default_k)
    p.add_argument("--m", type=positive_int, default=default_m, help="Number of B-spline basis functions.")
    p.add_argument("--lambda", dest="lam", type=penalty_weight, default=None, metavar="auto|VALUE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("compare-mae", help="Summarize per-method MAE files.")
    p.add_argument("paths", nargs="+")
    p.add_argument("--out", default=None, help="Optional CSV for the summary table.")

    p = sub.add_parser("predict", help="Train a mortality classifier and score the test split.")
    p.add_argument("--model", choices=MODELS, required=True)
    p.add_argument("--scores", required=True, help="decomposition JSON, or 'none' for the covariate baseline")
    p.add_argument("--input", default=None, help="accel5.csv restricting subjects to those with curves")
    p.add_argument("--covariates", required=True)
    p.add_argument("--mortality", required=True)
    p.add_argument("--split", type=split_ratio, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("evaluate", help="Weighted ROC and AUC of a predictions CSV (test split).")
    p.add_argument("--predictions", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("grid", help="AUC grid over classifiers x decompositions plus baselines.")
    p.add_argument("--input", required=True)
    p.add_argument("--covariates", required=True)
    p.add_argument("--mortality", required=True)
    p.add_argument("--k", type=positive_int, default=default_k)
    p.add_argument("--m", type=positive_int, default=default_m)
    p.add_argument("--split", type=split_ratio, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("rerun", help="Re-execute the command recorded in a run manifest.")
    p.add_argument("manifest")

    return parser


# ---------- Manifest ----------

def write_manifest(
    args: argparse.Namespace,
    argv: List[str],
    inputs: List[str],
    out_dir: Optional[Path] = None,
) -> Path:
    flags = {k: str(v) for k, v in sorted(vars(args).items()) if k != "command"}
    manifest = RunManifest(
        command=args.command,
        argv=list(argv),
        flags=flags,
        seed=getattr(args, "seed", None),
        inputs={path: file_digest(path) for path in inputs},
    )
    out_dir = Path(args.out) if out_dir is None else out_dir
    return atomic_write_text(out_dir / MANIFEST_NAME, manifest.model_dump_json(indent=2))


def rerun_manifest(path: str) -> int:
    try:
        manifest = RunManifest.model_validate_json(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise InputFormatError("cli", f"cannot read manifest {path}: {exc}") from exc
    for input_path, digest in manifest.inputs.items():
        if not Path(input_path).exists() or file_digest(input_path) != digest:
            raise InputFormatError("cli", f"input {input_path} is missing or changed since the recorded run")
    logger.info("Re-running: %s", " ".join(manifest.argv))
    return main(manifest.argv)


# ---------- Commands ----------

def cmd_simulate(args) -> List[str]:
    cohort = simulate_cohort(args.n, seed=args.seed, death_rate=args.death_rate)
    for path in write_cohort(cohort, args.out):
        print(f"wrote {path}")
    return []


def cmd_fit(args, threads: int) -> List[str]:
    curves = load_count_curves(args.input, args.wear)
    result = run_decomposition(
        curves,
        args.method,
        args.k,
        n_basis=args.m,
        lam=args.lam,
        seed=args.seed,
        threads=threads,
        out_dir=args.out,
    )
    print(f"{args.method}: mean MAE {result['mae'].mean():.6g} over {curves.n_subjects} subjects")
    inputs = [args.input]
    if args.wear:
        inputs.append(args.wear)
    return inputs


def cmd_compare_mae(args) -> List[str]:
    table = compare_mae(args.paths)
    print(table.to_string(index=False))
    if args.out:
        write_csv(table, args.out)
    return list(args.paths)


def _load_subjects(args):
    inputs = [args.covariates, args.mortality]
    if args.input:
        _, subjects = load_dataset(args.input, args.covariates, args.mortality)
        inputs.insert(0, args.input)
    else:
        subjects = load_subjects(args.covariates, args.mortality)
    return subjects, inputs


def cmd_predict(args, threads: int) -> List[str]:
    subjects, inputs = _load_subjects(args)
    decomp = None
    if args.scores.lower() != "none":
        decomp = load_decomposition(args.scores)
        inputs.append(args.scores)
    result = run_prediction(
        subjects,
        args.model,
        decomp,
        split=args.split,
        seed=args.seed,
        threads=threads,
        out_dir=args.out,
    )
    summary = result["summary"]
    print(f"{summary.model} + {summary.scores}: test AUC {summary.auc:.4f}")
    if summary.model == "logistic":
        print("selected scores:", ", ".join(summary.selected_scores) or "none")
    c = summary.confusion
    print(f"predicted deaths {c.predicted_deaths} (correct {c.true_deaths_predicted}) of {c.actual_deaths}")
    return inputs


def cmd_evaluate(args) -> List[str]:
    try:
        frame = pd.read_csv(args.predictions, dtype={"subject_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise InputFormatError("cli", f"cannot read predictions {args.predictions}: {exc}") from exc
    result = evaluate_predictions(frame)
    out = Path(args.out)
    write_csv(roc_frame(result["roc"]), out / "roc.csv")
    payload = {
        "auc": result["auc"],
        "n_test": int((frame["split"] == "test").sum()),
        "confusion": result["confusion"].model_dump(),
    }
    atomic_write_text(out / "auc.json", json.dumps(payload, indent=2))
    print(f"test AUC {result['auc']:.4f}")
    return [args.predictions]


def cmd_grid(args, threads: int) -> List[str]:
    curves, subjects = load_dataset(args.input, args.covariates, args.mortality)
    result = run_grid(
        curves,
        subjects,
        args.k,
        n_basis=args.m,
        split=args.split,
        seed=args.seed,
        threads=threads,
        out_dir=args.out,
    )
    print(result["grid"].to_string(index=False))
    return [args.input, args.covariates, args.mortality]


# ---------- Entry point ----------

def main(argv: Optional[List[str]] = None) -> int:
    settings = load_settings()
    configure_logging(settings.log_level)
    argv = list(sys.argv[1:] if argv is None else argv)
    args = build_parser(settings.k, settings.n_basis).parse_args(argv)
    threads = args.threads or settings.threads

    try:
        if args.command == "rerun":
            return rerun_manifest(args.manifest)
        if args.command == "compare-mae":
            inputs = cmd_compare_mae(args)
            if args.out:
                write_manifest(args, argv, inputs, Path(args.out).parent)
            return 0
        if args.command == "simulate":
            inputs = cmd_simulate(args)
        elif args.command == "fit":
            inputs = cmd_fit(args, threads)
        elif args.command == "predict":
            inputs = cmd_predict(args, threads)
        elif args.command == "evaluate":
            inputs = cmd_evaluate(args)
        else:
            inputs = cmd_grid(args, threads)
        write_manifest(args, argv, inputs)
    except FuncountError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
