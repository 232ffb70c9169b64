# services/pipeline_flow.py

import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from funcount.decomposition import Decomposition, save_decomposition
from funcount.errors import PreconditionError
from funcount.fiteval import mae_per_subject, write_effects_csv, write_mae_csv
from funcount.gfpca import fit_gfpca
from funcount.ingest import CountCurveSet, SubjectCovariates
from funcount.metrics import auc_grid, roc_frame, weighted_auc, weighted_roc
from funcount.narfd import fit_narfd
from funcount.outputs import atomic_write_text, write_csv
from funcount.pfpca import fit_pfpca
from funcount.predict import (
    ConfusionSummary,
    FittedClassifier,
    PredictorTable,
    align_scores,
    build_predictor_table,
    coefficient_table,
    confusion_summary,
    fit_adaboost,
    fit_logistic_stepwise,
    fit_random_forest,
    fit_weighted_logistic,
    predict_probability,
    stratified_split,
    variable_importance,
)

logger = logging.getLogger(__name__)

MethodName = Literal["gfpca", "pfpca", "narfd"]
ModelName = Literal["logistic", "forest", "adaboost"]

METHODS = ("gfpca", "pfpca", "narfd")
MODELS = ("logistic", "forest", "adaboost")


class PredictionSummary(BaseModel):
    model: ModelName = Field(description="Classifier family.")
    scores: str = Field(description="Decomposition method supplying scores, or Baseline.")
    auc: float = Field(description="Survey-weighted test AUC.")
    n_train: int = Field(description="Training rows.")
    n_test: int = Field(description="Test rows.")
    selected_scores: List[str] = Field(default_factory=list, description="Score columns kept by stepwise AIC.")
    separation: bool = Field(default=False, description="Logistic fit flagged possible complete separation.")
    confusion: ConfusionSummary = Field(description="Test-split confusion summary at threshold 0.5.")


# ---------- Stage 1: decomposition + fit evaluation ----------

def fit_decomposition(
    curves: CountCurveSet,
    method: MethodName,
    k: int,
    n_basis: int = 30,
    lam: Optional[float] = None,
    seed: int = 0,
    threads: Optional[int] = None,
) -> Decomposition:
    """
    Dispatch to one of the three decompositions. `lam` fixes the smoothing
    weight that each method would otherwise select: the covariance smoother
    (GFPCA), the step-1 latent smoother (PFPCA) or the roughness penalty (NARFD).
    """
    if method == "gfpca":
        return fit_gfpca(curves, k=k, n_basis=n_basis, ladder=None if lam is None else (lam,))
    if method == "pfpca":
        return fit_pfpca(curves, k=k, n_basis=n_basis, smoothing=lam, threads=threads)
    if method == "narfd":
        return fit_narfd(curves, k=k, n_basis=n_basis, lam=lam, seed=seed, threads=threads)
    raise PreconditionError("pipeline", f"unknown method {method!r}")


def run_decomposition(
    curves: CountCurveSet,
    method: MethodName,
    k: int,
    n_basis: int = 30,
    lam: Optional[float] = None,
    seed: int = 0,
    threads: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """
    Orchestrates:
      1) the decomposition fit
      2) per-subject MAE on the count scale
      3) effect curves (written only)

    Returns:
      {
        "decomposition": Decomposition,
        "mae": np.ndarray,
        "paths": List[Path],
      }
    """
    decomp = fit_decomposition(curves, method, k, n_basis=n_basis, lam=lam, seed=seed, threads=threads)
    mae = mae_per_subject(decomp.fitted, curves.counts)
    logger.info("%s mean MAE %.4f", method.upper(), float(mae.mean()))

    paths: List[Path] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        paths.append(save_decomposition(decomp, out_dir / f"decomposition_{method}.json"))
        paths.append(write_mae_csv(curves.subject_ids, decomp.method, mae, out_dir / f"mae_{method}.csv"))
        paths.append(write_effects_csv(decomp, out_dir / f"effects_{method}.csv"))
        if decomp.method == "GFPCA":
            paths.append(write_effects_csv(decomp, out_dir / "effects_gfpca_counts.csv", counts=True))

    return {
        "decomposition": decomp,
        "mae": mae,
        "paths": paths,
    }


# ---------- Stage 2: mortality prediction ----------

def fit_classifier(
    model: ModelName,
    table: PredictorTable,
    seed: int = 0,
    threads: Optional[int] = None,
    selected: Optional[Sequence[str]] = None,
) -> FittedClassifier:
    if model == "logistic":
        columns = table.covariate_names + list(table.score_names if selected is None else selected)
        return fit_weighted_logistic(table, columns)
    if model == "forest":
        return fit_random_forest(table, seed=seed, threads=threads)
    if model == "adaboost":
        return fit_adaboost(table, seed=seed)
    raise PreconditionError("pipeline", f"unknown model {model!r}")


def predictions_frame(table: PredictorTable, prob, test_rows) -> pd.DataFrame:
    split = np.full(table.n_rows, "train", dtype=object)
    split[np.asarray(test_rows, dtype=int)] = "test"
    return pd.DataFrame(
        {
            "subject_id": table.subject_ids,
            "prob": prob,
            "label": table.outcome,
            "weight": table.weights,
            "split": split,
        }
    )


def evaluate_predictions(frame: pd.DataFrame) -> Dict[str, Any]:
    """
    Weighted ROC, AUC and confusion summary of the test rows of a
    predictions frame (subject_id, prob, label, weight, split).
    """
    missing = {"prob", "label", "weight", "split"} - set(frame.columns)
    if missing:
        raise PreconditionError("pipeline", f"predictions lack columns {sorted(missing)}")
    test = frame[frame["split"] == "test"]
    if test.empty:
        raise PreconditionError("pipeline", "predictions contain no test rows")
    prob, label, weight = (test[c].to_numpy() for c in ("prob", "label", "weight"))
    roc = weighted_roc(prob, label, weight)
    return {
        "roc": roc,
        "auc": weighted_auc(roc),
        "confusion": confusion_summary(prob, label, weight),
    }


def run_prediction(
    subjects: Sequence[SubjectCovariates],
    model: ModelName,
    decomp: Optional[Decomposition] = None,
    split: float = 0.7,
    seed: int = 0,
    threads: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """
    Orchestrates:
      1) predictor table (covariates + scores, or covariates only)
      2) stratified train/test split
      3) logistic: stepwise AIC and coefficient table on the full data,
         then the training fit with the selected scores;
         forest/adaboost: training fit and variable importance
      4) probabilities for every row, test-split ROC/AUC/confusion

    Returns:
      {
        "table": PredictorTable,
        "model": FittedClassifier,
        "predictions": pd.DataFrame,
        "summary": PredictionSummary,
        "roc": List[RocPoint],
        "details": pd.DataFrame,   # coefficients or importance
        "paths": List[Path],
      }
    """
    if decomp is None:
        table = build_predictor_table(subjects)
        label = "Baseline"
    else:
        kept, scores = align_scores(subjects, decomp)
        table = build_predictor_table(kept, scores, decomp.score_names())
        label = decomp.method
    logger.info("=== PREDICT (%s, %s, N=%d) ===", model, label, table.n_rows)

    train_rows, test_rows = stratified_split(table.outcome, table.weights, ratio=split, seed=seed)
    train = table.subset(train_rows)

    selected: List[str] = []
    separation = False
    if model == "logistic":
        inference = fit_logistic_stepwise(table)
        selected = inference.selected_scores
        separation = inference.separation
        details = coefficient_table(inference)
        fitted = fit_classifier(model, train, seed=seed, threads=threads, selected=selected)
    else:
        fitted = fit_classifier(model, train, seed=seed, threads=threads)
        details = pd.DataFrame(variable_importance(fitted), columns=["variable", "importance"])

    prob = predict_probability(fitted, table)
    predictions = predictions_frame(table, prob, test_rows)
    evaluation = evaluate_predictions(predictions)
    summary = PredictionSummary(
        model=model,
        scores=label,
        auc=evaluation["auc"],
        n_train=len(train_rows),
        n_test=len(test_rows),
        selected_scores=selected,
        separation=separation,
        confusion=evaluation["confusion"],
    )
    logger.info("%s + %s test AUC %.4f", model, label, summary.auc)

    paths: List[Path] = []
    if out_dir is not None:
        out_dir = Path(out_dir)
        paths.append(write_csv(predictions, out_dir / "predictions.csv"))
        paths.append(write_csv(roc_frame(evaluation["roc"]), out_dir / "roc.csv"))
        paths.append(atomic_write_text(out_dir / "auc.json", summary.model_dump_json(indent=2)))
        detail_name = "coefficients.csv" if model == "logistic" else "importance.csv"
        paths.append(write_csv(details, out_dir / detail_name))

    return {
        "table": table,
        "model": fitted,
        "predictions": predictions,
        "summary": summary,
        "roc": evaluation["roc"],
        "details": details,
        "paths": paths,
    }


# ---------- Stage 3: model x decomposition grid ----------

def run_grid(
    curves: CountCurveSet,
    subjects: Sequence[SubjectCovariates],
    k: int,
    n_basis: int = 30,
    methods: Sequence[MethodName] = METHODS,
    models: Sequence[ModelName] = MODELS,
    split: float = 0.7,
    seed: int = 0,
    threads: Optional[int] = None,
    out_dir: Optional[Union[str, Path]] = None,
) -> Dict[str, Any]:
    """
    Fit every decomposition once, then every classifier on each set of
    scores and on the covariates alone. Returns {"grid": DataFrame, "runs": {...}}.
    """
    decompositions: Dict[str, Optional[Decomposition]] = {"Baseline": None}
    for method in methods:
        sub = None if out_dir is None else Path(out_dir) / method
        result = run_decomposition(curves, method, k, n_basis=n_basis, seed=seed, threads=threads, out_dir=sub)
        decompositions[result["decomposition"].method] = result["decomposition"]

    aucs = {}
    runs = {}
    for model in models:
        for name, decomp in decompositions.items():
            sub = None if out_dir is None else Path(out_dir) / f"{model}_{name.lower()}"
            run = run_prediction(subjects, model, decomp, split=split, seed=seed, threads=threads, out_dir=sub)
            aucs[(model, name)] = run["summary"].auc
            runs[(model, name)] = run

    grid = auc_grid(aucs, models)
    if out_dir is not None:
        write_csv(grid, Path(out_dir) / "auc_grid.csv")
    return {
        "grid": grid,
        "runs": runs,
    }
