# funcount/metrics.py

from typing import List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from funcount.errors import PreconditionError

MODEL_ROWS = ("logistic", "forest", "adaboost")
DECOMPOSITION_COLUMNS = ("GFPCA", "NARFD", "PFPCA", "Baseline")


class RocPoint(BaseModel):
    fpr: float = Field(ge=0, le=1, description="Weighted false-positive rate.")
    tpr: float = Field(ge=0, le=1, description="Weighted true-positive rate.")
    threshold: float = Field(description="Predict positive when prob >= threshold (inf for the origin).")


def _check_inputs(prob, label, weight) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    prob = np.asarray(prob, dtype=np.float64).ravel()
    label = np.asarray(label).ravel()
    weight = np.ones(prob.size) if weight is None else np.asarray(weight, dtype=np.float64).ravel()
    if not (prob.size == label.size == weight.size):
        raise PreconditionError("metrics", "prob, label and weight must have the same length")
    if not np.all(np.isin(label, (0, 1))):
        raise PreconditionError("metrics", "labels must be 0 or 1")
    if np.any(weight <= 0):
        raise PreconditionError("metrics", "weights must be positive")
    label = label.astype(int)
    if np.unique(label).size < 2:
        raise PreconditionError("metrics", "ROC needs both classes present")
    return prob, label, weight


def weighted_roc(prob, label, weight=None) -> List[RocPoint]:
    """
    Survey-weighted ROC curve with one point per distinct predicted
    probability, thresholds descending, starting at (0, 0) and ending at (1, 1).
    """
    prob, label, weight = _check_inputs(prob, label, weight)
    order = np.argsort(-prob, kind="stable")
    p, y, w = prob[order], label[order], weight[order]

    tp = np.cumsum(w * y)
    fp = np.cumsum(w * (1 - y))
    # last index of every run of tied probabilities
    ends = np.flatnonzero(np.r_[np.diff(p) != 0, True])

    points = [RocPoint(fpr=0.0, tpr=0.0, threshold=np.inf)]
    for i in ends:
        points.append(
            RocPoint(
                fpr=min(fp[i] / fp[-1], 1.0),
                tpr=min(tp[i] / tp[-1], 1.0),
                threshold=float(p[i]),
            )
        )
    return points


def roc_frame(points: Sequence[RocPoint]) -> pd.DataFrame:
    return pd.DataFrame(
        {
            "threshold": [pt.threshold for pt in points],
            "fpr": [pt.fpr for pt in points],
            "tpr": [pt.tpr for pt in points],
        }
    )


def weighted_auc(roc_or_prob, label=None, weight=None) -> float:
    """Trapezoid area under a weighted ROC curve, given the curve itself or (prob, label, weight)."""
    if label is None:
        points = list(roc_or_prob)
    else:
        points = weighted_roc(roc_or_prob, label, weight)
    fpr = np.array([pt.fpr for pt in points])
    tpr = np.array([pt.tpr for pt in points])
    return float(np.trapezoid(tpr, fpr))


def weighted_concordance(prob, label, weight=None) -> float:
    """Pairwise weighted concordance with half credit for ties; O(n^2)."""
    prob, label, weight = _check_inputs(prob, label, weight)
    pos, neg = label == 1, label == 0
    p_pos, p_neg = prob[pos][:, None], prob[neg][None, :]
    credit = (p_pos > p_neg) + 0.5 * (p_pos == p_neg)
    pair_w = weight[pos][:, None] * weight[neg][None, :]
    return float(np.sum(pair_w * credit) / (weight[pos].sum() * weight[neg].sum()))


def auc_grid(aucs: Mapping[Tuple[str, str], float], models: Optional[Sequence[str]] = None) -> pd.DataFrame:
    """
    Arrange AUCs keyed by (model, decomposition) into a model x decomposition
    table; combinations that were not run are left empty.
    """
    rows = list(models or MODEL_ROWS)
    table = pd.DataFrame(np.nan, index=pd.Index(rows, name="model"), columns=list(DECOMPOSITION_COLUMNS))
    for (model, decomposition), value in aucs.items():
        if model not in table.index or decomposition not in table.columns:
            raise PreconditionError("metrics", f"unknown grid cell ({model}, {decomposition})")
        table.loc[model, decomposition] = value
    return table.reset_index()
