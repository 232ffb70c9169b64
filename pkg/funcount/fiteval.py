# funcount/fiteval.py

import logging
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field
from scipy.linalg import subspace_angles

from funcount.arrays import FloatArray
from funcount.basis import trapezoid_weights
from funcount.decomposition import Decomposition
from funcount.errors import InputFormatError, PreconditionError
from funcount.outputs import write_csv

logger = logging.getLogger(__name__)


# ---------- MAE ----------

def mae_per_subject(fitted, observed) -> np.ndarray:
    """Mean absolute error of each row, on the count scale."""
    fitted = np.atleast_2d(np.asarray(fitted, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    if fitted.shape != observed.shape:
        raise PreconditionError("fiteval", f"fitted {fitted.shape} and observed {observed.shape} differ in shape")
    return np.mean(np.abs(fitted - observed), axis=1)


def write_mae_csv(subject_ids: Sequence[str], method: str, mae, path: Union[str, Path]) -> Path:
    frame = pd.DataFrame({"subject_id": list(subject_ids), "method": method, "mae": np.asarray(mae)})
    return write_csv(frame, path)


def compare_mae(paths: Sequence[Union[str, Path]]) -> pd.DataFrame:
    """Per-method summary (method, mean_mae, median_mae, n) of one or more MAE CSV files."""
    frames = []
    for path in paths:
        try:
            frame = pd.read_csv(path, dtype={"subject_id": str})
        except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
            raise InputFormatError("fiteval", f"cannot read {path}: {exc}") from exc
        missing = {"subject_id", "method", "mae"} - set(frame.columns)
        if missing:
            raise InputFormatError("fiteval", f"{path} lacks columns {sorted(missing)}")
        frames.append(frame)
    if not frames:
        raise PreconditionError("fiteval", "no MAE files given")

    table = (
        pd.concat(frames, ignore_index=True)
        .groupby("method", sort=True)["mae"]
        .agg(mean_mae="mean", median_mae="median", n="size")
        .reset_index()
    )
    return table


# ---------- Effect curves ----------

class EffectCurves(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    component: int = Field(ge=1, description="1-based component index.")
    base: FloatArray = Field(description="Reference curve.")
    plus: FloatArray = Field(description="Curve at +2 SD of the component's scores.")
    minus: FloatArray = Field(description="Curve at -2 SD of the component's scores.")
    scale: str = Field(description="Scale of base/plus/minus: log, intensity or count.")
    base_counts: Optional[FloatArray] = Field(default=None, description="GFPCA base on the count scale, exp(.) - 1.")
    plus_counts: Optional[FloatArray] = Field(default=None, description="GFPCA plus curve on the count scale.")
    minus_counts: Optional[FloatArray] = Field(default=None, description="GFPCA minus curve on the count scale.")


def effect_curves(decomp: Decomposition, k: int) -> EffectCurves:
    """Curves at plus and minus two score SDs along component k (1-based)."""
    if not 1 <= k <= decomp.n_components:
        raise PreconditionError("fiteval", f"component {k} outside 1..{decomp.n_components}")
    phi = decomp.components[k - 1]
    column = decomp.scores[:, k - 1]
    sd = float(np.std(column, ddof=1)) if column.size > 1 else 0.0
    step = 2.0 * sd * phi

    if decomp.method == "GFPCA":
        base = decomp.mean.copy()
        plus, minus = base + step, base - step
        return EffectCurves(
            component=k,
            base=base,
            plus=plus,
            minus=minus,
            scale="log",
            base_counts=np.expm1(base),
            plus_counts=np.expm1(plus),
            minus_counts=np.expm1(minus),
        )
    if decomp.method == "PFPCA":
        return EffectCurves(
            component=k,
            base=np.exp(decomp.mean),
            plus=np.exp(decomp.mean + step),
            minus=np.exp(decomp.mean - step),
            scale="intensity",
        )

    base = decomp.scores.mean(axis=0) @ decomp.components
    return EffectCurves(
        component=k,
        base=base,
        plus=base + step,
        minus=np.maximum(base - step, 0.0),
        scale="count",
    )


def effects_frame(decomp: Decomposition, counts: bool = False) -> pd.DataFrame:
    """Tidy component,time,base,plus,minus rows for every component."""
    if counts and decomp.method != "GFPCA":
        raise PreconditionError("fiteval", "count-scale effect curves are only defined for GFPCA")
    rows = []
    for k in range(1, decomp.n_components + 1):
        eff = effect_curves(decomp, k)
        base, plus, minus = (
            (eff.base_counts, eff.plus_counts, eff.minus_counts) if counts else (eff.base, eff.plus, eff.minus)
        )
        rows.append(
            pd.DataFrame({"component": k, "time": decomp.grid, "base": base, "plus": plus, "minus": minus})
        )
    return pd.concat(rows, ignore_index=True)


def write_effects_csv(decomp: Decomposition, path: Union[str, Path], counts: bool = False) -> Path:
    return write_csv(effects_frame(decomp, counts=counts), path)


# ---------- Subspace comparison ----------

def principal_angle(a, b, grid) -> float:
    """
    Largest principal angle, in degrees, between the spans of the rows of
    a and b (component curves on `grid`) under the trapezoid inner product.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    root_w = np.sqrt(trapezoid_weights(np.asarray(grid, dtype=np.float64)))
    if a.shape[1] != root_w.size or b.shape[1] != root_w.size:
        raise PreconditionError("fiteval", "component curves must live on the given grid")
    angles = subspace_angles((a * root_w).T, (b * root_w).T)
    return float(np.degrees(np.max(angles)))
