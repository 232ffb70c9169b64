# funcount/ingest.py

import logging
from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from funcount.arrays import BoolArray, FloatArray, IntArray
from funcount.errors import InputFormatError, PreconditionError
from funcount.outputs import write_csv

logger = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440
BIN_WIDTH = 5
BINS_PER_DAY = MINUTES_PER_DAY // BIN_WIDTH

# Midpoints (in minutes) of the 288 five-minute bins.
FIVE_MINUTE_GRID = np.arange(BINS_PER_DAY) * BIN_WIDTH + BIN_WIDTH / 2.0

# ---------- Covariate level sets (first level = reference) ----------

RACE_LEVELS = ("White", "Black", "Hispanic", "Other")
GENDER_LEVELS = ("Male", "Female")
EDUCATION_LEVELS = ("Less than High School", "High School", "College and Above")
SMOKING_LEVELS = ("Never", "Former", "Current")
YES_NO_LEVELS = ("No", "Yes")

NUMERIC_COVARIATES = (
    "age",
    "bmi",
    "drinks_per_week",
    "hdl_cholesterol",
    "total_cholesterol",
    "systolic_bp",
    "n_weekdays",
    "n_weekend",
)

CATEGORICAL_COVARIATES: Dict[str, Tuple[str, ...]] = {
    "race": RACE_LEVELS,
    "gender": GENDER_LEVELS,
    "education": EDUCATION_LEVELS,
    "smoking": SMOKING_LEVELS,
    "diabetes": YES_NO_LEVELS,
    "chf": YES_NO_LEVELS,
    "chd": YES_NO_LEVELS,
    "cancer": YES_NO_LEVELS,
    "stroke": YES_NO_LEVELS,
}

WEIGHT_COLUMN = "raw_survey_weight"
COVARIATE_COLUMNS = ("subject_id",) + NUMERIC_COVARIATES + tuple(CATEGORICAL_COVARIATES) + (WEIGHT_COLUMN,)

YesNo = Literal["No", "Yes"]


# ---------- Domain models ----------

class MinuteRecord(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_id: str = Field(description="Subject identifier.")
    day_index: int = Field(ge=1, description="Day of wear, starting at 1.")
    counts: IntArray = Field(description="Activity counts for each of the 1440 minutes.")
    wear_flags: BoolArray = Field(description="True where the device was worn.")

    @model_validator(mode="after")
    def _check_shape(self):
        if self.counts.shape != (MINUTES_PER_DAY,) or self.wear_flags.shape != (MINUTES_PER_DAY,):
            raise ValueError(
                f"counts and wear_flags must both have length {MINUTES_PER_DAY}, "
                f"got {self.counts.shape} and {self.wear_flags.shape}"
            )
        if np.any(self.counts < 0):
            raise ValueError("activity counts must be nonnegative")
        return self


class CountCurveSet(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_ids: List[str] = Field(description="One identifier per row of counts.")
    grid: FloatArray = Field(description="Shared time grid (minutes, bin midpoints).")
    counts: IntArray = Field(description="N x T matrix of nonnegative integer counts.")

    @model_validator(mode="after")
    def _check_consistency(self):
        if self.counts.ndim != 2:
            raise ValueError("counts must be a 2-D matrix")
        n, t = self.counts.shape
        if len(self.subject_ids) != n:
            raise ValueError(f"{len(self.subject_ids)} subject ids for {n} count rows")
        if self.grid.shape != (t,):
            raise ValueError(f"grid has {self.grid.size} points but counts have {t} columns")
        if t > 1 and np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(self.counts < 0):
            raise ValueError("counts must be nonnegative")
        if len(set(self.subject_ids)) != n:
            raise ValueError("subject ids must be unique")
        return self

    @property
    def n_subjects(self) -> int:
        return self.counts.shape[0]

    @property
    def n_points(self) -> int:
        return self.counts.shape[1]

    def subset(self, rows: Sequence[int]) -> "CountCurveSet":
        rows = list(rows)
        return CountCurveSet(
            subject_ids=[self.subject_ids[i] for i in rows],
            grid=self.grid,
            counts=self.counts[rows],
        )


class SubjectCovariates(BaseModel):
    model_config = ConfigDict(frozen=True)

    subject_id: str = Field(description="Subject identifier.")
    age: float = Field(description="Age in years.")
    bmi: float = Field(description="Body mass index.")
    drinks_per_week: float = Field(ge=0, description="Alcoholic drinks per week.")
    hdl_cholesterol: float = Field(description="HDL cholesterol, mg/dL.")
    total_cholesterol: float = Field(description="Total cholesterol, mg/dL.")
    systolic_bp: float = Field(description="Systolic blood pressure, mmHg.")
    n_weekdays: float = Field(ge=0, description="Number of weekdays with valid wear.")
    n_weekend: float = Field(ge=0, description="Number of weekend days with valid wear.")
    race: Literal["White", "Black", "Hispanic", "Other"] = Field(description="Race/ethnicity.")
    gender: Literal["Male", "Female"] = Field(description="Gender.")
    education: Literal["Less than High School", "High School", "College and Above"] = Field(
        description="Highest education level."
    )
    smoking: Literal["Never", "Former", "Current"] = Field(description="Cigarette smoking status.")
    diabetes: YesNo = Field(description="Has diabetes.")
    chf: YesNo = Field(description="Has congestive heart failure.")
    chd: YesNo = Field(description="Has coronary heart disease.")
    cancer: YesNo = Field(description="Has cancer.")
    stroke: YesNo = Field(description="Has had a stroke.")
    raw_survey_weight: float = Field(gt=0, description="Raw survey sample weight.")
    mortality: Literal[0, 1] = Field(description="Five-year all-cause mortality (1 = dead).")


# ---------- Preprocessing operations ----------

def recode_nonwear(rec: MinuteRecord) -> MinuteRecord:
    """Set counts to 0 at every minute flagged as non-wear."""
    if rec.counts.shape != rec.wear_flags.shape:
        raise InputFormatError("ingest", "counts and wear_flags lengths differ")
    counts = np.where(rec.wear_flags, rec.counts, 0)
    return MinuteRecord(
        subject_id=rec.subject_id,
        day_index=rec.day_index,
        counts=counts,
        wear_flags=rec.wear_flags,
    )


def bin_five_minutes(counts) -> np.ndarray:
    """Sum 1440 minute counts into 288 five-minute bins."""
    counts = np.asarray(counts)
    if counts.shape != (MINUTES_PER_DAY,):
        raise InputFormatError("ingest", f"expected {MINUTES_PER_DAY} minute counts, got shape {counts.shape}")
    if np.any(counts < 0):
        raise InputFormatError("ingest", "minute counts must be nonnegative")
    return counts.astype(np.int64).reshape(BINS_PER_DAY, BIN_WIDTH).sum(axis=1)


def round_half_away(values) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def median_day(days: Sequence) -> np.ndarray:
    """
    Per-time-point median over a subject's day curves, rounded half away
    from zero so the summary stays count-valued.
    """
    if len(days) == 0:
        raise PreconditionError("ingest", "median_day needs at least one day")
    stacked = np.vstack([np.asarray(d) for d in days])
    if np.any(stacked < 0):
        raise InputFormatError("ingest", "day curves must be nonnegative")
    return round_half_away(np.median(stacked, axis=0)).astype(np.int64)


def adjust_weights(raw) -> np.ndarray:
    """Divide raw survey weights by their mean so they average 1."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        raise PreconditionError("ingest", "no survey weights given")
    if not np.all(np.isfinite(raw)) or np.any(raw <= 0):
        raise PreconditionError("ingest", "survey weights must be positive and finite")
    return raw / raw.mean()


# ---------- CSV loading ----------

def _read_csv(path: Union[str, Path], what: str) -> pd.DataFrame:
    try:
        frame = pd.read_csv(path, dtype={"subject_id": str})
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise InputFormatError("ingest", f"cannot parse {what} file {path}: {exc}") from exc
    if "subject_id" not in frame.columns:
        raise InputFormatError("ingest", f"{what} file {path} has no subject_id column")
    frame["subject_id"] = frame["subject_id"].astype(str).str.strip()
    return frame


def _numbered_columns(frame: pd.DataFrame, prefix: str) -> List[str]:
    cols = [c for c in frame.columns if c.startswith(prefix)]
    try:
        cols.sort(key=lambda c: int(c[len(prefix):]))
    except ValueError as exc:
        raise InputFormatError("ingest", f"malformed {prefix}* column name") from exc
    return cols


def _count_matrix(frame: pd.DataFrame, cols: List[str], what: str, allowed: Optional[Sequence[int]] = None) -> np.ndarray:
    """Values of the count columns as floats, NaN where missing; anything else must be a nonnegative integer."""
    try:
        values = frame[cols].apply(pd.to_numeric).to_numpy(dtype=np.float64)
    except (ValueError, TypeError) as exc:
        raise InputFormatError("ingest", f"{what} file has a non-numeric entry: {exc}") from exc
    present = values[~np.isnan(values)]
    if np.any(~np.isfinite(present)) or np.any(present < 0):
        raise InputFormatError("ingest", f"{what} values must be finite and nonnegative")
    fractional = present[present != np.round(present)]
    if fractional.size:
        raise InputFormatError("ingest", f"{what} values must be integers, got {fractional[0]!r}")
    if allowed is not None and not np.all(np.isin(present, allowed)):
        raise InputFormatError("ingest", f"{what} values must be one of {list(allowed)}")
    return values


def _validated(model, what: str, **fields):
    try:
        return model(**fields)
    except ValidationError as exc:
        raise InputFormatError("ingest", f"invalid {what}: {exc}") from exc


def _curves_from_minutes(accel: pd.DataFrame, wear: pd.DataFrame) -> Dict[str, np.ndarray]:
    minute_cols = _numbered_columns(accel, "min_")
    if len(minute_cols) != MINUTES_PER_DAY:
        raise InputFormatError("ingest", f"accelerometry file must have {MINUTES_PER_DAY} minute columns")
    if "day" not in accel.columns:
        raise InputFormatError("ingest", "minute-level accelerometry file needs a day column")
    if accel.shape != wear.shape or list(accel.columns) != list(wear.columns):
        raise InputFormatError("ingest", "wear file must have the same shape and columns as the accelerometry file")
    if not (
        accel["subject_id"].equals(wear["subject_id"])
        and np.array_equal(accel["day"].to_numpy(), wear["day"].to_numpy())
    ):
        raise InputFormatError("ingest", "wear file rows must align with accelerometry rows")

    counts = _count_matrix(accel, minute_cols, "accelerometry")
    flags = _count_matrix(wear, minute_cols, "wear", allowed=(0, 1))

    days_by_subject: Dict[str, List[np.ndarray]] = {}
    dropped = 0
    for row, (sid, day) in enumerate(zip(accel["subject_id"], accel["day"])):
        # A missing minute makes its 5-min bin missing, which drops the day curve.
        if np.isnan(counts[row]).any() or np.isnan(flags[row]).any():
            dropped += 1
            continue
        rec = _validated(
            MinuteRecord,
            f"minute record for subject {sid!r} day {day!r}",
            subject_id=sid,
            day_index=float(pd.to_numeric(day, errors="coerce")),
            counts=counts[row],
            wear_flags=flags[row].astype(bool),
        )
        binned = bin_five_minutes(recode_nonwear(rec).counts)
        days_by_subject.setdefault(sid, []).append(binned)

    if dropped:
        logger.info("Dropped %d day curves with missing minutes", dropped)
    return {sid: median_day(days) for sid, days in days_by_subject.items()}


def _curves_from_bins(accel: pd.DataFrame) -> Dict[str, np.ndarray]:
    bin_cols = _numbered_columns(accel, "bin_")
    values = _count_matrix(accel, bin_cols, "binned accelerometry")
    complete = ~np.isnan(values).any(axis=1)

    if "day" not in accel.columns:
        if accel["subject_id"].duplicated().any():
            dup = accel.loc[accel["subject_id"].duplicated(), "subject_id"].iloc[0]
            raise InputFormatError("ingest", f"duplicate subject_id {dup!r} in accelerometry file")
        return {
            sid: values[row].astype(np.int64)
            for row, sid in enumerate(accel["subject_id"])
            if complete[row]
        }

    days_by_subject: Dict[str, List[np.ndarray]] = {}
    for row, sid in enumerate(accel["subject_id"]):
        if complete[row]:
            days_by_subject.setdefault(sid, []).append(values[row].astype(np.int64))
    return {sid: median_day(days) for sid, days in days_by_subject.items()}


def load_count_curves(accel_path: Union[str, Path], wear_path: Optional[Union[str, Path]] = None) -> CountCurveSet:
    """
    Read accelerometry in either minute-level form (with a parallel wear
    file) or pre-binned accel5 form and summarize each subject to one day.
    """
    accel = _read_csv(accel_path, "accelerometry")
    if any(c.startswith("min_") for c in accel.columns):
        if wear_path is None:
            wear_path = Path(accel_path).with_name("wear.csv")
        wear = _read_csv(wear_path, "wear")
        curves = _curves_from_minutes(accel, wear)
        grid = FIVE_MINUTE_GRID
    elif any(c.startswith("bin_") for c in accel.columns):
        curves = _curves_from_bins(accel)
        n_bins = len(_numbered_columns(accel, "bin_"))
        grid = np.arange(n_bins) * BIN_WIDTH + BIN_WIDTH / 2.0
    else:
        raise InputFormatError("ingest", f"{accel_path} has neither min_* nor bin_* columns")

    ids = [sid for sid in dict.fromkeys(accel["subject_id"]) if sid in curves]
    counts = np.vstack([curves[sid] for sid in ids]) if ids else np.zeros((0, grid.size), dtype=np.int64)
    return _validated(CountCurveSet, f"count curves in {accel_path}", subject_ids=ids, grid=grid, counts=counts)


def load_subjects(covariate_path, mortality_path) -> List[SubjectCovariates]:
    """Covariate rows with complete data and a 0/1 mortality status, in covariate-file order."""
    cov = _read_csv(covariate_path, "covariate")
    missing_cols = [c for c in COVARIATE_COLUMNS if c not in cov.columns]
    if missing_cols:
        raise InputFormatError("ingest", f"covariate file lacks columns: {', '.join(missing_cols)}")
    if cov["subject_id"].duplicated().any():
        dup = cov.loc[cov["subject_id"].duplicated(), "subject_id"].iloc[0]
        raise InputFormatError("ingest", f"duplicate subject_id {dup!r} in covariate file")

    mort = _read_csv(mortality_path, "mortality")
    if "mortstat" not in mort.columns:
        raise InputFormatError("ingest", "mortality file lacks a mortstat column")
    if mort["subject_id"].duplicated().any():
        dup = mort.loc[mort["subject_id"].duplicated(), "subject_id"].iloc[0]
        raise InputFormatError("ingest", f"duplicate subject_id {dup!r} in mortality file")
    mort = mort.dropna(subset=["mortstat"])
    bad = ~mort["mortstat"].isin([0, 1])
    if bad.any():
        raise InputFormatError("ingest", f"mortstat must be 0 or 1, got {mort.loc[bad, 'mortstat'].iloc[0]!r}")

    complete = cov[list(COVARIATE_COLUMNS)].dropna()
    if len(complete) < len(cov):
        logger.info("Dropped %d subjects with missing covariates", len(cov) - len(complete))
    merged = complete.merge(mort[["subject_id", "mortstat"]], on="subject_id", how="inner")

    subjects: List[SubjectCovariates] = []
    for record in merged.to_dict(orient="records"):
        payload = {c: record[c] for c in COVARIATE_COLUMNS}
        for name in CATEGORICAL_COVARIATES:
            payload[name] = str(payload[name]).strip()
        payload["mortality"] = int(record["mortstat"])
        try:
            subjects.append(SubjectCovariates.model_validate(payload))
        except ValidationError as exc:
            raise InputFormatError("ingest", f"invalid covariates for subject {record['subject_id']!r}: {exc}") from exc
    return subjects


def load_dataset(
    accel_path: Union[str, Path],
    covariate_path: Union[str, Path],
    mortality_path: Union[str, Path],
    wear_path: Optional[Union[str, Path]] = None,
) -> Tuple[CountCurveSet, List[SubjectCovariates]]:
    """
    Load and align the three sources.

    Only subjects present in all three, with complete covariates, a
    mortality status and at least one complete day curve, are kept. The
    order follows the covariate file; the counts rows match it.
    """
    logger.info("=== INGEST ===")
    curves = load_count_curves(accel_path, wear_path)
    subjects = load_subjects(covariate_path, mortality_path)

    row_of = {sid: i for i, sid in enumerate(curves.subject_ids)}
    retained = [s for s in subjects if s.subject_id in row_of]
    logger.info("Retained %d subjects with complete data", len(retained))

    aligned = curves.subset([row_of[s.subject_id] for s in retained]) if retained else CountCurveSet(
        subject_ids=[], grid=curves.grid, counts=np.zeros((0, curves.n_points), dtype=np.int64)
    )
    return aligned, retained


# ---------- Writers ----------

def write_count_curves(curves: CountCurveSet, path: Union[str, Path]) -> Path:
    """Write curves in the pre-binned accel5.csv form."""
    frame = pd.DataFrame(curves.counts, columns=[f"bin_{j}" for j in range(curves.n_points)])
    frame.insert(0, "subject_id", curves.subject_ids)
    return write_csv(frame, path)


def covariate_frame(subjects: Sequence[SubjectCovariates]) -> pd.DataFrame:
    rows = [s.model_dump() for s in subjects]
    return pd.DataFrame(rows, columns=list(COVARIATE_COLUMNS) + ["mortality"])


def write_covariates(subjects: Sequence[SubjectCovariates], covariate_path, mortality_path) -> None:
    frame = covariate_frame(subjects)
    write_csv(frame[list(COVARIATE_COLUMNS)], covariate_path)
    write_csv(frame[["subject_id", "mortality"]].rename(columns={"mortality": "mortstat"}), mortality_path)
