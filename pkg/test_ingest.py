# test_ingest.py

import tempfile
from pathlib import Path

import numpy as np
import pandas as pd

from funcount.errors import InputFormatError, PreconditionError
from funcount.ingest import (
    COVARIATE_COLUMNS,
    FIVE_MINUTE_GRID,
    MinuteRecord,
    adjust_weights,
    bin_five_minutes,
    load_count_curves,
    load_dataset,
    median_day,
    recode_nonwear,
)


def _raises(exc_type, fn, *args, **kwargs):
    try:
        fn(*args, **kwargs)
    except exc_type:
        return
    raise AssertionError(f"{fn.__name__} did not raise {exc_type.__name__}")


def _record(head_counts, head_flags, sid="A", day=1):
    counts = np.zeros(1440, dtype=int)
    flags = np.ones(1440, dtype=bool)
    counts[: len(head_counts)] = head_counts
    flags[: len(head_flags)] = head_flags
    return MinuteRecord(subject_id=sid, day_index=day, counts=counts, wear_flags=flags)


def _covariate_row(sid, **overrides):
    row = {
        "subject_id": sid,
        "age": 60.0,
        "bmi": 27.0,
        "drinks_per_week": 1.0,
        "hdl_cholesterol": 50.0,
        "total_cholesterol": 190.0,
        "systolic_bp": 125.0,
        "n_weekdays": 5,
        "n_weekend": 2,
        "race": "White",
        "gender": "Female",
        "education": "High School",
        "smoking": "Never",
        "diabetes": "No",
        "chf": "No",
        "chd": "No",
        "cancer": "No",
        "stroke": "No",
        "raw_survey_weight": 1000.0,
    }
    row.update(overrides)
    return row


def _write_fixture(tmp: Path, n_bins=288, covariates=None, mortality=None):
    ids = ["s1", "s2", "s3"]
    accel = pd.DataFrame(np.arange(3 * n_bins).reshape(3, n_bins) % 7, columns=[f"bin_{j}" for j in range(n_bins)])
    accel.insert(0, "subject_id", ids)
    accel.to_csv(tmp / "accel5.csv", index=False)
    cov = covariates if covariates is not None else pd.DataFrame([_covariate_row(s) for s in ids])
    cov.to_csv(tmp / "covariates.csv", index=False)
    mort = mortality if mortality is not None else pd.DataFrame({"subject_id": ids, "mortstat": [0, 1, 0]})
    mort.to_csv(tmp / "mortality.csv", index=False)
    return tmp / "accel5.csv", tmp / "covariates.csv", tmp / "mortality.csv"


# ---------- Preprocessing ----------

def test_recode_nonwear():
    rec = _record([5, 0, 7], [True, True, True])
    assert np.array_equal(recode_nonwear(rec).counts[:3], [5, 0, 7])

    rec = _record([5, 0, 7], [False, True, True])
    out = recode_nonwear(rec)
    assert np.array_equal(out.counts[:3], [0, 0, 7])
    # idempotent
    assert np.array_equal(recode_nonwear(out).counts, out.counts)

    rec = _record([5, 0, 7], np.zeros(1440, dtype=bool))
    assert recode_nonwear(rec).counts.sum() == 0


def test_minute_record_rejects_wrong_length():
    _raises(ValueError, MinuteRecord, subject_id="A", day_index=1, counts=[1, 2, 3], wear_flags=[True] * 3)


def test_bin_five_minutes():
    assert bin_five_minutes(np.zeros(1440, dtype=int)).sum() == 0
    assert np.all(bin_five_minutes(np.ones(1440, dtype=int)) == 5)

    counts = np.zeros(1440, dtype=int)
    counts[:5] = [1, 2, 3, 4, 5]
    binned = bin_five_minutes(counts)
    assert binned.shape == (288,)
    assert binned[0] == 15 and binned[1:].sum() == 0

    rng = np.random.default_rng(3)
    day = rng.integers(0, 500, 1440)
    assert bin_five_minutes(day).sum() == day.sum()

    _raises(InputFormatError, bin_five_minutes, np.ones(1439, dtype=int))


def test_median_day():
    day = np.arange(288)
    assert np.array_equal(median_day([day]), day)

    days = [np.full(288, 0), np.full(288, 3), np.full(288, 4)]
    assert np.all(median_day(days) == 3)
    assert np.array_equal(median_day(days[::-1]), median_day(days))

    assert np.all(median_day([np.full(288, 1), np.full(288, 2)]) == 2)
    _raises(PreconditionError, median_day, [])


def test_adjust_weights():
    assert np.allclose(adjust_weights([2, 2, 2]), [1, 1, 1])
    assert np.allclose(adjust_weights([1, 3]), [0.5, 1.5])
    out = adjust_weights([1, 2, 3, 6])
    assert np.allclose(out, [1 / 3, 2 / 3, 1, 2])
    assert abs(out.mean() - 1.0) < 1e-12
    _raises(PreconditionError, adjust_weights, [1.0, 0.0])


# ---------- CSV loading ----------

def test_load_dataset_keeps_complete_cases():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cov = pd.DataFrame([_covariate_row("s1"), _covariate_row("s2", bmi=np.nan), _covariate_row("s3")])
        paths = _write_fixture(tmp, covariates=cov)
        curves, subjects = load_dataset(*paths)
        assert [s.subject_id for s in subjects] == ["s1", "s3"]
        assert curves.subject_ids == ["s1", "s3"]
        assert curves.counts.shape == (2, 288)
        assert np.allclose(curves.grid, FIVE_MINUTE_GRID)
        assert subjects[1].mortality == 0


def test_load_dataset_missing_mortality():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        mort = pd.DataFrame({"subject_id": ["s1", "s3"], "mortstat": [1, 0]})
        curves, subjects = load_dataset(*_write_fixture(tmp, mortality=mort))
        assert [s.subject_id for s in subjects] == ["s1", "s3"]
        assert subjects[0].mortality == 1
        assert curves.n_subjects == 2


def test_load_dataset_rejects_unknown_level_and_duplicates():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cov = pd.DataFrame([_covariate_row("s1"), _covariate_row("s2", race="Martian"), _covariate_row("s3")])
        _raises(InputFormatError, load_dataset, *_write_fixture(tmp, covariates=cov))

        cov = pd.DataFrame([_covariate_row("s1"), _covariate_row("s1"), _covariate_row("s3")])
        _raises(InputFormatError, load_dataset, *_write_fixture(tmp, covariates=cov))

        (tmp / "broken.csv").write_text("no,subject,column\n1,2,3\n")
        _raises(InputFormatError, load_count_curves, tmp / "broken.csv")


def test_binned_days_are_summarized_by_median():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        frame = pd.DataFrame(
            {
                "subject_id": ["a", "a", "a", "b"],
                "day": [1, 2, 3, 1],
                "bin_0": [0, 3, 4, 1],
                "bin_1": [1, 2, np.nan, 5],
            }
        )
        frame.to_csv(tmp / "accel5.csv", index=False)
        curves = load_count_curves(tmp / "accel5.csv")
        assert curves.subject_ids == ["a", "b"]
        # day 3 of subject a has a missing bin and is dropped: median of {0,3}, {1,2}
        assert curves.counts.tolist() == [[2, 2], [1, 5]]


def test_minute_files_with_wear():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cols = [f"min_{j}" for j in range(1440)]
        counts = np.zeros((2, 1440), dtype=int)
        counts[:, :5] = [[1, 2, 3, 4, 5], [10, 10, 10, 10, 10]]
        flags = np.ones((2, 1440), dtype=int)
        flags[1, 0] = 0
        accel = pd.DataFrame(counts, columns=cols)
        accel.insert(0, "day", [1, 1])
        accel.insert(0, "subject_id", ["x", "y"])
        wear = pd.DataFrame(flags, columns=cols)
        wear.insert(0, "day", [1, 1])
        wear.insert(0, "subject_id", ["x", "y"])
        accel.to_csv(tmp / "accel.csv", index=False)
        wear.to_csv(tmp / "wear.csv", index=False)

        curves = load_count_curves(tmp / "accel.csv")
        assert curves.counts.shape == (2, 288)
        assert curves.counts[0, 0] == 15
        assert curves.counts[1, 0] == 40


def test_fractional_counts_are_rejected():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        (tmp / "accel5.csv").write_text("subject_id,bin_0,bin_1\nA,2.7,3.9\n")
        _raises(InputFormatError, load_count_curves, tmp / "accel5.csv")
        (tmp / "text.csv").write_text("subject_id,bin_0,bin_1\nA,2,lots\n")
        _raises(InputFormatError, load_count_curves, tmp / "text.csv")

        cols = [f"min_{j}" for j in range(1440)]
        counts = np.zeros((1, 1440))
        counts[0, 3] = 2.5
        accel = pd.DataFrame(counts, columns=cols)
        accel.insert(0, "day", [1])
        accel.insert(0, "subject_id", ["x"])
        wear = pd.DataFrame(np.ones((1, 1440), dtype=int), columns=cols)
        wear.insert(0, "day", [1])
        wear.insert(0, "subject_id", ["x"])
        accel.to_csv(tmp / "accel.csv", index=False)
        wear.to_csv(tmp / "wear.csv", index=False)
        _raises(InputFormatError, load_count_curves, tmp / "accel.csv")

        accel[cols] = 0
        accel.to_csv(tmp / "accel.csv", index=False)
        wear.loc[0, "min_7"] = 2
        wear.to_csv(tmp / "wear.csv", index=False)
        _raises(InputFormatError, load_count_curves, tmp / "accel.csv")

        wear.loc[0, "min_7"] = 1
        wear.loc[0, "day"] = 0
        accel.loc[0, "day"] = 0
        wear.to_csv(tmp / "wear.csv", index=False)
        accel.to_csv(tmp / "accel.csv", index=False)
        _raises(InputFormatError, load_count_curves, tmp / "accel.csv")


def test_covariate_columns_contract():
    assert COVARIATE_COLUMNS[0] == "subject_id"
    assert COVARIATE_COLUMNS[-1] == "raw_survey_weight"
    assert "systolic_bp" in COVARIATE_COLUMNS


def main():
    test_recode_nonwear()
    test_minute_record_rejects_wrong_length()
    test_bin_five_minutes()
    test_median_day()
    test_adjust_weights()
    test_load_dataset_keeps_complete_cases()
    test_load_dataset_missing_mortality()
    test_load_dataset_rejects_unknown_level_and_duplicates()
    test_binned_days_are_summarized_by_median()
    test_minute_files_with_wear()
    test_fractional_counts_are_rejected()
    test_covariate_columns_contract()
    print("All ingest tests passed.")


if __name__ == "__main__":
    main()
