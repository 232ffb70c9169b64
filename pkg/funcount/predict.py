# funcount/predict.py

import logging
import math
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.linalg import LinAlgError, lstsq, pinv, qr, solve
from scipy.special import expit
from sklearn.tree import DecisionTreeClassifier, DecisionTreeRegressor

from funcount.arrays import FloatArray, IntArray
from funcount.config import parallel_map
from funcount.decomposition import Decomposition
from funcount.errors import ConvergenceError, PreconditionError, RankDeficiencyError
from funcount.ingest import CATEGORICAL_COVARIATES, NUMERIC_COVARIATES, SubjectCovariates, adjust_weights

logger = logging.getLogger(__name__)

INTERCEPT = "(Intercept)"
SEPARATION_BOUND = 15.0
SEPARATION_STREAK = 5
Z_95 = 1.96

ModelKind = Literal["logistic", "forest", "adaboost"]


# ---------- Predictor table ----------

class PredictorTable(BaseModel):
    """
    Design-ready predictors: numeric covariates, treatment-coded categorical
    covariates (reference levels absent), then decomposition scores.
    """

    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    subject_ids: List[str] = Field(description="One id per row.")
    covariate_names: List[str] = Field(description="Covariate columns, dummies named variable:level.")
    score_names: List[str] = Field(default_factory=list, description="Score columns (empty for the baseline).")
    features: FloatArray = Field(description="N x p matrix, covariates first, then scores.")
    weights: FloatArray = Field(description="Adjusted survey weights.")
    outcome: IntArray = Field(description="0 = alive, 1 = dead.")

    @model_validator(mode="after")
    def _check(self):
        n = len(self.subject_ids)
        p = len(self.covariate_names) + len(self.score_names)
        if self.features.shape != (n, p):
            raise ValueError(f"features must be {n} x {p}")
        if self.weights.shape != (n,) or self.outcome.shape != (n,):
            raise ValueError("one weight and one outcome per row are required")
        if np.isnan(self.features).any():
            raise ValueError("features contain missing entries")
        if np.any(self.weights <= 0):
            raise ValueError("weights must be positive")
        if not np.all(np.isin(self.outcome, (0, 1))):
            raise ValueError("outcome must be 0 or 1")
        return self

    @property
    def feature_names(self) -> List[str]:
        return self.covariate_names + self.score_names

    @property
    def n_rows(self) -> int:
        return len(self.subject_ids)

    def columns(self, names: Sequence[str]) -> np.ndarray:
        index = {name: j for j, name in enumerate(self.feature_names)}
        missing = [name for name in names if name not in index]
        if missing:
            raise PreconditionError("predict", f"table has no columns {missing}")
        return self.features[:, [index[name] for name in names]]

    def subset(self, rows: Sequence[int]) -> "PredictorTable":
        rows = list(rows)
        return PredictorTable(
            subject_ids=[self.subject_ids[i] for i in rows],
            covariate_names=self.covariate_names,
            score_names=self.score_names,
            features=self.features[rows],
            weights=self.weights[rows],
            outcome=self.outcome[rows],
        )


def dummy_names() -> List[str]:
    names = list(NUMERIC_COVARIATES)
    for variable, levels in CATEGORICAL_COVARIATES.items():
        names.extend(f"{variable}:{level}" for level in levels[1:])
    return names


def align_scores(
    subjects: Sequence[SubjectCovariates], decomp: Decomposition
) -> Tuple[List[SubjectCovariates], np.ndarray]:
    """Keep the subjects that have a score row, in covariate order, with their scores."""
    row_of = {sid: i for i, sid in enumerate(decomp.subject_ids)}
    kept = [s for s in subjects if s.subject_id in row_of]
    if len(kept) < len(subjects):
        logger.warning("%d subject(s) without decomposition scores were dropped", len(subjects) - len(kept))
    scores = decomp.scores[[row_of[s.subject_id] for s in kept]] if kept else np.zeros((0, decomp.n_components))
    return kept, scores


def build_predictor_table(
    subjects: Sequence[SubjectCovariates],
    scores=None,
    score_names: Optional[Sequence[str]] = None,
) -> PredictorTable:
    """
    Dummy-code the covariates (first level of every categorical is the
    reference) and append the score columns. Weights are the raw survey
    weights divided by their mean over these subjects.
    """
    if not subjects:
        raise PreconditionError("predict", "no subjects to build a predictor table from")
    columns = []
    for s in subjects:
        row = [getattr(s, name) for name in NUMERIC_COVARIATES]
        for variable, levels in CATEGORICAL_COVARIATES.items():
            value = getattr(s, variable)
            row.extend(1.0 if value == level else 0.0 for level in levels[1:])
        columns.append(row)
    features = np.asarray(columns, dtype=np.float64)

    names: List[str] = []
    if scores is not None:
        scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
        if scores.shape[0] != len(subjects):
            raise PreconditionError("predict", f"{scores.shape[0]} score rows for {len(subjects)} subjects")
        names = list(score_names) if score_names is not None else [f"score_{k + 1}" for k in range(scores.shape[1])]
        if len(names) != scores.shape[1]:
            raise PreconditionError("predict", "one name per score column is required")
        features = np.hstack([features, scores])

    return PredictorTable(
        subject_ids=[s.subject_id for s in subjects],
        covariate_names=dummy_names(),
        score_names=names,
        features=features,
        weights=adjust_weights([s.raw_survey_weight for s in subjects]),
        outcome=[s.mortality for s in subjects],
    )


def stratified_split(outcomes, weights=None, ratio: float = 0.7, seed: int = 0) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per class, floor(ratio * n_class) randomly chosen rows go to training
    and the rest to testing. Returns sorted (train, test) index arrays.
    """
    y = np.asarray(outcomes).ravel()
    if weights is not None and np.asarray(weights).size != y.size:
        raise PreconditionError("predict", "one weight per outcome is required")
    if not 0.0 < ratio < 1.0:
        raise PreconditionError("predict", f"split ratio must lie in (0, 1), got {ratio}")

    rng = np.random.default_rng(seed)
    train, test = [], []
    for cls in (0, 1):
        members = np.flatnonzero(y == cls)
        if members.size == 0:
            raise PreconditionError("predict", f"class {cls} is empty, cannot stratify")
        shuffled = rng.permutation(members)
        n_train = int(math.floor(ratio * members.size + 1e-9))
        train.append(shuffled[:n_train])
        test.append(shuffled[n_train:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))


# ---------- Fitted classifier ----------

class FittedClassifier(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True, frozen=True)

    kind: ModelKind = Field(description="Classifier family.")
    feature_names: List[str] = Field(description="Columns the model was trained on, in order.")

    # logistic
    coefficients: Optional[FloatArray] = Field(default=None, description="Intercept first, then one per feature.")
    covariance: Optional[FloatArray] = Field(default=None, description="Inverse weighted Fisher information.")
    log_likelihood: Optional[float] = Field(default=None, description="Weighted log-likelihood at the estimate.")
    aic: Optional[float] = Field(default=None, description="-2 loglik + 2 (#coefficients).")
    separation: bool = Field(default=False, description="A slope beyond +-15 that kept growing while the deviance kept falling.")
    selected_scores: List[str] = Field(default_factory=list, description="Score columns kept by stepwise AIC.")

    # ensembles
    trees: List[Any] = Field(default_factory=list, description="Fitted scikit-learn trees.")
    leaf_values: List[FloatArray] = Field(default_factory=list, description="AdaBoost per-node step sizes.")
    initial_score: float = Field(default=0.0, description="AdaBoost starting half log-odds.")
    shrinkage: float = Field(default=1.0, description="AdaBoost learning rate.")
    loss_trace: Optional[FloatArray] = Field(default=None, description="AdaBoost weighted exponential loss per stage.")
    raw_importance: Dict[str, float] = Field(default_factory=dict, description="Unnormalized importance per feature.")

    n_iter: int = Field(default=0, description="IRLS iterations (logistic).")
    converged: bool = Field(default=True, description="Whether the fit met its tolerance.")


# ---------- Weighted logistic regression ----------

def _loglik(y, eta, w) -> float:
    return float(np.sum(w * (y * eta - np.logaddexp(0.0, eta))))


def _largest_slope(beta: np.ndarray) -> float:
    return float(np.max(np.abs(beta[1:]))) if beta.size > 1 else 0.0


def _check_rank(x: np.ndarray, names: List[str]) -> None:
    if x.shape[0] < x.shape[1]:
        raise RankDeficiencyError("predict", names[x.shape[0]:])
    _, r, piv = qr(x, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    rank = int(np.sum(diag > 1e-10 * diag[0]))
    if rank < x.shape[1]:
        raise RankDeficiencyError("predict", [names[j] for j in sorted(piv[rank:])])


def fit_weighted_logistic(
    table: PredictorTable,
    columns: Optional[Sequence[str]] = None,
    max_iter: int = 100,
    tol: float = 1e-8,
) -> FittedClassifier:
    """
    Survey-weighted logistic regression by IRLS (Newton on the weighted
    log-likelihood with step halving). `columns` restricts the predictors;
    all table columns are used by default.
    """
    names = list(table.feature_names if columns is None else columns)
    x = np.hstack([np.ones((table.n_rows, 1)), table.columns(names)])
    all_names = [INTERCEPT] + names
    _check_rank(x, all_names)

    y = table.outcome.astype(np.float64)
    w = table.weights
    beta = np.zeros(x.shape[1])
    eta = x @ beta
    ll = _loglik(y, eta, w)
    converged, separation = False, False
    diverging = 0
    n_iter = 0

    for n_iter in range(1, max_iter + 1):
        p = expit(eta)
        grad = x.T @ (w * (y - p))
        info = x.T @ ((w * p * (1.0 - p))[:, None] * x)
        try:
            step = solve(info, grad, assume_a="pos")
        except LinAlgError:
            step = lstsq(info, grad)[0]

        shrink = 1.0
        while True:
            candidate = beta + shrink * step
            cand_eta = x @ candidate
            cand_ll = _loglik(y, cand_eta, w)
            if cand_ll >= ll - 1e-12 * (1.0 + abs(ll)) or shrink < 1e-10:
                break
            shrink *= 0.5
        change = np.max(np.abs(candidate - beta))
        improved = cand_ll > ll
        slope_size = _largest_slope(beta)
        beta, eta, ll = candidate, cand_eta, cand_ll
        logger.debug("IRLS iteration %d loglik %.10g max|dbeta| %.3g", n_iter, ll, change)

        if change < tol:
            converged = True
            break
        # slopes past the bound that keep growing while the likelihood keeps rising
        if improved and _largest_slope(beta) > max(SEPARATION_BOUND, slope_size):
            diverging += 1
        else:
            diverging = 0
        if diverging >= SEPARATION_STREAK:
            separation = True
            break

    if not converged and _largest_slope(beta) > SEPARATION_BOUND:
        separation = True
    if separation:
        aliased = [all_names[j] for j in 1 + np.flatnonzero(np.abs(beta[1:]) > SEPARATION_BOUND)]
        logger.warning("Possible complete separation; large coefficients for %s", ", ".join(aliased))
    elif not converged:
        raise ConvergenceError("predict", f"logistic IRLS did not converge in {max_iter} iterations", last_iterate=beta)

    p = expit(eta)
    info = x.T @ ((w * p * (1.0 - p))[:, None] * x)
    try:
        covariance = np.linalg.inv(info)
    except np.linalg.LinAlgError:
        covariance = pinv(info)

    return FittedClassifier(
        kind="logistic",
        feature_names=names,
        coefficients=beta,
        covariance=covariance,
        log_likelihood=ll,
        aic=-2.0 * ll + 2.0 * beta.size,
        separation=separation,
        selected_scores=[n for n in names if n in table.score_names],
        n_iter=n_iter,
        converged=converged,
    )


def stepwise_aic(
    table: PredictorTable,
    fixed: Optional[Sequence[str]] = None,
    candidates: Optional[Sequence[str]] = None,
) -> List[str]:
    """
    Backward elimination over the candidate score columns: drop the column
    whose removal lowers AIC the most, until no removal lowers it.
    Fixed columns (the covariates by default) are never dropped.
    """
    fixed = list(table.covariate_names if fixed is None else fixed)
    current = list(table.score_names if candidates is None else candidates)
    if not current:
        return []

    best_aic = fit_weighted_logistic(table, fixed + current).aic
    while current:
        trials = []
        for name in current:
            reduced = [c for c in current if c != name]
            trials.append((fit_weighted_logistic(table, fixed + reduced).aic, name))
        aic, name = min(trials)
        if aic >= best_aic:
            break
        logger.info("Stepwise AIC: dropping %s (AIC %.4f -> %.4f)", name, best_aic, aic)
        current.remove(name)
        best_aic = aic
    return current


def fit_logistic_stepwise(table: PredictorTable) -> FittedClassifier:
    """Stepwise AIC on the score columns, then the final fit on covariates plus the kept scores."""
    selected = stepwise_aic(table)
    logger.info("Selected score columns: %s", ", ".join(selected) if selected else "none")
    return fit_weighted_logistic(table, table.covariate_names + selected)


def coefficient_table(model: FittedClassifier) -> pd.DataFrame:
    """
    variable, coefficient, ci_low, ci_high rows with 95% Wald intervals.
    Reference levels of categorical covariates are listed with 0 (0, 0).
    """
    if model.kind != "logistic":
        raise PreconditionError("predict", "coefficient tables exist only for logistic models")
    se = np.sqrt(np.clip(np.diag(model.covariance), 0.0, None))
    rows = []
    seen_reference = set()
    for j, name in enumerate([INTERCEPT] + model.feature_names):
        variable = name.split(":", 1)[0]
        if ":" in name and variable in CATEGORICAL_COVARIATES and variable not in seen_reference:
            seen_reference.add(variable)
            rows.append((f"{variable}:{CATEGORICAL_COVARIATES[variable][0]}", 0.0, 0.0, 0.0))
        b = float(model.coefficients[j])
        rows.append((name, b, b - Z_95 * se[j], b + Z_95 * se[j]))
    return pd.DataFrame(rows, columns=["variable", "coefficient", "ci_low", "ci_high"])


# ---------- Tree helpers ----------

def _split_gains(tree) -> Dict[int, float]:
    """Weighted impurity decrease per feature index over one fitted tree."""
    t = tree.tree_
    gains: Dict[int, float] = {}
    for node in range(t.node_count):
        left, right = t.children_left[node], t.children_right[node]
        if left == -1:
            continue
        gain = (
            t.weighted_n_node_samples[node] * t.impurity[node]
            - t.weighted_n_node_samples[left] * t.impurity[left]
            - t.weighted_n_node_samples[right] * t.impurity[right]
        )
        feature = int(t.feature[node])
        gains[feature] = gains.get(feature, 0.0) + max(gain, 0.0)
    return gains


def _require_two_classes(table: PredictorTable) -> None:
    if np.unique(table.outcome).size < 2:
        raise PreconditionError("predict", "training data contain a single outcome class")


def _tree_seeds(seed: int, n: int) -> List[int]:
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(c.generate_state(1)[0] & 0x7FFFFFFF) for c in children]


# ---------- Random forest ----------

def fit_random_forest(
    table: PredictorTable,
    n_trees: int = 500,
    mtry: Optional[int] = None,
    min_node: int = 10,
    seed: int = 0,
    threads: Optional[int] = None,
) -> FittedClassifier:
    """
    Case-weighted random forest: every tree is grown on a bootstrap sample
    drawn with probability proportional to the survey weights, choosing
    each split by Gini impurity over mtry random features.
    """
    _require_two_classes(table)
    x, y, w = table.features, table.outcome, table.weights
    n, p = x.shape
    mtry = max(1, math.ceil(math.sqrt(p))) if mtry is None else mtry
    logger.info("=== RANDOM FOREST (%d trees, mtry=%d, min_node=%d) ===", n_trees, mtry, min_node)
    probs = w / w.sum()

    def grow(tree_seed: int):
        rng = np.random.default_rng(tree_seed)
        draws = np.bincount(rng.choice(n, size=n, p=probs), minlength=n).astype(np.float64)
        tree = DecisionTreeClassifier(
            criterion="gini",
            max_features=mtry,
            min_samples_split=min_node,
            random_state=tree_seed,
        )
        tree.fit(x, y, sample_weight=draws)
        return tree

    trees = parallel_map(grow, _tree_seeds(seed, n_trees), threads)

    importance = np.zeros(p)
    for tree in trees:
        for j, gain in _split_gains(tree).items():
            importance[j] += gain
    return FittedClassifier(
        kind="forest",
        feature_names=table.feature_names,
        trees=trees,
        raw_importance=dict(zip(table.feature_names, importance.tolist())),
    )


# ---------- Exponential-loss boosting ----------

def _exp_loss(w, ypm, f) -> float:
    return float(np.sum(w * np.exp(-ypm * f)))


def fit_adaboost(
    table: PredictorTable,
    n_trees: int = 100,
    depth: int = 1,
    shrinkage: float = 0.1,
    subsample: float = 1.0,
    seed: int = 0,
) -> FittedClassifier:
    """
    Gradient boosting of the survey-weighted exponential loss on y in {-1, +1}.

    Each stage fits a depth-limited regression tree to the negative gradient
    w y exp(-y F) and moves every leaf by `shrinkage` times its Newton step
    sum(w y e^{-yF}) / sum(w e^{-yF}). The weighted training loss is
    nonincreasing over stages.
    """
    _require_two_classes(table)
    if not 0.0 < subsample <= 1.0:
        raise PreconditionError("predict", "subsample must lie in (0, 1]")
    logger.info("=== ADABOOST (%d stages, depth=%d, shrinkage=%g) ===", n_trees, depth, shrinkage)
    x, w = table.features, table.weights
    ypm = 2.0 * table.outcome - 1.0
    n, p = x.shape
    rng = np.random.default_rng(seed)
    seeds = _tree_seeds(seed, n_trees)

    f0 = 0.5 * np.log(w[ypm > 0].sum() / w[ypm < 0].sum())
    f = np.full(n, f0)
    trace = [_exp_loss(w, ypm, f)]
    trees, leaf_values = [], []
    importance = np.zeros(p)

    for stage in range(n_trees):
        margin = w * np.exp(-ypm * f)
        target = ypm * margin
        rows = np.arange(n) if subsample >= 1.0 else np.sort(rng.choice(n, int(math.ceil(subsample * n)), replace=False))
        tree = DecisionTreeRegressor(max_depth=depth, random_state=seeds[stage])
        tree.fit(x[rows], target[rows])

        leaves = tree.apply(x)
        numer = np.bincount(leaves, weights=target, minlength=tree.tree_.node_count)
        denom = np.bincount(leaves, weights=margin, minlength=tree.tree_.node_count)
        gamma = np.divide(numer, denom, out=np.zeros_like(numer), where=denom > 0)

        f = f + shrinkage * gamma[leaves]
        loss = _exp_loss(w, ypm, f)
        if loss > trace[-1] + 1e-10 * (1.0 + trace[-1]):
            raise ConvergenceError("predict", f"exponential loss increased at stage {stage + 1}")
        gains = _split_gains(tree)
        total_gain = sum(gains.values())
        if total_gain > 0:
            for j, gain in gains.items():
                importance[j] += (trace[-1] - loss) * gain / total_gain
        trace.append(loss)
        trees.append(tree)
        leaf_values.append(gamma)
        logger.debug("AdaBoost stage %d loss %.10g", stage + 1, loss)

    return FittedClassifier(
        kind="adaboost",
        feature_names=table.feature_names,
        trees=trees,
        leaf_values=leaf_values,
        initial_score=float(f0),
        shrinkage=shrinkage,
        loss_trace=trace,
        raw_importance=dict(zip(table.feature_names, importance.tolist())),
    )


# ---------- Prediction and importance ----------

def predict_probability(model: FittedClassifier, table: PredictorTable) -> np.ndarray:
    x = table.columns(model.feature_names)
    if model.kind == "logistic":
        prob = expit(model.coefficients[0] + x @ model.coefficients[1:])
    elif model.kind == "forest":
        votes = np.zeros(x.shape[0])
        for tree in model.trees:
            votes += tree.predict(x) == 1
        prob = votes / max(len(model.trees), 1)
    else:
        score = np.full(x.shape[0], model.initial_score)
        for tree, gamma in zip(model.trees, model.leaf_values):
            score += model.shrinkage * gamma[tree.apply(x)]
        prob = expit(2.0 * score)
    return np.clip(prob, 0.0, 1.0)


def predicted_labels(prob, threshold: float = 0.5) -> np.ndarray:
    return (np.asarray(prob) >= threshold).astype(int)


def variable_importance(model: FittedClassifier) -> List[Tuple[str, float]]:
    """(name, importance) pairs scaled so the largest is 100, in descending order."""
    if model.kind == "logistic":
        raise PreconditionError("predict", "variable importance is not defined for logistic models")
    names = list(model.raw_importance)
    values = np.array([model.raw_importance[name] for name in names])
    top = values.max(initial=0.0)
    scaled = values / top * 100.0 if top > 0 else np.zeros_like(values)
    order = np.argsort(-scaled, kind="stable")
    return [(names[j], float(scaled[j])) for j in order]


class ConfusionSummary(BaseModel):
    threshold: float = Field(description="Probability cut-off for a predicted death.")
    predicted_deaths: int = Field(description="Rows predicted dead.")
    true_deaths_predicted: int = Field(description="Dead rows predicted dead.")
    actual_deaths: int = Field(description="Dead rows.")
    weighted_predicted_deaths: float = Field(description="Weight of rows predicted dead.")
    weighted_true_deaths_predicted: float = Field(description="Weight of dead rows predicted dead.")
    weighted_actual_deaths: float = Field(description="Weight of dead rows.")


def confusion_summary(prob, label, weight, threshold: float = 0.5) -> ConfusionSummary:
    pred = predicted_labels(prob, threshold).astype(bool)
    dead = np.asarray(label).astype(bool)
    weight = np.asarray(weight, dtype=np.float64)
    return ConfusionSummary(
        threshold=threshold,
        predicted_deaths=int(pred.sum()),
        true_deaths_predicted=int((pred & dead).sum()),
        actual_deaths=int(dead.sum()),
        weighted_predicted_deaths=float(weight[pred].sum()),
        weighted_true_deaths_predicted=float(weight[pred & dead].sum()),
        weighted_actual_deaths=float(weight[dead].sum()),
    )
