"""Regressions linking fitted slowness to course outcomes and engagement.

Course heterogeneity is absorbed by one intercept per course (fixed effects)
instead of a random course effect. p-values use the normal approximation.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import expit
from scipy.stats import norm

FIXED_EFFECTS_TAG = "[course fixed effects]"
ENGAGEMENT = ("videos", "play_clicks", "posts")
SLOWNESS_PREDICTORS = ("education", "age", "videos", "play_clicks", "posts")
SEPARATION_LIMIT = 30.0


class RankDeficiencyError(ValueError):
    pass


class SeparationError(RuntimeError):
    pass


@dataclass(frozen=True)
class LearnerRecord:
    course_id: str
    user_id: str
    zeta1: float | None
    zeta2: float | None = None
    correctness: float = 0.0
    education: float = 0.0
    age: float = 0.0
    videos: float = 0.0
    play_clicks: float = 0.0
    posts: float = 0.0
    grade: float = 0.0
    completed: bool = False
    certified: bool = False

    def __post_init__(self):
        if not 0.0 <= self.grade <= 1.0:
            raise ValueError(f"grade {self.grade} outside [0, 1] for {self.user_id}")

    def validate_raw(self) -> None:
        """Check the education coding (0 none ... 7 doctorate) of unscaled input."""
        if self.education not in range(8):
            raise ValueError(f"education {self.education} for {self.user_id} is not a 0-7 code")


@dataclass(frozen=True)
class PredictorStat:
    name: str
    coef: float
    se: float
    stat: float
    p: float
    sd_pooled: float
    sd_within: float


@dataclass
class RegressionResult:
    label: str
    family: str
    n: int
    predictors: list[PredictorStat]
    course_intercepts: dict[str, float] = field(default_factory=dict)
    converged: bool = True
    log_likelihood: float | None = None
    ll_trace: list[float] = field(default_factory=list)

    def __getitem__(self, name: str) -> PredictorStat:
        for p in self.predictors:
            if p.name == name:
                return p
        raise KeyError(name)


def odds_factor(coefficient: float) -> float:
    """Multiplicative change in the odds per unit of the predictor."""
    return math.exp(coefficient)


def _value(record: LearnerRecord, name: str) -> float:
    v = getattr(record, name)
    if v is None:
        return math.nan
    return float(v)


def standardize_per_course(
    records: Sequence[LearnerRecord], variables: Iterable[str], mode: str = "unit_variance"
) -> tuple[list[LearnerRecord], dict[str, list[str]]]:
    """Rescale variables within each course to unit mean or unit (population) variance.

    A course where a variable has zero mean (or zero variance) cannot be
    rescaled; its values become NaN and the course is listed in the returned
    ``flagged`` map, so downstream regressions drop those rows.
    """
    if mode not in ("unit_mean", "unit_variance"):
        raise ValueError(f"unknown mode {mode!r}")
    variables = list(variables)
    by_course: dict[str, list[int]] = {}
    for i, r in enumerate(records):
        by_course.setdefault(r.course_id, []).append(i)
    updates: list[dict] = [{} for _ in records]
    flagged: dict[str, list[str]] = {}
    for var in variables:
        for course, idx in sorted(by_course.items()):
            vals = np.array([_value(records[i], var) for i in idx])
            ok = ~np.isnan(vals)
            if mode == "unit_mean":
                scale = vals[ok].mean() if ok.any() else 0.0
            else:
                scale = vals[ok].std() if ok.any() else 0.0
            if scale == 0:
                flagged.setdefault(var, []).append(course)
                for i in idx:
                    updates[i][var] = math.nan
                continue
            for i, v in zip(idx, vals):
                updates[i][var] = v / scale if not math.isnan(v) else v
    return [replace(r, **u) for r, u in zip(records, updates)], flagged


def _design(records, outcome: str, predictors: Sequence[str]):
    rows = []
    for r in records:
        vals = [_value(r, outcome)] + [_value(r, p) for p in predictors]
        if not any(math.isnan(v) for v in vals):
            rows.append((r.course_id, vals))
    if not rows:
        raise ValueError("no complete records for this model")
    courses = sorted({c for c, _ in rows})
    cpos = {c: j for j, c in enumerate(courses)}
    data = np.array([v for _, v in rows], dtype=float)
    y = data[:, 0]
    x_pred = data[:, 1:]
    dummies = np.zeros((len(rows), len(courses)))
    dummies[np.arange(len(rows)), [cpos[c] for c, _ in rows]] = 1.0
    names = list(predictors) + [f"course[{c}]" for c in courses]
    x = np.hstack([x_pred, dummies])
    course_of = np.array([cpos[c] for c, _ in rows])
    return y, x, names, courses, course_of


def _check_rank(x: np.ndarray, names: list[str]) -> None:
    n, p = x.shape
    if n <= p:
        raise RankDeficiencyError(f"{n} records cannot identify {p} coefficients")
    if np.linalg.matrix_rank(x) == p:
        return
    collinear, kept = [], []
    for j in range(p):
        trial = x[:, kept + [j]]
        if np.linalg.matrix_rank(trial) == len(kept) + 1:
            kept.append(j)
        else:
            collinear.append(names[j])
    raise RankDeficiencyError(f"design matrix is rank deficient; collinear columns: {collinear}")


def _spreads(x_pred: np.ndarray, course_of: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pooled = x_pred.std(axis=0, ddof=1) if x_pred.shape[0] > 1 else np.zeros(x_pred.shape[1])
    centered = x_pred.copy()
    for c in np.unique(course_of):
        sel = course_of == c
        centered[sel] -= x_pred[sel].mean(axis=0)
    dof = max(x_pred.shape[0] - np.unique(course_of).size, 1)
    within = np.sqrt((centered**2).sum(axis=0) / dof)
    return pooled, within


def _p_value(coef: float, se: float) -> tuple[float, float]:
    if se > 0:
        z = coef / se
    else:
        z = math.copysign(math.inf, coef) if coef != 0 else 0.0
    return z, float(min(1.0, 2.0 * norm.sf(abs(z))))


def _result(label, family, y, x, names, courses, course_of, coef, se, k, **extra) -> RegressionResult:
    pooled, within = _spreads(x[:, :k], course_of)
    stats = []
    for j in range(k):
        z, p = _p_value(float(coef[j]), float(se[j]))
        stats.append(PredictorStat(names[j], float(coef[j]), float(se[j]), z, p, float(pooled[j]), float(within[j])))
    intercepts = {c: float(coef[k + i]) for i, c in enumerate(courses)}
    return RegressionResult(f"{label} {FIXED_EFFECTS_TAG}", family, int(y.size), stats, intercepts, **extra)


def ols_fixed_effects(
    records: Sequence[LearnerRecord], outcome: str, predictors: Sequence[str], label: str = "OLS"
) -> RegressionResult:
    """Least squares with one intercept per course and classical standard errors."""
    y, x, names, courses, course_of = _design(records, outcome, predictors)
    _check_rank(x, names)
    coef, *_ = np.linalg.lstsq(x, y, rcond=None)
    resid = y - x @ coef
    n, p = x.shape
    sigma2 = float(resid @ resid) / (n - p)
    cov = sigma2 * np.linalg.inv(x.T @ x)
    se = np.sqrt(np.clip(np.diag(cov), 0.0, None))
    return _result(label, "gaussian", y, x, names, courses, course_of, coef, se, len(predictors))


def _log_likelihood(y, eta) -> float:
    # log(1 + e^eta) computed without overflow
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def logistic_fixed_effects(
    records: Sequence[LearnerRecord],
    outcome: str,
    predictors: Sequence[str],
    label: str = "Logit",
    tol: float = 1e-8,
    max_iter: int = 100,
) -> RegressionResult:
    """Logistic regression by IRLS with per-course intercepts and Wald errors.

    Each Newton step is halved until the log-likelihood does not decrease.
    Any coefficient beyond +-30 is taken as a sign of separation.
    """
    y, x, names, courses, course_of = _design(records, outcome, predictors)
    if np.all(y == y[0]):
        raise ValueError(f"outcome {outcome!r} is constant")
    _check_rank(x, names)
    coef = np.zeros(x.shape[1])
    ll = _log_likelihood(y, x @ coef)
    trace = [ll]
    converged = False
    for _ in range(max_iter):
        mu = expit(x @ coef)
        w = mu * (1 - mu)
        info = x.T @ (x * w[:, None])
        step = np.linalg.solve(info, x.T @ (y - mu))
        t = 1.0
        trial = coef + step
        ll_new = _log_likelihood(y, x @ trial)
        while ll_new < ll and t > 1e-10:
            t *= 0.5
            trial = coef + t * step
            ll_new = _log_likelihood(y, x @ trial)
        if ll_new < ll:
            # no ascent left along the Newton direction: at the optimum
            converged = True
            break
        if np.max(np.abs(trial)) > SEPARATION_LIMIT:
            raise SeparationError(f"separation_suspected in {label}: coefficient beyond {SEPARATION_LIMIT}")
        change = np.max(np.abs(trial - coef))
        coef, ll = trial, ll_new
        trace.append(ll)
        if change < tol:
            converged = True
            break
    mu = expit(x @ coef)
    info = x.T @ (x * (mu * (1 - mu))[:, None])
    se = np.sqrt(np.clip(np.diag(np.linalg.inv(info)), 0.0, None))
    return _result(
        label, "binomial", y, x, names, courses, course_of, coef, se, len(predictors),
        converged=converged, log_likelihood=ll, ll_trace=trace,
    )


def outcome_models(records: Sequence[LearnerRecord]) -> list[RegressionResult]:
    """Completion, certification and grade on slowness, correctness and education."""
    base = ["zeta1", "correctness", "education"]
    with_second = ["zeta1", "zeta2", "correctness", "education"]
    second = [r for r in records if r.zeta2 is not None and not math.isnan(r.zeta2)]
    out = []
    for suffix, rows, preds in (("1", records, base), ("2", second, with_second)):
        if not rows:
            continue
        out.append(logistic_fixed_effects(rows, "completed", preds, f"Completion {suffix}"))
        out.append(logistic_fixed_effects(rows, "certified", preds, f"Certification {suffix}"))
        out.append(ols_fixed_effects(rows, "grade", preds, f"Grade {suffix}"))
    return out


def prepare_slowness_records(records: Sequence[LearnerRecord]) -> list[LearnerRecord]:
    """Engagement counts to unit mean, then every model variable to unit variance, per course."""
    records, _ = standardize_per_course(records, ENGAGEMENT, "unit_mean")
    records, _ = standardize_per_course(records, SLOWNESS_PREDICTORS + ("zeta1", "zeta2"), "unit_variance")
    return records


def slowness_models(records: Sequence[LearnerRecord]) -> list[RegressionResult]:
    """Slowness on education, age and engagement; expects prepared records."""
    out = [ols_fixed_effects(records, "zeta1", SLOWNESS_PREDICTORS, "Slowness 1")]
    second = [r for r in records if r.zeta2 is not None and not math.isnan(r.zeta2)]
    if second:
        out.append(ols_fixed_effects(second, "zeta2", SLOWNESS_PREDICTORS, "Slowness 2"))
    return out


LEARNER_COLUMNS = [
    "course_id", "user_id", "zeta1", "zeta2", "correctness", "education", "age",
    "videos", "play_clicks", "posts", "grade", "completed", "certified",
]


def _opt_float(text: str) -> float | None:
    text = text.strip()
    return float(text) if text else None


def _bool(text: str) -> bool:
    return text.strip().lower() in ("1", "true", "yes")


def read_learners(path) -> list[LearnerRecord]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(LEARNER_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing columns {sorted(missing)}")
        records = [
            LearnerRecord(
                course_id=row["course_id"],
                user_id=row["user_id"],
                zeta1=_opt_float(row["zeta1"]),
                zeta2=_opt_float(row["zeta2"]),
                correctness=float(row["correctness"]),
                education=float(row["education"]),
                age=float(row["age"]),
                videos=float(row["videos"]),
                play_clicks=float(row["play_clicks"]),
                posts=float(row["posts"]),
                grade=float(row["grade"]),
                completed=_bool(row["completed"]),
                certified=_bool(row["certified"]),
            )
            for row in reader
        ]
    for r in records:
        r.validate_raw()
    return records


def write_results(results: Iterable[RegressionResult], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["model", "predictor", "st_dev", "st_dev_within_course", "coef", "se", "p", "n"])
        for res in results:
            for s in res.predictors:
                writer.writerow([res.label, s.name, repr(s.sd_pooled), repr(s.sd_within), repr(s.coef), repr(s.se), repr(s.p), res.n])
