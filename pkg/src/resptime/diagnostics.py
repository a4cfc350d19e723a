"""Goodness-of-fit statistics and cross-fit comparisons."""

from __future__ import annotations

import math
from dataclasses import astuple, dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.special import ndtr

from .matrix import ResponseMatrix
from .model import ModelParams

# raw moments of the standard normal, k = 1..4
NORMAL_MOMENTS = (0.0, 1.0, 0.0, 3.0)


@dataclass(frozen=True)
class MomentSet:
    m1: float
    m2: float
    m3: float
    m4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)


@dataclass(frozen=True)
class DeviationSet:
    d1: float
    d2: float
    d3: float
    d4: float

    def as_tuple(self) -> tuple[float, float, float, float]:
        return astuple(self)


def raw_moments(x: Iterable[float]) -> MomentSet:
    """Mean of ``x**k`` for k = 1..4, taken about zero rather than the sample mean."""
    x = np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=float)
    if x.size == 0:
        raise ValueError("raw_moments needs at least one value")
    x2 = x * x
    return MomentSet(float(x.mean()), float(x2.mean()), float((x2 * x).mean()), float((x2 * x2).mean()))


def moment_deviations(m: MomentSet) -> DeviationSet:
    """k-th roots of the moments minus the same roots of (0, 1, 0, 3).

    The odd moment uses a signed cube root so negative skew stays negative.
    """
    if m.m4 < 0 or m.m2 < 0:
        raise ValueError("even moments cannot be negative")
    return DeviationSet(
        d1=m.m1,
        d2=math.sqrt(m.m2) - 1.0,
        d3=float(np.cbrt(m.m3)),
        d4=m.m4**0.25 - 3.0**0.25,
    )


def per_question_deviations(groups: Mapping[str, Sequence[float]]) -> dict[str, DeviationSet]:
    return {q: moment_deviations(raw_moments(x)) for q, x in groups.items()}


def residuals_by_question(residuals: np.ndarray, matrix: ResponseMatrix) -> dict[str, np.ndarray]:
    order = np.argsort(matrix.cols, kind="stable")
    cols = matrix.cols[order]
    splits = np.flatnonzero(np.diff(cols)) + 1
    out = {}
    for chunk_idx, chunk in zip(np.split(order, splits), np.split(cols, splits)):
        if chunk.size:
            out[matrix.question_ids[chunk[0]]] = residuals[chunk_idx]
    return out


def percentile_curve(values: Iterable[float]) -> list[tuple[float, float]]:
    """Empirical CDF points ``(value, fraction <= value)`` over sorted values."""
    v = np.sort(np.asarray(list(values), dtype=float))
    n = v.size
    return [(float(x), (i + 1) / n) for i, x in enumerate(v)]


def deviation_curves(devs: Mapping[str, DeviationSet]) -> dict[str, list[tuple[float, float]]]:
    """Per-k percentile curves across questions; an ideal fit gives unit steps at 0."""
    return {
        f"d{k}": percentile_curve(getattr(d, f"d{k}") for d in devs.values()) for k in range(1, 5)
    }


def ecdf_vs_normal(x: Iterable[float]) -> list[tuple[float, float]]:
    """Pairs ``(Phi(x_(i)), i/n)``; a perfect fit lies on the identity line."""
    x = np.sort(np.asarray(list(x) if not isinstance(x, np.ndarray) else x, dtype=float))
    if x.size == 0:
        raise ValueError("ecdf_vs_normal needs at least one value")
    n = x.size
    phi = ndtr(x)
    ranks = np.arange(1, n + 1) / n
    return list(zip(phi.tolist(), ranks.tolist()))


@dataclass(frozen=True)
class DatasetStats:
    n_users: int
    n_questions: int
    missingness: float
    ratio: float


def parameter_ratio(n_users: int, n_questions: int, missingness: float) -> float:
    """Free parameters per observation, ``(2 N_q + N_u - 1) / (N_u N_q (1 - m))``."""
    if missingness >= 1:
        raise ValueError("no observations (missingness = 1)")
    return (2 * n_questions + n_users - 1) / (n_users * n_questions * (1 - missingness))


def dataset_stats(matrix: ResponseMatrix) -> DatasetStats:
    if matrix.n_users == 0 or matrix.n_questions == 0:
        raise ValueError("empty matrix")
    m = 1.0 - matrix.n_obs / (matrix.n_users * matrix.n_questions)
    return DatasetStats(matrix.n_users, matrix.n_questions, m, parameter_ratio(matrix.n_users, matrix.n_questions, m))


def pearson_with_se(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Sample Pearson r and its large-sample standard error sqrt((1-r^2)/(n-2))."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("sequences differ in length")
    n = a.size
    if n < 3:
        raise ValueError("need at least 3 pairs")
    da = a - a.mean()
    db = b - b.mean()
    saa, sbb = float(da @ da), float(db @ db)
    if saa == 0 or sbb == 0:
        raise ValueError("zero variance")
    r = float(da @ db) / math.sqrt(saa * sbb)
    r = max(-1.0, min(1.0, r))
    return r, math.sqrt(max(0.0, 1.0 - r * r) / (n - 2))


@dataclass
class Correlation:
    parameter: str
    n: int
    r: float | None = None
    se: float | None = None
    status: str = "ok"
    pairs: list[tuple[str, float, float]] | None = None


def _correlate(name: str, a: Mapping[str, float], b: Mapping[str, float]) -> Correlation:
    shared = sorted(set(a) & set(b))
    pairs = [(k, a[k], b[k]) for k in shared]
    if len(shared) < 3:
        return Correlation(name, len(shared), status="insufficient_overlap", pairs=pairs)
    try:
        r, se = pearson_with_se([p[1] for p in pairs], [p[2] for p in pairs])
    except ValueError:
        return Correlation(name, len(shared), status="zero_variance", pairs=pairs)
    return Correlation(name, len(shared), r, se, pairs=pairs)


def compare_fits(params_a: ModelParams, params_b: ModelParams) -> dict[str, Correlation]:
    """Correlate zeta, beta and alpha between two fits over their shared ids."""
    return {
        "zeta": _correlate("zeta", params_a.zeta_map(), params_b.zeta_map()),
        "beta": _correlate("beta", params_a.beta_map(), params_b.beta_map()),
        "alpha": _correlate("alpha", params_a.alpha_map(), params_b.alpha_map()),
    }


def describe_question(alpha: float, beta: float) -> tuple[float, float]:
    """Typical time ``exp(beta)`` seconds and spread factor ``exp(1/alpha)``.

    Most response times fall between typical / spread and typical * spread.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    return math.exp(beta), math.exp(1.0 / alpha)


def intensity_discrimination_relation(params: ModelParams) -> tuple[float, list[tuple[float, float]]]:
    """Pearson r between beta_q and 1/alpha_q, plus the ``(1/alpha, beta)`` pairs."""
    if len(params.question_ids) < 3:
        raise ValueError("need at least 3 questions")
    inv = 1.0 / params.alpha
    r, _ = pearson_with_se(params.beta, inv)
    return r, list(zip(inv.tolist(), params.beta.tolist()))
