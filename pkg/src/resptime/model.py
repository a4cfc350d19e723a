"""Log-normal response-time model: likelihood, gradient and fitting.

The log response time of user ``u`` on question ``q`` is modelled as

    ln t_qu ~ Normal(beta_q + zeta_u, 1 / alpha_q**2)

and parameters are estimated by minimising the negative log-likelihood

    sum over observed (q, u) of  alpha_q**2 / 2 * (beta_q + zeta_u - ln t_qu)**2 - ln alpha_q

(the constant ``ln sqrt(2 pi)`` per observation is dropped). The model is
invariant under ``beta += c, zeta -= c``; fitted parameters are normalised so
that the user slownesses average to zero.
"""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
from scipy import sparse

from .matrix import ResponseMatrix

log = logging.getLogger(__name__)


class UnfittableError(ValueError):
    """The matrix holds no observations."""


class ConsistencyError(KeyError):
    """Parameters do not cover every row or column of a matrix."""


class FitError(FloatingPointError):
    """The objective became non-finite during fitting."""


@dataclass(frozen=True, eq=False)
class ModelParams:
    question_ids: tuple[str, ...]
    user_ids: tuple[str, ...]
    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "question_ids", tuple(self.question_ids))
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        for name in ("alpha", "beta", "zeta"):
            object.__setattr__(self, name, np.array(getattr(self, name), dtype=float))
        if not (self.alpha.shape == self.beta.shape == (len(self.question_ids),)):
            raise ValueError("alpha/beta must have one entry per question")
        if self.zeta.shape != (len(self.user_ids),):
            raise ValueError("zeta must have one entry per user")

    def alpha_map(self) -> dict[str, float]:
        return dict(zip(self.question_ids, self.alpha.tolist()))

    def beta_map(self) -> dict[str, float]:
        return dict(zip(self.question_ids, self.beta.tolist()))

    def zeta_map(self) -> dict[str, float]:
        return dict(zip(self.user_ids, self.zeta.tolist()))

    def replace(self, **changes) -> "ModelParams":
        fields = dict(
            question_ids=self.question_ids,
            user_ids=self.user_ids,
            alpha=self.alpha,
            beta=self.beta,
            zeta=self.zeta,
        )
        fields.update(changes)
        return ModelParams(**fields)

    @classmethod
    def from_maps(cls, alpha: dict, beta: dict, zeta: dict) -> "ModelParams":
        if set(alpha) != set(beta):
            raise ValueError("alpha and beta must cover the same questions")
        qids = tuple(sorted(alpha))
        uids = tuple(sorted(zeta))
        return cls(
            qids,
            uids,
            [alpha[q] for q in qids],
            [beta[q] for q in qids],
            [zeta[u] for u in uids],
        )


@dataclass(frozen=True)
class FitConfig:
    rel_tol: float = 1e-9
    max_iter: int = 10_000
    alpha_cap: float = 1e3
    alpha_floor: float = 1e-6
    init: str = "column_means"
    method: str = "bcd"
    newton: bool = True

    def __post_init__(self):
        if not 0 < self.alpha_floor < self.alpha_cap:
            raise ValueError("need 0 < alpha_floor < alpha_cap")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be at least 1")
        if self.init not in ("column_means", "zeros"):
            raise ValueError(f"unknown init {self.init!r}")
        if self.method not in ("bcd", "cg"):
            raise ValueError(f"unknown method {self.method!r}")


@dataclass
class FitReport:
    iterations: int
    nll_trace: list[float]
    converged: bool
    final_gradient_norm: float
    wall_time: float
    method: str = "bcd"
    degenerate_questions: list[str] = field(default_factory=list)

    @property
    def final_nll(self) -> float:
        return self.nll_trace[-1]

    def to_json(self) -> dict:
        # wall_time is deliberately left out so report files are reproducible
        return {
            "iterations": self.iterations,
            "final_nll": self.final_nll,
            "nll_trace": list(self.nll_trace),
            "converged": self.converged,
            "gradient_norm": self.final_gradient_norm,
            "method": self.method,
            "degenerate_questions": list(self.degenerate_questions),
        }


class Gradient(NamedTuple):
    alpha: np.ndarray
    beta: np.ndarray
    zeta: np.ndarray

    def norm(self) -> float:
        return float(np.sqrt(sum(np.dot(g, g) for g in self)))


# -- array kernels ---------------------------------------------------------
# All kernels take parameter arrays already aligned with the matrix columns
# (alpha, beta) and rows (zeta).


def _residuals(beta, zeta, m: ResponseMatrix) -> np.ndarray:
    return beta[m.cols] + zeta[m.rows] - m.log_times


def _nll_arrays(alpha, beta, zeta, m: ResponseMatrix) -> float:
    r = _residuals(beta, zeta, m)
    a = alpha[m.cols]
    return float(np.sum(0.5 * a * a * r * r - np.log(a)))


def _grad_arrays(alpha, beta, zeta, m: ResponseMatrix) -> Gradient:
    r = _residuals(beta, zeta, m)
    w = (alpha * alpha)[m.cols]
    n_q = np.bincount(m.cols, minlength=alpha.size)
    sq = np.bincount(m.cols, weights=r * r, minlength=alpha.size)
    d_alpha = np.zeros_like(alpha)
    seen = n_q > 0
    d_alpha[seen] = alpha[seen] * sq[seen] - n_q[seen] / alpha[seen]
    d_beta = np.bincount(m.cols, weights=w * r, minlength=beta.size)
    d_zeta = np.bincount(m.rows, weights=w * r, minlength=zeta.size)
    return Gradient(d_alpha, d_beta, d_zeta)


def _alpha_step(beta, zeta, m: ResponseMatrix, floor: float, cap: float):
    r = _residuals(beta, zeta, m)
    n_q = np.bincount(m.cols, minlength=m.n_questions).astype(float)
    sq = np.bincount(m.cols, weights=r * r, minlength=m.n_questions)
    with np.errstate(divide="ignore"):
        raw = np.sqrt(n_q / sq)
    degenerate = ~(raw < cap)
    return np.clip(raw, floor, cap), degenerate


def _beta_step(zeta, m: ResponseMatrix) -> np.ndarray:
    n_q = np.bincount(m.cols, minlength=m.n_questions)
    s = np.bincount(m.cols, weights=m.log_times - zeta[m.rows], minlength=m.n_questions)
    return s / n_q


def _zeta_step(alpha, beta, m: ResponseMatrix) -> np.ndarray:
    w = (alpha * alpha)[m.cols]
    num = np.bincount(m.rows, weights=w * (m.log_times - beta[m.cols]), minlength=m.n_users)
    den = np.bincount(m.rows, weights=w, minlength=m.n_users)
    return num / den


def _projected_norm(grad: Gradient, alpha, floor: float, cap: float) -> float:
    """Gradient norm with alpha components removed where a bound is active."""
    g_alpha = grad.alpha.copy()
    g_alpha[(alpha >= cap) & (g_alpha < 0)] = 0.0
    g_alpha[(alpha <= floor) & (g_alpha > 0)] = 0.0
    return Gradient(g_alpha, grad.beta, grad.zeta).norm()


def _shift(beta, zeta):
    c = zeta.mean() if zeta.size else 0.0
    zeta = zeta - c
    beta = beta + c
    # one correction pass removes the rounding left by the first subtraction
    c2 = zeta.mean() if zeta.size else 0.0
    return beta + c2, zeta - c2


def _align(params: ModelParams, m: ResponseMatrix):
    """Return params' (alpha, beta, zeta) reordered to the matrix's ids."""
    if params.question_ids == m.question_ids and params.user_ids == m.user_ids:
        return params.alpha, params.beta, params.zeta
    qpos = {q: i for i, q in enumerate(params.question_ids)}
    upos = {u: i for i, u in enumerate(params.user_ids)}
    missing_q = [q for q in m.question_ids if q not in qpos]
    missing_u = [u for u in m.user_ids if u not in upos]
    if missing_q or missing_u:
        raise ConsistencyError(
            f"no parameters for questions {missing_q[:5]} / users {missing_u[:5]}"
        )
    qi = np.array([qpos[q] for q in m.question_ids], dtype=np.intp)
    ui = np.array([upos[u] for u in m.user_ids], dtype=np.intp)
    return params.alpha[qi], params.beta[qi], params.zeta[ui]


# -- public operations -----------------------------------------------------


def nll(params: ModelParams, matrix: ResponseMatrix) -> float:
    """Negative log-likelihood of the observed entries (constant dropped)."""
    alpha, beta, zeta = _align(params, matrix)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    return _nll_arrays(alpha, beta, zeta, matrix)


def nll_gradient(params: ModelParams, matrix: ResponseMatrix) -> Gradient:
    """Analytic gradient of :func:`nll`, laid out like ``params``.

    Parameters with no observation in ``matrix`` get a zero derivative.
    """
    alpha, beta, zeta = _align(params, matrix)
    g = _grad_arrays(alpha, beta, zeta, matrix)
    qpos = {q: i for i, q in enumerate(params.question_ids)}
    upos = {u: i for i, u in enumerate(params.user_ids)}
    qi = np.array([qpos[q] for q in matrix.question_ids], dtype=np.intp)
    ui = np.array([upos[u] for u in matrix.user_ids], dtype=np.intp)
    out = Gradient(np.zeros_like(params.alpha), np.zeros_like(params.beta), np.zeros_like(params.zeta))
    out.alpha[qi] = g.alpha
    out.beta[qi] = g.beta
    out.zeta[ui] = g.zeta
    return out


def update_alpha_closed_form(
    matrix: ResponseMatrix, beta, zeta, alpha_floor: float = 1e-6, alpha_cap: float = 1e3
) -> tuple[np.ndarray, np.ndarray]:
    """Minimise the objective over every alpha_q with locations held fixed.

    ``beta``/``zeta`` are aligned with the matrix columns/rows. Returns the
    new alphas and a boolean mask of degenerate questions (residuals so
    small that the optimum reaches ``alpha_cap``).
    """
    if np.any(matrix.question_counts() == 0):
        raise ValueError("every question needs at least one observation")
    return _alpha_step(np.asarray(beta, float), np.asarray(zeta, float), matrix, alpha_floor, alpha_cap)


def update_location_params(matrix: ResponseMatrix, params: ModelParams):
    """One exact block sweep: beta given zeta, then zeta given the new beta."""
    alpha, beta, zeta = _align(params, matrix)
    if np.any(alpha <= 0):
        raise ValueError("alpha must be positive")
    if np.any(matrix.question_counts() == 0) or np.any(matrix.user_counts() == 0):
        raise ValueError("empty row or column; qualify the matrix first")
    beta = _beta_step(zeta, matrix)
    zeta = _zeta_step(alpha, beta, matrix)
    return beta, zeta


def normalize_identifiability(params: ModelParams) -> ModelParams:
    """Shift so that mean zeta is zero; beta_q + zeta_u is unchanged."""
    beta, zeta = _shift(params.beta, params.zeta)
    return params.replace(beta=beta, zeta=zeta)


def standardized_residuals(params: ModelParams, matrix: ResponseMatrix) -> np.ndarray:
    """``alpha_q (ln t_qu - beta_q - zeta_u)`` in the matrix's entry order."""
    alpha, beta, zeta = _align(params, matrix)
    return alpha[matrix.cols] * (matrix.log_times - beta[matrix.cols] - zeta[matrix.rows])


def predict_log_time(params: ModelParams, question_id: str, user_id: str) -> float:
    """Expected log response time, ``beta_q + zeta_u``."""
    try:
        q = params.question_ids.index(question_id)
        u = params.user_ids.index(user_id)
    except ValueError as exc:
        raise KeyError(f"unknown id: {exc}") from None
    return float(params.beta[q] + params.zeta[u])


def initial_params(matrix: ResponseMatrix, init: str = "column_means") -> ModelParams:
    if init == "column_means":
        beta = _beta_step(np.zeros(matrix.n_users), matrix)
    else:
        beta = np.zeros(matrix.n_questions)
    return ModelParams(
        matrix.question_ids,
        matrix.user_ids,
        np.ones(matrix.n_questions),
        beta,
        np.zeros(matrix.n_users),
    )


def fit(matrix: ResponseMatrix, cfg: FitConfig | None = None) -> tuple[ModelParams, FitReport]:
    """Maximum-likelihood fit of the model to one response matrix.

    The default method ("bcd") cycles through exact minimisations over beta,
    zeta and alpha; every cycle can only lower the objective. Method "cg" runs
    a hybrid Dai-Yuan nonlinear conjugate gradient on (ln alpha, beta, zeta)
    and serves as an independent cross-check.

    Non-convergence within ``cfg.max_iter`` is reported, not raised.
    """
    cfg = cfg or FitConfig()
    if not matrix.fittable:
        raise UnfittableError(f"subset {matrix.label} is unfittable (no observations)")
    if np.any(matrix.question_counts() == 0) or np.any(matrix.user_counts() == 0):
        raise UnfittableError("matrix has empty rows or columns")
    start = time.perf_counter()
    p0 = initial_params(matrix, cfg.init)
    runner = _run_bcd if cfg.method == "bcd" else _run_cg
    alpha, beta, zeta, trace, iterations, converged = runner(
        matrix, p0.alpha, p0.beta, p0.zeta, cfg
    )
    beta, zeta = _shift(beta, zeta)
    _, degenerate = _alpha_step(beta, zeta, matrix, cfg.alpha_floor, cfg.alpha_cap)
    grad = _grad_arrays(alpha, beta, zeta, matrix)
    params = ModelParams(matrix.question_ids, matrix.user_ids, alpha, beta, zeta)
    report = FitReport(
        iterations=iterations,
        nll_trace=trace,
        converged=converged,
        final_gradient_norm=_projected_norm(grad, alpha, cfg.alpha_floor, cfg.alpha_cap),
        wall_time=time.perf_counter() - start,
        method=cfg.method,
        degenerate_questions=[q for q, d in zip(matrix.question_ids, degenerate) if d],
    )
    if not converged:
        log.warning("fit of %s did not converge in %d iterations", matrix.label, iterations)
    return params, report


def _check_finite(value: float, iteration: int) -> None:
    if not np.isfinite(value):
        raise FitError(f"non-finite objective at iteration {iteration}")


def _small_change(prev: float, cur: float, rel_tol: float) -> bool:
    return abs(prev - cur) <= rel_tol * max(abs(prev), 1.0)


def _run_bcd(m, alpha, beta, zeta, cfg: FitConfig):
    prev = _nll_arrays(alpha, beta, zeta, m)
    _check_finite(prev, 0)
    trace = [prev]
    converged = False
    it = 0
    for it in range(1, cfg.max_iter + 1):
        new_beta = _beta_step(zeta, m)
        new_zeta = _zeta_step(alpha, new_beta, m)
        new_alpha, _ = _alpha_step(new_beta, new_zeta, m, cfg.alpha_floor, cfg.alpha_cap)
        new_beta, new_zeta = _shift(new_beta, new_zeta)
        cur = _nll_arrays(new_alpha, new_beta, new_zeta, m)
        _check_finite(cur, it)
        if cur > prev:
            # exact block minimisers cannot increase the objective; an
            # increase here is rounding noise at the optimum
            converged = True
            break
        alpha, beta, zeta = new_alpha, new_beta, new_zeta
        if cfg.newton:
            stepped = _newton_step(m, alpha, beta, zeta, cur, cfg)
            if stepped is not None:
                alpha, beta, zeta, cur = stepped
        trace.append(cur)
        if _small_change(prev, cur, cfg.rel_tol):
            converged = True
            break
        prev = cur
    return alpha, beta, zeta, trace, it, converged


def _newton_step(m, alpha, beta, zeta, f, cfg: FitConfig):
    """Safeguarded Newton step on all parameters, zeta eliminated by Schur complement.

    Alphas sitting on a bound are held fixed. Returns None unless the step
    strictly lowers the objective.
    """
    nq, nu = m.n_questions, m.n_users
    r = _residuals(beta, zeta, m)
    a = alpha[m.cols]
    w = a * a
    n_q = np.bincount(m.cols, minlength=nq).astype(float)
    sum_r = np.bincount(m.cols, weights=r, minlength=nq)
    sum_r2 = np.bincount(m.cols, weights=r * r, minlength=nq)
    g = _grad_arrays(alpha, beta, zeta, m)

    free = np.flatnonzero((alpha > cfg.alpha_floor) & (alpha < cfg.alpha_cap))
    k = free.size
    slot = np.full(nq, -1)
    slot[free] = np.arange(k)
    # reduced parameter vector: [alpha_free (k), beta (nq)]
    h_aa = np.zeros((k + nq, k + nq))
    idx_a = np.arange(k)
    idx_b = k + np.arange(nq)
    h_aa[idx_a, idx_a] = sum_r2[free] + n_q[free] / alpha[free] ** 2
    h_aa[idx_b, idx_b] = n_q * alpha**2
    h_aa[idx_a, k + free] = h_aa[k + free, idx_a] = 2.0 * alpha[free] * sum_r[free]

    d_zeta = np.bincount(m.rows, weights=w, minlength=nu)
    on_free = slot[m.cols] >= 0
    coupling = sparse.csr_matrix(
        (
            np.concatenate([2.0 * a[on_free] * r[on_free], w]),
            (
                np.concatenate([slot[m.cols][on_free], k + m.cols]),
                np.concatenate([m.rows[on_free], m.rows]),
            ),
        ),
        shape=(k + nq, nu),
    )
    scaled = coupling @ sparse.diags(1.0 / d_zeta)
    schur = h_aa - (scaled @ coupling.T).toarray()
    g_a = np.concatenate([g.alpha[free], g.beta])
    g_red = g_a - scaled @ g.zeta
    # shifting beta up and zeta down is a null direction; pin it
    v = np.zeros(k + nq)
    v[k:] = 1.0 / np.sqrt(nq)
    schur += np.mean(np.diag(schur)) * np.outer(v, v)
    try:
        step_a = -np.linalg.solve(schur, g_red)
    except np.linalg.LinAlgError:
        return None
    step_z = -(g.zeta + coupling.T @ step_a) / d_zeta
    slope = float(g_a @ step_a + g.zeta @ step_z)
    if not np.isfinite(slope) or slope >= 0:
        return None
    t = 1.0
    for _ in range(30):
        new_alpha = alpha.copy()
        new_alpha[free] = np.clip(alpha[free] + t * step_a[:k], cfg.alpha_floor, cfg.alpha_cap)
        new_beta, new_zeta = _shift(beta + t * step_a[k:], zeta + t * step_z)
        f_new = _nll_arrays(new_alpha, new_beta, new_zeta, m)
        if np.isfinite(f_new) and f_new < f:
            return new_alpha, new_beta, new_zeta, f_new
        t *= 0.5
    return None


def _run_cg(m, alpha, beta, zeta, cfg: FitConfig):
    """Hybrid Dai-Yuan conjugate gradient with a backtracking Armijo search."""
    nq, nu = m.n_questions, m.n_users
    lo, hi = np.log(cfg.alpha_floor), np.log(cfg.alpha_cap)

    def unpack(x):
        return np.exp(np.clip(x[:nq], lo, hi)), x[nq : 2 * nq], x[2 * nq :]

    def objective(x):
        a, b, z = unpack(x)
        return _nll_arrays(a, b, z, m)

    def gradient(x):
        a, b, z = unpack(x)
        g = _grad_arrays(a, b, z, m)
        # chain rule through alpha = exp(s); frozen outside the clamp range
        g_s = g.alpha * a
        g_s[(x[:nq] < lo) | (x[:nq] > hi)] = 0.0
        return np.concatenate([g_s, g.beta, g.zeta])

    x = np.concatenate([np.log(alpha), beta, zeta])
    f = objective(x)
    _check_finite(f, 0)
    g = gradient(x)
    d = -g
    trace = [f]
    converged = False
    it = 0
    step = 1.0
    for it in range(1, cfg.max_iter + 1):
        slope = float(g @ d)
        if slope >= 0:
            d = -g
            slope = -float(g @ g)
        if slope == 0:
            converged = True
            break
        t = min(1.0, 2.0 * step)
        while True:
            x_new = x + t * d
            f_new = objective(x_new)
            if np.isfinite(f_new) and f_new <= f + 1e-4 * t * slope:
                break
            t *= 0.5
            if t < 1e-20:
                break
        if t < 1e-20:
            converged = True
            break
        step = t
        _check_finite(f_new, it)
        g_new = gradient(x_new)
        y = g_new - g
        dy = float(d @ y)
        if dy > 0:
            beta_hs = float(g_new @ y) / dy
            beta_dy = float(g_new @ g_new) / dy
            coef = max(0.0, min(beta_hs, beta_dy))
        else:
            coef = 0.0
        d = -g_new + coef * d
        x, g, prev, f = x_new, g_new, f, f_new
        trace.append(f)
        if _small_change(prev, f, cfg.rel_tol):
            converged = True
            break
    a, b, z = unpack(x)
    return a, b, z, trace, it, converged


PARAMS_HEADER = ["kind", "id", "value"]


def write_params(params: ModelParams, path) -> None:
    """CSV rows ``kind,id,value`` with kind in alpha, beta, zeta."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(PARAMS_HEADER)
        for q, a in zip(params.question_ids, params.alpha):
            writer.writerow(["alpha", q, repr(float(a))])
        for q, b in zip(params.question_ids, params.beta):
            writer.writerow(["beta", q, repr(float(b))])
        for u, z in zip(params.user_ids, params.zeta):
            writer.writerow(["zeta", u, repr(float(z))])


def read_params(path) -> ModelParams:
    maps: dict[str, dict[str, float]] = {"alpha": {}, "beta": {}, "zeta": {}}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != PARAMS_HEADER:
            raise ValueError(f"{path}: expected header {','.join(PARAMS_HEADER)}")
        for kind, ident, value in reader:
            if kind not in maps:
                raise ValueError(f"{path}: unknown parameter kind {kind!r}")
            maps[kind][ident] = float(value)
    return ModelParams.from_maps(maps["alpha"], maps["beta"], maps["zeta"])
