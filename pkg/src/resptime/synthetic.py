"""Synthetic data with known parameters for recovery tests."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import NamedTuple

import numpy as np

from .diagnostics import pearson_with_se
from .events import EventKind, EventLog, RawEvent, sort_and_validate
from .cohort import CourseStructure
from .matrix import ResponseMatrix
from .model import ModelParams, normalize_identifiability


@dataclass(frozen=True)
class SynthSpec:
    n_users: int = 500
    n_questions: int = 60
    missingness: float = 0.25
    zeta_sd: float = 1.16
    beta_mean: float = 5.1
    beta_sd: float = 1.0
    alpha_log_mean: float = math.log(0.511)
    alpha_log_sd: float = 0.3
    seed: int = 0
    # times are rounded to this many seconds so event timestamps add up exactly;
    # 0 keeps the raw continuous draws
    clock_resolution: float = 2.0**-10
    course_id: str = "synthetic"
    max_mask_retries: int = 100

    def __post_init__(self):
        if self.n_users < 1 or self.n_questions < 1:
            raise ValueError("need at least one user and one question")
        if not 0 <= self.missingness < 1:
            raise ValueError("missingness must lie in [0, 1)")
        if min(self.zeta_sd, self.beta_sd, self.alpha_log_sd) < 0:
            raise ValueError("standard deviations must be non-negative")
        if self.clock_resolution < 0:
            raise ValueError("clock_resolution must be non-negative")

    def to_json(self) -> dict:
        return asdict(self)


class SynthTruth(NamedTuple):
    params: ModelParams
    matrix: ResponseMatrix
    spec: SynthSpec
    # response times in seconds, aligned with the matrix entries
    times: np.ndarray


def _ids(prefix: str, n: int) -> tuple[str, ...]:
    width = len(str(n - 1))
    return tuple(f"{prefix}{i:0{width}d}" for i in range(n))


def generate(spec: SynthSpec) -> SynthTruth:
    """Draw parameters, a missing-at-random mask and log times.

    ``ln t = beta_q + zeta_u + z / alpha_q`` with ``z`` standard normal. Zeta
    is recentred to an exact zero mean. The mask is redrawn (up to
    ``max_mask_retries`` times) until every user and question has at least
    one observation.
    """
    # independent child streams keep each block reproducible on its own
    children = np.random.SeedSequence(spec.seed).spawn(5)
    r_zeta, r_beta, r_alpha, r_mask, r_noise = (np.random.default_rng(s) for s in children)
    zeta = r_zeta.normal(0.0, spec.zeta_sd, spec.n_users)
    zeta = zeta - zeta.mean()
    beta = r_beta.normal(spec.beta_mean, spec.beta_sd, spec.n_questions)
    alpha = np.exp(r_alpha.normal(spec.alpha_log_mean, spec.alpha_log_sd, spec.n_questions))

    for _ in range(spec.max_mask_retries):
        observed = r_mask.random((spec.n_users, spec.n_questions)) >= spec.missingness
        if observed.any(axis=0).all() and observed.any(axis=1).all():
            break
    else:
        raise ValueError("could not draw a mask leaving every row and column observed")

    rows, cols = np.nonzero(observed)
    z = r_noise.standard_normal(rows.size)
    t = np.exp(beta[cols] + zeta[rows] + z / alpha[cols])
    if spec.clock_resolution > 0:
        res = spec.clock_resolution
        t = np.maximum(np.round(t / res), 1.0) * res
    log_t = np.log(t)

    users = _ids("u", spec.n_users)
    questions = _ids("q", spec.n_questions)
    params = ModelParams(questions, users, alpha, beta, zeta)
    matrix = ResponseMatrix(users, questions, rows, cols, log_t, tallies={"source": "synthetic"})
    return SynthTruth(params, matrix, spec, t)


def page_layout(question_ids, questions_per_page: int) -> list[tuple[str, ...]]:
    if questions_per_page < 1:
        raise ValueError("questions_per_page must be positive")
    q = list(question_ids)
    return [tuple(q[i : i + questions_per_page]) for i in range(0, len(q), questions_per_page)]


def course_structure(truth: SynthTruth, questions_per_page: int) -> CourseStructure:
    """One chapter per page, matching :func:`emit_event_log`'s layout."""
    pages = page_layout(truth.matrix.question_ids, questions_per_page)
    page_ids = _ids("p", len(pages))
    chapters = tuple(f"ch{p[1:]}" for p in page_ids)
    return CourseStructure(
        truth.spec.course_id,
        chapters,
        dict(zip(page_ids, chapters)),
        {q: pid for pid, qs in zip(page_ids, pages) for q in qs},
    )


def emit_event_log(
    truth: SynthTruth, questions_per_page: int = 1, start_time: float = 1.5e9, gap: float = 60.0
) -> EventLog:
    """Page loads and first-attempt submits that reproduce every sampled time.

    Each user loads every page in order. Within a page the observed questions
    are submitted in column order, each ``t`` seconds after the previous
    click, so the chain rule recovers ``t`` exactly. All submits are correct.
    """
    m = truth.matrix
    times = truth.times
    pages = page_layout(m.question_ids, questions_per_page)
    page_ids = _ids("p", len(pages))
    qpos = {q: j for j, q in enumerate(m.question_ids)}
    course = truth.spec.course_id

    cell_time: dict[tuple[int, int], float] = {
        (int(r), int(c)): float(t) for r, c, t in zip(m.rows, m.cols, times)
    }
    events = []
    for u, user in enumerate(m.user_ids):
        clock = start_time
        for page_id, qs in zip(page_ids, pages):
            events.append(RawEvent(EventKind.PAGE_LOAD, course, user, page_id, clock))
            for q in qs:
                t = cell_time.get((u, qpos[q]))
                if t is None:
                    continue
                submit_at = clock + t
                if submit_at - clock != t:
                    raise ValueError(
                        f"time {t!r} for ({user}, {q}) is not exactly representable after {clock!r}; "
                        "use a coarser clock_resolution"
                    )
                clock = submit_at
                events.append(RawEvent(EventKind.SUBMIT, course, user, page_id, clock, q, 1.0))
            clock += gap
    return sort_and_validate(events)


@dataclass
class ParamRecovery:
    r: float
    se: float
    rmse: float


def recovery_report(truth: SynthTruth | ModelParams, fitted: ModelParams) -> dict[str, ParamRecovery]:
    """Pearson r and RMSE per parameter family after normalising both sides."""
    true_params = truth.params if isinstance(truth, SynthTruth) else truth
    if set(true_params.question_ids) != set(fitted.question_ids) or set(true_params.user_ids) != set(fitted.user_ids):
        raise ValueError("fitted parameters do not cover the same ids as the truth")
    a = normalize_identifiability(true_params)
    b = normalize_identifiability(fitted)
    out = {}
    for name, amap, bmap in (
        ("zeta", a.zeta_map(), b.zeta_map()),
        ("beta", a.beta_map(), b.beta_map()),
        ("alpha", a.alpha_map(), b.alpha_map()),
    ):
        keys = sorted(amap)
        x = np.array([amap[k] for k in keys])
        y = np.array([bmap[k] for k in keys])
        rmse = float(np.sqrt(np.mean((x - y) ** 2)))
        if np.array_equal(x, y):
            out[name] = ParamRecovery(1.0, 0.0, 0.0)
            continue
        r, se = pearson_with_se(x, y)
        out[name] = ParamRecovery(r, se, rmse)
    return out
