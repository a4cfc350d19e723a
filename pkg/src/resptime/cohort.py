"""Qualification filters and per-subset response matrices."""

from __future__ import annotations

import csv
import json
import logging
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .events import EventKind, EventLog
from .extraction import ResponseObservation
from .matrix import ATTEMPTS, CORRECTNESS, ResponseMatrix

log = logging.getLogger(__name__)

MATRIX_HEADER = ["user_id", "question_id", "ln_time"]


class ConfigError(ValueError):
    """Invalid qualification settings or course structure."""


@dataclass(frozen=True)
class CourseStructure:
    course_id: str
    chapters: tuple[str, ...]
    page_chapter: Mapping[str, str]
    question_page: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "chapters", tuple(self.chapters))
        known = set(self.chapters)
        bad_pages = sorted(p for p, ch in self.page_chapter.items() if ch not in known)
        if bad_pages:
            raise ConfigError(f"pages mapped to unknown chapters: {bad_pages[:5]}")
        bad_questions = sorted(q for q, p in self.question_page.items() if p not in self.page_chapter)
        if bad_questions:
            raise ConfigError(f"questions mapped to unknown pages: {bad_questions[:5]}")

    @classmethod
    def from_json(cls, obj: dict) -> "CourseStructure":
        try:
            return cls(
                course_id=obj["course_id"],
                chapters=obj["chapters"],
                page_chapter=dict(obj["pages"]),
                question_page=dict(obj.get("questions", {})),
            )
        except KeyError as exc:
            raise ConfigError(f"course structure lacks field {exc}") from None

    def to_json(self) -> dict:
        return {
            "course_id": self.course_id,
            "chapters": list(self.chapters),
            "pages": dict(sorted(self.page_chapter.items())),
            "questions": dict(sorted(self.question_page.items())),
        }


def load_structure(path) -> CourseStructure:
    with open(path, encoding="utf-8") as fh:
        return CourseStructure.from_json(json.load(fh))


@dataclass(frozen=True)
class QualificationConfig:
    explored_fraction: float = 0.5
    max_attempts: int = 5
    min_users_per_question: int = 10
    min_questions_per_user: int = 10
    full_credit_threshold: float = 1.0

    def __post_init__(self):
        if not 0 < self.explored_fraction <= 1:
            raise ConfigError("explored_fraction must lie in (0, 1]")
        for name in ("max_attempts", "min_users_per_question", "min_questions_per_user"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.full_credit_threshold <= 0:
            raise ConfigError("full_credit_threshold must be positive")

    def to_json(self) -> dict:
        return asdict(self)


def is_correct(obs: ResponseObservation, cfg: QualificationConfig) -> bool:
    if obs.score_fraction is not None:
        return obs.score_fraction >= cfg.full_credit_threshold
    return obs.correct


def filter_explored(
    log: EventLog,
    structure: CourseStructure,
    cfg: QualificationConfig,
    tally: Counter | None = None,
) -> set[str]:
    """Users whose page loads reach at least the required share of chapters."""
    if not structure.chapters:
        raise ConfigError("course structure has no chapters")
    tally = tally if tally is not None else Counter()
    # round() guards against 0.7 * 10 evaluating to 7.000000000000001
    needed = math.ceil(round(cfg.explored_fraction * len(structure.chapters), 9))
    visited: dict[str, set[str]] = {}
    for ev in log.events:
        if ev.kind is not EventKind.PAGE_LOAD:
            continue
        chapter = structure.page_chapter.get(ev.page_id)
        if chapter is None:
            tally["unmapped_page_load"] += 1
            continue
        visited.setdefault(ev.user_id, set()).add(chapter)
    return {u for u, chapters in visited.items() if len(chapters) >= needed}


def restrict_users(observations: Iterable[ResponseObservation], users: set[str]) -> list[ResponseObservation]:
    return [o for o in observations if o.user_id in users]


def apply_attempt_cap(
    observations: Iterable[ResponseObservation],
    attempt_counts: Mapping[tuple[str, str], int],
    cfg: QualificationConfig,
    tally: Counter | None = None,
) -> list[ResponseObservation]:
    """Drop every observation of a (user, question) pair with too many submits."""
    tally = tally if tally is not None else Counter()
    kept = []
    for o in observations:
        if attempt_counts.get(o.key, o.attempt) > cfg.max_attempts:
            tally["over_attempt_cap"] += 1
        else:
            kept.append(o)
    return kept


def drop_post_correct_seconds(
    observations: Iterable[ResponseObservation],
    cfg: QualificationConfig,
    tally: Counter | None = None,
) -> list[ResponseObservation]:
    """Remove second attempts that follow a correct (or unrecorded) first attempt."""
    tally = tally if tally is not None else Counter()
    observations = list(observations)
    first_correct = {o.key: is_correct(o, cfg) for o in observations if o.attempt == 1}
    kept = []
    for o in observations:
        if o.attempt == 2:
            if o.key not in first_correct:
                tally["second_without_first"] += 1
                continue
            if first_correct[o.key]:
                tally["second_after_correct"] += 1
                continue
        kept.append(o)
    return kept


def qualify_matrix(
    observations: Iterable[ResponseObservation],
    cfg: QualificationConfig,
    attempt: int = 1,
    correctness: str = "any",
) -> ResponseMatrix:
    """Prune sparse questions and users to a fixed point and build the matrix.

    If no user reaches ``min_questions_per_user`` the user cutoff drops to the
    largest per-user count present in the input.
    """
    cells: dict[tuple[str, str], float] = {}
    for o in observations:
        if o.key in cells:
            raise ValueError(f"two observations for cell {o.key} in subset {attempt}_{correctness}")
        cells[o.key] = math.log(o.response_time)

    per_user = Counter(u for u, _ in cells)
    user_cut = cfg.min_questions_per_user
    if per_user and max(per_user.values()) < user_cut:
        user_cut = max(per_user.values())
        log.info("lowering user cutoff to %d for subset %d_%s", user_cut, attempt, correctness)
    q_cut = cfg.min_users_per_question

    live = set(cells)
    rounds = 0
    while True:
        rounds += 1
        q_count = Counter(q for _, q in live)
        u_count = Counter(u for u, _ in live)
        drop_q = {q for q, n in q_count.items() if n < q_cut}
        drop_u = {u for u, n in u_count.items() if n < user_cut}
        if not drop_q and not drop_u:
            break
        # questions first, then users against the reduced counts
        live = {(u, q) for u, q in live if q not in drop_q}
        u_count = Counter(u for u, _ in live)
        live = {(u, q) for u, q in live if u_count[u] >= user_cut}

    meta = {
        "input_cells": len(cells),
        "kept_cells": len(live),
        "user_cutoff": user_cut,
        "question_cutoff": q_cut,
        "pruning_rounds": rounds,
    }
    triplets = [(u, q, cells[(u, q)]) for u, q in sorted(live)]
    matrix = ResponseMatrix.from_triplets(
        triplets, attempt=attempt, correctness=correctness, tallies=meta
    )
    return matrix


def subset_observations(
    observations: Iterable[ResponseObservation], attempt: int, correctness: str, cfg: QualificationConfig
) -> list[ResponseObservation]:
    out = []
    for o in observations:
        if o.attempt != attempt:
            continue
        if correctness == "correct" and not is_correct(o, cfg):
            continue
        if correctness == "incorrect" and is_correct(o, cfg):
            continue
        out.append(o)
    return out


def build_subsets(
    observations: Iterable[ResponseObservation], cfg: QualificationConfig | None = None
) -> dict[str, ResponseMatrix]:
    """The six (attempt x correctness) matrices, each qualified on its own."""
    cfg = cfg or QualificationConfig()
    observations = list(observations)
    out = {}
    for attempt in ATTEMPTS:
        for correctness in CORRECTNESS:
            subset = subset_observations(observations, attempt, correctness, cfg)
            m = qualify_matrix(subset, cfg, attempt, correctness)
            out[m.label] = m
    return out


@dataclass
class Preparation:
    observations: list[ResponseObservation]
    explored_users: set[str]
    tallies: dict[str, int]


def prepare_observations(
    observations: Iterable[ResponseObservation],
    attempt_counts: Mapping[tuple[str, str], int],
    log_: EventLog | None,
    structure: CourseStructure | None,
    cfg: QualificationConfig,
) -> Preparation:
    """Explored-user filter (when a structure is given), attempt cap, post-correct drop."""
    tally: Counter = Counter()
    observations = list(observations)
    if structure is not None and log_ is not None:
        explored = filter_explored(log_, structure, cfg, tally)
        before = len(observations)
        observations = restrict_users(observations, explored)
        tally["unexplored_user_obs"] += before - len(observations)
    else:
        explored = {o.user_id for o in observations}
    observations = apply_attempt_cap(observations, attempt_counts, cfg, tally)
    observations = drop_post_correct_seconds(observations, cfg, tally)
    return Preparation(observations, explored, dict(sorted(tally.items())))


def write_matrix(matrix: ResponseMatrix, csv_path, json_path, extra: dict | None = None) -> None:
    """Sparse ``user_id,question_id,ln_time`` triplets plus a JSON sidecar."""
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MATRIX_HEADER)
        for u, q, v in matrix.triplets():
            writer.writerow([u, q, repr(v)])
    sidecar = {
        "subset": matrix.label,
        "attempt": matrix.attempt,
        "correctness": matrix.correctness,
        "status": matrix.status,
        "N_u": matrix.n_users,
        "N_q": matrix.n_questions,
        "n_obs": matrix.n_obs,
        "tallies": matrix.tallies,
    }
    if extra:
        sidecar.update(extra)
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_matrix(csv_path, json_path=None) -> ResponseMatrix:
    meta = {}
    if json_path is not None:
        with open(json_path, encoding="utf-8") as fh:
            meta = json.load(fh)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MATRIX_HEADER:
            raise ValueError(f"{csv_path}: unexpected header {header!r}")
        triplets = [(u, q, float(v)) for u, q, v in reader]
    kw = {}
    if meta:
        kw = dict(attempt=meta["attempt"], correctness=meta["correctness"], tallies=meta.get("tallies", {}))
        if meta.get("status", "ok") != "ok":
            kw["status"] = meta["status"]
    return ResponseMatrix.from_triplets(triplets, **kw)
