"""Sparse user x question matrix of log response times."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

ATTEMPTS = (1, 2)
CORRECTNESS = ("any", "correct", "incorrect")


def subset_label(attempt: int, correctness: str) -> str:
    return f"{attempt}_{correctness}"


def parse_subset_label(label: str) -> tuple[int, str]:
    attempt, _, correctness = label.partition("_")
    if int(attempt) not in ATTEMPTS or correctness not in CORRECTNESS:
        raise ValueError(f"unknown subset label {label!r}")
    return int(attempt), correctness


@dataclass(frozen=True, eq=False)
class ResponseMatrix:
    """Observed entries ``ln t`` stored as coordinate triplets.

    ``rows`` index into ``user_ids`` and ``cols`` into ``question_ids``.
    Entries are kept in (row, col) order so that every reduction over the
    matrix is reproducible bit for bit.
    """

    user_ids: tuple[str, ...]
    question_ids: tuple[str, ...]
    rows: np.ndarray
    cols: np.ndarray
    log_times: np.ndarray
    attempt: int = 1
    correctness: str = "any"
    status: str = "ok"
    tallies: dict = field(default_factory=dict)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=np.intp)
        cols = np.asarray(self.cols, dtype=np.intp)
        vals = np.asarray(self.log_times, dtype=float)
        if not (rows.shape == cols.shape == vals.shape and rows.ndim == 1):
            raise ValueError("rows, cols and log_times must be 1-d and equal length")
        object.__setattr__(self, "rows", rows)
        object.__setattr__(self, "cols", cols)
        object.__setattr__(self, "log_times", vals)
        object.__setattr__(self, "user_ids", tuple(self.user_ids))
        object.__setattr__(self, "question_ids", tuple(self.question_ids))

    @property
    def label(self) -> str:
        return subset_label(self.attempt, self.correctness)

    @property
    def n_users(self) -> int:
        return len(self.user_ids)

    @property
    def n_questions(self) -> int:
        return len(self.question_ids)

    @property
    def n_obs(self) -> int:
        return int(self.log_times.size)

    @property
    def fittable(self) -> bool:
        return self.status == "ok" and self.n_obs > 0

    def user_counts(self) -> np.ndarray:
        return np.bincount(self.rows, minlength=self.n_users)

    def question_counts(self) -> np.ndarray:
        return np.bincount(self.cols, minlength=self.n_questions)

    def validate(self) -> None:
        """Raise ``ValueError`` if any matrix invariant is broken."""
        if self.n_obs:
            if self.rows.min() < 0 or self.rows.max() >= self.n_users:
                raise ValueError("row index out of range")
            if self.cols.min() < 0 or self.cols.max() >= self.n_questions:
                raise ValueError("column index out of range")
        if not np.all(np.isfinite(self.log_times)):
            raise ValueError("matrix holds non-finite entries")
        flat = self.rows * max(self.n_questions, 1) + self.cols
        if np.unique(flat).size != flat.size:
            raise ValueError("duplicate (user, question) cell")
        if self.status == "ok":
            if np.any(self.user_counts() == 0) or np.any(self.question_counts() == 0):
                raise ValueError("empty row or column in a qualified matrix")

    def to_dense(self) -> np.ndarray:
        """Dense ``N_u x N_q`` array with NaN for missing cells."""
        out = np.full((self.n_users, self.n_questions), np.nan)
        out[self.rows, self.cols] = self.log_times
        return out

    def triplets(self) -> list[tuple[str, str, float]]:
        return [
            (self.user_ids[r], self.question_ids[c], float(v))
            for r, c, v in zip(self.rows, self.cols, self.log_times)
        ]

    @classmethod
    def from_dense(cls, values, user_ids=None, question_ids=None, **kw) -> "ResponseMatrix":
        """Build from a dense array of log times; NaN marks a missing cell."""
        values = np.asarray(values, dtype=float)
        n_u, n_q = values.shape
        user_ids = tuple(user_ids) if user_ids is not None else tuple(f"u{i}" for i in range(n_u))
        question_ids = (
            tuple(question_ids) if question_ids is not None else tuple(f"q{j}" for j in range(n_q))
        )
        rows, cols = np.nonzero(~np.isnan(values))
        return cls(user_ids, question_ids, rows, cols, values[rows, cols], **kw)

    @classmethod
    def from_triplets(
        cls, triplets: Iterable[tuple[str, str, float]], **kw
    ) -> "ResponseMatrix":
        """Build from ``(user_id, question_id, ln_time)`` triplets.

        Ids are sorted lexicographically; duplicate cells raise ``ValueError``.
        An empty input yields an "unfittable" matrix.
        """
        triplets = list(triplets)
        if not triplets:
            kw.setdefault("status", "unfittable")
            empty = np.empty(0)
            return cls((), (), empty.astype(np.intp), empty.astype(np.intp), empty, **kw)
        user_ids = tuple(sorted({t[0] for t in triplets}))
        question_ids = tuple(sorted({t[1] for t in triplets}))
        upos = {u: i for i, u in enumerate(user_ids)}
        qpos = {q: j for j, q in enumerate(question_ids)}
        rows = np.array([upos[t[0]] for t in triplets], dtype=np.intp)
        cols = np.array([qpos[t[1]] for t in triplets], dtype=np.intp)
        vals = np.array([t[2] for t in triplets], dtype=float)
        order = np.lexsort((cols, rows))
        matrix = cls(user_ids, question_ids, rows[order], cols[order], vals[order], **kw)
        matrix.validate()
        return matrix
