"""Response times from page loads and submit clicks.

A page session starts at a page load and collects every later submit on that
page by the same user until the page is loaded again. Inside a session the
submit timestamps form a chain ``t_0 < t_1 < ... < t_p`` (``t_0`` being the
load); a question whose first-ever submit is ``t_i`` gets the first-attempt
time ``t_i - t_(i-1)``. A second attempt takes the time between the first
and the second submit on the question, wherever those submits happened.
"""

from __future__ import annotations

import csv
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Mapping

from .events import EventKind, EventLog


@dataclass(frozen=True)
class SessionSubmit:
    timestamp: float
    question_id: str
    attempt: int
    score_fraction: float


@dataclass(frozen=True)
class PageSession:
    user_id: str
    page_id: str
    load_timestamp: float
    submits: tuple[SessionSubmit, ...]

    @property
    def chain(self) -> list[float]:
        return [self.load_timestamp] + [s.timestamp for s in self.submits]


@dataclass(frozen=True)
class ResponseObservation:
    user_id: str
    question_id: str
    attempt: int
    response_time: float
    correct: bool
    submit_timestamp: float
    score_fraction: float | None = None

    @property
    def key(self) -> tuple[str, str]:
        return self.user_id, self.question_id


# (user_id, question_id) -> ((timestamp, score_fraction), ...) in time order
AttemptIndex = Mapping[tuple[str, str], tuple[tuple[float, float], ...]]


def build_attempt_index(log: EventLog) -> dict[tuple[str, str], tuple[tuple[float, float], ...]]:
    """Every submit of every (user, question) pair, in log order."""
    index: dict[tuple[str, str], list] = {}
    for ev in log.events:
        if ev.kind is EventKind.SUBMIT:
            index.setdefault((ev.user_id, ev.question_id), []).append(
                (ev.timestamp, ev.score_fraction)
            )
    return {k: tuple(v) for k, v in index.items()}


def attempt_counts(index: AttemptIndex) -> dict[tuple[str, str], int]:
    return {k: len(v) for k, v in index.items()}


def build_page_sessions(log: EventLog, tally: Counter | None = None) -> list[PageSession]:
    """Group each user's submits under the latest earlier load of the same page.

    Submits without any earlier load of their page are dropped and counted
    under ``"orphan_submit"``. Attempt numbers count every submit of the
    pair, orphans included.
    """
    tally = tally if tally is not None else Counter()
    sessions: list[PageSession] = []
    for user_id, events in log.by_user():
        open_sessions: dict[str, tuple[float, list]] = {}
        finished: list[tuple[str, float, list]] = []
        seen: Counter = Counter()
        for ev in events:
            if ev.kind is EventKind.PAGE_LOAD:
                if ev.page_id in open_sessions:
                    load_ts, subs = open_sessions.pop(ev.page_id)
                    finished.append((ev.page_id, load_ts, subs))
                open_sessions[ev.page_id] = (ev.timestamp, [])
                continue
            seen[ev.question_id] += 1
            submit = SessionSubmit(ev.timestamp, ev.question_id, seen[ev.question_id], ev.score_fraction)
            if ev.page_id not in open_sessions:
                tally["orphan_submit"] += 1
                continue
            open_sessions[ev.page_id][1].append(submit)
        finished.extend((page, ts, subs) for page, (ts, subs) in open_sessions.items())
        finished.sort(key=lambda s: (s[1], s[0]))
        sessions.extend(
            PageSession(user_id, page, ts, tuple(subs)) for page, ts, subs in finished
        )
    return sessions


def extract_response_times(
    sessions: Iterable[PageSession],
    attempt_index: AttemptIndex,
    tally: Counter | None = None,
    full_credit_threshold: float = 1.0,
) -> list[ResponseObservation]:
    """First- and second-attempt response times, sorted by (user, question, attempt).

    Non-positive elapsed times are dropped (``"nonpositive_dt"``); attempts
    past the second are only tallied (``"attempt_ge3"``). No upper cutoff is
    applied to long times.
    """
    tally = tally if tally is not None else Counter()
    out: list[ResponseObservation] = []

    def emit(user, sub: SessionSubmit, dt: float):
        if not dt > 0:
            tally["nonpositive_dt"] += 1
            return
        out.append(
            ResponseObservation(
                user_id=user,
                question_id=sub.question_id,
                attempt=sub.attempt,
                response_time=dt,
                correct=sub.score_fraction >= full_credit_threshold,
                submit_timestamp=sub.timestamp,
                score_fraction=sub.score_fraction,
            )
        )

    for session in sessions:
        chain = session.chain
        for i, sub in enumerate(session.submits, start=1):
            if sub.attempt == 1:
                emit(session.user_id, sub, chain[i] - chain[i - 1])
            elif sub.attempt == 2:
                history = attempt_index.get((session.user_id, sub.question_id), ())
                if len(history) < 2 or history[0][0] > sub.timestamp:
                    tally["out_of_order"] += 1
                    continue
                emit(session.user_id, sub, sub.timestamp - history[0][0])
            else:
                tally["attempt_ge3"] += 1
    out.sort(key=lambda o: (o.user_id, o.question_id, o.attempt))
    return out


@dataclass
class Extraction:
    observations: list[ResponseObservation]
    attempt_counts: dict[tuple[str, str], int]
    tallies: dict[str, int]


def extract(log: EventLog, full_credit_threshold: float = 1.0) -> Extraction:
    """Run session building and time extraction over a whole log."""
    tally: Counter = Counter()
    index = build_attempt_index(log)
    sessions = build_page_sessions(log, tally)
    observations = extract_response_times(sessions, index, tally, full_credit_threshold)
    tally["sessions"] = len(sessions)
    tally["observations"] = len(observations)
    return Extraction(observations, attempt_counts(index), dict(sorted(tally.items())))


OBSERVATION_HEADER = ["user_id", "question_id", "attempt", "response_time_s", "correct", "submit_ts"]


def write_observations(observations: Iterable[ResponseObservation], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(OBSERVATION_HEADER)
        for o in observations:
            writer.writerow(
                [o.user_id, o.question_id, o.attempt, repr(o.response_time), int(o.correct), repr(o.submit_timestamp)]
            )


def read_observations(path) -> list[ResponseObservation]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != OBSERVATION_HEADER:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            ResponseObservation(
                user_id=row["user_id"],
                question_id=row["question_id"],
                attempt=int(row["attempt"]),
                response_time=float(row["response_time_s"]),
                correct=row["correct"] in ("1", "true", "True"),
                submit_timestamp=float(row["submit_ts"]),
            )
            for row in reader
        ]
