"""Parsing and ordering of raw course event logs (JSON Lines)."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from enum import Enum
from typing import IO, Iterable, Iterator


class ValidationError(ValueError):
    """Input events violate a structural requirement."""


class EventKind(str, Enum):
    PAGE_LOAD = "page_load"
    SUBMIT = "submit"


# page_load sorts first at equal timestamps
_KIND_RANK = {EventKind.PAGE_LOAD: 0, EventKind.SUBMIT: 1}
_REQUIRED = ("kind", "course_id", "user_id", "page_id", "timestamp")


@dataclass(frozen=True)
class RawEvent:
    kind: EventKind
    course_id: str
    user_id: str
    page_id: str
    timestamp: float
    question_id: str = ""
    score_fraction: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "kind", EventKind(self.kind))
        if not (isinstance(self.timestamp, (int, float)) and math.isfinite(self.timestamp)):
            raise ValidationError(f"bad timestamp {self.timestamp!r}")
        if self.timestamp < 0:
            raise ValidationError(f"negative timestamp {self.timestamp!r}")
        if self.kind is EventKind.SUBMIT:
            if not self.question_id:
                raise ValidationError("submit event without question_id")
            if self.score_fraction is None or not 0.0 <= self.score_fraction <= 1.0:
                raise ValidationError(f"bad score_fraction {self.score_fraction!r}")
        elif self.question_id or self.score_fraction is not None:
            raise ValidationError("page_load carries question fields")

    @property
    def sort_key(self):
        # trailing fields only break exact ties, so input order never matters
        score = -1.0 if self.score_fraction is None else self.score_fraction
        return (self.user_id, self.timestamp, _KIND_RANK[self.kind], self.page_id, self.question_id, score)

    def to_json(self) -> dict:
        out = {
            "kind": self.kind.value,
            "course_id": self.course_id,
            "user_id": self.user_id,
            "page_id": self.page_id,
            "timestamp": self.timestamp,
        }
        if self.kind is EventKind.SUBMIT:
            out["question_id"] = self.question_id
            out["score_fraction"] = self.score_fraction
        return out


@dataclass(frozen=True)
class EventLog:
    course_id: str
    events: tuple[RawEvent, ...] = ()
    rejections: dict[str, int] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.events)

    def by_user(self) -> Iterator[tuple[str, list[RawEvent]]]:
        """Yield ``(user_id, events)`` in sorted user order."""
        current, bucket = None, []
        for ev in self.events:
            if ev.user_id != current and bucket:
                yield current, bucket
                bucket = []
            current = ev.user_id
            bucket.append(ev)
        if bucket:
            yield current, bucket

    def rejection_summary(self) -> dict:
        return {
            "course_id": self.course_id,
            "accepted": len(self.events),
            "rejected": sum(self.rejections.values()),
            "reasons": dict(sorted(self.rejections.items())),
        }


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def parse_line(line: str) -> tuple[RawEvent | None, str | None]:
    """Parse one JSON line; return ``(event, None)`` or ``(None, reason)``."""
    if not line.strip():
        return None, "blank_line"
    try:
        obj = json.loads(line)
    except json.JSONDecodeError:
        return None, "bad_json"
    if not isinstance(obj, dict):
        return None, "bad_json"
    if any(obj.get(k) is None for k in _REQUIRED):
        return None, "missing_field"
    try:
        kind = EventKind(obj["kind"])
    except ValueError:
        return None, "unknown_kind"
    ts = obj["timestamp"]
    if not _is_number(ts) or not math.isfinite(ts) or ts < 0:
        return None, "bad_timestamp"
    if not all(isinstance(obj[k], str) for k in ("course_id", "user_id", "page_id")):
        return None, "missing_field"
    question_id = obj.get("question_id") or ""
    score = obj.get("score_fraction")
    if kind is EventKind.SUBMIT:
        if not isinstance(question_id, str) or not question_id:
            return None, "missing_field"
        if score is None:
            return None, "missing_field"
        if not _is_number(score) or not 0.0 <= score <= 1.0:
            return None, "bad_score"
        score = float(score)
    elif question_id or score is not None:
        return None, "inconsistent_fields"
    event = RawEvent(
        kind=kind,
        course_id=obj["course_id"],
        user_id=obj["user_id"],
        page_id=obj["page_id"],
        timestamp=float(ts),
        question_id=question_id,
        score_fraction=score,
    )
    return event, None


def _read_lines(stream: IO | Iterable[str]) -> Iterator[str]:
    for raw in stream:
        if isinstance(raw, bytes):
            raw = raw.decode("utf-8")
        yield raw.rstrip("\r\n")


def _parse(stream) -> tuple[list[RawEvent], Counter]:
    events, rejections = [], Counter()
    for line in _read_lines(stream):
        event, reason = parse_line(line)
        if event is None:
            rejections[reason] += 1
        else:
            events.append(event)
    return events, rejections


def parse_events(stream: IO | Iterable[str]) -> EventLog:
    """Parse a single-course JSON Lines stream into a sorted ``EventLog``.

    Malformed lines are skipped and tallied by reason. Events from more than
    one course raise ``ValidationError``; use :func:`parse_courses` for
    multi-course files.
    """
    events, rejections = _parse(stream)
    log = sort_and_validate(events)
    return EventLog(log.course_id, log.events, dict(rejections))


def parse_courses(stream: IO | Iterable[str]) -> dict[str, EventLog]:
    """Parse a stream that may mix courses; one ``EventLog`` per course.

    Rejected lines cannot be attributed to a course, so every log carries
    the stream-wide rejection tally.
    """
    events, rejections = _parse(stream)
    grouped: dict[str, list[RawEvent]] = {}
    for ev in events:
        grouped.setdefault(ev.course_id, []).append(ev)
    out = {}
    for course_id in sorted(grouped):
        log = sort_and_validate(grouped[course_id])
        out[course_id] = EventLog(course_id, log.events, dict(rejections))
    return out


def sort_and_validate(events: Iterable[RawEvent]) -> EventLog:
    """Stable sort by (user, timestamp), page loads before submits on ties."""
    events = list(events)
    courses = sorted({ev.course_id for ev in events})
    if len(courses) > 1:
        raise ValidationError(f"events from several courses: {courses}")
    ordered = tuple(sorted(events, key=lambda ev: ev.sort_key))
    return EventLog(courses[0] if courses else "", ordered, {})


def serialize(log: EventLog) -> str:
    """Render an ``EventLog`` as JSON Lines text (inverse of parse_events)."""
    return "".join(json.dumps(ev.to_json()) + "\n" for ev in log.events)


def write_events(log: EventLog, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(serialize(log))
