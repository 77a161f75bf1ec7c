"""Event-log ingestion: parsing, validation, seek attribution, video dedup."""
from __future__ import annotations

import enum
import io
import json
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from typing import Iterable, NamedTuple

from .errors import ContractViolation, DataError


class Kind(enum.Enum):
    Play = "play"
    Pause = "pause"
    SeekForward = "seek_forward"
    SeekBackward = "seek_backward"
    RateChange = "rate"

    @property
    def is_seek(self):
        return self in (Kind.SeekForward, Kind.SeekBackward)


class SeekClass(enum.Enum):
    RewindToDestination = "rewind"
    SkipFromOrigin = "skip"


@dataclass(frozen=True, slots=True)
class Event:
    user_id: str
    video_id: str
    course_run_id: str
    wall_time: int  # ms since epoch, UTC
    kind: Kind
    from_pos: float
    to_pos: float | None = None
    rate: float | None = None


@dataclass(frozen=True)
class VideoMeta:
    video_id: str
    duration: int
    content_checksum: str
    field: str = ""
    course_id: str = ""
    course_run_ids: tuple = ()
    language: str = "en"

    def __post_init__(self):
        if self.duration <= 0:
            raise ContractViolation(f"{self.video_id}: duration must be positive")
        if not self.content_checksum:
            raise ContractViolation(f"{self.video_id}: empty content_checksum")


@dataclass
class SchemaConfig:
    """Optional context for validation.

    ``durations`` maps video_id -> D_v; when given, positions beyond
    ``D_v + tolerance`` and events for unknown videos are dropped.
    """

    durations: dict | None = None
    tolerance: float = 1.0


@dataclass
class IngestReport:
    accepted: int = 0
    dropped: Counter = field(default_factory=Counter)
    dropped_lines: list = field(default_factory=list)

    @property
    def dropped_total(self):
        return sum(self.dropped.values())

    @property
    def dropped_zero_seek(self):
        return self.dropped["zero_seek"]

    def merge(self, other: "IngestReport") -> "IngestReport":
        out = IngestReport(self.accepted + other.accepted, self.dropped + other.dropped)
        out.dropped_lines = self.dropped_lines + other.dropped_lines
        return out

    def to_dict(self):
        return {
            "accepted": self.accepted,
            "dropped_total": self.dropped_total,
            "dropped": dict(sorted(self.dropped.items())),
        }


class _Reject(Exception):
    def __init__(self, reason):
        self.reason = reason


def _number(obj, key):
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise _Reject("missing_field" if v is None else "bad_value")
    v = float(v)
    if not math.isfinite(v):
        raise _Reject("bad_value")
    return v


def _string(obj, key):
    v = obj.get(key)
    if not isinstance(v, str) or not v:
        raise _Reject("missing_field")
    return v


def _parse_record(obj, schema: SchemaConfig) -> Event:
    if not isinstance(obj, dict):
        raise _Reject("malformed")
    user, video, run = _string(obj, "user_id"), _string(obj, "video_id"), _string(obj, "course_run_id")
    ts = obj.get("ts_ms")
    if isinstance(ts, bool) or not isinstance(ts, int):
        raise _Reject("missing_field" if ts is None else "bad_value")
    kind = obj.get("kind")
    pos = _number(obj, "pos")
    if pos < 0:
        raise _Reject("bad_value")
    to_pos = rate = None
    if kind == "play":
        k = Kind.Play
    elif kind == "pause":
        k = Kind.Pause
    elif kind == "seek":
        to_pos = _number(obj, "to_pos")
        if to_pos < 0:
            raise _Reject("bad_value")
        if to_pos == pos:
            raise _Reject("zero_seek")
        k = Kind.SeekForward if to_pos > pos else Kind.SeekBackward
    elif kind == "rate":
        rate = _number(obj, "rate")
        if rate <= 0:
            raise _Reject("bad_value")
        k = Kind.RateChange
    else:
        raise _Reject("bad_kind")
    if schema.durations is not None:
        if video not in schema.durations:
            raise _Reject("unknown_video")
        limit = schema.durations[video] + schema.tolerance
        if pos > limit or (to_pos is not None and to_pos > limit):
            raise _Reject("out_of_range")
    return Event(user, video, run, ts, k, pos, to_pos, rate)


def _lines(byte_stream):
    if isinstance(byte_stream, (bytes, bytearray)):
        return io.BytesIO(byte_stream)
    return byte_stream


def parse_event_log(byte_stream, schema_config: SchemaConfig | None = None, *, _line_offset=0):
    """Parse a line-delimited event log.

    Returns ``(events, report)`` with events stably sorted by
    ``(user_id, wall_time)``. Bad lines are dropped and counted by reason;
    an unreadable stream raises :class:`DataError`.
    """
    schema = schema_config or SchemaConfig()
    report = IngestReport()
    events = []
    try:
        for lineno, raw in enumerate(_lines(byte_stream)):
            if isinstance(raw, str):
                raw = raw.encode("utf-8")
            if not raw.strip():
                continue
            try:
                try:
                    obj = json.loads(raw)
                except (ValueError, UnicodeDecodeError):
                    raise _Reject("malformed")
                events.append(_parse_record(obj, schema))
            except _Reject as rej:
                report.dropped[rej.reason] += 1
                report.dropped_lines.append(lineno + _line_offset)
    except OSError as exc:
        raise DataError(f"unreadable event stream: {exc}") from exc
    events.sort(key=lambda e: (e.user_id, e.wall_time))
    report.accepted = len(events)
    return events, report


def parse_event_shards(streams: Iterable, schema_config: SchemaConfig | None = None):
    """Parse several shards and merge them; identical to parsing their concatenation."""
    events, report, offset = [], IngestReport(), 0
    for stream in streams:
        data = stream.read() if hasattr(stream, "read") else stream
        shard_events, shard_report = parse_event_log(data, schema_config, _line_offset=offset)
        offset += data.count(b"\n") + (0 if data.endswith(b"\n") or not data else 1)
        events.extend(shard_events)
        report = report.merge(shard_report)
    events.sort(key=lambda e: (e.user_id, e.wall_time))
    return events, report


def event_to_record(e: Event) -> dict:
    rec = {
        "user_id": e.user_id,
        "video_id": e.video_id,
        "course_run_id": e.course_run_id,
        "ts_ms": e.wall_time,
        "pos": e.from_pos,
    }
    if e.kind.is_seek:
        rec["kind"] = "seek"
        rec["to_pos"] = e.to_pos
    elif e.kind is Kind.RateChange:
        rec["kind"] = "rate"
        rec["rate"] = e.rate
    else:
        rec["kind"] = e.kind.value
    return rec


def serialize_events(events: Iterable[Event]) -> bytes:
    return b"".join(
        json.dumps(event_to_record(e), separators=(",", ":")).encode() + b"\n" for e in events
    )


def half_up(x: float) -> int:
    return math.floor(x + 0.5)


class SeekAttribution(NamedTuple):
    kind: SeekClass
    second: int


def classify_seek(event: Event) -> SeekAttribution:
    """Rewinds count at their destination, skips at their origin."""
    if event.kind is Kind.SeekBackward:
        return SeekAttribution(SeekClass.RewindToDestination, half_up(event.to_pos))
    if event.kind is Kind.SeekForward:
        return SeekAttribution(SeekClass.SkipFromOrigin, half_up(event.from_pos))
    raise ContractViolation(f"classify_seek called on {event.kind.name} event")


def dedupe_videos(metas: Iterable[VideoMeta]) -> dict:
    """Map every video_id to the smallest id sharing its (duration, checksum)."""
    groups = defaultdict(list)
    for m in metas:
        groups[(m.duration, m.content_checksum)].append(m.video_id)
    canonical = {}
    for ids in groups.values():
        target = min(ids)
        for vid in ids:
            canonical[vid] = target
    return canonical


def canonicalize(events: Iterable[Event], canonical: dict) -> list:
    out = []
    for e in events:
        target = canonical.get(e.video_id, e.video_id)
        out.append(e if target == e.video_id else replace(e, video_id=target))
    return out


def group_streams(events: Iterable[Event]) -> dict:
    """video_id -> user_id -> events in wall-time order (input must be sorted)."""
    streams: dict = defaultdict(lambda: defaultdict(list))
    for e in events:
        streams[e.video_id][e.user_id].append(e)
    return {v: dict(users) for v, users in streams.items()}


def read_video_meta(path) -> list:
    metas = []
    with open(path, "rb") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            rec["course_run_ids"] = tuple(rec.get("course_run_ids", ()))
            metas.append(VideoMeta(**rec))
    return metas


def write_video_meta(path, metas: Iterable[VideoMeta]):
    with open(path, "w", encoding="utf-8") as fh:
        for m in metas:
            rec = {
                "video_id": m.video_id,
                "duration": m.duration,
                "content_checksum": m.content_checksum,
                "field": m.field,
                "course_id": m.course_id,
                "course_run_ids": list(m.course_run_ids),
                "language": m.language,
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")
