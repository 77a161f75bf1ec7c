"""Per-video behavioral signals: raw counts -> percentile ranks -> top-K labels."""
from __future__ import annotations

import enum
import json
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from . import SIGNALS
from .errors import ContractViolation, VideoTooShort
from .events import Event, Kind, SeekClass, classify_seek, half_up

log = logging.getLogger(__name__)

TRIM_SECONDS = 30
SMOOTH_WINDOW = 5
SUBSAMPLE_INTERVAL = 5
K_VALUES = (5, 10, 20)


class Stage(enum.IntEnum):
    RawCounts = 0
    Normalized = 1
    Smoothed = 2
    Detrended = 3
    Rank = 4


@dataclass
class SignalSeries:
    video_id: str
    signal: str
    stage: Stage
    t0: int
    values: np.ndarray
    history: list = field(default_factory=list)

    @property
    def seconds(self):
        return np.arange(self.t0, self.t0 + len(self.values))

    def at(self, t: int) -> float:
        return float(self.values[t - self.t0])


@dataclass
class Moment:
    video_id: str
    t: int
    labels: dict
    embedding_row: int | None = None
    ctml: object = None
    field: str = ""
    course_id: str = ""


# --------------------------------------------------------------------------
# playback reconstruction and raw counts


def reconstruct_playback(events, duration: float, session_cap: float | None = None):
    """Watch intervals ``[a, b)`` for one (user, video) stream in wall-time order.

    Rate changes are ignored. A seek while playing closes the running
    interval at its origin and reopens at its destination; an interval
    still open at the end runs to the end of the video (or ``session_cap``).
    """
    intervals = []
    start = None
    for e in events:
        k = e.kind
        if k is Kind.RateChange:
            continue
        if k is Kind.Play:
            if start is not None:
                intervals.append((start, e.from_pos))
            start = e.from_pos
        elif k is Kind.Pause:
            if start is not None:
                intervals.append((start, e.from_pos))
            start = None
        else:
            if start is not None:
                intervals.append((start, e.from_pos))
                start = e.to_pos
    if start is not None:
        remaining = max(duration - start, 0.0)
        cap = remaining if session_cap is None else min(remaining, session_cap)
        intervals.append((start, start + cap))
    return [(a, b) for a, b in intervals if b > a]


def _covered_range(a, b, n):
    """Integer seconds t with a <= t < b, clipped to [0, n)."""
    lo = max(math.ceil(a), 0)
    hi = min(math.ceil(b), n)
    return lo, hi


def _coverage(intervals, n):
    diff = np.zeros(n + 1, dtype=np.int64)
    for a, b in intervals:
        lo, hi = _covered_range(a, b, n)
        if hi > lo:
            diff[lo] += 1
            diff[hi] -= 1
    return np.cumsum(diff[:-1])


def _union(intervals, n):
    spans = sorted(r for r in (_covered_range(a, b, n) for a, b in intervals) if r[1] > r[0])
    merged = []
    for lo, hi in spans:
        if merged and lo <= merged[-1][1]:
            merged[-1][1] = max(merged[-1][1], hi)
        else:
            merged.append([lo, hi])
    return merged


def _by_user(events):
    users = defaultdict(list)
    for e in events:
        users[e.user_id].append(e)
    for evs in users.values():
        evs.sort(key=lambda e: e.wall_time)
    return users


def _check_duration(duration):
    if duration <= 2 * TRIM_SECONDS:
        raise VideoTooShort(f"duration {duration}s <= {2 * TRIM_SECONDS}s")


def raw_counts(events, signal: str, duration: int, video_id: str = "") -> SignalSeries:
    """Counts per integer second 0..D for one canonical video."""
    _check_duration(duration)
    n = int(duration) + 1
    if signal == "Watched":
        vals = np.zeros(n, dtype=np.int64)
        for evs in _by_user(events).values():
            vals += _coverage(reconstruct_playback(evs, duration), n)
    else:
        vals = np.zeros(n, dtype=np.int64)
        for e in events:
            if signal == "PausedAt" and e.kind is Kind.Pause:
                t = half_up(e.from_pos)
            elif signal in ("RewoundTo", "SkippedFrom") and e.kind.is_seek:
                cls, t = classify_seek(e)
                want = SeekClass.RewindToDestination if signal == "RewoundTo" else SeekClass.SkipFromOrigin
                if cls is not want:
                    continue
            elif signal not in SIGNALS:
                raise ContractViolation(f"unknown signal {signal!r}")
            else:
                continue
            if 0 <= t < n:
                vals[t] += 1
    return SignalSeries(video_id, signal, Stage.RawCounts, 0, vals.astype(float), [Stage.RawCounts])


def active_learners(events, duration: int, video_id: str = "") -> SignalSeries:
    """Distinct users whose reconstructed playback covers each second."""
    n = int(duration) + 1
    diff = np.zeros(n + 1, dtype=np.int64)
    for evs in _by_user(events).values():
        for lo, hi in _union(reconstruct_playback(evs, duration), n):
            diff[lo] += 1
            diff[hi] -= 1
    vals = np.cumsum(diff[:-1]).astype(float)
    return SignalSeries(video_id, "Active", Stage.RawCounts, 0, vals, [Stage.RawCounts])


def raw_signals(events, duration: int, video_id: str = ""):
    """All four raw-count series plus active learners, sharing one reconstruction."""
    _check_duration(duration)
    n = int(duration) + 1
    watched = np.zeros(n, dtype=np.int64)
    adiff = np.zeros(n + 1, dtype=np.int64)
    counts = {s: np.zeros(n, dtype=np.int64) for s in SIGNALS[1:]}
    for evs in _by_user(events).values():
        intervals = reconstruct_playback(evs, duration)
        watched += _coverage(intervals, n)
        for lo, hi in _union(intervals, n):
            adiff[lo] += 1
            adiff[hi] -= 1
        for e in evs:
            if e.kind is Kind.Pause:
                name, t = "PausedAt", half_up(e.from_pos)
            elif e.kind.is_seek:
                cls, t = classify_seek(e)
                name = "RewoundTo" if cls is SeekClass.RewindToDestination else "SkippedFrom"
            else:
                continue
            if 0 <= t < n:
                counts[name][t] += 1
    counts["Watched"] = watched
    out = {
        s: SignalSeries(video_id, s, Stage.RawCounts, 0, counts[s].astype(float), [Stage.RawCounts])
        for s in SIGNALS
    }
    active = SignalSeries(video_id, "Active", Stage.RawCounts, 0,
                          np.cumsum(adiff[:-1]).astype(float), [Stage.RawCounts])
    return out, active


# --------------------------------------------------------------------------
# preprocessing steps


def normalize(counts: np.ndarray, active: np.ndarray) -> np.ndarray:
    out = np.zeros(len(counts))
    ok = active > 0
    out[ok] = counts[ok] / active[ok]
    return out


def moving_average(x: np.ndarray, window: int = SMOOTH_WINDOW) -> np.ndarray:
    """Centered moving average with the window mirrored at both edges.

    The mirrored edge makes the smoothing matrix symmetric and doubly
    stochastic, so constants stay constant and the series mean is kept.
    Every output uses the same summation order, so a constant input gives
    bitwise-equal outputs.
    """
    x = np.asarray(x, dtype=float)
    half = window // 2
    padded = np.pad(x, half, mode="symmetric")
    n = len(x)
    acc = padded[0:n].copy()
    for k in range(1, window):
        acc += padded[k:k + n]
    return acc / window


def detrend(x: np.ndarray) -> np.ndarray:
    """Residuals of the ordinary-least-squares line over the index."""
    y = np.asarray(x, dtype=float) - x[0]
    t = np.arange(len(y), dtype=float)
    tc = t - t.mean()
    slope = float(tc @ y) / float(tc @ tc)
    return y - y.mean() - slope * tc


def percentile_rank(x: np.ndarray) -> np.ndarray:
    """Average rank / n, in (0, 1]."""
    return rankdata(x, method="average") / len(x)


def preprocess(raw: SignalSeries, active: SignalSeries, trim: int = TRIM_SECONDS) -> SignalSeries:
    """Trim, normalize by active learners, smooth, detrend, rank."""
    if raw.stage is not Stage.RawCounts:
        raise ContractViolation(f"preprocess expects RawCounts, got {raw.stage.name}")
    if raw.t0 != active.t0 or len(raw.values) != len(active.values):
        raise ContractViolation("raw and active series are not aligned")
    duration = raw.t0 + len(raw.values) - 1
    if duration <= 2 * trim:
        raise VideoTooShort(f"{raw.video_id}: duration {duration}s <= {2 * trim}s")
    lo, hi = trim - raw.t0, duration - trim - raw.t0 + 1
    history = [Stage.RawCounts]
    vals = normalize(raw.values[lo:hi], active.values[lo:hi])
    history.append(Stage.Normalized)
    vals = moving_average(vals)
    history.append(Stage.Smoothed)
    vals = detrend(vals)
    history.append(Stage.Detrended)
    vals = percentile_rank(vals)
    history.append(Stage.Rank)
    return SignalSeries(raw.video_id, raw.signal, Stage.Rank, trim, vals, history)


def label_top_k(series: SignalSeries, k_percent: float) -> np.ndarray:
    """0/1 labels aligned with ``series.values``: 1 for the top K% ranks.

    A rank r/n counts as top-K when it lies strictly above the 1 - K/100
    boundary, which selects exactly ceil(n*K/100) seconds when ranks are
    distinct.
    """
    if series.stage is not Stage.Rank:
        raise ContractViolation(f"label_top_k expects Rank, got {series.stage.name}")
    n = len(series.values)
    ranks = series.values * n
    return (ranks > n * (100 - k_percent) / 100 + 1e-9).astype(np.int8)


# --------------------------------------------------------------------------
# per-video records and moments


@dataclass
class VideoSignals:
    video_id: str
    duration: int
    t0: int
    ranks: dict          # signal -> np.ndarray of rank values
    labels: dict         # (signal, K) -> np.ndarray of 0/1

    @property
    def seconds(self):
        return np.arange(self.t0, self.t0 + len(next(iter(self.ranks.values()))))


def compute_video_signals(video_id, events, duration, trim=TRIM_SECONDS, ks=(5, 10)) -> VideoSignals:
    raws, active = raw_signals(events, duration, video_id)
    ranks, labels = {}, {}
    for s in SIGNALS:
        series = preprocess(raws[s], active, trim)
        ranks[s] = series.values
        for k in ks:
            labels[(s, int(k))] = label_top_k(series, k)
    return VideoSignals(video_id, int(duration), trim, ranks, labels)


def build_signal_archive(streams: dict, durations: dict, trim=TRIM_SECONDS, ks=(5, 10)):
    """Signals for every video in ``streams`` (video_id -> events); sorted by id.

    Videos too short for the trim are skipped and returned separately.
    """
    out, skipped = [], []
    for vid in sorted(streams):
        events = streams[vid]
        if isinstance(events, dict):
            events = [e for evs in events.values() for e in evs]
        try:
            out.append(compute_video_signals(vid, events, durations[vid], trim, ks))
        except VideoTooShort:
            log.warning("skipping %s: too short", vid)
            skipped.append(vid)
    return out, skipped


def subsample_moments(video: VideoSignals, interval: int = SUBSAMPLE_INTERVAL,
                      field: str = "", course_id: str = "") -> list:
    """Moments at t0, t0+interval, ... <= D - trim, with every label attached."""
    moments = []
    n = len(next(iter(video.ranks.values())))
    for i in range(0, n, interval):
        labels = {key: int(arr[i]) for key, arr in video.labels.items()}
        moments.append(Moment(video.video_id, video.t0 + i, labels, field=field, course_id=course_id))
    return moments


def _fmt(v):
    return float(f"{v:.9g}")


def write_signal_archive(path, videos):
    with open(path, "w", encoding="utf-8") as fh:
        for v in videos:
            rec = {
                "video_id": v.video_id,
                "duration": v.duration,
                "t0": v.t0,
                "ranks": {s: [_fmt(x) for x in arr] for s, arr in v.ranks.items()},
                "labels": {f"{s}@{k}": arr.tolist() for (s, k), arr in v.labels.items()},
            }
            fh.write(json.dumps(rec, separators=(",", ":")) + "\n")


def read_signal_archive(path) -> list:
    out = []
    with open(path, "rb") as fh:
        for raw in fh:
            if not raw.strip():
                continue
            rec = json.loads(raw)
            labels = {}
            for key, vals in rec["labels"].items():
                s, k = key.split("@")
                labels[(s, int(k))] = np.asarray(vals, dtype=np.int8)
            ranks = {s: np.asarray(vals, dtype=float) for s, vals in rec["ranks"].items()}
            out.append(VideoSignals(rec["video_id"], rec["duration"], rec["t0"], ranks, labels))
    return out
