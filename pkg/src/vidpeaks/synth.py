"""Seeded synthetic corpus with planted concepts, learners and embeddings.

Each video carries per-second tracks for the 15 CTML features. Learners
watch with per-second Bernoulli hazards for pausing, rewinding, skipping and
dropping out; active features scale those hazards multiplicatively. Moment
embeddings mix the feature vector at t linearly per part and add noise.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from .ctml import FEATURES, ORDINAL, RUBRIC, Coder, CTMLRecord, write_ctml
from .embedstore import write_manifest
from .events import Event, Kind, VideoMeta, event_to_record, write_video_meta
from .rng import keyed_rng
from .signals import SUBSAMPLE_INTERVAL, TRIM_SECONDS

log = logging.getLogger(__name__)

# feature -> (mean episode length s, fraction of time active); ordinals use
# the first entry as mean segment length
TRACK_SHAPES = {
    "formula": (25, 0.25), "instructor": (40, 0.30), "screen": (40, 0.10),
    "structured_viz": (25, 0.20), "text_object": (30, 0.40), "visual_complexity": (25, None),
    "annotating": (12, 0.12), "animation_video": (12, 0.08), "photo": (15, 0.10),
    "showing": (8, 0.10), "visual_breakpoint": (6, 0.08), "signaling": (6, 0.08),
    "interactivity": (8, 0.06), "semantic_breakpoint": (6, 0.06), "redundancy": (30, None),
}
ORDINAL_PROBS = (0.15, 0.25, 0.30, 0.20, 0.10)

DEFAULT_PAUSE = {"visual_breakpoint": 1.6, "formula": 0.8, "annotating": 0.9,
                 "visual_complexity": 1.0, "instructor": -0.6, "photo": -0.5}
DEFAULT_REWIND = {"visual_breakpoint": 1.2, "semantic_breakpoint": 1.0, "formula": 0.6, "interactivity": 0.6}
DEFAULT_SKIP = {"photo": 0.7, "instructor": 0.5, "animation_video": 0.4}

_FRAME = [f for f in FEATURES if "frame" in RUBRIC[f][1]]
_VISUAL = [f for f in FEATURES if {"frame", "frames"} & set(RUBRIC[f][1])]
_SPOKEN = [f for f in FEATURES if "transcript" in RUBRIC[f][1]]

# part -> (dim, carried features, mixing gain)
DEFAULT_PARTS = {
    "transcript": (16, _SPOKEN, 1.0),
    "slide": (16, ["formula", "text_object", "structured_viz", "visual_complexity"], 1.0),
    "frames_sparse": (24, _VISUAL, 1.0),
    "vlm_layer_1": (16, _FRAME, 0.7),
    "vlm_layer_32": (24, list(FEATURES), 1.0),
    "vlm_layer_64": (24, list(FEATURES), 0.8),
}


@dataclass
class SynthConfig:
    n_videos: int = 200
    duration_range: tuple = (180, 420)
    n_learners: int = 500                # per course
    n_courses: int = 12
    fields: tuple = ("Mathematics", "Physics", "Neuroscience")
    runs_per_course: int = 2
    watch_prob: float = 0.6
    pause_effects: dict = field(default_factory=lambda: dict(DEFAULT_PAUSE))
    rewind_effects: dict = field(default_factory=lambda: dict(DEFAULT_REWIND))
    skip_effects: dict = field(default_factory=lambda: dict(DEFAULT_SKIP))
    pause_rate: float = 0.006            # per viewer-second at zero effects
    rewind_rate: float = 0.002
    skip_rate: float = 0.0015
    dropout_rate: float = 0.0015
    rate_change_rate: float = 0.0003
    parts: dict = field(default_factory=lambda: {k: (d, list(c), g) for k, (d, c, g) in DEFAULT_PARTS.items()})
    noise_scale: float = 1.0
    style_scale: float = 1.0             # per-video offset removed by the reference embedding
    shift_field: str | None = None       # this field draws its own mixing for shift_parts
    shift_parts: tuple = ("vlm_layer_1", "vlm_layer_32", "vlm_layer_64")
    hotspot_multiplier: float = 0.0      # >0 plants one pause hotspot per video
    corruption_rate: float = 0.0
    n_duplicate_pairs: int = 0
    n_coded: int = 1500
    machine_flip: float = 0.05
    seed: int = 0

    def __post_init__(self):
        lo, hi = self.duration_range
        if lo <= 120 or hi < lo:
            raise ValueError("durations must exceed 120 s")
        for eff in (self.pause_effects, self.rewind_effects, self.skip_effects):
            for c, v in eff.items():
                if c not in RUBRIC or not math.isfinite(v):
                    raise ValueError(f"bad effect {c}={v}")
        if self.n_duplicate_pairs * 2 > self.n_videos:
            raise ValueError("too many duplicate pairs")
        if self.n_courses > self.n_videos - self.n_duplicate_pairs:
            raise ValueError("every course needs a video")
        if not 0 <= self.corruption_rate < 1:
            raise ValueError("corruption_rate outside [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["duration_range"] = list(self.duration_range)
        d["fields"] = list(self.fields)
        d["shift_parts"] = list(self.shift_parts)
        d["parts"] = {k: [v[0], list(v[1]), v[2]] for k, v in self.parts.items()}
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for key in ("duration_range", "fields", "shift_parts"):
            if key in d:
                d[key] = tuple(d[key])
        if "parts" in d:
            d["parts"] = {k: (int(v[0]), list(v[1]), float(v[2])) for k, v in d["parts"].items()}
        return cls(**d)


@dataclass
class GroundTruth:
    tracks: dict                 # video_id -> (D+1, 15) int array, rubric order
    sessions: dict               # (user_id, video_id) -> list of (a, b) true intervals
    pause_intensity: dict        # video_id -> per-second expected pauses per viewer
    rewind_attraction: dict      # video_id -> per-second rewind destination weight
    skip_intensity: dict
    duplicates: list             # (canonical_id, duplicate_id)
    corruption_lines: list       # 0-based line numbers of injected bad lines
    hotspots: dict               # video_id -> planted pause hotspot second
    carriers: dict               # feature -> parts whose mixing includes it
    n_lines: int = 0
    primary: dict = field(default_factory=dict)   # feature -> strongest carrier part
    event_counts: dict = field(default_factory=dict)  # emitted events by kind

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        vids = sorted(self.tracks)
        arrays = {}
        for i, v in enumerate(vids):
            arrays[f"track_{i}"] = self.tracks[v]
            arrays[f"pause_{i}"] = self.pause_intensity[v]
            arrays[f"rewind_{i}"] = self.rewind_attraction[v]
            arrays[f"skip_{i}"] = self.skip_intensity[v]
        with open(os.path.join(directory, "series.npz"), "wb") as fh:
            np.savez(fh, **arrays)
        meta = {
            "videos": vids,
            "sessions": [[u, v, [[a, b] for a, b in iv]] for (u, v), iv in sorted(self.sessions.items())],
            "duplicates": [list(p) for p in self.duplicates],
            "corruption_lines": list(self.corruption_lines),
            "hotspots": self.hotspots,
            "carriers": self.carriers,
            "n_lines": self.n_lines,
            "primary": self.primary,
            "event_counts": self.event_counts,
        }
        with open(os.path.join(directory, "ground_truth.json"), "w", encoding="utf-8") as fh:
            json.dump(meta, fh, separators=(",", ":"))

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "ground_truth.json"), encoding="utf-8") as fh:
            meta = json.load(fh)
        with np.load(os.path.join(directory, "series.npz")) as z:
            vids = meta["videos"]
            get = lambda p: {v: z[f"{p}_{i}"] for i, v in enumerate(vids)}
            tracks, pause, rewind, skip = get("track"), get("pause"), get("rewind"), get("skip")
        sessions = {(u, v): [tuple(x) for x in iv] for u, v, iv in meta["sessions"]}
        return cls(tracks, sessions, pause, rewind, skip, [tuple(p) for p in meta["duplicates"]],
                   meta["corruption_lines"], meta["hotspots"], meta["carriers"], meta["n_lines"], meta.get("primary", {}),
                   meta.get("event_counts", {}))


@dataclass
class SynthOutput:
    directory: str
    events: str
    videos: str
    manifest: str
    ctml_adjudicated: str
    ctml_machine: str
    ground_truth: str
    truth: GroundTruth


# --------------------------------------------------------------------------
# tracks and hazards


def concept_track(rng, feature, duration) -> np.ndarray:
    """Piecewise-constant track over seconds 0..D for one feature."""
    n = duration + 1
    out = np.zeros(n, dtype=np.int64)
    mean_len, frac = TRACK_SHAPES[feature]
    t = 0
    if feature in ORDINAL:
        while t < n:
            length = max(1, int(round(rng.exponential(mean_len))))
            out[t:t + length] = rng.choice(5, p=ORDINAL_PROBS) + 1
            t += length
        return out
    off_mean = mean_len * (1 - frac) / frac
    on = rng.random() < frac
    while t < n:
        length = max(2 if on else 1, int(round(rng.exponential(mean_len if on else off_mean))))
        if on:
            out[t:t + length] = 1
        t += length
        on = not on
    return out


def scaled(track: np.ndarray) -> np.ndarray:
    """Track matrix (n, 15) -> feature vectors with ordinals mapped to [0, 1]."""
    out = track.astype(float)
    for i, f in enumerate(FEATURES):
        if f in ORDINAL:
            out[:, i] = (out[:, i] - 1) / 4.0
    return out


def log_effect(track: np.ndarray, effects: dict) -> np.ndarray:
    beta = np.array([effects.get(f, 0.0) for f in FEATURES])
    return scaled(track) @ beta


def expected_intensities(track, config: SynthConfig, hotspot=None):
    """Per-second hazards (pause, rewind attraction, skip) implied by a track."""
    pause = config.pause_rate * np.exp(log_effect(track, config.pause_effects))
    if hotspot is not None:
        pause[hotspot] *= config.hotspot_multiplier
    rewind = np.exp(log_effect(track, config.rewind_effects))
    skip = config.skip_rate * np.exp(log_effect(track, config.skip_effects))
    return pause, rewind, skip


# --------------------------------------------------------------------------
# learner simulation


def _jitter(rng, size=None):
    return rng.uniform(-0.45, 0.45, size)


def simulate_video(rng, video_id, duration, viewers, pause, rewind, skip, config: SynthConfig,
                   start_times):
    """Simulate every viewer of one video tick by tick.

    ``viewers`` is a list of (user_id, course_run_id). Returns (events,
    true intervals per user). Positions are integer seconds between events;
    event positions carry sub-second jitter that rounds back to the second.
    """
    n = len(viewers)
    D = duration
    pos = np.zeros(n, dtype=np.int64)
    wall = np.asarray(start_times, dtype=np.int64).copy()
    alive = np.ones(n, dtype=bool)
    start = np.zeros(n)                 # open interval start (always playing)
    intervals = [[] for _ in range(n)]
    events = [[] for _ in range(n)]
    for i, (u, run) in enumerate(viewers):
        events[i].append(Event(u, video_id, run, int(wall[i]), Kind.Play, 0.0))
    h_drop, h_rate, h_rew = config.dropout_rate, config.rate_change_rate, config.rewind_rate
    max_ticks = 4 * D
    for _ in range(max_ticks):
        idx = np.flatnonzero(alive)
        if len(idx) == 0:
            break
        p = pos[idx]
        hz = np.stack([np.full(len(idx), h_drop), pause[p], np.where(p >= 3, h_rew, 0.0),
                       skip[p], np.full(len(idx), h_rate)], axis=1)
        cum = np.cumsum(hz, axis=1)
        u = rng.random(len(idx))
        kind = np.where(u < cum[:, -1], np.argmax(u[:, None] < cum, axis=1), -1)
        x = np.clip(p + _jitter(rng, len(idx)), 0.0, float(D))
        offs = rng.integers(50, 950, len(idx))
        nxt = p + 1
        for j in np.flatnonzero(kind >= 0):
            i = idx[j]
            u_id, run = viewers[i]
            ts = int(wall[i] + offs[j])
            xi = round(float(x[j]), 3)
            k = kind[j]
            if k == 0:                                   # drop out
                events[i].append(Event(u_id, video_id, run, ts, Kind.Pause, xi))
                intervals[i].append((start[i], xi))
                alive[i] = False
            elif k == 1:                                 # pause, then resume in place
                delay = int(rng.integers(1_000, 60_000))
                events[i].append(Event(u_id, video_id, run, ts, Kind.Pause, xi))
                events[i].append(Event(u_id, video_id, run, ts + delay, Kind.Play, xi))
                intervals[i].append((start[i], xi))
                start[i] = xi
                wall[i] += delay
            elif k == 2:                                 # rewind to an attractive earlier second
                s = int(p[j])
                lo = max(0, s - 30)
                cand = np.arange(lo, s - 1)
                w = rewind[cand]
                dest = int(rng.choice(cand, p=w / w.sum()))
                to = round(max(0.0, dest + float(_jitter(rng))), 3)
                if to >= xi:
                    continue
                events[i].append(Event(u_id, video_id, run, ts, Kind.SeekBackward, xi, to))
                intervals[i].append((start[i], xi))
                start[i] = to
                nxt[j] = dest + 1
            elif k == 3:                                 # skip ahead
                target = int(p[j]) + int(rng.integers(10, 61))
                to = round(min(float(D), target + float(_jitter(rng))), 3)
                if to <= xi:
                    continue
                events[i].append(Event(u_id, video_id, run, ts, Kind.SeekForward, xi, to))
                intervals[i].append((start[i], xi))
                start[i] = to
                nxt[j] = target + 1
            else:
                events[i].append(Event(u_id, video_id, run, ts, Kind.RateChange, xi, rate=1.5))
        pos[idx] = nxt
        wall[idx] += 1000
        done = idx[alive[idx] & (pos[idx] >= D)]
        for i in done:
            intervals[i].append((start[i], float(D)))
        alive[done] = False
    for i in np.flatnonzero(alive):              # tick cap reached: stop where they are
        u_id, run = viewers[i]
        x = float(min(pos[i], D))
        events[i].append(Event(u_id, video_id, run, int(wall[i]), Kind.Pause, x))
        intervals[i].append((start[i], x))
    truth = {viewers[i][0]: [(float(a), float(b)) for a, b in intervals[i] if b > a] for i in range(n)}
    return [e for evs in events for e in evs], truth


# --------------------------------------------------------------------------
# corruption


def corrupt_line(rng, record: dict) -> bytes:
    """One line the ingester must reject, derived from a valid record."""
    rec = dict(record)
    mode = int(rng.integers(5))
    if mode == 0:
        text = json.dumps(rec, separators=(",", ":"))
        return text[: max(1, len(text) // 2)].encode()
    if mode == 1:
        rec.pop("ts_ms")
    elif mode == 2:
        rec["kind"] = "scrub"
    elif mode == 3:
        rec["pos"] = "n/a"
    else:
        rec["kind"] = "seek"
        rec["to_pos"] = rec["pos"]
    return json.dumps(rec, separators=(",", ":")).encode()


def inject_corruption(rng, lines: list, rate: float):
    """Insert round(rate * N / (1 - rate)) bad lines; returns (lines, their indices)."""
    n_bad = int(round(rate * len(lines) / (1 - rate))) if rate > 0 else 0
    if n_bad == 0:
        return list(lines), []
    total = len(lines) + n_bad
    bad = np.sort(rng.choice(total, size=n_bad, replace=False))
    out, src = [], iter(lines)
    bad_set = set(bad.tolist())
    for i in range(total):
        if i in bad_set:
            donor = json.loads(lines[int(rng.integers(len(lines)))])
            out.append(corrupt_line(rng, donor))
        else:
            out.append(next(src))
    return out, bad.tolist()


# --------------------------------------------------------------------------
# generation


def _mixing(rng, config: SynthConfig):
    mats = {}
    for name, (dim, carried, gain) in config.parts.items():
        M = rng.normal(0.0, gain, size=(dim, len(FEATURES)))
        keep = np.array([f in carried for f in FEATURES])
        M[:, ~keep] = 0.0
        mats[name] = M
    return mats


def primary_carrier(config: SynthConfig, feature):
    """Carrier part with the largest mixing gain, then the most dims; first wins ties."""
    best = None
    for name, (dim, carried, gain) in config.parts.items():
        if feature in carried and (best is None or (gain, dim) > best[0]):
            best = ((gain, dim), name)
    return None if best is None else best[1]


def _checksum(seed, i):
    return hashlib.sha256(f"{seed}:{i}".encode()).hexdigest()[:16]


def _machine_copy(rng, rec: CTMLRecord, flip) -> CTMLRecord:
    vals = rec.values()
    for f in FEATURES:
        if rng.random() < flip:
            if f in ORDINAL:
                v = vals[f] + (1 if rng.random() < 0.5 else -1)
                vals[f] = min(5, max(1, v))
            else:
                vals[f] = 1 - vals[f]
    return CTMLRecord(rec.video_id, rec.t, coder=Coder.Machine, **vals)


def generate(config: SynthConfig, out_dir) -> SynthOutput:
    """Write a complete corpus to ``out_dir``; a pure function of ``config``."""
    os.makedirs(out_dir, exist_ok=True)
    seed = config.seed
    n_unique = config.n_videos - config.n_duplicate_pairs
    courses = [f"c{j:02d}" for j in range(config.n_courses)]
    course_field = {c: config.fields[j % len(config.fields)] for j, c in enumerate(courses)}
    runs = {c: [f"{c}-r{r + 1}" for r in range(config.runs_per_course)] for c in courses}

    mix = _mixing(keyed_rng(seed, "mixing"), config)
    shifted = _mixing(keyed_rng(seed, "mixing", "shifted"), config) if config.shift_field else {}

    # videos: unique contents first, then duplicates re-uploaded in another course
    lo, hi = config.duration_range
    metas, content_of = [], {}
    for i in range(n_unique):
        r = keyed_rng(seed, "meta", i)
        D = int(r.integers(lo, hi + 1))
        c = courses[i % len(courses)]
        metas.append(VideoMeta(f"v{i:04d}", D, _checksum(seed, i), course_field[c], c, tuple(runs[c])))
        content_of[metas[-1].video_id] = i
    dup_rng = keyed_rng(seed, "duplicates")
    originals = dup_rng.choice(n_unique, size=config.n_duplicate_pairs, replace=False) if config.n_duplicate_pairs else []
    duplicates = []
    for j, i in enumerate(sorted(int(x) for x in originals)):
        src = metas[i]
        others = [c for c in courses if c != src.course_id]
        c = others[int(dup_rng.integers(len(others)))]
        vid = f"vd{i:04d}"
        metas.append(VideoMeta(vid, src.duration, src.content_checksum, course_field[c], c, tuple(runs[c])))
        content_of[vid] = i
        duplicates.append((src.video_id, vid))

    # learners belong to one course run
    roster = {}
    for c in courses:
        r = keyed_rng(seed, "roster", c)
        assign = r.integers(config.runs_per_course, size=config.n_learners)
        roster[c] = [(f"u{c}-{k:04d}", runs[c][a]) for k, a in enumerate(assign)]

    tracks, pause_s, rewind_s, skip_s, hotspots = {}, {}, {}, {}, {}
    for i in range(n_unique):
        meta = metas[i]
        r = keyed_rng(seed, "track", i)
        tr = np.stack([concept_track(r, f, meta.duration) for f in FEATURES], axis=1)
        hs = None
        if config.hotspot_multiplier > 0:
            hs = int(r.integers(TRIM_SECONDS + 5, meta.duration - TRIM_SECONDS - 5))
            hotspots[meta.video_id] = hs
        tracks[meta.video_id] = tr
        pause_s[meta.video_id], rewind_s[meta.video_id], skip_s[meta.video_id] = expected_intensities(tr, config, hs)

    lines, sessions, counts = [], {}, {}
    for vi, meta in enumerate(metas):
        src_id = metas[content_of[meta.video_id]].video_id
        r = keyed_rng(seed, "viewers", meta.video_id)
        pool = roster[meta.course_id]
        viewers = [pool[k] for k in np.flatnonzero(r.random(len(pool)) < config.watch_prob)]
        if not viewers:
            continue
        starts = 1_600_000_000_000 + r.integers(0, 30 * 86_400_000, len(viewers))
        evs, truth = simulate_video(keyed_rng(seed, "behavior", meta.video_id), meta.video_id, meta.duration,
                                    viewers, pause_s[src_id], rewind_s[src_id], skip_s[src_id], config, starts)
        for e in evs:
            counts[e.kind.value] = counts.get(e.kind.value, 0) + 1
            lines.append(json.dumps(event_to_record(e), separators=(",", ":")).encode())
        for u, iv in truth.items():
            sessions[(u, meta.video_id)] = iv

    lines, bad = inject_corruption(keyed_rng(seed, "corrupt"), lines, config.corruption_rate)
    events_path = os.path.join(out_dir, "events.jsonl")
    with open(events_path, "wb") as fh:
        for ln in lines:
            fh.write(ln + b"\n")
    videos_path = os.path.join(out_dir, "videos.jsonl")
    write_video_meta(videos_path, metas)

    # embeddings for every subsampled moment of the canonical videos
    keys, feats, style_rows, mix_rows = [], [], [], []
    for i in range(n_unique):
        meta = metas[i]
        ts = list(range(TRIM_SECONDS, meta.duration - TRIM_SECONDS + 1, SUBSAMPLE_INTERVAL))
        keys.extend((meta.video_id, t) for t in ts)
        feats.append(scaled(tracks[meta.video_id][ts]))
        style_rows.extend([i] * len(ts))
        mix_rows.extend([meta.field == config.shift_field] * len(ts))
    F = np.concatenate(feats)
    style_rows = np.array(style_rows)
    use_shift = np.array(mix_rows, dtype=bool)
    parts = {}
    for name, (dim, _, _) in config.parts.items():
        r = keyed_rng(seed, "embed", name)
        style = r.normal(0.0, config.style_scale, size=(n_unique, dim))
        E = F @ mix[name].T
        if name in shifted and name in config.shift_parts:
            E[use_shift] = F[use_shift] @ shifted[name].T
        E += style[style_rows] + r.normal(0.0, config.noise_scale, size=E.shape)
        parts[name] = E
    manifest_path = write_manifest(os.path.join(out_dir, "embeddings"), parts, keys)

    # concept codings for a sample of embedded moments
    r = keyed_rng(seed, "coding")
    pick = np.sort(r.choice(len(keys), size=min(config.n_coded, len(keys)), replace=False))
    adjudicated, machine = [], []
    for k in pick:
        vid, t = keys[k]
        vals = {f: int(tracks[vid][t, j]) for j, f in enumerate(FEATURES)}
        rec = CTMLRecord(vid, int(t), coder=Coder.Adjudicated, **vals)
        adjudicated.append(rec)
        machine.append(_machine_copy(r, rec, config.machine_flip))
    adj_path = os.path.join(out_dir, "ctml_adjudicated.jsonl")
    mach_path = os.path.join(out_dir, "ctml_machine.jsonl")
    write_ctml(adj_path, adjudicated)
    write_ctml(mach_path, machine)

    carriers = {f: [p for p, (_, carried, _) in config.parts.items() if f in carried] for f in FEATURES}
    primary = {f: primary_carrier(config, f) for f in FEATURES}
    truth = GroundTruth(tracks, sessions, pause_s, rewind_s, skip_s, duplicates, bad, hotspots,
                        carriers, len(lines), primary, dict(sorted(counts.items())))
    gt_dir = os.path.join(out_dir, "ground_truth")
    truth.save(gt_dir)
    with open(os.path.join(out_dir, "synth_config.json"), "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
    log.info("synth: %d videos, %d event lines, %d moments", len(metas), len(lines), len(keys))
    return SynthOutput(out_dir, events_path, videos_path, manifest_path, adj_path, mach_path, gt_dir, truth)


# --------------------------------------------------------------------------
# conformance against ground truth


@dataclass
class Check:
    name: str
    passed: bool
    value: float | None = None
    threshold: float | None = None
    reason: str = ""


@dataclass
class ConformanceReport:
    checks: list

    @property
    def passed(self):
        return bool(self.checks) and all(c.passed for c in self.checks)

    def by_name(self):
        return {c.name: c for c in self.checks}

    def lines(self):
        return [f"{'PASS' if c.passed else 'FAIL'} {c.name}: {c.reason}" for c in self.checks]


def _point_biserial(labels, x):
    labels = np.asarray(labels, dtype=float)
    x = np.asarray(x, dtype=float)
    if labels.std() == 0 or x.std() == 0:
        return float("nan")
    return float(np.corrcoef(labels, x)[0, 1])


def oracle_metrics(truth: GroundTruth, outputs: dict, k_percent=5,
                   concept="visual_breakpoint") -> ConformanceReport:
    """Compare pipeline outputs against the planted ground truth.

    ``outputs`` may hold ``streams`` (video -> user -> events), ``report``
    (IngestReport), ``signals`` (list of VideoSignals) and ``raw_pause``
    (video -> raw PausedAt counts), plus optional ``durations`` and
    ``canonical`` (video_id -> canonical id). Missing entries fail by name.
    """
    from .signals import reconstruct_playback

    checks = []
    streams = outputs.get("streams")
    if not streams:
        checks.append(Check("intervals", False, reason="missing output: streams"))
    else:
        worst, n = 0.0, 0
        durations = outputs.get("durations", {})
        canonical = outputs.get("canonical", {})
        for (u, v), true_iv in truth.sessions.items():
            evs = streams.get(canonical.get(v, v), {}).get(u)
            if evs is None:
                worst = max(worst, sum(b - a for a, b in true_iv))
                n += 1
                continue
            D = durations.get(v, max((b for _, b in true_iv), default=0.0))
            got = reconstruct_playback(evs, D)
            worst = max(worst, abs(sum(b - a for a, b in got) - sum(b - a for a, b in true_iv)))
            n += 1
        checks.append(Check("intervals", n > 0 and worst <= 1.0, worst, 1.0,
                            f"max per-session watch-time error {worst:.3f}s over {n} sessions"))

    report = outputs.get("report")
    if report is None:
        checks.append(Check("corruption", False, reason="missing output: report"))
    else:
        want = len(truth.corruption_lines)
        ok = report.dropped_total == want and sorted(report.dropped_lines) == sorted(truth.corruption_lines)
        checks.append(Check("corruption", ok, report.dropped_total, want,
                            f"dropped {report.dropped_total}, planted {want}"))

    signals = outputs.get("signals")
    if not signals:
        checks.append(Check("label_concept", False, reason="missing output: signals"))
    else:
        j = FEATURES.index(concept)
        labs, xs = [], []
        for vs in signals:
            if vs.video_id not in truth.tracks:
                continue
            lab = vs.labels.get(("PausedAt", k_percent))
            if lab is None:
                continue
            secs = np.arange(vs.t0, vs.t0 + len(lab))
            labs.append(lab)
            xs.append(truth.tracks[vs.video_id][secs, j])
        r = _point_biserial(np.concatenate(labs), np.concatenate(xs)) if labs else float("nan")
        checks.append(Check("label_concept", bool(r >= 0.3), r, 0.3,
                            f"point-biserial r between PausedAt@{k_percent} and {concept}: {r:.3f}"))

    if truth.hotspots:
        raw = outputs.get("raw_pause")
        if not raw:
            checks.append(Check("hotspots", False, reason="missing output: raw_pause"))
        else:
            hits = [int(np.argmax(raw[v]) == t) for v, t in truth.hotspots.items() if v in raw]
            rate = float(np.mean(hits)) if hits else 0.0
            checks.append(Check("hotspots", rate >= 0.95, rate, 0.95,
                                f"argmax recovers the hotspot in {rate:.1%} of {len(hits)} videos"))
    return ConformanceReport(checks)

