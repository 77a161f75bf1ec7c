"""Glue between stages: event files -> canonical streams -> signal archive."""
from __future__ import annotations

from dataclasses import dataclass

from .events import (IngestReport, SchemaConfig, canonicalize, dedupe_videos, group_streams,
                     parse_event_shards, read_video_meta)
from .signals import TRIM_SECONDS, build_signal_archive


@dataclass
class Ingested:
    streams: dict          # canonical video_id -> user_id -> events
    report: IngestReport
    canonical: dict        # video_id -> canonical video_id
    metas: dict            # video_id -> VideoMeta (every id, duplicates included)

    @property
    def durations(self):
        return {v: m.duration for v, m in self.metas.items()}


def ingest(event_paths, videos_path) -> Ingested:
    """Parse event shards, drop bad lines, fold duplicate uploads together."""
    if isinstance(event_paths, str):
        event_paths = [event_paths]
    metas = {m.video_id: m for m in read_video_meta(videos_path)}
    schema = SchemaConfig(durations={v: m.duration for v, m in metas.items()})
    handles = [open(p, "rb") for p in event_paths]
    try:
        events, report = parse_event_shards([h.read() for h in handles], schema)
    finally:
        for h in handles:
            h.close()
    canonical = dedupe_videos(metas.values())
    events = canonicalize(events, canonical)
    events.sort(key=lambda e: (e.user_id, e.wall_time))
    return Ingested(group_streams(events), report, canonical, metas)


def compute_signals(ing: Ingested, trim=TRIM_SECONDS, ks=(5, 10)):
    """Signal archive for every canonical video with events; returns (videos, skipped)."""
    return build_signal_archive(ing.streams, ing.durations, trim, ks)
