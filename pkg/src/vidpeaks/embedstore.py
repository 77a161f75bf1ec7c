"""Precomputed segment embeddings: manifest + raw float32 part files.

Layout on disk::

    manifest.json   {"format", "dtype", "row_count", "parts": [{name, dim, file}], "index"}
    <part>.f32      row-major float32 little-endian, no header
    index.tsv       video_id <TAB> t <TAB> row

Parts are memory-mapped read-only, so an open manifest is safe to share.
"""
from __future__ import annotations

import json
import os
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .errors import DegenerateWeights, ManifestCorrupt, MomentNotEmbedded, UnknownPart

FORMAT = "vidpeaks-embeddings/1"
DTYPE = np.dtype("<f4")
DEFAULT_SELECTION = ("transcript", "slide", "frames_sparse", "vlm_layer_1", "vlm_layer_32", "vlm_layer_64")


@dataclass(frozen=True)
class PartSpec:
    name: str
    dim: int
    file: str


@dataclass
class EmbeddingManifest:
    root: str
    parts: list
    index: dict                      # (video_id, t) -> row
    row_count: int
    _arrays: dict = field(default_factory=dict, repr=False)

    @property
    def part_names(self):
        return [p.name for p in self.parts]

    def part(self, name) -> PartSpec:
        for p in self.parts:
            if p.name == name:
                return p
        raise UnknownPart(name)

    def array(self, name) -> np.ndarray:
        if name not in self._arrays:
            p = self.part(name)
            path = os.path.join(self.root, p.file)
            if self.row_count == 0:
                self._arrays[name] = np.zeros((0, p.dim), dtype=DTYPE)
            else:
                self._arrays[name] = np.memmap(path, dtype=DTYPE, mode="r", shape=(self.row_count, p.dim))
        return self._arrays[name]

    def rows_for_video(self, video_id) -> dict:
        """t -> row for every embedded moment of the video."""
        if not hasattr(self, "_by_video"):
            by_video = defaultdict(dict)
            for (vid, t), row in self.index.items():
                by_video[vid][t] = row
            self._by_video = {v: dict(sorted(d.items())) for v, d in by_video.items()}
        return self._by_video.get(video_id, {})

    def row(self, video_id, t) -> int:
        try:
            return self.index[(video_id, int(t))]
        except KeyError:
            raise MomentNotEmbedded(f"{video_id}@{t}") from None


def open_manifest(path) -> EmbeddingManifest:
    """Open and eagerly validate a manifest; size mismatches raise ManifestCorrupt."""
    with open(path, "r", encoding="utf-8") as fh:
        spec = json.load(fh)
    root = os.path.dirname(os.path.abspath(path))
    if spec.get("dtype", "float32-le") != "float32-le":
        raise ManifestCorrupt("manifest", f"unsupported dtype {spec.get('dtype')}")
    row_count = int(spec["row_count"])
    parts = []
    for p in spec["parts"]:
        part = PartSpec(p["name"], int(p["dim"]), p["file"])
        if part.dim <= 0:
            raise ManifestCorrupt(part.name, "non-positive dim")
        fpath = os.path.join(root, part.file)
        if not os.path.exists(fpath):
            raise ManifestCorrupt(part.name, "missing tensor file")
        expected = row_count * part.dim * DTYPE.itemsize
        actual = os.path.getsize(fpath)
        if actual != expected:
            raise ManifestCorrupt(part.name, f"{actual} bytes, expected {expected}")
        parts.append(part)
    if len({p.name for p in parts}) != len(parts):
        raise ManifestCorrupt("manifest", "duplicate part names")
    index = {}
    with open(os.path.join(root, spec["index"]), "r", encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            vid, t, row = line.rstrip("\n").split("\t")
            row = int(row)
            if not 0 <= row < row_count:
                raise ManifestCorrupt("index", f"row {row} out of range")
            index[(vid, int(t))] = row
    return EmbeddingManifest(root, parts, index, row_count)


def write_manifest(directory, parts: dict, keys: list, manifest_name="manifest.json") -> str:
    """Write ``parts`` (name -> rows x dim array, in order) for moments ``keys``."""
    os.makedirs(directory, exist_ok=True)
    rows = len(keys)
    specs = []
    for name, arr in parts.items():
        arr = np.ascontiguousarray(arr, dtype=DTYPE)
        if arr.ndim != 2 or arr.shape[0] != rows:
            raise ValueError(f"part {name}: expected {rows} rows, got shape {arr.shape}")
        fname = f"{name}.f32"
        arr.tofile(os.path.join(directory, fname))
        specs.append({"name": name, "dim": int(arr.shape[1]), "file": fname})
    with open(os.path.join(directory, "index.tsv"), "w", encoding="utf-8") as fh:
        for row, (vid, t) in enumerate(keys):
            fh.write(f"{vid}\t{int(t)}\t{row}\n")
    spec = {"format": FORMAT, "dtype": "float32-le", "row_count": rows, "parts": specs, "index": "index.tsv"}
    path = os.path.join(directory, manifest_name)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec, fh, indent=2)
    return path


def _check_selection(manifest, selection):
    if not selection:
        raise ValueError("empty part selection")
    for name in selection:
        manifest.part(name)


def layout_string(manifest, selection) -> str:
    _check_selection(manifest, selection)
    return "|".join(f"{n}:{manifest.part(n).dim}" for n in selection)


def parse_layout(layout: str) -> list:
    return [(n, int(d)) for n, d in (item.split(":") for item in layout.split("|"))]


def part_slices(layout) -> dict:
    """name -> slice of e_x, from a layout string or (name, dim) pairs."""
    if isinstance(layout, str):
        layout = parse_layout(layout)
    out, start = {}, 0
    for name, dim in layout:
        out[name] = slice(start, start + dim)
        start += dim
    return out


def assemble_rows(manifest, selection, rows) -> np.ndarray:
    """Stack e_x for several manifest rows; float64, selection order."""
    _check_selection(manifest, selection)
    rows = np.asarray(rows, dtype=np.int64)
    return np.concatenate([np.asarray(manifest.array(n)[rows], dtype=np.float64) for n in selection], axis=1)


def assemble(manifest, selection, video_id, t) -> np.ndarray:
    """e_x for one moment: the selected parts concatenated, unnormalized."""
    _check_selection(manifest, selection)
    row = manifest.row(video_id, t)
    return assemble_rows(manifest, selection, [row])[0]


def weighted_mean(X: np.ndarray, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    if np.any(w < 0) or not np.isfinite(w).all():
        raise DegenerateWeights("weights must be finite and nonnegative")
    total = w.sum()
    if total <= 0:
        raise DegenerateWeights("total weight is zero")
    return (w @ X) / total


def reference_embedding(manifest, selection, video_id, moment_weights: dict) -> np.ndarray:
    """Weighted mean of e_x over the given moments of one video."""
    ts = sorted(moment_weights)
    rows = [manifest.row(video_id, t) for t in ts]
    X = assemble_rows(manifest, selection, rows)
    return weighted_mean(X, [moment_weights[t] for t in ts])


def prevalence_weights(labels: dict, k_percent: float) -> dict:
    """Balanced-set weights: K/100 for positives, 1 - K/100 for the rest."""
    p = k_percent / 100.0
    return {t: (p if y else 1.0 - p) for t, y in labels.items()}
