"""Course-grouped and field-holdout evaluation of the classification head."""
from __future__ import annotations

import logging
import os
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import SIGNALS, embedstore
from .errors import ContractViolation, UnknownField
from .metrics import auc, lift_at_k
from .model import Dataset, TrainConfig, load_checkpoint, predict, save_checkpoint, train
from .rng import keyed_rng
from .signals import SUBSAMPLE_INTERVAL, subsample_moments

log = logging.getLogger(__name__)

VARIANTS = {
    "full": {"weight_share": True, "use_reference": True},
    "no_share": {"weight_share": False, "use_reference": True},
    "no_reference": {"weight_share": True, "use_reference": False},
}


@dataclass
class MomentTable:
    """Columnar view of every subsampled moment joined with its metadata."""

    video_id: np.ndarray
    t: np.ndarray
    course_id: np.ndarray
    field: np.ndarray
    row: np.ndarray
    labels: dict           # (signal, K) -> int8 array
    ranks: dict            # signal -> float array

    def __len__(self):
        return len(self.t)

    def subset(self, mask) -> "MomentTable":
        return MomentTable(self.video_id[mask], self.t[mask], self.course_id[mask], self.field[mask],
                           self.row[mask], {k: v[mask] for k, v in self.labels.items()},
                           {k: v[mask] for k, v in self.ranks.items()})


def build_moment_table(videos, metas: dict, manifest, interval=SUBSAMPLE_INTERVAL) -> MomentTable:
    """Subsample every archived video and attach course, field and embedding row.

    Missing embeddings raise MomentNotEmbedded: rows are never zero-filled.
    """
    cols = {"video_id": [], "t": [], "course_id": [], "field": [], "row": []}
    labels, ranks = {}, {s: [] for s in SIGNALS}
    for v in videos:
        meta = metas[v.video_id]
        moments = subsample_moments(v, interval, meta.field, meta.course_id)
        for m in moments:
            cols["video_id"].append(m.video_id)
            cols["t"].append(m.t)
            cols["course_id"].append(m.course_id)
            cols["field"].append(m.field)
            cols["row"].append(manifest.row(m.video_id, m.t) if manifest is not None else -1)
            for key, y in m.labels.items():
                labels.setdefault(key, []).append(y)
            for s in SIGNALS:
                ranks[s].append(v.ranks[s][m.t - v.t0])
    return MomentTable(
        np.array(cols["video_id"], dtype=object), np.array(cols["t"], dtype=np.int64),
        np.array(cols["course_id"], dtype=object), np.array(cols["field"], dtype=object),
        np.array(cols["row"], dtype=np.int64),
        {k: np.array(v, dtype=np.int8) for k, v in labels.items()},
        {k: np.array(v, dtype=float) for k, v in ranks.items()},
    )


# --------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    kind: str                 # "course" or "field"
    train: frozenset
    test: frozenset
    seed: int | None = None
    field: str | None = None
    test_fraction: float | None = None

    def __post_init__(self):
        if self.train & self.test:
            raise ContractViolation(f"courses on both sides: {sorted(self.train & self.test)}")

    def test_mask(self, table: MomentTable) -> np.ndarray:
        return np.isin(table.course_id, list(self.test))


def make_split(table: MomentTable, kind="course", seed=0, field=None, test_fraction=0.10) -> SplitPlan:
    """Course-grouped random split or field holdout; courses never straddle."""
    courses, counts = np.unique(table.course_id.astype(str), return_counts=True)
    if len(courses) < 2:
        raise ContractViolation("need at least two courses to split")
    if kind == "field":
        test = set(np.unique(table.course_id[table.field == field]).astype(str))
        if not test:
            raise UnknownField(f"no courses in field {field!r}")
        if len(test) == len(courses):
            raise ContractViolation(f"field {field!r} holds every course")
        return SplitPlan("field", frozenset(set(courses) - test), frozenset(test), seed, field)
    if kind != "course":
        raise ContractViolation(f"unknown split kind {kind!r}")
    order = keyed_rng(seed, "course-split").permutation(len(courses))
    target = test_fraction * len(table)
    test, total = set(), 0
    for i in order:
        if total >= target:
            break
        test.add(courses[i])
        total += counts[i]
    if len(test) == len(courses):
        raise ContractViolation("test split consumed every course")
    return SplitPlan("course", frozenset(set(courses) - test), frozenset(test), seed, None, test_fraction)


# --------------------------------------------------------------------------
# experiments


@dataclass
class ExperimentConfig:
    signals: tuple = SIGNALS
    ks: tuple = (10, 5)
    selections: dict = field(default_factory=lambda: {"e_x": list(embedstore.DEFAULT_SELECTION)})
    split: str = "course"
    holdout_field: str | None = None
    test_fraction: float = 0.10
    seeds: tuple = (0,)
    variants: tuple = ("full",)
    train: TrainConfig = field(default_factory=TrainConfig)
    pooled_lift: bool = True


@dataclass
class MetricReport:
    selection: str
    variant: str
    signal: str
    K: int
    auc: float
    auc_std: float
    lift: float
    lift_std: float
    n_test: int
    seeds: list
    per_seed_auc: list
    per_seed_lift: list
    split: str = "course"

    def to_dict(self):
        return asdict(self)


def video_reference_matrix(X, video_ids) -> np.ndarray:
    """Per-row unweighted mean of X over rows of the same video."""
    uniq, inv = np.unique(video_ids.astype(str), return_inverse=True)
    sums = np.zeros((len(uniq), X.shape[1]))
    np.add.at(sums, inv, X)
    return (sums / np.bincount(inv, minlength=len(uniq))[:, None])[inv]


def fit_cell(table, X, split: SplitPlan, signal, k, train_cfg: TrainConfig, layout=""):
    """Train on the split's train side for one (signal, K); returns (params, log)."""
    tr = ~split.test_mask(table)
    y = table.labels[(signal, k)][tr]
    data = Dataset(X[tr], y, table.video_id[tr].astype(str), prevalence=k / 100.0)
    return train(data, train_cfg, layout)


def score_test(params, table, X, split: SplitPlan):
    te = split.test_mask(table)
    Xt = X[te]
    R = video_reference_matrix(Xt, table.video_id[te])
    return te, predict(params, Xt, R)


def per_video(table, te, scores, labels):
    out = {}
    vids = table.video_id[te].astype(str)
    ts = table.t[te]
    for vid in np.unique(vids):
        m = vids == vid
        out[vid] = (scores[m], labels[m], ts[m])
    return out


def _std(x):
    return float(np.std(x, ddof=1)) if len(x) > 1 else 0.0


def checkpoint_name(selection, variant, signal, k, seed):
    return f"{selection}-{variant}-{signal}@{k}-seed{seed}.ckpt"


def _cells(config: ExperimentConfig):
    for sel_name in config.selections:
        for variant in config.variants:
            for signal in config.signals:
                for k in config.ks:
                    yield sel_name, variant, signal, int(k)


def _trained(table, X, layout, split, sel_name, variant, signal, k, seed, config, checkpoint_dir):
    """Load the cell's checkpoint when present, otherwise train (and save)."""
    path = None
    if checkpoint_dir is not None:
        path = os.path.join(checkpoint_dir, checkpoint_name(sel_name, variant, signal, k, seed))
        if os.path.exists(path):
            return load_checkpoint(path)[0]
    cfg = replace(config.train, seed=int(seed), **VARIANTS[variant])
    params, _ = fit_cell(table, X, split, signal, k, cfg, layout)
    if path is not None:
        os.makedirs(checkpoint_dir, exist_ok=True)
        save_checkpoint(path, params, cfg, {"selection": sel_name, "variant": variant, "signal": signal,
                                            "K": k, "split": sorted(split.test)})
    return params


def train_all(table: MomentTable, manifest, config: ExperimentConfig, checkpoint_dir):
    """Train and checkpoint every cell and seed without scoring; returns paths."""
    paths = []
    for sel_name, variant, signal, k in _cells(config):
        selection = config.selections[sel_name]
        X = embedstore.assemble_rows(manifest, selection, table.row)
        layout = embedstore.layout_string(manifest, selection)
        for seed in config.seeds:
            split = make_split(table, config.split, seed, config.holdout_field, config.test_fraction)
            _trained(table, X, layout, split, sel_name, variant, signal, k, seed, config, checkpoint_dir)
            paths.append(os.path.join(checkpoint_dir, checkpoint_name(sel_name, variant, signal, k, seed)))
    return paths


def run_experiment(table: MomentTable, manifest, config: ExperimentConfig, score_sink=None,
                   checkpoint_dir=None):
    """Train and evaluate every (selection, variant, signal, K) cell over seeds.

    Models train on balanced data from the train side; metrics use the full,
    unbalanced test side. ``score_sink(record)`` receives per-moment scores.
    Checkpoints found in ``checkpoint_dir`` are reused instead of retraining.
    """
    reports = []
    cache = {}
    for sel_name, variant, signal, k in _cells(config):
        if sel_name not in cache:
            selection = config.selections[sel_name]
            cache = {sel_name: (embedstore.assemble_rows(manifest, selection, table.row),
                                embedstore.layout_string(manifest, selection))}
        X, layout = cache[sel_name]
        aucs, lifts, n_test = [], [], 0
        for seed in config.seeds:
            split = make_split(table, config.split, seed, config.holdout_field, config.test_fraction)
            params = _trained(table, X, layout, split, sel_name, variant, signal, k, seed, config,
                              checkpoint_dir)
            te, scores = score_test(params, table, X, split)
            y = table.labels[(signal, k)][te]
            aucs.append(auc(scores, y))
            lifts.append(lift_at_k(per_video(table, te, scores, y), k, config.pooled_lift))
            n_test = int(te.sum())
            if score_sink is not None:
                for vid, t, s, lab in zip(table.video_id[te], table.t[te], scores, y):
                    score_sink({"selection": sel_name, "variant": variant, "signal": signal,
                                "K": k, "seed": int(seed), "video_id": str(vid),
                                "t": int(t), "score": float(f"{s:.9g}"), "label": int(lab)})
            log.info("%s/%s %s@%d seed %s: auc=%.4f", sel_name, variant, signal, k, seed, aucs[-1])
        split_name = config.split if config.split == "course" else f"field:{config.holdout_field}"
        reports.append(MetricReport(
            sel_name, variant, signal, k, float(np.mean(aucs)), _std(aucs),
            float(np.mean(lifts)), _std(lifts), n_test, [int(s) for s in config.seeds],
            aucs, lifts, split_name,
        ))
    return reports
