"""Ranking metrics: exact AUC and per-video Lift@K%."""
from __future__ import annotations

import logging
import math

import numpy as np
from scipy.stats import rankdata

from .errors import Undefined

log = logging.getLogger(__name__)


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: P(s+ > s-) + 0.5 P(s+ == s-), exact via average ranks."""
    s = np.asarray(scores, dtype=float)
    y = np.asarray(labels).astype(bool)
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise Undefined("AUC needs both classes")
    ranks = rankdata(s, method="average")
    u = ranks[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def top_k_count(n: int, k_percent: float) -> int:
    """ceil(K% * n) without float round-up artefacts."""
    return max(math.ceil(k_percent * n / 100.0 - 1e-9), 0)


def select_top_k(scores, ts, k_percent) -> np.ndarray:
    """Indices of the top ceil(K% n) scores; ties go to the earlier second."""
    scores = np.asarray(scores, dtype=float)
    m = top_k_count(len(scores), k_percent)
    order = np.lexsort((np.asarray(ts), -scores))
    return order[:m]


def lift_at_k(per_video: dict, k_percent: float, pooled: bool = True) -> float:
    """Precision of per-video top-K% selections divided by K/100.

    ``per_video`` maps video_id -> (scores, labels, ts). With ``pooled`` the
    selected moments of all videos form one precision; otherwise per-video
    precisions are averaged.
    """
    hits = picked = 0
    precisions = []
    for vid in sorted(per_video):
        scores, labels, ts = per_video[vid]
        if len(scores) == 0:
            log.warning("lift_at_k: video %s has no moments, skipped", vid)
            continue
        idx = select_top_k(scores, ts, k_percent)
        h = int(np.asarray(labels)[idx].sum())
        hits += h
        picked += len(idx)
        precisions.append(h / len(idx))
    if picked == 0:
        raise Undefined("no moments to rank")
    precision = hits / picked if pooled else float(np.mean(precisions))
    return precision / (k_percent / 100.0)
