"""Concept activation vectors and TCAV scores for the classification head."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.special import expit

from . import embedstore
from .ctml import FEATURES, ORDINAL
from .errors import ContractViolation, DegenerateConcept, Undefined
from .metrics import auc
from .model import HeadParams, grad_wrt_activation, h1_activations, predict
from .rng import keyed_rng

log = logging.getLogger(__name__)

L2_GRID = (1e-3, 1e-2, 1e-1, 1.0, 10.0, 1e2)
REPETITIONS = 25
ALPHA = 0.05
N_COMPARISONS = 150
MIN_EXAMPLES = 20


@dataclass
class CAV:
    layer: str
    concept: str
    direction: np.ndarray
    kind: str                 # "binary" (logistic) or "ordinal" (linear)
    l2: float
    fit_quality: float        # held-out AUC, or 1 - MSE/MSE(mean) for ordinal
    intercept: float = 0.0
    iterations: int = 0


# --------------------------------------------------------------------------
# regularised linear fits; penalty 0.5 * l2 * |w|^2 on a summed loss,
# intercept unpenalised


def _design(X):
    return np.hstack([X, np.ones((len(X), 1))])


def _penalty(d, l2):
    pen = np.full(d + 1, float(l2))
    pen[-1] = 1e-12
    return pen


def _logistic_grad(Z, y, theta, pen):
    p = expit(Z @ theta)
    return Z.T @ (p - y) + pen * theta, p


def _logistic_obj(Z, y, theta, pen):
    s = Z @ theta
    return float(np.sum(np.logaddexp(0.0, s) - y * s) + 0.5 * pen @ (theta * theta))


def fit_logistic(X, y, l2, solver="newton", tol=1e-8, max_iter=10_000, theta0=None):
    """Return (theta, iterations); theta = [w..., b]."""
    Z = _design(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    pen = _penalty(X.shape[1], l2)
    theta = np.zeros(Z.shape[1]) if theta0 is None else theta0.copy()
    if solver == "gd":
        lip = 0.25 * np.linalg.eigvalsh(Z.T @ Z)[-1] + pen.max()
        for it in range(max_iter):
            g, _ = _logistic_grad(Z, y, theta, pen)
            if np.linalg.norm(g) < tol:
                return theta, it
            theta -= g / lip
        return theta, max_iter
    if solver != "newton":
        raise ContractViolation(f"unknown solver {solver!r}")
    obj = _logistic_obj(Z, y, theta, pen)
    for it in range(max_iter):
        g, p = _logistic_grad(Z, y, theta, pen)
        if np.linalg.norm(g) < tol:
            return theta, it
        wts = p * (1 - p)
        H = (Z * wts[:, None]).T @ Z + np.diag(pen)
        step = np.linalg.solve(H, g)
        # backtracking keeps Newton monotone far from the optimum
        lr = 1.0
        while True:
            cand = theta - lr * step
            new = _logistic_obj(Z, y, cand, pen)
            if new <= obj + 1e-4 * lr * (g @ -step) or lr < 1e-10:
                break
            lr *= 0.5
        if lr < 1e-10:
            return theta, it
        # float precision floor: the summed gradient can stall above tol
        stalled = obj - new <= 1e-15 * max(1.0, abs(obj))
        theta, obj = cand, new
        if stalled:
            return theta, it + 1
    return theta, max_iter


def fit_ridge(X, y, l2, solver="newton", tol=1e-8, max_iter=10_000):
    """Ridge regression on y (already centred); returns (theta, iterations)."""
    Z = _design(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    pen = _penalty(X.shape[1], l2)
    if solver == "gd":
        lip = np.linalg.eigvalsh(Z.T @ Z)[-1] + pen.max()
        theta = np.zeros(Z.shape[1])
        for it in range(max_iter):
            g = Z.T @ (Z @ theta - y) + pen * theta
            if np.linalg.norm(g) < tol:
                return theta, it
            theta -= g / lip
        return theta, max_iter
    # the objective is quadratic: one Newton step is exact
    theta = np.linalg.solve(Z.T @ Z + np.diag(pen), Z.T @ y)
    return theta, 1


def _split(n, y, kind, seed, test_fraction=0.2):
    rng = keyed_rng(seed, "cav-split")
    if kind == "binary":
        test = []
        for cls in (0, 1):
            idx = np.flatnonzero(y == cls)
            k = max(1, int(round(test_fraction * len(idx))))
            test.extend(rng.choice(idx, size=min(k, len(idx) - 1), replace=False))
        test = np.sort(np.asarray(test, dtype=int))
    else:
        test = np.sort(rng.choice(n, size=max(1, int(round(test_fraction * n))), replace=False))
    mask = np.zeros(n, dtype=bool)
    mask[test] = True
    return np.flatnonzero(~mask), test


def _quality(kind, theta, X, y, y_train_mean):
    s = X @ theta[:-1] + theta[-1]
    if kind == "binary":
        try:
            return auc(s, y)
        except Undefined:
            return float("nan")
    base = np.mean((y - y_train_mean) ** 2)
    if base == 0:
        return float("nan")
    return float(1.0 - np.mean((y - y_train_mean - s) ** 2) / base)


def train_cav(activations, concept_values, kind="binary", l2_grid=L2_GRID, seed=0,
              layer="", concept="", solver="newton") -> CAV:
    """Fit a concept direction with l2 chosen on an internal 80/20 split.

    Binary concepts use L2 logistic regression; ordinal ones ridge
    regression on centred levels. A single-element ``l2_grid`` fixes l2.
    """
    X = np.asarray(activations, dtype=float)
    y = np.asarray(concept_values, dtype=float)
    if len(X) != len(y):
        raise ContractViolation("activations and concept values differ in length")
    if len(X) < MIN_EXAMPLES:
        raise DegenerateConcept(f"{concept}: {len(X)} examples < {MIN_EXAMPLES}")
    levels = np.unique(y)
    if len(levels) < 2:
        raise DegenerateConcept(f"{concept}: a single {'class' if kind == 'binary' else 'level'}")
    if kind == "binary" and not set(levels) <= {0.0, 1.0}:
        raise ContractViolation(f"{concept}: binary concept values must be 0/1")
    tr, te = _split(len(y), y, kind, seed)
    if kind == "binary" and len(np.unique(y[tr])) < 2:
        raise DegenerateConcept(f"{concept}: training split holds a single class")
    ymean = float(y[tr].mean())
    best = None
    theta = None
    for l2 in sorted(l2_grid, reverse=True):
        if kind == "binary":
            theta, its = fit_logistic(X[tr], y[tr], l2, solver, theta0=theta)
        else:
            theta, its = fit_ridge(X[tr], y[tr] - ymean, l2, solver)
        q = _quality(kind, theta, X[te], y[te], ymean)
        # ties keep the stronger penalty (visited first)
        if best is None or (np.isfinite(q) and (not np.isfinite(best[0]) or q > best[0])):
            best = (q, l2, theta.copy(), its)
    q, l2, theta, its = best
    w = theta[:-1]
    norm = np.linalg.norm(w)
    if norm == 0 or not np.isfinite(norm):
        raise DegenerateConcept(f"{concept}: zero weight vector")
    return CAV(layer, concept, w / norm, kind, float(l2), float(q), float(theta[-1] / norm), its)


def random_cav(activations, l2, seed, layer="", concept="", solver="newton") -> CAV:
    """CAV for fair-coin labels over the same rows, at a fixed l2."""
    n = len(activations)
    rng = keyed_rng(seed, "random-labels")
    labels = rng.integers(0, 2, n)
    while labels.min() == labels.max():
        labels = rng.integers(0, 2, n)
    return train_cav(activations, labels, "binary", (l2,), seed, layer, f"random:{concept}", solver)


# --------------------------------------------------------------------------
# sensitivities


def directional_derivative(params: HeadParams, X, R, layer, cav: CAV, layout=None):
    """Gradient of the logit at ``layer`` dotted with the CAV direction."""
    G = grad_wrt_activation(params, X, R, layer, layout)
    d = G @ cav.direction
    return float(d[0]) if np.ndim(X) == 1 else d


def tcav_from_grads(G, direction_concept, direction_random) -> float:
    """Fraction of rows whose concept derivative beats the random one."""
    G = np.atleast_2d(G)
    if len(G) == 0:
        raise Undefined("no positively predicted examples")
    return float(np.mean(G @ direction_concept > G @ direction_random))


def tcav_score(params: HeadParams, X_pos, R_pos, layer, cav_concept: CAV, cav_random: CAV, layout=None) -> float:
    if len(X_pos) == 0:
        raise Undefined("no positively predicted examples")
    G = grad_wrt_activation(params, X_pos, R_pos, layer, layout)
    return tcav_from_grads(G, cav_concept.direction, cav_random.direction)


def significance(scores, null=0.5, alpha=ALPHA, m=N_COMPARISONS):
    """One-sample t-test of the TCAV scores against ``null``; two-sided.

    Returns (t, p, significant) with significance at alpha / m. With zero
    variance, p is 0 when the mean differs from the null and 1 otherwise.
    """
    x = np.asarray(scores, dtype=float)
    n = len(x)
    if n < 2:
        raise ContractViolation("need at least two scores")
    mean = x.mean()
    sd = x.std(ddof=1)
    if sd == 0:
        if mean == null:
            return 0.0, 1.0, False
        t = float(np.inf if mean > null else -np.inf)
        return t, 0.0, True
    t = float((mean - null) / (sd / np.sqrt(n)))
    p = float(min(1.0, 2.0 * stats.t.sf(abs(t), n - 1)))
    return t, p, p < alpha / m


@dataclass
class TcavResult:
    concept: str
    layer: str
    scores: list = field(default_factory=list)
    mean: float | None = None
    std: float | None = None
    t_stat: float | None = None
    p_value: float | None = None
    significant: bool = False
    fit_quality: float | None = None
    random_fit_quality: float | None = None
    l2: list = field(default_factory=list)
    n_pos: int = 0
    undefined_reps: int = 0
    degenerate: bool = False
    note: str = ""


def layer_activations(params, manifest, selection, rows, layer) -> np.ndarray:
    X = embedstore.assemble_rows(manifest, selection, rows)
    if layer == "h1":
        return h1_activations(params, X)
    if layer == "e_x":
        return X
    if layer not in selection:
        raise ContractViolation(f"layer {layer!r} is not in the model layout")
    return embedstore.assemble_rows(manifest, [layer], rows)


def video_references(manifest, selection, video_ids) -> dict:
    """Unweighted mean e_x over all embedded moments of each video."""
    out = {}
    for vid in sorted(set(video_ids)):
        rows = list(manifest.rows_for_video(vid).values())
        out[vid] = embedstore.assemble_rows(manifest, selection, rows).mean(axis=0)
    return out


def concept_table(records, concepts, keys):
    """concept -> array of values aligned with keys (None where missing)."""
    by_key = {r.key: r for r in records}
    return {c: np.array([getattr(by_key[k], c) for k in keys], dtype=object) for c in concepts}


def run_tcav(params: HeadParams, manifest, records, layers, repetitions=REPETITIONS, seed=0,
             concepts=None, l2_grid=L2_GRID, alpha=ALPHA, m=N_COMPARISONS, solver="newton"):
    """TCAV for every (concept, layer) over the coded moments in ``records``.

    X+ (moments the model scores above 0.5) is fixed per model. Each
    repetition draws a fresh CAV split and a fresh random concept; both
    derive from keyed streams over (seed, concept, layer, repetition).
    """
    selection = [n for n, _ in embedstore.parse_layout(params.layout)]
    concepts = list(concepts or FEATURES)
    keys = sorted({r.key for r in records if r.key in manifest.index})
    if not keys:
        raise Undefined("no coded moment has an embedding")
    rows = np.array([manifest.index[k] for k in keys])
    vids = [k[0] for k in keys]
    refs = video_references(manifest, selection, vids)
    X = embedstore.assemble_rows(manifest, selection, rows)
    R = np.stack([refs[v] for v in vids])
    pos = predict(params, X, R) > 0.5
    n_pos = int(pos.sum())
    values = concept_table(records, concepts, keys)
    results = []
    for layer in layers:
        acts = layer_activations(params, manifest, selection, rows, layer)
        G = grad_wrt_activation(params, X[pos], R[pos], layer) if n_pos else np.zeros((0, acts.shape[1]))
        for c in concepts:
            kind = "ordinal" if c in ORDINAL else "binary"
            have = np.array([v is not None for v in values[c]])
            yc = values[c][have].astype(float)
            res = TcavResult(c, layer, n_pos=n_pos)
            quals, rquals = [], []
            try:
                for rep in range(repetitions):
                    rep_seed = (seed, "tcav", c, layer, rep)
                    cav = train_cav(acts[have], yc, kind, l2_grid, rep_seed, layer, c, solver)
                    rcav = random_cav(acts[have], cav.l2, rep_seed, layer, c, solver)
                    assert rcav.l2 == cav.l2
                    quals.append(cav.fit_quality)
                    rquals.append(rcav.fit_quality)
                    res.l2.append(cav.l2)
                    if n_pos == 0:
                        res.undefined_reps += 1
                        continue
                    res.scores.append(tcav_from_grads(G, cav.direction, rcav.direction))
            except DegenerateConcept as exc:
                res.degenerate, res.note = True, str(exc)
                results.append(res)
                continue
            res.fit_quality = float(np.nanmean(quals)) if quals else None
            res.random_fit_quality = float(np.nanmean(rquals)) if rquals else None
            if len(res.scores) >= 2:
                res.mean = float(np.mean(res.scores))
                res.std = float(np.std(res.scores, ddof=1))
                res.t_stat, res.p_value, res.significant = significance(res.scores, alpha=alpha, m=m)
            elif res.scores:
                res.mean = float(res.scores[0])
            results.append(res)
    return results
