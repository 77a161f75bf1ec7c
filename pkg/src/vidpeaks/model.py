"""Three-layer classification head with hand-written backprop and Adam.

    a = ReLU(W1 e_x + b1)          segment branch
    r = ReLU(W1 e_ref + b1)        reference branch (W1r/b1r without sharing)
    z = ReLU(W2 [a; r] + b2)       dropout applied to z while training
    logit = W3 . z + b3,  p = sigmoid(logit)

Everything runs in float64 so gradients can be checked against finite
differences and reruns are bitwise reproducible.
"""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import expit

from .errors import CannotTrain, ContractViolation, NumericalFailure, Undefined
from .metrics import auc
from .rng import keyed_rng

HIDDEN = 256
CHECKPOINT_MAGIC = b"VPHEAD01"
PARAM_NAMES = ("W1", "b1", "W1r", "b1r", "W2", "b2", "W3", "b3")


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch_size: int = 2048
    dropout_p: float = 0.2
    val_fraction: float = 0.10
    max_epochs: int = 100
    patience: int = 10
    weight_share: bool = True
    use_reference: bool = True
    seed: int = 0
    hidden: int = HIDDEN
    balance: bool = True
    early_stop_metric: str = "loss"     # or "auc"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ContractViolation("lr must be positive")
        if not 0 < self.val_fraction < 1:
            raise ContractViolation("val_fraction must lie in (0, 1)")
        if self.patience < 1:
            raise ContractViolation("patience must be >= 1")
        if self.early_stop_metric not in ("loss", "auc"):
            raise ContractViolation("early_stop_metric must be 'loss' or 'auc'")


@dataclass
class HeadParams:
    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    W3: np.ndarray
    b3: float
    W1r: np.ndarray | None = None
    b1r: np.ndarray | None = None
    layout: str = ""
    seed: int = 0
    weight_share: bool = True
    use_reference: bool = True

    @property
    def d_in(self):
        return self.W1.shape[1]

    @property
    def hidden(self):
        return self.W1.shape[0]

    def tensors(self) -> dict:
        out = {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2,
               "W3": self.W3, "b3": np.array([self.b3])}
        if not self.weight_share:
            out["W1r"], out["b1r"] = self.W1r, self.b1r
        return out

    def copy(self) -> "HeadParams":
        return copy.deepcopy(self)


def init_params(d_in, hidden=HIDDEN, seed=0, weight_share=True, use_reference=True, layout="") -> HeadParams:
    """Uniform(+-1/sqrt(fan_in)) initialisation, keyed by seed."""
    rng = keyed_rng(seed, "init")

    def dense(fan_out, fan_in):
        bound = 1.0 / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, (fan_out, fan_in)), rng.uniform(-bound, bound, fan_out)

    W1, b1 = dense(hidden, d_in)
    W1r, b1r = (None, None) if weight_share else dense(hidden, d_in)
    W2, b2 = dense(hidden, 2 * hidden)
    W3, b3 = dense(1, hidden)
    return HeadParams(W1, b1, W2, b2, W3[0], float(b3[0]), W1r, b1r, layout, seed, weight_share, use_reference)


def make_dropout_mask(rng, shape, p) -> np.ndarray:
    """Inverted-dropout multiplier: 0 with probability p, else 1/(1-p)."""
    if p <= 0:
        return np.ones(shape)
    return (rng.random(shape) >= p) / (1.0 - p)


@dataclass
class Cache:
    X: np.ndarray
    R: np.ndarray
    pre1x: np.ndarray
    a: np.ndarray
    pre1r: np.ndarray | None
    r: np.ndarray
    pre2: np.ndarray
    z: np.ndarray
    mask: np.ndarray | None
    zd: np.ndarray
    logit: np.ndarray


def _as_batch(params, X, R):
    X = np.asarray(X, dtype=float)
    R = np.asarray(R, dtype=float)
    single = X.ndim == 1
    X, R = np.atleast_2d(X), np.atleast_2d(R)
    if X.shape[1] != params.d_in or R.shape[1] != params.d_in:
        raise ContractViolation(f"input width {X.shape[1]}/{R.shape[1]} != d_in {params.d_in}")
    if X.shape[0] != R.shape[0]:
        raise ContractViolation("e_x and e_ref batches differ in length")
    return X, R, single


def forward(params: HeadParams, X, R, dropout_mask=None):
    """Return (p, cache). 1-D inputs give a scalar p."""
    X, R, single = _as_batch(params, X, R)
    h = params.hidden
    pre1x = X @ params.W1.T + params.b1
    a = np.maximum(pre1x, 0.0)
    if params.use_reference:
        W, b = (params.W1, params.b1) if params.weight_share else (params.W1r, params.b1r)
        pre1r = R @ W.T + b
        r = np.maximum(pre1r, 0.0)
        pre2 = a @ params.W2[:, :h].T + r @ params.W2[:, h:].T + params.b2
    else:
        pre1r = None
        r = np.zeros_like(a)
        pre2 = a @ params.W2[:, :h].T + params.b2
    z = np.maximum(pre2, 0.0)
    zd = z if dropout_mask is None else z * dropout_mask
    logit = zd @ params.W3 + params.b3
    p = expit(logit)
    cache = Cache(X, R, pre1x, a, pre1r, r, pre2, z, dropout_mask, zd, logit)
    return (float(p[0]) if single else p), cache


def bce_from_logit(logit, y):
    """Mean binary cross-entropy computed without taking log of p."""
    return float(np.mean(np.logaddexp(0.0, logit) - y * logit))


def _logit_grad_input(params, cache):
    """d logit / d e_x per example (reference branch held fixed)."""
    h = params.hidden
    g_z = params.W3 if cache.mask is None else params.W3 * cache.mask
    g_pre2 = g_z * (cache.pre2 > 0)
    g_a = g_pre2 @ params.W2[:, :h]
    return (g_a * (cache.pre1x > 0)) @ params.W1


def loss_and_grads(params: HeadParams, X, R, y, dropout_mask=None):
    """Mean BCE, parameter gradients and d logit / d e_x for a batch.

    Returns ``(loss, grads, dlogit_dex)``; ``grads`` is keyed like
    :meth:`HeadParams.tensors`.
    """
    y = np.atleast_1d(np.asarray(y, dtype=float))
    _, c = forward(params, X, R, dropout_mask)
    n = len(y)
    if n == 0:
        raise ContractViolation("empty batch")
    loss = bce_from_logit(c.logit, y)
    if not np.isfinite(loss):
        raise NumericalFailure(
            f"non-finite loss on batch of {n}: logit range "
            f"[{np.nanmin(c.logit):.3g}, {np.nanmax(c.logit):.3g}]"
        )
    h = params.hidden
    g_logit = (expit(c.logit) - y) / n
    grads = {"W3": g_logit @ c.zd, "b3": np.array([g_logit.sum()])}
    g_zd = np.outer(g_logit, params.W3)
    g_z = g_zd if c.mask is None else g_zd * c.mask
    g_pre2 = g_z * (c.pre2 > 0)
    grads["W2"] = np.concatenate([g_pre2.T @ c.a, g_pre2.T @ c.r], axis=1)
    grads["b2"] = g_pre2.sum(axis=0)
    g_pre1x = (g_pre2 @ params.W2[:, :h]) * (c.pre1x > 0)
    grads["W1"] = g_pre1x.T @ c.X
    grads["b1"] = g_pre1x.sum(axis=0)
    if params.use_reference:
        g_pre1r = (g_pre2 @ params.W2[:, h:]) * (c.pre1r > 0)
        if params.weight_share:
            grads["W1"] = grads["W1"] + g_pre1r.T @ c.R
            grads["b1"] = grads["b1"] + g_pre1r.sum(axis=0)
        else:
            grads["W1r"], grads["b1r"] = g_pre1r.T @ c.R, g_pre1r.sum(axis=0)
    elif not params.weight_share:
        grads["W1r"], grads["b1r"] = np.zeros_like(params.W1r), np.zeros_like(params.b1r)
    return loss, grads, _logit_grad_input(params, c)


def h1_activations(params: HeadParams, X) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    return np.maximum(X @ params.W1.T + params.b1, 0.0)


def grad_wrt_activation(params: HeadParams, X, R, layer: str, layout: str | None = None) -> np.ndarray:
    """d logit / d activation at ``layer``, dropout off.

    ``layer`` is an input part name from the layout, ``"e_x"`` for the full
    segment embedding, or ``"h1"`` for the post-ReLU output of h1.
    """
    from .embedstore import part_slices

    _, c = forward(params, X, R)
    h = params.hidden
    if layer == "h1":
        return ((params.W3 * (c.pre2 > 0)) @ params.W2[:, :h]).copy()
    g = _logit_grad_input(params, c)
    if layer == "e_x":
        return g
    slices = part_slices(layout or params.layout)
    if layer not in slices:
        raise ContractViolation(f"unknown layer {layer!r} for layout {layout or params.layout!r}")
    return g[:, slices[layer]]


def predict(params: HeadParams, X, R, batch=8192) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    out = np.empty(len(X))
    for s in range(0, len(X), batch):
        out[s:s + batch], _ = forward(params, X[s:s + batch], R[s:s + batch])
    return out


# --------------------------------------------------------------------------
# training


@dataclass
class Dataset:
    """Training rows. ``R`` may be omitted: references are then derived
    per group from the (balanced) rows, reweighted by ``prevalence``."""

    X: np.ndarray
    y: np.ndarray
    groups: np.ndarray
    R: np.ndarray | None = None
    prevalence: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_auc: float | None


@dataclass
class TrainLog:
    epochs: list = field(default_factory=list)
    best_epoch: int = -1
    stopped_early: bool = False
    n_train: int = 0
    n_val: int = 0

    def to_lines(self) -> str:
        return "".join(json.dumps(asdict(r), separators=(",", ":")) + "\n" for r in self.epochs)


def balanced_indices(y, seed) -> np.ndarray:
    """Subsample the larger class down to the size of the smaller one."""
    y = np.asarray(y).astype(bool)
    pos, neg = np.flatnonzero(y), np.flatnonzero(~y)
    rng = keyed_rng(seed, "balance")
    if len(neg) > len(pos):
        neg = np.sort(rng.choice(neg, size=len(pos), replace=False))
    elif len(pos) > len(neg):
        pos = np.sort(rng.choice(pos, size=len(neg), replace=False))
    return np.sort(np.concatenate([pos, neg]))


def group_references(X, y, groups, prevalence=None) -> np.ndarray:
    """Per-row weighted mean of X over rows sharing its group."""
    if prevalence is None:
        w = np.ones(len(X))
    else:
        w = np.where(np.asarray(y).astype(bool), prevalence, 1.0 - prevalence)
    uniq, inv = np.unique(groups, return_inverse=True)
    sums = np.zeros((len(uniq), X.shape[1]))
    np.add.at(sums, inv, X * w[:, None])
    tot = np.bincount(inv, weights=w, minlength=len(uniq))
    return (sums / tot[:, None])[inv]


def grouped_val_split(groups, fraction, seed):
    """Whole groups into validation until it holds >= fraction of rows."""
    uniq, counts = np.unique(groups, return_counts=True)
    order = keyed_rng(seed, "val-split").permutation(len(uniq))
    target = fraction * len(groups)
    chosen, total = [], 0
    for i in order:
        if total >= target:
            break
        chosen.append(uniq[i])
        total += counts[i]
    val = np.isin(groups, chosen)
    if val.all():
        raise CannotTrain("validation split consumed every group")
    return np.flatnonzero(~val), np.flatnonzero(val)


class Adam:
    def __init__(self, params: HeadParams, cfg: TrainConfig):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.tensors().items()}
        self.v = {k: np.zeros_like(v) for k, v in params.tensors().items()}

    def step(self, params: HeadParams, grads: dict):
        c = self.cfg
        self.t += 1
        bc1 = 1 - c.beta1 ** self.t
        bc2 = 1 - c.beta2 ** self.t
        for k, g in grads.items():
            m = self.m[k] = c.beta1 * self.m[k] + (1 - c.beta1) * g
            v = self.v[k] = c.beta2 * self.v[k] + (1 - c.beta2) * g * g
            update = c.lr * (m / bc1) / (np.sqrt(v / bc2) + c.eps)
            if k == "b3":
                params.b3 = float(params.b3 - update[0])
            else:
                setattr(params, k, getattr(params, k) - update)


def _val_metrics(params, X, R, y):
    _, c = forward(params, X, R)
    loss = bce_from_logit(c.logit, y)
    try:
        score = auc(c.logit, y)
    except Undefined:
        score = None
    return loss, score


def train(data: Dataset, config: TrainConfig, layout: str = ""):
    """Fit the head; returns the best-validation-epoch params and the log."""
    X = np.asarray(data.X, dtype=float)
    y = np.asarray(data.y).astype(int)
    groups = np.asarray(data.groups)
    if len(np.unique(y)) < 2:
        raise CannotTrain("training data contains a single class")
    idx = balanced_indices(y, config.seed) if config.balance else np.arange(len(y))
    X, y, groups = X[idx], y[idx], groups[idx]
    if data.R is not None:
        R = np.asarray(data.R, dtype=float)[idx]
    else:
        prev = data.prevalence if config.balance else None
        R = group_references(X, y, groups, prev)
    tr, va = grouped_val_split(groups, config.val_fraction, config.seed)
    Xt, Rt, yt = X[tr], R[tr], y[tr].astype(float)
    Xv, Rv, yv = X[va], R[va], y[va].astype(float)

    params = init_params(X.shape[1], config.hidden, config.seed, config.weight_share,
                         config.use_reference, layout)
    opt = Adam(params, config)
    log = TrainLog(n_train=len(tr), n_val=len(va))
    best, best_score, bad = params.copy(), None, 0
    for epoch in range(config.max_epochs):
        perm = keyed_rng(config.seed, "shuffle", epoch).permutation(len(yt))
        total = 0.0
        for b, s in enumerate(range(0, len(perm), config.batch_size)):
            bi = perm[s:s + config.batch_size]
            mask = make_dropout_mask(keyed_rng(config.seed, "dropout", epoch, b),
                                     (len(bi), config.hidden), config.dropout_p)
            loss, grads, _ = loss_and_grads(params, Xt[bi], Rt[bi], yt[bi], mask)
            opt.step(params, grads)
            total += loss * len(bi)
        val_loss, val_auc = _val_metrics(params, Xv, Rv, yv)
        if not np.isfinite(val_loss):
            raise NumericalFailure(f"validation loss became non-finite at epoch {epoch}")
        log.epochs.append(EpochRecord(epoch, total / len(yt), val_loss, val_auc))
        score = val_loss if config.early_stop_metric == "loss" else -(val_auc if val_auc is not None else 0.5)
        if best_score is None or score < best_score:
            best, best_score, bad = params.copy(), score, 0
            log.best_epoch = epoch
        else:
            bad += 1
            if bad >= config.patience:
                log.stopped_early = True
                break
    return best, log


# --------------------------------------------------------------------------
# checkpoints: magic | u64 header length | JSON header | float64 LE tensors


def save_checkpoint(path, params: HeadParams, config: TrainConfig | None = None, extra: dict | None = None):
    tensors = params.tensors()
    header = {
        "version": 1,
        "layout": params.layout,
        "seed": params.seed,
        "weight_share": params.weight_share,
        "use_reference": params.use_reference,
        "config": asdict(config) if config else None,
        "extra": extra or {},
        "tensors": {},
    }
    offset = 0
    blobs = []
    for name in PARAM_NAMES:
        if name not in tensors:
            continue
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        header["tensors"][name] = {"shape": list(arr.shape), "offset": offset}
        blobs.append(arr.tobytes())
        offset += arr.nbytes
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path):
    """Return (params, config_dict_or_None, extra)."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ContractViolation(f"{path}: not a head checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    header = json.loads(data[16:16 + hlen])
    base = 16 + hlen
    t = {}
    for name, meta in header["tensors"].items():
        count = int(np.prod(meta["shape"])) if meta["shape"] else 1
        start = base + meta["offset"]
        t[name] = np.frombuffer(data, dtype="<f8", count=count, offset=start).reshape(meta["shape"]).copy()
    params = HeadParams(t["W1"], t["b1"], t["W2"], t["b2"], t["W3"], float(t["b3"][0]),
                        t.get("W1r"), t.get("b1r"), header["layout"], header["seed"],
                        header["weight_share"], header["use_reference"])
    return params, header["config"], header["extra"]
