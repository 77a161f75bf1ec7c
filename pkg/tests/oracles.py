"""Independent reference computations the tests compare against."""
import math
from fractions import Fraction
from itertools import product

import numpy as np
from scipy import integrate


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p in pos for n in neg)
    return total / (len(pos) * len(neg))


def loop_logit(params, x, r):
    """Three dense layers written out neuron by neuron."""
    h = params.hidden

    def dense_relu(W, b, v):
        out = []
        for i in range(len(b)):
            acc = b[i]
            for j in range(len(v)):
                acc += W[i][j] * v[j]
            out.append(max(acc, 0.0))
        return out

    a = dense_relu(params.W1, params.b1, x)
    if params.use_reference:
        W, b = (params.W1, params.b1) if params.weight_share else (params.W1r, params.b1r)
        ref = dense_relu(W, b, r)
    else:
        ref = [0.0] * h
    z = dense_relu(params.W2, params.b2, a + ref)
    return params.b3 + sum(params.W3[i] * z[i] for i in range(h))


def kappa_exact(a, b, categories):
    """Cohen's kappa from an explicit confusion table with exact fractions."""
    n = len(a)
    table = {(x, y): 0 for x in categories for y in categories}
    for x, y in zip(a, b):
        table[x, y] += 1
    p_o = Fraction(sum(table[c, c] for c in categories), n)
    p_e = sum(Fraction(sum(table[c, y] for y in categories), n) * Fraction(sum(table[x, c] for x in categories), n)
              for c in categories)
    if p_e == 1:
        return None
    return (p_o - p_e) / (1 - p_e)


def binary_tables(max_n):
    """Every ordered pair of binary rating vectors with 2 <= n <= max_n."""
    for n in range(2, max_n + 1):
        for bits in product((0, 1), repeat=2 * n):
            yield list(bits[:n]), list(bits[n:])


def t_two_sided_p(t, df):
    """Two-sided p from the Student t density integrated numerically."""
    logc = math.lgamma((df + 1) / 2) - math.lgamma(df / 2) - 0.5 * math.log(df * math.pi)
    pdf = lambda x: math.exp(logc - (df + 1) / 2 * math.log1p(x * x / df))
    tail, _ = integrate.quad(pdf, abs(t), np.inf, epsabs=1e-14, epsrel=1e-12, limit=200)
    return min(1.0, 2 * tail)


def central_difference(f, x, eps=1e-5):
    """Gradient of scalar f at x by central differences (x is modified in place and restored)."""
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        up = f()
        flat[i] = old - eps
        down = f()
        flat[i] = old
        gf[i] = (up - down) / (2 * eps)
    return g


def close(analytic, numeric, rel=1e-4, floor=1e-8):
    """Relative agreement, with an absolute floor for coordinates that are ~0."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) <= rel * scale


def gradient_case(rng, margin=1e-3):
    """Random head, batch and dropout mask with every pre-activation away from a ReLU kink."""
    from vidpeaks.model import forward, init_params

    while True:
        d, h, n = int(rng.integers(2, 7)), int(rng.integers(2, 6)), int(rng.integers(1, 4))
        share, use_ref = bool(rng.integers(2)), bool(rng.integers(2))
        params = init_params(d, h, seed=int(rng.integers(1 << 30)), weight_share=share, use_reference=use_ref)
        for name, arr in params.tensors().items():
            if name != "b3":
                setattr(params, name, rng.normal(0, 1, arr.shape))
        params.b3 = float(rng.normal())
        X, R = rng.normal(size=(n, d)), rng.normal(size=(n, d))
        y = rng.integers(0, 2, n).astype(float)
        mask = (rng.random((n, h)) >= 0.2) / 0.8 if rng.random() < 0.5 else None
        _, c = forward(params, X, R, mask)
        pres = [c.pre1x, c.pre2] + ([c.pre1r] if use_ref else [])
        if min(np.abs(p).min() for p in pres) > margin:
            return params, X, R, y, mask


def planted_linear_model(directory, n_videos=10, per_video=24, seed=0):
    """A head whose logit is w.x + b on a 4-dim input part, plus coded moments.

    Inputs live in [1, 3]^4 and every weight path is the identity, so all ReLUs
    stay open and the gradient w.r.t. the input part is w everywhere.
    Concepts: ``formula`` = x0 > 2 (aligned with w), ``instructor`` = x0 < 2
    (anti-aligned) and ``photo`` = x3 > 2 (orthogonal: w3 = 0).
    """
    from vidpeaks import embedstore
    from vidpeaks.ctml import CTMLRecord
    from vidpeaks.model import init_params

    rng = np.random.default_rng(seed)
    d = 4
    keys = [(f"v{i:02d}", 30 + 5 * j) for i in range(n_videos) for j in range(per_video)]
    X = rng.uniform(1, 3, (len(keys), d))
    manifest = embedstore.open_manifest(embedstore.write_manifest(directory, {"P": X}, keys))
    X = embedstore.assemble_rows(manifest, ["P"], np.arange(len(keys)))
    w = np.array([1.0, 0.0, 0.0, 0.0])
    params = init_params(d, d, layout="P:4")
    params.W1, params.b1 = np.eye(d), np.zeros(d)
    params.W2, params.b2 = np.hstack([np.eye(d), np.zeros((d, d))]), np.zeros(d)
    params.W3, params.b3 = w.copy(), 0.0
    records = [CTMLRecord(v, t, formula=int(x[0] > 2), instructor=int(x[0] < 2), photo=int(x[3] > 2))
               for (v, t), x in zip(keys, X)]
    return params, manifest, records, w
