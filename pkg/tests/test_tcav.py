import statistics

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_difference, close, gradient_case, planted_linear_model, t_two_sided_p
from vidpeaks.errors import ContractViolation, DegenerateConcept, Undefined
from vidpeaks.model import forward
from vidpeaks.tcav import (CAV, directional_derivative, fit_logistic, fit_ridge, random_cav, run_tcav,
                           significance, tcav_from_grads, tcav_score, train_cav)


def cav(direction, layer="P"):
    d = np.asarray(direction, dtype=float)
    return CAV(layer, "c", d / np.linalg.norm(d), "binary", 1.0, 1.0)


def test_separable_axis_concept():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(400, 2))
    X[:, 0] += np.sign(X[:, 0]) * 1.0
    c = train_cav(X, (X[:, 0] > 0).astype(int), seed=1)
    assert abs(c.direction[0]) >= 0.99
    assert c.direction[0] > 0 and c.fit_quality == 1.0


def test_ordinal_direction_recovered():
    rng = np.random.default_rng(1)
    v = np.array([0.5, -1.0, 2.0, 0.0, 0.3])
    X = rng.normal(size=(500, 5))
    y = np.clip(np.round(3 + X @ v + rng.normal(0, 0.3, 500)), 1, 5)
    c = train_cav(X, y, "ordinal", seed=2)
    assert c.direction @ (v / np.linalg.norm(v)) >= 0.95


def test_unrelated_labels_have_chance_quality():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(2000, 6))
    c = train_cav(X, rng.integers(0, 2, 2000), seed=3)
    assert 0.4 <= c.fit_quality <= 0.6


def test_degenerate_concepts():
    X = np.random.default_rng(0).normal(size=(30, 3))
    with pytest.raises(DegenerateConcept):
        train_cav(X, np.ones(30))
    with pytest.raises(DegenerateConcept):
        train_cav(X[:10], np.arange(10) % 2)


def test_logistic_newton_matches_gradient_descent():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(200, 3))
    y = (X @ [1.0, -0.5, 0.2] + rng.normal(0, 1, 200) > 0).astype(float)
    a, _ = fit_logistic(X, y, 1.0)
    b, _ = fit_logistic(X, y, 1.0, solver="gd", tol=1e-9, max_iter=200_000)
    np.testing.assert_allclose(a, b, atol=1e-6)
    r1, _ = fit_ridge(X, y - y.mean(), 0.1)
    r2, _ = fit_ridge(X, y - y.mean(), 0.1, solver="gd", tol=1e-10, max_iter=200_000)
    np.testing.assert_allclose(r1, r2, atol=1e-7)


def test_cav_training_is_deterministic():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(100, 4))
    y = (X[:, 1] > 0).astype(int)
    a, b = train_cav(X, y, seed=(7, "x")), train_cav(X, y, seed=(7, "x"))
    assert a.direction.tobytes() == b.direction.tobytes() and a.l2 == b.l2
    r = random_cav(X, a.l2, seed=(7, "x"))
    assert r.l2 == a.l2


def test_directional_derivative_cases():
    rng = np.random.default_rng(4)
    params, X, R, _, _ = gradient_case(rng)
    params.layout = f"P:{params.d_in}"
    x, r = X[0].copy(), R[0]
    _, c = forward(params, x, r)
    g = central_difference(lambda: forward(params, x, r)[1].logit[0], x)
    from vidpeaks.model import grad_wrt_activation
    exact = grad_wrt_activation(params, x, r, "P")[0]
    assert directional_derivative(params, x, r, "P", cav(exact)) == pytest.approx(np.linalg.norm(exact), rel=1e-12)
    if len(exact) > 1:
        ortho = np.roll(exact, 1)
        ortho = ortho - (ortho @ exact) / (exact @ exact) * exact
        assert abs(directional_derivative(params, x, r, "P", cav(ortho))) < 1e-10
    v = rng.normal(size=len(x))
    v /= np.linalg.norm(v)
    eps = 1e-5
    probe = (forward(params, x + eps * v, r)[1].logit[0] - forward(params, x - eps * v, r)[1].logit[0]) / (2 * eps)
    assert close(directional_derivative(params, x, r, "P", cav(v)), probe).all()


def test_linear_head_scores_one_and_zero(tmp_path):
    params, manifest, records, w = planted_linear_model(tmp_path)
    from vidpeaks import embedstore
    X = embedstore.assemble_rows(manifest, ["P"], np.arange(manifest.row_count))
    ortho = np.array([0.0, 1.0, 0.0, 0.0])
    assert tcav_score(params, X, X, "P", cav(w), cav(ortho)) == 1.0
    assert tcav_score(params, X, X, "P", cav(-w), cav(ortho)) == 0.0
    with pytest.raises(Undefined):
        tcav_score(params, X[:0], X[:0], "P", cav(w), cav(ortho))


def test_random_pair_on_radial_model_is_half():
    # logit = |x|^2 / 2 has gradient x: sensitivities depend only on direction
    rng = np.random.default_rng(6)
    scores = []
    for _ in range(200):
        G = rng.normal(size=(100, 8))
        q, _ = np.linalg.qr(rng.normal(size=(8, 2)))
        scores.append(tcav_from_grads(G, q[:, 0], q[:, 1]))
    assert abs(np.mean(scores) - 0.5) <= 0.05


@given(st.lists(st.floats(-3, 3), min_size=4, max_size=4), st.floats(1e-3, 1e3), st.floats(1e-3, 1e3))
def test_score_ignores_direction_scale(g, a, b):
    G = np.random.default_rng(0).normal(size=(50, 4)) + np.array(g)
    c, r = np.array([0.3, -1.0, 0.2, 0.5]), np.array([1.0, 0.1, -0.4, 0.0])
    s = tcav_from_grads(G, c, r)
    assert 0.0 <= s <= 1.0
    assert tcav_from_grads(G, a * c / np.linalg.norm(c), a * r / np.linalg.norm(r)) == \
        tcav_from_grads(G, c / np.linalg.norm(c), r / np.linalg.norm(r))


def test_significance_conventions():
    assert significance([0.5] * 25) == (0.0, 1.0, False)
    t, p, sig = significance([0.9] * 25)
    assert p == 0.0 and sig and t == np.inf
    with pytest.raises(ContractViolation):
        significance([0.7])


def test_significance_matches_integrated_t_density():
    rng = np.random.default_rng(8)
    for _ in range(10):
        scores = 0.5 + rng.normal(0.1, 0.05, 25)
        t, p, sig = significance(scores)
        t_ref = (statistics.fmean(scores) - 0.5) / (statistics.stdev(scores) / 5)
        assert t == pytest.approx(t_ref, rel=1e-12)
        assert abs(p - t_two_sided_p(t_ref, 24)) <= 1e-6
        assert sig == (p < 0.05 / 150)


def test_run_tcav_on_planted_linear_head(tmp_path):
    params, manifest, records, _ = planted_linear_model(tmp_path)
    results = run_tcav(params, manifest, records, ["P"], repetitions=25, seed=0,
                       concepts=["formula", "instructor", "photo"])
    by = {r.concept: r for r in results}
    assert all(len(r.scores) == 25 for r in results)
    assert by["formula"].mean == 1.0 and by["formula"].significant
    assert by["instructor"].mean == 0.0 and by["instructor"].significant
    assert not by["photo"].significant
    assert all(0.0 <= s <= 1.0 for r in results for s in r.scores)
    assert all(len(set(r.l2)) >= 1 for r in results)
    again = run_tcav(params, manifest, records, ["P"], repetitions=25, seed=0, concepts=["photo"])
    assert again[0].scores == by["photo"].scores


def test_run_tcav_marks_degenerate_concepts(tmp_path):
    params, manifest, records, _ = planted_linear_model(tmp_path)
    (res,) = run_tcav(params, manifest, records, ["P"], repetitions=3, concepts=["screen"])
    assert res.degenerate and res.scores == []
