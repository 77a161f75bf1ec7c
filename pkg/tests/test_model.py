import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import central_difference, close, gradient_case, loop_logit
from vidpeaks.errors import CannotTrain, ContractViolation
from vidpeaks.model import (Dataset, TrainConfig, bce_from_logit, forward, grad_wrt_activation, h1_activations,
                            init_params, load_checkpoint, loss_and_grads, predict, save_checkpoint, train)


def zero_params(d=4, h=3):
    p = init_params(d, h)
    for name, arr in p.tensors().items():
        if name != "b3":
            setattr(p, name, np.zeros_like(arr))
    p.b3 = 0.0
    return p


def test_zero_params_give_half():
    p, _ = forward(zero_params(), np.arange(4.0), -np.ones(4))
    assert p == 0.5


def test_bias_only_output():
    params = init_params(4, 3, seed=2)
    params.W3 = np.zeros(3)
    params.b3 = 3.0
    p, _ = forward(params, np.ones(4), np.ones(4))
    assert p == pytest.approx(1 / (1 + math.exp(-3)), abs=1e-15)
    assert round(p, 4) == 0.9526


def test_zero_params_loss_is_ln2():
    loss, _, _ = loss_and_grads(zero_params(), np.ones(4), np.ones(4), [1.0])
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_saturated_loss_is_finite_and_tiny():
    assert bce_from_logit(np.array([800.0]), np.array([1.0])) == 0.0
    assert bce_from_logit(np.array([-800.0]), np.array([0.0])) == 0.0
    assert bce_from_logit(np.array([-800.0]), np.array([1.0])) == pytest.approx(800.0)


@pytest.mark.parametrize("share, ref", [(True, True), (False, True), (True, False), (False, False)])
def test_logit_matches_loop_oracle(share, ref):
    rng = np.random.default_rng(7)
    for _ in range(10):
        params = init_params(5, 4, seed=int(rng.integers(1000)), weight_share=share, use_reference=ref)
        x, r = rng.normal(size=5), rng.normal(size=5)
        _, c = forward(params, x, r)
        want = loop_logit(params, x, r)
        assert c.logit[0] == pytest.approx(want, rel=1e-12, abs=1e-15)


def test_parameter_and_input_gradients_match_finite_differences():
    rng = np.random.default_rng(2024)
    for _ in range(25):
        params, X, R, y, mask = gradient_case(rng)
        loss, grads, gx = loss_and_grads(params, X, R, y, mask)
        for name, g in grads.items():
            if name == "b3":
                holder = np.array([params.b3])

                def f():
                    params.b3 = float(holder[0])
                    return loss_and_grads(params, X, R, y, mask)[0]

                num = central_difference(f, holder)
                params.b3 = float(holder[0])
            else:
                arr = getattr(params, name)
                num = central_difference(lambda: loss_and_grads(params, X, R, y, mask)[0], arr)
            assert close(g, num).all(), name
        # d logit / d e_x, reference branch held fixed
        for i in range(len(X)):
            xi = X[i].copy()
            num = central_difference(lambda: forward(params, xi, R[i], None if mask is None else mask[i])[1].logit[0], xi)
            assert close(gx[i], num).all()


def test_shared_weights_feed_both_branches():
    rng = np.random.default_rng(1)
    params = init_params(4, 3, seed=1)
    x, r = rng.normal(size=4), rng.normal(size=4)
    _, before = forward(params, x, r)
    params.W1 = params.W1 + 0.01
    _, after = forward(params, x, r)
    assert not np.allclose(before.pre1x, after.pre1x)
    assert not np.allclose(before.pre1r, after.pre1r)


def test_no_reference_ignores_reference_input():
    params = init_params(4, 3, seed=3, use_reference=False)
    x = np.ones(4)
    assert forward(params, x, np.zeros(4))[0] == forward(params, x, 100 * np.ones(4))[0]


def test_inference_is_deterministic():
    params = init_params(6, 5, seed=9)
    X = np.random.default_rng(0).normal(size=(20, 6))
    a = predict(params, X, X[::-1])
    b = predict(params, X, X[::-1])
    assert a.tobytes() == b.tobytes()


def test_probability_monotone_in_logit():
    params = init_params(3, 2, seed=4)
    params.W3 = np.zeros(2)
    rng = np.random.default_rng(5)
    for b in rng.uniform(-10, 10, 1000):
        params.b3 = float(b)
        lo = forward(params, np.ones(3), np.ones(3))[0]
        params.b3 = float(b) + 1e-3
        hi = forward(params, np.ones(3), np.ones(3))[0]
        assert hi > lo


def test_linear_regime_gradient_is_weight_product():
    # positive weights and inputs keep every ReLU open, so the head is linear
    rng = np.random.default_rng(3)
    d, h = 5, 4
    params = init_params(d, h)
    params.W1, params.b1 = rng.uniform(0.1, 1, (h, d)), rng.uniform(0.1, 1, h)
    params.W2, params.b2 = rng.uniform(0.1, 1, (h, 2 * h)), rng.uniform(0.1, 1, h)
    params.W3 = rng.normal(size=h)
    params.layout = "A:2|B:3"
    x, r = rng.uniform(0.1, 1, d), rng.uniform(0.1, 1, d)
    expect = params.W3 @ params.W2[:, :h] @ params.W1
    g = grad_wrt_activation(params, x, r, "e_x")[0]
    np.testing.assert_allclose(g, expect, rtol=1e-13)
    np.testing.assert_allclose(grad_wrt_activation(params, x, r, "h1")[0], params.W3 @ params.W2[:, :h], rtol=1e-13)
    parts = np.concatenate([grad_wrt_activation(params, x, r, "A")[0], grad_wrt_activation(params, x, r, "B")[0]])
    assert parts.tobytes() == g.tobytes()


def test_activation_gradients_match_finite_differences():
    rng = np.random.default_rng(11)
    for _ in range(20):
        params, X, R, _, _ = gradient_case(rng)
        d = params.d_in
        cut = int(rng.integers(1, d)) if d > 1 else 1
        params.layout = f"P:{cut}|Q:{d - cut}" if d > cut else f"P:{d}"
        x, r = X[0].copy(), R[0]
        g = grad_wrt_activation(params, x, r, "P")[0]
        num = central_difference(lambda: forward(params, x, r)[1].logit[0], x)[:cut]
        assert close(g, num).all()
        # h1: perturb the activation and push it through the rest of the head
        a = h1_activations(params, x)[0]
        ref = np.maximum(r @ (params.W1 if params.weight_share else params.W1r).T
                         + (params.b1 if params.weight_share else params.b1r), 0.0)
        h = params.hidden

        def tail():
            pre2 = a @ params.W2[:, :h].T + params.b2
            if params.use_reference:
                pre2 = pre2 + ref @ params.W2[:, h:].T
            return float(np.maximum(pre2, 0.0) @ params.W3 + params.b3)

        assert close(grad_wrt_activation(params, x, r, "h1")[0], central_difference(tail, a)).all()


def test_unknown_layer_rejected():
    params = init_params(3, 2, layout="A:3")
    with pytest.raises(ContractViolation):
        grad_wrt_activation(params, np.ones(3), np.ones(3), "B")


def separable(n=1000, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.uniform(-3, 3, (n, 2))
    margin = X[:, 0] + X[:, 1]
    keep = np.abs(margin) >= 1.0
    while keep.sum() < n:
        extra = rng.uniform(-3, 3, (n, 2))
        X = np.vstack([X[keep], extra])
        margin = X[:, 0] + X[:, 1]
        keep = np.abs(margin) >= 1.0
    X = X[keep][:n]
    y = (X[:, 0] + X[:, 1] > 0).astype(int)
    return X, y


def test_learns_separable_toy_within_fifty_epochs():
    X, y = separable()
    groups = np.arange(len(y)) // 10
    cfg = TrainConfig(lr=1e-2, batch_size=64, max_epochs=50, hidden=16, use_reference=False, seed=0, dropout_p=0.0)
    params, log = train(Dataset(X, y, groups), cfg)
    acc = np.mean((predict(params, X, X) > 0.5) == y)
    assert acc >= 0.99
    assert len(log.epochs) <= 50


def test_training_is_bitwise_reproducible(tmp_path):
    X, y = separable(300, seed=1)
    groups = np.arange(len(y)) // 10
    cfg = TrainConfig(lr=1e-3, batch_size=32, max_epochs=5, hidden=8, seed=3)
    p1, log1 = train(Dataset(X, y, groups), cfg)
    p2, log2 = train(Dataset(X, y, groups), cfg)
    assert log1.to_lines() == log2.to_lines()
    for k, v in p1.tensors().items():
        assert v.tobytes() == p2.tensors()[k].tobytes()
    save_checkpoint(tmp_path / "a.ckpt", p1, cfg)
    save_checkpoint(tmp_path / "b.ckpt", p2, cfg)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


@pytest.mark.parametrize("share", [True, False])
def test_checkpoint_round_trip(tmp_path, share):
    params = init_params(5, 4, seed=8, weight_share=share, layout="A:2|B:3")
    save_checkpoint(tmp_path / "m.ckpt", params, TrainConfig(seed=8), {"note": "x"})
    back, cfg, extra = load_checkpoint(tmp_path / "m.ckpt")
    assert back.layout == "A:2|B:3" and cfg["seed"] == 8 and extra == {"note": "x"}
    for k, v in params.tensors().items():
        assert v.tobytes() == back.tensors()[k].tobytes()


def test_single_class_cannot_train():
    with pytest.raises(CannotTrain):
        train(Dataset(np.ones((10, 2)), np.zeros(10), np.arange(10)), TrainConfig())


@given(st.floats(-1e-3, 1e3).filter(lambda x: x <= 0) | st.just(float("nan")))
def test_config_rejects_bad_learning_rate(lr):
    with pytest.raises(ContractViolation):
        TrainConfig(lr=lr)
