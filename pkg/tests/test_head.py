import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from moma.data import TaskSpec
from moma.head import (AdamWState, LinearHead, ShapeError, TrainConfig, adamw_step, forward, init_head, load_head,
                       loss, lr_multiplier, predict_from_logits, save_head, train_head)

from conftest import ALCOHOL, CHEST, MULTI


def fd_check(head, x, y, kind, h=1e-5):
    """Largest relative error between analytic and central-difference gradients."""
    _, grads = loss(head, x, y, kind)
    params = head.params()
    worst = 0.0
    for name, theta in params.items():
        num = np.zeros_like(theta)
        for idx in np.ndindex(theta.shape):
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][idx] += h
            minus[name][idx] -= h
            num[idx] = (loss(head.with_params(plus), x, y, kind)[0]
                        - loss(head.with_params(minus), x, y, kind)[0]) / (2 * h)
        denom = max(np.linalg.norm(num) + np.linalg.norm(grads[name]), 1e-12)
        worst = max(worst, np.linalg.norm(num - grads[name]) / denom)
    return worst


def random_instance(rng, kind, hidden=None):
    dim = int(rng.integers(1, 6))
    n = int(rng.integers(1, 5))
    if kind == "bce_with_logits":
        slices, task = ((0, 1),), "binary"
        y = rng.integers(0, 2, size=(n, 1))
    elif kind == "categorical_ce":
        c = int(rng.integers(2, 5))
        slices, task = ((0, c),), "multiclass"
        y = rng.integers(0, c, size=(n, 1))
    else:
        sizes = rng.integers(2, 4, size=int(rng.integers(2, 4)))
        offs = np.r_[0, np.cumsum(sizes)[:-1]]
        slices, task = tuple(zip(offs.tolist(), sizes.tolist())), "multitask"
        y = np.stack([rng.integers(0, s, size=n) for s in sizes], axis=1)
    L = sum(s for _, s in slices)
    if hidden:
        head = LinearHead(rng.normal(size=(L, hidden)), rng.normal(size=L), slices, task,
                          rng.normal(size=(hidden, dim)), rng.normal(size=hidden))
    else:
        head = LinearHead(rng.normal(size=(L, dim)), rng.normal(size=L), slices, task)
    return head, rng.normal(size=(n, dim)), y


# -- forward ---------------------------------------------------------------------

def test_zero_head_zero_logits():
    head = LinearHead(np.zeros((3, 4)), np.zeros(3), ((0, 3),))
    assert np.array_equal(forward(head, np.ones(4)), np.zeros(3))


def test_identity_head():
    head = LinearHead(np.eye(3), np.zeros(3), ((0, 3),))
    assert np.array_equal(forward(head, [1.0, 0.0, 0.0]), [1.0, 0.0, 0.0])


def test_forward_matches_loops():
    rng = np.random.default_rng(3)
    W, b, x = rng.normal(size=(4, 3)), rng.normal(size=4), rng.normal(size=3)
    expected = [sum(W[i][j] * x[j] for j in range(3)) + b[i] for i in range(4)]
    assert np.allclose(forward(LinearHead(W, b, ((0, 4),)), x), expected, rtol=0, atol=1e-12)


def test_forward_dimension_mismatch():
    with pytest.raises(ShapeError):
        forward(LinearHead(np.zeros((3, 4)), np.zeros(3), ((0, 3),)), np.zeros(5))


def test_slices_must_tile():
    with pytest.raises(ShapeError):
        LinearHead(np.zeros((5, 2)), np.zeros(5), ((0, 3), (3, 3)))
    with pytest.raises(ShapeError):
        LinearHead(np.zeros((2, 2)), np.zeros(2), ((0, 2),), "binary")


# -- losses --------------------------------------------------------------------------

def test_uniform_three_class_loss_is_ln3():
    head = LinearHead(np.zeros((3, 2)), np.zeros(3), ((0, 3),))
    assert loss(head, [0.3, -1.0], [1], "categorical_ce")[0] == pytest.approx(math.log(3), abs=1e-12)


def test_binary_zero_logit_loss_is_ln2():
    head = LinearHead(np.zeros((1, 2)), np.zeros(1), ((0, 1),), "binary")
    assert loss(head, [0.3, -1.0], [1], "bce_with_logits")[0] == pytest.approx(math.log(2), abs=1e-12)


def test_bce_stable_at_extreme_logits():
    head = LinearHead(np.full((1, 1), 800.0), np.zeros(1), ((0, 1),), "binary")
    value, _ = loss(head, [[1.0], [-1.0]], [[0], [1]], "bce_with_logits")
    assert value == pytest.approx(800.0)


def test_multitask_is_sum_of_subtask_losses():
    rng = np.random.default_rng(0)
    W, b, x = rng.normal(size=(6, 4)), rng.normal(size=6), rng.normal(size=4)
    head = LinearHead(W, b, ((0, 3), (3, 3)), "multitask")
    z = W @ x + b
    expected = sum(-(z[o + y] - math.log(sum(math.exp(v) for v in z[o:o + 3]))) for o, y in ((0, 2), (3, 0)))
    assert loss(head, x, [2, 0], "multitask_ce_sum")[0] == pytest.approx(expected, abs=1e-12)


def test_loss_kind_must_fit_head():
    head = LinearHead(np.zeros((3, 2)), np.zeros(3), ((0, 3),))
    with pytest.raises(ShapeError):
        loss(head, [0.0, 0.0], [0], "bce_with_logits")
    with pytest.raises(ValueError):
        loss(head, [0.0, 0.0], [3], "categorical_ce")


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reported():
    head = LinearHead(np.full((3, 1), np.inf), np.zeros(3), ((0, 3),))
    with pytest.raises(FloatingPointError):
        loss(head, [1.0], [0], "categorical_ce")


@pytest.mark.parametrize("kind", ["categorical_ce", "bce_with_logits", "multitask_ce_sum"])
def test_gradient_single_instance_tight(kind):
    head, x, y = random_instance(np.random.default_rng(11), kind)
    assert fd_check(head, x, y, kind) < 1e-6


@settings(max_examples=40, deadline=None)
@given(st.sampled_from(["categorical_ce", "bce_with_logits", "multitask_ce_sum"]), st.integers(0, 2**31),
       st.sampled_from([None, 3]))
def test_gradients_match_finite_differences(kind, seed, hidden):
    head, x, y = random_instance(np.random.default_rng(seed), kind, hidden)
    assert fd_check(head, x, y, kind) < 1e-5


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, c):
    rng = np.random.default_rng(seed)
    head = LinearHead(rng.normal(size=(5, 3)), rng.normal(size=5), ((0, 2), (2, 3)), "multitask")
    x, y = rng.normal(size=(4, 3)), np.stack([rng.integers(0, 2, 4), rng.integers(0, 3, 4)], axis=1)
    shifted = head.with_params({"W": head.weights, "b": head.bias + np.r_[0, 0, c, c, c]})
    a = loss(head, x, y, "multitask_ce_sum")[0]
    assert loss(shifted, x, y, "multitask_ce_sum")[0] == pytest.approx(a, abs=1e-9)
    assert a > 0


def test_prediction_ties_and_threshold():
    head = LinearHead(np.zeros((3, 1)), np.zeros(3), ((0, 3),))
    assert predict_from_logits(head, np.array([1.0, 1.0, 0.0])) == ([0], None)
    binary = LinearHead(np.zeros((1, 1)), np.zeros(1), ((0, 1),), "binary")
    assert predict_from_logits(binary, np.array([0.0])) == ([0], 0.5)
    assert predict_from_logits(binary, np.array([-800.0]))[1] == pytest.approx(0.0)


# -- AdamW ---------------------------------------------------------------------------

def test_zero_gradient_no_decay_is_fixed_point():
    p = {"w": np.array([1.0, -2.0])}
    new, state = adamw_step(AdamWState(learning_rate=0.1, weight_decay=0.0), p, {"w": np.zeros(2)})
    assert np.array_equal(new["w"], p["w"]) and state.step_count == 1


def test_first_step_moves_by_lr_times_sign():
    new, _ = adamw_step(AdamWState(learning_rate=0.1, weight_decay=0.0), {"w": np.array([1.0])},
                        {"w": np.array([2.0])})
    # m_hat = 2, v_hat = 4, so the step is 0.1 * 2 / (2 + 1e-8)
    assert new["w"][0] == pytest.approx(1.0 - 0.1 * 2.0 / (2.0 + 1e-8), abs=1e-15)
    assert new["w"][0] == pytest.approx(0.9, abs=1e-8)


def test_pure_decoupled_decay():
    new, _ = adamw_step(AdamWState(learning_rate=0.1, weight_decay=0.01), {"w": np.array([3.0])},
                        {"w": np.array([0.0])})
    assert new["w"][0] == pytest.approx(3.0 * (1 - 0.1 * 0.01), abs=1e-15)


def test_adamw_shape_mismatch():
    with pytest.raises(ShapeError):
        adamw_step(AdamWState(), {"w": np.zeros(2)}, {"w": np.zeros(3)})


def reference_adam(theta, grads, lr, b1, b2, eps):
    """Element-by-element Adam without weight decay."""
    theta = [float(t) for t in theta]
    m = [0.0] * len(theta)
    v = [0.0] * len(theta)
    for t, g in enumerate(grads, 1):
        for i in range(len(theta)):
            m[i] = b1 * m[i] + (1 - b1) * g[i]
            v[i] = b2 * v[i] + (1 - b2) * g[i] ** 2
            mh = m[i] / (1 - b1 ** t)
            vh = v[i] / (1 - b2 ** t)
            theta[i] -= lr * mh / (math.sqrt(vh) + eps)
    return theta


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_adamw_without_decay_is_adam(seed):
    rng = np.random.default_rng(seed)
    theta = rng.normal(size=5)
    grads = [rng.normal(size=5) for _ in range(int(rng.integers(1, 30)))]
    state = AdamWState(learning_rate=0.01, weight_decay=0.0)
    params = {"w": theta}
    for g in grads:
        params, state = adamw_step(state, params, {"w": g})
    expected = reference_adam(theta, grads, 0.01, 0.9, 0.999, 1e-8)
    assert np.max(np.abs(params["w"] - expected)) < 1e-12


def test_warmup_schedule():
    assert [lr_multiplier(s, 2) for s in (1, 2, 3, 100)] == [0.5, 1.0, 1.0, 1.0]
    assert lr_multiplier(1, 0) == 1.0


# -- training --------------------------------------------------------------------------

def test_separable_binary_toy():
    rng = np.random.default_rng(5)
    X = rng.normal(size=(100, 2))
    X[:, 0] += np.sign(X[:, 0]) * 0.5  # margin around the separating line
    y = (X[:, 0] > 0).astype(int)
    cfg = TrainConfig(max_steps=500, batch_size=10, learning_rate=0.05, seed=1)
    head, history = train_head(X, y, ALCOHOL, cfg)
    pred = (forward(head, X)[:, 0] > 0).astype(int)
    assert np.mean(pred == y) == 1.0
    assert len(history) == 500 and np.mean(history[-50:]) < np.mean(history[:50])


def test_training_is_deterministic():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(40, 3)), rng.integers(0, 3, 40)
    cfg = TrainConfig(max_steps=50, batch_size=4, seed=7, learning_rate=0.01)
    h1, l1 = train_head(X, y, CHEST, cfg)
    h2, l2 = train_head(X, y, CHEST, cfg)
    assert h1.weights.tobytes() == h2.weights.tobytes() and h1.bias.tobytes() == h2.bias.tobytes()
    assert l1 == l2


def test_multitask_toy_learns_both_subtasks():
    rng = np.random.default_rng(2)
    n = 300
    y = np.stack([rng.integers(0, 3, n), rng.integers(0, 3, n)], axis=1)
    X = rng.normal(scale=0.3, size=(n, 6))
    X[np.arange(n), y[:, 0]] += 2.0
    X[np.arange(n), 3 + y[:, 1]] += 2.0
    head, _ = train_head(X, y, MULTI, TrainConfig(max_steps=500, batch_size=16, learning_rate=0.05, seed=0))
    z = forward(head, X)
    for s, (off, w) in enumerate(head.subtask_slices):
        assert np.mean(z[:, off:off + w].argmax(1) == y[:, s]) >= 0.95


def test_hidden_layer_head_trains():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(80, 2))
    y = (X[:, 0] * X[:, 1] > 0).astype(int)  # XOR-like, not linearly separable
    head, hist = train_head(X, y, ALCOHOL, TrainConfig(max_steps=1500, batch_size=16, learning_rate=0.02,
                                                       hidden_width=16, weight_decay=0.0))
    assert np.mean((forward(head, X)[:, 0] > 0) == y) > 0.9


def test_absent_class_warns_and_empty_data_fails():
    with pytest.warns(UserWarning, match="absent"):
        train_head(np.ones((4, 2)), [0, 1, 0, 1], CHEST, TrainConfig(max_steps=2))
    with pytest.raises(ValueError):
        train_head(np.zeros((0, 2)), [], CHEST, TrainConfig(max_steps=2))


def test_loss_kind_consistent_with_task():
    with pytest.raises(ValueError):
        train_head(np.ones((4, 2)), [0, 1, 0, 1], ALCOHOL, TrainConfig(max_steps=2, loss_kind="categorical_ce"))


def test_init_is_seeded_and_scaled():
    a = init_head(CHEST, 16, seed=3)
    b = init_head(CHEST, 16, seed=3)
    assert np.array_equal(a.weights, b.weights)
    assert np.all(np.abs(a.weights) <= 1 / 4) and np.all(a.bias == 0)


def test_checkpoint_round_trip(tmp_path):
    task = TaskSpec("t", "multitask", [["a", "b"], ["c", "d", "e"]], subtasks=("x", "y"))
    head = init_head(task, 5, seed=1, hidden_width=4)
    save_head(head, tmp_path / "h.json", TrainConfig(seed=1))
    again = load_head(tmp_path / "h.json")
    x = np.random.default_rng(0).normal(size=5)
    assert np.array_equal(forward(again, x), forward(head, x))
    assert again.subtask_slices == ((0, 2), (2, 3)) and again.task_kind == "multitask"
