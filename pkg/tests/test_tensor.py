import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from elastiserve import tensor as T
from elastiserve.model import ModelConfig, TransformerLM, run
from elastiserve.task import TaskMix, TaskVocab, sample_batches
from elastiserve.training import batch_loss, watch_params


def test_matmul_identity():
    eye = np.eye(2)
    assert np.array_equal(T.matmul(eye, eye), eye)


def test_matmul_hand_case():
    a = np.array([[1.0, 2.0], [3.0, 4.0]])
    b = np.array([[0.0], [1.0]])
    assert np.array_equal(T.matmul(a, b), [[2.0], [4.0]])


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    # integer-valued entries make every partial sum exact in float64
    a = rng.integers(-5, 6, size=(8, 8)).astype(np.float64)
    b = rng.integers(-5, 6, size=(8, 8)).astype(np.float64)
    assert np.array_equal(T.matmul(a, b), T.naive_matmul(a, b))


def test_matmul_random_close_to_triple_loop():
    rng = np.random.default_rng(1)
    a, b = rng.standard_normal((8, 8)), rng.standard_normal((8, 8))
    np.testing.assert_allclose(T.matmul(a, b), T.naive_matmul(a, b), rtol=1e-12, atol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(T.ShapeError):
        T.matmul(np.ones((2, 3)), np.ones((2, 3)))


def test_matmul_dtype_mismatch():
    with pytest.raises(T.DTypeError):
        T.matmul(np.ones((2, 2), np.float32), np.ones((2, 2), np.float64))


def test_grad_of_linear_sum():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((5, 3))
    tape = T.GradTape()
    w = tape.watch("w", rng.standard_normal((4, 3)))
    loss = T.sum_all(T.linear(x, w))
    # d/dW sum(x W^T) = column sums of x broadcast over the rows of W
    np.testing.assert_allclose(T.grad_of(tape, loss, w), np.tile(x.sum(0), (4, 1)))


def test_grad_of_zero_input():
    tape = T.GradTape()
    w1 = tape.watch("w1", np.ones((4, 3)))
    w2 = tape.watch("w2", np.ones((2, 4)))
    h = T.gelu(T.linear(np.zeros((5, 3)), w1))
    loss = T.sum_all(T.linear(h, w2))
    assert not np.any(tape.grad_of(loss, w1))


def test_grad_of_unregistered():
    tape = T.GradTape()
    w = tape.watch("w", np.ones((2, 2)))
    loss = T.sum_all(T.linear(np.ones((1, 2)), w))
    with pytest.raises(T.UnregisteredWeightError):
        tape.grad_of(loss, "other")
    with pytest.raises(T.UnregisteredWeightError):
        tape.grad_of(loss, T.Var(np.ones((2, 2)), name="w"))


def _central_fd(f, w, h=1e-5, n=12, rng=None):
    """Finite differences on ``n`` random entries of ``w`` (modified in place)."""
    rng = rng or np.random.default_rng(0)
    idx = [tuple(rng.integers(0, s) for s in w.shape) for _ in range(n)]
    out = []
    for i in idx:
        old = w[i]
        w[i] = old + h
        up = f()
        w[i] = old - h
        down = f()
        w[i] = old
        out.append((up - down) / (2 * h))
    return idx, np.array(out)


def test_two_layer_mlp_finite_differences():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((6, 5))
    w1, w2 = rng.standard_normal((7, 5)), rng.standard_normal((3, 7))
    targets = rng.integers(0, 3, size=6)

    def loss_of(a, b):
        return T.cross_entropy(T.linear(T.silu(T.linear(x, a)), b), targets)

    tape = T.GradTape()
    loss = loss_of(tape.watch("w1", w1), tape.watch("w2", w2))
    for name, w in (("w1", w1), ("w2", w2)):
        g = tape.grad_of(loss, name)
        idx, fd = _central_fd(lambda: float(loss_of(w1, w2)), w, rng=rng)
        an = np.array([g[i] for i in idx])
        assert np.max(np.abs(an - fd) / np.maximum(np.abs(fd), 1e-6)) <= 1e-4


def test_transformer_gradients_match_finite_differences():
    cfg = ModelConfig(2, 2, 4, 8, 20, dtype="float64", bias=True, seed=5)
    model = TransformerLM.create(cfg)
    vocab = TaskVocab(n_keys=3, n_alts=2, n_fillers=4)
    batch = sample_batches(0, 1, 3, TaskMix(2, 3, 1), vocab)[0]
    tape = T.GradTape()
    loss = batch_loss(cfg, watch_params(tape, model.params), batch)
    grads = tape.gradients(loss)
    named = dict(model.params.named())
    rng = np.random.default_rng(4)
    worst = 0.0
    for name, g in grads.items():
        idx, fd = _central_fd(lambda: float(batch_loss(cfg, model.params, batch)), named[name], n=3, rng=rng)
        an = np.array([g[i] for i in idx])
        # entries whose derivative is ~0 carry only rounding noise
        big = np.abs(fd) > 1e-7
        if big.any():
            worst = max(worst, float(np.max(np.abs(an[big] - fd[big]) / np.abs(fd[big]))))
    assert worst <= 1e-4


def test_forward_and_gradients_deterministic():
    cfg = ModelConfig(2, 2, 4, 8, 20, dtype="float64", seed=1)
    tokens = np.array([[1, 5, 7, 2, 9]])

    def once():
        model = TransformerLM.create(cfg)
        tape = T.GradTape()
        logits = run(cfg, watch_params(tape, model.params), tokens)
        loss = T.cross_entropy(logits, np.array([[5, 7, 2, 9, 3]]))
        return T.value(logits), tape.gradients(loss)

    (l1, g1), (l2, g2) = once(), once()
    assert np.array_equal(l1, l2)
    assert all(np.array_equal(g1[k], g2[k]) for k in g1)


@settings(max_examples=30, deadline=None)
@given(m=st.integers(1, 5), k=st.integers(1, 5), n=st.integers(1, 5), seed=st.integers(0, 2**16))
def test_matmul_gradients_property(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((m, k)), rng.standard_normal((k, n))
    g = rng.standard_normal((m, n))
    tape = T.GradTape()
    va, vb = tape.watch("a", a), tape.watch("b", b)
    loss = T.sum_all(T.mul(T.matmul(va, vb), g))
    np.testing.assert_allclose(tape.grad_of(loss, "a"), g @ b.T, rtol=1e-10, atol=1e-12)
    np.testing.assert_allclose(tape.grad_of(loss, "b"), a.T @ g, rtol=1e-10, atol=1e-12)
