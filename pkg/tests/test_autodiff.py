import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

import _oracles as oracle
from trimformer import autodiff as ad
from trimformer.autodiff import Tape, Tensor
from trimformer.errors import DataError, ShapeError, TapeError


def t64(arr, requires_grad=False):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=requires_grad)


# ---------------------------------------------------------------- matmul


def test_matmul_identity():
    a = t64([[1.0, 2.0], [3.0, 4.0]])
    eye = t64(np.eye(2))
    assert np.array_equal(ad.matmul(eye, a).data, a.data)
    assert np.array_equal(ad.matmul(a, eye).data, a.data)


def test_matmul_vs_triple_loop():
    rng = np.random.default_rng(42)
    a = rng.normal(size=(5, 7))
    b = rng.normal(size=(7, 3))
    got = ad.matmul(t64(a), t64(b)).data
    assert np.abs(got - oracle.naive_matmul(a, b)).max() < 1e-6


@given(
    m=st.integers(1, 4), k=st.integers(1, 4), n=st.integers(1, 4),
    seed=st.integers(0, 10_000),
)
def test_matmul_matches_oracle(m, k, n, seed):
    rng = np.random.default_rng(seed)
    a = rng.normal(size=(m, k))
    b = rng.normal(size=(k, n))
    got = ad.matmul(t64(a), t64(b)).data
    assert np.abs(got - oracle.naive_matmul(a, b)).max() < 1e-9


def test_matmul_shape_mismatch():
    with pytest.raises(ShapeError):
        ad.matmul(t64(np.ones((2, 3))), t64(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.matmul(t64(np.ones((2, 2, 3))), t64(np.ones((3, 2, 2))))


# ---------------------------------------------------------------- layer norm


def test_layer_norm_constant_rows_zero():
    x = t64(np.full((4, 6), 3.7))
    out = ad.layer_norm(x, t64(np.ones(6)), t64(np.zeros(6)))
    assert np.abs(out.data).max() < 1e-8


def test_layer_norm_gamma_zero_gives_beta():
    rng = np.random.default_rng(0)
    x = t64(rng.normal(size=(3, 5)))
    beta = rng.normal(size=5)
    out = ad.layer_norm(x, t64(np.zeros(5)), t64(beta))
    assert np.allclose(out.data, np.broadcast_to(beta, (3, 5)))


def test_layer_norm_vs_formula():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 8)) * 4
    gamma = rng.normal(size=8)
    beta = rng.normal(size=8)
    got = ad.layer_norm(t64(x), t64(gamma), t64(beta)).data
    want = oracle.naive_layer_norm(x, gamma, beta)
    assert np.abs(got - want).max() < 1e-6


def test_layer_norm_output_statistics():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 64)) * 5  # variance >> eps
    out = ad.layer_norm(t64(x), t64(np.ones(64)), t64(np.zeros(64))).data
    assert np.abs(out.mean(axis=-1)).max() < 1e-5
    assert np.abs(out.var(axis=-1) - 1.0).max() < 1e-3


def test_layer_norm_bad_eps_and_shape():
    x = t64(np.ones((2, 4)))
    with pytest.raises(ShapeError):
        ad.layer_norm(x, t64(np.ones(4)), t64(np.zeros(4)), eps=0.0)
    with pytest.raises(ShapeError):
        ad.layer_norm(x, t64(np.ones(3)), t64(np.zeros(4)))


# ---------------------------------------------------------------- softmax


def test_softmax_uniform_pair():
    out = ad.softmax(t64([0.0, 0.0])).data
    assert np.allclose(out, [0.5, 0.5])


def test_softmax_closed_form():
    out = ad.softmax(t64([np.log(2.0), 0.0])).data
    assert np.allclose(out, [2 / 3, 1 / 3], atol=1e-12)


@given(
    vals=st.lists(st.floats(-30, 30), min_size=2, max_size=6),
    shift=st.floats(-50, 50),
)
def test_softmax_shift_invariance_and_rows_sum(vals, shift):
    x = np.array(vals, dtype=np.float64)
    a = ad.softmax(t64(x)).data
    b = ad.softmax(t64(x + shift)).data
    assert abs(a.sum() - 1.0) < 1e-6
    assert np.abs(a - b).max() < 1e-9
    assert (a >= 0).all()


# ---------------------------------------------------------------- cross entropy


def test_cross_entropy_uniform_logits():
    v = 11
    logits = t64(np.zeros((2, 3, v)))
    targets = np.zeros((2, 3), dtype=np.int64)
    assert abs(ad.cross_entropy(logits, targets).item() - np.log(v)) < 1e-9


def test_cross_entropy_margin_limit():
    losses = []
    for margin in (5.0, 20.0, 60.0):
        logits = np.zeros((1, 1, 8))
        logits[0, 0, 3] = margin
        losses.append(ad.cross_entropy(t64(logits), np.array([[3]])).item())
    assert losses[0] > losses[1] > losses[2]
    assert losses[2] < 1e-9


def test_cross_entropy_vs_log_softmax_oracle(rng):
    logits = rng.normal(size=(2, 4, 9)) * 3
    targets = rng.integers(0, 9, size=(2, 4))
    want = -np.take_along_axis(
        oracle.naive_log_softmax(logits), targets[..., None], axis=-1
    ).mean()
    got = ad.cross_entropy(t64(logits), targets).item()
    assert abs(got - want) < 1e-6


def test_cross_entropy_bad_targets():
    logits = t64(np.zeros((1, 2, 4)))
    with pytest.raises(DataError):
        ad.cross_entropy(logits, np.array([[0, 4]]))


# ---------------------------------------------------------------- tape & backward


def test_backward_sum_gives_ones():
    w = t64(np.arange(6.0).reshape(2, 3), requires_grad=True)
    with Tape():
        loss = ad.tsum(w)
    ad.backward(loss)
    assert np.array_equal(w.grad, np.ones((2, 3)))


def test_backward_squared_norm_gives_2w():
    rng = np.random.default_rng(3)
    w = t64(rng.normal(size=(3, 4)), requires_grad=True)
    with Tape():
        loss = ad.tsum(ad.mul(w, w))
    ad.backward(loss)
    assert np.allclose(w.grad, 2 * w.data, atol=1e-12)


def test_backward_without_tape_raises():
    w = t64(np.ones(3), requires_grad=True)
    loss = ad.tsum(w)  # no tape active
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_tape_consumed_once():
    w = t64(np.ones(3), requires_grad=True)
    with Tape():
        loss = ad.tsum(w)
    ad.backward(loss)
    with pytest.raises(TapeError):
        ad.backward(loss)


def test_no_tape_records_nothing():
    w = t64(np.ones((2, 2)), requires_grad=True)
    before = ad.nodes_recorded_total()
    ad.matmul(w, w)
    ad.softmax(w)
    assert ad.nodes_recorded_total() == before


def test_no_grad_hides_tape():
    w = t64(np.ones((2, 2)), requires_grad=True)
    with Tape() as tape:
        with ad.no_grad():
            ad.matmul(w, w)
        assert not tape.nodes
        out = ad.matmul(w, w)
        assert len(tape.nodes) == 1 and out.requires_grad


def test_fan_out_gradient_accumulates():
    # x feeds two consumers; grad is the sum of both paths.
    x = t64(np.array([1.0, 2.0]), requires_grad=True)
    w = t64(np.array([3.0, 4.0]), requires_grad=True)
    with Tape():
        a = ad.add(x, x)
        b = ad.mul(x, w)
        loss = ad.tsum(ad.add(a, b))
    ad.backward(loss)
    assert np.allclose(x.grad, 2.0 + w.data)
    assert np.allclose(w.grad, x.data)


def test_grad_buffers_are_independent():
    # Regression guard for the alias-aware accumulation: two leaves fed by
    # one add must not share a gradient buffer.
    x = t64(np.ones(4), requires_grad=True)
    y = t64(np.ones(4), requires_grad=True)
    with Tape():
        s = ad.add(x, y)
        loss = ad.tsum(ad.add(s, ad.mul(x, 3.0)))
    ad.backward(loss)
    assert np.allclose(x.grad, 4.0)
    assert np.allclose(y.grad, 1.0)


# ---------------------------------------------------------------- fd checks


def test_fd_smooth_primitives():
    # Kink-free composite: matmul -> layer_norm -> softmax-weighted sum ->
    # log/exp -> cross entropy. Checked at the conventional h=1e-3.
    rng = np.random.default_rng(5)
    w1 = t64(rng.normal(size=(6, 5)), requires_grad=True)
    w2 = t64(rng.normal(size=(5, 7)), requires_grad=True)
    gamma = t64(np.ones(7), requires_grad=True)
    beta = t64(np.zeros(7), requires_grad=True)
    x = rng.normal(size=(3, 6))
    targets = rng.integers(0, 7, size=(1, 3))

    def compute():
        h = ad.matmul(ad.matmul(Tensor(x), w1), w2)
        h = ad.layer_norm(h, gamma, beta)
        h = ad.mul(ad.exp(ad.mul(h, 0.1)), 1.0)
        return ad.cross_entropy(ad.reshape(h, (1, 3, 7)), targets)

    with Tape():
        loss = compute()
    ad.backward(loss)
    oracle.check_fd(
        lambda: compute().item(),
        {"w1": w1, "w2": w2, "gamma": gamma, "beta": beta},
        h=1e-3,
        tol=1e-4,
    )


def test_fd_squared_relu_away_from_kink():
    rng = np.random.default_rng(6)
    w = t64(rng.normal(size=(4, 4)) + 2.0, requires_grad=True)  # positive region

    def compute():
        return ad.tsum(ad.squared_relu(ad.matmul(w, w)))

    with Tape():
        loss = compute()
    ad.backward(loss)
    oracle.check_fd(lambda: compute().item(), {"w": w}, h=1e-3, tol=1e-4)


def test_fd_gather_logsumexp_rope():
    rng = np.random.default_rng(7)
    w = t64(rng.normal(size=(2, 3, 4, 8)), requires_grad=True)
    cos = np.cos(rng.normal(size=(4, 8)))
    sin = np.sin(rng.normal(size=(4, 8)))
    idx = np.tile(np.array([1, 5, 6]), (2, 3, 4, 1))

    def compute():
        r = ad.rope(w, cos, sin)
        g = ad.gather_last(r, idx)
        return ad.tsum(ad.logsumexp(g))

    with Tape():
        loss = compute()
    ad.backward(loss)
    oracle.check_fd(lambda: compute().item(), {"w": w}, h=1e-3, tol=1e-4)


def test_fd_repeat_div_pow():
    rng = np.random.default_rng(8)
    a = t64(rng.normal(size=(2, 2, 3, 4)) + 3.0, requires_grad=True)
    b = t64(rng.normal(size=(2, 4, 3, 4)) + 5.0, requires_grad=True)

    def compute():
        r = ad.repeat(a, 2, axis=1)
        return ad.tsum(ad.pow_const(ad.div(r, b), 2.0))

    with Tape():
        loss = compute()
    ad.backward(loss)
    oracle.check_fd(lambda: compute().item(), {"a": a, "b": b}, h=1e-3, tol=1e-4)


# ---------------------------------------------------------------- misc


def test_determinism_bit_identical():
    rng = np.random.default_rng(9)
    a = rng.normal(size=(8, 8)).astype(np.float32)
    one = ad.softmax(ad.matmul(Tensor(a), Tensor(a))).data
    two = ad.softmax(ad.matmul(Tensor(a), Tensor(a))).data
    assert np.array_equal(one, two)


def test_non_finite_construction_rejected():
    with pytest.raises(DataError):
        Tensor(np.array([1.0, np.nan]))
    with pytest.raises(DataError):
        Tensor(np.array([np.inf]))


def test_embedding_lookup_and_grad():
    table = t64(np.arange(12.0).reshape(4, 3), requires_grad=True)
    ids = np.array([[0, 2], [2, 3]])
    with Tape():
        out = ad.embedding(table, ids)
        loss = ad.tsum(out)
    assert out.shape == (2, 2, 3)
    ad.backward(loss)
    # row 2 used twice, rows 0 and 3 once, row 1 never
    assert np.allclose(table.grad.sum(axis=1), [3.0, 0.0, 6.0, 3.0])
    with pytest.raises(DataError):
        ad.embedding(table, np.array([[4]]))
