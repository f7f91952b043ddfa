import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from reallm import numerics as nx
from reallm.numerics import ContractError, DimensionError, Tensor


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=a.dtype)
    for i in range(m):
        for j in range(n):
            acc = a.dtype.type(0)
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def test_matmul_identity():
    b = Tensor([[1.0, 2.0], [3.0, 4.0]])
    np.testing.assert_array_equal(nx.matmul(Tensor(np.eye(2)), b).data, b.data)


def test_matmul_hand_case():
    assert nx.matmul(Tensor([[1.0, 2.0]]), Tensor([[3.0], [4.0]])).data.tolist() == [[11.0]]


def test_matmul_matches_triple_loop():
    rng = np.random.default_rng(0)
    # small integers keep every partial sum exact in float32, so summation order cannot matter
    a = rng.integers(-8, 8, (3, 4)).astype(np.float32)
    b = rng.integers(-8, 8, (4, 5)).astype(np.float32)
    np.testing.assert_array_equal(nx.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))


def test_matmul_gradients():
    rng = np.random.default_rng(1)
    a = Tensor(rng.standard_normal((3, 4)), requires_grad=True, dtype=np.float64)
    b = Tensor(rng.standard_normal((4, 2)), requires_grad=True, dtype=np.float64)
    nx.backward(nx.tensor_sum(nx.matmul(a, b)))
    dc = np.ones((3, 2))
    np.testing.assert_allclose(a.grad, dc @ b.data.T)
    np.testing.assert_allclose(b.grad, a.data.T @ dc)


def test_softmax_symmetric_and_large():
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[0.0, 0.0]])).data, [[0.5, 0.5]])
    np.testing.assert_allclose(nx.softmax_rows(Tensor([[1000.0, 1000.0]])).data, [[0.5, 0.5]])


def test_softmax_matches_float64_reference():
    x = np.random.default_rng(2).standard_normal((1, 9)).astype(np.float32) * 3
    ref = np.exp(x.astype(np.float64)) / np.exp(x.astype(np.float64)).sum()
    assert np.abs(nx.softmax_rows(Tensor(x)).data - ref).max() <= 1e-6


def test_softmax_rejects_non_finite():
    with pytest.raises(FloatingPointError):
        nx.softmax_rows(Tensor([[0.0, np.inf]]))


@given(arrays(np.float32, st.tuples(st.integers(1, 5), st.integers(1, 12)),
              elements=st.floats(-1e4, 1e4, width=32)))
def test_softmax_rows_sum_to_one(x):
    p = nx.softmax_rows(Tensor(x)).data
    assert np.all(np.abs(p.sum(axis=1) - 1.0) <= 1e-6)


def test_rms_norm_cases():
    gain = Tensor(np.ones(4))
    np.testing.assert_allclose(nx.rms_norm(Tensor(np.ones((1, 4))), gain).data, np.ones((1, 4)), atol=1e-5)
    np.testing.assert_array_equal(nx.rms_norm(Tensor(np.zeros((1, 4))), gain).data, np.zeros((1, 4)))
    x = np.random.default_rng(3).standard_normal((2, 6)).astype(np.float32)
    g = np.random.default_rng(4).standard_normal(6).astype(np.float32)
    x64 = x.astype(np.float64)
    ref = x64 / np.sqrt((x64**2).mean(axis=1, keepdims=True) + 1e-5) * g
    assert np.abs(nx.rms_norm(Tensor(x), Tensor(g)).data - ref).max() <= 1e-6


def test_rms_norm_gain_mismatch():
    with pytest.raises(DimensionError):
        nx.rms_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)))


def test_cross_entropy_cases():
    assert nx.cross_entropy_loss(Tensor(np.zeros((3, 4))), [0, 1, 3]).item() == pytest.approx(math.log(4), abs=1e-6)
    logits = np.zeros((1, 5))
    logits[0, 2] = 100.0
    assert nx.cross_entropy_loss(Tensor(logits), [2]).item() == pytest.approx(0.0, abs=1e-6)


def test_cross_entropy_matches_reference_and_gradient():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((5, 8))
    t = rng.integers(0, 8, 5)
    w = rng.uniform(0.5, 2.0, 5)
    logits = Tensor(x, requires_grad=True, dtype=np.float64)
    loss = nx.cross_entropy_loss(logits, t, w)
    logp = x - np.log(np.exp(x).sum(axis=1, keepdims=True))
    ref = -(w * logp[np.arange(5), t]).sum() / w.sum()
    assert abs(loss.item() - ref) <= 1e-6
    nx.backward(loss)
    p = np.exp(logp)
    onehot = np.eye(8)[t]
    np.testing.assert_allclose(logits.grad, (p - onehot) * (w / w.sum())[:, None], atol=1e-12)


def test_cross_entropy_bad_target_names_position():
    with pytest.raises(IndexError, match="position 1"):
        nx.cross_entropy_loss(Tensor(np.zeros((2, 3))), [0, 7])


def test_cross_entropy_ignores_zero_weight_positions_exactly():
    rng = np.random.default_rng(6)
    x = rng.standard_normal((4, 5))
    w = np.array([1.0, 0.0, 1.0, 0.0])
    a = nx.cross_entropy_loss(Tensor(x), [1, -1, 2, -1], w).item()
    x2 = x.copy()
    x2[[1, 3]] = rng.standard_normal((2, 5)) * 50
    assert nx.cross_entropy_loss(Tensor(x2), [1, -1, 2, -1], w).item() == a


def test_backward_sum_and_square():
    x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
    nx.backward(nx.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 3)))
    y = Tensor(np.array([1.5, -2.0, 3.0]), requires_grad=True)
    nx.backward(nx.mul(nx.tensor_sum(nx.mul(y, y)), 0.5))
    np.testing.assert_allclose(y.grad, y.data)


def test_backward_accumulates_on_leaves():
    x = Tensor(np.ones(3), requires_grad=True)
    nx.backward(nx.tensor_sum(x))
    nx.backward(nx.tensor_sum(x))
    np.testing.assert_array_equal(x.grad, 2 * np.ones(3))
    x.zero_grad()
    assert x.grad is None


def test_backward_rejects_non_scalar():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(nx.mul(x, 2.0))


def test_backward_shared_subexpression():
    x = Tensor(np.array([2.0]), requires_grad=True)
    y = nx.mul(x, x)
    nx.backward(nx.tensor_sum(nx.add(y, y)))
    np.testing.assert_allclose(x.grad, [8.0])


def test_no_grad_records_nothing():
    x = Tensor(np.ones(2), requires_grad=True)
    with nx.no_grad():
        y = nx.mul(x, 3.0)
    assert not y.requires_grad


def test_adam_zero_gradient_leaves_params():
    p = np.array([1.0, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    nx.adam_step([p], [np.zeros(2)], ([m], [v]), 1, 0.1)
    np.testing.assert_array_equal(p, [1.0, -2.0])


def test_adam_first_step_matches_reference():
    g = np.array([0.3, -1e-3, 2.0])
    p = np.zeros(3)
    m, v = np.zeros(3), np.zeros(3)
    nx.adam_step([p], [g], ([m], [v]), 1, 0.01)
    mhat = 0.1 * g / 0.1
    vhat = 0.001 * g * g / 0.001
    np.testing.assert_allclose(p, -0.01 * mhat / (np.sqrt(vhat) + 1e-8), rtol=1e-12)


def test_adam_moments_follow_ema():
    g = np.array([0.5, -0.25])
    p = np.zeros(2)
    m, v = np.zeros(2), np.zeros(2)
    nx.adam_step([p], [g], ([m], [v]), 1, 0.01)
    nx.adam_step([p], [g], ([m], [v]), 2, 0.01)
    np.testing.assert_allclose(m, (1 - 0.9**2) * g)
    np.testing.assert_allclose(v, (1 - 0.999**2) * g * g)


def test_adam_contract_errors():
    with pytest.raises(DimensionError):
        nx.adam_step([np.zeros(2)], [np.zeros(3)], ([np.zeros(2)], [np.zeros(2)]), 1, 0.1)
    with pytest.raises(ContractError):
        nx.adam_step([np.zeros(2)], [np.zeros(2)], ([np.zeros(2)], [np.zeros(2)]), 0, 0.1)


@given(st.integers(0, 2**31 - 1))
def test_forward_is_deterministic(seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((3, 4)).astype(np.float32)
    w = rng.standard_normal((4, 4)).astype(np.float32)

    def run():
        h = nx.silu(nx.matmul(Tensor(x), Tensor(w)))
        return nx.softmax_rows(nx.rms_norm(h, Tensor(np.ones(4, np.float32)))).data

    assert run().tobytes() == run().tobytes()


@pytest.mark.parametrize("op", ["silu", "rope", "transpose", "concat", "gather", "sub", "reshape"])
def test_op_gradients_against_finite_differences(op):
    rng = np.random.default_rng(7)
    x0 = rng.standard_normal((2, 4))
    probe = rng.standard_normal((2, 4))
    cos, sin = np.cos(rng.uniform(0, 3, (2, 4))), np.sin(rng.uniform(0, 3, (2, 4)))

    def f(t):
        if op == "silu":
            y = nx.silu(t)
        elif op == "rope":
            y = nx.rope(t, cos, sin)
        elif op == "transpose":
            y = nx.transpose(nx.transpose(t, (1, 0)), (1, 0))
        elif op == "concat":
            y = nx.reshape(nx.concat([t, t], axis=0), (4, 4))
            return nx.tensor_sum(nx.mul(y, Tensor(np.vstack([probe, probe]))))
        elif op == "gather":
            y = nx.gather_rows(t, np.array([1, 1, 0]))
            return nx.tensor_sum(nx.mul(y, Tensor(np.vstack([probe, probe[:1]]))))
        elif op == "sub":
            y = nx.sub(t, nx.mul(t, t))
        else:
            y = nx.reshape(nx.reshape(t, (8,)), (2, 4))
        return nx.tensor_sum(nx.mul(y, Tensor(probe)))

    t = Tensor(x0, requires_grad=True, dtype=np.float64)
    nx.backward(f(t))
    h = 1e-6
    fd = np.zeros_like(x0)
    for idx in np.ndindex(x0.shape):
        xp, xm = x0.copy(), x0.copy()
        xp[idx] += h
        xm[idx] -= h
        fd[idx] = (f(Tensor(xp, dtype=np.float64)).item() - f(Tensor(xm, dtype=np.float64)).item()) / (2 * h)
    np.testing.assert_allclose(t.grad, fd, rtol=1e-6, atol=1e-8)
