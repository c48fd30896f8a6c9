import math
import struct
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from groklab.tensor_engine import (
    ConvergenceWarning,
    NonFiniteError,
    ShapeError,
    Tape,
    frobenius_norm,
    load_tensor,
    power_iteration,
    save_tensor,
    spectral_norm,
)

H = 1e-5


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / denom)


def fd_check(build, inputs, seed=0):
    """Max relative error between tape gradients and central differences.

    ``build(tape, nodes) -> node``; the scalar probed is ``sum(W * out)`` with a
    fixed random ``W`` so the whole Jacobian is exercised.
    """
    rng = np.random.default_rng([seed, 99])  # independent of the input stream

    def run(vals):
        tape = Tape()
        nodes = [tape.leaf(v, name=f"x{k}") for k, v in enumerate(vals)]
        out = build(tape, nodes)
        return tape, out

    _, out0 = run(inputs)
    W = rng.standard_normal(out0.shape)

    def scalar(vals):
        return float(np.sum(W * run(vals)[1].value))

    tape, out = run(inputs)
    loss = tape.sum(tape.mul(out, tape.constant(W))) if out.value.ndim else tape.scale(out, float(W))
    grads = tape.backward(loss)
    worst = 0.0
    for k, x in enumerate(inputs):
        num = np.zeros_like(x)
        for idx in np.ndindex(x.shape):
            plus = [v.copy() for v in inputs]
            minus = [v.copy() for v in inputs]
            plus[k][idx] += H
            minus[k][idx] -= H
            num[idx] = (scalar(plus) - scalar(minus)) / (2 * H)
        worst = max(worst, rel_err(grads[f"x{k}"], num))
    return worst


def away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


# ---------------------------------------------------------------- examples


def test_matmul_identity():
    A = np.arange(6.0).reshape(2, 3)
    t = Tape()
    assert np.array_equal(t.matmul(t.constant(np.eye(2)), t.constant(A)).value, A)


def test_softmax_uniform():
    t = Tape()
    out = t.row_softmax(t.constant(np.zeros((1, 3))))
    assert np.allclose(out.value, 1 / 3, rtol=0, atol=1e-15)


def test_softmax_shift_invariant_and_huge_logits():
    t = Tape()
    x = np.array([[1000.0, 1001.0, 1002.0]])
    a = t.row_softmax(t.constant(x)).value
    b = t.row_softmax(t.constant(x - 1000.0)).value
    assert np.all(np.isfinite(a)) and np.allclose(a, b, atol=1e-15)


def test_cross_entropy_ln2():
    t = Tape()
    loss = t.cross_entropy_from_logits(t.constant(np.zeros(2)), 0)
    assert float(loss.value) == pytest.approx(math.log(2), abs=1e-15)


def test_backward_sum_gives_ones():
    for shape in [(3,), (2, 4), (2, 3, 4)]:
        t = Tape()
        x = t.leaf(np.random.default_rng(0).standard_normal(shape), name="x")
        g = t.backward(t.sum(x))["x"]
        assert g.shape == shape and np.all(g == 1.0)


def test_backward_closed_form_half_norm():
    rng = np.random.default_rng(1)
    Wv, xv = rng.standard_normal((4, 3)), rng.standard_normal((3, 1))
    t = Tape()
    W, x = t.leaf(Wv, name="W"), t.constant(xv)
    y = t.matmul(W, x)
    loss = t.scale(t.sum(t.mul(y, y)), 0.5)
    g = t.backward(loss)["W"]
    assert np.allclose(g, (Wv @ xv) @ xv.T, rtol=1e-13, atol=1e-14)


def test_backward_rejects_non_scalar():
    t = Tape()
    x = t.leaf(np.ones((2, 2)), name="x")
    with pytest.raises(ShapeError):
        t.backward(x)


def test_unreached_leaf_gets_zero_grad():
    t = Tape()
    a = t.leaf(np.ones(3), name="a")
    t.leaf(np.ones(2), name="b")
    g = t.backward(t.sum(a))
    assert np.all(g["b"] == 0.0)


def test_errors():
    t = Tape()
    with pytest.raises(ShapeError):
        t.matmul(t.constant(np.ones((2, 3))), t.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        t.add(t.constant(np.ones((2, 3))), t.constant(np.ones((3, 2))))
    with pytest.raises(NonFiniteError):
        t.leaf(np.array([1.0, np.nan]))
    with pytest.raises(ShapeError):
        t.leaf(np.ones((1, 1, 1, 1)))
    with pytest.raises(IndexError):
        t.embed_gather(t.constant(np.ones((3, 2))), [3])
    with pytest.raises(IndexError):
        t.cross_entropy_from_logits(t.constant(np.zeros((1, 2))), [2])


def test_shared_node_accumulates():
    t = Tape()
    x = t.leaf(np.array([2.0, 3.0]), name="x")
    y = t.add(t.mul(x, x), x)  # x^2 + x
    g = t.backward(t.sum(y))["x"]
    assert np.allclose(g, 2 * np.array([2.0, 3.0]) + 1)


# ---------------------------------------------------------------- per-op FD at 1e-6

RNG = np.random.default_rng(1234)
OPS = {
    "matmul2d": (lambda t, n: t.matmul(n[0], n[1]), [RNG.standard_normal((3, 4)), RNG.standard_normal((4, 2))]),
    "matmul3d2d": (lambda t, n: t.matmul(n[0], n[1]), [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((4, 5))]),
    "matmul3d3d": (lambda t, n: t.matmul(n[0], n[1]), [RNG.standard_normal((2, 3, 4)), RNG.standard_normal((2, 4, 3))]),
    "add": (lambda t, n: t.add(n[0], n[1]), [RNG.standard_normal((3, 2)), RNG.standard_normal((3, 2))]),
    "sub": (lambda t, n: t.sub(n[0], n[1]), [RNG.standard_normal((3, 2)), RNG.standard_normal((3, 2))]),
    "mul": (lambda t, n: t.mul(n[0], n[1]), [RNG.standard_normal((2, 3)), RNG.standard_normal((2, 3))]),
    "scale": (lambda t, n: t.scale(n[0], -2.5), [RNG.standard_normal((2, 3))]),
    "transpose2d": (lambda t, n: t.transpose(n[0]), [RNG.standard_normal((2, 3))]),
    "transpose3d": (lambda t, n: t.transpose(n[0]), [RNG.standard_normal((2, 3, 4))]),
    "relu": (lambda t, n: t.relu(n[0]), [away_from_zero(RNG, (3, 4))]),
    "softmax": (lambda t, n: t.row_softmax(n[0]), [RNG.standard_normal((3, 5))]),
    "softmax_masked": (
        lambda t, n: t.row_softmax(n[0], np.tril(np.ones((3, 3), dtype=bool))),
        [RNG.standard_normal((2, 3, 3))],
    ),
    "embed_gather": (lambda t, n: t.embed_gather(n[0], np.array([[0, 2, 2], [1, 0, 4]])), [RNG.standard_normal((5, 3))]),
    "narrow": (lambda t, n: t.narrow(n[0], -1, 1, 3), [RNG.standard_normal((2, 3, 4))]),
    "select": (lambda t, n: t.select(n[0], 1, 2), [RNG.standard_normal((2, 3, 4))]),
    "select_keep": (lambda t, n: t.select(n[0], 1, 0, keepdims=True), [RNG.standard_normal((2, 3, 4))]),
    "concat": (lambda t, n: t.concat([n[0], n[1]], axis=0), [RNG.standard_normal((2, 3)), RNG.standard_normal((1, 3))]),
    "layer_norm": (lambda t, n: t.layer_norm(n[0]), [RNG.standard_normal((3, 6))]),
    "sum": (lambda t, n: t.sum(n[0]), [RNG.standard_normal((2, 3))]),
    "cross_entropy": (lambda t, n: t.cross_entropy_from_logits(n[0], [1, 0, 3]), [RNG.standard_normal((3, 4))]),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_op_gradient_fd_1e6(name):
    build, inputs = OPS[name]
    assert fd_check(build, inputs) < 1e-6


def test_random_three_op_graph():
    rng = np.random.default_rng(7)
    inputs = [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))]
    build = lambda t, n: t.row_softmax(t.relu(t.matmul(n[0], n[1])))
    # shift away from relu kinks
    for _ in range(10):
        pre = inputs[0] @ inputs[1]
        if np.min(np.abs(pre)) > 1e-3:
            break
        inputs = [rng.standard_normal((3, 4)), rng.standard_normal((4, 5))]
    assert fd_check(build, inputs) < 1e-6


# ---------------------------------------------------------------- 100-case suites

dims = st.integers(1, 4)


@settings(max_examples=100, deadline=None)
@given(m=dims, k=dims, n=dims, seed=st.integers(0, 10**6))
def test_suite_matmul(m, k, n, seed):
    r = np.random.default_rng(seed)
    assert fd_check(lambda t, x: t.matmul(x[0], x[1]), [r.standard_normal((m, k)), r.standard_normal((k, n))], seed) < 1e-4


@settings(max_examples=100, deadline=None)
@given(b=dims, m=dims, n=st.integers(2, 5), seed=st.integers(0, 10**6))
def test_suite_softmax_layernorm(b, m, n, seed):
    r = np.random.default_rng(seed)
    x = 3 * r.standard_normal((b, m, n))
    assert fd_check(lambda t, v: t.row_softmax(v[0]), [x], seed) < 1e-4
    assert fd_check(lambda t, v: t.layer_norm(v[0]), [x], seed) < 1e-4


@settings(max_examples=100, deadline=None)
@given(n=dims, c=st.integers(2, 6), seed=st.integers(0, 10**6))
def test_suite_cross_entropy(n, c, seed):
    r = np.random.default_rng(seed)
    labels = r.integers(0, c, size=n)
    assert fd_check(lambda t, v: t.cross_entropy_from_logits(v[0], labels), [2 * r.standard_normal((n, c))], seed) < 1e-4


@settings(max_examples=100, deadline=None)
@given(V=st.integers(1, 6), d=dims, n=st.integers(1, 8), seed=st.integers(0, 10**6))
def test_suite_gather_and_elementwise(V, d, n, seed):
    r = np.random.default_rng(seed)
    ids = r.integers(0, V, size=n)
    table = r.standard_normal((V, d))
    assert fd_check(lambda t, v: t.embed_gather(v[0], ids), [table], seed) < 1e-4
    a, b = away_from_zero(r, (n, d)), r.standard_normal((n, d))
    assert fd_check(lambda t, v: t.mul(t.relu(v[0]), t.sub(v[1], v[0])), [a, b], seed) < 1e-4


@settings(max_examples=100, deadline=None)
@given(shape=st.tuples(dims, dims, dims), seed=st.integers(0, 10**6))
def test_softmax_rows_are_distributions(shape, seed):
    x = 10 * np.random.default_rng(seed).standard_normal(shape)
    s = Tape().row_softmax(Tape().constant(x)).value
    assert np.all(s >= 0)
    assert np.allclose(s.sum(axis=-1), 1.0, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- norms


def test_norm_examples():
    D = np.diag([3.0, 4.0])
    assert frobenius_norm(D) == 5.0
    assert spectral_norm(D) == pytest.approx(4.0, rel=1e-12)
    Z = np.zeros((3, 2))
    assert frobenius_norm(Z) == 0.0 and spectral_norm(Z) == 0.0


def test_spectral_matches_svd():
    rng = np.random.default_rng(5)
    for shape in [(1, 1), (8, 5), (5, 8), (30, 30), (64, 128)]:
        M = rng.standard_normal(shape)
        assert spectral_norm(M) == pytest.approx(np.linalg.svd(M, compute_uv=False)[0], rel=1e-6)


def test_spectral_reports_non_convergence():
    M = np.diag([1.0, 0.999999, 0.5])
    res = power_iteration(M, max_iters=3)
    assert not res.converged and res.residual > 0 and res.iterations == 3
    with warnings.catch_warnings(record=True) as w:
        warnings.simplefilter("always")
        v = spectral_norm(M, max_iters=3)
    assert any(issubclass(x.category, ConvergenceWarning) for x in w)
    assert 0 < v <= 1.0 + 1e-12


def test_spectral_seeded_start_reproducible():
    M = np.random.default_rng(3).standard_normal((6, 4))
    assert power_iteration(M, seed=11) == power_iteration(M, seed=11)


@settings(max_examples=200, deadline=None)
@given(m=st.integers(1, 20), n=st.integers(1, 20), seed=st.integers(0, 10**6))
def test_norm_inequality(m, n, seed):
    M = np.random.default_rng(seed).standard_normal((m, n))
    s, f = spectral_norm(M), frobenius_norm(M)
    assert s <= f + 1e-9
    assert f <= math.sqrt(min(m, n)) * s + 1e-9


# ---------------------------------------------------------------- binary io


@pytest.mark.parametrize("shape", [(), (3,), (2, 5), (2, 3, 4), (0, 3)])
def test_tensor_roundtrip(tmp_path, shape):
    x = np.random.default_rng(0).standard_normal(shape)
    path = tmp_path / "t.bin"
    save_tensor(path, x)
    y = load_tensor(path)
    assert y.shape == x.shape and np.array_equal(x, y)


def test_tensor_layout_little_endian(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.array([[1.0, 2.0, 3.0]]))
    raw = path.read_bytes()
    assert struct.unpack("<3Q", raw[:24]) == (2, 1, 3)
    assert struct.unpack("<3d", raw[24:]) == (1.0, 2.0, 3.0)


def test_tensor_load_rejects_truncated(tmp_path):
    path = tmp_path / "t.bin"
    save_tensor(path, np.ones((2, 2)))
    path.write_bytes(path.read_bytes()[:-8])
    with pytest.raises(ValueError):
        load_tensor(path)
