import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eaclab import numgrad as ng


def fd(f, x, eps=1e-5):
    return ng.finite_diff_check(f, x, eps)


# tensors and tape ----------------------------------------------------------------


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_tensor_rejects_non_finite(bad):
    with pytest.raises(ng.NonFiniteError):
        ng.Tensor([1.0, bad])


def test_tensor_is_float64():
    assert ng.Tensor([1, 2]).data.dtype == np.float64


def test_matmul_identity():
    A = np.arange(9.0).reshape(3, 3)
    assert np.array_equal(ng.matmul(ng.Tensor(np.eye(3)), ng.Tensor(A)).data, A)


def test_matmul_hand_example():
    out = ng.matmul(ng.Tensor([[1.0, 2.0], [3.0, 4.0]]), ng.Tensor([[5.0], [6.0]]))
    assert out.data.tolist() == [[17.0], [39.0]]


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError, match="mismatch"):
        ng.matmul(ng.Tensor(np.ones((2, 3))), ng.Tensor(np.ones((2, 3))))


def test_matmul_grad_of_sum_is_ones_bT(rng):
    a, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3))
    al = ng.leaf(a)
    (g,) = ng.grad(ng.tsum(ng.matmul(al, ng.Tensor(b))), [al])
    np.testing.assert_allclose(g, np.ones((5, 3)) @ b.T, rtol=1e-12)
    assert fd(lambda x: ng.tsum(ng.matmul(x, ng.Tensor(b))), a, eps=1e-6) < 1e-6


def test_backward_square():
    x = ng.leaf(3.0)
    (g,) = ng.grad(ng.mul(x, x), [x])
    assert g == 6.0


def test_backward_norm_squared():
    z = ng.leaf([1.0, -2.0])
    (g,) = ng.grad(ng.tsum(ng.mul(z, z)), [z])
    assert g.tolist() == [2.0, -4.0]


def test_backward_softmax_cross_entropy():
    x = np.array([1.0, 2.0, 3.0])

    def loss(t):
        return ng.neg(ng.tsum(ng.pick(ng.log_softmax(ng.reshape(t, (1, 3))), [0], [2])))

    xl = ng.leaf(x)
    (g,) = ng.grad(loss(xl), [xl])
    p = np.exp(x) / np.exp(x).sum()
    np.testing.assert_allclose(g, p - np.eye(3)[2], atol=1e-14)
    assert fd(loss, x) < 1e-6


def test_backward_rejects_non_scalar():
    with pytest.raises(ValueError, match="scalar"):
        ng.backward(ng.leaf([1.0, 2.0]))


def test_unreachable_leaf_gets_zero():
    a, b = ng.leaf([1.0, 2.0]), ng.leaf([3.0])
    ga, gb = ng.grad(ng.tsum(a), [a, b])
    assert ga.tolist() == [1.0, 1.0] and gb.tolist() == [0.0]


def test_shared_subexpression_accumulates():
    x = ng.leaf(2.0)
    y = ng.mul(x, x)
    (g,) = ng.grad(ng.add(y, y), [x])
    assert g == 8.0


# finite differences --------------------------------------------------------------


def test_fd_sum_of_squares(rng):
    assert fd(lambda x: ng.tsum(ng.mul(x, x)), rng.normal(size=10)) < 1e-6


def test_fd_constant_function_is_zero():
    assert fd(lambda x: ng.Tensor(3.0), np.ones(4)) == 0.0


def test_fd_rejects_bad_eps():
    with pytest.raises(ValueError):
        fd(lambda x: ng.tsum(x), np.ones(2), eps=0.0)


def test_fd_reports_non_finite():
    with pytest.raises(ng.NonFiniteError), np.errstate(over="ignore"):
        ng.finite_diff_check(lambda x: ng.tsum(ng.exp(ng.scale(x, 1e6))), np.ones(2), analytic=np.zeros(2))


def _rand_weights(rng, *shape):
    return ng.Tensor(rng.normal(size=shape))


OPS = {
    "add": lambda x, r: ng.tsum(ng.mul(ng.add(x, _rand_weights(r, 3, 4)), _rand_weights(r, 3, 4))),
    "sub": lambda x, r: ng.tsum(ng.mul(ng.sub(_rand_weights(r, 3, 4), x), _rand_weights(r, 3, 4))),
    "mul": lambda x, r: ng.tsum(ng.mul(x, x)),
    "scale": lambda x, r: ng.tsum(ng.mul(ng.scale(x, -1.7), x)),
    "exp": lambda x, r: ng.tsum(ng.exp(ng.scale(x, 0.3))),
    "mean": lambda x, r: ng.tsum(ng.mul(ng.mean(x, axis=0), ng.mean(x, axis=0))),
    "tsum_axis": lambda x, r: ng.tsum(ng.mul(ng.tsum(x, axis=1), _rand_weights(r, 3))),
    "reshape": lambda x, r: ng.tsum(ng.mul(ng.reshape(x, (4, 3)), _rand_weights(r, 4, 3))),
    "swapaxes": lambda x, r: ng.tsum(ng.mul(x.T, _rand_weights(r, 4, 3))),
    "matmul": lambda x, r: ng.tsum(ng.mul(ng.matmul(x, _rand_weights(r, 4, 2)), _rand_weights(r, 3, 2))),
    "linear": lambda x, r: ng.tsum(ng.mul(ng.linear(x, _rand_weights(r, 5, 4), _rand_weights(r, 5)), _rand_weights(r, 3, 5))),
    "gelu": lambda x, r: ng.tsum(ng.mul(ng.gelu(x), _rand_weights(r, 3, 4))),
    "log_softmax": lambda x, r: ng.tsum(ng.mul(ng.log_softmax(x), _rand_weights(r, 3, 4))),
    "layer_norm": lambda x, r: ng.tsum(
        ng.mul(ng.layer_norm(x, _rand_weights(r, 4), _rand_weights(r, 4)), _rand_weights(r, 3, 4))
    ),
    "pick": lambda x, r: ng.tsum(ng.mul(ng.pick(x, [0, 2, 2], [1, 3, 0]), ng.Tensor([1.0, -2.0, 0.5]))),
    "embedding": lambda x, r: ng.tsum(ng.mul(ng.embedding(x, np.array([[0, 2, 2]])), _rand_weights(r, 1, 3, 4))),
}


@pytest.mark.parametrize("name", sorted(OPS))
def test_fd_primitive_ops(name):
    x = np.random.default_rng(7).normal(size=(3, 4))
    f = OPS[name]
    # the closure draws its constants from a fresh generator on every call
    assert fd(lambda t: f(t, np.random.default_rng(11)), x) < 1e-4


def test_fd_causal_softmax(rng):
    w = rng.normal(size=(1, 2, 3, 3))
    assert fd(lambda t: ng.tsum(ng.mul(ng.causal_softmax(t), ng.Tensor(w))), rng.normal(size=(1, 2, 3, 3))) < 1e-4


def test_fd_replace_rows(rng):
    x = ng.Tensor(rng.normal(size=(2, 3, 4)))
    w = ng.Tensor(rng.normal(size=(2, 3, 4)))
    f = lambda z: ng.tsum(ng.mul(ng.replace_rows(x, np.array([1]), np.array([2]), z), w))
    assert fd(f, rng.normal(size=4)) < 1e-4


@pytest.mark.parametrize("arg", range(5))
def test_fd_attention_each_argument(arg):
    r = np.random.default_rng(3)
    args = [r.normal(size=(2, 3, 4))] + [r.normal(size=(4, 4)) * 0.5 for _ in range(4)]
    w = r.normal(size=(2, 3, 4))

    def f(t):
        a = [ng.Tensor(v) for v in args]
        a[arg] = t
        return ng.tsum(ng.mul(ng.attention(*a, 2), ng.Tensor(w)))

    assert fd(f, args[arg]) < 1e-4


def test_attention_with_cache_matches_full(rng):
    x = rng.normal(size=(1, 5, 4))
    W = [rng.normal(size=(4, 4)) for _ in range(4)]
    full = ng.attention(ng.Tensor(x), *map(ng.Tensor, W), 2).data
    k, v = ng.attention_cache(x[:, :3], W[1], W[2], 2)
    tail = ng.attention(ng.Tensor(x[:, 3:]), *map(ng.Tensor, W), 2, past=(k, v)).data
    np.testing.assert_allclose(tail, full[:, 3:], atol=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(0, 2**31))
def test_matmul_associativity(m, n, p, q, seed):
    r = np.random.default_rng(seed)
    A, B, C = (ng.Tensor(r.normal(size=s)) for s in [(m, n), (n, p), (p, q)])
    left = ng.matmul(ng.matmul(A, B), C).data
    right = ng.matmul(A, ng.matmul(B, C)).data
    assert np.allclose(left, right, rtol=1e-9, atol=1e-12)


# solve_linear ------------------------------------------------------------------


def test_solve_identity(rng):
    b = rng.normal(size=5)
    assert np.array_equal(ng.solve_linear(np.eye(5), b), b)


def test_solve_diagonal():
    assert ng.solve_linear(np.diag([2.0, 4.0]), np.array([2.0, 8.0])).tolist() == [1.0, 2.0]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_solve_spd_residual(seed):
    r = np.random.default_rng(seed)
    M = r.normal(size=(8, 8))
    A = M @ M.T + 0.1 * np.eye(8)
    b = r.normal(size=8)
    x = ng.solve_linear(A, b)
    assert np.abs(A @ x - b).max() <= 1e-8 * (1 + np.abs(b).max())


def test_solve_rank_deficient_is_damped():
    k = np.array([1.0, 2.0, 0.0])
    A = np.outer(k, k) + np.diag([0.0, 0.0, 1.0])
    x = ng.solve_linear(A, np.array([1.0, 2.0, 1.0]))
    assert np.isfinite(x).all()


def test_solve_zero_matrix_is_damped():
    # trace 0 falls back to an absolute 1e-8 shift
    np.testing.assert_allclose(ng.solve_linear(np.zeros((3, 3)), np.ones(3)), np.full(3, 1e8))


def test_solve_unfactorable_fails():
    A = np.eye(3)
    A[1, 1] = np.nan
    with pytest.raises(ng.SingularMatrixError):
        ng.solve_linear(A, np.ones(3))


def test_solve_shape_errors():
    with pytest.raises(ValueError):
        ng.solve_linear(np.ones((2, 3)), np.ones(2))
    with pytest.raises(ValueError):
        ng.solve_linear(np.eye(2), np.ones(3))


# pca ---------------------------------------------------------------------------


def test_pca_line_has_one_component():
    t = np.linspace(-3, 3, 20)
    res = ng.pca_2d(np.c_[t, 2 * t])
    assert res.explained_variance[1] < 1e-12
    np.testing.assert_allclose(np.abs(res.components[0]), np.array([1, 2]) / np.sqrt(5), atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31), st.integers(2, 6))
def test_pca_components_orthonormal(seed, d):
    rows = np.random.default_rng(seed).normal(size=(40, d))
    c = ng.pca_2d(rows).components
    np.testing.assert_allclose(c @ c.T, np.eye(2), atol=1e-10)


def test_pca_ellipse_axis(rng):
    rows = np.c_[3 * rng.normal(size=2000), rng.normal(size=2000)]
    res = ng.pca_2d(rows)
    angle = np.degrees(np.arccos(abs(res.components[0, 0])))
    assert angle < 5
    assert res.explained_variance[0] >= res.explained_variance[1]


def test_pca_projection_definition(rng):
    rows = rng.normal(size=(10, 4))
    proj, var, comps = ng.pca_2d(rows)
    np.testing.assert_allclose(proj, (rows - rows.mean(0)) @ comps.T, atol=1e-12)


def test_pca_sign_convention(rng):
    comps = ng.pca_2d(rng.normal(size=(30, 3))).components
    for c in comps:
        assert c[np.flatnonzero(np.abs(c) > 1e-12)[0]] > 0


def test_pca_degenerate_rows():
    res = ng.pca_2d(np.ones((5, 3)))
    assert res.degenerate
    assert not res.projections.any() and not res.explained_variance.any()


def test_pca_needs_three_rows():
    with pytest.raises(ValueError):
        ng.pca_2d(np.ones((2, 3)))
