"""Dense float64 tensors with a small reverse-mode tape.

Every node keeps its forward value, its parents and a closure that maps the
upstream gradient onto the parents. Only nodes that (transitively) depend on a
``requires_grad`` leaf take part in the backward pass, so substituting a single
vector ``z`` into a frozen network costs one backward sweep through the part
of the graph downstream of ``z``.
"""

from __future__ import annotations

import itertools
import math
import warnings
from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.linalg

__all__ = [
    "Tensor",
    "NonFiniteError",
    "SingularMatrixError",
    "tensor",
    "leaf",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "exp",
    "tsum",
    "mean",
    "reshape",
    "swapaxes",
    "embedding",
    "layer_norm",
    "gelu",
    "causal_softmax",
    "log_softmax",
    "pick",
    "replace_rows",
    "backward",
    "grad",
    "finite_diff_check",
    "solve_linear",
    "pca_2d",
    "PCAResult",
]

_ids = itertools.count()


class NonFiniteError(FloatingPointError):
    """A tensor or a function value contained NaN or Inf."""


class SingularMatrixError(np.linalg.LinAlgError):
    pass


class Tensor:
    """A float64 array plus the bookkeeping the tape needs.

    ``shape`` and ``data`` follow numpy (row-major); ``node_id`` is unique for
    the life of the process and keys the gradient map returned by
    :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "parents", "grad_fn", "op", "node_id")

    def __init__(
        self,
        data,
        requires_grad: bool = False,
        parents: tuple["Tensor", ...] = (),
        grad_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        arr = np.asarray(data, dtype=np.float64)
        # a finite sum implies finite entries; only the rare overflow case pays for the full scan
        if not math.isfinite(arr.sum()) and not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in {op} output")
        self.data = arr
        self.requires_grad = requires_grad
        self.parents = parents
        self.grad_fn = grad_fn
        self.op = op
        self.node_id = next(_ids)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> "Tensor":
        return swapaxes(self, -1, -2)


def tensor(data) -> Tensor:
    """Constant (no gradient) tensor."""
    return data if isinstance(data, Tensor) else Tensor(data)


def leaf(data) -> Tensor:
    """Tensor that gradients are collected for."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _node(data, parents, grad_fn, op) -> Tensor:
    live = tuple(p for p in parents if p.requires_grad)
    if not live:
        return Tensor(data, op=op)
    return Tensor(data, requires_grad=True, parents=parents, grad_fn=grad_fn, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# elementwise -----------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = tensor(a), tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def scale(a: Tensor, c: float) -> Tensor:
    return _node(a.data * c, (a,), lambda g: (g * c,), "scale")


def neg(a: Tensor) -> Tensor:
    return scale(a, -1.0)


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def tsum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return _node(out, (a,), back, "sum")


def mean(a: Tensor, axis=None) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return scale(tsum(a, axis), 1.0 / n)


# shape -----------------------------------------------------------------------


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _node(np.swapaxes(a.data, i, j), (a,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")


# linear algebra ---------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules; the trailing two dims multiply."""
    a, b = tensor(a), tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul dimension mismatch: {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # fold batch dims into rows: one gemm instead of a batched loop
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out_shape = a.shape[:-1] + (n,)

        def back2(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _node((a2 @ b.data).reshape(out_shape), (a, b), back2, "matmul")

    def back(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), back, "matmul")


def linear(x, W, b=None) -> Tensor:
    """``x @ W.T + b`` for weights stored (out, in); leading dims of ``x`` are batch."""
    x, W = tensor(x), tensor(W)
    if W.ndim != 2 or x.shape[-1] != W.shape[1]:
        raise ValueError(f"linear dimension mismatch: {x.shape} with weight {W.shape}")
    n_out, n_in = W.shape
    x2 = x.data.reshape(-1, n_in)
    out = x2 @ W.data.T
    parents = (x, W)
    if b is not None:
        b = tensor(b)
        out = out + b.data
        parents = (x, W, b)

    def back(g):
        g2 = g.reshape(-1, n_out)
        gx = (g2 @ W.data).reshape(x.shape) if x.requires_grad else None
        gW = g2.T @ x2 if W.requires_grad else None
        if b is None:
            return gx, gW
        return gx, gW, (g2.sum(axis=0) if b.requires_grad else None)

    return _node(out.reshape(x.shape[:-1] + (n_out,)), parents, back, "linear")


# network pieces ---------------------------------------------------------------


def embedding(weight: Tensor, ids: np.ndarray) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)

    def back(g):
        gw = np.zeros_like(weight.data)
        np.add.at(gw, ids.reshape(-1), g.reshape(-1, weight.shape[-1]))
        return (gw,)

    return _node(weight.data[ids], (weight,), back, "embedding")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gain.data + bias.data

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gain.data
            gx = rstd * (
                gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        gg = _unbroadcast(g * xhat, gain.shape) if gain.requires_grad else None
        gb = _unbroadcast(g, bias.shape) if bias.requires_grad else None
        return gx, gg, gb

    return _node(out, (x, gain, bias), back, "layer_norm")


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    u = x.data
    u2 = u * u
    t = np.tanh(_GELU_C * u * (1.0 + 0.044715 * u2))
    out = 0.5 * u * (1.0 + t)

    def back(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * u2)
        return (g * (0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner),)

    return _node(out, (x,), back, "gelu")


def causal_softmax(scores: Tensor) -> Tensor:
    """Softmax over the last axis with position j > i masked out (…, T, T)."""
    T = scores.shape[-1]
    allowed = np.tril(np.ones((T, T), dtype=bool))
    s = np.where(allowed, scores.data, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(s), 0.0)
    p = e / e.sum(axis=-1, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (scores,), back, "causal_softmax")


def attention(
    x: Tensor,
    W_q: Tensor,
    W_k: Tensor,
    W_v: Tensor,
    W_o: Tensor,
    n_heads: int,
    past: tuple | None = None,
) -> Tensor:
    """Multi-head causal self-attention on (B, T, d) as one tape node.

    Projections are ``x @ W.T`` per head, scores are scaled by 1/sqrt(d_head),
    and the merged heads go through ``W_o``. ``past`` holds constant per-head
    keys and values (B, H, P, d_head) of P earlier positions; ``x`` then covers
    positions P..P+T-1 and attends to them as well. An optional third entry
    (B, P) marks which cached positions exist, so rows with shorter histories
    can share a zero-padded cache.
    """
    B, T, d = x.shape
    if d % n_heads:
        raise ValueError(f"d_model {d} not divisible by {n_heads} heads")
    dh = d // n_heads
    inv = 1.0 / math.sqrt(dh)
    x2 = x.data.reshape(B * T, d)

    def split(W):
        return (x2 @ W.data.T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)

    q, k, v = split(W_q), split(W_k), split(W_v)
    P = 0
    if past is not None:
        P = past[0].shape[2]
        k = np.concatenate([past[0], k], axis=2)
        v = np.concatenate([past[1], v], axis=2)
    allowed = np.tril(np.ones((T, P + T), dtype=bool), k=P)
    if past is not None and len(past) > 2:
        valid = np.concatenate([np.asarray(past[2], dtype=bool), np.ones((B, T), dtype=bool)], axis=1)
        allowed = allowed[None, None] & valid[:, None, None, :]
    s = np.where(allowed, (q @ k.transpose(0, 1, 3, 2)) * inv, -np.inf)
    s = s - s.max(axis=-1, keepdims=True)
    e = np.where(allowed, np.exp(s), 0.0)
    a = e / e.sum(axis=-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(B * T, d)
    out = (o @ W_o.data.T).reshape(B, T, d)

    def back(g):
        g2 = g.reshape(B * T, d)
        gWo = g2.T @ o if W_o.requires_grad else None
        go = (g2 @ W_o.data).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
        ga = go @ v.transpose(0, 1, 3, 2)
        gs = a * (ga - (ga * a).sum(axis=-1, keepdims=True)) * inv
        gq = gs @ k
        # the cached past is constant: only the new positions' keys/values get gradient
        gk = (gs.transpose(0, 1, 3, 2) @ q)[:, :, P:]
        gv = (a.transpose(0, 1, 3, 2) @ go)[:, :, P:]

        def merge(t):
            return t.transpose(0, 2, 1, 3).reshape(B * T, d)

        gq, gk, gv = merge(gq), merge(gk), merge(gv)
        gx = None
        if x.requires_grad:
            gx = (gq @ W_q.data + gk @ W_k.data + gv @ W_v.data).reshape(B, T, d)
        gWq = gq.T @ x2 if W_q.requires_grad else None
        gWk = gk.T @ x2 if W_k.requires_grad else None
        gWv = gv.T @ x2 if W_v.requires_grad else None
        return gx, gWq, gWk, gWv, gWo

    return _node(out, (x, W_q, W_k, W_v, W_o), back, "attention")


def attention_cache(x: np.ndarray, W_k: np.ndarray, W_v: np.ndarray, n_heads: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-head keys and values (B, H, T, d_head) of a normalized stream, for ``attention(past=...)``."""
    B, T, d = x.shape
    dh = d // n_heads
    x2 = x.reshape(B * T, d)
    k = (x2 @ W_k.T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    v = (x2 @ W_v.T).reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    return k, v


def log_softmax(x: Tensor) -> Tensor:
    m = x.data.max(axis=-1, keepdims=True)
    lse = m + np.log(np.exp(x.data - m).sum(axis=-1, keepdims=True))
    out = x.data - lse
    p = np.exp(out)

    def back(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (x,), back, "log_softmax")


def pick(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather ``x[rows[i], cols[i]]`` from a 2-d tensor into a vector."""
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)

    def back(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, (rows, cols), g)
        return (gx,)

    return _node(x.data[rows, cols], (x,), back, "pick")


def replace_rows(x: Tensor, batch_idx: np.ndarray, pos_idx: np.ndarray, z: Tensor) -> Tensor:
    """Copy of ``x`` (B, T, d) with ``x[b_i, t_i, :]`` overwritten by ``z``.

    ``z`` is either one d-vector shared by every replaced slot or a (n, d)
    stack with one row per slot.
    """
    batch_idx = np.asarray(batch_idx, dtype=np.int64)
    pos_idx = np.asarray(pos_idx, dtype=np.int64)
    if z.shape[-1] != x.shape[-1]:
        raise ValueError(f"substituted vector has dim {z.shape[-1]}, expected {x.shape[-1]}")
    out = x.data.copy()
    out[batch_idx, pos_idx, :] = z.data

    def back(g):
        gx = None
        if x.requires_grad:
            gx = g.copy()
            gx[batch_idx, pos_idx, :] = 0.0
        gz = g[batch_idx, pos_idx, :]
        if z.ndim == 1:
            gz = gz.sum(axis=0)
        return gx, gz

    return _node(out, (x, z), back, "replace_rows")


# backward ---------------------------------------------------------------------


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if node.node_id in seen:
            continue
        seen.add(node.node_id)
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and p.node_id not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Reverse sweep from a scalar root; returns node_id -> gradient array."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar root, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.node_id: np.ones_like(loss.data)}
    if not loss.requires_grad:
        return grads
    for node in reversed(_topo(loss)):
        g = grads.get(node.node_id)
        if g is None or node.grad_fn is None:
            continue
        for parent, pg in zip(node.parents, node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            if parent.node_id in grads:
                grads[parent.node_id] = grads[parent.node_id] + pg
            else:
                grads[parent.node_id] = pg
    return grads


def grad(loss: Tensor, wrt: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of ``loss`` for each tensor in ``wrt``; unreachable ones are zero."""
    g = backward(loss)
    return [g.get(t.node_id, np.zeros_like(t.data)) for t in wrt]


def finite_diff_check(
    f: Callable[[Tensor], Tensor],
    x,
    eps: float = 1e-5,
    analytic: np.ndarray | None = None,
) -> float:
    """Max over coordinates of |analytic - central difference| / (|analytic| + 1e-12).

    ``f`` maps a leaf tensor to a scalar tensor. The analytic gradient comes from
    the tape unless passed in.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    x0 = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    if analytic is None:
        xl = leaf(x0)
        (analytic,) = grad(f(xl), [xl])
    flat = x0.reshape(-1)
    numeric = np.empty(flat.size)
    for i in range(flat.size):
        xp, xm = flat.copy(), flat.copy()
        xp[i] += eps
        xm[i] -= eps
        try:
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            fm = f(Tensor(xm.reshape(x0.shape))).item()
        except NonFiniteError as exc:
            raise NonFiniteError(f"f is not finite near coordinate {i}") from exc
        if not (math.isfinite(fp) and math.isfinite(fm)):
            raise NonFiniteError(f"f is not finite near coordinate {i}")
        numeric[i] = (fp - fm) / (2 * eps)
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    err = np.abs(a - numeric) / (np.abs(a) + 1e-12)
    # both sides exactly zero: relative error is 0, not 0/1e-12
    err[(a == 0) & (numeric == 0)] = 0.0
    return float(err.max()) if err.size else 0.0


# dense solvers ------------------------------------------------------------------


def solve_linear(A, b) -> np.ndarray:
    """Solve ``A x = b``; falls back to Tikhonov damping when factorization fails.

    Damping uses ``delta = 1e-8 * trace(A) / n`` (absolute 1e-8 if the trace is
    not positive).
    """
    A = np.asarray(A.data if isinstance(A, Tensor) else A, dtype=np.float64)
    b = np.asarray(b.data if isinstance(b, Tensor) else b, dtype=np.float64)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"solve_linear needs a square matrix, got {A.shape}")
    if b.shape[0] != A.shape[0]:
        raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {A.shape[0]}")
    n = A.shape[0]

    def attempt(M):
        with np.errstate(all="ignore"), warnings.catch_warnings():
            warnings.simplefilter("ignore", scipy.linalg.LinAlgWarning)
            try:
                lu, piv = scipy.linalg.lu_factor(M, check_finite=True)
            except (ValueError, np.linalg.LinAlgError):
                return None
            d = np.abs(np.diag(lu))
            if d.min() <= np.finfo(float).eps * max(d.max(), 1e-300) * n:
                return None
            x = scipy.linalg.lu_solve((lu, piv), b)
        if not np.isfinite(x).all():
            return None
        tol = 1e-8 * (1.0 + np.abs(b).max())
        if np.abs(M @ x - b).max() > tol:
            return None
        return x

    x = attempt(A)
    if x is not None:
        return x
    tr = np.trace(A)
    delta = 1e-8 * tr / n if tr > 0 else 1e-8
    x = attempt(A + delta * np.eye(n))
    if x is None:
        raise SingularMatrixError("matrix is singular even after damping")
    return x


class PCAResult:
    __slots__ = ("projections", "explained_variance", "components", "mean", "degenerate")

    def __init__(self, projections, explained_variance, components, mean, degenerate):
        self.projections = projections
        self.explained_variance = explained_variance
        self.components = components
        self.mean = mean
        self.degenerate = degenerate

    def __iter__(self):
        return iter((self.projections, self.explained_variance, self.components))


def _sign_fix(components: np.ndarray) -> np.ndarray:
    out = components.copy()
    for i, c in enumerate(out):
        nz = np.flatnonzero(np.abs(c) > 1e-12)
        if nz.size and c[nz[0]] < 0:
            out[i] = -c
    return out


def pca_2d(rows, fit_rows=None) -> PCAResult:
    """Two leading principal components of ``rows``.

    Components come from the eigendecomposition of the sample covariance of the
    centered rows; each component's first nonzero entry is made positive. With
    ``fit_rows`` the mean and components are fitted on those rows and applied to
    ``rows``. Unpacks as ``(projections, explained_variance, components)``.
    """
    X = np.asarray(rows.data if isinstance(rows, Tensor) else rows, dtype=np.float64)
    F = X if fit_rows is None else np.asarray(fit_rows, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 3 or X.shape[1] < 2:
        raise ValueError(f"pca_2d needs >=3 rows of dim >=2, got {X.shape}")
    mu = F.mean(axis=0)
    Fc = F - mu
    if np.abs(Fc).max() == 0.0:
        d = X.shape[1]
        comps = np.eye(2, d)
        return PCAResult(np.zeros((X.shape[0], 2)), np.zeros(2), comps, mu, True)
    cov = Fc.T @ Fc / max(F.shape[0] - 1, 1)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(-w, kind="mergesort")[:2]
    comps = _sign_fix(v[:, order].T)
    var = np.clip(w[order], 0.0, None)
    proj = (X - mu) @ comps.T
    return PCAResult(proj, var, comps, mu, False)
