"""Minimal reverse-mode automatic differentiation over dense float64 tensors.

Every differentiable primitive computes its value eagerly with numpy and, when
a :class:`Tape` is active, appends a backward closure to it.  The tape is a
linear record in execution order, so inputs always precede their consumers and
replaying it in reverse visits each operation exactly once.  Tapes are rebuilt
per forward pass (define-by-run); running outside any tape gives plain,
untracked numerics.

All values are 64-bit floats: the finite-difference checker needs the
precision and nothing here runs at a scale where it costs anything.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

# Floor applied inside log and KL terms so exact zeros coming out of softmax
# denominators or hard labels never produce -inf.
LOG_FLOOR = 1e-12


class Tensor:
    """Dense n-d array of float64 with an attached gradient slot."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags.c_contiguous:
            # ascontiguousarray would promote 0-d scalars to 1-d, so only
            # copy when the layout actually requires it
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Row-major flat view of the stored values."""
        return self.data.reshape(-1)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.data.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """Stop-gradient boundary: a fresh constant holding the same values."""
        return Tensor(self.data.copy(), requires_grad=False)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)


def const(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def param(data) -> Tensor:
    return Tensor(data, requires_grad=True)


class _Record:
    __slots__ = ("out", "backward_fn", "branch")

    def __init__(self, out, backward_fn, branch):
        self.out = out
        self.backward_fn = backward_fn
        self.branch = branch


class Tape:
    """Ordered record of executed primitives, usable as a context manager."""

    def __init__(self):
        self._records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPES.pop()
        if popped is not self:
            raise RuntimeError("tape stack corrupted")
        return False

    def __len__(self) -> int:
        return len(self._records)

    def branch_signature(self) -> list[np.ndarray]:
        """Boolean masks of every piecewise primitive, in execution order.

        Two evaluations of the same function whose signatures differ took
        different sides of at least one kink (relu, smooth-L1 corner, log
        floor); finite differences across such a pair are meaningless.
        """
        return [r.branch for r in self._records if r.branch is not None]


_TAPES: list[Tape] = []


def _active_tape() -> Tape | None:
    return _TAPES[-1] if _TAPES else None


def _emit(out: Tensor, backward_fn: Callable, branch: np.ndarray | None = None) -> None:
    tape = _active_tape()
    if tape is not None and out.requires_grad:
        tape._records.append(_Record(out, backward_fn, branch))


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _require_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape:
        raise ShapeError(f"{op} shapes {a.data.shape} vs {b.data.shape}")


# ---------------------------------------------------------------------------
# elementwise and linear primitives


def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "add")
    out = Tensor(a.data + b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, g)

    _emit(out, backward_fn)
    return out


def sub(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "sub")
    out = Tensor(a.data - b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g)
        _accumulate(b, -g)

    _emit(out, backward_fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape(a, b, "mul")
    out = Tensor(a.data * b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    _emit(out, backward_fn)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    c = float(c)
    out = Tensor(x.data * c, x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * c)

    _emit(out, backward_fn)
    return out


def add_scalar(x: Tensor, c: float) -> Tensor:
    out = Tensor(x.data + float(c), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g)

    _emit(out, backward_fn)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes {a.data.shape} x {b.data.shape}")
    out = Tensor(a.data @ b.data, a.requires_grad or b.requires_grad)

    def backward_fn(g):
        if a.requires_grad:
            _accumulate(a, g @ b.data.T)
        if b.requires_grad:
            _accumulate(b, a.data.T @ g)

    _emit(out, backward_fn)
    return out


def transpose(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"transpose expects a matrix, got shape {x.data.shape}")
    out = Tensor(x.data.T.copy(), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g.T)

    _emit(out, backward_fn)
    return out


def add_rowvec(x: Tensor, b: Tensor) -> Tensor:
    """x[m, n] + b[n] broadcast over rows."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"add_rowvec shapes {x.data.shape} + {b.data.shape}")
    out = Tensor(x.data + b.data[None, :], x.requires_grad or b.requires_grad)

    def backward_fn(g):
        _accumulate(x, g)
        if b.requires_grad:
            _accumulate(b, g.sum(axis=0))

    _emit(out, backward_fn)
    return out


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    out = Tensor(x.data.reshape(shape).copy(), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g.reshape(x.data.shape))

    _emit(out, backward_fn)
    return out


def take(x: Tensor, indices) -> Tensor:
    """Gather entries of a flat tensor; backward scatter-adds."""
    if x.data.ndim != 1:
        raise ShapeError(f"take expects a flat tensor, got shape {x.data.shape}")
    idx = np.asarray(indices, dtype=np.int64)
    out = Tensor(x.data[idx], x.requires_grad)

    def backward_fn(g):
        if x.requires_grad:
            acc = np.zeros_like(x.data)
            np.add.at(acc, idx, g)
            _accumulate(x, acc)

    _emit(out, backward_fn)
    return out


def hstack(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate matrices along columns; backward splits the gradient."""
    if not parts:
        raise ShapeError("hstack of nothing")
    rows = parts[0].data.shape[0]
    for p in parts:
        if p.data.ndim != 2 or p.data.shape[0] != rows:
            raise ShapeError(f"hstack row mismatch: {[q.data.shape for q in parts]}")
    out = Tensor(
        np.concatenate([p.data for p in parts], axis=1),
        any(p.requires_grad for p in parts),
    )
    widths = [p.data.shape[1] for p in parts]

    def backward_fn(g):
        start = 0
        for p, w in zip(parts, widths):
            _accumulate(p, g[:, start : start + w])
            start += w

    _emit(out, backward_fn)
    return out


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum(), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, np.broadcast_to(g, x.data.shape).copy())

    _emit(out, backward_fn)
    return out


def mean_all(x: Tensor) -> Tensor:
    return scale(sum_all(x), 1.0 / x.data.size)


# ---------------------------------------------------------------------------
# nonlinearities


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0.0
    out = Tensor(np.where(mask, x.data, 0.0), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * mask)

    _emit(out, backward_fn, branch=mask.ravel().copy())
    return out


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y, x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * y * (1.0 - y))

    _emit(out, backward_fn)
    return out


def log(x: Tensor) -> Tensor:
    floored = x.data < LOG_FLOOR
    xf = np.maximum(x.data, LOG_FLOOR)
    out = Tensor(np.log(xf), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, np.where(floored, 0.0, g / xf))

    _emit(out, backward_fn, branch=floored.ravel().copy())
    return out


def smooth_l1(x: Tensor) -> Tensor:
    """Elementwise Huber-style penalty: 0.5 x^2 inside |x|<1, |x|-0.5 outside."""
    a = np.abs(x.data)
    inner = a < 1.0
    out = Tensor(np.where(inner, 0.5 * x.data * x.data, a - 0.5), x.requires_grad)

    def backward_fn(g):
        _accumulate(x, g * np.where(inner, x.data, np.sign(x.data)))

    _emit(out, backward_fn, branch=inner.ravel().copy())
    return out


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax, stabilized by subtracting each row's max."""
    if x.data.ndim != 2:
        raise ShapeError(f"softmax_rows expects a matrix, got shape {x.data.shape}")
    if not np.all(np.isfinite(x.data)):
        raise ContractError("softmax_rows requires finite input")
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y, x.requires_grad)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, y * (g - dot))

    _emit(out, backward_fn)
    return out


def normalize_rows(x: Tensor) -> Tensor:
    """Scale each row to unit Euclidean norm."""
    if x.data.ndim != 2:
        raise ShapeError(f"normalize_rows expects a matrix, got shape {x.data.shape}")
    norms = np.linalg.norm(x.data, axis=1)
    if np.any(norms == 0.0):
        raise ContractError("normalize_rows: zero-norm row")
    y = x.data / norms[:, None]
    out = Tensor(y, x.requires_grad)

    def backward_fn(g):
        if x.requires_grad:
            dot = (g * y).sum(axis=1, keepdims=True)
            _accumulate(x, (g - y * dot) / norms[:, None])

    _emit(out, backward_fn)
    return out


def masked_logsumexp_rows(x: Tensor, mask: np.ndarray) -> Tensor:
    """Per-row log-sum-exp over entries where ``mask`` is true.

    Rows with an empty mask yield 0 and receive no gradient; callers are
    expected to exclude them downstream.
    """
    if x.data.ndim != 2 or mask.shape != x.data.shape:
        raise ShapeError(f"masked_logsumexp_rows shapes {x.data.shape} vs {mask.shape}")
    mask = mask.astype(bool)
    nonempty = mask.any(axis=1)
    xm = np.where(mask, x.data, -np.inf)
    mx = np.where(nonempty, xm.max(axis=1, initial=-np.inf), 0.0)
    e = np.where(mask, np.exp(x.data - mx[:, None]), 0.0)
    s = e.sum(axis=1)
    vals = np.where(nonempty, mx + np.log(np.maximum(s, LOG_FLOOR)), 0.0)
    out = Tensor(vals, x.requires_grad)

    def backward_fn(g):
        if x.requires_grad:
            _accumulate(x, _masked_lse_backward(e, s, nonempty, g))

    _emit(out, backward_fn)
    return out


def _masked_lse_backward(e: np.ndarray, s: np.ndarray, nonempty: np.ndarray, g: np.ndarray) -> np.ndarray:
    denom = np.where(nonempty, s, 1.0)
    return (e / denom[:, None]) * np.where(nonempty, g, 0.0)[:, None]


def kl_divergence_rows(p: Tensor, q: Tensor) -> Tensor:
    """Mean over rows of sum_j p_ij * log(p_ij / q_ij).

    Both arguments must hold probability rows.  Terms with p_ij == 0
    contribute 0; q is floored at LOG_FLOOR before the log.
    """
    _require_same_shape(p, q, "kl_divergence_rows")
    if p.data.ndim != 2:
        raise ShapeError(f"kl_divergence_rows expects matrices, got shape {p.data.shape}")
    for name, t in (("p", p), ("q", q)):
        if np.any(t.data < -1e-12):
            raise ContractError(f"kl_divergence_rows: negative entry in {name}")
        sums = t.data.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-6):
            raise ContractError(f"kl_divergence_rows: row of {name} not normalized")
    rows = p.data.shape[0]
    pf = np.maximum(p.data, LOG_FLOOR)
    qf = np.maximum(q.data, LOG_FLOOR)
    active = p.data > 0.0
    p_unfloored = p.data >= LOG_FLOOR
    q_unfloored = q.data >= LOG_FLOOR
    terms = np.where(active, p.data * (np.log(pf) - np.log(qf)), 0.0)
    out = Tensor(terms.sum() / rows, p.requires_grad or q.requires_grad)

    def backward_fn(g):
        s = g.item() / rows
        if p.requires_grad:
            dp = np.where(active, np.log(pf) - np.log(qf) + p_unfloored, 0.0)
            _accumulate(p, dp * s)
        if q.requires_grad:
            dq = np.where(active & q_unfloored, -p.data / qf, 0.0)
            _accumulate(q, dq * s)

    branch = np.concatenate([active.ravel(), p_unfloored.ravel(), q_unfloored.ravel()])
    _emit(out, backward_fn, branch=branch)
    return out


# ---------------------------------------------------------------------------
# backward pass, gradient checking, optimizer


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``."""
    if loss.data.size != 1:
        raise ContractError(f"backward expects a scalar loss, got shape {loss.data.shape}")
    if loss.requires_grad:
        _accumulate(loss, np.ones_like(loss.data))
    for rec in reversed(tape._records):
        g = rec.out.grad
        if g is None:
            continue
        rec.backward_fn(g)


def _signatures_equal(a: list[np.ndarray], b: list[np.ndarray]) -> bool:
    if len(a) != len(b):
        return False
    return all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be deterministic.  Coordinates whose +/- step evaluations land
    on different sides of a piecewise kink (detected by comparing tape branch
    signatures) are excluded from the max, since the central difference is
    meaningless there.
    """
    if not x.requires_grad:
        raise ContractError("finite_diff_check needs a requires_grad tensor")
    x.grad = None
    with Tape() as tape:
        out = f(x)
    if out.data.size != 1:
        raise ContractError("finite_diff_check expects a scalar-valued function")
    backward(out, tape)
    analytic = np.zeros_like(x.data) if x.grad is None else x.grad.copy()
    analytic_flat = analytic.reshape(-1)

    flat = x.data.reshape(-1)
    max_rel = 0.0
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        with Tape() as tp:
            fp = f(x)
            sig_p = tp.branch_signature()
        flat[i] = orig - step
        with Tape() as tm:
            fm = f(x)
            sig_m = tm.branch_signature()
        flat[i] = orig
        if not _signatures_equal(sig_p, sig_m):
            continue
        central = (fp.item() - fm.item()) / (2.0 * step)
        rel = abs(analytic_flat[i] - central) / max(1e-8, abs(central))
        max_rel = max(max_rel, rel)
    x.grad = None
    return max_rel


def fill_missing_grads(params: Sequence[Tensor]) -> None:
    """Zero-fill grads of parameters a loss did not touch this step.

    Keeps sgd_step's populated-grad contract strict while letting training
    loops handle losses whose terms vanish on some steps (no matched boxes,
    empty positive sets).
    """
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)


def sgd_step(params: Sequence[Tensor], lr: float, momentum: float, state: dict) -> None:
    """v <- momentum*v + grad; param <- param - lr*v; grads cleared."""
    for p in params:
        if p.grad is None:
            raise ContractError("sgd_step: parameter has no gradient")
    for p in params:
        v = state.get(p)
        if v is None:
            v = np.zeros_like(p.data)
        v = momentum * v + p.grad
        state[p] = v
        p.data -= lr * v
        p.grad = None
