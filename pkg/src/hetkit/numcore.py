"""Minimal differentiable numerical core.

Dense float64 tensors with reverse-mode automatic differentiation over an
explicitly recorded parent graph (no global state; runs are replayable), the
small operation set the model needs, an Adam optimizer, and a
finite-difference gradient checker. Single-threaded per training step.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

__all__ = [
    "Tensor",
    "ParamStore",
    "NonFiniteGradientError",
    "constant",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "relu",
    "take_rows",
    "concat_rows",
    "concat_cols",
    "total_sum",
    "total_mean",
    "mean_aggregate",
    "pearson_abs",
    "pearson_abs_rows",
    "log_sigmoid",
    "softmax_cross_entropy",
    "sigmoid_bce",
    "adam_step",
    "grad_check",
    "GradCheckReport",
]


class NonFiniteGradientError(RuntimeError):
    pass


class Tensor:
    """A float64 array node in a reverse-mode computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Backpropagate from a scalar root, accumulating into .grad fields."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar root")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self._accumulate(np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # small operator conveniences (functional forms below do the work)
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data + b.data, _parents=(a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data - b.data, _parents=(a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g, a.shape))
        b._accumulate(-_unbroadcast(g, b.shape))

    out._backward = backward
    return out


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    out = Tensor(a.data * b.data, _parents=(a, b))

    def backward(g):
        a._accumulate(_unbroadcast(g * b.data, a.shape))
        b._accumulate(_unbroadcast(g * a.data, b.shape))

    out._backward = backward
    return out


def neg(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(-a.data, _parents=(a,))

    def backward(g):
        a._accumulate(-g)

    out._backward = backward
    return out


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D tensors")
    out = Tensor(a.data @ b.data, _parents=(a, b))

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    out._backward = backward
    return out


def relu(a) -> Tensor:
    a = _wrap(a)
    out = Tensor(np.maximum(a.data, 0.0), _parents=(a,))
    mask = a.data > 0.0

    def backward(g):
        a._accumulate(g * mask)

    out._backward = backward
    return out


def take_rows(a: Tensor, idx) -> Tensor:
    """Gather rows by index; backward scatter-adds."""
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(a.data[idx], _parents=(a,))

    def backward(g):
        buf = np.zeros_like(a.data)
        np.add.at(buf, idx, g)
        a._accumulate(buf)

    out._backward = backward
    return out


def _concat(tensors, axis: int) -> Tensor:
    tensors = [_wrap(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis), _parents=tuple(tensors))
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            t._accumulate(g[tuple(sl)])

    out._backward = backward
    return out


def concat_rows(tensors) -> Tensor:
    return _concat(tensors, axis=0)


def concat_cols(tensors) -> Tensor:
    return _concat(tensors, axis=1)


def total_sum(a: Tensor) -> Tensor:
    a = _wrap(a)
    out = Tensor(a.data.sum(), _parents=(a,))

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g)))

    out._backward = backward
    return out


def total_mean(a: Tensor) -> Tensor:
    a = _wrap(a)
    n = a.data.size
    out = Tensor(a.data.mean(), _parents=(a,))

    def backward(g):
        a._accumulate(np.full_like(a.data, float(g) / n))

    out._backward = backward
    return out


def mean_aggregate(x: Tensor, indptr: np.ndarray, indices: np.ndarray) -> Tensor:
    """Row-mean neighborhood aggregation.

    Output row u is the mean of x over the neighbor ids
    indices[indptr[u]:indptr[u+1]]; rows with no neighbors are zero.
    """
    x = _wrap(x)
    if x.ndim != 2:
        raise ValueError("mean_aggregate expects a 2-D tensor")
    n_out = len(indptr) - 1
    deg = np.diff(indptr).astype(np.float64)
    weights = np.ones(len(indices), dtype=np.float64)
    nz = deg > 0
    inv = np.zeros_like(deg)
    inv[nz] = 1.0 / deg[nz]
    weights *= np.repeat(inv, np.diff(indptr))
    p = sp.csr_matrix((weights, indices, indptr), shape=(n_out, x.shape[0]))
    out = Tensor(p @ x.data, _parents=(x,))

    def backward(g):
        x._accumulate(p.T @ g)

    out._backward = backward
    return out


def pearson_abs_rows(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """Row-wise |Pearson correlation| across feature coordinates.

    For each row pair: |Cov(a_i, b_i)| / (sqrt(Var a_i + eps) * sqrt(Var b_i + eps)).
    The eps guard under each square root keeps constant rows finite.
    """
    a, b = _wrap(a), _wrap(b)
    if a.shape != b.shape or a.ndim != 2:
        raise ValueError("pearson_abs_rows expects matching 2-D tensors")
    d = a.shape[1]
    if d < 2:
        raise ValueError("need at least 2 feature coordinates")
    ac = a.data - a.data.mean(axis=1, keepdims=True)
    bc = b.data - b.data.mean(axis=1, keepdims=True)
    cov = (ac * bc).mean(axis=1)
    va = (ac * ac).mean(axis=1) + eps
    vb = (bc * bc).mean(axis=1) + eps
    sa = np.sqrt(va)
    sb = np.sqrt(vb)
    r = cov / (sa * sb)
    out = Tensor(np.abs(r), _parents=(a, b))
    sign = np.sign(r)

    def backward(g):
        coef = (g * sign / (d * sa * sb))[:, None]
        a._accumulate(coef * (bc - (cov / va)[:, None] * ac))
        b._accumulate(coef * (ac - (cov / vb)[:, None] * bc))

    out._backward = backward
    return out


def pearson_abs(a: Tensor, b: Tensor, eps: float = 1e-8) -> Tensor:
    """|Pearson correlation| of two vectors (scalar output)."""
    a, b = _wrap(a), _wrap(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ValueError("pearson_abs expects 1-D tensors")
    if a.data.size < 2:
        raise ValueError("need vectors of length >= 2")
    rows = pearson_abs_rows(
        _reshape_row(a), _reshape_row(b), eps=eps
    )
    return total_sum(rows)


def _reshape_row(a: Tensor) -> Tensor:
    out = Tensor(a.data.reshape(1, -1), _parents=(a,))

    def backward(g):
        a._accumulate(g.reshape(a.shape))

    out._backward = backward
    return out


def log_sigmoid(z: Tensor) -> Tensor:
    """Elementwise log(sigmoid(z)) = -softplus(-z), stable for |z| up to ~1e4."""
    z = _wrap(z)
    out = Tensor(-np.logaddexp(0.0, -z.data), _parents=(z,))

    def backward(g):
        z._accumulate(g * expit(-z.data))

    out._backward = backward
    return out


def softmax_cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer class targets (fused op)."""
    logits = _wrap(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise ValueError("softmax_cross_entropy expects (n, C) logits and (n,) targets")
    n, c = logits.shape
    if n == 0:
        raise ValueError("softmax_cross_entropy over zero rows")
    if targets.min() < 0 or targets.max() >= c:
        raise ValueError("class index out of range")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    lse = zmax[:, 0] + np.log(np.exp(z - zmax).sum(axis=1))
    nll = lse - z[np.arange(n), targets]
    out = Tensor(nll.mean(), _parents=(logits,))
    softmax = np.exp(z - lse[:, None])

    def backward(g):
        grad = softmax.copy()
        grad[np.arange(n), targets] -= 1.0
        logits._accumulate(grad * (float(g) / n))

    out._backward = backward
    return out


def sigmoid_bce(logits: Tensor, targets) -> Tensor:
    """Multilabel binary cross-entropy: mean over rows of per-class BCE sums."""
    logits = _wrap(logits)
    t = np.asarray(targets, dtype=np.float64)
    if logits.shape != t.shape or logits.ndim != 2:
        raise ValueError("sigmoid_bce expects matching (n, C) logits and targets")
    n = logits.shape[0]
    if n == 0:
        raise ValueError("sigmoid_bce over zero rows")
    z = logits.data
    # stable per-element BCE: max(z,0) - z*t + log(1+exp(-|z|))
    per = np.maximum(z, 0.0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = Tensor(per.sum() / n, _parents=(logits,))

    def backward(g):
        logits._accumulate((expit(z) - t) * (float(g) / n))

    out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Parameters and optimization
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ParamStore:
    """Named parameter tensors plus Adam state (first/second moments, step)."""

    params: dict = field(default_factory=dict)
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step_count: int = 0

    def add(self, name: str, data: np.ndarray) -> Tensor:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        t = Tensor(np.asarray(data, dtype=np.float64).copy(), requires_grad=True)
        self.params[name] = t
        self.m[name] = np.zeros_like(t.data)
        self.v[name] = np.zeros_like(t.data)
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def names(self):
        return list(self.params)

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    def snapshot(self) -> dict:
        return {k: t.data.copy() for k, t in self.params.items()}

    def restore(self, snap: dict) -> None:
        for k, arr in snap.items():
            self.params[k].data[...] = arr

    def save(self, path) -> None:
        """Binary checkpoint: JSON header line (names, shapes, endianness
        tag "LE"), then raw little-endian float64 payloads in header order."""
        header = {
            "endian": "LE",
            "dtype": "float64",
            "params": [{"name": k, "shape": list(t.shape)} for k, t in self.params.items()],
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
            for t in self.params.values():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "ParamStore":
        with open(path, "rb") as fh:
            header = json.loads(fh.readline().decode("utf-8"))
            if header.get("endian") != "LE":
                raise ValueError("unsupported checkpoint endianness")
            store = cls()
            for entry in header["params"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                buf = fh.read(8 * n)
                if len(buf) != 8 * n:
                    raise ValueError("truncated checkpoint payload")
                arr = np.frombuffer(buf, dtype="<f8").reshape(shape).astype(np.float64)
                store.add(entry["name"], arr)
        return store


def adam_step(
    store: ParamStore,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> ParamStore:
    """One bias-corrected Adam update over all parameters with gradients."""
    for name, p in store.params.items():
        if p.grad is not None and not np.all(np.isfinite(p.grad)):
            bad = int(np.count_nonzero(~np.isfinite(p.grad)))
            raise NonFiniteGradientError(
                f"parameter {name!r}: {bad}/{p.grad.size} non-finite gradient entries "
                f"at step {store.step_count + 1}"
            )
    store.step_count += 1
    t = store.step_count
    for name, p in store.params.items():
        g = p.grad
        if g is None:
            continue
        m = store.m[name]
        v = store.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return store


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: dict
    tol: float
    eps: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_error.values())

    def worst(self) -> tuple[str, float]:
        name = max(self.max_rel_error, key=self.max_rel_error.get)
        return name, self.max_rel_error[name]

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "eps": self.eps,
            "passed": self.passed,
            "max_rel_error": dict(self.max_rel_error),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def grad_check(
    loss_fn,
    store: ParamStore,
    eps: float = 1e-5,
    tol: float = 1e-4,
    coords_per_tensor: int = 32,
    rng: np.random.Generator | None = None,
) -> GradCheckReport:
    """Compare analytic gradients against central differences.

    `loss_fn(store)` must be deterministic (any masks or rng frozen by the
    caller) and return a scalar Tensor. A random coordinate subset is probed
    per parameter; relative error uses max(|analytic|, |fd|, 1) as
    denominator.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    store.zero_grad()
    loss = loss_fn(store)
    loss.backward()
    analytic = {
        k: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
        for k, t in store.params.items()
    }
    errors: dict[str, float] = {}
    for name, p in store.params.items():
        flat = p.data.reshape(-1)
        n = flat.size
        coords = (
            np.arange(n)
            if n <= coords_per_tensor
            else rng.choice(n, size=coords_per_tensor, replace=False)
        )
        worst = 0.0
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(loss_fn(store).data)
            flat[i] = orig - eps
            f_minus = float(loss_fn(store).data)
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            an = analytic[name].reshape(-1)[i]
            rel = abs(an - fd) / max(abs(an), abs(fd), 1.0)
            worst = max(worst, rel)
        errors[name] = worst
    return GradCheckReport(max_rel_error=errors, tol=tol, eps=eps)
