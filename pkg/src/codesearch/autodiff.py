"""Dense float64 tensor engine with reverse-mode autodiff, plus SGD and Adam.

Graphs are built implicitly while ops run on tensors that require
gradients, and are consumed by a single backward() sweep. Everything is
CPU numpy. There is no broadcasting beyond bias-add and scalar
arithmetic, which keeps every backward rule short enough to audit.
"""

from __future__ import annotations

from collections.abc import Callable, Mapping
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf as _erf

MASK_NEG = -1e9
ADAM_BETAS = (0.9, 0.999)


class ShapeMismatch(ValueError):
    """Operands do not fit the op's shape contract."""


class GraphError(RuntimeError):
    """A computation graph was swept more than once."""


class Tensor:
    """Dense float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[np.ndarray], tuple] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._vjp = vjp
    else:
        out._parents = ()
        out._vjp = None
    out._consumed = False
    return out


# ---------------------------------------------------------------------------
# forward ops


def add(a: Tensor, b) -> Tensor:
    """a + b where b is a same-shape tensor, a 1-D bias over a's last axis, or a scalar."""
    if not isinstance(b, Tensor):
        bval = float(b)
        return _node(a.data + bval, (a,), lambda g: (g,))
    if a.shape == b.shape:
        return _node(a.data + b.data, (a, b), lambda g: (g, g))
    if b.data.ndim == 1 and a.data.ndim > 1 and a.shape[-1] == b.shape[0]:
        lead = tuple(range(a.data.ndim - 1))
        return _node(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=lead)))
    raise ShapeMismatch(f"add: {a.shape} + {b.shape}")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        bval = float(b)
        return _node(a.data - bval, (a,), lambda g: (g,))
    if a.shape != b.shape:
        raise ShapeMismatch(f"subtract: {a.shape} - {b.shape}")
    return _node(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product; b may be a python scalar."""
    if not isinstance(b, Tensor):
        bval = float(b)
        return _node(a.data * bval, (a,), lambda g: (g * bval,))
    if a.shape != b.shape:
        raise ShapeMismatch(f"multiply: {a.shape} * {b.shape}")
    return _node(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """a @ b for 2-D operands or stacked 3-D batches with a shared batch dim."""
    ok2 = a.data.ndim == 2 and b.data.ndim == 2 and a.shape[1] == b.shape[0]
    ok3 = (
        a.data.ndim == 3
        and b.data.ndim == 3
        and a.shape[0] == b.shape[0]
        and a.shape[2] == b.shape[1]
    )
    if not (ok2 or ok3):
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")

    def vjp(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2)) if a.requires_grad else None
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g) if b.requires_grad else None
        return ga, gb

    return _node(np.matmul(a.data, b.data), (a, b), vjp)


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    if x.data.ndim < 2:
        raise ShapeMismatch(f"transpose: needs ndim >= 2, got {x.shape}")
    return _node(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),))


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; ids is an integer array and is not differentiated."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(
            f"embedding: token id out of range [0, {table.shape[0]}) in lookup"
        )

    def vjp(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.ravel(), g.reshape(-1, table.shape[1]))
        return (gt,)

    return _node(table.data[ids], (table,), vjp)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by gain and shift by bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeMismatch(
            f"layer_norm: x {x.shape} with gain {gain.shape}, bias {bias.shape}"
        )
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        dgain = (g * xhat).sum(axis=lead) if gain.requires_grad else None
        dbias = g.sum(axis=lead) if bias.requires_grad else None
        # dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        return dx, dgain, dbias

    return _node(xhat * gain.data + bias.data, (x, gain, bias), vjp)


def softmax(x: Tensor, additive_mask=None) -> Tensor:
    """Softmax over the last axis; additive_mask (a constant array) is added first.

    A row whose mask disables every position is an all-pad attention row
    and is refused rather than normalized.
    """
    z = x.data
    if additive_mask is not None:
        m = np.asarray(additive_mask, dtype=np.float64)
        if np.any(np.all(m <= MASK_NEG / 2, axis=-1)):
            raise ValueError("softmax: fully masked row (all-pad attention row)")
        z = z + m
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        dot = (g * s).sum(axis=-1, keepdims=True)
        return (s * (g - dot),)

    return _node(s, (x,), vjp)


def gelu(x: Tensor) -> Tensor:
    """Exact (erf) GELU."""
    phi = 0.5 * (1.0 + _erf(x.data * np.sqrt(0.5)))

    def vjp(g):
        pdf = np.exp(-0.5 * x.data * x.data) / np.sqrt(2.0 * np.pi)
        return (g * (phi + x.data * pdf),)

    return _node(x.data * phi, (x,), vjp)


def relu(x: Tensor) -> Tensor:
    keep = x.data > 0
    return _node(np.where(keep, x.data, 0.0), (x,), lambda g: (np.where(keep, g, 0.0),))


def dropout(x: Tensor, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only on the training path."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout: rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return x
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * keep, (x,), lambda g: (g * keep,))


def concat(parts, axis: int = -1) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise ValueError("concat: no tensors")
    sizes = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeMismatch(f"concat: {[p.shape for p in parts]}") from exc
    return _node(out, parts, vjp)


def narrow(x: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along one axis."""
    if start < 0 or length < 0 or start + length > x.shape[axis]:
        raise ShapeMismatch(f"narrow: [{start}:{start + length}] out of {x.shape} axis {axis}")
    sl = [slice(None)] * x.data.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)

    def vjp(g):
        gx = np.zeros_like(x.data)
        gx[sl] = g
        return (gx,)

    return _node(x.data[sl].copy(), (x,), vjp)


def take_rows(x: Tensor, idx) -> Tensor:
    """Gather rows x[idx] along the first axis; repeated rows accumulate gradient."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.ndim != 1:
        raise ShapeMismatch(f"take_rows: index must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"take_rows: row index out of range [0, {x.shape[0]})")

    def vjp(g):
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        return (gx,)

    return _node(x.data[idx], (x,), vjp)


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    return _node(x.data.reshape(shape), (x,), lambda g: (g.reshape(x.data.shape),))


def mean(x: Tensor) -> Tensor:
    """Mean over all entries, as a scalar tensor."""

    def vjp(g):
        return (np.full_like(x.data, float(g) / x.data.size),)

    return _node(np.array(x.data.mean()), (x,), vjp)


def cross_entropy_with_logits(logits: Tensor, targets) -> Tensor:
    """Mean softmax cross-entropy of integer class targets against logit rows."""
    if logits.data.ndim != 2:
        raise ShapeMismatch(f"cross-entropy: logits must be 2-D, got {logits.shape}")
    t = np.asarray(targets, dtype=np.int64)
    n, c = logits.shape
    if t.shape != (n,):
        raise ShapeMismatch(f"cross-entropy: {n} logit rows vs targets {t.shape}")
    if t.size and (t.min() < 0 or t.max() >= c):
        raise IndexError(f"cross-entropy: target class out of range [0, {c})")
    z = logits.data
    m = z.max(axis=-1, keepdims=True)
    e = np.exp(z - m)
    sumexp = e.sum(axis=-1, keepdims=True)
    logp = (z - m) - np.log(sumexp)
    rows = np.arange(n)

    def vjp(g):
        p = e / sumexp
        p[rows, t] -= 1.0
        return (p * (float(g) / n),)

    return _node(np.array(-logp[rows, t].mean()), (logits,), vjp)


def cosine_similarity(u: Tensor, v: Tensor) -> Tensor:
    if u.data.ndim != 1 or v.data.ndim != 1 or u.shape != v.shape:
        raise ShapeMismatch(f"cosine-similarity: {u.shape} vs {v.shape}")
    nu = float(np.linalg.norm(u.data))
    nv = float(np.linalg.norm(v.data))
    if nu == 0.0 or nv == 0.0:
        raise ValueError("cosine-similarity: zero-norm vector")
    c = float(u.data @ v.data) / (nu * nv)

    def vjp(g):
        gs = float(g)
        du = gs * (v.data / (nu * nv) - c * u.data / (nu * nu)) if u.requires_grad else None
        dv = gs * (u.data / (nu * nv) - c * v.data / (nv * nv)) if v.requires_grad else None
        return du, dv

    return _node(np.array(c), (u, v), vjp)


# ---------------------------------------------------------------------------
# backward sweep


def backward(loss: Tensor, params: Mapping[str, Tensor]) -> dict[str, np.ndarray]:
    """Reverse-mode sweep from a scalar loss.

    Returns {name: gradient} covering every requires_grad entry of params;
    parameters with no path to the loss get zero gradients. A graph can be
    swept exactly once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("backward: non-finite loss")
    if loss._consumed:
        raise GraphError("backward: graph already consumed by a previous backward pass")
    loss._consumed = True

    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(topo):
        if node._vjp is None:
            continue
        g = acc.pop(id(node), None)
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            held = acc.get(id(parent))
            # never mutate held arrays in place: vjps may alias their input
            acc[id(parent)] = pg if held is None else held + pg

    out: dict[str, np.ndarray] = {}
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = acc.get(id(p))
        out[name] = np.array(g) if g is not None else np.zeros_like(p.data)
    return out


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    """State for the two update rules the pipeline uses: plain SGD and Adam."""

    kind: str
    lr: float
    betas: tuple[float, float] = ADAM_BETAS
    eps: float = 1e-8
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")


def optimizer_step(
    state: OptimizerState,
    params: Mapping[str, Tensor],
    grads: Mapping[str, np.ndarray],
):
    """Apply one update in place. SGD is exactly theta -= lr * g."""
    for name, p in params.items():
        if not p.requires_grad:
            continue
        if name not in grads:
            raise KeyError(f"optimizer_step: missing gradient for {name!r}")
        if grads[name].shape != p.data.shape:
            raise ShapeMismatch(
                f"optimizer_step: gradient {grads[name].shape} vs parameter "
                f"{p.data.shape} for {name!r}"
            )
    state.step_count += 1
    if state.kind == "sgd":
        for name, p in params.items():
            if p.requires_grad:
                p.data -= state.lr * grads[name]
        return params
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step_count
    c2 = 1.0 - b2 ** state.step_count
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads[name]
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------------------
# gradient checking


def grad_check(
    fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> float:
    """Worst relative error of backward() against central finite differences.

    fn rebuilds the loss from the current parameter values and must be
    deterministic (dropout off). With max_entries set, at most that many
    entries per parameter are probed (sampled via rng).
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"grad_check: eps must be in [1e-7, 1e-3], got {eps}")
    loss = fn()
    if not np.isfinite(loss.data).all():
        raise FloatingPointError("grad_check: non-finite loss")
    analytic = backward(loss, params)
    worst = 0.0
    for name, p in params.items():
        if not p.requires_grad:
            continue
        flat = p.data.reshape(-1)
        ga = analytic[name].reshape(-1)
        if max_entries is not None and flat.size > max_entries:
            picker = rng if rng is not None else np.random.default_rng(0)
            idx = picker.choice(flat.size, size=max_entries, replace=False)
        else:
            idx = np.arange(flat.size)
        for i in idx:
            kept = flat[i]
            flat[i] = kept + eps
            up = float(fn().data)
            flat[i] = kept - eps
            down = float(fn().data)
            flat[i] = kept
            numeric = (up - down) / (2.0 * eps)
            a = float(ga[i])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            if rel > worst:
                worst = rel
    return worst
