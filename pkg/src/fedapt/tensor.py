"""Minimal reverse-mode autodiff over numpy arrays.

Every differentiable op returns a new :class:`Tensor` that remembers its
parents and a closure mapping the output gradient to parent gradients.
The resulting DAG is the tape: nodes are created in topological order, and
:func:`grad` walks it once in reverse.  A graph that has been differentiated
is consumed; differentiating it again raises :class:`TapeError`.

dtype follows the inputs (float32 for training, float64 for gradient checks);
python scalars are cast to the dtype of the tensor they meet.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeError",
    "ConfigError",
    "as_tensor",
    "grad",
    "finite_diff_grad",
    "add",
    "sub",
    "mul",
    "neg",
    "matmul",
    "linear",
    "concat",
    "reshape",
    "transpose",
    "broadcast_to",
    "take",
    "exp",
    "log",
    "relu",
    "sum",
    "mean",
    "softmax",
    "log_softmax",
    "layer_norm",
    "l2_normalize",
    "cosine_similarity",
    "cross_entropy",
    "margin",
    "multi_head_attention",
]


class TapeError(RuntimeError):
    """Raised when a consumed graph is differentiated again."""


class ShapeError(ValueError):
    """Shape contract violation; the message names both shapes."""


class ConfigError(ValueError):
    """Invalid static configuration (e.g. heads not dividing the width)."""


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float32 if dtype is None else dtype)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def __len__(self) -> int:
        return self.shape[0]

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor / tensor is not supported; multiply by a constant")
        return mul(self, 1.0 / other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes if axes else None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out._op = op
    out._consumed = False
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _coerce(a, b) -> tuple[Tensor, Tensor]:
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    _check_broadcast(a, b, "mul")

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _node(a.data * b.data, (a, b), backward, "mul")


def neg(a: Tensor) -> Tensor:
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _coerce(a, b)
    if a.ndim < 1 or b.ndim < 1:
        raise ShapeError(f"matmul: scalar operand, shapes {a.shape} and {b.shape}")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise ShapeError(f"matmul: inner extents differ, shapes {a.shape} and {b.shape}")
    if a.ndim < 2 or b.ndim < 2:
        # vector cases are rare here; promote to matrices and squeeze back
        a2 = reshape(a, (1,) + a.shape) if a.ndim == 1 else a
        b2 = reshape(b, b.shape + (1,)) if b.ndim == 1 else b
        out = matmul(a2, b2)
        if a.ndim == 1:
            out = reshape(out, out.shape[:-2] + out.shape[-1:])
        if b.ndim == 1:
            out = reshape(out, out.shape[:-1])
        return out

    def backward(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                gb = a.data.reshape(-1, ka).T @ g.reshape(-1, g.shape[-1])
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _node(a.data @ b.data, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with a 2-D weight, fused to keep the tape short."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: shapes {x.shape} and {weight.shape}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"linear: bias shape {bias.shape} vs weight {weight.shape}")
    d_in, d_out = weight.shape
    lead = x.shape[:-1]
    # 2-D products take the BLAS path; stacked 3-D @ 2-D does not
    out = x.data.reshape(-1, d_in) @ weight.data
    if bias is not None:
        out += bias.data
    out = out.reshape(lead + (d_out,))

    def backward(g):
        g2 = g.reshape(-1, d_out)
        gx = (g2 @ weight.data.T).reshape(x.shape) if x.requires_grad else None
        gw = gb = None
        if weight.requires_grad:
            gw = x.data.reshape(-1, d_in).T @ g2
        if bias is not None and bias.requires_grad:
            gb = g2.sum(axis=0)
        return (gx, gw) if bias is None else (gx, gw, gb)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, backward, "linear")


# ---------------------------------------------------------------------------
# structural


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat: no inputs")
    nd = tensors[0].ndim
    ax = axis % nd
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != nd or any(t.shape[i] != ref[i] for i in range(nd) if i != ax):
            raise ShapeError(f"concat axis {axis}: shapes {ref} and {t.shape}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * nd
                idx[ax] = slice(lo, hi)
                out.append(g[tuple(idx)])
            else:
                out.append(None)
        return tuple(out)

    data = np.concatenate([t.data for t in tensors], axis=ax)
    return _node(data, tensors, backward, "concat")


def _is_basic(index) -> bool:
    items = index if isinstance(index, tuple) else (index,)
    return all(isinstance(i, (slice, int, type(None), type(Ellipsis))) for i in items)


def _getitem(a: Tensor, index) -> Tensor:
    data = a.data[index]
    basic = _is_basic(index)

    def backward(g):
        full = np.zeros_like(a.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _node(np.array(data, copy=True), (a,), backward, "slice")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}") from None
    return _node(data, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = np.argsort(axes)
    return _node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: {a.shape} -> {shape}") from None
    return _node(data, (a,), lambda g: (_unbroadcast(g, a.shape),), "broadcast")


def take(table: Tensor, indices) -> Tensor:
    """Row gather ``table[indices]`` (embedding lookup)."""
    idx = np.asarray(indices, dtype=np.int64)

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, idx, g)
        return (full,)

    return _node(table.data[idx], (table,), backward, "take")


# ---------------------------------------------------------------------------
# reductions


def sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(data), (a,), backward, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        n = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        n = int(np.prod([a.shape[i] for i in axes]))
    if n == 0:
        raise ShapeError(f"mean over empty extent, shape {a.shape}")
    return mul(sum(a, axis, keepdims), 1.0 / n)


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"softmax needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _node(p, (a,), backward, "softmax")


def log_softmax(a: Tensor) -> Tensor:
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ShapeError(f"log_softmax needs a non-empty last axis, got {a.shape}")
    z = a.data - a.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _node(out, (a,), backward, "log_softmax")


def layer_norm(a: Tensor, gain: Tensor | None = None, bias: Tensor | None = None,
               eps: float = 1e-5) -> Tensor:
    d = a.shape[-1] if a.ndim else 0
    if d < 1:
        raise ShapeError(f"layer_norm needs a non-empty last axis, got {a.shape}")
    for p, name in ((gain, "gain"), (bias, "bias")):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm {name} shape {p.shape} vs input {a.shape}")
    mu = a.data.mean(axis=-1, keepdims=True)
    xc = a.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gx = g * gain.data if gain is not None else g
        ga = None
        if a.requires_grad:
            ga = rstd * (gx - gx.mean(axis=-1, keepdims=True)
                         - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        grads = [ga]
        if gain is not None:
            grads.append((g * xhat).reshape(-1, d).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g.reshape(-1, d).sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    parents = [a] + [p for p in (gain, bias) if p is not None]
    return _node(out.astype(a.dtype, copy=False), parents, backward, "layer_norm")


def l2_normalize(a: Tensor) -> Tensor:
    """Unit-normalise along the last axis; all-zero rows map to zero with zero gradient."""
    norm = np.sqrt((a.data * a.data).sum(axis=-1, keepdims=True))
    zero = norm == 0  # only exact zero rows; NaN still propagates
    safe = np.where(zero, 1.0, norm)
    y = np.where(zero, 0.0, a.data / safe).astype(a.dtype, copy=False)

    def backward(g):
        return (np.where(zero, 0.0, (g - y * (g * y).sum(axis=-1, keepdims=True)) / safe),)

    return _node(y, (a,), backward, "l2_normalize")


def cosine_similarity(a: Tensor, b: Tensor) -> Tensor:
    """Cosine along the last axis; zero vectors give 0."""
    if a.shape != b.shape:
        raise ShapeError(f"cosine_similarity: shapes {a.shape} and {b.shape}")
    return sum(mul(l2_normalize(a), l2_normalize(b)), axis=-1)


def cross_entropy(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of logit rows against integer labels."""
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    squeeze = logits.ndim == 1
    if squeeze:
        logits = reshape(logits, (1, logits.shape[0]))
    n, k = logits.shape
    if labels.shape != (n,):
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs labels {labels.shape}")
    if k == 0:
        raise ShapeError("cross_entropy: empty class axis")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: label out of range [0, {k})")
    lp = log_softmax(logits)
    picked = _getitem(lp, (np.arange(n), labels))
    losses = neg(picked)
    if reduction == "none":
        return losses
    if reduction == "sum":
        return sum(losses)
    return mean(losses)


def margin(logits: Tensor, labels, kappa: float = 0.0) -> Tensor:
    """Per-row ``max(z_y - max_{c != y} z_c, -kappa)``."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if k < 2:
        raise ShapeError(f"margin needs at least two classes, got {logits.shape}")
    z = logits.data
    rows = np.arange(n)
    others = z.copy()
    others[rows, labels] = -np.inf
    runner = others.argmax(axis=-1)
    raw = z[rows, labels] - z[rows, runner]
    active = raw > -kappa
    out = np.where(active, raw, -kappa).astype(z.dtype)

    def backward(g):
        full = np.zeros_like(z)
        ga = g * active
        full[rows, labels] += ga
        full[rows, runner] -= ga
        return (full,)

    return _node(out, (logits,), backward, "margin")


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    """Scaled dot-product attention with ``heads`` heads.

    ``q`` is (..., Tq, d); ``k`` and ``v`` are (..., Tk, d).  Leading batch
    dimensions must match exactly.  Returns (..., Tq, d).
    """
    d = q.shape[-1]
    if k.shape[-1] != d or v.shape != k.shape or q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(f"attention: q {q.shape}, k {k.shape}, v {v.shape}")
    if heads < 1 or d % heads:
        raise ConfigError(f"{heads} heads do not divide model width {d}")
    hd = d // heads
    lead = q.shape[:-2]
    nl = len(lead)
    perm = tuple(range(nl)) + (nl + 1, nl, nl + 2)

    def split(t):
        return transpose(reshape(t, lead + (t.shape[-2], heads, hd)), perm)

    qh, kh, vh = split(q), split(k), split(v)
    kt = transpose(kh, tuple(range(nl + 1)) + (nl + 2, nl + 1))
    scores = mul(matmul(qh, kt), 1.0 / np.sqrt(hd))
    ctx = matmul(softmax(scores), vh)
    return reshape(transpose(ctx, perm), lead + (q.shape[-2], d))


# ---------------------------------------------------------------------------
# differentiation


def _topo(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor]) -> dict[Tensor, np.ndarray]:
    """Gradients of scalar ``loss`` w.r.t. each of ``params``.

    Params that did not take part in the loss get zero arrays.  The graph
    under ``loss`` is consumed: a second call on it raises TapeError.
    """
    params = list(params)
    if loss.data.size != 1 or loss.ndim > 1:
        raise ShapeError(f"grad needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise TapeError("this graph was already differentiated; re-run the forward pass")
    result = {p: np.zeros_like(p.data) for p in params}
    if not loss.requires_grad:
        loss._consumed = True
        return result
    order = _topo(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    wanted = {id(p) for p in params}
    for node in reversed(order):
        g = grads.pop(id(node), None) if id(node) not in wanted else grads.get(id(node))
        backward = node._backward
        if node._op != "leaf":
            if node._consumed:
                raise TapeError("graph contains a node from an already differentiated tape")
            node._consumed = True
        if backward is None or g is None:
            continue
        parent_grads = backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
        node._backward = None
    for p in params:
        if id(p) in grads:
            result[p] = np.asarray(grads[id(p)], dtype=p.dtype).reshape(p.shape)
    return result


def finite_diff_grad(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``x``, one coordinate at a time."""
    if h <= 0:
        raise ValueError("finite difference step must be positive")
    base = np.array(x.data if isinstance(x, Tensor) else x, copy=True)
    out = np.zeros_like(base)
    flat = base.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        up = float(np.asarray(f(Tensor(base.copy())).data))
        flat[i] = old - h
        down = float(np.asarray(f(Tensor(base.copy())).data))
        flat[i] = old
        out.reshape(-1)[i] = (up - down) / (2 * h)
    return out
