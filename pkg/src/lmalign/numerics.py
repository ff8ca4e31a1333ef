"""Dense float64 tensors with a reverse-mode gradient tape.

Every operation here is a thin wrapper around numpy that also records how to
push gradients back to its inputs. Nothing is recorded when no input requires
a gradient, so frozen-model inference pays only the numpy cost.

Broadcasting is deliberately limited: elementwise ops need equal shapes, with
two exceptions, ``add_bias`` (a vector added along the last axis) and
``matmul`` of an N-d array by a 2-d weight (a linear map over the last axis).
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class NonFiniteError(FloatingPointError):
    """Raised when a value that must be finite is not."""


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=DTYPE)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

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

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    @property
    def T(self) -> Tensor:
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


class GradTape:
    """Reverse topological record of the operations that produced ``output``.

    Only nodes that (transitively) depend on a ``requires_grad`` leaf are on
    the tape; replaying it backward yields a gradient for every such leaf.
    """

    def __init__(self, output: Tensor):
        self.output = output
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(output, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        self.nodes = order[::-1]

    def __len__(self):
        return len(self.nodes)

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n._backward is None]

    def replay(self, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        out = self.output
        if seed is None:
            if out.data.size != 1:
                raise ShapeError(f"backward needs a scalar output, got shape {out.shape}")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {id(out): np.asarray(seed, dtype=DTYPE)}
        for node in self.nodes:
            g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
            if g is None or node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        return grads


def backward(output: Tensor, seed: np.ndarray | None = None) -> None:
    """Accumulate d(output)/d(leaf) into ``leaf.grad`` for every trainable leaf."""
    if not output.requires_grad:
        return
    tape = GradTape(output)
    grads = tape.replay(seed)
    for leaf in tape.leaves():
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g


def grad(output: Tensor, wrt: Sequence[Tensor]) -> list[np.ndarray]:
    """Functional gradient: returns d(output)/d(w) without touching ``.grad``."""
    if not output.requires_grad:
        return [np.zeros_like(w.data) for w in wrt]
    grads = GradTape(output).replay()
    return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


# ---------------------------------------------------------------- elementwise


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def mul_const(a: Tensor, c: np.ndarray) -> Tensor:
    """Multiply by a constant array of the same shape (masks, dropout)."""
    c = np.asarray(c, dtype=DTYPE)
    if c.shape != a.shape:
        raise ShapeError(f"mul_const: shapes {a.shape} and {c.shape} differ")
    return _make(a.data * c, (a,), lambda g: (g * c,), "mul_const")


def scale(a: Tensor, c: float) -> Tensor:
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def scale_by(a: Tensor, s: Tensor) -> Tensor:
    """Multiply every entry of ``a`` by the scalar tensor ``s``."""
    if s.data.size != 1:
        raise ShapeError(f"scale_by: expected a scalar, got shape {s.shape}")
    ad, sv = a.data, s.data.reshape(())
    return _make(
        ad * sv,
        (a, s),
        lambda g: (g * sv, np.asarray(np.sum(g * ad)).reshape(s.shape)),
        "scale_by",
    )


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a vector along the last axis of ``x`` (the one allowed broadcast)."""
    if b.ndim != 1 or b.shape[0] != x.shape[-1]:
        raise ShapeError(f"add_bias: bias {b.shape} does not match last axis of {x.shape}")
    lead = tuple(range(x.ndim - 1))
    need_b = b.requires_grad
    return _make(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=lead) if need_b else None), "add_bias")


def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    return _make(out, (x,), lambda g: (g * (1.0 - out * out),), "tanh")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU, fused into one tape entry."""
    xd = x.data
    x2 = xd * xd
    t = x2 * 0.044715
    t += 1.0
    t *= xd
    t *= _GELU_C
    np.tanh(t, out=t)
    out = t + 1.0
    out *= xd
    out *= 0.5

    def bw(g):
        d = x2 * (3 * 0.044715)
        d += 1.0
        d *= _GELU_C * 0.5
        d *= xd
        d *= 1.0 - t * t
        d += 0.5
        d += 0.5 * t
        d *= g
        return (d,)

    return _make(out, (x,), bw, "gelu")


# ---------------------------------------------------------------- reductions


def sum(x: Tensor, axis: int | tuple[int, ...] | None = None) -> Tensor:  # noqa: A001
    shape = x.shape

    def bw(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _make(np.asarray(x.data.sum(axis=axis)), (x,), bw, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(sum(x, axis), 1.0 / n)


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` and ``b`` may share identical leading batch axes, or ``b`` may be a
    2-d weight applied to the last axis of an N-d ``a``.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: need >=2-d operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: inner dimensions differ, {a.shape} @ {b.shape} "
            f"({a.shape[-1]} != {b.shape[-2]})"
        )
    ad, bd = a.data, b.data
    need_a, need_b = a.requires_grad, b.requires_grad
    if b.ndim == 2 and a.ndim > 2:

        def bw(g):
            ga = g @ bd.T if need_a else None
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1]) if need_b else None
            return ga, gb

        return _make(ad @ bd, (a, b), bw, "matmul")
    if a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch axes differ, {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ np.swapaxes(bd, -1, -2) if need_a else None
        gb = np.swapaxes(ad, -1, -2) @ g if need_b else None
        return ga, gb

    return _make(ad @ bd, (a, b), bw, "matmul")


def transpose(x: Tensor, axes: tuple[int, ...] | None = None) -> Tensor:
    if axes is None:
        if x.ndim != 2:
            raise ShapeError("transpose without axes needs a 2-d tensor")
        axes = (1, 0)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),), "transpose")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def expand(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    shape = (n,) + x.shape
    return _make(np.broadcast_to(x.data, shape).copy(), (x,), lambda g: (g.sum(axis=0),), "expand")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    ref = list(xs[0].shape)
    for t in xs[1:]:
        other = list(t.shape)
        if len(other) != len(ref) or any(
            i != axis % len(ref) and p != q for i, (p, q) in enumerate(zip(ref, other))
        ):
            raise ShapeError(f"concat: incompatible shapes {xs[0].shape} and {t.shape}")
    sizes = np.cumsum([t.shape[axis] for t in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, sizes, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), bw, "concat")


def getitem(x: Tensor, index) -> Tensor:
    """Basic or integer-array indexing; backward scatters with accumulation."""
    shape = x.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, index, g)
        return (out,)

    return _make(np.array(x.data[index]), (x,), bw, "getitem")


def embed(weight: Tensor, ids: np.ndarray) -> Tensor:
    """Row lookup ``weight[ids]`` for an integer id array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= weight.shape[0]):
        raise IndexError(f"embed: id out of range for table of {weight.shape[0]} rows")
    shape = weight.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (out,)

    return _make(weight.data[ids], (weight,), bw, "embed")


def where_const(mask: np.ndarray, x: Tensor, fill: np.ndarray) -> Tensor:
    """``x`` where ``mask`` is true, else the constant ``fill``."""
    mask = np.asarray(mask, dtype=bool)
    return _make(np.where(mask, x.data, fill), (x,), lambda g: (np.where(mask, g, 0.0),), "where")


# ---------------------------------------------------------------- normalisers


def softmax_row(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax along the last axis, stabilised by subtracting the row max.

    ``mask`` (boolean, broadcastable to ``x``) marks allowed entries; masked
    entries get probability exactly 0. Every row must allow at least one entry.
    """
    xd = x.data
    if mask is not None:
        xd = np.where(mask, xd, -np.inf)
    m = xd.max(axis=-1, keepdims=True)
    if not np.all(np.isfinite(m)):
        raise NonFiniteError("softmax_row: a row is fully masked or non-finite")
    e = np.exp(xd - m)
    out = e / e.sum(axis=-1, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), bw, "softmax")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    """Plain-array log-softmax; the exact forward used by ``log_softmax_row``."""
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def log_softmax_row(x: Tensor) -> Tensor:
    out = log_softmax_np(x.data)
    sm = np.exp(out)

    def bw(g):
        return (g - sm * g.sum(axis=-1, keepdims=True),)

    return _make(out, (x,), bw, "log_softmax")


def l2_normalize_rows(x: Tensor, min_norm: float = 1e-12) -> Tensor:
    """Scale every row (last axis) to unit Euclidean norm."""
    xd = x.data
    norms = np.sqrt((xd * xd).sum(axis=-1, keepdims=True))
    small = norms[..., 0] < min_norm
    if np.any(small):
        bad = np.argwhere(small)[0]
        idx = int(bad[0]) if bad.size == 1 else tuple(int(i) for i in bad)
        raise ValueError(f"l2_normalize_rows: row {idx} has norm below {min_norm}")
    out = xd / norms

    def bw(g):
        return ((g - out * (g * out).sum(axis=-1, keepdims=True)) / norms,)

    return _make(out, (x,), bw, "l2_normalize")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Layer normalisation over the last axis with elementwise gain and bias."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias must have shape ({d},)")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(x.ndim - 1))
    need_x, need_p = x.requires_grad, gain.requires_grad or bias.requires_grad

    def bw(g):
        dx = None
        if need_x:
            gx = g * gd
            dx = inv * (gx - gx.mean(axis=-1, keepdims=True) - xhat * (gx * xhat).mean(axis=-1, keepdims=True))
        if not need_p:
            return dx, None, None
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gain, bias), bw, "layer_norm")


# ---------------------------------------------------------------- checking


def numerical_gradient(
    fn: Callable[[], Tensor], param: Tensor, eps: float = 1e-5, indices: Iterable | None = None
) -> dict[tuple[int, ...], float]:
    """Central finite differences of scalar ``fn()`` w.r.t. entries of ``param``.

    ``param.data`` is perturbed in place and restored afterwards.
    """
    flat = param.data.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    out = {}
    for k in indices:
        k = int(k)
        orig = flat[k]
        flat[k] = orig + eps
        fp = fn().item()
        flat[k] = orig - eps
        fm = fn().item()
        flat[k] = orig
        out[np.unravel_index(k, param.shape)] = (fp - fm) / (2 * eps)
    return out


def relative_error(analytic: float, numeric: float, floor: float = 1e-6) -> float:
    """|a - n| / max(|a|, |n|, floor); the floor keeps near-zero entries sane."""
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def gradient_check(
    fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    eps: float = 1e-5,
    max_entries: int | None = None,
    rng: np.random.Generator | None = None,
) -> list[float]:
    """Max relative error between tape and finite-difference gradients, per param.

    With ``max_entries`` set, a random subset of that many entries is probed
    in each parameter.
    """
    analytic = grad(fn(), params)
    rng = rng if rng is not None else np.random.default_rng(0)
    errors = []
    for p, ga in zip(params, analytic):
        size = p.data.size
        if max_entries is not None and size > max_entries:
            idx = rng.choice(size, size=max_entries, replace=False)
        else:
            idx = range(size)
        num = numerical_gradient(fn, p, eps, idx)
        flat_a = ga.reshape(-1)
        worst = 0.0
        for pos, n in num.items():
            worst = max(worst, relative_error(flat_a[np.ravel_multi_index(pos, p.shape)], n))
        errors.append(worst)
    return errors


def assert_finite(x: Tensor | np.ndarray, what: str = "tensor") -> None:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x)
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what} contains non-finite values")
