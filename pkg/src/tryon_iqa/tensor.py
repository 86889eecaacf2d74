"""Dense tensors with a reverse-mode differentiation tape.

Values are numpy arrays. Operations executed while a :class:`Tape` is
recording append a node holding the parents and a vector-Jacobian closure;
``backward`` replays the tape in reverse. Outside a recording tape the same
operations are plain numpy computations, which is the inference path.

Broadcasting is limited to scalar-with-tensor. The two places model code
needs more (bias rows and positional embeddings) go through the dedicated
``linear`` and ``repeat`` ops.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

DEFAULT_DTYPE = np.float64

_ACTIVE: list["Tape"] = []


class Tape:
    """Ordered record of operations; use as a context manager."""

    def __init__(self) -> None:
        self.nodes: list[tuple["Tensor", tuple["Tensor", ...], Callable]] = []
        self.mode = "recording"

    def __enter__(self) -> "Tape":
        _ACTIVE.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE.remove(self)
        self.mode = "frozen"

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], vjp: Callable) -> None:
        out.tape_id = len(self.nodes)
        self.nodes.append((out, parents, vjp))


def active_tape() -> Tape | None:
    if _ACTIVE and _ACTIVE[-1].mode == "recording":
        return _ACTIVE[-1]
    return None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "tape_id", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.tape_id: int | None = None
        self.name = name

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

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    # operators route through the module-level ops
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, like=self), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else DEFAULT_DTYPE
    return Tensor(np.asarray(x, dtype=dtype))


def _needs_graph(*ts: Tensor) -> Tape | None:
    tape = active_tape()
    if tape is None:
        return None
    if any(t.requires_grad for t in ts):
        return tape
    return None


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    out = Tensor(data)
    tape = _needs_graph(*parents)
    if tape is not None:
        out.requires_grad = True
        tape.record(out, parents, vjp)
    return out


def backward(loss: Tensor, tape: Tape | None = None) -> None:
    """Populate ``.grad`` on every leaf reachable from the scalar ``loss``.

    Leaves that appear on the tape but do not influence ``loss`` end up with
    zero gradient. Existing leaf gradients are overwritten, not accumulated.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape or (_ACTIVE[-1] if _ACTIVE else None)
    if tape is None or loss.tape_id is None:
        raise ContractError("loss was not produced under a recording tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, Tensor] = {}
    for out, parents, vjp in reversed(tape.nodes[: loss.tape_id + 1]):
        for p in parents:
            if p.requires_grad and p.tape_id is None:
                leaves[id(p)] = p
        g = grads.pop(id(out), None)
        if g is None:
            continue
        contribs = vjp(g)
        for p, gp in zip(parents, contribs):
            if gp is None or not p.requires_grad:
                continue
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + gp
            else:
                grads[key] = gp
    for key, leaf in leaves.items():
        g = grads.get(key)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=leaf.data.dtype)


# ---------------------------------------------------------------- elementwise

def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.data.size != 1 and b.data.size != 1:
        raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


def add(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same(a, b, "add")
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same(a, b, "sub")
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)))


def mul(a, b) -> Tensor:
    a = as_tensor(a, like=b if isinstance(b, Tensor) else None)
    b = as_tensor(b, like=a)
    _check_same(a, b, "mul")
    return _make(a.data * b.data, (a, b),
                 lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)))


def scale(x: Tensor, c: float) -> Tensor:
    return _make(x.data * c, (x,), lambda g: (g * c,))


def square(x: Tensor) -> Tensor:
    return _make(x.data * x.data, (x,), lambda g: (2.0 * g * x.data,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    # split by sign so exp never overflows
    e = np.exp(-np.abs(d))
    y = np.where(d >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return _make(y, (x,), lambda g: (g * y * (1.0 - y),))


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh-approximated GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d ** 3)
    t = np.tanh(inner)
    y = 0.5 * d * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(y, (x,), vjp)


def log(x: Tensor, floor: float = 0.0) -> Tensor:
    """Natural log; values below ``floor`` are clamped and pass no gradient."""
    d = x.data
    clamped = d < floor if floor > 0 else np.zeros_like(d, dtype=bool)
    safe = np.where(clamped, floor, d)
    return _make(np.log(safe), (x,), lambda g: (np.where(clamped, 0.0, g / safe),))


def elementwise(f: str, *args, **kwargs) -> Tensor:
    table = {"gelu": gelu, "tanh": tanh, "sigmoid": sigmoid, "add": add, "scale": scale}
    if f not in table:
        raise ValueError(f"unknown elementwise function {f!r}")
    return table[f](*args, **kwargs)


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor) -> Tensor:
    return _make(np.sum(x.data), (x,), lambda g: (np.broadcast_to(g, x.shape).copy(),))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return _make(np.mean(x.data), (x,), lambda g: (np.full(x.shape, g / n, dtype=x.data.dtype),))


def stack_scalars(xs: Sequence[Tensor]) -> Tensor:
    """Pack scalar tensors into a 1-D tensor."""
    xs = list(xs)
    data = np.array([float(t.data) for t in xs], dtype=xs[0].data.dtype)
    return _make(data, tuple(xs), lambda g: tuple(g[i].reshape(xs[i].shape) for i in range(len(xs))))


# ------------------------------------------------------------------ structural

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def getitem(x: Tensor, index) -> Tensor:
    basic = all(isinstance(i, (slice, int)) for i in (index if isinstance(index, tuple) else (index,)))

    def vjp(g):
        full = np.zeros_like(x.data)
        if basic:
            full[index] = g
        else:
            np.add.at(full, index, g)
        return (full,)

    return _make(np.array(x.data[index]), (x,), vjp)


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = list(xs)
    sizes = [t.shape[axis] for t in xs]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(np.concatenate([t.data for t in xs], axis=axis), tuple(xs), vjp)


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    out, start = [], 0
    for s in sizes:
        idx = [slice(None)] * x.ndim
        idx[axis] = slice(start, start + s)
        out.append(getitem(x, tuple(idx)))
        start += s
    return out


def repeat(x: Tensor, n: int) -> Tensor:
    """Stack ``n`` copies of ``x`` along a new leading axis."""
    data = np.broadcast_to(x.data, (n,) + x.shape).copy()
    return _make(data, (x,), lambda g: (g.sum(axis=0),))


# --------------------------------------------------------------------- linear

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product; leading batch dimensions must match exactly."""
    if a.ndim < 2 or a.ndim != b.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def vjp(g):
        return (g @ np.swapaxes(b.data, -1, -2), np.swapaxes(a.data, -1, -2) @ g)

    return _make(a.data @ b.data, (a, b), vjp)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """``x @ w + b`` over the last axis of ``x`` (any leading shape)."""
    if x.shape[-1] != w.shape[0] or w.ndim != 2:
        raise DimensionError(f"linear: cannot project {x.shape} with weight {w.shape}")
    if b is not None and b.shape != (w.shape[1],):
        raise DimensionError(f"linear: bias {b.shape} does not match weight {w.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    y = x2 @ w.data
    if b is not None:
        y = y + b.data

    def vjp(g):
        g2 = g.reshape(-1, w.shape[1])
        gx = (g2 @ w.data.T).reshape(x.shape)
        gw = x2.T @ g2
        gb = g2.sum(axis=0) if b is not None else None
        return (gx, gw, gb) if b is not None else (gx, gw)

    parents = (x, w, b) if b is not None else (x, w)
    return _make(y.reshape(lead + (w.shape[1],)), parents, vjp)


# ------------------------------------------------------------- normalizations

def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / np.sum(e, axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - np.sum(g * y, axis=axis, keepdims=True)),)

    return _make(y, (x,), vjp)


def layernorm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    if eps <= 0:
        raise ValueError("layernorm eps must be positive")
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise DimensionError(f"layernorm: gain/bias {gain.shape}/{bias.shape} vs features {d}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    y = xhat * gain.data + bias.data

    def vjp(g):
        lead = tuple(range(g.ndim - 1))
        ggain = (g * xhat).sum(axis=lead)
        gbias = g.sum(axis=lead)
        gx_hat = g * gain.data
        gx = inv * (gx_hat - gx_hat.mean(axis=-1, keepdims=True)
                    - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True))
        return (gx, ggain, gbias)

    return _make(y, (x, gain, bias), vjp)


def cosine_similarity(u: Tensor, v: Tensor, eps: float = 1e-8) -> Tensor:
    """Cosine similarity along the last axis; ``eps`` is added to each norm."""
    if u.shape != v.shape or u.shape[-1] < 1:
        raise DimensionError(f"cosine_similarity: shapes {u.shape} and {v.shape}")
    nu = np.sqrt((u.data * u.data).sum(axis=-1, keepdims=True)) + eps
    nv = np.sqrt((v.data * v.data).sum(axis=-1, keepdims=True)) + eps
    dot = (u.data * v.data).sum(axis=-1, keepdims=True)
    y = dot / (nu * nv)

    def vjp(g):
        g = g[..., None]
        # d||u||/du = u / (nu - eps)
        ru = np.where(nu - eps > 0, u.data / np.maximum(nu - eps, 1e-300), 0.0)
        rv = np.where(nv - eps > 0, v.data / np.maximum(nv - eps, 1e-300), 0.0)
        gu = g * (v.data / (nu * nv) - y / nu * ru)
        gv = g * (u.data / (nu * nv) - y / nv * rv)
        return (gu, gv)

    return _make(y[..., 0], (u, v), vjp)


# ------------------------------------------------------------------ utilities

def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; identical seeds give identical streams on every platform."""
    return np.random.Generator(np.random.PCG64(seed))


def grad_check(f: Callable[[], Tensor], params: Iterable[Tensor], step: float = 1e-3,
               max_coords: int | None = None, rng: np.random.Generator | None = None) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` rebuilds the scalar output from the current values of ``params``;
    coordinates are perturbed in place. With ``max_coords`` only a random
    subset of coordinates of each parameter is probed.
    """
    params = list(params)
    for p in params:
        p.requires_grad = True
    with Tape() as tape:
        out = f()
        backward(out, tape)
    analytic = [p.grad.copy() for p in params]
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        coords = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            coords = (rng or make_rng(0)).choice(flat.size, size=max_coords, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + step
            up = float(f().data)
            flat[i] = orig - step
            down = float(f().data)
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            err = abs(ga.reshape(-1)[i] - numeric) / (abs(numeric) + 1e-8)
            worst = max(worst, err)
    return worst
