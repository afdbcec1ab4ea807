"""Reverse-mode automatic differentiation over dense float64 arrays.

A :class:`Tape` records every primitive applied while it is active. Calling
:func:`backward` walks the tape in reverse insertion order and accumulates
gradients into the ``grad`` slot of every leaf tensor created with
``requires_grad=True``. Operations performed while no tape is active are
plain NumPy computations and leave no trace, which is how inference and
teacher forward passes avoid bookkeeping.

The module also carries the optimizer side of training: global-norm
clipping, Adam with a linear warmup/decay schedule, a central finite
difference oracle, and the flat checkpoint format.
"""

from __future__ import annotations

import json
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

PRIMITIVES = (
    "matmul", "add", "mul", "sub", "broadcast", "embedding_gather",
    "layernorm", "gelu_or_tanh", "softmax", "log_softmax", "reduce_sum",
    "reduce_mean", "transpose", "reshape", "masked_fill", "concat",
)


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


class Tensor:
    """Dense float64 array with an optional gradient slot."""

    __slots__ = ("data", "grad", "requires_grad", "node_id", "_tape")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.node_id: int | None = None
        self._tape: Tape | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    op: str
    inputs: tuple[Tensor, ...]
    out: Tensor
    backward: Callable[[np.ndarray], tuple]


class Tape:
    """Ordered record of primitive applications.

    Use as a context manager; nested tapes are not supported.
    """

    _active: "Tape | None" = None

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if Tape._active is not None:
            raise TapeError("a tape is already active")
        Tape._active = self
        return self

    def __exit__(self, *exc) -> None:
        Tape._active = None

    def clear(self) -> None:
        for node in self.nodes:
            node.out.node_id = None
            node.out._tape = None
        self.nodes = []

    def _record(self, op, inputs, out, backward) -> None:
        out.node_id = len(self.nodes)
        out._tape = self
        self.nodes.append(_Node(op, inputs, out, backward))


def active_tape() -> Tape | None:
    return Tape._active


@contextmanager
def no_grad():
    """Suspend recording on the active tape, if any."""
    saved, Tape._active = Tape._active, None
    try:
        yield
    finally:
        Tape._active = saved


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _tracked(t: Tensor, tape: Tape) -> bool:
    return t.requires_grad or t._tape is tape


def _check_finite(op: str, tensors: Sequence[Tensor]) -> None:
    for t in tensors:
        # a finite sum implies finite entries; only a non-finite sum (which
        # may also be plain overflow) needs the elementwise test
        if not math.isfinite(t.data.sum()) and not np.isfinite(t.data).all():
            raise NonFiniteError(f"{op}: non-finite input of shape {t.shape}")


def _emit(op: str, inputs: tuple[Tensor, ...], value: np.ndarray, backward) -> Tensor:
    out = Tensor(value)
    tape = Tape._active
    if tape is not None and any(_tracked(t, tape) for t in inputs):
        tape._record(op, inputs, out, backward)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------- primitives


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("add", a, b)
    _check_finite("add", (a, b))
    sa, sb = a.shape, b.shape
    return _emit("add", (a, b), a.data + b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("sub", a, b)
    _check_finite("sub", (a, b))
    sa, sb = a.shape, b.shape
    return _emit("sub", (a, b), a.data - b.data,
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _broadcast_shape("mul", a, b)
    _check_finite("mul", (a, b))
    ad, bd = a.data, b.data
    return _emit("mul", (a, b), ad * bd,
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def matmul(a, b) -> Tensor:
    """Batched matrix product over the last two axes."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    try:
        np.broadcast_shapes(a.shape[:-2], b.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {a.shape} and {b.shape} do not broadcast") from None
    _check_finite("matmul", (a, b))
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            # fold batch axes into one GEMM for the weight gradient
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _emit("matmul", (a, b), ad @ bd, backward)


def broadcast(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(shape)
    try:
        value = np.broadcast_to(x.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast: cannot broadcast {x.shape} to {shape}") from None
    _check_finite("broadcast", (x,))
    sx = x.shape
    return _emit("broadcast", (x,), value, lambda g: (_unbroadcast(g, sx),))


def embedding_gather(table, ids) -> Tensor:
    """Rows of ``table`` selected by the integer array ``ids``."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if table.data.ndim != 2:
        raise ShapeError(f"embedding_gather: table must be 2-D, got {table.shape}")
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding_gather: ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding_gather: ids out of range for table {table.shape}")
    _check_finite("embedding_gather", (table,))
    n_rows = table.shape[0]

    def backward(g):
        gt = np.zeros((n_rows, g.shape[-1]))
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _emit("embedding_gather", (table,), table.data[ids], backward)


def layernorm(x, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(f"layernorm: input {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    _check_finite("layernorm", (x, gamma, beta))
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gamma.data

    def backward(g):
        gxhat = g * gd
        gx = inv * (gxhat - gxhat.mean(axis=-1, keepdims=True)
                    - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _emit("layernorm", (x, gamma, beta), xhat * gd + beta.data, backward)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> Tensor:
    """GELU, tanh approximation (GPT-2 form)."""
    x = _as_tensor(x)
    _check_finite("gelu_or_tanh", (x,))
    xd = x.data
    x2 = xd * xd
    th = np.tanh(_GELU_C * xd * (1.0 + 0.044715 * x2))

    def backward(g):
        # g * (0.5 (1 + th) + 0.5 x (1 - th^2) c (1 + 3 * 0.044715 x^2)), in place
        sech2 = th * th
        np.subtract(1.0, sech2, out=sech2)
        rest = 0.5 * xd
        rest *= sech2
        dinner = (3 * 0.044715) * x2
        dinner += 1.0
        dinner *= _GELU_C
        rest *= dinner
        out = th + 1.0
        out *= 0.5
        out += rest
        out *= g
        return (out,)

    return _emit("gelu_or_tanh", (x,), 0.5 * xd * (1.0 + th), backward)


def tanh(x) -> Tensor:
    x = _as_tensor(x)
    _check_finite("gelu_or_tanh", (x,))
    y = np.tanh(x.data)
    return _emit("gelu_or_tanh", (x,), y, lambda g: (g * (1.0 - y * y),))


def softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite("softmax", (x,))
    e = np.exp(x.data - x.data.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)
    return _emit("softmax", (x,), y,
                 lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),))


def log_softmax(x, axis: int = -1) -> Tensor:
    x = _as_tensor(x)
    _check_finite("log_softmax", (x,))
    z = x.data - x.data.max(axis=axis, keepdims=True)
    y = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(y) * g.sum(axis=axis, keepdims=True),)

    return _emit("log_softmax", (x,), y, backward)


def reduce_sum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_finite("reduce_sum", (x,))
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _emit("reduce_sum", (x,), np.asarray(x.data.sum(axis=axis, keepdims=keepdims)), backward)


def reduce_mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    _check_finite("reduce_mean", (x,))
    shape = x.shape
    count = x.size if axis is None else int(np.prod([shape[a] for a in np.atleast_1d(axis)]))

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return _emit("reduce_mean", (x,), np.asarray(x.data.mean(axis=axis, keepdims=keepdims)), backward)


def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    x = _as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.data.ndim)))
    axes = tuple(axes)
    if sorted(axes) != list(range(x.data.ndim)):
        raise ShapeError(f"transpose: axes {axes} invalid for shape {x.shape}")
    _check_finite("transpose", (x,))
    inverse = tuple(np.argsort(axes))
    return _emit("transpose", (x,), np.transpose(x.data, axes),
                 lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    try:
        value = x.data.reshape(tuple(shape))
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {x.shape} to {tuple(shape)}") from None
    _check_finite("reshape", (x,))
    sx = x.shape
    return _emit("reshape", (x,), value, lambda g: (g.reshape(sx),))


def masked_fill(x, mask, value: float) -> Tensor:
    """Replace entries where ``mask`` is true by the constant ``value``."""
    x = _as_tensor(x)
    mask = np.asarray(mask, dtype=bool)
    try:
        full = np.broadcast_to(mask, x.shape)
    except ValueError:
        raise ShapeError(f"masked_fill: mask {mask.shape} does not broadcast to {x.shape}") from None
    _check_finite("masked_fill", (x,))
    return _emit("masked_fill", (x,), np.where(full, value, x.data),
                 lambda g: (np.where(full, 0.0, g),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    tensors = tuple(_as_tensor(t) for t in tensors)
    try:
        value = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: shapes {shapes} do not agree off axis {axis}") from None
    _check_finite("concat", tensors)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _emit("concat", tensors, value,
                 lambda g: tuple(np.split(g, bounds, axis=axis)))


_DISPATCH = {
    "matmul": matmul, "add": add, "mul": mul, "sub": sub, "broadcast": broadcast,
    "embedding_gather": embedding_gather, "layernorm": layernorm, "gelu_or_tanh": gelu,
    "softmax": softmax, "log_softmax": log_softmax, "reduce_sum": reduce_sum,
    "reduce_mean": reduce_mean, "transpose": transpose, "reshape": reshape,
    "masked_fill": masked_fill, "concat": concat,
}


def apply_primitive(op_kind: str, *inputs, **kwargs) -> Tensor:
    try:
        fn = _DISPATCH[op_kind]
    except KeyError:
        raise ValueError(f"unknown primitive {op_kind!r}") from None
    return fn(*inputs, **kwargs)


# ------------------------------------------------------------------ backward


def backward(tape: Tape, loss: Tensor, clear: bool = True) -> dict[int, np.ndarray]:
    """Accumulate d(loss)/d(leaf) into every ``requires_grad`` leaf on the tape.

    Returns a map from ``id(leaf)`` to the gradient contributed by this call.
    """
    if loss.size != 1:
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._tape is not tape or loss.node_id is None:
        raise TapeError("loss is not recorded on this tape (detached node)")
    grads: list[np.ndarray | None] = [None] * len(tape.nodes)
    grads[loss.node_id] = np.ones_like(loss.data)
    leaves: dict[int, tuple[Tensor, np.ndarray]] = {}
    for idx in range(loss.node_id, -1, -1):
        g = grads[idx]
        if g is None:
            continue
        node = tape.nodes[idx]
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None:
                continue
            if inp._tape is tape and inp.node_id is not None:
                j = inp.node_id
                grads[j] = gi if grads[j] is None else grads[j] + gi
            elif inp.requires_grad:
                key = id(inp)
                leaves[key] = (inp, leaves[key][1] + gi if key in leaves else gi)
        grads[idx] = None
    contributed = {}
    for key, (leaf, gi) in leaves.items():
        if not np.isfinite(gi).all():
            raise NonFiniteError("backward produced a non-finite gradient")
        leaf.grad = np.array(gi, dtype=np.float64) if leaf.grad is None else leaf.grad + gi
        contributed[key] = gi
    if clear:
        tape.clear()
    return contributed


def grad_of(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    """Fresh gradients of ``fn()`` with respect to ``params``."""
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = fn()
        backward(tape, loss)
    return [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]


_EPS = float(np.finfo(np.float64).eps)


def check_gradients(model_fn: Callable[[], float], params: Sequence[Tensor],
                    analytic: Sequence[np.ndarray], h: float = 1e-5,
                    coords_per_param: int | None = None,
                    rng: np.random.Generator | None = None,
                    floor: float = 1e-6) -> float:
    """Max relative error between ``analytic`` gradients and central differences.

    ``model_fn`` re-evaluates the scalar loss from the current parameter
    values. Relative error is ``|a - n| / max(|a|, |n|, floor)``. When
    ``coords_per_param`` is set only that many random coordinates per
    parameter are probed. Coordinates where analytic and numeric values
    agree to within the rounding error of the difference quotient count as
    exact matches (gradients that are identically zero, such as attention
    key biases, otherwise score a spurious relative error of order 1e-4).
    """
    if h <= 0:
        raise ValueError("h must be positive")
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for p, ga in zip(params, analytic):
        flat = p.data.reshape(-1)
        idx = np.arange(flat.size)
        if coords_per_param is not None and flat.size > coords_per_param:
            idx = rng.choice(flat.size, size=coords_per_param, replace=False)
        ga = np.asarray(ga).reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            fp = float(model_fn())
            flat[i] = orig - h
            fm = float(model_fn())
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise NonFiniteError(f"non-finite loss while probing coordinate {i}")
            num = (fp - fm) / (2 * h)
            # the difference quotient cannot resolve anything below the
            # rounding error of the two loss evaluations
            noise = 4 * _EPS * (abs(fp) + abs(fm)) / (2 * h)
            if abs(ga[i] - num) <= noise:
                continue
            err = abs(ga[i] - num) / max(abs(ga[i]), abs(num), floor)
            worst = max(worst, err)
    return worst


# ----------------------------------------------------------------- optimizer


def global_norm(grads: Iterable[np.ndarray]) -> float:
    return math.sqrt(sum(float(np.dot(g.reshape(-1), g.reshape(-1))) for g in grads))


def clip_global_norm(grads: Sequence[np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place so their joint L2 norm is at most ``max_norm``."""
    if max_norm <= 0:
        raise ValueError("max_norm must be positive")
    norm = global_norm(grads)
    if norm <= max_norm:
        return 1.0
    scale = max_norm / norm
    for g in grads:
        g *= scale
    return scale


@dataclass
class AdamState:
    total_steps: int
    lr_max: float = 6.25e-5
    epsilon: float = 1.0e-4
    weight_decay: float = 0.01
    warmup_ratio: float = 0.005
    max_grad_norm: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if self.total_steps < 1:
            raise ValueError("total_steps must be positive")
        if not 0.0 <= self.warmup_ratio <= 1.0:
            raise ValueError("warmup_ratio must lie in [0, 1]")

    def lr_at(self, step: int) -> float:
        """Linear warmup from 0 to ``lr_max``, then linear decay to 0."""
        warmup = self.warmup_ratio * self.total_steps
        if step < warmup:
            return self.lr_max * step / warmup
        if self.total_steps <= warmup:
            return self.lr_max
        return max(0.0, self.lr_max * (self.total_steps - step) / (self.total_steps - warmup))


def adam_step(state: AdamState, params: Sequence[Tensor], grads: Sequence[np.ndarray]) -> float:
    """One clipped, bias-corrected AdamW update. Returns the learning rate used."""
    if len(params) != len(grads):
        raise ValueError(f"{len(params)} params but {len(grads)} grads")
    if state.step >= state.total_steps:
        raise ValueError(f"step {state.step} beyond schedule of {state.total_steps}")
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    elif len(state.m) != len(params):
        raise ValueError("optimizer state does not match parameter count")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"adam_step: param {p.shape} vs grad {g.shape}")
    if state.max_grad_norm:
        clip_global_norm(grads, state.max_grad_norm)
    lr = state.lr_at(state.step)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        sq = (1.0 - state.beta2) * g
        sq *= g
        v += sq
        if lr == 0.0:
            continue
        p.data *= 1.0 - lr * state.weight_decay
        # lr * (m / c1) / (sqrt(v / c2) + eps) with fewer temporaries
        step = m / c1
        step *= lr
        denom = v / c2
        np.sqrt(denom, out=denom)
        denom += state.epsilon
        step /= denom
        p.data -= step
    return lr


# --------------------------------------------------------------- checkpoints


def save_arrays(path: str | Path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write ``<path>.json`` (shape manifest) and ``<path>.bin`` (little-endian float64)."""
    path = Path(path)
    manifest = {"meta": meta or {}, "arrays": [[k, list(a.shape)] for k, a in arrays.items()]}
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    flat = np.concatenate([np.asarray(a, dtype="<f8").reshape(-1) for a in arrays.values()]) \
        if arrays else np.zeros(0, dtype="<f8")
    path.with_suffix(".bin").write_bytes(flat.astype("<f8").tobytes())


def load_arrays(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    flat = np.frombuffer(path.with_suffix(".bin").read_bytes(), dtype="<f8")
    out, offset = {}, 0
    for name, shape in manifest["arrays"]:
        n = int(np.prod(shape)) if shape else 1
        out[name] = flat[offset:offset + n].reshape(shape).astype(np.float64)
        offset += n
    if offset != flat.size:
        raise ValueError(f"checkpoint {path} has {flat.size} values, manifest expects {offset}")
    return out, manifest["meta"]
