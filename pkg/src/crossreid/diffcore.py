"""Tape-based reverse-mode differentiation over numpy arrays.

Every differentiable computation in the package is expressed with the ops in
this module. Ops run eagerly; when a :class:`Tape` is active and at least one
input requires a gradient, the op appends a node to the tape. ``Tape.backward``
then walks the nodes in exact reverse execution order and accumulates
gradients into every tensor that consumed an upstream value.

Without an active tape nothing is recorded, which is how evaluation runs.
"""

from __future__ import annotations

import contextvars
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12

_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "crossreid_active_tape", default=None
)


class ShapeError(ValueError):
    """Raised when operand shapes do not fit an op's contract."""


class NonFiniteError(FloatingPointError):
    """Raised when a value or gradient that must be finite is not."""


class Tensor:
    """Dense real array with optional gradient buffer."""

    __slots__ = ("values", "requires_grad", "grad", "name")

    def __init__(self, values, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(values, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.values = arr
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(arr) if requires_grad else None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def dtype(self):
        return self.values.dtype

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def numpy(self) -> np.ndarray:
        return self.values

    def item(self) -> float:
        if self.values.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.values)

    def detach(self) -> "Tensor":
        return Tensor(self.values)

    # operator sugar; all of these route through the registered ops below
    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other, self.dtype))

    def __rsub__(self, other):
        return sub(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, index):
        return take(self, index)


def _as_tensor(x, dtype) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))


@dataclass
class Node:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Ordered record of executed ops; use as a context manager."""

    nodes: list[Node] = field(default_factory=list)
    _token: contextvars.Token | None = field(default=None, repr=False)

    def __enter__(self) -> "Tape":
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPE.reset(self._token)
        self._token = None

    def backward(self, loss: Tensor, seed_grad: np.ndarray | None = None) -> None:
        """Propagate d(loss)/d(x) into ``x.grad`` for every recorded input."""
        if seed_grad is None:
            if loss.values.size != 1:
                raise ShapeError(f"backward() from non-scalar of shape {loss.shape} needs seed_grad")
            seed_grad = np.ones_like(loss.values)
        if not loss.requires_grad:
            raise ValueError("loss does not depend on any tensor that requires grad")
        loss.grad = loss.grad + seed_grad
        for node in reversed(self.nodes):
            out_grad = node.output.grad
            if out_grad is None:
                continue
            for inp, g in zip(node.inputs, node.backward(out_grad)):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is None:
                    inp.grad = np.zeros_like(inp.values)
                inp.grad += g

    def ops(self) -> list[str]:
        return [n.op for n in self.nodes]


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def _record(op: str, inputs: tuple[Tensor, ...], out_values: np.ndarray, backward) -> Tensor:
    tape = _ACTIVE_TAPE.get()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(out_values, requires_grad=needs)
    if needs:
        tape.nodes.append(Node(op, inputs, out, backward))
    return out


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{name}: non-finite input")


# ---------------------------------------------------------------- elementwise


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("add", a, b)
    return _record("add", (a, b), a.values + b.values, lambda g: (g, g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("sub", a, b)
    return _record("sub", (a, b), a.values - b.values, lambda g: (g, -g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _same_shape("mul", a, b)
    av, bv = a.values, b.values
    return _record("mul", (a, b), av * bv, lambda g: (g * bv, g * av))


def scale(a: Tensor, c: float) -> Tensor:
    c = a.values.dtype.type(c)
    return _record("scale", (a,), a.values * c, lambda g: (g * c,))


def square(a: Tensor) -> Tensor:
    av = a.values
    return _record("square", (a,), av * av, lambda g: (2.0 * av * g,))


def sigmoid(a: Tensor) -> Tensor:
    av = a.values
    # split by sign so exp never overflows
    e = np.exp(-np.abs(av))
    s = np.where(av >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(av.dtype)
    return _record("sigmoid", (a,), s, lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.values)
    return _record("tanh", (a,), t, lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    mask = a.values > 0
    return _record("relu", (a,), np.where(mask, a.values, 0).astype(a.dtype), lambda g: (g * mask,))


def log(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """Natural log with the argument floored at ``eps``."""
    av = a.values
    clipped = av < eps
    safe = np.where(clipped, eps, av)

    def backward(g):
        return (np.where(clipped, 0.0, g / safe).astype(av.dtype),)

    return _record("log", (a,), np.log(safe).astype(av.dtype), backward)


# ---------------------------------------------------------------- reductions and shape


def total(a: Tensor) -> Tensor:
    shape = a.shape
    return _record("sum", (a,), np.asarray(a.values.sum(), dtype=a.dtype).reshape(1),
                   lambda g: (np.broadcast_to(g.reshape(()), shape).astype(g.dtype),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    try:
        out = a.values.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"reshape: cannot view {src} as {shape}") from exc
    return _record("reshape", (a,), out, lambda g: (g.reshape(src),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.values.size,))


def take(a: Tensor, index) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.values[index]
    if not isinstance(out, np.ndarray):
        out = np.asarray(out, dtype=a.dtype).reshape(1)
        index = _as_slice_index(index)
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        full[index] += g.reshape(full[index].shape)
        return (full,)

    return _record("take", (a,), out, backward)


def _as_slice_index(index):
    if isinstance(index, (int, np.integer)):
        return slice(int(index), int(index) + 1)
    return index


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Join 1-D tensors end to end."""
    for p in parts:
        if p.values.ndim != 1:
            raise ShapeError(f"concat: expects 1-D tensors, got {p.shape}")
    sizes = np.cumsum([p.shape[0] for p in parts])[:-1]
    out = np.concatenate([p.values for p in parts])
    return _record("concat", tuple(parts), out, lambda g: tuple(np.split(g, sizes)))


def stack_mean(parts: Sequence[Tensor]) -> Tensor:
    """Elementwise mean of equally shaped tensors."""
    if not parts:
        raise ShapeError("stack_mean: no tensors given")
    for p in parts[1:]:
        _same_shape("stack_mean", parts[0], p)
    n = len(parts)
    out = np.mean(np.stack([p.values for p in parts]), axis=0)
    inv = parts[0].dtype.type(1.0 / n)
    return _record("stack_mean", tuple(parts), out, lambda g: tuple(g * inv for _ in range(n)))


# ---------------------------------------------------------------- layers


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """``weight @ x + bias`` for a single vector ``x``."""
    if x.values.ndim != 1 or weight.values.ndim != 2 or bias.values.ndim != 1:
        raise ShapeError(f"linear: expects x [n], weight [m,n], bias [m]; got {x.shape}, {weight.shape}, {bias.shape}")
    m, n = weight.shape
    if x.shape[0] != n or bias.shape[0] != m:
        raise ShapeError(f"linear: weight {weight.shape} incompatible with x {x.shape} / bias {bias.shape}")
    xv, wv = x.values, weight.values

    def backward(g):
        return wv.T @ g, np.outer(g, xv), g

    return _record("linear", (x, weight, bias), wv @ xv + bias.values, backward)


def matvec(weight: Tensor, x: Tensor) -> Tensor:
    if weight.values.ndim != 2 or x.values.ndim != 1 or weight.shape[1] != x.shape[0]:
        raise ShapeError(f"matvec: weight {weight.shape} incompatible with x {x.shape}")
    wv, xv = weight.values, x.values
    return _record("matvec", (weight, x), wv @ xv, lambda g: (np.outer(g, xv), wv.T @ g))


def _windows(x: np.ndarray, kh: int, kw: int, stride: int) -> np.ndarray:
    # [C, H', W', kh, kw] view
    win = np.lib.stride_tricks.sliding_window_view(x, (kh, kw), axis=(1, 2))
    return win[:, ::stride, ::stride]


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor, stride: int = 1) -> Tensor:
    """Valid (unpadded) cross-correlation of a [C_in,H,W] input."""
    if not isinstance(stride, (int, np.integer)) or stride <= 0:
        raise ShapeError(f"conv2d: stride must be a positive int, got {stride!r}")
    if x.values.ndim != 3 or kernel.values.ndim != 4 or bias.values.ndim != 1:
        raise ShapeError(
            f"conv2d: expects input [C,H,W], kernel [O,C,kH,kW], bias [O]; got {x.shape}, {kernel.shape}, {bias.shape}"
        )
    c_in, h, w = x.shape
    c_out, k_in, kh, kw = kernel.shape
    if k_in != c_in:
        raise ShapeError(f"conv2d: kernel expects {k_in} input channels, input has {c_in}")
    if kh > h or kw > w:
        raise ShapeError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape[0] != c_out:
        raise ShapeError(f"conv2d: bias has {bias.shape[0]} entries for {c_out} output channels")

    xv, kv = x.values, kernel.values
    win = _windows(xv, kh, kw, stride)
    ho, wo = win.shape[1], win.shape[2]
    # cols: [H'*W', C*kh*kw]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(ho * wo, c_in * kh * kw)
    kmat = kv.reshape(c_out, -1)
    out = (kmat @ cols.T).reshape(c_out, ho, wo) + bias.values[:, None, None]

    def backward(g):
        gmat = g.reshape(c_out, ho * wo)
        gk = (gmat @ cols).reshape(kv.shape)
        gb = gmat.sum(axis=1)
        gcols = (kmat.T @ gmat).reshape(c_in, kh, kw, ho, wo)
        gx = np.zeros_like(xv)
        for i in range(kh):
            for j in range(kw):
                gx[:, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, i, j]
        return gx, gk, gb

    return _record("conv2d", (x, kernel, bias), out, backward)


def max_pool2d(x: Tensor, size: int) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    if size <= 0:
        raise ShapeError(f"max_pool2d: size must be positive, got {size}")
    if size == 1:
        return x
    c, h, w = x.shape
    ho, wo = h // size, w // size
    if ho == 0 or wo == 0:
        raise ShapeError(f"max_pool2d: window {size} larger than input {h}x{w}")
    xv = x.values
    blocks = xv[:, :ho * size, :wo * size].reshape(c, ho, size, wo, size).transpose(0, 1, 3, 2, 4)
    blocks = blocks.reshape(c, ho, wo, size * size)
    arg = blocks.argmax(axis=-1)
    out = np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0]

    def backward(g):
        gb = np.zeros((c, ho, wo, size * size), dtype=xv.dtype)
        np.put_along_axis(gb, arg[..., None], g[..., None], axis=-1)
        gb = gb.reshape(c, ho, wo, size, size).transpose(0, 1, 3, 2, 4).reshape(c, ho * size, wo * size)
        gx = np.zeros_like(xv)
        gx[:, :ho * size, :wo * size] = gb
        return (gx,)

    return _record("max_pool2d", (x,), out, backward)


def softmax(logits: Tensor) -> Tensor:
    """Softmax over a 1-D tensor, stabilised by subtracting the max."""
    lv = logits.values
    if lv.ndim != 1:
        raise ShapeError(f"softmax: expects a 1-D tensor, got {logits.shape}")
    _check_finite("softmax", lv)
    e = np.exp(lv - lv.max())
    p = e / e.sum()

    def backward(g):
        return (p * (g - np.dot(g, p)),)

    return _record("softmax", (logits,), p, backward)


@dataclass
class LSTMParams:
    """Gate weights stacked in the order input, forget, candidate, output."""

    w_x: Tensor  # [4d, n]
    w_h: Tensor  # [4d, d]
    b: Tensor  # [4d]

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]

    def tensors(self) -> list[Tensor]:
        return [self.w_x, self.w_h, self.b]


def lstm_step(x: Tensor, h_prev: Tensor, c_prev: Tensor, params: LSTMParams) -> tuple[Tensor, Tensor]:
    d = params.hidden
    if params.w_x.shape[0] != 4 * d or params.w_h.shape != (4 * d, d) or params.b.shape != (4 * d,):
        raise ShapeError(
            f"lstm_step: inconsistent gate parameters w_x {params.w_x.shape}, w_h {params.w_h.shape}, b {params.b.shape}"
        )
    if h_prev.shape != (d,) or c_prev.shape != (d,):
        raise ShapeError(f"lstm_step: state shapes {h_prev.shape}/{c_prev.shape} do not match hidden size {d}")
    z = add(linear(x, params.w_x, params.b), matvec(params.w_h, h_prev))
    i = sigmoid(take(z, slice(0, d)))
    f = sigmoid(take(z, slice(d, 2 * d)))
    g = tanh(take(z, slice(2 * d, 3 * d)))
    o = sigmoid(take(z, slice(3 * d, 4 * d)))
    c = add(mul(f, c_prev), mul(i, g))
    h = mul(o, tanh(c))
    return h, c


# ---------------------------------------------------------------- gradient checking


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    tolerance: float

    @property
    def max_error(self) -> float:
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    return np.abs(analytic - numeric) / np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))


def grad_check(fn: Callable[..., Tensor], inputs: dict[str, Tensor] | Sequence[Tensor],
               rel_tolerance: float = 1e-5, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``fn`` against central differences.

    ``fn`` receives the inputs positionally (or by keyword when ``inputs`` is a
    mapping) and may return any tensor; non-scalar outputs are reduced with a
    fixed random projection so every output element contributes. Inputs are
    promoted to float64. Only tensors with ``requires_grad`` are checked.
    """
    named = dict(inputs) if isinstance(inputs, dict) else {f"arg{i}": t for i, t in enumerate(inputs)}
    for t in named.values():
        if t.values.dtype != np.float64:
            t.values = t.values.astype(np.float64)
            if t.grad is not None:
                t.grad = np.zeros_like(t.values)
    call = (lambda: fn(**named)) if isinstance(inputs, dict) else (lambda: fn(*named.values()))

    with Tape():
        probe_out = call()
    proj = np.random.default_rng(seed).uniform(0.5, 1.5, size=probe_out.shape) * \
        np.where(np.random.default_rng(seed + 1).random(probe_out.shape) < 0.5, -1.0, 1.0)

    def scalar() -> float:
        return float(np.sum(call().values * proj))

    for t in named.values():
        t.zero_grad()
    with Tape() as tape:
        out = call()
        tape.backward(out, seed_grad=proj.astype(out.dtype))

    errors: dict[str, float] = {}
    for name, t in named.items():
        if not t.requires_grad:
            continue
        analytic = t.grad.copy()
        if not np.all(np.isfinite(analytic)):
            bad = tuple(int(i) for i in np.argwhere(~np.isfinite(analytic))[0])
            raise NonFiniteError(f"grad_check: non-finite analytic gradient for {name} at index {bad}")
        numeric = np.zeros_like(analytic)
        flat = t.values.reshape(-1)
        for idx in range(flat.size):
            orig = flat[idx]
            h = 1e-6 * max(1.0, abs(orig))
            flat[idx] = orig + h
            fp = scalar()
            flat[idx] = orig - h
            fm = scalar()
            flat[idx] = orig
            g = (fp - fm) / (2 * h)
            if not np.isfinite(g):
                where = tuple(int(i) for i in np.unravel_index(idx, t.shape))
                raise NonFiniteError(f"grad_check: non-finite numeric gradient for {name} at index {where}")
            numeric.reshape(-1)[idx] = g
        errors[name] = float(relative_error(analytic, numeric).max()) if analytic.size else 0.0
    return GradCheckReport(errors, rel_tolerance)
