"""Dense tensors with reverse-mode automatic differentiation.

Arrays are stored in the image layout ``(..., W, H, C)``: an optional
leading batch axis followed by width, height and channels.  Every operation
returns a new :class:`Tensor`; nothing is mutated in place.  When any input
requires a gradient the result records its parents and a vector-Jacobian
product, and :func:`backward` walks the recorded graph in reverse
topological order.
"""
from __future__ import annotations

import contextlib
import itertools
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import DimensionError, ValidationError

logger = logging.getLogger(__name__)

AXES = {"W": -3, "H": -2, "C": -1}

_ids = itertools.count()
_debug = os.environ.get("CUBEMIX_DEBUG", "") not in ("", "0")


def set_debug(flag: bool) -> None:
    """Toggle finiteness checks after every forward op."""
    global _debug
    _debug = bool(flag)


class Tensor:
    """Immutable dense array that can take part in the autodiff graph."""

    __slots__ = ("data", "requires_grad", "grad", "id", "op", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if arr.dtype.kind not in "f":
            arr = arr.astype(np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"all dimension sizes must be >= 1, got {arr.shape}")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.id = next(_ids)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable | None = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], vjp: Callable, op: str) -> "Tensor":
        out = cls.__new__(cls)
        data = np.asarray(data)
        if _debug and not np.all(np.isfinite(data)):
            if all(np.all(np.isfinite(p.data)) for p in parents):
                raise FloatingPointError(f"{op} produced non-finite values from finite inputs")
        data.flags.writeable = False
        out.data = data
        out.grad = None
        out.id = next(_ids)
        out.op = op
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = tuple(parents)
            out._vjp = vjp
            for tape in _active_tapes:
                tape.record(out)
        else:
            out._parents = ()
            out._vjp = None
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a tensor is not supported")
        return scale(self, 1.0 / other)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# ----------------------------------------------------------------- tape ---

_active_tapes: list["GradTape"] = []


class GradTape:
    """Ordered record of differentiable operations.

    Used as a context manager it records every non-leaf node created while
    active.  :meth:`from_graph` builds the same ordering after the fact by a
    depth-first walk from a root node.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "GradTape":
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, node: Tensor) -> None:
        self.nodes.append(node)

    @classmethod
    def from_graph(cls, root: Tensor) -> "GradTape":
        tape = cls()
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                tape.nodes.append(node)
                continue
            if node.id in seen:
                continue
            seen.add(node.id)
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and p.id not in seen:
                    stack.append((p, False))
        return tape

    def is_topological(self) -> bool:
        position = {n.id: i for i, n in enumerate(self.nodes)}
        for i, n in enumerate(self.nodes):
            for p in n._parents:
                if p.id in position and position[p.id] >= i:
                    return False
        return True

    def __len__(self) -> int:
        return len(self.nodes)


def backward(root: Tensor, tape: GradTape | None = None) -> dict[int, np.ndarray]:
    """Reverse-mode accumulation from a scalar ``root``.

    Returns a map from node id to gradient array for every node reached.
    Leaves that require gradients also get their ``grad`` attribute set.
    """
    if root.size != 1:
        raise DimensionError(f"backward needs a scalar root, got shape {root.shape}")
    if tape is None:
        tape = GradTape.from_graph(root)
    grads: dict[int, np.ndarray] = {root.id: np.ones_like(root.data)}
    for node in reversed(tape.nodes):
        g = grads.get(node.id)
        if g is None or node._vjp is None:
            continue
        parent_grads = node._vjp(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if p.id in grads:
                grads[p.id] = grads[p.id] + pg
            else:
                grads[p.id] = pg
    _assign_leaf_grads(root, grads)
    return grads


def _assign_leaf_grads(root: Tensor, grads: dict[int, np.ndarray]) -> None:
    stack, seen = [root], set()
    while stack:
        n = stack.pop()
        if n.id in seen:
            continue
        seen.add(n.id)
        if n.op == "leaf" and n.requires_grad:
            n.grad = grads.get(n.id, np.zeros_like(n.data))
        stack.extend(n._parents)


# ---------------------------------------------------------------- flops ---

_flop_counters: list["FlopCounter"] = []
_stage_stack: list[str] = []


@dataclass
class FlopCounter:
    """Forward-pass floating point operation tally, keyed by stage and op."""

    by_stage: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    by_op: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    @property
    def total(self) -> int:
        return sum(self.by_stage.values())


@contextlib.contextmanager
def count_flops():
    counter = FlopCounter()
    _flop_counters.append(counter)
    try:
        yield counter
    finally:
        _flop_counters.remove(counter)


@contextlib.contextmanager
def flop_stage(name: str):
    _stage_stack.append(name)
    try:
        yield
    finally:
        _stage_stack.pop()


def add_flops(op: str, n: int) -> None:
    if not _flop_counters:
        return
    stage = _stage_stack[-1] if _stage_stack else "other"
    for c in _flop_counters:
        c.by_stage[stage] += int(n)
        c.by_op[op] += int(n)


# ---------------------------------------------------- elementwise ops ---

def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = b
        add_flops("add", a.size)
        return Tensor._make(a.data + np.asarray(c, dtype=a.dtype), (a,), lambda g: (g,), "add_scalar")
    _check_same_shape(a, b, "add")
    add_flops("add", a.size)
    return Tensor._make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return add(a, -b)
    _check_same_shape(a, b, "sub")
    add_flops("sub", a.size)
    return Tensor._make(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def neg(a: Tensor) -> Tensor:
    return Tensor._make(-a.data, (a,), lambda g: (-g,), "neg")


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same_shape(a, b, "mul")
    add_flops("mul", a.size)
    ad, bd = a.data, b.data
    return Tensor._make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    add_flops("scale", a.size)
    return Tensor._make(a.data * c, (a,), lambda g: (g * c,), "scale")


def square(a: Tensor) -> Tensor:
    ad = a.data
    add_flops("square", a.size)
    return Tensor._make(ad * ad, (a,), lambda g: (2 * g * ad,), "square")


def abs_(a: Tensor) -> Tensor:
    ad = a.data
    add_flops("abs", a.size)
    return Tensor._make(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def relu(x: Tensor) -> Tensor:
    """Elementwise ``max(0, x)``; the subgradient at 0 is 0."""
    mask = x.data > 0
    add_flops("relu", x.size)
    return Tensor._make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """Parametric ReLU with one learnable slope per channel (last axis)."""
    slope = as_tensor(slope, dtype=x.dtype)
    if slope.ndim != 1 or slope.shape[0] != x.shape[-1]:
        raise DimensionError(f"prelu: slope length {slope.shape} != channels {x.shape[-1]}")
    xd, sd = x.data, slope.data
    neg_mask = xd < 0
    out = np.where(neg_mask, sd * xd, xd)
    add_flops("prelu", 2 * x.size)

    def vjp(g):
        gx = np.where(neg_mask, g * sd, g)
        gs = (g * xd * neg_mask).reshape(-1, xd.shape[-1]).sum(axis=0)
        return gx, gs

    return Tensor._make(out, (x, slope), vjp, "prelu")


def sum_(x: Tensor) -> Tensor:
    shape = x.shape
    add_flops("sum", x.size)
    return Tensor._make(np.asarray(x.data.sum()), (x,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean(x: Tensor) -> Tensor:
    return scale(sum_(x), 1.0 / x.size)


def dot(a: Tensor, b) -> Tensor:
    """Sum of the elementwise product; ``b`` may be a constant array."""
    return sum_(mul(a, as_tensor(b, dtype=a.dtype)))


# ------------------------------------------------------ structural ops ---

def concat_channels(xs: Sequence[Tensor]) -> Tensor:
    """Concatenate along the channel axis, preserving input order."""
    xs = list(xs)
    if not xs:
        raise DimensionError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    lead = xs[0].shape[:-1]
    for t in xs[1:]:
        if t.shape[:-1] != lead:
            raise DimensionError(f"concat_channels: spatial mismatch {t.shape[:-1]} vs {lead}")
    sizes = [t.shape[-1] for t in xs]
    splits = np.cumsum(sizes)[:-1]
    out = np.concatenate([t.data for t in xs], axis=-1)

    def vjp(g):
        return tuple(np.split(g, splits, axis=-1))

    return Tensor._make(out, xs, vjp, "concat")


def take_channels(x: Tensor, start: int, stop: int) -> Tensor:
    """Channels ``start:stop`` of ``x``."""
    C = x.shape[-1]
    if not (0 <= start < stop <= C):
        raise DimensionError(f"take_channels: bad range {start}:{stop} for {C} channels")
    shape, dtype = x.shape, x.dtype

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        full[..., start:stop] = g
        return (full,)

    return Tensor._make(x.data[..., start:stop], (x,), vjp, "take_channels")


def _axis_index(x: Tensor | np.ndarray, axis) -> int:
    if isinstance(axis, str):
        if axis not in AXES:
            raise ValidationError(f"unknown axis {axis!r}; expected one of W, H, C")
        axis = AXES[axis]
    nd = x.ndim
    if nd < 3:
        raise DimensionError(f"expected a (..., W, H, C) tensor, got shape {x.shape}")
    return axis % nd


def axis_linear(x: Tensor, axis, weight, bias=None) -> Tensor:
    """Shared fully-connected map along one axis.

    For every fixed index on the other axes, the fiber ``v`` along ``axis``
    is replaced by ``weight.T @ v + bias``.  ``weight`` has shape
    ``(d_in, d_out)``.
    """
    ax = _axis_index(x, axis)
    weight = as_tensor(weight, dtype=x.dtype)
    if weight.ndim != 2 or weight.shape[0] != x.shape[ax]:
        raise DimensionError(
            f"axis_linear: weight {weight.shape} incompatible with size {x.shape[ax]} on axis {axis}"
        )
    if not np.all(np.isfinite(weight.data)):
        raise ValidationError("axis_linear: non-finite weights")
    d_in, d_out = weight.shape
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        if bias.shape != (d_out,):
            raise DimensionError(f"axis_linear: bias {bias.shape} != ({d_out},)")
        parents.append(bias)

    xm = np.moveaxis(x.data, ax, -1)
    ym = xm @ weight.data
    if bias is not None:
        ym = ym + bias.data
    out = np.moveaxis(ym, -1, ax)
    add_flops("axis_linear", 2 * xm.size * d_out)
    wd = weight.data

    def vjp(g):
        gm = np.moveaxis(g, ax, -1)
        gx = np.moveaxis(gm @ wd.T, -1, ax)
        g2 = gm.reshape(-1, d_out)
        gw = xm.reshape(-1, d_in).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Tensor._make(out, parents, vjp, "axis_linear")


def conv2d(x: Tensor, kernels, bias=None) -> Tensor:
    """2-D cross-correlation with zero padding that preserves W and H.

    ``kernels`` has shape ``(K, K, C_in, C_out)`` with ``K`` in ``{1, 3}``.
    """
    kernels = as_tensor(kernels, dtype=x.dtype)
    if kernels.ndim != 4 or kernels.shape[0] != kernels.shape[1]:
        raise DimensionError(f"conv2d: kernels must be (K, K, Cin, Cout), got {kernels.shape}")
    K, _, cin, cout = kernels.shape
    if K not in (1, 3):
        raise ValidationError(f"conv2d: unsupported kernel size {K}")
    if x.ndim < 3 or x.shape[-1] != cin:
        raise DimensionError(f"conv2d: input channels {x.shape[-1:]} != kernel Cin {cin}")
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias, dtype=x.dtype)
        if bias.shape != (cout,):
            raise DimensionError(f"conv2d: bias {bias.shape} != ({cout},)")
        parents.append(bias)

    p = (K - 1) // 2
    W, H = x.shape[-3], x.shape[-2]
    lead = [(0, 0)] * (x.ndim - 3)
    xp = np.pad(x.data, lead + [(p, p), (p, p), (0, 0)]) if p else x.data
    kd = kernels.data
    out = np.zeros(x.shape[:-1] + (cout,), dtype=x.dtype)
    for i in range(K):
        for j in range(K):
            out += xp[..., i:i + W, j:j + H, :] @ kd[i, j]
    if bias is not None:
        out += bias.data
    add_flops("conv2d", 2 * (x.size // cin) * K * K * cin * cout)

    def vjp(g):
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(kd)
        g2 = g.reshape(-1, cout)
        for i in range(K):
            for j in range(K):
                gxp[..., i:i + W, j:j + H, :] += g @ kd[i, j].T
                gk[i, j] = xp[..., i:i + W, j:j + H, :].reshape(-1, cin).T @ g2
        gx = gxp[..., p:p + W, p:p + H, :] if p else gxp
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    return Tensor._make(out, parents, vjp, "conv2d")


def avg_pool2(x: Tensor) -> Tensor:
    """2x2 average pooling over W and H; odd trailing rows/columns are dropped."""
    W, H = x.shape[-3] // 2, x.shape[-2] // 2
    if W < 1 or H < 1:
        raise DimensionError(f"avg_pool2: input too small {x.shape}")
    shape, dtype = x.shape, x.dtype
    xc = x.data[..., : 2 * W, : 2 * H, :]
    r = xc.reshape(xc.shape[:-3] + (W, 2, H, 2, xc.shape[-1]))
    out = r.mean(axis=(-4, -2)).astype(dtype)
    add_flops("avg_pool2", xc.size)

    def vjp(g):
        full = np.zeros(shape, dtype=dtype)
        up = np.repeat(np.repeat(g, 2, axis=-3), 2, axis=-2) * dtype.type(0.25)
        full[..., : 2 * W, : 2 * H, :] = up
        return (full,)

    return Tensor._make(out, (x,), vjp, "avg_pool2")


# -------------------------------------------------------------- resample ---

def _cubic_weights(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution weights for taps at offsets -1, 0, 1, 2."""
    def k(s):
        s = np.abs(s)
        return np.where(
            s <= 1,
            (a + 2) * s**3 - (a + 3) * s**2 + 1,
            np.where(s < 2, a * s**3 - 5 * a * s**2 + 8 * a * s - 4 * a, 0.0),
        )

    return np.stack([k(t + 1), k(t), k(1 - t), k(2 - t)], axis=-1)


@lru_cache(maxsize=256)
def interp_matrix(n_in: int, n_out: int, method: str = "bicubic") -> np.ndarray:
    """Dense ``(n_out, n_in)`` 1-D interpolation matrix, half-pixel aligned, edge clamped."""
    if n_in < 1 or n_out < 1:
        raise ValidationError(f"resample sizes must be >= 1, got {n_in} -> {n_out}")
    M = np.zeros((n_out, n_in))
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    base = np.floor(src).astype(int)
    t = src - base
    if method == "bicubic":
        offsets = np.arange(-1, 3)
        w = _cubic_weights(t)
    elif method == "bilinear":
        offsets = np.arange(0, 2)
        w = np.stack([1 - t, t], axis=-1)
    else:
        raise ValidationError(f"unknown resample method {method!r}")
    for o, col in zip(offsets, w.T):
        idx = np.clip(base + o, 0, n_in - 1)
        np.add.at(M, (np.arange(n_out), idx), col)
    M.flags.writeable = False
    return M


def _apply_matrix(x: Tensor, M: np.ndarray, ax: int, op: str) -> Tensor:
    M = M.astype(x.dtype, copy=False)
    xm = np.moveaxis(x.data, ax, -1)
    out = np.moveaxis(xm @ M.T, -1, ax)
    add_flops(op, 2 * xm.size * M.shape[0])

    def vjp(g):
        return (np.moveaxis(np.moveaxis(g, ax, -1) @ M, -1, ax),)

    return Tensor._make(out, (x,), vjp, op)


def resample(x: Tensor, target_w: int, target_h: int, method: str = "bicubic") -> Tensor:
    """Separable per-channel resampling of the W and H axes.

    Bicubic uses Catmull-Rom weights (``a = -0.5``); samples outside the
    image are clamped to the nearest edge pixel.
    """
    if int(target_w) < 1 or int(target_h) < 1:
        raise ValidationError(f"resample targets must be >= 1, got {target_w}x{target_h}")
    W, H = x.shape[-3], x.shape[-2]
    out = x
    if target_w != W:
        out = _apply_matrix(out, interp_matrix(W, int(target_w), method), out.ndim - 3, "resample")
    if target_h != H:
        out = _apply_matrix(out, interp_matrix(H, int(target_h), method), out.ndim - 2, "resample")
    return out


# ----------------------------------------------------------- grad check ---

@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    tol: float
    per_input: list[float]

    def __str__(self) -> str:
        state = "PASS" if self.passed else "FAIL"
        return f"grad_check {state}: max rel err {self.max_rel_error:.3e} (tol {self.tol:g})"


def grad_check(
    f: Callable[..., Tensor],
    *inputs,
    eps: float = 1e-6,
    tol: float = 1e-4,
    floor: float = 1e-3,
    sample: int | None = None,
    seed: int = 0,
) -> GradCheckReport:
    """Compare reverse-mode gradients of scalar ``f`` with central differences.

    Each element's error is ``|a - n| / max(|a|, |n|, floor * s)`` where
    ``s`` is the largest gradient magnitude over all inputs, so entries far
    below the gradient's overall scale (including exact zeros) are judged
    against that scale.  ``sample`` limits the number of perturbed entries
    per input.
    """
    arrays = [np.array(as_tensor(t).data, dtype=np.float64) for t in inputs]
    leaves = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*leaves)
    backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    rng = np.random.default_rng(seed)
    pairs = []
    for k, base in enumerate(arrays):
        flat_idx = np.arange(base.size)
        if sample is not None and sample < base.size:
            flat_idx = np.sort(rng.choice(base.size, size=sample, replace=False))
        numeric = np.zeros(flat_idx.size)
        for n, i in enumerate(flat_idx):
            plus, minus = base.copy(), base.copy()
            plus.flat[i] += eps
            minus.flat[i] -= eps
            fp = _eval_scalar(f, arrays, k, plus)
            fm = _eval_scalar(f, arrays, k, minus)
            numeric[n] = (fp - fm) / (2 * eps)
        pairs.append((np.asarray(analytic[k]).reshape(-1)[flat_idx], numeric))
    s = max([1e-300] + [max(np.max(np.abs(a)), np.max(np.abs(n))) for a, n in pairs])
    per_input = []
    for a, numeric in pairs:
        denom = np.maximum(np.maximum(np.abs(a), np.abs(numeric)), floor * s)
        per_input.append(float(np.max(np.abs(a - numeric) / denom)))
    worst = max(per_input) if per_input else 0.0
    return GradCheckReport(worst, worst < tol, tol, per_input)


def _eval_scalar(f, arrays, k, replacement) -> float:
    args = [Tensor(replacement if j == k else a) for j, a in enumerate(arrays)]
    return float(f(*args).data)


def parameters_finite(tensors: Iterable[Tensor]) -> bool:
    return all(np.all(np.isfinite(t.data)) for t in tensors)
