"""Dense float64 tensor engine with reverse-mode autodiff.

Every forward op optionally records a node (inputs + a vector-Jacobian
closure) on an implicit per-result tape. `backward` walks the tape once in
reverse topological order and accumulates gradients into the requires_grad
leaves. `grad_check` verifies any scalar-valued tensor function against
central finite differences.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "Tensor",
    "tensor",
    "no_grad",
    "backward",
    "grad_check",
    "GradCheckReport",
    "op_apply",
    "OP_KINDS",
    "ShapeMismatch",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "reshape",
    "transpose2d",
    "permute_axes",
    "concat_channels",
    "slice_channels",
    "softmax_axis",
    "leaky_relu",
    "sigmoid",
    "mean_axis",
    "conv2d",
    "bilinear_sample",
    "bilinear_resize",
    "smooth_l1",
    "bce_with_logits",
]


class ShapeMismatch(ValueError):
    """Operand shapes incompatible for the requested op."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables tape recording (inference mode)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


class Tensor:
    """Row-major float64 array, optionally participating in the autodiff tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_kind")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0:
            raise ShapeMismatch(f"zero-size shape {arr.shape} rejected")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._vjp = None
        self._kind: str | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def reshape(self, shape) -> "Tensor":
        return reshape(self, shape)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = ", grad" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}{flag})"


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _record(out_data, parents, vjp, kind: str) -> Tensor:
    out = Tensor(out_data)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._vjp = vjp
        out._kind = kind
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise / linear ops


def _binary(a, b, fwd, vjp_a, vjp_b, kind):
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeMismatch(f"{kind}: cannot broadcast {a.shape} with {b.shape}") from None
    out = fwd(a.data, b.data)

    def vjp(g):
        return (
            _unbroadcast(vjp_a(g, a.data, b.data), a.shape),
            _unbroadcast(vjp_b(g, a.data, b.data), b.shape),
        )

    return _record(out, (a, b), vjp, kind)


def add(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x + y, lambda g, x, y: g, lambda g, x, y: g, "add")


def sub(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x - y, lambda g, x, y: g, lambda g, x, y: -g, "sub")


def mul(a, b) -> Tensor:
    return _binary(a, b, lambda x, y: x * y, lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def scale(a, factor: float) -> Tensor:
    a = _as_tensor(a)
    c = float(factor)
    return _record(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul expects 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"matmul inner dims differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        return g @ bd.T, ad.T @ g

    return _record(ad @ bd, (a, b), vjp, "matmul")


def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    shape = tuple(int(s) for s in (shape if hasattr(shape, "__iter__") else (shape,)))
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeMismatch(f"cannot reshape {a.shape} to {shape}") from None
    src = a.shape
    return _record(out, (a,), lambda g: (g.reshape(src),), "reshape")


def transpose2d(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise ShapeMismatch(f"transpose2d expects a matrix, got {a.shape}")
    return _record(a.data.T.copy(), (a,), lambda g: (g.T,), "transpose2d")


def permute_axes(a, axes) -> Tensor:
    a = _as_tensor(a)
    axes = tuple(int(x) for x in axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeMismatch(f"permutation {axes} invalid for rank {a.ndim}")
    inv = tuple(np.argsort(axes))
    return _record(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (g.transpose(inv),),
        "permute_axes",
    )


def concat_channels(parts) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeMismatch("concat_channels of an empty list rejected")
    tail = parts[0].shape[1:]
    for p in parts[1:]:
        if p.shape[1:] != tail:
            raise ShapeMismatch(
                f"concat_channels trailing dims differ: {parts[0].shape} vs {p.shape}"
            )
    sizes = [p.shape[0] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[offsets[i] : offsets[i + 1]] for i in range(len(parts)))

    return _record(np.concatenate([p.data for p in parts], axis=0), tuple(parts), vjp, "concat_channels")


def slice_channels(a, start: int, stop: int) -> Tensor:
    a = _as_tensor(a)
    n = a.shape[0]
    if not (0 <= start < stop <= n):
        raise ShapeMismatch(f"slice [{start}:{stop}] invalid for leading dim {n}")
    src = a.shape

    def vjp(g):
        full = np.zeros(src)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop].copy(), (a,), vjp, "slice_channels")


# ---------------------------------------------------------------------------
# nonlinearities and reductions


def softmax_axis(a, axis: int) -> Tensor:
    a = _as_tensor(a)
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"softmax axis {axis} out of range for shape {a.shape}")
    if a.shape[axis] == 0:
        raise ShapeMismatch("softmax over an axis of size 0 rejected")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return _record(y, (a,), vjp, "softmax_axis")


def leaky_relu(a, slope: float = 0.01) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    out = np.where(x > 0, x, slope * x)

    def vjp(g):
        return (g * np.where(x > 0, 1.0, slope),)

    return _record(out, (a,), vjp, "leaky_relu")


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    x = a.data
    y = np.empty_like(x)
    pos = x >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    y[~pos] = ex / (1.0 + ex)

    def vjp(g):
        return (g * y * (1.0 - y),)

    return _record(y, (a,), vjp, "sigmoid")


def mean_axis(a, axis: int | None = None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    src = a.shape
    if axis is None:
        n = a.size

        def vjp(g):
            return (np.full(src, float(g) / n),)

        return _record(a.data.mean(), (a,), vjp, "mean_axis")
    if not -a.ndim <= axis < a.ndim:
        raise ShapeMismatch(f"mean axis {axis} out of range for shape {a.shape}")
    ax = axis % a.ndim
    n = src[ax]

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, ax)
        return (np.broadcast_to(g / n, src).copy(),)

    return _record(a.data.mean(axis=ax, keepdims=keepdims), (a,), vjp, "mean_axis")


# ---------------------------------------------------------------------------
# convolution and sampling


def conv2d(x, w, b=None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over (C,H,W) or batched (N,C,H,W) input.

    Weight is (O,C,kh,kw); bias, when given, is (O,).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    bt = _as_tensor(b) if b is not None else None
    squeeze = x.ndim == 3
    xd = x.data[None] if squeeze else x.data
    if xd.ndim != 4 or w.ndim != 4:
        raise ShapeMismatch(f"conv2d expects (N,C,H,W) and (O,C,kh,kw), got {x.shape}, {w.shape}")
    n, c, h, wid = xd.shape
    o, cw, kh, kw = w.shape
    if cw != c:
        raise ShapeMismatch(f"conv2d channel mismatch: input C={c}, weight C={cw}")
    if bt is not None and bt.shape != (o,):
        raise ShapeMismatch(f"conv2d bias shape {bt.shape} != ({o},)")
    s, p = int(stride), int(padding)
    if h + 2 * p < kh or wid + 2 * p < kw:
        raise ShapeMismatch(f"conv2d kernel {kh}x{kw} larger than padded input {h + 2 * p}x{wid + 2 * p}")
    xp = np.pad(xd, ((0, 0), (0, 0), (p, p), (p, p))) if p else xd
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::s, ::s]
    # win: (N, C, Ho, Wo, kh, kw)
    out = np.tensordot(win, w.data, axes=([1, 4, 5], [1, 2, 3]))  # (N, Ho, Wo, O)
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2))
    if bt is not None:
        out = out + bt.data[None, :, None, None]
    ho, wo = out.shape[2], out.shape[3]
    need_dx, need_dw = x.requires_grad, w.requires_grad

    def vjp(g):
        if squeeze:
            g = g[None]
        dw = dx = None
        if need_dw:
            dw = np.tensordot(g, win, axes=([0, 2, 3], [0, 2, 3]))  # (O, C, kh, kw)
        if need_dx:
            dxp = np.zeros_like(xp)
            for u in range(kh):
                for v in range(kw):
                    # contribution of kernel tap (u, v) scattered back over strides
                    t = np.tensordot(g, w.data[:, :, u, v], axes=([1], [0]))  # (N, Ho, Wo, C)
                    dxp[:, :, u : u + s * ho : s, v : v + s * wo : s] += t.transpose(0, 3, 1, 2)
            dx = dxp[:, :, p : p + h, p : p + wid] if p else dxp
            if squeeze:
                dx = dx[0]
        grads = [dx, dw]
        if bt is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    parents = (x, w) if bt is None else (x, w, bt)
    return _record(out[0] if squeeze else out, parents, vjp, "conv2d")


def bilinear_sample(x, ys, xs) -> Tensor:
    """Sample a (C,H,W) map at fractional index coordinates, edge-clamped.

    Returns (C, P) for P sample points; differentiable w.r.t. the map only.
    """
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"bilinear_sample expects (C,H,W), got {x.shape}")
    ys = np.asarray(ys, dtype=np.float64).ravel()
    xs = np.asarray(xs, dtype=np.float64).ravel()
    if ys.shape != xs.shape:
        raise ShapeMismatch(f"coordinate lists differ: {ys.shape} vs {xs.shape}")
    c, h, w = x.shape
    yc = np.clip(ys, 0.0, h - 1.0)
    xc = np.clip(xs, 0.0, w - 1.0)
    y0 = np.floor(yc).astype(np.intp)
    x0 = np.floor(xc).astype(np.intp)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = yc - y0
    wx = xc - x0
    w00 = (1 - wy) * (1 - wx)
    w01 = (1 - wy) * wx
    w10 = wy * (1 - wx)
    w11 = wy * wx
    d = x.data
    out = d[:, y0, x0] * w00 + d[:, y0, x1] * w01 + d[:, y1, x0] * w10 + d[:, y1, x1] * w11

    def vjp(g):
        dx = np.zeros((c, h, w))
        ci = np.arange(c)[:, None]
        np.add.at(dx, (ci, y0[None], x0[None]), g * w00)
        np.add.at(dx, (ci, y0[None], x1[None]), g * w01)
        np.add.at(dx, (ci, y1[None], x0[None]), g * w10)
        np.add.at(dx, (ci, y1[None], x1[None]), g * w11)
        return (dx,)

    return _record(out, (x,), vjp, "bilinear_sample")


def bilinear_resize(x, out_h: int, out_w: int) -> Tensor:
    """Resize a (C,H,W) map by bilinear sampling at output cell centers."""
    x = _as_tensor(x)
    if x.ndim != 3:
        raise ShapeMismatch(f"bilinear_resize expects (C,H,W), got {x.shape}")
    if out_h < 1 or out_w < 1:
        raise ShapeMismatch(f"resize target {out_h}x{out_w} rejected")
    _, h, w = x.shape
    ys = (np.arange(out_h) + 0.5) * (h / out_h) - 0.5
    xs = (np.arange(out_w) + 0.5) * (w / out_w) - 0.5
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    return reshape(bilinear_sample(x, gy.ravel(), gx.ravel()), (x.shape[0], out_h, out_w))


# ---------------------------------------------------------------------------
# loss kernels


def smooth_l1(pred, target) -> Tensor:
    """Elementwise Huber-style loss against a constant target array."""
    pred = _as_tensor(pred)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != pred.shape:
        raise ShapeMismatch(f"smooth_l1 target {target.shape} != pred {pred.shape}")
    d = pred.data - target
    ad = np.abs(d)
    out = np.where(ad < 1.0, 0.5 * d * d, ad - 0.5)

    def vjp(g):
        return (g * np.where(ad < 1.0, d, np.sign(d)),)

    return _record(out, (pred,), vjp, "smooth_l1")


def bce_with_logits(logits, targets) -> Tensor:
    """Elementwise binary cross-entropy on logits with constant 0/1 targets."""
    logits = _as_tensor(logits)
    y = np.asarray(targets, dtype=np.float64)
    if y.shape != logits.shape:
        raise ShapeMismatch(f"bce targets {y.shape} != logits {logits.shape}")
    z = logits.data
    out = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))

    def vjp(g):
        s = np.empty_like(z)
        pos = z >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
        ez = np.exp(z[~pos])
        s[~pos] = ez / (1.0 + ez)
        return (g * (s - y),)

    return _record(out, (logits,), vjp, "bce_with_logits")


# ---------------------------------------------------------------------------
# op registry and backward


_REGISTRY = {
    "matmul": lambda ins, at: matmul(ins[0], ins[1]),
    "add": lambda ins, at: add(ins[0], ins[1]),
    "sub": lambda ins, at: sub(ins[0], ins[1]),
    "mul": lambda ins, at: mul(ins[0], ins[1]),
    "scale": lambda ins, at: scale(ins[0], at["factor"]),
    "reshape": lambda ins, at: reshape(ins[0], at["shape"]),
    "transpose2d": lambda ins, at: transpose2d(ins[0]),
    "permute_axes": lambda ins, at: permute_axes(ins[0], at["axes"]),
    "concat_channels": lambda ins, at: concat_channels(ins),
    "slice_channels": lambda ins, at: slice_channels(ins[0], at["start"], at["stop"]),
    "softmax_axis": lambda ins, at: softmax_axis(ins[0], at["axis"]),
    "leaky_relu": lambda ins, at: leaky_relu(ins[0], at.get("slope", 0.01)),
    "sigmoid": lambda ins, at: sigmoid(ins[0]),
    "mean_axis": lambda ins, at: mean_axis(ins[0], at.get("axis"), at.get("keepdims", False)),
    "conv2d": lambda ins, at: conv2d(
        ins[0], ins[1], ins[2] if len(ins) > 2 else None, at.get("stride", 1), at.get("padding", 0)
    ),
    "bilinear_sample": lambda ins, at: bilinear_sample(ins[0], at["ys"], at["xs"]),
    "bilinear_resize": lambda ins, at: bilinear_resize(ins[0], at["out_h"], at["out_w"]),
    "smooth_l1": lambda ins, at: smooth_l1(ins[0], at["target"]),
    "bce_with_logits": lambda ins, at: bce_with_logits(ins[0], at["targets"]),
}

OP_KINDS = tuple(sorted(_REGISTRY))


def op_apply(kind: str, inputs, attrs: dict | None = None) -> Tensor:
    """Apply a registered op by name. Unknown kinds are rejected."""
    if kind not in _REGISTRY:
        raise ShapeMismatch(f"unknown op kind {kind!r}; known: {OP_KINDS}")
    return _REGISTRY[kind]([_as_tensor(t) for t in inputs], attrs or {})


def _toposort(root: Tensor) -> list[Tensor]:
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Accumulate d(loss)/d(leaf) for every requires_grad leaf reachable from loss.

    The tape is single-use: a second backward through the same graph raises.
    Returns a map from leaf tensor to its gradient array and also stores the
    gradient on each leaf's ``grad`` attribute (accumulating).
    """
    if loss.data.ndim != 0:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._kind == "__consumed__":
        raise RuntimeError("tape already consumed; rebuild the forward pass")
    order = _toposort(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.asarray(1.0)}
    leaves: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            if node.requires_grad:
                leaves[node] = leaves.get(node, 0) + g
            continue
        parent_grads = node._vjp(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None:
                continue
            prev = grads.get(id(parent))
            grads[id(parent)] = pg if prev is None else prev + pg
    for leaf, g in leaves.items():
        g = np.asarray(g, dtype=np.float64).reshape(leaf.shape)
        leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
        leaves[leaf] = g
    for node in order:
        if node._vjp is not None:
            node._vjp = None
            node._parents = ()
            node._kind = "__consumed__"
    return leaves


# ---------------------------------------------------------------------------
# finite-difference verification


@dataclass
class GradCheckReport:
    """Per-parameter worst-case agreement between backward and central differences."""

    max_abs_err: dict[str, float]
    max_rel_err: dict[str, float]
    passed: bool
    failures: list[str] = field(default_factory=list)


def grad_check(f, params, h: float = 1e-3, rtol: float = 1e-4, atol: float = 1e-7,
               names: list[str] | None = None) -> GradCheckReport:
    """Compare backward() gradients of scalar-valued f against central differences.

    ``params`` is one tensor or a list; f is called positionally on them.
    Callers keep inputs away from non-smooth points by more than 2h.
    """
    plist = [params] if isinstance(params, Tensor) else list(params)
    names = names or [f"p{i}" for i in range(len(plist))]
    for p in plist:
        p.requires_grad = True
        p.grad = None
    out = f(*plist)
    if out.data.ndim != 0:
        raise ShapeMismatch(f"grad_check needs scalar f, got shape {out.shape}")
    analytic = backward(out)
    max_abs: dict[str, float] = {}
    max_rel: dict[str, float] = {}
    failures: list[str] = []
    for name, p in zip(names, plist):
        a = analytic.get(p)
        if a is None:
            a = np.zeros(p.shape)
        worst_abs = 0.0
        worst_rel = 0.0
        flat = p.data.flat
        for i in range(p.data.size):
            orig = flat[i]
            with no_grad():
                flat[i] = orig + h
                fp = float(f(*plist).data)
                flat[i] = orig - h
                fm = float(f(*plist).data)
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                failures.append(f"{name}[{i}]: non-finite f at +/-h")
                continue
            num = (fp - fm) / (2.0 * h)
            ana = a.flat[i]
            err = abs(ana - num)
            worst_abs = max(worst_abs, err)
            denom = max(abs(ana), abs(num))
            if denom > 0:
                worst_rel = max(worst_rel, err / denom)
            if err > atol + rtol * denom:
                failures.append(f"{name}[{i}]: analytic {ana:.6g} vs numeric {num:.6g}")
        max_abs[name] = worst_abs
        max_rel[name] = worst_rel
    return GradCheckReport(max_abs, max_rel, passed=not failures, failures=failures)
