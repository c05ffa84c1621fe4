"""Minimal dense-tensor engine with reverse-mode differentiation.

Everything is float64. Forward ops run as plain numpy; when a
:class:`ComputeGraph` is active and an input requires gradients, the op is
also recorded on the graph's tape so :func:`backpropagate` can replay it in
reverse. The op set is just large enough to express the embedding networks
and the attack losses end to end.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputeGraph",
    "ShapeError",
    "GraphError",
    "NonFiniteError",
    "forward_op",
    "backpropagate",
    "finite_diff_check",
    "add",
    "sub",
    "mul",
    "div",
    "scale",
    "relu",
    "tanh",
    "mean",
    "l2norm",
    "dense",
    "conv2d",
    "softmax_xent",
]


class ShapeError(ValueError):
    """Input shapes do not conform to an op's shape rule."""


class GraphError(RuntimeError):
    """Backward called before forward, or on an already-consumed graph."""


class NonFiniteError(ArithmeticError):
    """An operation produced NaN or Inf; optimization state is poisoned."""


class Tensor:
    """A dense float64 array plus gradient bookkeeping.

    ``grad`` is populated by :func:`backpropagate` for leaf tensors with
    ``requires_grad`` set; it is overwritten (not accumulated) on each
    backward pass.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor data contains non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, requires_grad: bool) -> "Tensor":
        # internal fast path; caller has already checked finiteness
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        return t

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() requires a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    """Wrap a value as a constant Tensor; pass Tensors through unchanged."""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple, output: Tensor, backward: Callable):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_GRAPH_STACK: list["ComputeGraph"] = []


class ComputeGraph:
    """Tape of operation records, in execution order.

    Use as a context manager: ops executed inside the ``with`` block are
    recorded when any of their inputs requires gradients. Each graph is
    consumable by exactly one :func:`backpropagate` call.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.consumed = False

    def __enter__(self) -> "ComputeGraph":
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        popped = _GRAPH_STACK.pop()
        assert popped is self, "mismatched ComputeGraph nesting"

    def _record(self, op: str, inputs: tuple, output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(op, inputs, output, backward))


def _finish(op: str, inputs: tuple, out_data: np.ndarray, backward: Callable) -> Tensor:
    if not np.all(np.isfinite(out_data)):
        raise NonFiniteError(f"op '{op}' produced non-finite values")
    requires = any(t.requires_grad for t in inputs)
    out = Tensor._wrap(out_data, requires)
    if requires and _GRAPH_STACK:
        _GRAPH_STACK[-1]._record(op, inputs, out, backward)
    return out


def _same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    """Elementwise sum of two same-shaped tensors (no broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("add", a, b)

    def backward(g):
        return g, g

    return _finish("add", (a, b), a.data + b.data, backward)


def sub(a, b) -> Tensor:
    """Elementwise difference of two same-shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("sub", a, b)

    def backward(g):
        return g, -g

    return _finish("sub", (a, b), a.data - b.data, backward)


def mul(a, b) -> Tensor:
    """Elementwise product of two same-shaped tensors."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("mul", a, b)

    def backward(g):
        return g * b.data, g * a.data

    return _finish("mul", (a, b), a.data * b.data, backward)


def div(a, b) -> Tensor:
    """Elementwise quotient; a zero divisor surfaces as NonFiniteError."""
    a, b = as_tensor(a), as_tensor(b)
    _same_shape("div", a, b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data

    def backward(g):
        return g / b.data, -g * a.data / (b.data * b.data)

    return _finish("div", (a, b), out, backward)


def scale(a, c: float) -> Tensor:
    """Multiply a tensor by a Python scalar constant."""
    a = as_tensor(a)
    c = float(c)
    if not np.isfinite(c):
        raise NonFiniteError("scale: constant is non-finite")

    def backward(g):
        return (g * c,)

    return _finish("scale", (a,), a.data * c, backward)


def relu(a) -> Tensor:
    """max(x, 0); subgradient 0 at the kink."""
    a = as_tensor(a)
    out = np.maximum(a.data, 0.0)

    def backward(g):
        return (g * (a.data > 0.0),)

    return _finish("relu", (a,), out, backward)


def tanh(a) -> Tensor:
    """Hyperbolic tangent, elementwise."""
    a = as_tensor(a)
    out = np.tanh(a.data)

    def backward(g):
        return (g * (1.0 - out * out),)

    return _finish("tanh", (a,), out, backward)


# ---------------------------------------------------------------------------
# reductions
# ---------------------------------------------------------------------------

def mean(a, axis=None) -> Tensor:
    """Arithmetic mean over all elements, or over the given axes."""
    a = as_tensor(a)
    if axis is None:
        axes = tuple(range(a.data.ndim))
    elif isinstance(axis, int):
        axes = (axis,)
    else:
        axes = tuple(axis)
    for ax in axes:
        if ax < 0 or ax >= a.data.ndim:
            raise ShapeError(f"mean: axis {ax} out of range for shape {a.shape}")
    count = 1
    for ax in axes:
        count *= a.data.shape[ax]
    out = np.mean(a.data, axis=axes)

    def backward(g):
        expanded = np.expand_dims(g, axes) if g.ndim else g
        return (np.broadcast_to(expanded / count, a.data.shape).copy(),)

    return _finish("mean", (a,), out, backward)


def l2norm(a) -> Tensor:
    """Euclidean norm of all elements, as a scalar tensor."""
    a = as_tensor(a)
    out = np.sqrt(np.sum(a.data * a.data))

    def backward(g):
        if out == 0.0:
            return (np.zeros_like(a.data),)
        return (g * (a.data / out),)

    return _finish("l2norm", (a,), np.asarray(out), backward)


# ---------------------------------------------------------------------------
# linear layers
# ---------------------------------------------------------------------------

def dense(x, w, b=None) -> Tensor:
    """Affine map: flatten(x) @ w + b.

    x may have any shape; it is flattened in C order. w is (n_in, n_out),
    b is (n_out,) or None.
    """
    x, w = as_tensor(x), as_tensor(w)
    if w.data.ndim != 2:
        raise ShapeError(f"dense: weight must be 2-d, got {w.shape}")
    n_in, n_out = w.data.shape
    if x.data.size != n_in:
        raise ShapeError(f"dense: input size {x.data.size} != weight rows {n_in}")
    flat = x.data.reshape(n_in)
    out = flat @ w.data
    inputs = (x, w)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (n_out,):
            raise ShapeError(f"dense: bias shape {b.shape} != ({n_out},)")
        out = out + b.data
        inputs = (x, w, b)

    def backward(g):
        gx = (w.data @ g).reshape(x.data.shape) if x.requires_grad else None
        gw = np.outer(flat, g) if w.requires_grad else None
        if len(inputs) == 3:
            return gx, gw, g
        return gx, gw

    return _finish("dense", inputs, out, backward)


def conv2d(x, k, b=None, stride: int = 1, pad: int = 0) -> Tensor:
    """2-d cross-correlation of an HWC image with a (kh, kw, Cin, Cout) kernel.

    Output spatial size is floor((H + 2*pad - kh) / stride) + 1 per axis.
    Implemented via im2col; the column matrix is cached for the backward pass.
    """
    x, k = as_tensor(x), as_tensor(k)
    if x.data.ndim != 3:
        raise ShapeError(f"conv2d: input must be (H, W, C), got {x.shape}")
    if k.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be (kh, kw, Cin, Cout), got {k.shape}")
    stride = int(stride)
    pad = int(pad)
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be >= 0, got {pad}")
    h, w_in, cin = x.data.shape
    kh, kw, kcin, cout = k.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel Cin {kcin} != input channels {cin}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w_in + 2 * pad - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d: kernel ({kh}x{kw}) too large for input ({h}x{w_in}) with pad {pad}"
        )
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    # (H*, W*, Cin, kh, kw) -> strided -> (oh, ow, kh, kw, Cin)
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]
    cols = np.ascontiguousarray(win.transpose(0, 1, 3, 4, 2)).reshape(oh * ow, kh * kw * cin)
    kmat = k.data.reshape(kh * kw * cin, cout)
    out = cols @ kmat
    inputs = (x, k)
    if b is not None:
        b = as_tensor(b)
        if b.data.shape != (cout,):
            raise ShapeError(f"conv2d: bias shape {b.shape} != ({cout},)")
        out = out + b.data
        inputs = (x, k, b)
    out = out.reshape(oh, ow, cout)

    def backward(g):
        g2 = g.reshape(oh * ow, cout)
        gk = (cols.T @ g2).reshape(k.data.shape) if k.requires_grad else None
        gx = None
        if x.requires_grad:
            gwin = (g2 @ kmat.T).reshape(oh, ow, kh, kw, cin)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + stride * oh : stride, j : j + stride * ow : stride, :] += gwin[
                        :, :, i, j, :
                    ]
            gx = gxp[pad : pad + h, pad : pad + w_in, :] if pad else gxp
        if len(inputs) == 3:
            return gx, gk, g2.sum(axis=0)
        return gx, gk

    return _finish("conv2d", inputs, out, backward)


def softmax_xent(logits, label: int) -> Tensor:
    """Softmax cross-entropy of a 1-d logit vector against an integer label."""
    logits = as_tensor(logits)
    if logits.data.ndim != 1:
        raise ShapeError(f"softmax_xent: logits must be 1-d, got {logits.shape}")
    n = logits.data.shape[0]
    label = int(label)
    if not 0 <= label < n:
        raise ShapeError(f"softmax_xent: label {label} out of range for {n} classes")
    shifted = logits.data - logits.data.max()
    log_z = np.log(np.sum(np.exp(shifted)))
    out = log_z - shifted[label]
    probs = np.exp(shifted - log_z)

    def backward(g):
        gl = probs.copy()
        gl[label] -= 1.0
        return (g * gl,)

    return _finish("softmax_xent", (logits,), np.asarray(out), backward)


_OP_TABLE = {
    "dense": dense,
    "conv2d": conv2d,
    "relu": relu,
    "tanh": tanh,
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "scale": scale,
    "mean": mean,
    "l2norm": l2norm,
    "softmax_xent": softmax_xent,
}


def forward_op(kind: str, *inputs, **params) -> Tensor:
    """Dispatch an op by kind name. Unknown kinds are rejected."""
    try:
        fn = _OP_TABLE[kind]
    except KeyError:
        raise ValueError(f"unknown op kind '{kind}'; valid kinds: {sorted(_OP_TABLE)}") from None
    return fn(*inputs, **params)


def op_kinds() -> tuple:
    """Names of all supported op kinds."""
    return tuple(sorted(_OP_TABLE))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backpropagate(graph: ComputeGraph, root: Tensor) -> dict:
    """Reverse the tape once, returning d(root)/d(leaf) per requires-grad leaf.

    The result maps each leaf Tensor (one that appears as an op input but was
    not produced on this tape) to its gradient array; ``leaf.grad`` is set to
    the same array. The graph is consumed and cannot be backpropagated again.
    """
    if graph.consumed:
        raise GraphError("graph already consumed by a previous backward pass")
    if not graph.nodes:
        raise GraphError("backward before forward: graph has no recorded operations")
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar-shaped, got shape {root.shape}")
    produced = {id(n.output) for n in graph.nodes}
    if id(root) not in produced:
        raise GraphError("root tensor was not produced on this graph")
    graph.consumed = True

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(graph.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue  # node does not feed the root
        for inp, g_in in zip(node.inputs, node.backward(g_out)):
            if g_in is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g_in
            else:
                grads[key] = g_in

    result: dict[Tensor, np.ndarray] = {}
    for node in graph.nodes:
        for inp in node.inputs:
            if inp.requires_grad and id(inp) not in produced and inp not in result:
                g = grads.get(id(inp))
                if g is None:
                    g = np.zeros_like(inp.data)
                g = np.asarray(g, dtype=np.float64).reshape(inp.data.shape)
                inp.grad = g
                result[inp] = g
    return result


# ---------------------------------------------------------------------------
# gradient test oracle
# ---------------------------------------------------------------------------

def finite_diff_check(fn: Callable[[Tensor], Tensor], point, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` must deterministically map a Tensor to a scalar Tensor. Every
    coordinate of ``point`` is probed with a central difference of step h;
    errors are normalized by the largest gradient magnitude (floored at 1e-12
    so an identically-zero gradient does not divide by zero).
    """
    if h <= 0:
        raise ValueError(f"finite_diff_check: step h must be > 0, got {h}")
    p = np.array(point, dtype=np.float64)
    probe = Tensor(p.copy(), requires_grad=True)
    with ComputeGraph() as graph:
        out = fn(probe)
    analytic = backpropagate(graph, out)[probe]

    numeric = np.zeros_like(p)
    flat = p.ravel()
    num_flat = numeric.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        f_plus = fn(Tensor(p)).item()
        flat[i] = orig - h
        f_minus = fn(Tensor(p)).item()
        flat[i] = orig
        num_flat[i] = (f_plus - f_minus) / (2.0 * h)

    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)
