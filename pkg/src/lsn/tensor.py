"""Dense NCHW tensors, a recorded operation graph and reverse-mode gradients.

Values are plain numpy arrays with exactly four axes (batch, channels,
height, width). A :class:`Graph` records every operation applied to its
nodes in creation order, which is also a valid topological order, so the
graph can be re-evaluated after a parameter changes (``Graph.run``) and
differentiated with :func:`backward`.
"""
from __future__ import annotations

import functools
import logging
from dataclasses import dataclass, field
from typing import Any, Iterable, Sequence

import numpy as np

logger = logging.getLogger(__name__)

PRECISIONS = {"standard": np.float32, "verification": np.float64}
UPSAMPLE_FACTORS = (2, 4, 8, 16)


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's precondition."""


def as_tensor(data: Any, precision: str = "standard") -> np.ndarray:
    arr = np.asarray(data, dtype=PRECISIONS[precision])
    if arr.ndim != 4:
        raise ShapeError(f"tensors are 4-D (batch, channels, height, width), got shape {arr.shape}")
    return arr


class Op:
    """A differentiable primitive.

    ``forward`` receives the input values and returns ``(output, ctx)``;
    ``backward`` receives the output gradient plus whatever ``forward``
    stashed in ``ctx`` and returns one gradient (or ``None``) per input.
    """

    name = "op"

    def forward(self, inputs: Sequence[np.ndarray], **attrs) -> tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, inputs: Sequence[np.ndarray], out: np.ndarray,
                 ctx: Any, **attrs) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError


@dataclass(eq=False)
class Node:
    graph: "Graph"
    id: int
    op: Op | str
    inputs: tuple[int, ...]
    attrs: dict = field(default_factory=dict)
    param: str | None = None
    value: np.ndarray | None = None
    ctx: Any = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        kind = self.op if isinstance(self.op, str) else self.op.name
        return f"Node({self.id}, {kind}, shape={self.shape})"


class Graph:
    """Operation record over a named parameter table.

    Parameters are looked up by name every time a ``param`` node is
    evaluated, so mutating ``graph.params[name]`` in place and calling
    :meth:`run` re-evaluates the network with the new value.
    """

    def __init__(self, params: dict[str, np.ndarray] | None = None, precision: str = "standard"):
        if precision not in PRECISIONS:
            raise ValueError(f"unknown precision mode {precision!r}")
        self.precision = precision
        self.dtype = PRECISIONS[precision]
        self.params: dict[str, np.ndarray] = {}
        for name, value in (params or {}).items():
            value = np.asarray(value)
            # same-dtype parameters are shared, so optimizer updates are visible
            self.params[name] = value if value.dtype == self.dtype else value.astype(self.dtype)
        self.nodes: list[Node] = []
        self._descendants: dict[str, list[int]] = {}

    # -- construction -------------------------------------------------
    def _add(self, op, inputs, attrs=None, param=None) -> Node:
        node = Node(self, len(self.nodes), op, tuple(inputs), dict(attrs or {}), param)
        self.nodes.append(node)
        self._descendants.clear()
        self._eval(node)
        return node

    def param(self, name: str) -> Node:
        if name not in self.params:
            raise KeyError(f"parameter {name!r} is not in the parameter table")
        return self._add("param", (), param=name)

    def constant(self, value: Any) -> Node:
        return self._add("const", (), {"value": np.asarray(value, dtype=self.dtype)})

    def input(self, value: Any) -> Node:
        return self.constant(as_tensor(value, self.precision))

    def apply(self, op: Op, inputs: Sequence[Node], **attrs) -> Node:
        for node in inputs:
            if node.graph is not self:
                raise ValueError("cannot mix nodes from different graphs")
        return self._add(op, [n.id for n in inputs], attrs)

    # -- evaluation ---------------------------------------------------
    def _eval(self, node: Node) -> None:
        if node.op == "param":
            node.value = self.params[node.param]
        elif node.op == "const":
            node.value = node.attrs["value"]
        else:
            vals = [self.nodes[i].value for i in node.inputs]
            node.value, node.ctx = node.op.forward(vals, **node.attrs)

    def run(self, only: Iterable[int] | None = None) -> None:
        """Re-evaluate the graph (or just the node ids in ``only``) in order."""
        ids = range(len(self.nodes)) if only is None else sorted(only)
        for i in ids:
            self._eval(self.nodes[i])

    def descendants(self, name: str) -> list[int]:
        """Ids of every node whose value depends on parameter ``name``."""
        if name not in self._descendants:
            hit: set[int] = set()
            for node in self.nodes:
                if node.param == name or any(i in hit for i in node.inputs):
                    hit.add(node.id)
            self._descendants[name] = sorted(hit)
        return self._descendants[name]

    def referenced_params(self) -> set[str]:
        return {n.param for n in self.nodes if n.param is not None}


def backward(graph: Graph, loss: Node) -> dict[str, np.ndarray]:
    """Gradients of the scalar ``loss`` with respect to every parameter.

    Parameters that the loss does not reach get zero gradients.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    out = {name: np.zeros_like(value) for name, value in graph.params.items()}
    for node in reversed(graph.nodes[: loss.id + 1]):
        g = grads.pop(node.id, None)
        if g is None:
            continue
        if node.op == "param":
            out[node.param] += g
            continue
        if node.op == "const":
            continue
        vals = [graph.nodes[i].value for i in node.inputs]
        in_grads = node.op.backward(g, vals, node.value, node.ctx, **node.attrs)
        for i, gi in zip(node.inputs, in_grads):
            if gi is None:
                continue
            if i in grads:
                grads[i] = grads[i] + gi
            else:
                grads[i] = gi
    return out


def grad_check(graph: Graph, loss: Node, epsilon: float = 1e-5, names: Iterable[str] | None = None,
               max_entries: int | None = None, seed: int = 0) -> dict[str, float]:
    """Worst relative error of analytic vs. central-difference gradients.

    Each parameter scalar is perturbed by +/- ``epsilon`` and
    ``(f+ - f-) / (2 epsilon)`` is compared against :func:`backward`.
    The error for a parameter tensor is ``max|a - n| / max(max|a|, max|n|)``
    (0 when both gradients vanish). ``max_entries`` caps the scalars probed
    per tensor; the probed subset is drawn from ``seed``.
    """
    if graph.precision != "verification":
        raise ValueError("grad_check requires the 64-bit verification precision mode")
    graph.run()
    analytic = backward(graph, loss)
    rng = np.random.default_rng(seed)
    errors: dict[str, float] = {}
    for name in (graph.params if names is None else names):
        p = graph.params[name]
        flat = p.reshape(-1)
        idx = np.arange(flat.size)
        if max_entries is not None and flat.size > max_entries:
            idx = np.sort(rng.choice(flat.size, max_entries, replace=False))
        affected = [i for i in graph.descendants(name) if i <= loss.id]
        numeric = np.empty(idx.size)
        for k, j in enumerate(idx):
            orig = flat[j]
            flat[j] = orig + epsilon
            graph.run(affected)
            f_plus = float(loss.value.sum())
            flat[j] = orig - epsilon
            graph.run(affected)
            f_minus = float(loss.value.sum())
            flat[j] = orig
            numeric[k] = (f_plus - f_minus) / (2.0 * epsilon)
        graph.run(affected)
        a = analytic[name].reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(numeric).max(initial=0.0))
        errors[name] = 0.0 if scale == 0.0 else float(np.abs(a - numeric).max() / scale)
    return errors


# ---------------------------------------------------------------------------
# primitives


class Conv2d(Op):
    name = "conv2d"

    def forward(self, inputs, stride=1, pad=0):
        x, w = inputs[0], inputs[1]
        b = inputs[2] if len(inputs) > 2 else None
        B, C, H, W = x.shape
        O, _, kh, kw = w.shape
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        Ho = (H + 2 * pad - kh) // stride + 1
        Wo = (W + 2 * pad - kw) // stride + 1
        # columns laid out (B, C*kh*kw, Ho*Wo) so the product lands directly in NCHW
        cols = np.empty((B, C, kh, kw, Ho, Wo), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                cols[:, :, i, j] = xp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride]
        cols = cols.reshape(B, C * kh * kw, Ho * Wo)
        out = w.reshape(O, -1) @ cols
        if b is not None:
            out += b.reshape(1, O, 1)
        return out.reshape(B, O, Ho, Wo), (cols, xp.shape)

    def backward(self, grad, inputs, out, ctx, stride=1, pad=0):
        x, w = inputs[0], inputs[1]
        cols, xp_shape = ctx
        B, C, H, W = x.shape
        O, _, kh, kw = w.shape
        Ho, Wo = grad.shape[2], grad.shape[3]
        g = grad.reshape(B, O, Ho * Wo)
        gw = np.einsum("bop,bkp->ok", g, cols).reshape(w.shape) if B > 1 else (g[0] @ cols[0].T).reshape(w.shape)
        dcols = (w.reshape(O, -1).T @ g).reshape(B, C, kh, kw, Ho, Wo)
        gxp = np.zeros(xp_shape, dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i : i + stride * (Ho - 1) + 1 : stride, j : j + stride * (Wo - 1) + 1 : stride] += dcols[:, :, i, j]
        gx = gxp[:, :, pad : pad + H, pad : pad + W] if pad else gxp
        grads = [gx, gw]
        if len(inputs) > 2:
            grads.append(g.sum(axis=(0, 2)).reshape(inputs[2].shape))
        return tuple(grads)


class Relu(Op):
    name = "relu"

    def forward(self, inputs):
        return np.maximum(inputs[0], 0), None

    def backward(self, grad, inputs, out, ctx):
        return (grad * (inputs[0] > 0),)


class Sigmoid(Op):
    name = "sigmoid"

    def forward(self, inputs):
        x = inputs[0]
        # exp of a non-positive argument only, for both signs
        e = np.exp(-np.abs(x))
        return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e)).astype(x.dtype), None

    def backward(self, grad, inputs, out, ctx):
        return (grad * out * (1 - out),)


class MaxPool2(Op):
    name = "maxpool2"

    def forward(self, inputs):
        x = inputs[0]
        B, C, H, W = x.shape
        blocks = x.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
        arg = blocks.argmax(axis=-1)
        return np.take_along_axis(blocks, arg[..., None], axis=-1)[..., 0], arg

    def backward(self, grad, inputs, out, ctx):
        x = inputs[0]
        B, C, H, W = x.shape
        blocks = np.zeros((B, C, H // 2, W // 2, 4), dtype=grad.dtype)
        np.put_along_axis(blocks, ctx[..., None], grad[..., None], axis=-1)
        gx = blocks.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)


class Concat(Op):
    name = "concat"

    def forward(self, inputs):
        return np.concatenate(inputs, axis=1), None

    def backward(self, grad, inputs, out, ctx):
        bounds = np.cumsum([v.shape[1] for v in inputs])[:-1]
        return tuple(np.split(grad, bounds, axis=1))


class Narrow(Op):
    """Channel block ``[start, stop)``; one piece of a slice."""

    name = "narrow"

    def forward(self, inputs, start, stop):
        return inputs[0][:, start:stop], None

    def backward(self, grad, inputs, out, ctx, start, stop):
        g = np.zeros_like(inputs[0])
        g[:, start:stop] = grad
        return (g,)


def bilinear_matrix(n: int, factor: int, dtype=np.float64) -> np.ndarray:
    """(n*factor, n) half-pixel bilinear interpolation matrix with edge clamping."""
    return _bilinear_matrix(n, factor, np.dtype(dtype))


@functools.lru_cache(maxsize=None)
def _bilinear_matrix(n: int, factor: int, dtype: np.dtype) -> np.ndarray:
    out = np.zeros((n * factor, n), dtype=dtype)
    for o in range(n * factor):
        src = (o + 0.5) / factor - 0.5
        i0 = int(np.floor(src))
        t = src - i0
        out[o, min(max(i0, 0), n - 1)] += 1.0 - t
        out[o, min(max(i0 + 1, 0), n - 1)] += t
    out.flags.writeable = False
    return out


def bilinear_kernel(factor: int, channels: int = 1, dtype=np.float32) -> np.ndarray:
    """Depthwise transposed-convolution kernel (channels, 1, 2f, 2f) that reproduces bilinear upsampling."""
    k = 2 * factor
    t = np.arange(k)
    w1 = 1.0 - np.abs(t - (k - 1) / 2.0) / factor
    w = np.outer(w1, w1).astype(dtype)
    return np.tile(w, (channels, 1, 1, 1))


class UpsampleFixed(Op):
    name = "upsample_fixed"

    def forward(self, inputs, factor):
        x = inputs[0]
        ry = bilinear_matrix(x.shape[2], factor, x.dtype)
        rx = bilinear_matrix(x.shape[3], factor, x.dtype)
        return ry @ x @ rx.T, (ry, rx)

    def backward(self, grad, inputs, out, ctx, factor):
        ry, rx = ctx
        return (ry.T @ grad @ rx,)


class UpsampleLearned(Op):
    """Depthwise stride-``factor`` transposed convolution over an edge-padded input.

    Kernels are (C, 1, 2f, 2f). The input is replicated one pixel outward
    before the transposed convolution and the result is cropped back to
    ``factor`` times the input size, so a bilinear kernel reproduces
    :class:`UpsampleFixed` exactly, borders included.
    """

    name = "upsample_learned"

    def forward(self, inputs, factor):
        x, k = inputs
        B, C, H, W = x.shape
        f = factor
        K = 2 * f
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
        Hp, Wp = H + 2, W + 2
        full = np.zeros((B, C, (Hp - 1) * f + K, (Wp - 1) * f + K), dtype=x.dtype)
        kk = k[:, 0]
        for a in range(K):
            for b in range(K):
                full[:, :, a : a + f * (Hp - 1) + 1 : f, b : b + f * (Wp - 1) + 1 : f] += xp * kk[None, :, a, b, None, None]
        off = 3 * f // 2
        return full[:, :, off : off + f * H, off : off + f * W].copy(), xp

    def backward(self, grad, inputs, out, ctx, factor):
        x, k = inputs
        xp = ctx
        B, C, H, W = x.shape
        f = factor
        K = 2 * f
        Hp, Wp = H + 2, W + 2
        off = 3 * f // 2
        gfull = np.zeros((B, C, (Hp - 1) * f + K, (Wp - 1) * f + K), dtype=grad.dtype)
        gfull[:, :, off : off + f * H, off : off + f * W] = grad
        gxp = np.zeros_like(xp)
        gk = np.zeros_like(k)
        kk = k[:, 0]
        for a in range(K):
            for b in range(K):
                patch = gfull[:, :, a : a + f * (Hp - 1) + 1 : f, b : b + f * (Wp - 1) + 1 : f]
                gxp += patch * kk[None, :, a, b, None, None]
                gk[:, 0, a, b] = (patch * xp).sum(axis=(0, 2, 3))
        # fold the replicated border back onto the edge pixels
        gxp[:, :, 1] += gxp[:, :, 0]
        gxp[:, :, -2] += gxp[:, :, -1]
        gxp[:, :, :, 1] += gxp[:, :, :, 0]
        gxp[:, :, :, -2] += gxp[:, :, :, -1]
        return gxp[:, :, 1:-1, 1:-1], gk


class Add(Op):
    name = "add"

    def forward(self, inputs):
        out = inputs[0].copy()
        for v in inputs[1:]:
            out += v
        return out, None

    def backward(self, grad, inputs, out, ctx):
        return tuple(grad for _ in inputs)


class Scale(Op):
    name = "scale"

    def forward(self, inputs, factor):
        return inputs[0] * factor, None

    def backward(self, grad, inputs, out, ctx, factor):
        return (grad * factor,)


class Sum(Op):
    name = "sum"

    def forward(self, inputs):
        return inputs[0].sum(dtype=inputs[0].dtype).reshape(1, 1, 1, 1), None

    def backward(self, grad, inputs, out, ctx):
        return (np.broadcast_to(grad.reshape(()), inputs[0].shape).copy(),)


CONV2D, RELU, SIGMOID, MAXPOOL2 = Conv2d(), Relu(), Sigmoid(), MaxPool2()
CONCAT, NARROW, UP_FIXED, UP_LEARNED = Concat(), Narrow(), UpsampleFixed(), UpsampleLearned()
ADD, SCALE, SUM = Add(), Scale(), Sum()


# ---------------------------------------------------------------------------
# node-level API


def conv2d(x: Node, kernel: Node, bias: Node | None = None, stride: int = 1, pad: int = 0) -> Node:
    xs, ks = x.shape, kernel.shape
    if len(ks) != 4 or xs[1] != ks[1]:
        raise ShapeError(f"conv2d: input shape {xs} does not match kernel shape {ks} (channels {xs[1]} vs {ks[1] if len(ks) == 4 else '?'})")
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: need stride >= 1 and pad >= 0, got stride={stride}, pad={pad}")
    if bias is not None and bias.value.size != ks[0]:
        raise ShapeError(f"conv2d: bias shape {bias.shape} does not match kernel shape {ks}")
    ho = (xs[2] + 2 * pad - ks[2]) // stride + 1
    wo = (xs[3] + 2 * pad - ks[3]) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ShapeError(f"conv2d: input shape {xs} with kernel shape {ks}, pad {pad} gives an empty output")
    inputs = [x, kernel] if bias is None else [x, kernel, bias]
    return x.graph.apply(CONV2D, inputs, stride=stride, pad=pad)


def relu(x: Node) -> Node:
    return x.graph.apply(RELU, [x])


def sigmoid(x: Node) -> Node:
    return x.graph.apply(SIGMOID, [x])


def maxpool2(x: Node) -> Node:
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got shape {x.shape}")
    return x.graph.apply(MAXPOOL2, [x])


def concat(inputs: Sequence[Node]) -> Node:
    if not inputs:
        raise ValueError("concat needs at least one input")
    ref = inputs[0].shape
    for i, node in enumerate(inputs[1:], start=1):
        s = node.shape
        if (s[0], s[2], s[3]) != (ref[0], ref[2], ref[3]):
            raise ShapeError(f"concat: input {i} has shape {s}, input 0 has shape {ref}; align resolutions first")
    if len(inputs) == 1:
        return inputs[0]
    return inputs[0].graph.apply(CONCAT, list(inputs))


def slice(x: Node, sizes: Sequence[int]) -> list[Node]:  # noqa: A001 - op name
    if any(s < 1 for s in sizes) or sum(sizes) != x.shape[1]:
        raise ShapeError(f"slice: sizes {list(sizes)} do not partition {x.shape[1]} channels")
    if len(sizes) == 1:
        return [x]
    out, start = [], 0
    for s in sizes:
        out.append(x.graph.apply(NARROW, [x], start=start, stop=start + s))
        start += s
    return out


def upsample(x: Node, factor: int, mode: str = "learned-transposed", kernel: Node | None = None) -> Node:
    if factor not in UPSAMPLE_FACTORS:
        raise ValueError(f"upsample factor must be one of {UPSAMPLE_FACTORS}, got {factor}")
    if mode == "fixed-bilinear":
        return x.graph.apply(UP_FIXED, [x], factor=factor)
    if mode != "learned-transposed":
        raise ValueError(f"unknown upsample mode {mode!r}")
    if kernel is None:
        raise ValueError("learned-transposed upsampling needs a kernel parameter")
    want = (x.shape[1], 1, 2 * factor, 2 * factor)
    if kernel.shape != want:
        raise ShapeError(f"upsample kernel shape {kernel.shape}, expected {want}")
    return x.graph.apply(UP_LEARNED, [x, kernel], factor=factor)


def add(inputs: Sequence[Node]) -> Node:
    ref = inputs[0].shape
    for node in inputs[1:]:
        if node.shape != ref:
            raise ShapeError(f"add: shape {node.shape} vs {ref}")
    return inputs[0].graph.apply(ADD, list(inputs))


def scale(x: Node, factor: float) -> Node:
    return x.graph.apply(SCALE, [x], factor=float(factor))


def total(x: Node) -> Node:
    """Sum of all entries as a 1x1x1x1 scalar."""
    return x.graph.apply(SUM, [x])
