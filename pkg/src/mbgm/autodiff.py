"""Reverse-mode automatic differentiation over dense numpy tensors.

A :class:`Graph` is an append-only tape: every primitive evaluates eagerly,
records a node holding the result and a closure that maps the output gradient
to input gradients.  Nodes can only reference earlier nodes, so walking the
tape backwards visits each node exactly once and accumulates gradients in a
fixed order -- two backward passes over one graph are bitwise identical.

Primitives cover exactly what the generator model needs: elementwise and
linear algebra, transposed convolution, batch normalization and bilinear
sampling.  There is no fusion, no higher-order support, and no GPU path.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


class ShapeError(ValueError):
    """Operand shapes do not conform for the requested operation."""


class Node:
    """One tape entry: an operation result plus its backward closure."""

    __slots__ = ("graph", "idx", "value", "parents", "backward_fn", "requires_grad", "name")

    def __init__(self, graph, value, parents=(), backward_fn=None, requires_grad=False, name=None):
        self.graph = graph
        self.value = value
        self.parents = parents
        self.backward_fn = backward_fn
        self.requires_grad = requires_grad
        self.name = name
        self.idx = len(graph.nodes)
        graph.nodes.append(self)

    @property
    def shape(self):
        return self.value.shape

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __repr__(self):
        tag = self.name or "node"
        return f"<{tag}#{self.idx} {self.value.shape} grad={self.requires_grad}>"


class Graph:
    """Dynamically built computation tape with a uniform dtype."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self.nodes: list[Node] = []
        self.leaves: list[Node] = []

    def leaf(self, value, name=None) -> Node:
        """Differentiable input; its gradient appears in every GradientMap."""
        value = np.ascontiguousarray(value, dtype=self.dtype)
        node = Node(self, value, requires_grad=True, name=name)
        self.leaves.append(node)
        return node

    def constant(self, value, name=None) -> Node:
        value = np.ascontiguousarray(value, dtype=self.dtype)
        return Node(self, value, requires_grad=False, name=name)

    def backward(self, root: Node) -> dict[Node, np.ndarray]:
        """Gradients of scalar ``root`` w.r.t. every leaf of this graph.

        Leaves the tape untouched; unused leaves map to exact zeros.
        """
        if root.graph is not self:
            raise ValueError("backward: root belongs to a different graph")
        if root.value.size != 1:
            raise ShapeError(f"backward: root must be scalar, got shape {root.value.shape}")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[root.idx] = np.ones_like(root.value)
        for idx in range(root.idx, -1, -1):
            g = grads[idx]
            if g is None:
                continue
            node = self.nodes[idx]
            if node.backward_fn is None:
                continue
            for parent, pg in zip(node.parents, node.backward_fn(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if grads[parent.idx] is None:
                    grads[parent.idx] = pg
                else:
                    # fresh allocation: the first contribution may alias an
                    # upstream buffer shared with a sibling
                    grads[parent.idx] = grads[parent.idx] + pg
            if idx != root.idx:
                grads[idx] = None

        return {leaf: (grads[leaf.idx] if grads[leaf.idx] is not None else np.zeros_like(leaf.value))
                for leaf in self.leaves}


def backward(graph: Graph, root: Node) -> dict[Node, np.ndarray]:
    return graph.backward(root)


def _graph_of(*nodes: Node) -> Graph:
    g = nodes[0].graph
    for n in nodes[1:]:
        if n.graph is not g:
            raise ValueError("operands belong to different graphs")
    return g


def _any_grad(*nodes: Node) -> bool:
    return any(n.requires_grad for n in nodes)


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    if g.shape == tuple(shape):
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, (got, want) in enumerate(zip(g.shape, shape)) if want == 1 and got != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _check_broadcast(op, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not conform") from None


def add(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _check_broadcast("add", a.value, b.value)
    out = a.value + b.value

    def bw(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(grad, b.shape)

    return Node(g, out, (a, b), bw if _any_grad(a, b) else None, _any_grad(a, b))


def sub(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _check_broadcast("subtract", a.value, b.value)
    out = a.value - b.value

    def bw(grad):
        return _unbroadcast(grad, a.shape), _unbroadcast(-grad, b.shape)

    return Node(g, out, (a, b), bw if _any_grad(a, b) else None, _any_grad(a, b))


def mul(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    _check_broadcast("multiply", a.value, b.value)
    out = a.value * b.value

    def bw(grad):
        return _unbroadcast(grad * b.value, a.shape), _unbroadcast(grad * a.value, b.shape)

    return Node(g, out, (a, b), bw if _any_grad(a, b) else None, _any_grad(a, b))


def scale(a: Node, c) -> Node:
    c = float(c)
    out = a.value * a.graph.dtype.type(c)

    def bw(grad):
        return (grad * a.graph.dtype.type(c),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def matmul(a: Node, b: Node) -> Node:
    g = _graph_of(a, b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2):
        raise ShapeError(f"matmul: operands must be 1-D or 2-D, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def bw(grad):
        a2 = av.reshape(1, -1) if av.ndim == 1 else av
        b2 = bv.reshape(-1, 1) if bv.ndim == 1 else bv
        g2 = grad.reshape(a2.shape[0], b2.shape[1])
        da = (g2 @ b2.T).reshape(av.shape)
        db = (a2.T @ g2).reshape(bv.shape)
        return da, db

    return Node(g, out, (a, b), bw if _any_grad(a, b) else None, _any_grad(a, b))


def tsum(a: Node, axis=None) -> Node:
    out = a.value.sum(axis=axis)
    out = np.asarray(out, dtype=a.graph.dtype)

    def bw(grad):
        if axis is None:
            return (np.broadcast_to(grad, a.shape).copy(),)
        g = np.expand_dims(grad, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def tmean(a: Node) -> Node:
    return scale(tsum(a), 1.0 / a.value.size)


def sum_of_squares(a: Node) -> Node:
    out = np.asarray((a.value * a.value).sum(), dtype=a.graph.dtype)

    def bw(grad):
        return (2.0 * grad * a.value,)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def relu(a: Node) -> Node:
    out = np.maximum(a.value, 0)

    def bw(grad):
        return (grad * (a.value > 0),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def tanh(a: Node) -> Node:
    out = np.tanh(a.value)

    def bw(grad):
        return (grad * (1.0 - out * out),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def concat(parts: list[Node], axis: int = 0) -> Node:
    if not parts:
        raise ShapeError("concatenate: need at least one operand")
    g = _graph_of(*parts)
    base = list(parts[0].shape)
    for p in parts[1:]:
        other = list(p.shape)
        if len(other) != len(base) or any(o != b for i, (o, b) in enumerate(zip(other, base)) if i != axis):
            raise ShapeError(f"concatenate: shape {p.shape} does not match {parts[0].shape} off axis {axis}")
    out = np.concatenate([p.value for p in parts], axis=axis)
    needs = _any_grad(*parts)

    def bw(grad):
        sizes = [p.shape[axis] for p in parts]
        return np.split(grad, np.cumsum(sizes)[:-1], axis=axis)

    return Node(g, out, tuple(parts), bw if needs else None, needs)


def stack0(parts: list[Node]) -> Node:
    """Stack equal-shape tensors along a new leading axis."""
    return concat([reshape(p, (1,) + p.shape) for p in parts], axis=0)


def reshape(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != a.value.size:
        raise ShapeError(f"reshape: cannot view {a.shape} as {shape}")
    out = a.value.reshape(shape)

    def bw(grad):
        return (grad.reshape(a.shape),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def subtensor(a: Node, key) -> Node:
    """Basic slicing (tuple of slices / ints); gradient scatters into zeros."""
    out = np.ascontiguousarray(a.value[key])

    def bw(grad):
        da = np.zeros_like(a.value)
        da[key] = grad.reshape(da[key].shape)
        return (da,)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def broadcast_to(a: Node, shape) -> Node:
    shape = tuple(int(s) for s in shape)
    out = np.broadcast_to(a.value, shape).copy()

    def bw(grad):
        return (_unbroadcast(grad, a.shape),)

    return Node(a.graph, out, (a,), bw if a.requires_grad else None, a.requires_grad)


def conv_transpose2d(x: Node, kernel: Node, stride: int, padding, bias: Node | None = None) -> Node:
    """Transposed convolution on ``(N, H, W, Cin)`` or ``(H, W, Cin)`` input.

    ``padding`` is an int (symmetric crop) or a ``(top, bottom, left, right)``
    tuple; the asymmetric form realizes "same"-size layers where the output
    formula admits no symmetric integer padding.
    """
    g = _graph_of(*( (x, kernel, bias) if bias is not None else (x, kernel) ))
    squeeze = x.value.ndim == 3
    xv = x.value[None] if squeeze else x.value
    if xv.ndim != 4:
        raise ShapeError(f"conv_transpose2d: input must be 3-D or 4-D, got {x.shape}")
    if kernel.value.ndim != 4:
        raise ShapeError(f"conv_transpose2d: kernel must be (kh, kw, Cin, Cout), got {kernel.shape}")
    if xv.shape[3] != kernel.value.shape[2]:
        raise ShapeError(
            f"conv_transpose2d: input channels {xv.shape[3]} != kernel Cin {kernel.value.shape[2]}")
    if stride not in (1, 2):
        raise ShapeError(f"conv_transpose2d: stride must be 1 or 2, got {stride}")
    crop = kernels.normalize_crop(padding)
    if min(crop) < 0:
        raise ShapeError(f"conv_transpose2d: padding must be >= 0, got {padding}")
    kh, kw = kernel.value.shape[:2]
    ho, wo = kernels.conv_transpose2d_out_shape(xv.shape[1:3], (kh, kw), stride, crop)
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv_transpose2d: computed output size {ho}x{wo} is not positive "
            f"(input {xv.shape[1]}x{xv.shape[2]}, kernel {kh}x{kw}, stride {stride}, padding {padding})")
    if bias is not None and bias.shape != (kernel.value.shape[3],):
        raise ShapeError(f"conv_transpose2d: bias shape {bias.shape} != ({kernel.value.shape[3]},)")

    out = kernels.conv_transpose2d_fwd(xv, kernel.value, stride, crop,
                                       bias.value if bias is not None else None)
    if squeeze:
        out = out[0]
    parents = (x, kernel) if bias is None else (x, kernel, bias)
    needs = _any_grad(*parents)

    def bw(grad):
        gv = grad[None] if squeeze else grad
        dx, dw = kernels.conv_transpose2d_bwd(
            gv, xv, kernel.value, stride, crop,
            need_input=x.requires_grad, need_kernel=kernel.requires_grad)
        if dx is not None and squeeze:
            dx = dx[0]
        if bias is None:
            return dx, dw
        db = kernels.conv_transpose2d_bwd_bias(gv) if bias.requires_grad else None
        return dx, dw, db

    return Node(g, out, parents, bw if needs else None, needs)


@dataclass
class RunningStats:
    """Exponential running statistics of one batch-norm layer."""

    mean: np.ndarray
    var: np.ndarray


def batch_norm(x: Node, gamma: Node, beta: Node, mode: str, running: RunningStats,
               epsilon: float = 1e-5, momentum: float = 0.9) -> Node:
    """Batch normalization over the batch and spatial axes of ``(N, H, W, C)``.

    Train mode normalizes with current batch statistics (differentiable
    through them) and folds those statistics into ``running`` as
    ``running = momentum * running + (1 - momentum) * batch``.  Infer mode
    normalizes with ``running`` alone.
    """
    g = _graph_of(x, gamma, beta)
    if x.value.ndim != 4:
        raise ShapeError(f"batch_norm: input must be (N, H, W, C), got {x.shape}")
    c = x.value.shape[3]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batch_norm: gamma/beta shapes {gamma.shape}/{beta.shape} != ({c},)")
    if mode not in ("train", "infer"):
        raise ValueError(f"batch_norm: mode must be 'train' or 'infer', got {mode!r}")
    if epsilon <= 0:
        raise ValueError(f"batch_norm: epsilon must be > 0, got {epsilon}")

    axes = (0, 1, 2)
    needs = _any_grad(x, gamma, beta)
    if mode == "train":
        mu = x.value.mean(axis=axes)
        var = x.value.var(axis=axes)
        invstd = 1.0 / np.sqrt(var + x.graph.dtype.type(epsilon))
        xhat = (x.value - mu) * invstd
        out = gamma.value * xhat + beta.value
        running.mean[...] = momentum * running.mean + (1.0 - momentum) * mu
        running.var[...] = momentum * running.var + (1.0 - momentum) * var

        def bw(grad):
            m = x.value.shape[0] * x.value.shape[1] * x.value.shape[2]
            dxhat = grad * gamma.value
            dx = None
            if x.requires_grad:
                dx = (invstd / m) * (m * dxhat
                                     - dxhat.sum(axis=axes)
                                     - xhat * (dxhat * xhat).sum(axis=axes))
            dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = grad.sum(axis=axes) if beta.requires_grad else None
            return dx, dgamma, dbeta

    else:
        invstd = 1.0 / np.sqrt(running.var + x.graph.dtype.type(epsilon))
        xhat = (x.value - running.mean) * invstd
        out = gamma.value * xhat + beta.value

        def bw(grad):
            dx = grad * (gamma.value * invstd) if x.requires_grad else None
            dgamma = (grad * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = grad.sum(axis=axes) if beta.requires_grad else None
            return dx, dgamma, dbeta

    return Node(g, np.ascontiguousarray(out, dtype=x.graph.dtype), (x, gamma, beta),
                bw if needs else None, needs)


def bilinear_sample(image: Node, coords: Node) -> Node:
    """Sample ``(H, W, C)`` image at ``(Ho, Wo, 2)`` pixel coordinates.

    Coordinates clamp to the image border; clamped positions receive zero
    coordinate-gradient (the true subgradient of the clamp).
    """
    g = _graph_of(image, coords)
    if image.value.ndim != 3:
        raise ShapeError(f"bilinear_sample: image must be (H, W, C), got {image.shape}")
    if coords.value.ndim != 3 or coords.value.shape[2] != 2:
        raise ShapeError(f"bilinear_sample: coords must be (H, W, 2), got {coords.shape}")

    out, cache = kernels.bilinear_fwd(image.value, coords.value)
    needs = _any_grad(image, coords)

    def bw(grad):
        dimg, dcrd = kernels.bilinear_bwd(grad, cache,
                                          need_image=image.requires_grad,
                                          need_coords=coords.requires_grad)
        return dimg, dcrd

    return Node(g, out, (image, coords), bw if needs else None, needs)


def finite_diff_check(f, point: np.ndarray, grad: np.ndarray, eps: float = 1e-5) -> float:
    """Max relative error between ``grad`` and central differences of ``f``.

    ``f`` maps an array like ``point`` to a float.  The relative error of one
    coordinate uses the denominator ``max(|analytic|, |numeric|, 1e-8)``.
    Intended to run in double precision; ``point`` is not modified.
    """
    if eps <= 0:
        raise ValueError(f"finite_diff_check: eps must be > 0, got {eps}")
    point = np.asarray(point, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != point.shape:
        raise ShapeError(f"finite_diff_check: grad shape {grad.shape} != point shape {point.shape}")

    worst = 0.0
    flat = point.ravel().copy()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = float(f(flat.reshape(point.shape)))
        flat[i] = orig - eps
        f_minus = float(f(flat.reshape(point.shape)))
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise FloatingPointError(f"finite_diff_check: non-finite function value at coordinate {i}")
        numeric = (f_plus - f_minus) / (2.0 * eps)
        analytic = grad.ravel()[i]
        err = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, err)
    return worst
