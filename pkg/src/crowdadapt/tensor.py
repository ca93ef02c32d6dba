"""Dense tensors with reverse-mode automatic differentiation.

Only the operations needed by the counting and guiding networks are provided.
Every op returns a new :class:`Tensor`; when any input requires a gradient the
output keeps a reference to its inputs and a closure mapping the output
gradient to input gradients. :func:`backward` linearises the reachable
sub-graph into a :class:`Graph` (inputs always get smaller ids than the nodes
that consume them) and walks it once in decreasing id order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    """A float array that can take part in a differentiation graph."""

    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.op = "leaf"
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op}, requires_grad={self.requires_grad})"

    # arithmetic sugar; shapes must match or one side must be a python scalar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, mul(other, -1.0) if isinstance(other, Tensor) else -other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def sum(self) -> "Tensor":
        return tsum(self)


def as_tensor(x, dtype=None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, dtype=dtype)


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: BackwardFn, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# graph + backward
# ---------------------------------------------------------------------------


@dataclass
class Graph:
    """Linearised view of the sub-graph feeding a set of outputs.

    ``nodes[i]`` has id ``i``; ``inputs[i]`` holds the ids of its parents, all
    smaller than ``i`` (-1 for constant parents, which are not recorded).
    """

    nodes: list[Tensor] = field(default_factory=list)
    inputs: list[tuple[int, ...]] = field(default_factory=list)
    outputs: list[int] = field(default_factory=list)

    @classmethod
    def trace(cls, *outputs: Tensor) -> "Graph":
        g = cls()
        index: dict[int, int] = {}
        # iterative post-order DFS so deep nets don't hit the recursion limit
        for root in outputs:
            stack: list[tuple[Tensor, bool]] = [(root, False)]
            while stack:
                node, expanded = stack.pop()
                key = id(node)
                if key in index:
                    continue
                if expanded:
                    index[key] = len(g.nodes)
                    g.nodes.append(node)
                    g.inputs.append(tuple(index.get(id(p), -1) for p in node._parents))
                    continue
                stack.append((node, True))
                for p in reversed(node._parents):
                    if id(p) not in index and p.requires_grad:
                        stack.append((p, False))
            g.outputs.append(index[id(root)])
        return g

    def leaves(self) -> list[Tensor]:
        return [n for n in self.nodes if n.is_leaf and n.requires_grad]


def backward(loss: Tensor, accumulate: bool = True) -> dict[Tensor, np.ndarray]:
    """Propagate d(loss)/d(node) through the graph ending at ``loss``.

    Returns a map from every ``requires_grad`` leaf to its gradient. With
    ``accumulate`` the gradients are also added into ``leaf.grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return {}
    graph = Graph.trace(loss)
    grads: list[np.ndarray | None] = [None] * len(graph.nodes)
    grads[graph.outputs[0]] = np.ones_like(loss.data)
    result: dict[Tensor, np.ndarray] = {}
    for i in range(len(graph.nodes) - 1, -1, -1):
        node = graph.nodes[i]
        g = grads[i]
        grads[i] = None
        if g is None:
            g = np.zeros_like(node.data)
        if node.is_leaf:
            result[node] = g
            continue
        parent_grads = node._backward(g)
        for pid, parent, pg in zip(graph.inputs[i], node._parents, parent_grads):
            if pg is None or pid < 0:
                continue
            if grads[pid] is None:
                grads[pid] = pg
            else:
                grads[pid] = grads[pid] + pg
    for leaf, g in result.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient reached leaf of shape {leaf.shape}")
        if accumulate:
            leaf.grad = g.copy() if leaf.grad is None else leaf.grad + g
    return result


# ---------------------------------------------------------------------------
# elementwise / reduction helpers
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        return _make(a.data + b, (a,), lambda g: (g,), "add_scalar")
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _make(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a, b) -> Tensor:
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _make(a.data * s, (a,), lambda g: (g * s,), "mul_scalar")
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def tsum(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def slice1d(a: Tensor, start: int, stop: int) -> Tensor:
    """Contiguous slice ``a[start:stop]`` of a 1-D tensor."""
    if a.data.ndim != 1:
        raise ValueError(f"slice1d expects a 1-D tensor, got shape {a.shape}")
    n = a.shape[0]
    if not 0 <= start <= stop <= n:
        raise IndexError(f"slice [{start}:{stop}) out of range for length {n}")

    def _bw(g):
        full = np.zeros(n, dtype=g.dtype)
        full[start:stop] = g
        return (full,)

    return _make(a.data[start:stop], (a,), _bw, "slice")


def concat1d(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[0] for p in parts]
    bounds = np.cumsum([0] + sizes)

    def _bw(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _make(np.concatenate([p.data for p in parts]), tuple(parts), _bw, "concat")


def mean_rows(a: Tensor) -> Tensor:
    """Mean over the leading axis: [K, F] -> [F]."""
    k = a.shape[0]

    def _bw(g):
        return (np.broadcast_to(g / k, a.shape).copy(),)

    return _make(a.data.mean(axis=0), (a,), _bw, "mean_rows")


def sse(pred: Tensor, target) -> Tensor:
    """Sum of squared differences against a constant target of equal shape."""
    target = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=pred.dtype)
    if target.shape != pred.shape:
        raise ValueError(f"sse: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target
    return _make(np.asarray((diff * diff).sum()), (pred,), lambda g: (2.0 * g * diff,), "sse")


# ---------------------------------------------------------------------------
# network ops
# ---------------------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _make(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g: (g * mask,), "relu")


def conv_output_size(size: int, k: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (k - 1) - 1) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1, padding: int = 0,
           dilation: int = 1) -> Tensor:
    """2-D cross-correlation over an NCHW batch (im2col + matmul)."""
    if x.data.ndim != 4:
        raise ValueError(f"conv2d input must be [B,C,H,W], got shape {x.shape}")
    if weight.data.ndim != 4:
        raise ValueError(f"conv2d weight must be [C_out,C_in,kh,kw], got shape {weight.shape}")
    B, C, H, W = x.shape
    C_out, C_in, kh, kw = weight.shape
    if C != C_in:
        raise ValueError(f"conv2d channel axis mismatch: input has C_in={C}, weight expects {C_in}")
    if bias is not None and bias.shape != (C_out,):
        raise ValueError(f"conv2d bias axis mismatch: expected ({C_out},), got {bias.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1, dilation >= 1, padding >= 0")
    Ho = conv_output_size(H, kh, stride, padding, dilation)
    Wo = conv_output_size(W, kw, stride, padding, dilation)
    if Ho < 1:
        raise ValueError(f"conv2d height axis too small: H={H} gives output height {Ho}")
    if Wo < 1:
        raise ValueError(f"conv2d width axis too small: W={W} gives output width {Wo}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    span_h = dilation * (kh - 1) + 1
    span_w = dilation * (kw - 1) + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (span_h, span_w), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride, ::dilation, ::dilation]
    # [B, Ho, Wo, C, kh, kw] -> rows of receptive fields
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(B * Ho * Wo, C * kh * kw)
    wmat = weight.data.reshape(C_out, -1)
    out = cols @ wmat.T
    if bias is not None:
        out += bias.data
    out = np.ascontiguousarray(out.reshape(B, Ho, Wo, C_out).transpose(0, 3, 1, 2))
    padded_shape = xp.shape

    def _bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(B * Ho * Wo, C_out)
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, Ho, Wo, C, kh, kw)
            dxp = np.zeros(padded_shape, dtype=g.dtype)
            for i in range(kh):
                r0 = i * dilation
                for j in range(kw):
                    c0 = j * dilation
                    dxp[:, :, r0 : r0 + (Ho - 1) * stride + 1 : stride, c0 : c0 + (Wo - 1) * stride + 1 : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            gx = dxp[:, :, padding : padding + H, padding : padding + W] if padding else dxp
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=0) if bias is not None and bias.requires_grad else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "conv2d")


def maxpool2d(x: Tensor, k: int, stride: int) -> Tensor:
    """Max pooling with floor semantics; ties send the gradient to the first maximum."""
    B, C, H, W = x.shape
    if k > H or k > W:
        raise ValueError(f"maxpool2d window {k} larger than input {H}x{W}")
    Ho = (H - k) // stride + 1
    Wo = (W - k) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(x.data, (k, k), axis=(2, 3))
    win = win[:, :, : (Ho - 1) * stride + 1 : stride, : (Wo - 1) * stride + 1 : stride]
    flat = win.reshape(B, C, Ho, Wo, k * k)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def _bw(g):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(k):
            for j in range(k):
                hit = arg == i * k + j
                gx[:, :, i : i + (Ho - 1) * stride + 1 : stride, j : j + (Wo - 1) * stride + 1 : stride] += g * hit
        return (gx,)

    return _make(np.ascontiguousarray(out), (x,), _bw, "maxpool2d")


def global_avg_pool(x: Tensor) -> Tensor:
    B, C, H, W = x.shape
    n = H * W

    def _bw(g):
        return (np.broadcast_to((g / n)[:, :, None, None], x.shape).copy(),)

    return _make(x.data.mean(axis=(2, 3)), (x,), _bw, "global_avg_pool")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None) -> Tensor:
    if x.data.ndim != 2:
        raise ValueError(f"linear input must be [B,F_in], got shape {x.shape}")
    f_out, f_in = weight.shape
    if x.shape[1] != f_in:
        raise ValueError(f"linear feature axis mismatch: input has F_in={x.shape[1]}, weight expects {f_in}")
    if bias is not None and bias.shape != (f_out,):
        raise ValueError(f"linear bias axis mismatch: expected ({f_out},), got {bias.shape}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def _bw(g):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g.sum(axis=0)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, _bw, "linear")


def batch_norm_affine(x: Tensor, gamma: Tensor, beta: Tensor, eps: float,
                      mean: np.ndarray | None = None, var: np.ndarray | None = None) -> Tensor:
    """Per-channel normalisation followed by a channel-wise affine map.

    Statistics are computed over (B, H, W) with the biased variance unless
    ``mean`` and ``var`` are supplied, in which case they are treated as
    constants. ``gamma`` and ``beta`` are ordinary graph inputs, so gradients
    flow into whatever produced them.
    """
    if x.data.ndim != 4:
        raise ValueError(f"normalisation input must be [B,D,H,W], got shape {x.shape}")
    D = x.shape[1]
    if gamma.shape != (D,) or beta.shape != (D,):
        raise ValueError(f"channel axis mismatch: input has D={D}, gamma {gamma.shape}, beta {beta.shape}")
    B, _, H, W = x.shape
    n = B * H * W
    if n < 1:
        raise ValueError("normalisation needs at least one element per channel")
    use_batch = mean is None
    if use_batch:
        # shifting by one sample per channel makes a constant channel centre to exactly 0
        ref = x.data[:1, :, :1, :1]
        mean = ref[0, :, 0, 0] + (x.data - ref).mean(axis=(0, 2, 3))
        centered = x.data - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
    else:
        centered = x.data - np.asarray(mean, dtype=x.dtype)[None, :, None, None]
    denom = np.asarray(var, dtype=x.dtype) + eps
    if np.any(denom <= 0):
        raise FloatingPointError("zero variance with epsilon=0; cannot normalise")
    inv = (1.0 / np.sqrt(denom)).astype(x.dtype)
    xhat = centered * inv[None, :, None, None]
    gd = gamma.data[None, :, None, None]
    out = gd * xhat + beta.data[None, :, None, None]

    def _bw(g):
        ggamma = (g * xhat).sum(axis=(0, 2, 3))
        gbeta = g.sum(axis=(0, 2, 3))
        gx = None
        if x.requires_grad:
            dxhat = g * gd
            if use_batch:
                s1 = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
                s2 = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
                gx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
            else:
                gx = dxhat * inv[None, :, None, None]
        return gx, ggamma, gbeta

    return _make(out, (x, gamma, beta), _bw, "batch_norm")
