"""Dense numerical kernels with reverse-mode differentiation.

A minimal tape-based autograd sufficient to train the toy encoder-decoder:
matmul, broadcast add, elementwise mul, softmax, layer norm, GELU/ReLU,
embedding lookup, row gather, reshape/transpose, cross-entropy, and the
length-aware attention boost.

Numerics: tensors carry either float32 or float64 data. Reductions that are
not handled by BLAS (softmax denominators, norm statistics, logsumexp,
global norms) accumulate in float64 regardless of storage dtype. In float64
mode every reduction, including matmul, accumulates in 64-bit; gradient
checks run in that mode.

Recording: ops executed inside a `with Graph() as g:` block append their
output nodes to the tape; `backward(g, loss)` replays the tape in reverse.
Outside a graph, ops are forward-only (inference mode). Tapes are rebuilt
every step; nothing persists across steps except parameter tensors.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "backward",
    "matmul",
    "add",
    "mul",
    "scale",
    "reshape",
    "transpose",
    "take_rows",
    "embedding",
    "softmax_rows",
    "layer_norm",
    "gelu",
    "relu",
    "cross_entropy",
    "sum_all",
    "laam_boost",
]

_GELU_C = math.sqrt(2.0 / math.pi)

_local = threading.local()


def _active_graph() -> "Graph | None":
    return getattr(_local, "graph", None)


class Tensor:
    """A numpy array with an optional gradient buffer.

    requires_grad marks leaf parameters; interior nodes inherit it from
    their parents so backward can prune branches with no trainable inputs.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray, owned: bool = False) -> None:
        """Add g into the gradient buffer.

        owned=True promises g is a freshly allocated array of the right
        dtype that the caller will not reuse; it is adopted without a copy.
        """
        if self.grad is None:
            if owned and g.dtype == self.data.dtype and g.shape == self.data.shape:
                self.grad = g
            else:
                self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g.astype(self.data.dtype, copy=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Graph:
    """Ordered record of executed ops (the tape).

    Execution order is a topological order of the data flow, so reverse
    iteration visits every node after all of its consumers.
    """

    def __init__(self):
        self.nodes: list[Tensor] = []

    def __enter__(self) -> "Graph":
        if _active_graph() is not None:
            raise RuntimeError("graphs do not nest; close the active graph first")
        _local.graph = self
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.graph = None
        return False


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _attach(out: Tensor, parents: tuple[Tensor, ...], bwd: Callable[[np.ndarray], None]) -> Tensor:
    """Register out on the active tape; no-op in inference mode."""
    g = _active_graph()
    if g is not None:
        out.requires_grad = any(p.requires_grad for p in parents)
        if out.requires_grad:
            out._parents = parents
            out._backward = bwd
            g.nodes.append(out)
    return out


def backward(graph: Graph, loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into .grad for every node that needs it.

    loss must be a scalar produced under this graph. Nodes whose output does
    not influence the loss are skipped; each contributing node's backward
    closure runs exactly once.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.data)
    needed = {id(loss)}
    for node in reversed(graph.nodes):
        if id(node) not in needed or node._backward is None:
            continue
        for p in node._parents:
            if p.requires_grad:
                needed.add(id(p))
        node._backward(node.grad)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g down to shape (inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# primitives


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product. Both 2-D, or equal-rank stacks with matching batch dims."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ValueError(f"matmul needs rank >= 2, got shapes {a.shape} and {b.shape}")
    if a.data.ndim != b.data.ndim or a.data.shape[:-2] != b.data.shape[:-2]:
        if not (a.data.ndim == 2 and b.data.ndim == 2):
            raise ValueError(f"matmul batch dims must match, got shapes {a.shape} and {b.shape}")
    if a.data.shape[-1] != b.data.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = Tensor(np.matmul(a.data, b.data))

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(np.matmul(g, b.data.swapaxes(-1, -2)), owned=True)
        if b.requires_grad:
            b.accumulate_grad(np.matmul(a.data.swapaxes(-1, -2), g), owned=True)

    return _attach(out, (a, b), bwd)


def add(a: Tensor, b) -> Tensor:
    """Elementwise sum; b may broadcast against a (bias rows, masks)."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        # g is the consumer's dead buffer: at most one parent may adopt it
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g, a.data.shape), owned=True)
        if b.requires_grad:
            gb = _unbroadcast(g, b.data.shape)
            b.accumulate_grad(gb, owned=gb is not g)

    return _attach(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise product with broadcasting."""
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data)

    def bwd(g: np.ndarray) -> None:
        if a.requires_grad:
            a.accumulate_grad(_unbroadcast(g * b.data, a.data.shape), owned=True)
        if b.requires_grad:
            b.accumulate_grad(_unbroadcast(g * a.data, b.data.shape), owned=True)

    return _attach(out, (a, b), bwd)


def scale(x: Tensor, s: float) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data * x.data.dtype.type(s))

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * x.data.dtype.type(s), owned=True)

    return _attach(out, (x,), bwd)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g.reshape(x.data.shape), owned=True)

    return _attach(out, (x,), bwd)


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    x = _as_tensor(x)
    axes = tuple(axes)
    out = Tensor(np.ascontiguousarray(x.data.transpose(axes)))
    inv = np.argsort(axes)

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g.transpose(inv), owned=True)

    return _attach(out, (x,), bwd)


def take_rows(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather rows of a 2-D tensor; backward scatter-adds."""
    x = _as_tensor(x)
    idx = np.asarray(idx, dtype=np.int64)
    out = Tensor(x.data[idx])

    def bwd(g: np.ndarray) -> None:
        gx = np.zeros_like(x.data)
        np.add.at(gx, idx, g)
        x.accumulate_grad(gx, owned=True)

    return _attach(out, (x,), bwd)


def embedding(table: Tensor, ids: np.ndarray) -> Tensor:
    """Lookup rows of table [V, d] by integer ids of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= table.data.shape[0]):
        raise ValueError(
            f"embedding ids out of range [0, {table.data.shape[0]}): "
            f"min={ids.min()}, max={ids.max()}"
        )
    out = Tensor(table.data[ids])

    def bwd(g: np.ndarray) -> None:
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, table.data.shape[1]))
        table.accumulate_grad(gt, owned=True)

    return _attach(out, (table,), bwd)


def softmax_rows(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Numerically stable softmax over the last axis.

    mask, if given, is additive with entries 0 or -inf and must broadcast
    against x; -inf entries get exactly zero weight. A fully masked row is a
    degenerate mask and raises.
    """
    x = _as_tensor(x)
    z = x.data if mask is None else x.data + mask.astype(x.data.dtype, copy=False)
    m = z.max(axis=-1, keepdims=True)
    if mask is not None and np.isneginf(m).any():
        raise ValueError("softmax_rows: fully masked row (all entries -inf)")
    e = np.exp(z - m)
    denom = e.sum(axis=-1, keepdims=True, dtype=np.float64)
    y = e / denom.astype(x.data.dtype)
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
        x.accumulate_grad(y * (g - dot), owned=True)

    return _attach(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean / unit variance, then affine."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.data.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True, dtype=np.float64)
    xc = x.data - mu.astype(x.data.dtype)
    var = np.square(xc).mean(axis=-1, keepdims=True, dtype=np.float64)
    inv = (1.0 / np.sqrt(var + eps)).astype(x.data.dtype)
    xhat = xc * inv
    out = Tensor(xhat * gain.data + bias.data)

    def bwd(g: np.ndarray) -> None:
        if gain.requires_grad:
            gain.accumulate_grad((g * xhat).sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64))
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=tuple(range(g.ndim - 1)), dtype=np.float64))
        if x.requires_grad:
            gh = g * gain.data
            s1 = gh.sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
            s2 = (gh * xhat).sum(axis=-1, keepdims=True, dtype=np.float64).astype(x.data.dtype)
            x.accumulate_grad(inv * (gh - s1 / n - xhat * (s2 / n)), owned=True)

    return _attach(out, (x, gain, bias), bwd)


def gelu(x: Tensor) -> Tensor:
    """GELU, tanh approximation: 0.5*x*(1 + tanh(c*(x + 0.044715*x^3)))."""
    x = _as_tensor(x)
    xd = x.data
    u = _GELU_C * (xd + 0.044715 * (xd * xd * xd))
    t = np.tanh(u)
    out = Tensor(0.5 * xd * (1.0 + t))

    def bwd(g: np.ndarray) -> None:
        du = _GELU_C * (1.0 + (3 * 0.044715) * (xd * xd))
        dx = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du
        x.accumulate_grad(g * dx, owned=True)

    return _attach(out, (x,), bwd)


def relu(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.maximum(x.data, 0))

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(g * (x.data > 0), owned=True)

    return _attach(out, (x,), bwd)


def cross_entropy(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean negative log-likelihood of targets under row softmaxes.

    logits is [T, V]; targets is a length-T integer vector with every id in
    [0, V). Returns a float64 scalar; backward emits (softmax - onehot) / T.
    """
    logits = _as_tensor(logits)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects [T, V] logits, got shape {logits.shape}")
    t_count, vocab = logits.data.shape
    if targets.shape != (t_count,):
        raise ValueError(f"targets shape {targets.shape} does not match logits rows {t_count}")
    if targets.size and (targets.min() < 0 or targets.max() >= vocab):
        raise ValueError(
            f"target id out of range [0, {vocab}): min={targets.min()}, max={targets.max()}"
        )
    z = logits.data.astype(np.float64, copy=False)
    m = z.max(axis=-1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(z - m).sum(axis=-1))
    picked = z[np.arange(t_count), targets]
    out = Tensor(np.asarray((lse - picked).mean()))

    def bwd(g: np.ndarray) -> None:
        y = np.exp(z - lse[:, None])
        y[np.arange(t_count), targets] -= 1.0
        logits.accumulate_grad((float(g) / t_count) * y.astype(logits.data.dtype), owned=True)

    return _attach(out, (logits,), bwd)


def sum_all(x: Tensor) -> Tensor:
    """Sum of all entries, as a float64 scalar."""
    x = _as_tensor(x)
    out = Tensor(np.asarray(x.data.sum(dtype=np.float64)))

    def bwd(g: np.ndarray) -> None:
        x.accumulate_grad(np.full(x.data.shape, float(g), dtype=x.data.dtype), owned=True)

    return _attach(out, (x,), bwd)


def laam_boost(attn: Tensor, remaining, beta: float) -> Tensor:
    """Boost each row's top-k attention weights by (1+beta) and renormalize.

    attn holds probability rows over the last axis; remaining is the
    per-row token budget (scalar or integer array broadcastable to the row
    index shape). Rows with k = 0 or k >= n pass through bit-exactly
    (a uniform boost cancels under renormalization). Top-k ties break
    toward the lowest index. Backward treats the selection as constant.
    """
    attn = _as_tensor(attn)
    if beta < 0:
        raise ValueError(f"boost must be >= 0, got {beta}")
    k = np.asarray(remaining, dtype=np.int64)
    if (k < 0).any():
        raise ValueError("remaining must be >= 0")
    n = attn.data.shape[-1]
    k = np.broadcast_to(k, attn.data.shape[:-1])
    active = (k > 0) & (k < n)
    if beta == 0.0 or not active.any():
        return attn

    # multiplier (1+beta) on each active row's k largest entries, 1 elsewhere
    order = np.argsort(-attn.data, axis=-1, kind="stable")
    in_topk = np.arange(n).reshape((1,) * (attn.data.ndim - 1) + (n,)) < k[..., None]
    vals = np.where(in_topk & active[..., None], attn.data.dtype.type(1.0 + beta), attn.data.dtype.type(1.0))
    mult = np.empty_like(attn.data)
    np.put_along_axis(mult, order, vals, axis=-1)

    bw = attn.data * mult
    denom = bw.sum(axis=-1, keepdims=True, dtype=np.float64).astype(attn.data.dtype)
    y = np.where(active[..., None], bw / denom, attn.data)
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=-1, keepdims=True, dtype=np.float64).astype(attn.data.dtype)
        boosted = (mult / denom) * (g - dot)
        attn.accumulate_grad(np.where(active[..., None], boosted, g), owned=True)

    return _attach(out, (attn,), bwd)
