"""Dense tensors with reverse-mode gradient accumulation on numpy.

Every operation returns a new Tensor that remembers its inputs and a
backward closure; ``backward(loss)`` walks the recorded graph once in
reverse topological order and accumulates gradients into the Parameter
buffers that fed it.  Gradients accumulate across calls until explicitly
zeroed, which is what truncated backpropagation needs.

Only the broadcasting the model code actually uses is supported (bias
rows, per-row scalars); there are no GPU kernels, sparse layouts or graph
rewrites.  float64 is the default so finite-difference checks have
headroom; pass float32 arrays for speed.
"""

from __future__ import annotations

import numpy as np

from .errors import DegenerateBatchError, NumericError, ShapeError

DEFAULT_DTYPE = np.float64

_check_finite = False


def set_check_finite(enabled: bool) -> None:
    """Toggle NaN/Inf detection on every op output (off by default)."""
    global _check_finite
    _check_finite = bool(enabled)


class Tensor:
    """Immutable dense array node in a computation graph."""

    __slots__ = ("data", "grad", "_parents", "_backward", "_needs_grad")

    def __init__(self, data, parents=(), backward=None, needs_grad=None):
        if isinstance(data, np.ndarray):
            self.data = data
        else:
            self.data = np.asarray(data, dtype=DEFAULT_DTYPE)
        self._parents = tuple(parents)
        self._backward = backward
        if needs_grad is None:
            needs_grad = any(p._needs_grad for p in self._parents)
        self._needs_grad = needs_grad
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype})"


class Parameter:
    """Trainable value with gradient and optimizer-accumulator slots.

    ``grad`` and ``accumulator`` always share the value's shape.  A frozen
    parameter still receives gradients from backward(); optimizers must
    leave its value untouched.
    """

    __slots__ = ("value", "grad", "accumulator", "frozen", "name")

    def __init__(self, value, name: str = "", frozen: bool = False):
        arr = np.asarray(value)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.value = arr.copy()
        self.grad = np.zeros_like(self.value)
        self.accumulator = np.zeros_like(self.value)
        self.frozen = frozen
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def as_tensor(self) -> Tensor:
        """Leaf node whose grad buffer is this parameter's (shared reference)."""
        t = Tensor(self.value, needs_grad=True)
        t.grad = self.grad
        return t

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self):
        return f"Parameter({self.name or '?'}, shape={self.value.shape}, frozen={self.frozen})"


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, Parameter):
        return x.as_tensor()
    return Tensor(x, needs_grad=False)


def constant(data) -> Tensor:
    """Graph constant; never receives a gradient."""
    return Tensor(np.asarray(data, dtype=DEFAULT_DTYPE), needs_grad=False)


def _node(data, parents, backward, op: str) -> Tensor:
    if _check_finite and not np.all(np.isfinite(data)):
        raise NumericError(f"non-finite values produced by op '{op}'")
    return Tensor(data, parents=parents, backward=backward)


def _acc(t: Tensor, g) -> None:
    if not t._needs_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, s in enumerate(shape):
        if s == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(parameter) into every reachable Parameter's grad.

    loss must be scalar (size 1).  Gradients add onto whatever is already
    stored; call Parameter.zero_grad() (or an optimizer step) to reset.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.data.shape}")
    topo = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p._needs_grad:
                stack.append((p, False))
    _acc(loss, np.ones_like(loss.data))
    for node in reversed(topo):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(g, b.data.shape))

    return _node(out, (a, b), bwd, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bwd(g):
        _acc(a, _unbroadcast(g, a.data.shape))
        _acc(b, _unbroadcast(-g, b.data.shape))

    return _node(out, (a, b), bwd, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bwd(g):
        _acc(a, _unbroadcast(g * b.data, a.data.shape))
        _acc(b, _unbroadcast(g * a.data, b.data.shape))

    return _node(out, (a, b), bwd, "mul")


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul shapes do not agree: {a.data.shape} x {b.data.shape}")
    out = a.data @ b.data

    def bwd(g):
        _acc(a, g @ b.data.T)
        _acc(b, a.data.T @ g)

    return _node(out, (a, b), bwd, "matmul")


def affine(x, weight, bias) -> Tensor:
    """x[B,I] @ weight[I,O] + bias[O]."""
    x, w, b = as_tensor(x), as_tensor(weight), as_tensor(bias)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.data.shape[1] != w.data.shape[0]:
        raise ShapeError(f"affine shapes do not agree: input {x.data.shape}, weight {w.data.shape}")
    if b.data.shape != (w.data.shape[1],):
        raise ShapeError(f"affine bias shape {b.data.shape} does not match weight {w.data.shape}")
    out = x.data @ w.data + b.data

    def bwd(g):
        _acc(x, g @ w.data.T)
        _acc(w, x.data.T @ g)
        _acc(b, g.sum(axis=0))

    return _node(out, (x, w, b), bwd, "affine")


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    out = x.data.reshape(shape)

    def bwd(g):
        _acc(x, g.reshape(x.data.shape))

    return _node(out, (x,), bwd, "reshape")


def concat(tensors, axis: int = 1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(ts, np.split(g, splits, axis=axis)):
            _acc(t, piece)

    return _node(out, tuple(ts), bwd, "concat")


def sum_all(x) -> Tensor:
    x = as_tensor(x)
    out = np.asarray(x.data.sum())

    def bwd(g):
        _acc(x, np.broadcast_to(g, x.data.shape))

    return _node(out, (x,), bwd, "sum")


def mean_all(x) -> Tensor:
    x = as_tensor(x)
    n = x.data.size
    out = np.asarray(x.data.mean())

    def bwd(g):
        _acc(x, np.broadcast_to(g / n, x.data.shape))

    return _node(out, (x,), bwd, "mean")


# ---------------------------------------------------------------------------
# activations


def _sigmoid_values(x: np.ndarray) -> np.ndarray:
    # piecewise form avoids exp overflow for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    s = _sigmoid_values(x.data)

    def bwd(g):
        _acc(x, g * s * (1.0 - s))

    return _node(s, (x,), bwd, "sigmoid")


def tanh(x) -> Tensor:
    x = as_tensor(x)
    t = np.tanh(x.data)

    def bwd(g):
        _acc(x, g * (1.0 - t * t))

    return _node(t, (x,), bwd, "tanh")


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0.0)

    def bwd(g):
        _acc(x, g * (x.data > 0))

    return _node(out, (x,), bwd, "relu")


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "relu": relu}


def elementwise(kind: str, x) -> Tensor:
    """Apply one of sigmoid | tanh | relu by name."""
    try:
        return _ELEMENTWISE[kind](x)
    except KeyError:
        raise ShapeError(f"unknown elementwise kind '{kind}'") from None


def softmax(x) -> Tensor:
    """Row-wise softmax with max-subtraction; 1-D input is one row."""
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    p = e / e.sum(axis=-1, keepdims=True)

    def bwd(g):
        _acc(x, p * (g - (g * p).sum(axis=-1, keepdims=True)))

    return _node(p, (x,), bwd, "softmax")


def dropout(x, rate: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; call only in training mode."""
    x = as_tensor(x)
    keep = rng.random(x.data.shape) >= rate
    scale = 1.0 / (1.0 - rate)
    mask = keep * scale
    out = x.data * mask

    def bwd(g):
        _acc(x, g * mask)

    return _node(out, (x,), bwd, "dropout")


def detach(x) -> Tensor:
    """Copy of x's values with no graph history."""
    x = as_tensor(x)
    return Tensor(x.data.copy(), needs_grad=False)


# ---------------------------------------------------------------------------
# batch normalization


def batch_norm(x, gamma, beta, running_mean, running_var, training: bool,
               momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-feature batch normalization over rows of x[B,D].

    Training mode normalizes by the batch mean and biased variance and
    updates the running statistics in place; inference mode normalizes by
    the running statistics.  Training needs B >= 2.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.data.ndim != 2:
        raise ShapeError(f"batch_norm expects a 2-D input, got shape {x.data.shape}")
    if training:
        n = x.data.shape[0]
        if n < 2:
            raise DegenerateBatchError(f"batch_norm training mode needs at least 2 rows, got {n}")
        mu = x.data.mean(axis=0)
        var = x.data.var(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mu) * inv_std
        running_mean[...] = (1.0 - momentum) * running_mean + momentum * mu
        running_var[...] = (1.0 - momentum) * running_var + momentum * var
        out = gamma.data * xhat + beta.data

        def bwd(g):
            _acc(gamma, (g * xhat).sum(axis=0))
            _acc(beta, g.sum(axis=0))
            gx = (gamma.data * inv_std) * (
                g - g.mean(axis=0) - xhat * (g * xhat).mean(axis=0)
            )
            _acc(x, gx)

    else:
        inv_std = 1.0 / np.sqrt(running_var + eps)
        xhat = (x.data - running_mean) * inv_std
        out = gamma.data * xhat + beta.data

        def bwd(g):
            _acc(gamma, (g * xhat).sum(axis=0))
            _acc(beta, g.sum(axis=0))
            _acc(x, g * gamma.data * inv_std)

    return _node(out, (x, gamma, beta), bwd, "batch_norm")


# ---------------------------------------------------------------------------
# gathers


def embedding(table, indices) -> Tensor:
    """Row gather: out[i] = table[indices[i]]."""
    table = as_tensor(table)
    idx = np.asarray(indices, dtype=np.int64)
    out = table.data[idx]

    def bwd(g):
        if table._needs_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            np.add.at(table.grad, idx, g)

    return _node(out, (table,), bwd, "embedding")


def embedding_bag_mean(table, flat_indices, offsets) -> Tensor:
    """Mean of table rows per bag; bag b covers flat_indices[offsets[b]:offsets[b+1]].

    Every bag must be non-empty.
    """
    table = as_tensor(table)
    flat = np.asarray(flat_indices, dtype=np.int64)
    offs = np.asarray(offsets, dtype=np.int64)
    counts = np.diff(offs)
    if np.any(counts < 1):
        raise ShapeError("embedding_bag_mean: every bag needs at least one index")
    n_bags = len(counts)
    seg = np.repeat(np.arange(n_bags), counts)
    sums = np.zeros((n_bags, table.data.shape[1]), dtype=table.data.dtype)
    np.add.at(sums, seg, table.data[flat])
    out = sums / counts[:, None]

    def bwd(g):
        if table._needs_grad:
            if table.grad is None:
                table.grad = np.zeros_like(table.data)
            contrib = g[seg] / counts[seg][:, None]
            np.add.at(table.grad, flat, contrib)

    return _node(out, (table,), bwd, "embedding_bag_mean")


def pairwise_inner(fields) -> Tensor:
    """Inner products over all unordered pairs of field embeddings.

    fields: list of F tensors, each [B,E].  Output [B, F*(F-1)/2] with pair
    order (0,1), (0,2), ..., (F-2,F-1).
    """
    ts = [as_tensor(f) for f in fields]
    f_count = len(ts)
    if f_count < 2:
        raise ShapeError("pairwise_inner needs at least two fields")
    stacked = np.stack([t.data for t in ts], axis=1)  # [B,F,E]
    gram = np.einsum("bfe,bge->bfg", stacked, stacked)
    iu, ju = np.triu_indices(f_count, k=1)
    out = gram[:, iu, ju]

    def bwd(g):
        b = stacked.shape[0]
        w = np.zeros((b, f_count, f_count), dtype=stacked.dtype)
        w[:, iu, ju] = g
        w[:, ju, iu] = g
        gx = np.einsum("bfg,bge->bfe", w, stacked)
        for i, t in enumerate(ts):
            _acc(t, gx[:, i, :])

    return _node(out, tuple(ts), bwd, "pairwise_inner")


def take_rows(x, rows) -> Tensor:
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    out = x.data[rows]

    def bwd(g):
        if x._needs_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, rows, g)

    return _node(out, (x,), bwd, "take_rows")


def gather_columns(x, cols) -> Tensor:
    """out[:, k] = x[:, cols[k]] (duplicate columns allowed)."""
    x = as_tensor(x)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[:, cols]
    n_rows = x.data.shape[0]

    def bwd(g):
        if x._needs_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            rows = np.broadcast_to(np.arange(n_rows)[:, None], g.shape)
            cgrid = np.broadcast_to(cols[None, :], g.shape)
            np.add.at(x.grad, (rows, cgrid), g)

    return _node(out, (x,), bwd, "gather_columns")


def take_rc(x, rows, cols) -> Tensor:
    """1-D gather of x[rows[k], cols[k]]."""
    x = as_tensor(x)
    rows = np.asarray(rows, dtype=np.int64)
    cols = np.asarray(cols, dtype=np.int64)
    out = x.data[rows, cols]

    def bwd(g):
        if x._needs_grad:
            if x.grad is None:
                x.grad = np.zeros_like(x.data)
            np.add.at(x.grad, (rows, cols), g)

    return _node(out, (x,), bwd, "take_rc")


# ---------------------------------------------------------------------------
# initialization


def glorot_uniform(shape, rng: np.random.Generator, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Uniform in +-sqrt(6/(fan_in+fan_out)) over a 2-D shape."""
    fan_in, fan_out = shape[0], shape[1]
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)
