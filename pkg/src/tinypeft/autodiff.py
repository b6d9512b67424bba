"""Dense float64 tensors with tape-based reverse-mode differentiation.

Design constraints this module lives by:

* everything is 64-bit, row-major and contiguous; ops return fresh arrays
  (no aliased views feed the backward pass),
* recording happens only inside a ``with ComputeGraph() as g`` block, so
  evaluation code pays no tape overhead,
* the tape is already topologically ordered (execution order), and
  ``backward`` visits every recorded op exactly once in reverse, summing
  gradients where a tensor fans out.

Numerically heavy forward/backward rules are delegated to
:mod:`tinypeft.kernels`.
"""

from __future__ import annotations

import numpy as np

from . import kernels as K
from .errors import ContractError, DimensionError

_ACTIVE: "ComputeGraph | None" = None


class Tensor:
    """A dense float64 array plus an optional gradient buffer of the same shape."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a scalar tensor, shape is {self.shape}")
        return float(self.data.reshape(-1)[0])

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience operators used by tests and small scripts.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


class _Node:
    __slots__ = ("output", "backward")

    def __init__(self, output, backward):
        self.output = output
        self.backward = backward


class ComputeGraph:
    """Tape of recorded operations, in execution (hence topological) order."""

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self):
        global _ACTIVE
        self._prev = _ACTIVE
        _ACTIVE = self
        return self

    def __exit__(self, *exc):
        global _ACTIVE
        _ACTIVE = self._prev
        return False

    def __len__(self):
        return len(self._nodes)

    def backward(self, root: Tensor):
        """Accumulate d(root)/d(leaf) into .grad of every recorded leaf.

        root must be scalar; each recorded op's rule runs exactly once, in
        reverse recording order, so fan-out gradients sum correctly.
        """
        if root.size != 1:
            raise ContractError(f"backward needs a scalar root, shape is {root.shape}")
        root.grad = np.ones_like(root.data)
        for node in reversed(self._nodes):
            g = node.output.grad
            if g is None:
                continue
            node.backward(g)


def _record(out: Tensor, inputs, backward) -> Tensor:
    if _ACTIVE is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        _ACTIVE._nodes.append(_Node(out, backward))
    return out


def _accum(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g)
    else:
        t.grad += g


def clear_grads(tensors):
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data + b.data)

    def backward(g):
        _accum(a, g)
        _accum(b, g)

    return _record(out, (a, b), backward)


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """x[m,n] + b[n], broadcast over rows."""
    if x.ndim != 2 or b.ndim != 1 or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: shapes {x.shape} and {b.shape} incompatible")
    out = Tensor(x.data + b.data)

    def backward(g):
        _accum(x, g)
        _accum(b, g.sum(axis=0))

    return _record(out, (x, b), backward)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul: shapes {a.shape} and {b.shape} differ")
    out = Tensor(a.data * b.data)

    def backward(g):
        _accum(a, g * b.data)
        _accum(b, g * a.data)

    return _record(out, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    out = Tensor(a.data * c)

    def backward(g):
        _accum(a, g * c)

    return _record(out, (a,), backward)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: need 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dims disagree, {a.shape} x {b.shape}")
    out = Tensor(a.data @ b.data)

    def backward(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _record(out, (a, b), backward)


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose: need a 2-D tensor, got {a.shape}")
    out = Tensor(a.data.T.copy())

    def backward(g):
        _accum(a, g.T)

    return _record(out, (a,), backward)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    out = Tensor(a.data.reshape(shape).copy())

    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _record(out, (a,), backward)


def concat(parts, axis: int) -> Tensor:
    parts = list(parts)
    if not parts:
        raise DimensionError("concat: no operands")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            _accum(p, g[tuple(sl)])

    return _record(out, tuple(parts), backward)


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice of `length` entries along `axis`, as a copy."""
    if not (0 <= start and start + length <= a.shape[axis]):
        raise DimensionError(
            f"narrow: [{start}:{start + length}] out of range for axis {axis} of {a.shape}"
        )
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = Tensor(a.data[sl].copy())

    def backward(g):
        if a.requires_grad:
            gfull = np.zeros_like(a.data)
            gfull[sl] = g
            _accum(a, gfull)

    return _record(out, (a,), backward)


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row lookup table[ids]; the backward pass scatter-adds into the table.

    Scatter-add (rather than assignment) is what makes gradients of tied or
    repeated ids correct.
    """
    ids = np.asarray(ids, dtype=np.int64)
    if table.ndim != 2 or ids.ndim != 1:
        raise DimensionError(f"gather_rows: table {table.shape}, ids {ids.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise DimensionError("gather_rows: id out of range")
    out = Tensor(table.data[ids])

    def backward(g):
        if table.requires_grad:
            gt = np.zeros_like(table.data)
            K.scatter_add_rows(gt, ids, np.ascontiguousarray(g))
            _accum(table, gt)

    return _record(out, (table,), backward)


# ---------------------------------------------------------------------------
# nonlinearities and normalization


def relu(a: Tensor) -> Tensor:
    out = Tensor(np.maximum(a.data, 0.0))
    pos = a.data > 0

    def backward(g):
        _accum(a, g * pos)

    return _record(out, (a,), backward)


def dropout(x: Tensor, p: float, rng=None, training: bool = False) -> Tensor:
    """Inverted dropout: scales kept entries by 1/(1-p) so eval is identity.

    In eval mode (or p == 0) the input tensor is returned unchanged,
    bit-exactly. A seeded ``rng`` is required when dropout actually fires.
    """
    if not training or p == 0.0:
        return x
    if not (0.0 <= p < 1.0):
        raise ContractError(f"dropout: p must be in [0,1), got {p}")
    if rng is None:
        raise ContractError("dropout: training mode needs an rng")
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    out = Tensor(x.data * keep)

    def backward(g):
        _accum(x, g * keep)

    return _record(out, (x,), backward)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-6) -> Tensor:
    """Row-wise layer normalization with learned scale and shift."""
    if x.ndim != 2 or gamma.shape != (x.shape[1],) or beta.shape != (x.shape[1],):
        raise DimensionError(
            f"layer_norm: x {x.shape}, gamma {gamma.shape}, beta {beta.shape}"
        )
    y, xhat, rstd = K.layernorm_fwd(x.data, gamma.data, beta.data, eps)
    out = Tensor(y)

    def backward(g):
        gx, ggamma, gbeta = K.layernorm_bwd(g, xhat, rstd, gamma.data)
        _accum(x, gx)
        _accum(gamma, ggamma)
        _accum(beta, gbeta)

    return _record(out, (x, gamma, beta), backward)


def softmax_rows(x: Tensor) -> Tensor:
    """Row softmax with max-subtraction stabilization; rows sum to 1."""
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: need a 2-D tensor, got {x.shape}")
    y = K.softmax_rows_fwd(x.data)
    out = Tensor(y)

    def backward(g):
        _accum(x, K.softmax_rows_bwd(y, g))

    return _record(out, (x,), backward)


def cross_entropy_logits(logits: Tensor, targets, ignore_id: int):
    """Summed token cross entropy over rows whose target is not `ignore_id`.

    Returns (scalar loss-sum tensor, number of counted rows); callers divide
    by the count to get the mean.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != (logits.shape[0],):
        raise DimensionError(
            f"cross_entropy_logits: logits {logits.shape}, targets {targets.shape}"
        )
    loss_sum, probs, n_valid = K.cross_entropy_fwd(logits.data, targets, ignore_id)
    out = Tensor(loss_sum)

    def backward(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        _accum(logits, K.cross_entropy_bwd(probs, targets, ignore_id, gs))

    return _record(out, (logits,), backward), n_valid


def sum_all(a: Tensor) -> Tensor:
    out = Tensor(a.data.sum())

    def backward(g):
        gs = float(np.asarray(g).reshape(-1)[0])
        _accum(a, np.full_like(a.data, gs))

    return _record(out, (a,), backward)


def mean_all(a: Tensor) -> Tensor:
    return scale(sum_all(a), 1.0 / a.size)


def lowrank_delta(e: Tensor, w_down: Tensor, w_up: Tensor, use_relu: bool) -> Tensor:
    """Fused residual-adapter delta f(e @ w_down) @ w_up.

    The forward kernel computes each row independently of the number of rows,
    which is what makes "apply to a gathered sequence" and "apply to the whole
    embedding table, then gather" bitwise interchangeable.
    """
    if e.ndim != 2 or e.shape[1] != w_down.shape[0] or w_down.shape[1] != w_up.shape[0] \
            or w_up.shape[1] != e.shape[1]:
        raise DimensionError(
            f"lowrank_delta: e {e.shape}, w_down {w_down.shape}, w_up {w_up.shape}"
        )
    delta, hidden_pre = K.lowrank_delta_fwd(e.data, w_down.data, w_up.data, use_relu)
    out = Tensor(delta)

    def backward(g):
        hidden = np.maximum(hidden_pre, 0.0) if use_relu else hidden_pre
        _accum(w_up, hidden.T @ g)
        gh = g @ w_up.data.T
        if use_relu:
            gh = gh * (hidden_pre > 0)
        _accum(e, gh @ w_down.data.T)
        _accum(w_down, e.data.T @ gh)

    return _record(out, (e, w_down, w_up), backward)


# ---------------------------------------------------------------------------
# verification oracle


def grad_check(f, params, h: float = 1e-5) -> float:
    """Compare tape gradients of scalar f() against central finite differences.

    Returns the worst relative error
    |autodiff - central| / max(1e-8, |autodiff| + |central|) over every entry
    of every tensor in `params`. f must be deterministic across calls (no
    live dropout) and twice differentiable at the current parameter values.
    """
    if h <= 0:
        raise ContractError(f"grad_check: h must be positive, got {h}")
    for p in params:
        p.zero_grad()
    with ComputeGraph() as g:
        out = f()
        if out.size != 1:
            raise ContractError(f"grad_check: f must be scalar, got shape {out.shape}")
        g.backward(out)
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]
    worst = 0.0
    for p, a in zip(params, analytic):
        flat = p.data.reshape(-1)
        aflat = a.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f().item()
            flat[i] = orig - h
            fm = f().item()
            flat[i] = orig
            fd = (fp - fm) / (2.0 * h)
            err = abs(aflat[i] - fd) / max(1e-8, abs(aflat[i]) + abs(fd))
            worst = max(worst, err)
    return worst
