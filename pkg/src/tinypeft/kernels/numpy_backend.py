"""Pure-numpy kernel implementations.

This is both the import-time fallback when the compiled extension is not
available and the reference the compiled kernels are tested against.

`lowrank_delta_fwd` must compute each output row independently of how many
rows the input has ("row-stable"): the residual-adapter bake path applies
the same map to a whole vocabulary table and relies on bitwise agreement
with the per-sequence path. BLAS matmul does not guarantee that (its
blocking depends on the matrix height), so this kernel goes through
`np.einsum(optimize=False)`, which reduces every output element with a
fixed summation order.
"""

import numpy as np


def softmax_rows_fwd(x):
    shifted = x - x.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows_bwd(y, gy):
    inner = (gy * y).sum(axis=1, keepdims=True)
    return y * (gy - inner)


def layernorm_fwd(x, gamma, beta, eps):
    mean = x.mean(axis=1, keepdims=True)
    centered = x - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = centered * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def layernorm_bwd(gy, xhat, rstd, gamma):
    gxhat = gy * gamma
    ggamma = (gy * xhat).sum(axis=0)
    gbeta = gy.sum(axis=0)
    m1 = gxhat.mean(axis=1, keepdims=True)
    m2 = (gxhat * xhat).mean(axis=1, keepdims=True)
    gx = rstd[:, None] * (gxhat - m1 - xhat * m2)
    return gx, ggamma, gbeta


def cross_entropy_fwd(logits, targets, ignore_id):
    """Sum of -log softmax(logits)[i, targets[i]] over rows with a real target.

    Returns (loss_sum, probs, n_valid); probs rows are computed for every
    position (cheap at this scale and needed by the backward pass).
    """
    shifted = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    z = e.sum(axis=1, keepdims=True)
    probs = e / z
    valid = targets != ignore_id
    n_valid = int(valid.sum())
    rows = np.nonzero(valid)[0]
    logp = shifted[rows, targets[rows]] - np.log(z[rows, 0])
    return -logp.sum(), probs, n_valid


def cross_entropy_bwd(probs, targets, ignore_id, gscale):
    glogits = probs.copy()
    rows = np.arange(len(targets))
    glogits[rows, np.where(targets == ignore_id, 0, targets)] -= 1.0
    glogits *= gscale
    glogits[targets == ignore_id] = 0.0
    return glogits


def scatter_add_rows(acc, ids, rows):
    np.add.at(acc, ids, rows)


def lowrank_delta_fwd(e, w_down, w_up, relu):
    hidden = np.einsum("ik,kr->ir", e, w_down, optimize=False)
    hidden_pre = hidden
    if relu:
        hidden = np.maximum(hidden, 0.0)
    delta = np.einsum("ir,rk->ik", hidden, w_up, optimize=False)
    return delta, hidden_pre
