"""Pure-numpy implementations of the hot training kernels.

This is the fallback backend; `mrnadistill._kernels_c` provides the same
functions as a compiled extension.  Only kernels where C fusion actually
wins live here: layer norm (fused row reductions), the AdamW update
(one pass instead of eight), and the embedding gradient scatter
(np.add.at is an order of magnitude slower than a C loop).  Matmuls stay
on BLAS and transcendentals on numpy's SIMD loops in both backends.

All functions preserve the dtype of their float inputs (float32 or
float64) and treat 2-D inputs as (rows, features).
"""

from __future__ import annotations

import numpy as np


def layer_norm_forward(x, gain, bias, eps):
    """Normalize each row to zero mean / unit variance, then scale+shift.

    Returns (y, mean, rstd); mean and rstd are kept for the backward pass.
    """
    mean = x.mean(axis=1)
    var = x.var(axis=1)
    rstd = 1.0 / np.sqrt(var + np.asarray(eps, dtype=x.dtype))
    xhat = (x - mean[:, None]) * rstd[:, None]
    y = xhat * gain + bias
    return y.astype(x.dtype, copy=False), mean.astype(x.dtype, copy=False), rstd.astype(x.dtype, copy=False)


def layer_norm_backward(dy, x, gain, mean, rstd):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dbias = dy.sum(axis=0)
    dgain = (dy * xhat).sum(axis=0)
    dxhat = dy * gain
    # per-row: dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = rstd[:, None] * (dxhat - m1 - xhat * m2)
    return dx.astype(x.dtype, copy=False), dgain, dbias


def adamw_update(param, grad, m, v, step, lr, beta1, beta2, eps, weight_decay):
    """One AdamW step with bias correction and decoupled decay, in place."""
    dt = param.dtype
    b1 = np.asarray(beta1, dtype=dt)
    b2 = np.asarray(beta2, dtype=dt)
    m *= b1
    m += (1.0 - b1) * grad
    v *= b2
    v += (1.0 - b2) * grad * grad
    mhat = m / np.asarray(1.0 - beta1**step, dtype=dt)
    vhat = v / np.asarray(1.0 - beta2**step, dtype=dt)
    param -= np.asarray(lr, dtype=dt) * (
        mhat / (np.sqrt(vhat) + np.asarray(eps, dtype=dt))
        + np.asarray(weight_decay, dtype=dt) * param
    )


def embedding_grad(ids, dy, dtable):
    """Scatter-add rows of dy into dtable at positions ids, in place."""
    np.add.at(dtable, ids, dy)
