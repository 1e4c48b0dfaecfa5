"""Numpy implementations of the hot kernels.

This is the fallback backend used when the compiled extension is not
available. Both backends expose the exact same functions with the same
semantics; `tests/test_kernels.py` cross-checks them on random inputs.

Dtype policy: all kernels follow the dtype of their inputs (float32 for
training compute, float64 for oracle/gradient-check paths).
"""

from __future__ import annotations

import numpy as np

name = "numpy"


# ---------------------------------------------------------------------------
# signal kernels
# ---------------------------------------------------------------------------

def fir_convolve(x, taps):
    """Full linear convolution of ``x`` with ``taps`` (length n + t - 1)."""
    return np.convolve(np.asarray(x, dtype=np.float64),
                       np.asarray(taps, dtype=np.float64))


def polyphase_resample(x, up, down, filt):
    """Rate conversion by ``up/down`` with the given FIR prototype.

    ``filt`` is the windowed-sinc prototype designed for the upsampled rate;
    the kernel computes y[j] = sum_k filt[k] * xup[j*down - k + offset] where
    xup is x zero-stuffed by ``up`` and offset centres the filter's group
    delay, without materializing xup. Output length is ceil(len(x)*up/down).
    """
    x = np.asarray(x, dtype=np.float64)
    filt = np.asarray(filt, dtype=np.float64)
    n = x.shape[0]
    n_taps = filt.shape[0]
    center = (n_taps - 1) // 2
    n_out = -(-n * up // down)  # ceil

    j = np.arange(n_out)
    # index of the first upsampled sample under the filter, centred
    t0 = j * down - center
    # upsampled index hit by tap k is t0 + k; only multiples of `up` are
    # nonzero, i.e. k = (-t0) mod up, then strides of `up`
    k0 = (-t0) % up
    n_hits = (n_taps - k0 + up - 1) // up
    max_hits = int(n_hits.max()) if n_out else 0

    h = np.arange(max_hits)
    k = k0[:, None] + h[None, :] * up                # tap indices
    src = (t0[:, None] + k) // up                    # source sample indices
    valid = (k < n_taps) & (src >= 0) & (src < n)
    k = np.where(valid, k, 0)
    src = np.where(valid, src, 0)
    return np.einsum("ij,ij->i", filt[k] * valid, x[src])


# ---------------------------------------------------------------------------
# probe kernels
# ---------------------------------------------------------------------------

def forward_logits(weights, biases, x):
    """Affine/ReLU stack: ReLU between layers, none after the last."""
    a = x
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        a = a @ w + b
        if i != last:
            a = np.maximum(a, 0)
    return a


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def loss_and_grads(weights, biases, x, targets, task_kind, dropout_masks=None):
    """Fused forward + backward pass.

    targets: int class indices [B] for multiclass, {0,1} matrix [B, L]
    (same dtype as x) for multilabel. dropout_masks, when given, is one
    already-scaled mask per hidden layer (inverted dropout).

    Returns (loss, dweights, dbiases) with mean reduction over the batch
    (and over labels for multilabel).
    """
    n_layers = len(weights)
    batch = x.shape[0]
    dtype = x.dtype

    # forward, caching pre-activations
    acts = [x]
    zs = []
    a = x
    for i, (w, b) in enumerate(zip(weights, biases)):
        z = a @ w + b
        zs.append(z)
        if i != n_layers - 1:
            a = np.maximum(z, 0)
            if dropout_masks is not None:
                a = a * dropout_masks[i]
            acts.append(a)
    logits = zs[-1]

    if task_kind == "multilabel":
        # stable BCE: max(x,0) - x*t + log1p(exp(-|x|)), mean over B and L
        per = (np.maximum(logits, 0) - logits * targets
               + np.log1p(np.exp(-np.abs(logits))))
        loss = float(per.mean())
        dlogits = (_sigmoid(logits) - targets) / np.asarray(per.size, dtype)
    else:
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        idx = np.arange(batch)
        loss = float((lse - logits[idx, targets]).mean())
        dlogits = _softmax(logits)
        dlogits[idx, targets] -= 1
        dlogits /= np.asarray(batch, dtype)
        dlogits = dlogits.astype(dtype, copy=False)

    dweights = [None] * n_layers
    dbiases = [None] * n_layers
    dz = dlogits
    for i in range(n_layers - 1, -1, -1):
        dweights[i] = acts[i].T @ dz
        dbiases[i] = dz.sum(axis=0)
        if i > 0:
            da = dz @ weights[i].T
            if dropout_masks is not None:
                da = da * dropout_masks[i - 1]
            dz = da * (zs[i - 1] > 0)
    return loss, dweights, dbiases


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def adam_step(params, grads, m, v, t, lr, beta1, beta2, eps, wd):
    """One Adam update with decoupled weight decay, in place over the lists.

    The decay term uses the pre-update parameter value:
    p <- p - lr * (mhat / (sqrt(vhat) + eps) + wd * p).
    """
    b1t = 1.0 - beta1 ** t
    b2t = 1.0 - beta2 ** t
    for p, g, mi, vi in zip(params, grads, m, v):
        dtype = p.dtype.type
        mi *= dtype(beta1)
        mi += dtype(1 - beta1) * g
        vi *= dtype(beta2)
        vi += dtype(1 - beta2) * (g * g)
        mhat = mi / dtype(b1t)
        vhat = vi / dtype(b2t)
        upd = mhat / (np.sqrt(vhat) + dtype(eps))
        if wd:
            upd += dtype(wd) * p
        p -= dtype(lr) * upd
