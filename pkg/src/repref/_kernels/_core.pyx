# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled implementations of the hot kernels.

Same functions and semantics as `_numpy_ref`; the win is fused C loops for
the small-matrix training steps (no per-op dispatch overhead) and direct
per-sample loops for FIR filtering and polyphase resampling. float32 and
float64 paths are generated from one fused-type source so the training
kernels and the float64 gradient-check oracle share code.
"""

import numpy as np

cimport cython
cimport numpy as cnp
from libc.math cimport exp, fabs, log, log1p, sqrt

name = "compiled"

ctypedef fused floating:
    float
    double


# ---------------------------------------------------------------------------
# signal kernels
# ---------------------------------------------------------------------------


def fir_convolve(x, taps):
    """Full linear convolution (length n + t - 1), float64."""
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] tv = np.ascontiguousarray(taps, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], t = tv.shape[0]
    out_arr = np.zeros(n + t - 1, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, k
    cdef double xi
    with nogil:
        for i in range(n):
            xi = xv[i]
            if xi != 0.0:
                for k in range(t):
                    out[i + k] += xi * tv[k]
    return out_arr


def polyphase_resample(x, up, down, filt):
    """Rate conversion by up/down against a centered windowed-sinc prototype;
    matches the numpy backend's correlation form exactly."""
    cdef double[::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef double[::1] fv = np.ascontiguousarray(filt, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0]
    cdef Py_ssize_t n_taps = fv.shape[0]
    cdef Py_ssize_t up_c = up, down_c = down
    cdef Py_ssize_t center = (n_taps - 1) // 2
    # ceil(n * up / down) with all-positive operands (C division truncates)
    cdef Py_ssize_t n_out = (n * up_c + down_c - 1) // down_c
    out_arr = np.zeros(n_out, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t j, k, k0, src, t0
    cdef double acc
    with nogil:
        for j in range(n_out):
            t0 = j * down_c - center
            k0 = (-t0) % up_c
            if k0 < 0:
                k0 += up_c
            acc = 0.0
            k = k0
            while k < n_taps:
                src = (t0 + k) // up_c
                if 0 <= src < n:
                    acc += fv[k] * xv[src]
                k += up_c
            out[j] = acc
    return out_arr


# ---------------------------------------------------------------------------
# dense primitives (fused float32/float64)
# ---------------------------------------------------------------------------


cdef void _gemm(floating[:, ::1] a, floating[:, ::1] b,
                floating[:, ::1] out) noexcept nogil:
    # out = a @ b, ikj order for contiguous inner access
    cdef Py_ssize_t n = a.shape[0], kk = a.shape[1], m = b.shape[1]
    cdef Py_ssize_t i, k, j
    cdef floating aik
    for i in range(n):
        for j in range(m):
            out[i, j] = 0
        for k in range(kk):
            aik = a[i, k]
            if aik != 0:
                for j in range(m):
                    out[i, j] += aik * b[k, j]


cdef void _gemm_at(floating[:, ::1] a, floating[:, ::1] dz,
                   floating[:, ::1] out) noexcept nogil:
    # out = a.T @ dz  (parameter gradients)
    cdef Py_ssize_t n = a.shape[0], kk = a.shape[1], m = dz.shape[1]
    cdef Py_ssize_t i, k, j
    cdef floating aik
    for k in range(kk):
        for j in range(m):
            out[k, j] = 0
    for i in range(n):
        for k in range(kk):
            aik = a[i, k]
            if aik != 0:
                for j in range(m):
                    out[k, j] += aik * dz[i, j]


cdef void _gemm_bt(floating[:, ::1] dz, floating[:, ::1] w,
                   floating[:, ::1] out) noexcept nogil:
    # out = dz @ w.T  (activation gradients)
    cdef Py_ssize_t n = dz.shape[0], m = dz.shape[1], kk = w.shape[0]
    cdef Py_ssize_t i, k, j
    cdef floating acc
    for i in range(n):
        for k in range(kk):
            acc = 0
            for j in range(m):
                acc += dz[i, j] * w[k, j]
            out[i, k] = acc


cdef void _add_bias(floating[:, ::1] z, floating[::1] bias) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            z[i, j] += bias[j]


cdef _alloc(floating zero, shape):
    return np.empty(shape, dtype=np.float32 if floating is float
                    else np.float64)


cdef _forward_impl(floating zero, list weights, list biases, x):
    cdef floating[:, ::1] av, wv, zv
    cdef floating[::1] bv
    cdef Py_ssize_t li, i, j
    a = np.ascontiguousarray(x)
    cdef Py_ssize_t last = len(weights) - 1
    for li in range(len(weights)):
        w = weights[li]
        z = _alloc(zero, (a.shape[0], w.shape[1]))
        av = a
        wv = w
        zv = z
        bv = biases[li]
        with nogil:
            _gemm(av, wv, zv)
            _add_bias(zv, bv)
            if li != last:
                for i in range(zv.shape[0]):
                    for j in range(zv.shape[1]):
                        if zv[i, j] < 0:
                            zv[i, j] = 0
        a = z
    return a


def forward_logits(weights, biases, x):
    """Affine/ReLU stack (ReLU between layers, none after the last)."""
    x = np.ascontiguousarray(x)
    if x.dtype == np.float32:
        return _forward_impl(<float> 0, list(weights), list(biases), x)
    return _forward_impl(<double> 0, list(weights), list(biases), x)


cdef double _multiclass_grad(floating[:, ::1] logits, long long[::1] targets,
                             floating[:, ::1] dlogits) noexcept nogil:
    # softmax cross-entropy, mean over the batch; returns the loss
    cdef Py_ssize_t b = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double zmax, sumexp, loss = 0.0
    cdef floating invb = <floating> (1.0 / b)
    for i in range(b):
        zmax = logits[i, 0]
        for j in range(1, c):
            if logits[i, j] > zmax:
                zmax = logits[i, j]
        sumexp = 0.0
        for j in range(c):
            sumexp += exp(<double> logits[i, j] - zmax)
        loss += zmax + log(sumexp) - <double> logits[i, targets[i]]
        for j in range(c):
            dlogits[i, j] = <floating> (exp(<double> logits[i, j] - zmax)
                                        / sumexp)
        dlogits[i, targets[i]] -= 1
        for j in range(c):
            dlogits[i, j] *= invb
    return loss / b


cdef double _multilabel_grad(floating[:, ::1] logits, floating[:, ::1] targets,
                             floating[:, ::1] dlogits) noexcept nogil:
    # per-element sigmoid BCE, mean over batch x labels; returns the loss
    cdef Py_ssize_t b = logits.shape[0], c = logits.shape[1]
    cdef Py_ssize_t i, j
    cdef double z, sig, loss = 0.0
    cdef floating inv = <floating> (1.0 / (b * c))
    for i in range(b):
        for j in range(c):
            z = <double> logits[i, j]
            loss += (z if z > 0 else 0.0) - z * <double> targets[i, j] \
                + log1p(exp(-fabs(z)))
            if z >= 0:
                sig = 1.0 / (1.0 + exp(-z))
            else:
                sig = exp(z) / (1.0 + exp(z))
            dlogits[i, j] = (<floating> sig - targets[i, j]) * inv
    return loss / (b * c)


cdef _loss_and_grads_impl(floating zero, list weights, list biases, x,
                          targets, str task_kind, dropout_masks):
    cdef Py_ssize_t n_layers = len(weights)
    cdef Py_ssize_t li, i, j
    cdef floating[:, ::1] av, wv, zv, hv, dzv, dav, dwv, mv
    cdef floating[::1] bv, dbv
    cdef long long[::1] tgt_i
    cdef floating[:, ::1] tgt_f
    cdef double loss

    # forward, caching inputs and pre-activations
    acts = [np.ascontiguousarray(x)]
    zs = []
    a = acts[0]
    for li in range(n_layers):
        w = weights[li]
        z = _alloc(zero, (a.shape[0], w.shape[1]))
        av = a
        wv = w
        zv = z
        bv = biases[li]
        with nogil:
            _gemm(av, wv, zv)
            _add_bias(zv, bv)
        zs.append(z)
        if li != n_layers - 1:
            h = _alloc(zero, (z.shape[0], z.shape[1]))
            hv = h
            with nogil:
                _relu_copy(zv, hv)
            if dropout_masks is not None:
                mv = dropout_masks[li]
                with nogil:
                    _mul_inplace(hv, mv)
            acts.append(h)
            a = h

    logits = zs[n_layers - 1]
    dlogits = _alloc(zero, (logits.shape[0], logits.shape[1]))
    zv = logits
    dzv = dlogits
    if task_kind == "multilabel":
        tgt_f = targets
        with nogil:
            loss = _multilabel_grad(zv, tgt_f, dzv)
    else:
        tgt_i = np.ascontiguousarray(targets, dtype=np.int64)
        with nogil:
            loss = _multiclass_grad(zv, tgt_i, dzv)

    dweights = [None] * n_layers
    dbiases = [None] * n_layers
    dz = dlogits
    for li in range(n_layers - 1, -1, -1):
        a = acts[li]
        w = weights[li]
        dw = _alloc(zero, (w.shape[0], w.shape[1]))
        db = _alloc(zero, (w.shape[1],))
        av = a
        dzv = dz
        dwv = dw
        dbv = db
        with nogil:
            _gemm_at(av, dzv, dwv)
            _col_sums(dzv, dbv)
        dweights[li] = dw
        dbiases[li] = db
        if li > 0:
            da = _alloc(zero, (dz.shape[0], w.shape[0]))
            dav = da
            wv = w
            with nogil:
                _gemm_bt(dzv, wv, dav)
            if dropout_masks is not None:
                mv = dropout_masks[li - 1]
                with nogil:
                    _mul_inplace(dav, mv)
            zv = zs[li - 1]
            with nogil:
                _relu_gate(dav, zv)
            dz = da
    return loss, dweights, dbiases


cdef void _relu_copy(floating[:, ::1] z, floating[:, ::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(z.shape[0]):
        for j in range(z.shape[1]):
            out[i, j] = z[i, j] if z[i, j] > 0 else 0


cdef void _mul_inplace(floating[:, ::1] a, floating[:, ::1] b) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            a[i, j] *= b[i, j]


cdef void _relu_gate(floating[:, ::1] da, floating[:, ::1] z) noexcept nogil:
    cdef Py_ssize_t i, j
    for i in range(da.shape[0]):
        for j in range(da.shape[1]):
            if z[i, j] <= 0:
                da[i, j] = 0


cdef void _col_sums(floating[:, ::1] dz, floating[::1] out) noexcept nogil:
    cdef Py_ssize_t i, j
    for j in range(dz.shape[1]):
        out[j] = 0
    for i in range(dz.shape[0]):
        for j in range(dz.shape[1]):
            out[j] += dz[i, j]


def loss_and_grads(weights, biases, x, targets, task_kind, dropout_masks=None):
    """Fused forward + backward; see the numpy backend for the contract."""
    x = np.ascontiguousarray(x)
    masks = None if dropout_masks is None else \
        [np.ascontiguousarray(m, dtype=x.dtype) for m in dropout_masks]
    if x.dtype == np.float32:
        if task_kind == "multilabel":
            targets = np.ascontiguousarray(targets, dtype=np.float32)
        return _loss_and_grads_impl(<float> 0, list(weights), list(biases),
                                    x, targets, task_kind, masks)
    if task_kind == "multilabel":
        targets = np.ascontiguousarray(targets, dtype=np.float64)
    return _loss_and_grads_impl(<double> 0, list(weights), list(biases),
                                x, targets, task_kind, masks)


cdef void _adam1d(floating[::1] p, floating[::1] g, floating[::1] m,
                  floating[::1] v, double b1t, double b2t, double lr,
                  double beta1, double beta2, double eps, double wd) noexcept nogil:
    cdef Py_ssize_t i
    cdef floating fb1 = <floating> beta1, fb2 = <floating> beta2
    cdef floating f1m = <floating> (1.0 - beta1), f2m = <floating> (1.0 - beta2)
    cdef floating fb1t = <floating> b1t, fb2t = <floating> b2t
    cdef floating flr = <floating> lr, feps = <floating> eps
    cdef floating fwd = <floating> wd
    cdef floating mhat, vhat, upd
    for i in range(p.shape[0]):
        m[i] = fb1 * m[i] + f1m * g[i]
        v[i] = fb2 * v[i] + f2m * (g[i] * g[i])
        mhat = m[i] / fb1t
        vhat = v[i] / fb2t
        upd = mhat / (<floating> sqrt(<double> vhat) + feps)
        if fwd != 0:
            upd += fwd * p[i]
        p[i] -= flr * upd


def adam_step(params, grads, m, v, t, double lr, double beta1,
              double beta2, double eps, double wd):
    """One Adam update with decoupled weight decay, in place over the lists."""
    cdef double b1t = 1.0 - beta1 ** t
    cdef double b2t = 1.0 - beta2 ** t
    cdef float[::1] pf, gf, mf, vf
    cdef double[::1] pd, gd, md, vd
    for p_arr, g_arr, m_arr, v_arr in zip(params, grads, m, v):
        g_arr = np.ascontiguousarray(g_arr, dtype=p_arr.dtype)
        if p_arr.dtype == np.float32:
            pf = p_arr.reshape(-1)
            gf = g_arr.reshape(-1)
            mf = m_arr.reshape(-1)
            vf = v_arr.reshape(-1)
            with nogil:
                _adam1d[float](pf, gf, mf, vf, b1t, b2t, lr, beta1, beta2,
                               eps, wd)
        else:
            pd = p_arr.reshape(-1)
            gd = g_arr.reshape(-1)
            md = m_arr.reshape(-1)
            vd = v_arr.reshape(-1)
            with nogil:
                _adam1d[double](pd, gd, md, vd, b1t, b2t, lr, beta1, beta2,
                                eps, wd)
