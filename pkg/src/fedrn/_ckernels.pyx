# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels mirroring ``fedrn._pykernels`` (same layout, same maths)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, fabs
from libc.stdlib cimport malloc, free
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

NAME = "cython"

cdef double LOG_2PI = 1.8378770664093453


cdef void _offsets(const Py_ssize_t[::1] dims, Py_ssize_t* woff, Py_ssize_t* boff) noexcept nogil:
    cdef Py_ssize_t l, pos = 0
    cdef Py_ssize_t L = dims.shape[0] - 1
    for l in range(L):
        woff[l] = pos
        pos += dims[l] * dims[l + 1]
        boff[l] = pos
        pos += dims[l + 1]


cdef void _forward_batch(const double* p, const Py_ssize_t[::1] dims, Py_ssize_t* woff,
                         Py_ssize_t* boff, Py_ssize_t* aoff, double* acts,
                         Py_ssize_t bsz) noexcept nogil:
    # acts holds every layer's activations, layer l at acts + aoff[l], row-major (bsz x dims[l]);
    # the last block receives softmax probabilities.  Row-major Z = A @ W is computed as the
    # column-major product Z^T = W^T A^T, so buffers are handed to BLAS without copies.
    cdef Py_ssize_t L = dims.shape[0] - 1
    cdef Py_ssize_t l, i, j
    cdef int din, dout, nb = <int> bsz
    cdef double one = 1.0
    cdef const double* B
    cdef double* Z
    cdef double s, m
    for l in range(L):
        din = <int> dims[l]
        dout = <int> dims[l + 1]
        B = p + boff[l]
        Z = acts + aoff[l + 1]
        for i in range(bsz):
            for j in range(dout):
                Z[i * dout + j] = B[j]
        dgemm("N", "N", &dout, &nb, &din, &one, <double*> (p + woff[l]), &dout,
              acts + aoff[l], &din, &one, Z, &dout)
        if l < L - 1:
            for j in range(bsz * dout):
                if Z[j] < 0.0:
                    Z[j] = 0.0
        else:
            for i in range(bsz):
                m = Z[i * dout]
                for j in range(1, dout):
                    if Z[i * dout + j] > m:
                        m = Z[i * dout + j]
                s = 0.0
                for j in range(dout):
                    Z[i * dout + j] = exp(Z[i * dout + j] - m)
                    s += Z[i * dout + j]
                for j in range(dout):
                    Z[i * dout + j] /= s


def forward_probs(const double[::1] flat, const Py_ssize_t[::1] dims, const double[:, ::1] X):
    cdef Py_ssize_t L = dims.shape[0] - 1
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t C = dims[L]
    cdef Py_ssize_t l, total = 0, start, bsz
    # fixed row chunks keep BLAS on its small-matrix path and the buffers in cache
    cdef Py_ssize_t chunk = 64
    cdef Py_ssize_t* woff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    cdef Py_ssize_t* boff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    cdef Py_ssize_t* aoff = <Py_ssize_t*> malloc((L + 1) * sizeof(Py_ssize_t))
    cdef double* acts
    cdef Py_ssize_t i, j
    out = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] o = out
    if n == 0:
        free(woff); free(boff); free(aoff)
        return out
    for l in range(L + 1):
        total += chunk * dims[l]
    acts = <double*> malloc(total * sizeof(double))
    with nogil:
        _offsets(dims, woff, boff)
        start = 0
        while start < n:
            bsz = min(chunk, n - start)
            total = 0
            for l in range(L + 1):
                aoff[l] = total
                total += bsz * dims[l]
            for i in range(bsz):
                for j in range(dims[0]):
                    acts[i * dims[0] + j] = X[start + i, j]
            _forward_batch(&flat[0], dims, woff, boff, aoff, acts, bsz)
            for i in range(bsz):
                for j in range(C):
                    o[start + i, j] = acts[aoff[L] + i * C + j]
            start += bsz
    free(acts); free(woff); free(boff); free(aoff)
    return out


def train_epochs(double[::1] flat, double[::1] velocity, const Py_ssize_t[::1] dims,
                 const double[:, ::1] X, const cnp.int64_t[::1] y, const cnp.int64_t[:, ::1] orders,
                 Py_ssize_t batch_size, double lr, double momentum,
                 Py_ssize_t first_trainable):
    cdef Py_ssize_t L = dims.shape[0] - 1
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t n_epochs = orders.shape[0]
    cdef Py_ssize_t P = flat.shape[0]
    cdef Py_ssize_t l, i, j, k, e, start, bsz, din, dout, total = 0, maxw = 0
    cdef Py_ssize_t* woff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    cdef Py_ssize_t* boff = <Py_ssize_t*> malloc(L * sizeof(Py_ssize_t))
    cdef Py_ssize_t* aoff = <Py_ssize_t*> malloc((L + 1) * sizeof(Py_ssize_t))
    cdef double* acts
    cdef double* grad
    cdef double* delta
    cdef double* dprev
    cdef double* tmp
    cdef double* p = &flat[0]
    cdef double* v = &velocity[0]
    cdef double* A
    cdef double* W
    cdef double* GB
    cdef double inv, one = 1.0, zero = 0.0
    cdef int idin, idout, ibsz
    for l in range(L + 1):
        aoff[l] = total
        total += batch_size * dims[l]
        if dims[l] > maxw:
            maxw = dims[l]
    acts = <double*> malloc(total * sizeof(double))
    grad = <double*> malloc(P * sizeof(double))
    delta = <double*> malloc(batch_size * maxw * sizeof(double))
    dprev = <double*> malloc(batch_size * maxw * sizeof(double))
    with nogil:
        _offsets(dims, woff, boff)
        for e in range(n_epochs):
            start = 0
            while start < n:
                bsz = batch_size
                if start + bsz > n:
                    bsz = n - start
                for i in range(bsz):
                    for j in range(dims[0]):
                        acts[i * dims[0] + j] = X[orders[e, start + i], j]
                _forward_batch(p, dims, woff, boff, aoff, acts, bsz)
                ibsz = <int> bsz
                dout = dims[L]
                inv = 1.0 / bsz
                for i in range(bsz):
                    for j in range(dout):
                        delta[i * dout + j] = acts[aoff[L] + i * dout + j]
                    delta[i * dout + y[orders[e, start + i]]] -= 1.0
                    for j in range(dout):
                        delta[i * dout + j] *= inv
                l = L - 1
                while l >= first_trainable:
                    din = dims[l]
                    dout = dims[l + 1]
                    idin = <int> din
                    idout = <int> dout
                    A = acts + aoff[l]
                    W = p + woff[l]
                    GB = grad + boff[l]
                    # GW^T = delta^T A (column-major view of row-major GW = A^T delta)
                    dgemm("N", "T", &idout, &idin, &ibsz, &one, delta, &idout, A, &idin,
                          &zero, grad + woff[l], &idout)
                    for j in range(dout):
                        GB[j] = 0.0
                    for i in range(bsz):
                        for j in range(dout):
                            GB[j] += delta[i * dout + j]
                    if l > first_trainable:
                        # dprev^T = W delta^T, then mask by the ReLU pattern
                        dgemm("T", "N", &idin, &ibsz, &idout, &one, W, &idout, delta, &idout,
                              &zero, dprev, &idin)
                        for k in range(bsz * din):
                            if A[k] <= 0.0:
                                dprev[k] = 0.0
                        tmp = delta
                        delta = dprev
                        dprev = tmp
                    l -= 1
                for k in range(woff[first_trainable], P):
                    v[k] = momentum * v[k] - lr * grad[k]
                    p[k] += v[k]
                start += batch_size
    free(acts); free(grad); free(delta); free(dprev)
    free(woff); free(boff); free(aoff)


cdef double _estep(const double* x, Py_ssize_t n, double* mu, double* var, double* w,
                   double* resp) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double c[2]
    cdef double lp[2]
    cdef double m, lse, d, ll = 0.0
    for k in range(2):
        if w[k] > 0.0:
            c[k] = log(w[k]) - 0.5 * (LOG_2PI + log(var[k]))
        else:
            c[k] = -1e308
    for i in range(n):
        for k in range(2):
            d = x[i] - mu[k]
            lp[k] = c[k] - d * d / (2.0 * var[k])
        m = lp[0] if lp[0] > lp[1] else lp[1]
        lse = m + log(exp(lp[0] - m) + exp(lp[1] - m))
        resp[2 * i] = exp(lp[0] - lse)
        resp[2 * i + 1] = exp(lp[1] - lse)
        ll += lse
    return ll


def em_fit(const double[::1] x, mu0, var0, w0, Py_ssize_t max_iters, double rel_tol,
           double var_floor):
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t i, k, it
    cdef double mu[2]
    cdef double var[2]
    cdef double w[2]
    cdef double nk[2]
    cdef double sx, sv, d, ll, ll_prev
    cdef double* resp = <double*> malloc(2 * n * sizeof(double))
    for k in range(2):
        mu[k] = mu0[k]
        var[k] = var0[k]
        w[k] = w0[k]
    history = []
    ll_prev = _estep(&x[0], n, mu, var, w, resp)
    history.append(ll_prev)
    for it in range(max_iters):
        with nogil:
            for k in range(2):
                nk[k] = 0.0
                sx = 0.0
                for i in range(n):
                    nk[k] += resp[2 * i + k]
                    sx += resp[2 * i + k] * x[i]
                if nk[k] > 1e-300:
                    mu[k] = sx / nk[k]
                    sv = 0.0
                    for i in range(n):
                        d = x[i] - mu[k]
                        sv += resp[2 * i + k] * d * d
                    var[k] = sv / nk[k]
                    if var[k] < var_floor:
                        var[k] = var_floor
            for k in range(2):
                w[k] = nk[k] / n
            ll = _estep(&x[0], n, mu, var, w, resp)
        history.append(ll)
        if ll - ll_prev < rel_tol * fabs(ll_prev):
            break
        ll_prev = ll
    free(resp)
    return (np.array([mu[0], mu[1]]), np.array([var[0], var[1]]),
            np.array([w[0], w[1]]), history)
