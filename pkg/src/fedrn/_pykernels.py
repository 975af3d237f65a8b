"""Numpy reference kernels.

Parameters of a dense network live in one flat float64 buffer; ``dims`` gives
the layer widths ``[d0, d1, ..., dL]``.  Layer ``l`` stores its weight matrix
(``dims[l] x dims[l+1]``, row-major) followed by its bias.  Every layer but
the last applies ReLU; the last feeds a softmax.

The compiled extension exposes the same three functions with the same
signatures, and ``fedrn._backend`` picks one at import time.
"""

import math

import numpy as np

NAME = "python"

_LOG_2PI = math.log(2.0 * math.pi)


def _views(flat, dims):
    out = []
    pos = 0
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        w = flat[pos:pos + d_in * d_out].reshape(d_in, d_out)
        pos += d_in * d_out
        b = flat[pos:pos + d_out]
        pos += d_out
        out.append((w, b))
    return out


def _softmax_rows(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def forward_probs(flat, dims, X):
    a = X
    layers = _views(flat, dims)
    for w, b in layers[:-1]:
        a = np.maximum(a @ w + b, 0.0)
    w, b = layers[-1]
    return _softmax_rows(a @ w + b)


def train_epochs(flat, velocity, dims, X, y, orders, batch_size, lr, momentum,
                 first_trainable):
    """Mini-batch SGD with classical momentum, updating ``flat`` in place.

    ``orders`` is an ``(epochs, n)`` array of example permutations.  Layers
    below ``first_trainable`` are frozen (forward only).
    """
    layers = _views(flat, dims)
    vel = _views(velocity, dims)
    n_layers = len(layers)
    n = X.shape[0]
    for order in orders:
        for start in range(0, n, batch_size):
            idx = order[start:start + batch_size]
            xb = X[idx]
            yb = y[idx]
            bsz = xb.shape[0]
            acts = [xb]
            for w, b in layers[:-1]:
                acts.append(np.maximum(acts[-1] @ w + b, 0.0))
            w, b = layers[-1]
            delta = _softmax_rows(acts[-1] @ w + b)
            delta[np.arange(bsz), yb] -= 1.0
            delta /= bsz
            grads = [None] * n_layers
            for l in range(n_layers - 1, first_trainable - 1, -1):
                w, _ = layers[l]
                grads[l] = (acts[l].T @ delta, delta.sum(axis=0))
                if l > first_trainable:
                    delta = (delta @ w.T) * (acts[l] > 0.0)
            for l in range(first_trainable, n_layers):
                (w, b), (vw, vb), (gw, gb) = layers[l], vel[l], grads[l]
                vw *= momentum
                vw -= lr * gw
                vb *= momentum
                vb -= lr * gb
                w += vw
                b += vb


def _estep(x, mu, var, w):
    with np.errstate(divide="ignore"):
        logw = np.log(w)
    logp = (logw - 0.5 * (_LOG_2PI + np.log(var)))[None, :] \
        - (x[:, None] - mu[None, :]) ** 2 / (2.0 * var[None, :])
    m = logp.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(logp - m).sum(axis=1))
    resp = np.exp(logp - lse[:, None])
    return resp, float(lse.sum())


def em_fit(x, mu, var, w, max_iters, rel_tol, var_floor):
    """Two-component 1-D EM.  Returns ``(mu, var, w, loglik_history)``."""
    x = np.asarray(x, dtype=np.float64)
    mu = np.array(mu, dtype=np.float64)
    var = np.array(var, dtype=np.float64)
    w = np.array(w, dtype=np.float64)
    n = x.shape[0]
    resp, ll_prev = _estep(x, mu, var, w)
    history = [ll_prev]
    for _ in range(max_iters):
        nk = resp.sum(axis=0)
        for k in range(2):
            if nk[k] > 1e-300:
                mu[k] = (resp[:, k] @ x) / nk[k]
                var[k] = max((resp[:, k] @ (x - mu[k]) ** 2) / nk[k], var_floor)
        w = nk / n
        resp, ll = _estep(x, mu, var, w)
        history.append(ll)
        if ll - ll_prev < rel_tol * abs(ll_prev):
            break
        ll_prev = ll
    return mu, var, w, history
