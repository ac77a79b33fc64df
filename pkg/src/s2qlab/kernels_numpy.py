"""Pure-numpy kernels: reference implementation of the hot inner loops.

Signatures are shared with ``kernels_numba``; all floating arrays are
float64 and C-contiguous.  Batched shapes: X (B, in), U (B, N) per-agent
utilities, per-sample generated mixing weights W1 (B, N, E) / W2 (B, E).
"""

import numpy as np


def dense_forward(X, W, b, absw):
    Weff = np.abs(W) if absw else W
    return X @ Weff + b


def dense_backward(X, W, absw, dZ):
    if absw:
        dW = (X.T @ dZ) * np.sign(W)
        dX = dZ @ np.abs(W).T
    else:
        dW = X.T @ dZ
        dX = dZ @ W.T
    db = dZ.sum(axis=0)
    return dX, dW, db


def act_forward(Z, act):
    if act == 0:
        return Z
    if act == 1:
        return np.maximum(Z, 0.0)
    if act == 2:
        return np.where(Z > 0.0, Z, np.expm1(Z))
    return np.tanh(Z)


def act_backward(Z, act, dA):
    if act == 0:
        return dA
    if act == 1:
        return dA * (Z > 0.0)
    if act == 2:
        return dA * np.where(Z > 0.0, 1.0, np.exp(Z))
    t = np.tanh(Z)
    return dA * (1.0 - t * t)


def mix_forward(U, W1, B1, W2, B2):
    """Monotone mix of agent utilities with per-sample nonnegative weights.

    ZH = U @ |W1| + B1, H = elu(ZH), Y = H @ |W2| + B2.
    Returns (Y, ZH); ZH is the cache needed by mix_backward.
    """
    ZH = np.einsum("bn,bne->be", U, np.abs(W1)) + B1
    H = np.where(ZH > 0.0, ZH, np.expm1(ZH))
    Y = np.einsum("be,be->b", H, np.abs(W2)) + B2
    return Y, ZH


def mix_backward(U, W1, ZH, W2, dY):
    H = np.where(ZH > 0.0, ZH, np.expm1(ZH))
    dB2 = dY.copy()
    dW2 = np.sign(W2) * H * dY[:, None]
    dH = np.abs(W2) * dY[:, None]
    dZH = dH * np.where(ZH > 0.0, 1.0, np.exp(ZH))
    dB1 = dZH
    dW1 = np.sign(W1) * U[:, :, None] * dZH[:, None, :]
    dU = np.einsum("bne,be->bn", np.abs(W1), dZH)
    return dU, dW1, dB1, dW2, dB2


def adam_update(values, m, v, grad, step, lr, beta1, beta2, eps, clip_norm):
    """In-place Adam with bias correction; global-norm clip applied first."""
    gnorm = float(np.sqrt(np.dot(grad, grad)))
    if gnorm > clip_norm:
        grad = grad * (clip_norm / gnorm)
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    mhat = m / (1.0 - beta1 ** step)
    vhat = v / (1.0 - beta2 ** step)
    values -= lr * mhat / (np.sqrt(vhat) + eps)
