"""Numba-compiled kernels; mirrors kernels_numpy signature for signature.

Compiled lazily with on-disk caching, no fastmath and no threading so
results stay deterministic run to run.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def dense_forward(X, W, b, absw):
    if absw:
        Weff = np.abs(W)
    else:
        Weff = W
    Z = np.dot(X, Weff)
    B, O = Z.shape
    for i in range(B):
        for j in range(O):
            Z[i, j] += b[j]
    return Z


@njit(cache=True)
def dense_backward(X, W, absw, dZ):
    Xt = np.ascontiguousarray(X.T)
    dW = np.dot(Xt, dZ)
    if absw:
        dW = dW * np.sign(W)
        Wt = np.ascontiguousarray(np.abs(W).T)
    else:
        Wt = np.ascontiguousarray(W.T)
    dX = np.dot(dZ, Wt)
    db = np.zeros(dZ.shape[1])
    for i in range(dZ.shape[0]):
        for j in range(dZ.shape[1]):
            db[j] += dZ[i, j]
    return dX, dW, db


@njit(cache=True)
def act_forward(Z, act):
    if act == 0:
        return Z
    A = np.empty_like(Z)
    B, O = Z.shape
    for i in range(B):
        for j in range(O):
            z = Z[i, j]
            if act == 1:
                A[i, j] = z if z > 0.0 else 0.0
            elif act == 2:
                A[i, j] = z if z > 0.0 else np.expm1(z)
            else:
                A[i, j] = np.tanh(z)
    return A


@njit(cache=True)
def act_backward(Z, act, dA):
    if act == 0:
        return dA
    dZ = np.empty_like(Z)
    B, O = Z.shape
    for i in range(B):
        for j in range(O):
            z = Z[i, j]
            if act == 1:
                dZ[i, j] = dA[i, j] if z > 0.0 else 0.0
            elif act == 2:
                dZ[i, j] = dA[i, j] if z > 0.0 else dA[i, j] * np.exp(z)
            else:
                t = np.tanh(z)
                dZ[i, j] = dA[i, j] * (1.0 - t * t)
    return dZ


@njit(cache=True)
def mix_forward(U, W1, B1, W2, B2):
    B, N = U.shape
    E = B1.shape[1]
    ZH = np.empty((B, E))
    Y = np.empty(B)
    for b in range(B):
        for e in range(E):
            acc = B1[b, e]
            for n in range(N):
                acc += U[b, n] * abs(W1[b, n, e])
            ZH[b, e] = acc
        y = B2[b]
        for e in range(E):
            zh = ZH[b, e]
            h = zh if zh > 0.0 else np.expm1(zh)
            y += h * abs(W2[b, e])
        Y[b] = y
    return Y, ZH


@njit(cache=True)
def mix_backward(U, W1, ZH, W2, dY):
    B, N = U.shape
    E = ZH.shape[1]
    dU = np.zeros((B, N))
    dW1 = np.empty((B, N, E))
    dB1 = np.empty((B, E))
    dW2 = np.empty((B, E))
    dB2 = np.empty(B)
    for b in range(B):
        dB2[b] = dY[b]
        for e in range(E):
            zh = ZH[b, e]
            h = zh if zh > 0.0 else np.expm1(zh)
            dW2[b, e] = np.sign(W2[b, e]) * h * dY[b]
            dh = abs(W2[b, e]) * dY[b]
            dzh = dh if zh > 0.0 else dh * np.exp(zh)
            dB1[b, e] = dzh
            for n in range(N):
                dW1[b, n, e] = np.sign(W1[b, n, e]) * U[b, n] * dzh
                dU[b, n] += abs(W1[b, n, e]) * dzh
    return dU, dW1, dB1, dW2, dB2


@njit(cache=True)
def adam_update(values, m, v, grad, step, lr, beta1, beta2, eps, clip_norm):
    n = values.shape[0]
    sq = 0.0
    for i in range(n):
        sq += grad[i] * grad[i]
    gnorm = np.sqrt(sq)
    scale = clip_norm / gnorm if gnorm > clip_norm else 1.0
    bc1 = 1.0 - beta1 ** step
    bc2 = 1.0 - beta2 ** step
    for i in range(n):
        g = grad[i] * scale
        m[i] = beta1 * m[i] + (1.0 - beta1) * g
        v[i] = beta2 * v[i] + (1.0 - beta2) * g * g
        mhat = m[i] / bc1
        vhat = v[i] / bc2
        values[i] -= lr * mhat / (np.sqrt(vhat) + eps)
