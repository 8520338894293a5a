"""Slow, independent reference computations used by the self-test and the test suite.

Nothing here shares code with the production paths it checks: mirroring,
extraction and search are re-derived with explicit loops and dense matrices.
"""

from __future__ import annotations

import numpy as np


def reflect(i: int, length: int) -> int:
    while i < 0 or i >= length:
        i = -i if i < 0 else 2 * (length - 1) - i
    return i


def kron_sl(Z, W1, W2, B):
    """(W2^T kron W1) vec(Z) + vec(B), with column-stacking vec."""
    z = Z.reshape(-1, order="F")
    out = np.kron(W2.T, W1) @ z + B.reshape(-1, order="F")
    return out.reshape((W1.shape[0], W2.shape[1]), order="F")


def extraction_matrix(height, width, channels, patch_side, center, *, stride=1):
    """Dense n x (H*W*C) matrix of the patch operator at ``center`` (mirror boundary)."""
    h = patch_side // 2
    y, x = center
    R = np.zeros((patch_side * patch_side * channels, height * width * channels))
    row = 0
    for a in range(-h, h + 1):
        for b in range(-h, h + 1):
            if stride == 1:
                yy, xx = reflect(y + a, height), reflect(x + b, width)
            else:
                py, px = y % 2, x % 2
                yy = 2 * reflect(y // 2 + a, (height - py + 1) // 2) + py
                xx = 2 * reflect(x // 2 + b, (width - px + 1) // 2) + px
            for c in range(channels):
                R[row, (yy * width + xx) * channels + c] = 1.0
                row += 1
    return R


def dense_aggregate(patches, weights, height, width, channels, patch_side, *, stride=1):
    """Solve (sum w R^T R) x = sum w R^T z with explicit matrices."""
    N = height * width * channels
    A = np.zeros((N, N))
    rhs = np.zeros(N)
    for l in range(height * width):
        R = extraction_matrix(height, width, channels, patch_side, divmod(l, width), stride=stride)
        A += weights[l] * R.T @ R
        rhs += weights[l] * R.T @ patches[l]
    return np.linalg.solve(A, rhs).reshape(height, width, channels)


def brute_knn(img, center, patch_side, k, window):
    """Exhaustive search in the clipped window; ties go to the earlier candidate in row-major order.

    Returns ``(neighbour coordinates, distances)`` for the k-1 neighbours.
    """
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 3:
        search = 0.2989 * img[:, :, 0] + 0.5870 * img[:, :, 1] + 0.1140 * img[:, :, 2]
    else:
        search = img.reshape(img.shape[0], img.shape[1])
    H, W = search.shape
    h, r = patch_side // 2, window // 2

    def patch(y, x):
        return [search[reflect(y + a, H), reflect(x + b, W)] for a in range(-h, h + 1) for b in range(-h, h + 1)]

    y0, x0 = center
    seed = patch(y0, x0)
    scored = []
    for y in range(max(0, y0 - r), min(H, y0 + r + 1)):
        for x in range(max(0, x0 - r), min(W, x0 + r + 1)):
            if (y, x) == (y0, x0):
                continue
            d = 0.0
            for u, v in zip(patch(y, x), seed):
                d += (u - v) ** 2
            scored.append((d, len(scored), (y, x)))
    scored.sort()
    best = scored[: k - 1]
    return [s[2] for s in best], np.array([s[0] for s in best])


def lowpass_at(img, y, x):
    """f_LP response at one pixel, mirror boundary, by direct summation."""
    img = np.asarray(img, dtype=np.float64)
    H, W = img.shape[:2]
    taps = (1.0, 2.0, 1.0)
    acc = np.zeros(img.shape[2:]) if img.ndim == 3 else 0.0
    for a in range(3):
        for b in range(3):
            acc = acc + taps[a] * taps[b] / 16.0 * img[reflect(y + a - 1, H), reflect(x + b - 1, W)]
    return acc


def finite_difference(f, x, h=1e-5):
    """Central-difference gradient of scalar ``f`` at array ``x`` (all coordinates)."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gf = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g
