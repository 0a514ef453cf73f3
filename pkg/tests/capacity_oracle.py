"""Independent capacity oracle for two-input channels (no Blahut-Arimoto)."""

import numpy as np


def two_input_mi(p, W):
    """I(X;Y) in bits when input 0 has probability ``p`` (vectorized over p)."""
    p = np.atleast_1d(np.asarray(p, dtype=float))[:, None]
    q = p * W[0] + (1 - p) * W[1]
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = np.where(W[0] > 0, W[0] * np.log2(W[0] / q), 0.0)
        t1 = np.where(W[1] > 0, W[1] * np.log2(W[1] / q), 0.0)
    return (p[:, 0] * t0.sum(axis=1)) + ((1 - p[:, 0]) * t1.sum(axis=1))


def grid_capacity(W):
    """Capacity of a two-input channel: coarse grid, then ternary search.

    I(p) is concave in the input weight p, so refining around the best grid
    point converges to the global maximum.
    """
    grid = np.linspace(0, 1, 201)
    best = int(np.argmax(two_input_mi(grid, W)))
    lo, hi = grid[max(best - 1, 0)], grid[min(best + 1, 200)]
    for _ in range(80):
        m1, m2 = lo + (hi - lo) / 3, hi - (hi - lo) / 3
        f1, f2 = two_input_mi([m1, m2], W)
        if f1 < f2:
            lo = m1
        else:
            hi = m2
    return float(two_input_mi((lo + hi) / 2, W)[0])
