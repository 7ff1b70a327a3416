"""Pure-numpy kernels. Same contract as the compiled ``_ckernels`` module.

Window sums use separable prefix sums: a running sum along each row, then a
running sum of the row-window sums down each column. Each output pixel costs
O(1) regardless of the radius, and the prefix values stay small (one row or
one column of window sums) which keeps cancellation error near 1e-12.
"""

import numpy as np

BACKEND = "python"


def entropy(p):
    p = np.asarray(p, dtype=np.float64)
    q = 1.0 - p
    with np.errstate(divide="ignore", invalid="ignore"):
        h = -np.where(p > 0, p * np.log(p), 0.0) - np.where(q > 0, q * np.log(q), 0.0)
    return h


def _bounds(n, r):
    idx = np.arange(n)
    return np.clip(idx - r, 0, n), np.clip(idx + r + 1, 0, n)


def _window_sum(a, r):
    h, w = a.shape
    rlo, rhi = _bounds(h, r)
    clo, chi = _bounds(w, r)
    pre = np.zeros((h, w + 1))
    np.cumsum(a, axis=1, out=pre[:, 1:])
    rows = pre[:, chi] - pre[:, clo]
    pre = np.zeros((h + 1, w))
    np.cumsum(rows, axis=0, out=pre[1:])
    sums = pre[rhi] - pre[rlo]
    counts = (rhi - rlo)[:, None] * (chi - clo)[None, :]
    return sums, counts


def box_mean(a, r, fixed_denominator=False):
    a = np.asarray(a, dtype=np.float64)
    sums, counts = _window_sum(a, r)
    den = float((2 * r + 1) ** 2) if fixed_denominator else counts
    return sums / den


def proposed_branch(p, r, fixed_denominator=False):
    """Raw per-branch score: entropy of the window mean minus window mean of entropies."""
    p = np.asarray(p, dtype=np.float64)
    if r == 0:
        return np.zeros(p.shape)
    psum, counts = _window_sum(p, r)
    hsum, _ = _window_sum(entropy(p), r)
    den = float((2 * r + 1) ** 2) if fixed_denominator else counts
    return entropy(psum / den) - hsum / den
