"""Cubic RBF interpolation with a linear tail, plus gene-weighting helpers.

The response surface interpolates observed costs over genotype vectors:
s(x) = sum_i lambda_i * phi(|x - x_i|) + c0 + c . x with phi(r) = r^3.
Coefficients come from the saddle block system [[Phi, P], [P^T, 0]] so
predictions reproduce the data at the centers.
"""

from __future__ import annotations

import numpy as np

RIDGE = 1e-8


class SurrogateUnavailable(RuntimeError):
    """Fit impossible (too few or degenerate centers); caller falls back."""


def cubic_kernel(r):
    return r ** 3


def genotype_vector(genotype):
    """Numeric embedding: each gene scaled into [0, 1] by its alphabet."""
    edges = np.asarray(genotype.edge_bits, dtype=np.float64)
    ops = np.asarray(genotype.op_codes, dtype=np.float64) / 2.0
    return np.concatenate([edges, ops, [float(genotype.batch_code)]])


class RbfSurrogate:
    """Fitted interpolant over N centers in d dimensions."""

    def __init__(self, centers, values, ridge_used=False):
        self.centers = centers
        self.values = values
        self.ridge_used = ridge_used
        self.lam = None
        self.coef = None

    def predict(self, xs):
        xs = np.atleast_2d(np.asarray(xs, dtype=np.float64))
        d = np.sqrt(np.maximum(
            np.sum(xs ** 2, axis=1)[:, None]
            + np.sum(self.centers ** 2, axis=1)[None, :]
            - 2.0 * xs @ self.centers.T, 0.0))
        tail = self.coef[0] + xs @ self.coef[1:]
        return cubic_kernel(d) @ self.lam + tail


def fit_surrogate(centers, values):
    """Solve the block interpolation system; ridge fallback, then give up.

    Needs at least d + 2 centers so the polynomial block has full rank;
    duplicate or affinely degenerate center sets go through the ridge
    path, and a still-singular system raises SurrogateUnavailable.
    """
    centers = np.asarray(centers, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if centers.ndim != 2:
        raise ValueError("centers must be an N x d matrix")
    n, d = centers.shape
    if n != values.size:
        raise ValueError("one value per center required")
    if n < d + 2:
        raise SurrogateUnavailable(f"need at least {d + 2} centers, have {n}")

    dist = np.sqrt(np.maximum(
        np.sum(centers ** 2, axis=1)[:, None]
        + np.sum(centers ** 2, axis=1)[None, :]
        - 2.0 * centers @ centers.T, 0.0))
    phi = cubic_kernel(dist)
    p = np.hstack([np.ones((n, 1)), centers])
    m = d + 1
    block = np.zeros((n + m, n + m))
    block[:n, :n] = phi
    block[:n, n:] = p
    block[n:, :n] = p.T
    rhs = np.concatenate([values, np.zeros(m)])

    for ridge in (0.0, RIDGE):
        sys = block.copy()
        sys[:n, :n] += ridge * np.eye(n)
        try:
            sol = np.linalg.solve(sys, rhs)
            # close centers make the kernel block ill-conditioned; a round
            # of iterative refinement recovers the lost digits
            for _ in range(2):
                sol += np.linalg.solve(sys, rhs - sys @ sol)
        except np.linalg.LinAlgError:
            continue
        resid = phi @ sol[:n] + p @ sol[n:] - values
        if not np.all(np.isfinite(sol)) or np.max(np.abs(resid)) > 1e-6 * max(
                1.0, np.max(np.abs(values))):
            continue
        model = RbfSurrogate(centers, values, ridge_used=ridge > 0)
        model.lam = sol[:n]
        model.coef = sol[n:]
        return model
    raise SurrogateUnavailable("interpolation system is singular")


def update_feature_weights(vectors, costs):
    """Per-gene weights from promising vs non-promising cost labels.

    The cheaper half of the samples is labeled promising; each gene's
    weight is the absolute difference of its group means, normalized to
    sum one.  Degenerate labelings collapse to uniform weights.
    """
    vectors = np.asarray(vectors, dtype=np.float64)
    costs = np.asarray(costs, dtype=np.float64)
    n, d = vectors.shape
    if n < 4:
        raise ValueError("need at least 4 labeled samples")
    uniform = np.full(d, 1.0 / d)
    if np.all(costs == costs[0]):
        return uniform
    order = np.argsort(costs, kind="stable")
    half = n // 2
    promising = vectors[order[:half]]
    rest = vectors[order[half:]]
    diff = np.abs(promising.mean(axis=0) - rest.mean(axis=0))
    total = diff.sum()
    if total <= 0.0:
        return uniform
    return diff / total
