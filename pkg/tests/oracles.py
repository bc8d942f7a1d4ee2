"""Independent reference implementations used only by the tests.

None of these share code with the package: the lasso oracle is cyclic
coordinate descent, the feedback oracle is a dense grid search, the cascade
oracle unrolls the two inference steps by hand with plain loops.
"""
import math

import numpy as np


def lasso_cd(X, y, beta, sweeps=100000, tol=1e-15):
    """Coordinate descent for ``sum (y - Xw - b)^2 + beta |w|_1``; returns ``(w, b)``."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).ravel()
    xm, ym = X.mean(0), y.mean()
    Xc, yc = X - xm, y - ym
    p = X.shape[1]
    w = np.zeros(p)
    col_sq = (Xc * Xc).sum(0)
    r = yc.copy()
    for _ in range(sweeps):
        biggest = 0.0
        for k in range(p):
            if col_sq[k] == 0:
                continue
            old = w[k]
            rho = Xc[:, k] @ r + col_sq[k] * old
            # minimizer of col_sq * w^2 - 2 rho w + beta |w| (objective scaled by 1)
            new = math.copysign(max(abs(rho) - beta / 2.0, 0.0), rho) / col_sq[k]
            if new != old:
                r -= Xc[:, k] * (new - old)
                w[k] = new
                biggest = max(biggest, abs(new - old))
        if biggest < tol:
            break
    return w, ym - xm @ w


def lasso_value(X, y, w, b, beta):
    r = np.asarray(y, dtype=float).ravel() - X @ w - b
    return float(r @ r + beta * np.abs(w).sum())


def grid_minimum(f, lo, hi, n=10001):
    """Minimum of a scalar function over ``n`` evenly spaced points of ``[lo, hi]``."""
    xs = np.linspace(lo, hi, n)
    vals = np.array([f(x) for x in xs])
    k = int(np.argmin(vals))
    return float(xs[k]), float(vals[k])


def grid_minimum_vec(f, lo, hi, n=10001):
    """As :func:`grid_minimum` for an ``f`` that evaluates a whole array of points at once."""
    xs = np.linspace(lo, hi, n)
    vals = np.asarray(f(xs), dtype=float)
    k = int(np.argmin(vals))
    return float(xs[k]), float(vals[k])


def _softmax(s):
    m = max(s)
    e = [math.exp(v - m) for v in s]
    t = sum(e)
    return [v / t for v in e]


def unrolled_predict(first_w, second_w, means, scales, features):
    """Two-step cascade inference with explicit loops.

    ``first_w[i]`` / ``second_w[j]`` are weight matrices (rows of weights,
    bias last) and ``features[i]`` the raw feature vector of task ``i``.
    Returns ``{j: scores}``.
    """
    tasks = sorted(first_w)
    std = {i: [(features[i][k] - means[i][k]) / scales[i][k] for k in range(len(features[i]))] for i in tasks}
    z = {}
    for i in tasks:
        W = first_w[i]
        z[i] = [sum(W[r][k] * std[i][k] for k in range(len(std[i]))) + W[r][-1] for r in range(len(W))]
    out = {}
    for j in tasks:
        phi = list(std[j])
        for i in tasks:
            phi += z[i]
        W = second_w[j]
        out[j] = [sum(W[r][k] * phi[k] for k in range(len(phi))) + W[r][-1] for r in range(len(W))]
    return out


def feedback_terms(first_nll, second_nll, z, labeled):
    """Term-by-term feedback objective: every first-layer term plus labeled second-layer terms."""
    total = 0.0
    for f in first_nll:
        total += f(z)
    for j, g in second_nll.items():
        if j in labeled:
            total += g(z)
    return total


def cross_entropy(scores, label):
    return -math.log(_softmax(list(scores))[label])
