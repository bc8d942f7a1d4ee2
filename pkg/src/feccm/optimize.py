"""Numerical machinery shared by the classifiers and the trainer.

Gradient descent with Armijo backtracking (single problem and a row-batched
variant for many independent problems), the L1 proximal operator, an ISTA
lasso solver with unpenalized bias, and a central-difference gradient check.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyFitError, NumericError

log = logging.getLogger(__name__)

_STEP_MIN = 1e-20
_STEP_MAX = 1e10


@dataclass(frozen=True)
class DescentConfig:
    max_iters: int = 500
    rel_tol: float = 1e-8
    armijo_c: float = 1e-4
    backtrack: float = 0.5

    def __post_init__(self):
        if self.max_iters < 1:
            raise ContractError("max_iters must be positive")
        if self.rel_tol <= 0:
            raise ContractError("rel_tol must be positive")
        if not 0 < self.armijo_c < 1 or not 0 < self.backtrack < 1:
            raise ContractError("armijo_c and backtrack must lie in (0, 1)")


@dataclass
class BatchResult:
    x: np.ndarray
    f: np.ndarray
    n_iter: np.ndarray
    failed: np.ndarray
    f0: np.ndarray


def minimize_batch(fun, jac, x0, config: DescentConfig = DescentConfig(), project=None) -> BatchResult:
    """Minimize ``m`` independent objectives, one per row of ``x0``.

    ``fun(X, rows)`` returns the objective of each row of ``X`` (where ``rows``
    are the positions of those rows in the batch) and ``jac(X, rows)`` the
    gradients. Each row gets its own Barzilai-Borwein trial step, backtracked
    until the Armijo condition holds, and its own stopping test, so the result
    of a row does not depend on which other rows share the batch.
    ``project``, if given, maps gradients onto the feasible directions.
    """
    x = np.array(x0, dtype=float, copy=True)
    if x.ndim != 2:
        raise ContractError("x0 must be a 2-D array of row problems")
    m = x.shape[0]
    all_rows = np.arange(m)
    fx = np.asarray(fun(x, all_rows), dtype=float)
    f0 = fx.copy()
    failed = ~np.isfinite(fx) | ~np.all(np.isfinite(x), axis=1)
    active = ~failed
    n_iter = np.zeros(m, dtype=np.int64)
    step = np.ones(m)
    g_prev = np.zeros_like(x)
    s_prev = np.zeros_like(x)
    have_prev = np.zeros(m, dtype=bool)
    c, shrink = config.armijo_c, config.backtrack

    for _ in range(config.max_iters):
        rows = np.flatnonzero(active)
        if rows.size == 0:
            break
        g = np.asarray(jac(x[rows], rows), dtype=float)
        if project is not None:
            g = project(g)
        bad = ~np.all(np.isfinite(g), axis=1)
        if bad.any():
            failed[rows[bad]] = True
            active[rows[bad]] = False
            rows, g = rows[~bad], g[~bad]
        gg = np.einsum("ij,ij->i", g, g)
        stationary = gg == 0.0
        active[rows[stationary]] = False
        rows, g, gg = rows[~stationary], g[~stationary], gg[~stationary]
        if rows.size == 0:
            break

        # Barzilai-Borwein trial step from the previous accepted move
        t = step[rows].copy()
        hp = have_prev[rows]
        if hp.any():
            s = s_prev[rows[hp]]
            y = g - g_prev[rows[hp]]
            sy = np.einsum("ij,ij->i", s, y)
            ss = np.einsum("ij,ij->i", s, s)
            with np.errstate(divide="ignore", invalid="ignore"):
                bb = ss / sy
            ok = np.isfinite(bb) & (sy > 0)
            t_hp = t[hp]
            t_hp[ok] = bb[ok]
            t_hp[~ok] = t_hp[~ok] * 2.0
            t[hp] = t_hp
        else:
            t = np.minimum(t, 1.0 / np.maximum(1.0, np.sqrt(gg)))
        t = np.clip(t, _STEP_MIN, _STEP_MAX)

        pending = np.ones(rows.size, dtype=bool)
        x_new = x[rows].copy()
        f_new = fx[rows].copy()
        while pending.any():
            p = np.flatnonzero(pending)
            trial = x[rows[p]] - t[p, None] * g[p]
            with np.errstate(all="ignore"):
                ft = np.asarray(fun(trial, rows[p]), dtype=float)
            accept = np.isfinite(ft) & (ft <= fx[rows[p]] - c * t[p] * gg[p])
            acc = p[accept]
            x_new[acc] = trial[accept]
            f_new[acc] = ft[accept]
            pending[acc] = False
            rej = p[~accept]
            t[rej] *= shrink
            tiny = rej[t[rej] < _STEP_MIN]
            pending[tiny] = False  # line search exhausted: keep x, stop this row
            active[rows[tiny]] = False

        moved = active[rows]
        mv = rows[moved]
        s_prev[mv] = x_new[moved] - x[mv]
        g_prev[mv] = g[moved]
        have_prev[mv] = True
        step[mv] = t[moved]
        dec = fx[mv] - f_new[moved]
        x[mv] = x_new[moved]
        fx[mv] = f_new[moved]
        n_iter[mv] += 1
        converged = dec <= config.rel_tol * np.abs(fx[mv] + dec)
        active[mv[converged]] = False
    return BatchResult(x=x, f=fx, n_iter=n_iter, failed=failed, f0=f0)


def minimize(objective, gradient, x0, config: DescentConfig = DescentConfig()):
    """Gradient descent with backtracking line search.

    Returns ``(x_star, f_star)``; every accepted step satisfies the Armijo
    condition so the objective trace is non-increasing.
    """
    x0 = np.asarray(x0, dtype=float).ravel()
    f_start = float(objective(x0))
    if not np.isfinite(f_start):
        raise NumericError("objective is not finite at iterate 0")

    def fun(X, rows):
        return np.array([objective(xi) for xi in X])

    def jac(X, rows):
        return np.array([np.asarray(gradient(xi), dtype=float).ravel() for xi in X])

    res = minimize_batch(fun, jac, x0[None, :], config)
    if res.failed[0]:
        raise NumericError(f"non-finite gradient encountered at iterate {int(res.n_iter[0])}")
    return res.x[0], float(res.f[0])


def soft_threshold(v, t):
    """Proximal operator of ``t * ||.||_1``: ``sign(v) * max(|v| - t, 0)``."""
    if np.any(np.asarray(t) < 0):
        raise ContractError("threshold must be non-negative")
    v = np.asarray(v, dtype=float)
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


@dataclass(frozen=True)
class SurrogateModel:
    """Sparse linear approximation ``alpha @ [x; 1]`` of one second-layer classifier.

    ``alpha`` has one row per output dimension; the last column is the bias.
    """

    alpha: np.ndarray
    beta: float
    target_task: int | None = None
    converged: bool = True

    def predict(self, design):
        design = np.atleast_2d(np.asarray(design, dtype=float))
        return design @ self.alpha[:, :-1].T + self.alpha[:, -1]

    @property
    def weights(self) -> np.ndarray:
        return self.alpha[:, :-1]

    @property
    def bias(self) -> np.ndarray:
        return self.alpha[:, -1]


def _as_2d_targets(targets, rows):
    y = np.asarray(targets, dtype=float)
    if y.ndim == 1:
        y = y[:, None]
    if y.shape[0] != rows:
        raise ContractError(f"{y.shape[0]} targets for {rows} rows")
    return y


def lasso_objective(design, targets, alpha, beta) -> float:
    """``sum ||y - alpha^T [x; 1]||^2 + beta * ||alpha without bias||_1``."""
    X = np.atleast_2d(np.asarray(design, dtype=float))
    Y = _as_2d_targets(targets, X.shape[0])
    A = np.atleast_2d(alpha)
    r = Y - X @ A[:, :-1].T - A[:, -1]
    return float(np.sum(r * r) + beta * np.sum(np.abs(A[:, :-1])))


def lasso_kkt_residual(design, targets, alpha, beta) -> float:
    """Largest violation of the lasso subgradient optimality conditions.

    For a nonzero coefficient the smooth gradient ``g_k`` must equal
    ``-beta * sign(alpha_k)``; for a zero one ``|g_k| <= beta``; the bias
    gradient must vanish.
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    Y = _as_2d_targets(targets, X.shape[0])
    A = np.atleast_2d(alpha)
    r = X @ A[:, :-1].T + A[:, -1] - Y
    g = 2.0 * (r.T @ X)
    gb = 2.0 * r.sum(axis=0)
    W = A[:, :-1]
    nz = W != 0
    viol = np.where(nz, np.abs(g + beta * np.sign(W)), np.maximum(np.abs(g) - beta, 0.0))
    worst = viol.max() if viol.size else 0.0
    return float(max(worst, np.abs(gb).max()))


def lasso_null_beta(design, targets) -> float:
    """Smallest ``beta`` at which every non-bias coefficient is exactly zero."""
    X = np.atleast_2d(np.asarray(design, dtype=float))
    Y = _as_2d_targets(targets, X.shape[0])
    return float(np.abs(2.0 * (X - X.mean(0)).T @ (Y - Y.mean(0))).max())


def _kkt(G, B, W, beta):
    g = 2.0 * (G @ W - B)
    return np.where(W != 0, np.abs(g + beta * np.sign(W)), np.maximum(np.abs(g) - beta, 0.0)).max(axis=0)


def _polish(G, B, W, beta):
    """Solve the optimality conditions exactly on the support ISTA found.

    With the support and signs fixed the lasso is a linear system; its
    solution is kept per output column only if the signs survive and the KKT
    residual does not grow.
    """
    before = _kkt(G, B, W, beta)
    out = W.copy()
    for q in range(W.shape[1]):
        act = np.flatnonzero(W[:, q])
        if act.size == 0:
            continue
        sgn = np.sign(W[act, q])
        w = np.linalg.lstsq(G[np.ix_(act, act)], B[act, q] - 0.5 * beta * sgn, rcond=None)[0]
        if not np.all(np.sign(w) == sgn):
            continue
        cand = W[:, q : q + 1].copy()
        cand[act, 0] = w
        if _kkt(G, B[:, q : q + 1], cand, beta)[0] <= before[q]:
            out[act, q] = w
    return out


def lasso_fit(design, targets, beta, target_task=None, tol=1e-5, max_iter=200000, warn=True) -> SurrogateModel:
    """Fit ``min sum ||y - alpha^T [x; 1]||^2 + beta ||alpha||_1`` by ISTA.

    The bias column is appended here and left unpenalized; it is eliminated
    exactly by centering, so ISTA runs on the centered problem. Iterates until
    the KKT residual is at most ``tol``, then solves the optimality conditions
    exactly on the support found. Multi-column targets are fitted
    jointly, one alpha row per column. Hitting ``max_iter`` first is reported
    through ``converged=False`` (and a warning unless ``warn`` is false).
    """
    X = np.atleast_2d(np.asarray(design, dtype=float))
    if X.shape[0] == 0:
        raise EmptyFitError("lasso_fit needs at least one row")
    if beta < 0:
        raise ContractError("beta must be non-negative")
    Y = _as_2d_targets(targets, X.shape[0])
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
        raise NumericError("lasso_fit received non-finite entries")
    xm, ym = X.mean(0), Y.mean(0)
    Xc, Yc = X - xm, Y - ym
    G = Xc.T @ Xc
    B = Xc.T @ Yc
    p, q = G.shape[0], Y.shape[1]
    W = np.zeros((p, q))
    converged = True
    if p:
        lip = 2.0 * float(np.linalg.eigvalsh(G)[-1])
        t = 1.0 / lip if lip > 0 else 1.0
        yy = float(np.sum(Yc * Yc))

        def smooth(W):
            return yy - 2.0 * np.sum(W * B) + np.sum(W * (G @ W))

        for it in range(max_iter):
            GW = G @ W
            g = 2.0 * (GW - B)
            if it % 10 == 0 and _kkt(G, B, W, beta).max() <= tol:
                break
            f_w = yy - 2.0 * np.sum(W * B) + np.sum(W * GW)
            while True:
                W_new = soft_threshold(W - t * g, t * beta)
                d = W_new - W
                if smooth(W_new) <= f_w + np.sum(g * d) + np.sum(d * d) / (2.0 * t) + 1e-12 * abs(f_w):
                    break
                t *= 0.5
            W = W_new
        else:
            converged = False
        W = _polish(G, B, W, beta)
        if not converged:
            converged = bool(_kkt(G, B, W, beta).max() <= tol)
            if not converged and warn:
                log.warning("lasso_fit stopped at max_iter=%d before reaching KKT tolerance", max_iter)
    bias = ym - xm @ W
    alpha = np.hstack([W.T, bias[:, None]])
    return SurrogateModel(alpha=alpha, beta=float(beta), target_task=target_task, converged=converged)


def select_beta(design, targets, seed=0, holdout=0.2, grid=(0.0, 1e-3, 1e-2, 1e-1, 1.0), max_iter=200000) -> float:
    """Hold-out choice of ``beta`` from ``grid`` times ``||X^T y||_inf / rows``."""
    X = np.atleast_2d(np.asarray(design, dtype=float))
    Y = _as_2d_targets(targets, X.shape[0])
    n = X.shape[0]
    scale = float(np.abs(X.T @ Y).max()) / n if n else 0.0
    n_val = int(round(holdout * n))
    if n_val < 1 or n - n_val < 2 or scale == 0.0:
        return 0.0
    perm = np.random.default_rng(seed).permutation(n)
    val, fit = np.sort(perm[:n_val]), np.sort(perm[n_val:])
    best, best_err = 0.0, np.inf
    for g in grid:
        b = g * scale
        model = lasso_fit(X[fit], Y[fit], b, tol=1e-6 * max(1.0, scale * n), max_iter=max_iter, warn=False)
        err = float(np.sum((Y[val] - model.predict(X[val])) ** 2))
        if err < best_err:
            best, best_err = b, err
    return best


def check_gradient(f, grad, x, h=1e-5) -> float:
    """Max over coordinates of ``|fd - g| / max(1, |g|)`` with central differences."""
    if h <= 0:
        raise ContractError("h must be positive")
    x = np.asarray(x, dtype=float).ravel()
    g = np.asarray(grad(x), dtype=float).ravel()
    if not np.all(np.isfinite(g)):
        raise NumericError("gradient is not finite")
    fd = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        fp, fm = float(f(x + e)), float(f(x - e))
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise NumericError(f"objective not finite near coordinate {k}")
        fd[k] = (fp - fm) / (2.0 * h)
    return float(np.max(np.abs(fd - g) / np.maximum(1.0, np.abs(g)))) if x.size else 0.0
