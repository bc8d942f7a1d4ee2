"""CCM and feedback-enabled CCM training.

Training alternates two half-steps, a hard-EM scheme over the first-layer
outputs ``Z``:

* feed-forward: with ``Z`` fixed, refit every first-layer classifier to
  predict its ``Z`` and every second-layer classifier to predict the ground
  truth from ``[psi_j, Z]``;
* feedback: with all parameters fixed, re-estimate each sample's ``Z`` to
  trade off agreeing with the first layer against making the labels the
  sample carries likely under the second layer.

The first feed-forward step starts from the ground truth and is exactly the
CCM baseline, so zero feedback iterations reproduce CCM.
"""
from __future__ import annotations

import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Mapping, Sequence

import numpy as np

from .cascade import CascadeModel, LatentState, fit_standardization, first_layer_outputs
from .classifiers import (
    BINARY,
    DEFAULT_L2,
    MULTINOMIAL,
    RIDGE,
    BuiltinClassifier,
    ClassifierParams,
    has_likelihood,
    labels_from_scores,
    make_classifier,
)
from .errors import CapabilityError, ConfigError, ContractError, EmptyFitError
from .metrics import higher_is_better, task_metric
from .optimize import DescentConfig, lasso_fit, lasso_null_beta, minimize_batch, select_beta
from .tasks import MultiTaskDataset, Sample, concat, split

log = logging.getLogger(__name__)

EXACT = "exact"
SURROGATE = "surrogate"
AUTO = "auto"
UNIFIED = "unified"
ONE_GOAL = "one_goal"
TARGET_SPECIFIC = "target_specific"


@dataclass(frozen=True)
class FeedbackConfig:
    """Settings for :func:`train_feccm`.

    ``pi`` overrides the importance factors implied by ``instantiation``.
    ``beta`` is the lasso weight of the surrogate fit, or ``"auto"`` for a
    hold-out choice. ``surrogate_target`` selects what the surrogate regresses:
    the second layer's own scores (``"model_output"``) or the ground-truth
    encoding (``"ground_truth"``). ``second_layer_fit`` chooses what the
    second layer is refit on (see :func:`_feed_forward`). ``n_jobs`` only
    changes scheduling. ``chunk_size`` fixes how the id-ordered samples are
    batched in the feedback descent; being a numeric setting, changing it may
    move results in the last bits.
    """

    max_outer_iters: int = 5
    feedback_mode: str = AUTO
    instantiation: str = UNIFIED
    target_task: int | None = None
    pi: tuple | None = None
    inner: DescentConfig = DescentConfig()
    beta: float | str = "auto"
    surrogate_target: str = "model_output"
    tol: float = 1e-4
    plateau_tol: float = 1e-3
    margin: float = 4.0
    l2: float = DEFAULT_L2
    seed: int = 0
    n_jobs: int = 1
    chunk_size: int = 2048
    pi_grid: tuple | None = None
    folds: int = 3
    warm_start: bool = True
    second_layer_fit: str = "predictions"
    lasso_max_iter: int = 5000

    def __post_init__(self):
        if self.max_outer_iters < 0:
            raise ConfigError("max_outer_iters must be non-negative")
        if self.feedback_mode not in (EXACT, SURROGATE, AUTO):
            raise ConfigError(f"unknown feedback mode {self.feedback_mode!r}")
        if self.instantiation not in (UNIFIED, ONE_GOAL, TARGET_SPECIFIC):
            raise ConfigError(f"unknown instantiation {self.instantiation!r}")
        if self.instantiation in (ONE_GOAL, TARGET_SPECIFIC) and self.target_task is None:
            raise ConfigError(f"{self.instantiation} needs a target task")
        if self.second_layer_fit not in ("predictions", "latents"):
            raise ConfigError(f"unknown second_layer_fit {self.second_layer_fit!r}")
        if self.surrogate_target not in ("model_output", "ground_truth"):
            raise ConfigError(f"unknown surrogate target {self.surrogate_target!r}")
        if not (self.beta == "auto" or (isinstance(self.beta, (int, float)) and self.beta >= 0)):
            raise ConfigError("beta must be 'auto' or a non-negative number")
        if self.pi is not None:
            pi = tuple(float(v) for v in self.pi)
            if any(v < 0 for v in pi) or abs(sum(pi) - 1.0) > 1e-9:
                raise ConfigError(f"pi must be non-negative and sum to 1, got {pi}")
            object.__setattr__(self, "pi", pi)
        if self.n_jobs < 1 or self.chunk_size < 1 or self.folds < 2:
            raise ConfigError("n_jobs and chunk_size must be positive, folds at least 2")


@dataclass
class TrainingTrace:
    """Per outer iteration: joint objective, hold-out metric per task, wall time.

    ``half_steps`` additionally records the objective after every half-step as
    ``(label, value)``; the objective is NaN when it cannot be evaluated.
    """

    iterations: list = field(default_factory=list)
    objective: list = field(default_factory=list)
    metrics: list = field(default_factory=list)
    seconds: list = field(default_factory=list)
    half_steps: list = field(default_factory=list)
    pi: tuple | None = None
    mode: str | None = None
    converged: bool = False
    feedback_failures: int = 0
    surrogate_unconverged: int = 0

    def record(self, iteration, objective, metrics, seconds):
        self.iterations.append(iteration)
        self.objective.append(objective)
        self.metrics.append(dict(metrics))
        self.seconds.append(seconds)

    def rows(self, include_time=True):
        tasks = sorted({j for m in self.metrics for j in m})
        header = ["iteration", "objective"] + [f"metric_{j}" for j in tasks] + (["seconds"] if include_time else [])
        out = [header]
        for it, obj, m, sec in zip(self.iterations, self.objective, self.metrics, self.seconds):
            row = [str(it), repr(float(obj))] + [repr(float(m[j])) for j in tasks]
            if include_time:
                row.append(f"{sec:.6f}")
            out.append(row)
        return out

    def to_csv(self, path=None, include_time=True) -> str:
        text = "".join(",".join(r) + "\n" for r in self.rows(include_time))
        if path is not None:
            with open(path, "w", encoding="utf-8") as fh:
                fh.write(text)
        return text


# -- importance factors ----------------------------------------------------------------


def unified_pi(dataset: MultiTaskDataset) -> tuple:
    """Importance factors inversely proportional to the partition sizes."""
    sizes = np.array([dataset.labeled_mask(j).sum() for j in dataset.task_ids], dtype=float)
    if np.any(sizes == 0):
        raise EmptyFitError("every task needs at least one labeled sample")
    inv = 1.0 / sizes
    return tuple(float(v) for v in inv / inv.sum())


def one_goal_pi(n_tasks: int, k: int) -> tuple:
    if not 1 <= k <= n_tasks:
        raise ContractError(f"target task {k} outside 1..{n_tasks}")
    return tuple(1.0 if j == k else 0.0 for j in range(1, n_tasks + 1))


def importance_weights(dataset: MultiTaskDataset, pi: Sequence[float]) -> np.ndarray:
    """Per-sample weight ``pi_j * N / |G_j|`` of its source partition.

    A sample labeled for several tasks takes the largest of its tasks' weights;
    an unlabeled sample gets zero.
    """
    n = len(dataset)
    w = np.zeros(n)
    for j, p in zip(dataset.task_ids, pi):
        m = dataset.labeled_mask(j)
        if m.any():
            w[m] = np.maximum(w[m], p * n / m.sum())
    return w


def resolve_pi(dataset: MultiTaskDataset, config: FeedbackConfig) -> tuple:
    if config.pi is not None:
        if len(config.pi) != len(dataset.task_ids):
            raise ConfigError(f"pi has {len(config.pi)} entries for {len(dataset.task_ids)} tasks")
        return config.pi
    if config.instantiation == ONE_GOAL:
        return one_goal_pi(len(dataset.task_ids), config.target_task)
    if config.instantiation == TARGET_SPECIFIC:
        return select_pi_target_specific(dataset, config.target_task, config.pi_grid, config.folds, config)
    return unified_pi(dataset)


# -- classifier set-up -----------------------------------------------------------------


def default_kind(spec) -> str:
    return MULTINOMIAL if spec.is_categorical else RIDGE


def build_classifiers(specs, kinds=None, l2=DEFAULT_L2, inner=DescentConfig()):
    """``(first_layer, second_layer)`` classifier maps from a kinds mapping.

    ``kinds[j]`` may be a kind name, a classifier object, or a pair giving the
    first- and second-layer choice separately.
    """
    kinds = dict(kinds or {})
    first, second = {}, {}
    for spec in specs:
        j = spec.task_id
        k = kinds.get(j, default_kind(spec))
        k1, k2 = k if isinstance(k, (tuple, list)) else (k, k)
        first[j] = make_classifier(k1, l2, inner)
        second[j] = make_classifier(k2, l2, inner)
        for clf in (first[j], second[j]):
            kind = getattr(clf, "kind", None)
            if kind == RIDGE and spec.is_categorical:
                raise ConfigError(f"task {j} is categorical; ridge cannot model it")
            if kind in (MULTINOMIAL, BINARY) and not spec.is_categorical:
                raise ConfigError(f"task {j} is a regression task; {kind} cannot model it")
            if kind == BINARY and spec.n_classes != 2:
                raise ConfigError(f"task {j} has {spec.n_classes} classes; binary_logistic needs 2")
    return first, second


def _out_dim(clf, spec) -> int:
    if hasattr(clf, "output_dim"):
        return int(clf.output_dim(spec.n_classes))
    return spec.output_dim


def _encode(clf, spec, labels, margin) -> np.ndarray:
    """Score encoding of ground-truth labels for one task, shape ``(n, dim)``."""
    labels = np.asarray(labels, dtype=float)
    if hasattr(clf, "label_encoding"):
        return np.array([clf.label_encoding(y, spec.n_classes, margin) for y in labels]).reshape(len(labels), -1)
    if not spec.is_categorical:
        return labels[:, None]
    if _out_dim(clf, spec) == 1:
        return np.where(labels[:, None] == 1, 2.0 * margin, -2.0 * margin)
    z = np.full((len(labels), spec.n_classes), -margin)
    z[np.arange(len(labels)), labels.astype(np.int64)] = margin
    return z


def initialize_latents(dataset: MultiTaskDataset, first_layer=None, margin: float = 4.0) -> LatentState:
    """Latents set to the ground-truth encoding on every labeled (sample, task) pair.

    A categorical label ``c`` becomes a score vector with ``margin`` at ``c`` and
    ``-margin`` elsewhere; a regression label ``y`` becomes ``(y,)``.
    Unlabeled pairs are left uncovered.
    """
    if first_layer is None:
        first_layer, _ = build_classifiers(dataset.specs)
    z, mask = {}, {}
    for spec in dataset.specs:
        i = spec.task_id
        clf = first_layer[i]
        m = dataset.labeled_mask(i)
        dim = _out_dim(clf, spec)
        zi = np.zeros((len(dataset), dim))
        if m.any():
            zi[m] = _encode(clf, spec, dataset.labels[i][m], margin)
        z[i], mask[i] = zi, m.copy()
    return LatentState(dataset.sample_ids.copy(), z, mask, source="ground_truth")


# -- internal training state ----------------------------------------------------------


class _Problem:
    """Standardized training data plus the fixed wiring of one training run."""

    def __init__(self, dataset, first, second, means, scales, adapters, config):
        self.data = dataset
        self.specs = dataset.specs
        self.tasks = dataset.task_ids
        self.first, self.second = first, second
        self.means, self.scales = means, scales
        self.adapters = dict(adapters or {})
        self.config = config
        self.psi = {j: (dataset.features[j] - means[j]) / scales[j] for j in self.tasks}
        self.masks = {j: dataset.labeled_mask(j) for j in self.tasks}
        self.labels = {j: np.nan_to_num(dataset.labels[j], nan=0.0) for j in self.tasks}
        self.dims = {i: _out_dim(first[i], self.specs[i - 1]) for i in self.tasks}
        offs = np.cumsum([0] + [self.dims[i] for i in self.tasks])
        self.slices = {i: slice(int(offs[k]), int(offs[k + 1])) for k, i in enumerate(self.tasks)}
        self.zdim = int(offs[-1])

    def model(self, theta, omega) -> CascadeModel:
        return CascadeModel(
            specs=self.specs,
            first_layer=self.first,
            second_layer=self.second,
            theta=dict(theta),
            omega=dict(omega),
            means=self.means,
            scales=self.scales,
            adapters=self.adapters,
        )

    def second_targets(self, j, rows):
        spec = self.specs[j - 1]
        y = self.labels[j][rows]
        return y.astype(np.int64) if spec.is_categorical else y

    def pack(self, z: Mapping[int, np.ndarray]) -> np.ndarray:
        return np.hstack([z[i] for i in self.tasks])

    def unpack(self, Z: np.ndarray) -> dict:
        return {i: Z[:, self.slices[i]] for i in self.tasks}


def _map(fn, items, n_jobs):
    items = list(items)
    if n_jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n_jobs) as ex:
        return list(ex.map(fn, items))


def _subsample_rows(rows, weights, seed):
    """Rows drawn so that each partition's share follows its weight mass."""
    rng = np.random.default_rng(seed)
    levels = sorted(set(weights[rows].round(12)) - {0.0})
    picks = []
    for lv in levels:
        members = rows[weights[rows].round(12) == lv]
        frac = lv / max(levels)
        take = max(1, int(round(frac * len(members))))
        picks.append(np.sort(rng.permutation(members)[:take]))
    return np.sort(np.concatenate(picks)) if picks else rows[:0]


def _learn(clf, X, T, w, seed, init, output_dim, spec, margin):
    if not getattr(clf, "accepts_scores", False) and spec.is_categorical and np.asarray(T).ndim == 2:
        kind = getattr(clf, "kind", MULTINOMIAL)
        T = labels_from_scores(kind if T.shape[1] == spec.n_classes or kind == BINARY else MULTINOMIAL, T)
    if isinstance(clf, BuiltinClassifier):
        return clf.learn(X, T, w, seed=seed, init=init, output_dim=output_dim)
    if getattr(clf, "supports_weights", False):
        return clf.learn(X, T, w, seed)
    rows = _subsample_rows(np.arange(len(X)), np.asarray(w, dtype=float), seed)
    return clf.learn(X[rows], np.asarray(T)[rows], np.ones(len(rows)), seed)


def _feed_forward(problem: _Problem, latents: LatentState, weights, previous=None):
    """Refit Theta and Omega with the latents fixed.

    With the ground-truth initialization each first-layer classifier sees only
    its own labeled samples (unit weights) and the second layer is fit on the
    resulting first-layer outputs, which is the CCM baseline. Afterwards every
    sample contributes to every first-layer fit with its importance weight.
    The second layer is then refit on the new first layer's outputs
    (``second_layer_fit="predictions"``, the same rule as the CCM step, so
    training and test inputs match) or on the latents themselves
    (``"latents"``, the literal hard-EM step, under which the joint objective
    never increases).

    Returns ``(theta, omega, latents)`` where ``latents`` is the complete state
    the second layer was fit on.
    """
    cfg = problem.config
    initial = latents.source == "ground_truth"
    prev_theta, prev_omega = previous if previous is not None else ({}, {})

    def fit_first(i):
        spec = problem.specs[i - 1]
        mask = latents.mask[i]
        w = mask.astype(float) if initial else np.where(mask, weights, 0.0)
        rows = np.flatnonzero(w > 0)
        if rows.size == 0:
            raise EmptyFitError(f"first layer, task {i}: no training pairs")
        init = prev_theta.get(i) if cfg.warm_start else None
        # the CCM first layer is trained on the ground truth itself
        target = problem.second_targets(i, rows) if initial else latents.z[i][rows]
        return _learn(
            problem.first[i], problem.psi[i][rows], target, w[rows], cfg.seed, init,
            problem.dims[i], spec, cfg.margin,
        )

    theta = dict(zip(problem.tasks, _map(fit_first, problem.tasks, cfg.n_jobs)))
    if initial or not latents.complete or cfg.second_layer_fit == "predictions":
        zhat = {i: np.asarray(problem.first[i].infer(theta[i], problem.psi[i]), dtype=float) for i in problem.tasks}
        if initial or cfg.second_layer_fit == "predictions":
            z = zhat
        else:
            z = {i: np.where(latents.mask[i][:, None], latents.z[i], zhat[i]) for i in problem.tasks}
    else:
        z = latents.z
    state = LatentState(latents.sample_ids.copy(), {i: v.copy() for i, v in z.items()},
                        {i: np.ones(len(latents.sample_ids), dtype=bool) for i in problem.tasks})

    def fit_second(j):
        spec = problem.specs[j - 1]
        rows = np.flatnonzero(problem.masks[j])
        if rows.size == 0:
            raise EmptyFitError(f"second layer, task {j}: no labeled samples")
        phi = _phi(problem, j, rows, {i: z[i][rows] for i in problem.tasks})
        init = prev_omega.get(j) if cfg.warm_start else None
        out_dim = spec.n_classes if spec.is_categorical else 1
        return _learn(
            problem.second[j], phi, problem.second_targets(j, rows), np.ones(rows.size), cfg.seed, init,
            out_dim, spec, cfg.margin,
        )

    omega = dict(zip(problem.tasks, _map(fit_second, problem.tasks, cfg.n_jobs)))
    return theta, omega, state


def _phi(problem: _Problem, j, rows, z_rows):
    parts = [problem.psi[j][rows]]
    for i in problem.tasks:
        a = problem.adapters.get((i, j))
        parts.append(z_rows[i] if a is None else a(z_rows[i]))
    return np.hstack(parts)


def _z_map(problem: _Problem, j) -> np.ndarray:
    blocks = []
    for i in problem.tasks:
        a = problem.adapters.get((i, j))
        blocks.append(np.eye(problem.dims[i]) if a is None else a.as_matrix(problem.dims[i]))
    rows = sum(b.shape[0] for b in blocks)
    out = np.zeros((rows, problem.zdim))
    r = 0
    for i, b in zip(problem.tasks, blocks):
        out[r : r + b.shape[0], problem.slices[i]] = b
        r += b.shape[0]
    return out


# -- feedback ------------------------------------------------------------------------


class FeedbackObjective:
    """Per-sample feedback objective over the packed latents of a set of rows.

    Exact mode: ``w_s * sum_i NLL(theta_i; psi_i, z_i) + sum_{j labeled} NLL(omega_j; phi_j(z), y_j)``.
    Surrogate mode: ``w_s * sum_i ||z_i - zhat_i||^2 + sum_{j labeled} ||t_j - alpha_j [phi_j(z); 1]||^2``.
    ``w_s`` is the sample's first-layer importance weight (1 when all
    partitions are equally sized under unified factors).
    """

    def __init__(self, problem: _Problem, theta, omega, mode, weights, surrogates=None, zhat=None, targets=None):
        self.p = problem
        self.theta, self.omega = theta, omega
        self.mode = mode
        self.weights = np.asarray(weights, dtype=float)
        self.surrogates = surrogates or {}
        self.zhat = zhat
        self.targets = targets or {}
        self.zmaps = {j: _z_map(problem, j) for j in problem.tasks}
        self.psi_dims = {j: problem.specs[j - 1].feature_dim for j in problem.tasks}

    def _phi(self, j, Z, rows):
        return np.hstack([self.p.psi[j][rows], Z @ self.zmaps[j].T])

    def value(self, Z, rows) -> np.ndarray:
        p = self.p
        w = self.weights[rows]
        total = np.zeros(len(rows))
        z = p.unpack(Z)
        for i in p.tasks:
            if self.mode == EXACT:
                total += w * p.first[i].neg_log_likelihood(self.theta[i], p.psi[i][rows], z[i])
            else:
                d = z[i] - self.zhat[rows][:, p.slices[i]]
                total += w * np.sum(d * d, axis=1)
        for j in p.tasks:
            m = p.masks[j][rows]
            if not m.any():
                continue
            phi = self._phi(j, Z, rows)
            if self.mode == EXACT:
                v = p.second[j].neg_log_likelihood(self.omega[j], phi, p.second_targets(j, rows))
            else:
                r = self.targets[j][rows] - self.surrogates[j].predict(phi)
                v = np.sum(r * r, axis=1)
            total += np.where(m, v, 0.0)
        return total

    def gradient(self, Z, rows) -> np.ndarray:
        p = self.p
        w = self.weights[rows]
        G = np.zeros_like(Z)
        z = p.unpack(Z)
        for i in p.tasks:
            if self.mode == EXACT:
                g = p.first[i].grad_nll_wrt_target(self.theta[i], p.psi[i][rows], z[i])
            else:
                g = 2.0 * (z[i] - self.zhat[rows][:, p.slices[i]])
            G[:, p.slices[i]] += w[:, None] * g
        for j in p.tasks:
            m = p.masks[j][rows]
            if not m.any():
                continue
            phi = self._phi(j, Z, rows)
            if self.mode == EXACT:
                gphi = p.second[j].grad_nll_wrt_input(self.omega[j], phi, p.second_targets(j, rows))
            else:
                sg = self.surrogates[j]
                r = sg.predict(phi) - self.targets[j][rows]
                gphi = 2.0 * r @ sg.weights
            gz = gphi[:, self.psi_dims[j]:] @ self.zmaps[j]
            G += np.where(m[:, None], gz, 0.0)
        return G

    def is_quadratic(self) -> bool:
        if self.mode == SURROGATE:
            return True
        kinds = [getattr(c, "kind", None) for c in list(self.p.first.values()) + list(self.p.second.values())]
        return all(k == RIDGE for k in kinds)

    def solve_quadratic(self, rows, zhat_rows) -> np.ndarray:
        """Exact minimizer for quadratic objectives via the per-sample normal equations."""
        p = self.p
        n, D = len(rows), p.zdim
        w = self.weights[rows]
        scale = 1.0 if self.mode == EXACT else 2.0
        H = np.repeat(np.eye(D)[None, :, :], n, axis=0) * (scale * w)[:, None, None]
        rhs = (scale * w)[:, None] * zhat_rows
        for j in p.tasks:
            m = p.masks[j][rows].astype(float)
            if not m.any():
                continue
            dj = self.psi_dims[j]
            if self.mode == EXACT:
                W = self.omega[j].weights
                A = W[:, dj:-1] @ self.zmaps[j]  # (1, D)
                c = p.psi[j][rows] @ W[:, :dj].T + W[:, -1]  # (n, 1)
                t = p.second_targets(j, rows)[:, None]
            else:
                sg = self.surrogates[j]
                A = sg.weights[:, dj:] @ self.zmaps[j]
                c = p.psi[j][rows] @ sg.weights[:, :dj].T + sg.bias
                t = self.targets[j][rows]
            H += (scale * m)[:, None, None] * (A.T @ A)[None, :, :]
            rhs += (scale * m)[:, None] * ((t - c) @ A)
        return np.linalg.solve(H, rhs[:, :, None])[:, :, 0]


def _zero_sum_projector(problem: _Problem):
    """Multinomial latents are identified only up to a shift; move within the zero-sum subspace."""
    blocks = [problem.slices[i] for i in problem.tasks if getattr(problem.first[i], "kind", None) == MULTINOMIAL]
    if not blocks:
        return None

    def project(G):
        G = G.copy()
        for sl in blocks:
            G[:, sl] -= G[:, sl].mean(axis=1, keepdims=True)
        return G

    return project


def resolve_mode(problem: _Problem, mode: str) -> str:
    exact_ok = all(has_likelihood(c) for c in problem.second.values()) and all(
        has_likelihood(c) and callable(getattr(c, "grad_nll_wrt_target", None)) for c in problem.first.values()
    )
    if mode == AUTO:
        return EXACT if exact_ok else SURROGATE
    if mode == EXACT and not exact_ok:
        raise CapabilityError("exact feedback needs likelihoods and their gradients for every classifier")
    return mode


def _fit_surrogates(problem: _Problem, omega, zhat_packed, config: FeedbackConfig):
    surrogates, targets = {}, {}
    for j in problem.tasks:
        spec = problem.specs[j - 1]
        rows = np.flatnonzero(problem.masks[j])
        zmap = _z_map(problem, j)
        design = np.hstack([problem.psi[j][rows], zhat_packed[rows] @ zmap.T])
        truth = _encode(problem.second[j], spec, problem.labels[j][rows], config.margin)
        if config.surrogate_target == "model_output":
            fit_target = np.asarray(problem.second[j].infer(omega[j], design), dtype=float)
        else:
            fit_target = truth
        if config.beta == "auto":
            beta = select_beta(design, fit_target, seed=config.seed + j, max_iter=config.lasso_max_iter)
        else:
            beta = float(config.beta)
        # optimality tolerance relative to the problem's gradient scale
        tol = 1e-6 * max(1.0, lasso_null_beta(design, fit_target))
        surrogates[j] = lasso_fit(design, fit_target, beta, target_task=j, tol=tol,
                                  max_iter=config.lasso_max_iter, warn=False)
        full = np.zeros((len(problem.data), truth.shape[1]))
        full[rows] = truth
        targets[j] = full
    return surrogates, targets


def _feedback(problem: _Problem, theta, omega, latents: LatentState | None, weights, mode, trace=None):
    """Re-estimate every sample's latents with the parameters fixed.

    Each sample starts from its current first-layer prediction, or from its
    previous latents when those score better, and descends its own objective
    (solved exactly when the objective is quadratic). Samples with zero
    importance weight keep their current latents. A sample whose descent
    fails numerically also keeps the prediction.
    """
    cfg = problem.config
    zhat = problem.pack({i: np.asarray(problem.first[i].infer(theta[i], problem.psi[i]), dtype=float) for i in problem.tasks})
    surrogates = targets = None
    if mode == SURROGATE:
        surrogates, targets = _fit_surrogates(problem, omega, zhat, cfg)
        loose = [j for j, sg in surrogates.items() if not sg.converged]
        if loose:
            log.info("surrogate fits for tasks %s stopped at the iteration cap", loose)
            if trace is not None:
                trace.surrogate_unconverged += len(loose)
    obj = FeedbackObjective(problem, theta, omega, mode, weights, surrogates, zhat, targets)
    n = len(problem.data)
    live = np.flatnonzero(np.asarray(weights) > 0)
    prev = problem.pack(latents.z) if latents is not None and latents.complete else None
    chunks = [live[k : k + cfg.chunk_size] for k in range(0, len(live), cfg.chunk_size)]
    project = _zero_sum_projector(problem) if mode == EXACT else None

    def solve(rows):
        if obj.is_quadratic():
            return obj.solve_quadratic(rows, zhat[rows]), np.zeros(len(rows), dtype=bool)
        z0 = zhat[rows].copy()
        if prev is not None:
            f_hat = obj.value(z0, rows)
            f_prev = obj.value(prev[rows], rows)
            better = f_prev < f_hat
            z0[better] = prev[rows][better]
        res = minimize_batch(lambda Z, r: obj.value(Z, rows[r]), lambda Z, r: obj.gradient(Z, rows[r]),
                             z0, cfg.inner, project)
        return res.x, res.failed

    results = _map(solve, chunks, cfg.n_jobs)
    # zero-weight samples carry no first-layer term; they keep their latents
    Z = zhat.copy() if prev is None else prev.copy()
    failures = 0
    for rows, (zr, failed) in zip(chunks, results):
        ok = ~failed & np.all(np.isfinite(zr), axis=1)
        Z[rows[ok]] = zr[ok]
        Z[rows[~ok]] = zhat[rows[~ok]]
        failures += int((~ok).sum())
    if failures:
        log.warning("feedback failed numerically for %d samples; kept first-layer predictions", failures)
        if trace is not None:
            trace.feedback_failures += failures
    state = LatentState(problem.data.sample_ids.copy(), problem.unpack(Z),
                        {i: np.ones(n, dtype=bool) for i in problem.tasks}, source="feedback")
    return state, obj


def joint_objective(problem: _Problem, theta, omega, latents: LatentState, weights) -> float:
    """Sum of every classifier's regularized training objective at the given latents."""
    try:
        total = 0.0
        for i in problem.tasks:
            total += problem.first[i].objective(theta[i], problem.psi[i], latents.z[i], weights)
        for j in problem.tasks:
            rows = np.flatnonzero(problem.masks[j])
            phi = _phi(problem, j, rows, {i: latents.z[i][rows] for i in problem.tasks})
            total += problem.second[j].objective(omega[j], phi, problem.second_targets(j, rows))
        return float(total)
    except (AttributeError, TypeError):
        return float("nan")


# -- public single-step entry points ---------------------------------------------------


def _problem_for(model: CascadeModel, dataset: MultiTaskDataset, config: FeedbackConfig) -> _Problem:
    return _Problem(dataset.sorted_by_id(), model.first_layer, model.second_layer, model.means, model.scales,
                    model.adapters, config)


def feed_forward_step(dataset: MultiTaskDataset, latents: LatentState, pi=None, config: FeedbackConfig = FeedbackConfig(),
                      kinds=None, adapters=None, previous: CascadeModel | None = None):
    """One feed-forward half-step on ``dataset`` (sorted by sample id).

    ``latents`` straight from :func:`initialize_latents` gives the CCM fit.
    Returns ``(model, latents)``: the refit cascade (its Theta and Omega) and
    the complete latent state its second layer was fit on.
    """
    data = dataset.sorted_by_id()
    if previous is not None:
        first, second = previous.first_layer, previous.second_layer
        means, scales, adapters = previous.means, previous.scales, previous.adapters
    else:
        first, second = build_classifiers(data.specs, kinds, config.l2, config.inner)
        means, scales = fit_standardization(data)
    problem = _Problem(data, first, second, means, scales, adapters, config)
    pi = resolve_pi(data, config) if pi is None else tuple(pi)
    prev = (previous.theta, previous.omega) if previous is not None else None
    theta, omega, state = _feed_forward(problem, latents, importance_weights(data, pi), prev)
    return problem.model(theta, omega), state


def feedback_step(model: CascadeModel, dataset: MultiTaskDataset, config: FeedbackConfig = FeedbackConfig(),
                  latents: LatentState | None = None, pi=None) -> LatentState:
    """One feedback half-step: per-sample MAP latents with the model fixed."""
    problem = _problem_for(model, dataset, config)
    mode = resolve_mode(problem, config.feedback_mode)
    pi = resolve_pi(problem.data, config) if pi is None else tuple(pi)
    state, _ = _feedback(problem, model.theta, model.omega, latents, importance_weights(problem.data, pi), mode)
    return state


def joint_objective_of(model: CascadeModel, dataset: MultiTaskDataset, latents: LatentState, pi=None,
                       config: FeedbackConfig = FeedbackConfig()) -> float:
    """Joint training objective of a model at the given latents."""
    problem = _problem_for(model, dataset, config)
    pi = resolve_pi(problem.data, config) if pi is None else tuple(pi)
    return joint_objective(problem, model.theta, model.omega, latents, importance_weights(problem.data, pi))



def feedback_objective(model: CascadeModel, sample: Sample, z, mode=EXACT, surrogates=None,
                       first_layer_weight=1.0, labels=None) -> float:
    """Feedback objective of one sample at candidate latents ``z``.

    ``z`` is a list of per-task latent vectors (or their concatenation).
    ``labels`` defaults to the sample's own labels; only labeled tasks
    contribute second-layer terms. Surrogate mode needs ``surrogates``
    (task -> SurrogateModel) and measures the first-layer term against the
    model's current first-layer prediction.
    """
    obj, Z = _single_sample_objective(model, sample, z, mode, surrogates, first_layer_weight, labels)
    return float(obj.value(Z, np.array([0]))[0])


def feedback_gradient(model: CascadeModel, sample: Sample, z, mode=EXACT, surrogates=None,
                      first_layer_weight=1.0, labels=None) -> np.ndarray:
    obj, Z = _single_sample_objective(model, sample, z, mode, surrogates, first_layer_weight, labels)
    return obj.gradient(Z, np.array([0]))[0]


def _single_sample_objective(model, sample, z, mode, surrogates, first_layer_weight, labels):
    labels = dict(sample.labels if labels is None else labels)
    ds = MultiTaskDataset(
        model.specs, [sample.sample_id],
        {j: np.atleast_2d(sample.features[j]) for j in model.task_ids},
        {j: np.array([labels.get(j, np.nan)], dtype=float) for j in model.task_ids},
    )
    cfg = FeedbackConfig()
    problem = _Problem(ds, model.first_layer, model.second_layer, model.means, model.scales, model.adapters, cfg)
    if mode == EXACT:
        resolve_mode(problem, EXACT)
    elif mode != SURROGATE:
        raise ConfigError(f"unknown feedback mode {mode!r}")
    if isinstance(z, (list, tuple)):
        Z = np.concatenate([np.ravel(v) for v in z])[None, :]
    else:
        Z = np.asarray(z, dtype=float).reshape(1, -1)
    if Z.shape[1] != problem.zdim:
        raise ContractError(f"latents have {Z.shape[1]} entries, the cascade needs {problem.zdim}")
    zhat = problem.pack(first_layer_outputs(model, {i: np.atleast_2d(sample.features[i]) for i in model.task_ids}))
    targets = None
    if mode == SURROGATE:
        if surrogates is None:
            raise ContractError("surrogate mode needs fitted surrogate models")
        targets = {j: _encode(model.second_layer[j], model.specs[j - 1], [labels.get(j, 0.0)], cfg.margin)
                   for j in model.task_ids}
    obj = FeedbackObjective(problem, model.theta, model.omega, mode, np.array([first_layer_weight], dtype=float),
                            surrogates, zhat, targets)
    return obj, Z


# -- training loops ---------------------------------------------------------------------


def _evaluate(model: CascadeModel, dataset: MultiTaskDataset) -> dict:
    from .cascade import predict_dataset

    preds = predict_dataset(model, dataset)
    out = {}
    for spec in dataset.specs:
        j = spec.task_id
        m = dataset.labeled_mask(j)
        if not m.any():
            continue
        S, lab = preds[j]
        out[j] = task_metric(spec, S[m], lab[m], dataset.labels[j][m], dataset.sample_ids[m])
    return out


def train_feccm(train: MultiTaskDataset, kinds=None, config: FeedbackConfig = FeedbackConfig(),
                holdout: MultiTaskDataset | None = None, adapters=None):
    """Train a feedback-enabled cascade; returns ``(model, trace)``.

    Runs the ground-truth initialization and one feed-forward step (the CCM
    model), then up to ``max_outer_iters`` feedback / feed-forward rounds.
    Exact mode stops early when the joint objective changes by less than
    ``tol`` (relative); surrogate mode when no task's hold-out metric moves by
    more than ``plateau_tol`` (relative). The hold-out metric is computed on
    ``holdout`` when given, otherwise on the training data.
    """
    data = train.sorted_by_id()
    for j in data.task_ids:
        if not data.labeled_mask(j).any():
            raise EmptyFitError(f"task {j} has no labeled training samples")
    first, second = build_classifiers(data.specs, kinds, config.l2, config.inner)
    means, scales = fit_standardization(data)
    problem = _Problem(data, first, second, means, scales, adapters, config)
    mode = resolve_mode(problem, config.feedback_mode)
    pi = resolve_pi(data, config)
    weights = importance_weights(data, pi)
    eval_set = holdout if holdout is not None else data
    trace = TrainingTrace(pi=pi, mode=mode)

    t0 = time.perf_counter()
    latents = initialize_latents(data, first, config.margin)
    theta, omega, latents = _feed_forward(problem, latents, weights)
    model = problem.model(theta, omega)
    obj = joint_objective(problem, theta, omega, latents, weights) if mode == EXACT else float("nan")
    trace.half_steps.append(("feed_forward_0", obj))
    trace.record(0, obj, _evaluate(model, eval_set), time.perf_counter() - t0)

    for it in range(1, config.max_outer_iters + 1):
        latents, _ = _feedback(problem, theta, omega, latents, weights, mode, trace)
        if mode == EXACT:
            trace.half_steps.append((f"feedback_{it}", joint_objective(problem, theta, omega, latents, weights)))
        theta, omega, latents = _feed_forward(problem, latents, weights, previous=(theta, omega))
        model = problem.model(theta, omega)
        new_obj = joint_objective(problem, theta, omega, latents, weights) if mode == EXACT else float("nan")
        trace.half_steps.append((f"feed_forward_{it}", new_obj))
        metrics = _evaluate(model, eval_set)
        prev_metrics = trace.metrics[-1]
        trace.record(it, new_obj, metrics, time.perf_counter() - t0)
        if mode == EXACT:
            if abs(obj - new_obj) < config.tol * max(abs(obj), 1e-300):
                trace.converged = True
                break
            obj = new_obj
        elif all(abs(metrics[j] - prev_metrics[j]) < config.plateau_tol * max(abs(prev_metrics[j]), 1e-12)
                 for j in metrics):
            trace.converged = True
            break
    return model, trace


def train_ccm(train: MultiTaskDataset, kinds=None, config: FeedbackConfig = FeedbackConfig(),
              adapters=None) -> CascadeModel:
    """CCM baseline: first layer on ground truth, second layer on first-layer outputs."""
    model, _ = train_feccm(train, kinds, replace(config, max_outer_iters=0, pi=None, instantiation=UNIFIED,
                                                 target_task=None), adapters=adapters)
    return model


# -- target-specific importance factors ------------------------------------------------


def default_pi_grid(dataset: MultiTaskDataset, k: int) -> list:
    """Unified point, the target axis, their midpoint, and every axis point."""
    n = len(dataset.task_ids)
    u = np.array(unified_pi(dataset))
    e = [np.eye(n)[j] for j in range(n)]
    cands = [u, e[k - 1], 0.5 * u + 0.5 * e[k - 1]] + e
    grid, seen = [], set()
    for c in cands:
        key = tuple(np.round(c, 12))
        if key not in seen:
            seen.add(key)
            grid.append(tuple(float(v) for v in c))
    return grid


def choose_pi(grid: Sequence[Sequence[float]], scores: Sequence[float], unified: Sequence[float]) -> tuple:
    """Grid point with the highest score; ties go to the unified point, then lexicographic order."""
    if len(grid) == 0:
        raise ContractError("empty pi grid")
    scores = np.asarray(scores, dtype=float)
    best = scores.max()
    tied = [tuple(g) for g, s in zip(grid, scores) if s == best]
    for g in tied:
        if np.allclose(g, unified, atol=1e-12, rtol=0):
            return g
    return min(tied)


def select_pi_target_specific(dataset: MultiTaskDataset, k: int, pi_grid=None, folds: int = 3,
                              config: FeedbackConfig = FeedbackConfig()) -> tuple:
    """Cross-validated importance factors maximizing task ``k``'s hold-out metric."""
    data = dataset.sorted_by_id()
    data.spec(k)
    grid = default_pi_grid(data, k) if pi_grid is None else [tuple(float(v) for v in g) for g in pi_grid]
    if not grid:
        raise ContractError("empty pi grid")
    for g in grid:
        if len(g) != len(data.task_ids) or any(v < 0 for v in g) or abs(sum(g) - 1.0) > 1e-9:
            raise ContractError(f"grid point {g} is not on the simplex")
    parts = split(data, [1.0 / folds] * folds, config.seed)
    spec = data.spec(k)
    sign = 1.0 if higher_is_better(spec.metric) else -1.0
    inner = replace(config, instantiation=UNIFIED, target_task=None, pi_grid=None)
    scores = []
    for g in grid:
        vals = []
        for f in range(folds):
            fit = concat([parts[q] for q in range(folds) if q != f])
            model, _ = train_feccm(fit, None, replace(inner, pi=g))
            vals.append(_evaluate(model, parts[f].subset(np.flatnonzero(parts[f].labeled_mask(k))))[k])
        scores.append(sign * float(np.mean(vals)))
    return choose_pi(grid, scores, unified_pi(data))
