"""Builders shared by the test modules."""
import numpy as np

from feccm.cascade import CascadeModel
from feccm.classifiers import MULTINOMIAL, BuiltinClassifier, ClassifierParams


def make_model(rng, specs, kinds, scale=1.0, adapters=None, zero_z=False):
    """Random cascade; ``zero_z`` zeroes every second-layer weight on the latents."""
    theta, omega, first, second = {}, {}, {}, {}
    adapters = adapters or {}
    out = {}
    for s in specs:
        k = kinds[s.task_id]
        out[s.task_id] = s.n_classes if k == MULTINOMIAL else 1
    for s in specs:
        j, k = s.task_id, kinds[s.task_id]
        theta[j] = ClassifierParams(k, scale * rng.standard_normal((out[j], s.feature_dim + 1)))
        first[j] = second[j] = BuiltinClassifier(k)
    model = CascadeModel(tuple(specs), first, second, theta, {j: None for j in theta}, adapters=adapters)
    for s in specs:
        j = s.task_id
        W = scale * rng.standard_normal((out[j], model.second_input_dim(j) + 1))
        if zero_z:
            W[:, s.feature_dim:-1] = 0.0
        omega[j] = ClassifierParams(kinds[j], W)
    means = {s.task_id: rng.standard_normal(s.feature_dim) for s in specs}
    scales = {s.task_id: rng.uniform(0.5, 2, s.feature_dim) for s in specs}
    return CascadeModel(tuple(specs), first, second, theta, omega, means, scales, adapters)


def scalar_instance(seed, n=4):
    """One task with a scalar latent: binary logistic on even seeds, ridge on odd ones.

    Returns ``(model, dataset)`` with random parameters and ``n`` labeled samples.
    """
    from feccm.classifiers import BINARY, RIDGE
    from feccm.tasks import CATEGORICAL, REGRESSION, MultiTaskDataset, TaskSpec

    rng = np.random.default_rng(seed)
    d = int(rng.integers(1, 4))
    if seed % 2 == 0:
        spec, kind = TaskSpec(1, "t", CATEGORICAL, d, n_classes=2), BINARY
        y = rng.integers(0, 2, n).astype(float)
    else:
        spec, kind = TaskSpec(1, "t", REGRESSION, d), RIDGE
        y = rng.standard_normal(n) * 2
    model = make_model(rng, (spec,), {1: kind}, scale=1.5)
    data = MultiTaskDataset((spec,), np.arange(n), {1: rng.standard_normal((n, d))}, {1: y})
    return model, data


def ridge_instance(seed, n=6):
    """Three regression tasks, ridge everywhere, disjoint labels; returns ``(model, dataset)``."""
    from feccm.classifiers import RIDGE
    from feccm.tasks import REGRESSION, MultiTaskDataset, TaskSpec

    rng = np.random.default_rng(seed)
    specs = tuple(TaskSpec(j, f"r{j}", REGRESSION, int(rng.integers(1, 4))) for j in (1, 2, 3))
    model = make_model(rng, specs, {1: RIDGE, 2: RIDGE, 3: RIDGE})
    labels = {j: np.full(n, np.nan) for j in (1, 2, 3)}
    for r in range(n):
        labels[r % 3 + 1][r] = rng.standard_normal()
    feats = {s.task_id: rng.standard_normal((n, s.feature_dim)) for s in specs}
    return model, MultiTaskDataset(specs, np.arange(n), feats, labels)


def ridge_closed_form(model, sample, weight=1.0):
    """Minimizer of the all-ridge feedback objective from the normal equations, built by hand."""
    tasks = model.task_ids
    D = len(tasks)
    H = weight * np.eye(D)
    rhs = np.zeros(D)
    for k, i in enumerate(tasks):
        W = model.theta[i].weights[0]
        rhs[k] += weight * (W[:-1] @ model.standardize(i, sample.features[i]) + W[-1])
    for j, y in sample.labels.items():
        W = model.omega[j].weights[0]
        d = model.specs[j - 1].feature_dim
        a = W[d:-1]
        c = W[:d] @ model.standardize(j, sample.features[j]) + W[-1]
        H += np.outer(a, a)
        rhs += (y - c) * a
    return np.linalg.solve(H, rhs)


def scalar_objective_on_grid(model, sample, zs):
    """Feedback objective of a one-task, scalar-latent cascade at every grid value ``zs``."""
    from feccm.classifiers import nll_batch

    zs = np.asarray(zs, dtype=float)
    x = model.standardize(1, sample.features[1])
    X1 = np.repeat(x[None, :], zs.size, axis=0)
    total = nll_batch(model.theta[1], X1, zs[:, None])
    if 1 in sample.labels:
        phi = np.hstack([X1, zs[:, None]])
        y = sample.labels[1]
        T = np.full(zs.size, y) if model.omega[1].kind == "ridge" else np.full(zs.size, int(y))
        T = T[:, None] if model.omega[1].kind == "ridge" else T
        total = total + nll_batch(model.omega[1], phi, T)
    return total
