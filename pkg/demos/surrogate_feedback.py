"""Feedback through a sparse linear surrogate of the second layer.

When a second-layer classifier cannot expose a likelihood, the feedback step
fits a lasso map from the second layer's inputs to its scores and uses that
map in place of the classifier. This script compares the exact and surrogate
feedback on the same data, and shows how the lasso weight changes sparsity.

    python demos/surrogate_feedback.py
"""
import numpy as np

from feccm.harness import SyntheticConfig, evaluate, generate_synthetic
from feccm.optimize import lasso_fit, lasso_null_beta
from feccm.training import FeedbackConfig, train_feccm

train, test = generate_synthetic(SyntheticConfig(rho=0.7, train_per_task=300, test_per_task=300, seed=1))

for mode in ("exact", "surrogate"):
    model, trace = train_feccm(train, config=FeedbackConfig(max_outer_iters=3, feedback_mode=mode))
    rep = evaluate(model, test, method=mode, n_boot=0)
    print(f"{mode:9s} mode={trace.mode:9s} " + "  ".join(f"task {j}: {rep.value(j):.4f}" for j in sorted(rep.tasks)))

# sparsity of the lasso map as the weight grows towards the all-zero bound
rng = np.random.default_rng(0)
X = rng.normal(size=(200, 12))
y = X[:, :3] @ np.array([2.0, -1.0, 0.5]) + 0.1 * rng.normal(size=200)
top = lasso_null_beta(X, y)
print(f"\nall coefficients vanish from beta = {top:.2f}")
for frac in (0.0, 0.01, 0.1, 0.5, 1.0):
    fit = lasso_fit(X, y, frac * top)
    print(f"  beta = {frac:4.2f} * bound: {int(np.count_nonzero(fit.alpha[:, :-1]))} non-zero weights")
