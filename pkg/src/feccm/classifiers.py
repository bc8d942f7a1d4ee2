"""Black-box classifier contract and three convex built-ins.

Built-ins are linear models with weights of shape ``(output_dim, input_dim + 1)``
(last column = bias):

* ``multinomial_logistic`` - one unnormalized log-odds score per class,
* ``binary_logistic`` - a single log-odds score for class 1,
* ``ridge`` - a scalar prediction.

Logistic kinds learn from hard labels or from score vectors. A score target
``z`` stands for the soft label ``softmax(z)`` (``sigmoid(z)`` for the binary
kind); its negative log-likelihood is the KL divergence from that soft label
to the model distribution plus a weak Gaussian tie ``SCORE_TIE/2 * |z - s|^2``
between target and model scores (mean-centred for the multinomial kind, whose
scores are shift-invariant). The tie keeps latent scores finite when they are
optimized; without it a score target can drift to infinity at bounded cost.
For a hard label the NLL is the usual cross-entropy; for scores it is zero
exactly when the model reproduces them.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, EmptyFitError, NumericError
from .optimize import DescentConfig, minimize

log = logging.getLogger(__name__)

MULTINOMIAL = "multinomial_logistic"
BINARY = "binary_logistic"
RIDGE = "ridge"
KINDS = (MULTINOMIAL, BINARY, RIDGE)
DEFAULT_L2 = 1e-2

# score margin used when a degenerate (single-class) fit returns a constant classifier
_CONSTANT_MARGIN = 4.0
# Gaussian tie between score targets and model scores (see module docstring); unit
# variance, the same noise model a ridge latent gets
SCORE_TIE = 1.0

_ALIASES = {
    "multinomial": MULTINOMIAL,
    "multinomiallogistic": MULTINOMIAL,
    "binary": BINARY,
    "binarylogistic": BINARY,
    "logistic": BINARY,
    "ridgeregression": RIDGE,
}


def canonical_kind(kind: str) -> str:
    k = str(kind).lower().replace("-", "").replace(" ", "")
    k = _ALIASES.get(k.replace("_", ""), k)
    if k not in KINDS:
        raise ContractError(f"unknown classifier kind {kind!r}")
    return k


@dataclass(frozen=True, eq=False)
class ClassifierParams:
    kind: str
    weights: np.ndarray
    l2: float = DEFAULT_L2

    def __post_init__(self):
        w = np.array(self.weights, dtype=float, copy=True)
        if w.ndim != 2 or w.shape[1] < 1:
            raise ContractError("weights must be a matrix output_dim x (input_dim + 1)")
        if not np.all(np.isfinite(w)):
            raise NumericError("classifier weights must be finite")
        if self.l2 < 0:
            raise ContractError("l2 penalty must be non-negative")
        kind = canonical_kind(self.kind)
        if kind != MULTINOMIAL and w.shape[0] != 1:
            raise ContractError(f"{kind} has a single output row")
        w.setflags(write=False)
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "kind", kind)

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1] - 1

    @property
    def output_dim(self) -> int:
        return self.weights.shape[0]

    def __eq__(self, other):
        if not isinstance(other, ClassifierParams):
            return NotImplemented
        return self.kind == other.kind and self.l2 == other.l2 and np.array_equal(self.weights, other.weights)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "l2": self.l2,
            "shape": list(self.weights.shape),
            "weights": [float(v) for v in self.weights.ravel()],
        }

    @classmethod
    def from_dict(cls, d) -> "ClassifierParams":
        w = np.asarray(d["weights"], dtype=float).reshape(d["shape"])
        return cls(kind=d["kind"], weights=w, l2=float(d["l2"]))


def zero_params(kind, input_dim, output_dim=1, l2=DEFAULT_L2) -> ClassifierParams:
    kind = canonical_kind(kind)
    rows = output_dim if kind == MULTINOMIAL else 1
    return ClassifierParams(kind, np.zeros((rows, input_dim + 1)), l2)


# -- elementwise helpers ---------------------------------------------------------


def log_softmax(s, axis=-1):
    s = np.asarray(s, dtype=float)
    m = np.max(s, axis=axis, keepdims=True)
    z = s - m
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def softmax(s, axis=-1):
    return np.exp(log_softmax(s, axis=axis))


def _log_sigmoid(s):
    return -np.logaddexp(0.0, -s)


def sigmoid(s):
    s = np.asarray(s, dtype=float)
    return np.exp(_log_sigmoid(s))


# -- batched primitives ----------------------------------------------------------


def _check_inputs(params: ClassifierParams, X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != params.input_dim:
        raise ContractError(f"input has dimension {X.shape[1]}, classifier expects {params.input_dim}")
    return X


def scores(params: ClassifierParams, X) -> np.ndarray:
    """Raw scores ``W [x; 1]`` for every row of ``X``; shape ``(n, output_dim)``."""
    X = _check_inputs(params, X)
    W = params.weights
    return X @ W[:, :-1].T + W[:, -1]


def _is_label_target(kind, T) -> bool:
    return kind != RIDGE and np.asarray(T).ndim == 1


def _prepare_targets(params_kind, T, n, out_dim):
    """Return (is_labels, array) with labels as ints (n,) or scores as (n, out_dim)."""
    T = np.asarray(T, dtype=float)
    if params_kind == RIDGE:
        T = T.reshape(n, 1) if T.size == n else T
        if T.shape != (n, 1):
            raise ContractError(f"ridge targets must have one value per row, got shape {T.shape}")
        return False, T
    if T.ndim == 1:
        if T.shape[0] != n:
            raise ContractError(f"{T.shape[0]} targets for {n} inputs")
        labels = T.astype(np.int64)
        if np.any(labels != T):
            raise ContractError("label targets must be integers")
        k = out_dim if params_kind == MULTINOMIAL else 2
        if np.any((labels < 0) | (labels >= k)):
            raise ContractError(f"label targets must lie in 0..{k - 1}")
        return True, labels
    if T.shape != (n, out_dim):
        raise ContractError(f"score targets must have shape {(n, out_dim)}, got {T.shape}")
    return False, T


def _nll_and_dscore(kind, S, is_labels, T):
    """Per-row NLL and its derivative with respect to the scores."""
    n = S.shape[0]
    if kind == RIDGE:
        r = S - T
        return 0.5 * np.sum(r * r, axis=1), r
    if kind == MULTINOMIAL:
        logq = log_softmax(S)
        q = np.exp(logq)
        if is_labels:
            nll = -logq[np.arange(n), T]
            d = q.copy()
            d[np.arange(n), T] -= 1.0
            return nll, d
        logp = log_softmax(T)
        p = np.exp(logp)
        r = S - T
        r = r - r.mean(axis=1, keepdims=True)
        return np.sum(p * (logp - logq), axis=1) + 0.5 * SCORE_TIE * np.sum(r * r, axis=1), q - p + SCORE_TIE * r
    # binary
    s = S[:, 0]
    q = sigmoid(s)
    if is_labels:
        y = T.astype(float)
        nll = -(y * _log_sigmoid(s) + (1.0 - y) * _log_sigmoid(-s))
        return nll, (q - y)[:, None]
    z = T[:, 0]
    p = sigmoid(z)
    lp, lnp = _log_sigmoid(z), _log_sigmoid(-z)
    lq, lnq = _log_sigmoid(s), _log_sigmoid(-s)
    kl = np.maximum(p * (lp - lq) + (1.0 - p) * (lnp - lnq), 0.0)
    return kl + 0.5 * SCORE_TIE * (s - z) ** 2, (q - p + SCORE_TIE * (s - z))[:, None]


def nll_batch(params: ClassifierParams, X, T) -> np.ndarray:
    X = _check_inputs(params, X)
    is_labels, T = _prepare_targets(params.kind, T, X.shape[0], params.output_dim)
    return _nll_and_dscore(params.kind, scores(params, X), is_labels, T)[0]


def grad_input_batch(params: ClassifierParams, X, T) -> np.ndarray:
    """Gradient of each row's NLL with respect to that row's input."""
    X = _check_inputs(params, X)
    is_labels, T = _prepare_targets(params.kind, T, X.shape[0], params.output_dim)
    _, d = _nll_and_dscore(params.kind, scores(params, X), is_labels, T)
    return d @ params.weights[:, :-1]


def grad_target_batch(params: ClassifierParams, X, T) -> np.ndarray:
    """Gradient of each row's NLL with respect to a score-valued target."""
    X = _check_inputs(params, X)
    is_labels, T = _prepare_targets(params.kind, T, X.shape[0], params.output_dim)
    if is_labels:
        raise ContractError("target gradient needs score-valued targets")
    S = scores(params, X)
    if params.kind == RIDGE:
        return T - S
    if params.kind == MULTINOMIAL:
        logp = log_softmax(T)
        p = np.exp(logp)
        a = logp - log_softmax(S)
        r = T - S
        r = r - r.mean(axis=1, keepdims=True)
        return p * (a - np.sum(p * a, axis=1, keepdims=True)) + SCORE_TIE * r
    z, s = T[:, 0], S[:, 0]
    p = sigmoid(z)
    return (p * (1.0 - p) * (z - s) + SCORE_TIE * (z - s))[:, None]


# -- single-input operations -------------------------------------------------------


def infer(params: ClassifierParams, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ContractError("infer takes a single input vector")
    return scores(params, x)[0]


def label_from_scores(kind, s):
    """Argmax with ties to the lowest class index; the value itself for ridge."""
    kind = canonical_kind(kind)
    s = np.asarray(s, dtype=float)
    if kind == RIDGE:
        return float(s.reshape(-1)[0])
    if kind == BINARY:
        return int(s.reshape(-1)[0] > 0)
    return int(np.argmax(s))


def labels_from_scores(kind, S) -> np.ndarray:
    kind = canonical_kind(kind)
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if kind == RIDGE:
        return S[:, 0].copy()
    if kind == BINARY:
        return (S[:, 0] > 0).astype(np.int64)
    return np.argmax(S, axis=1)


def predict_label(params: ClassifierParams, x):
    return label_from_scores(params.kind, infer(params, x))


def neg_log_likelihood(params: ClassifierParams, x, target) -> float:
    x = np.asarray(x, dtype=float)
    t = np.asarray(target, dtype=float)
    T = t.reshape(1) if (params.kind != RIDGE and t.ndim == 0) else t.reshape(1, -1)
    return float(nll_batch(params, x[None, :], T)[0])


def grad_nll_wrt_input(params: ClassifierParams, x, target) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    t = np.asarray(target, dtype=float)
    T = t.reshape(1) if (params.kind != RIDGE and t.ndim == 0) else t.reshape(1, -1)
    return grad_input_batch(params, x[None, :], T)[0]


def grad_nll_wrt_target(params: ClassifierParams, x, target) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return grad_target_batch(params, x[None, :], np.asarray(target, dtype=float).reshape(1, -1))[0]


# -- learning ----------------------------------------------------------------------


def training_objective(params: ClassifierParams, X, T, sample_weights=None) -> float:
    """``sum_s w_s NLL_s + l2/2 ||W||^2`` with the bias column unpenalized."""
    X = _check_inputs(params, X)
    w = np.ones(X.shape[0]) if sample_weights is None else np.asarray(sample_weights, dtype=float)
    W = params.weights[:, :-1]
    return float(np.dot(w, nll_batch(params, X, T)) + 0.5 * params.l2 * np.sum(W * W))


def _validate_fit_inputs(X, T, w):
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n = X.shape[0]
    if n < 1:
        raise EmptyFitError("learn needs at least one sample")
    w = np.ones(n) if w is None else np.asarray(w, dtype=float).reshape(-1)
    if len(w) != n or len(np.asarray(T)) != n:
        raise ContractError("inputs, targets and sample_weights must have equal length")
    if not np.all(np.isfinite(X)) or not np.all(np.isfinite(np.asarray(T, dtype=float))):
        raise NumericError("learn received non-finite inputs or targets")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise ContractError("sample weights must be finite and non-negative")
    if not np.any(w > 0):
        raise EmptyFitError("all sample weights are zero")
    return X, w


def learn(
    inputs,
    targets,
    sample_weights=None,
    kind=MULTINOMIAL,
    l2=DEFAULT_L2,
    seed=0,
    output_dim=None,
    init: ClassifierParams | None = None,
    config: DescentConfig = DescentConfig(),
) -> ClassifierParams:
    """Fit a built-in classifier by minimizing the weighted regularized NLL.

    Ridge is solved exactly; the logistic kinds by gradient descent from zero
    weights (or from ``init``, used for warm starts). Samples with zero weight
    are removed before fitting. ``seed`` is accepted for the black-box
    contract; the built-ins are deterministic without it.
    """
    kind = canonical_kind(kind)
    X, w = _validate_fit_inputs(inputs, targets, sample_weights)
    T = np.asarray(targets, dtype=float)
    keep = w > 0
    if not keep.all():
        X, T, w = X[keep], T[keep], w[keep]
    n, d = X.shape
    if kind == MULTINOMIAL:
        if output_dim is None:
            output_dim = T.shape[1] if T.ndim == 2 else (init.output_dim if init is not None else int(T.max()) + 1)
        k = int(output_dim)
    else:
        k = 1
    is_labels, T = _prepare_targets(kind, T, n, k)
    Xa = np.hstack([X, np.ones((n, 1))])

    if kind == RIDGE:
        sw = np.sqrt(w)
        A = np.vstack([Xa * sw[:, None], np.sqrt(l2) * np.eye(d, d + 1)]) if l2 > 0 else Xa * sw[:, None]
        b = np.concatenate([T[:, 0] * sw, np.zeros(d)]) if l2 > 0 else T[:, 0] * sw
        coef = np.linalg.lstsq(A, b, rcond=None)[0]
        return ClassifierParams(RIDGE, coef[None, :], l2)

    if is_labels and init is None and len(np.unique(T)) == 1:
        c = int(T[0])
        W = np.zeros((k, d + 1))
        if kind == MULTINOMIAL:
            W[:, -1] = -_CONSTANT_MARGIN
            W[c, -1] = _CONSTANT_MARGIN
        else:
            W[0, -1] = 2.0 * _CONSTANT_MARGIN if c == 1 else -2.0 * _CONSTANT_MARGIN
        log.warning("only class %d observed; returning a constant-score classifier", c)
        return ClassifierParams(kind, W, l2)

    shape = (k, d + 1)
    penal = np.ones(shape)
    penal[:, -1] = 0.0

    def objective(theta):
        W = theta.reshape(shape)
        S = Xa @ W.T
        nll, _ = _nll_and_dscore(kind, S, is_labels, T)
        return float(np.dot(w, nll) + 0.5 * l2 * np.sum(penal * W * W))

    def gradient(theta):
        W = theta.reshape(shape)
        S = Xa @ W.T
        _, dS = _nll_and_dscore(kind, S, is_labels, T)
        return ((dS * w[:, None]).T @ Xa + l2 * penal * W).ravel()

    if init is not None:
        if init.kind != kind or init.weights.shape != shape:
            raise ContractError("warm-start parameters do not match the problem")
        theta0 = init.weights.ravel().copy()
    else:
        theta0 = np.zeros(k * (d + 1))
    theta, _ = minimize(objective, gradient, theta0, config)
    return ClassifierParams(kind, theta.reshape(shape), l2)


class BuiltinClassifier:
    """A built-in kind presented through the black-box contract.

    External classifiers plug into the cascade by providing the same
    ``learn`` / ``infer`` methods; ``neg_log_likelihood``,
    ``grad_nll_wrt_input`` and ``grad_nll_wrt_target`` are optional and only
    needed for exact feedback. ``accepts_scores`` and ``supports_weights``
    tell the trainer whether targets must be thresholded to labels and whether
    importance factors must be realized by subsampling.
    """

    accepts_scores = True
    supports_weights = True
    serializable = True

    def __init__(self, kind, l2=DEFAULT_L2, config: DescentConfig = DescentConfig()):
        self.kind = canonical_kind(kind)
        self.l2 = float(l2)
        self.config = config

    def __repr__(self):
        return f"BuiltinClassifier({self.kind!r}, l2={self.l2})"

    def output_dim(self, n_classes: int | None) -> int:
        if self.kind == MULTINOMIAL:
            return int(n_classes)
        return 1

    def label_encoding(self, label, n_classes, margin):
        """Score vector standing for a ground-truth label."""
        if self.kind == RIDGE:
            return np.array([float(label)])
        if self.kind == BINARY:
            return np.array([margin * 2.0 if int(label) == 1 else -margin * 2.0])
        z = np.full(int(n_classes), -float(margin))
        z[int(label)] = float(margin)
        return z

    def learn(self, inputs, targets, sample_weights=None, seed=0, init=None, output_dim=None):
        return learn(inputs, targets, sample_weights, self.kind, self.l2, seed, output_dim, init, self.config)

    def infer(self, params, inputs):
        return scores(params, inputs)

    def labels(self, params, inputs):
        return labels_from_scores(self.kind, scores(params, inputs))

    def neg_log_likelihood(self, params, inputs, targets):
        return nll_batch(params, inputs, targets)

    def grad_nll_wrt_input(self, params, inputs, targets):
        return grad_input_batch(params, inputs, targets)

    def grad_nll_wrt_target(self, params, inputs, targets):
        return grad_target_batch(params, inputs, targets)

    def objective(self, params, inputs, targets, sample_weights=None):
        return training_objective(params, inputs, targets, sample_weights)


def has_likelihood(clf) -> bool:
    return all(callable(getattr(clf, name, None)) for name in ("neg_log_likelihood", "grad_nll_wrt_input"))


def make_classifier(spec, l2=DEFAULT_L2, config: DescentConfig = DescentConfig()):
    """Accept a kind name or an already constructed classifier object."""
    if isinstance(spec, str):
        return BuiltinClassifier(spec, l2, config)
    if not (callable(getattr(spec, "learn", None)) and callable(getattr(spec, "infer", None))):
        raise ContractError(f"{spec!r} does not implement learn/infer")
    return spec
