"""Synthetic correlated tasks, evaluation reports, baselines and experiments.

Synthetic tasks share a latent factor: for every sample a shared vector ``u``
and per-task private vectors ``v_i`` are drawn, task ``i`` sees
``h_i = sqrt(rho) u + sqrt(1 - rho) v_i`` only through noisy features
``psi_i = A_i h_i + eps_i``, and its label is a softmax draw (or a noisy linear
response) of ``B_i h_i``. With ``rho > 0`` one task's features and outputs are
genuinely informative about another task's label; with ``rho = 0`` the tasks
are independent.
"""
from __future__ import annotations

import json
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Mapping

import numpy as np
import yaml

from .cascade import CascadeModel, model_from_dict, model_to_dict, predict_dataset
from .classifiers import DEFAULT_L2, BuiltinClassifier, ClassifierParams, labels_from_scores
from .errors import ConfigError, ContractError, EmptyEvalError
from .metrics import confusion_matrix, task_metric
from .optimize import DescentConfig
from .tasks import CATEGORICAL, REGRESSION, MultiTaskDataset, TaskSpec
from .training import (
    ONE_GOAL,
    TARGET_SPECIFIC,
    UNIFIED,
    FeedbackConfig,
    default_kind,
    train_ccm,
    train_feccm,
)

log = logging.getLogger(__name__)

PER_TASK_SCHEMA = "feccm.per_task/1"
METHODS = ("base", "all_features_direct", "ccm", "feccm_unified", "feccm_one_goal", "feccm_target_specific")
COVERAGES = ("disjoint", "full", "mixed")


# -- synthetic generator --------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Parameters of the correlated-task generator.

    ``label_spaces`` lists one entry per task: an int ``K >= 2`` for a
    K-class task or ``"regression"``. ``coverage`` is ``"disjoint"`` (each
    training sample labeled for one task), ``"full"`` (labeled for all) or
    ``"mixed"`` (disjoint, plus every other label revealed with probability
    ``mixed_p``). Test samples are always fully labeled.
    """

    label_spaces: tuple = (3, 2, "regression")
    feature_dim: int = 8
    latent_dim: int = 4
    rho: float = 0.7
    feature_noise: float = 1.0
    label_noise: float = 0.5
    label_scale: float = 3.0
    train_per_task: int = 500
    test_per_task: int = 500
    coverage: str = "disjoint"
    mixed_p: float = 0.5
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "label_spaces", tuple(self.label_spaces))
        if not self.label_spaces:
            raise ConfigError("need at least one task")
        for ls in self.label_spaces:
            if ls != "regression" and not (isinstance(ls, int) and ls >= 2):
                raise ConfigError(f"label space must be an int >= 2 or 'regression', got {ls!r}")
        if not 0.0 <= self.rho <= 1.0:
            raise ConfigError("rho must lie in [0, 1]")
        if min(self.feature_dim, self.latent_dim, self.train_per_task, self.test_per_task) < 1:
            raise ConfigError("dimensions and sample counts must be positive")
        if self.feature_noise < 0 or self.label_noise < 0:
            raise ConfigError("noise levels must be non-negative")
        if self.coverage not in COVERAGES:
            raise ConfigError(f"coverage must be one of {COVERAGES}")
        if not 0.0 <= self.mixed_p <= 1.0:
            raise ConfigError("mixed_p must lie in [0, 1]")

    @property
    def n_tasks(self) -> int:
        return len(self.label_spaces)

    def specs(self) -> tuple:
        out = []
        for i, ls in enumerate(self.label_spaces, start=1):
            if ls == "regression":
                out.append(TaskSpec(i, f"task{i}", REGRESSION, self.feature_dim))
            else:
                out.append(TaskSpec(i, f"task{i}", CATEGORICAL, self.feature_dim, n_classes=int(ls)))
        return tuple(out)


def _draw(cfg: SyntheticConfig, rng, n, maps):
    """Features and full labels for ``n`` samples given the fixed task maps."""
    d = cfg.latent_dim
    u = rng.standard_normal((n, d))
    feats, labels = {}, {}
    for i, ls in enumerate(cfg.label_spaces, start=1):
        A, B = maps[i]
        v = rng.standard_normal((n, d))
        h = np.sqrt(cfg.rho) * u + np.sqrt(1.0 - cfg.rho) * v
        feats[i] = h @ A.T + cfg.feature_noise * rng.standard_normal((n, cfg.feature_dim))
        logits = h @ B.T
        if ls == "regression":
            labels[i] = logits[:, 0] + cfg.label_noise * rng.standard_normal(n)
        else:
            g = rng.gumbel(size=logits.shape)
            # softmax sampling at temperature label_noise (Gumbel-max)
            labels[i] = np.argmax(logits + cfg.label_noise * g, axis=1).astype(float)
    return feats, labels


def _task_maps(cfg: SyntheticConfig, rng):
    maps = {}
    for i, ls in enumerate(cfg.label_spaces, start=1):
        A = rng.standard_normal((cfg.feature_dim, cfg.latent_dim)) / np.sqrt(cfg.latent_dim)
        out = 1 if ls == "regression" else int(ls)
        B = rng.standard_normal((out, cfg.latent_dim)) * cfg.label_scale / np.sqrt(cfg.latent_dim)
        maps[i] = (A, B)
    return maps


def generate_synthetic(config: SyntheticConfig):
    """``(train, test)`` datasets; deterministic given the config (seed included)."""
    rng = np.random.default_rng(config.seed)
    maps = _task_maps(config, rng)
    n = config.n_tasks
    n_train = config.train_per_task * n
    n_test = config.test_per_task * n
    feats, labels = _draw(config, rng, n_train + n_test, maps)
    specs = config.specs()

    owner = np.repeat(np.arange(1, n + 1), config.train_per_task)
    train_labels = {}
    extra = rng.random((n_train, n)) < config.mixed_p
    for i in range(1, n + 1):
        if config.coverage == "full":
            keep = np.ones(n_train, dtype=bool)
        elif config.coverage == "disjoint":
            keep = owner == i
        else:
            keep = (owner == i) | extra[:, i - 1]
        train_labels[i] = np.where(keep, labels[i][:n_train], np.nan)
    ids = np.arange(n_train + n_test)
    train = MultiTaskDataset(specs, ids[:n_train], {i: f[:n_train] for i, f in feats.items()}, train_labels)
    test = MultiTaskDataset(
        specs, ids[n_train:], {i: f[n_train:] for i, f in feats.items()}, {i: y[n_train:] for i, y in labels.items()}
    )
    return train, test


def half_and_half(dataset: MultiTaskDataset, seed: int = 0) -> MultiTaskDataset:
    """Partial-label version of a fully labeled dataset.

    Samples are split into ``n`` equal groups (in a seeded order) and group
    ``j`` keeps only its task-``j`` label.
    """
    n = len(dataset.task_ids)
    order = np.random.default_rng(seed).permutation(len(dataset))
    group = np.empty(len(dataset), dtype=np.int64)
    group[order] = np.arange(len(dataset)) * n // len(dataset) + 1
    labels = {j: np.where(group == j, dataset.labels[j], np.nan) for j in dataset.task_ids}
    return dataset.with_labels(labels)


# -- evaluation ----------------------------------------------------------------------


@dataclass
class TaskResult:
    metric: str
    value: float
    ci: tuple
    n: int
    confusion: list | None = None


@dataclass
class EvalReport:
    """Per-task metric with a 95% bootstrap interval, plus confusion matrices."""

    method: str
    tasks: dict = field(default_factory=dict)

    def value(self, j) -> float:
        return self.tasks[j].value

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tasks": {
                str(j): {
                    "metric": r.metric,
                    "value": r.value,
                    "ci": list(r.ci),
                    "n": r.n,
                    **({"confusion": r.confusion} if r.confusion is not None else {}),
                }
                for j, r in sorted(self.tasks.items())
            },
        }


def bootstrap_ci(stat, n, n_boot=1000, seed=0, level=0.95):
    """Percentile interval of ``stat(rows)`` over ``n_boot`` resamples of ``range(n)``."""
    rng = np.random.default_rng(seed)
    vals = []
    for _ in range(n_boot):
        rows = np.sort(rng.integers(0, n, n))
        try:
            vals.append(stat(rows))
        except EmptyEvalError:
            continue
    if not vals:
        raise EmptyEvalError("no bootstrap resample could be evaluated")
    a = (1.0 - level) / 2.0
    lo, hi = np.quantile(vals, [a, 1.0 - a])
    return float(lo), float(hi)


def report_from_predictions(method, specs, predictions, test: MultiTaskDataset, tasks=None, n_boot=1000, seed=0):
    """Build an :class:`EvalReport` from ``{task: (scores, labels)}`` on ``test``."""
    report = EvalReport(method)
    for spec in specs:
        j = spec.task_id
        if tasks is not None and j not in tasks:
            continue
        m = test.labeled_mask(j)
        if not m.any():
            raise EmptyEvalError(f"task {j} has no labeled test samples")
        S, lab = predictions[j]
        S, lab = np.asarray(S)[m], np.asarray(lab)[m]
        truth, ids = test.labels[j][m], test.sample_ids[m]

        def stat(rows, S=S, lab=lab, truth=truth, ids=ids, spec=spec):
            return task_metric(spec, S[rows], lab[rows], truth[rows], ids[rows])

        value = task_metric(spec, S, lab, truth, ids)
        lo, hi = bootstrap_ci(stat, len(truth), n_boot, seed + j) if n_boot else (value, value)
        lo, hi = min(lo, value), max(hi, value)
        conf = None
        if spec.is_categorical:
            conf = confusion_matrix(lab, truth, spec.n_classes).tolist()
        report.tasks[j] = TaskResult(spec.metric, value, (lo, hi), int(m.sum()), conf)
    return report


def evaluate(model, test: MultiTaskDataset, method="model", tasks=None, n_boot=1000, seed=0) -> EvalReport:
    """Evaluate a cascade or a baseline (anything with ``predict_dataset``)."""
    if isinstance(model, CascadeModel):
        preds = predict_dataset(model, test)
    else:
        preds = model.predict_dataset(test)
    return report_from_predictions(method, test.specs, preds, test, tasks, n_boot, seed)


# -- baselines -----------------------------------------------------------------------


class PerTaskModel:
    """One built-in classifier per task on (standardized) chosen feature blocks."""

    def __init__(self, specs, blocks, params, classifiers, means, scales):
        self.specs = specs
        self.blocks = blocks  # task -> tuple of feature blocks it consumes
        self.params = params
        self.classifiers = classifiers
        self.means, self.scales = means, scales

    def inputs(self, j, dataset):
        return np.hstack([(dataset.features[i] - self.means[i]) / self.scales[i] for i in self.blocks[j]])

    def to_dict(self) -> dict:
        return {
            "schema": PER_TASK_SCHEMA,
            "specs": [sp.to_dict() for sp in self.specs],
            "blocks": {str(j): list(b) for j, b in self.blocks.items()},
            "params": {str(j): p.to_dict() for j, p in self.params.items()},
            "standardization": {
                str(j): {"mean": [float(v) for v in self.means[j]], "scale": [float(v) for v in self.scales[j]]}
                for j in sorted(self.means)
            },
        }

    @classmethod
    def from_dict(cls, d) -> "PerTaskModel":
        if d.get("schema") != PER_TASK_SCHEMA:
            raise ContractError(f"unsupported model schema {d.get('schema')!r}")
        specs = tuple(TaskSpec.from_dict(x) for x in d["specs"])
        params = {int(j): ClassifierParams.from_dict(p) for j, p in d["params"].items()}
        return cls(
            specs,
            {int(j): tuple(b) for j, b in d["blocks"].items()},
            params,
            {j: BuiltinClassifier(p.kind, p.l2) for j, p in params.items()},
            {int(j): np.asarray(v["mean"], dtype=float) for j, v in d["standardization"].items()},
            {int(j): np.asarray(v["scale"], dtype=float) for j, v in d["standardization"].items()},
        )

    def predict_dataset(self, dataset):
        out = {}
        for spec in self.specs:
            j = spec.task_id
            X = self.inputs(j, dataset)
            clf = self.classifiers[j]
            S = np.asarray(clf.infer(self.params[j], X), dtype=float)
            out[j] = (S, labels_from_scores(clf.kind, S))
        return out


def _fit_per_task(train: MultiTaskDataset, blocks, kinds=None, l2=DEFAULT_L2, inner=DescentConfig()):
    from .cascade import fit_standardization

    kinds = dict(kinds or {})
    means, scales = fit_standardization(train)
    params, clfs = {}, {}
    for spec in train.specs:
        j = spec.task_id
        k = kinds.get(j, default_kind(spec))
        k = k[0] if isinstance(k, (tuple, list)) else k
        clf = BuiltinClassifier(k, l2, inner)
        rows = np.flatnonzero(train.labeled_mask(j))
        X = np.hstack([(train.features[i][rows] - means[i]) / scales[i] for i in blocks[j]])
        y = train.labels[j][rows]
        params[j] = clf.learn(X, y.astype(np.int64) if spec.is_categorical else y,
                              output_dim=clf.output_dim(spec.n_classes))
        clfs[j] = clf
    return PerTaskModel(train.specs, blocks, params, clfs, means, scales)


def train_base(train: MultiTaskDataset, kinds=None, l2=DEFAULT_L2, inner=DescentConfig()) -> PerTaskModel:
    """Single classifier per task on its own features only."""
    return _fit_per_task(train, {j: (j,) for j in train.task_ids}, kinds, l2, inner)


def train_all_features_direct(train: MultiTaskDataset, kinds=None, l2=DEFAULT_L2, inner=DescentConfig()) -> PerTaskModel:
    """One classifier per task on every task's features appended together."""
    return _fit_per_task(train, {j: tuple(train.task_ids) for j in train.task_ids}, kinds, l2, inner)


def run_all_features_direct(train, test, kinds=None, l2=DEFAULT_L2, n_boot=1000, seed=0):
    model = train_all_features_direct(train, kinds, l2)
    return model, evaluate(model, test, "all_features_direct", n_boot=n_boot, seed=seed)


# -- experiments ---------------------------------------------------------------------


@dataclass
class ExperimentConfig:
    """Structured experiment description (see README for the document schema)."""

    methods: tuple = ("base", "ccm", "feccm_unified")
    seeds: tuple = (0,)
    generator: dict = field(default_factory=dict)
    feedback: dict = field(default_factory=dict)
    kinds: dict = field(default_factory=dict)
    target_task: int | None = None
    folds: int = 3
    n_boot: int = 1000
    table2: bool = True
    train_path: str | None = None
    test_path: str | None = None

    @classmethod
    def from_mapping(cls, doc: Mapping) -> "ExperimentConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("experiment config must be a mapping")
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        cfg = cls(**doc)
        cfg.methods = tuple(cfg.methods)
        cfg.seeds = tuple(int(s) for s in cfg.seeds)
        bad = [m for m in cfg.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {METHODS}")
        if not cfg.methods or not cfg.seeds:
            raise ConfigError("methods and seeds must be non-empty")
        if any(m in ("feccm_one_goal", "feccm_target_specific") for m in cfg.methods) and cfg.target_task is None:
            raise ConfigError("one-goal and target-specific methods need target_task")
        return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
    except yaml.YAMLError as e:
        raise ConfigError(f"cannot parse config {path}: {e}") from None
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e}") from None
    return ExperimentConfig.from_mapping(doc or {})


def feedback_config(doc: Mapping | None = None, **overrides) -> FeedbackConfig:
    doc = dict(doc or {})
    doc.update(overrides)
    if "inner" in doc and isinstance(doc["inner"], Mapping):
        doc["inner"] = DescentConfig(**doc["inner"])
    for key in ("pi", "pi_grid"):
        if doc.get(key) is not None:
            doc[key] = tuple(tuple(g) if isinstance(g, (list, tuple)) else g for g in doc[key])
    try:
        return FeedbackConfig(**doc)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def _kinds(doc):
    return {int(k): (tuple(v) if isinstance(v, list) else v) for k, v in (doc or {}).items()}


def run_method(method, train, test, fb: FeedbackConfig, kinds=None, target_task=None, n_boot=1000, seed=0):
    """Train one method and evaluate it; returns ``(report, trace or None, model)``."""
    trace = None
    if method == "base":
        model = train_base(train, kinds, fb.l2, fb.inner)
    elif method == "all_features_direct":
        model = train_all_features_direct(train, kinds, fb.l2, fb.inner)
    elif method == "ccm":
        model = train_ccm(train, kinds, fb)
    elif method == "feccm_unified":
        model, trace = train_feccm(train, kinds, replace(fb, instantiation=UNIFIED, target_task=None))
    elif method == "feccm_one_goal":
        model, trace = train_feccm(train, kinds, replace(fb, instantiation=ONE_GOAL, target_task=target_task, pi=None))
    elif method == "feccm_target_specific":
        model, trace = train_feccm(
            train, kinds, replace(fb, instantiation=TARGET_SPECIFIC, target_task=target_task, pi=None)
        )
    else:
        raise ConfigError(f"unknown method {method!r}")
    return evaluate(model, test, method, n_boot=n_boot, seed=seed), trace, model


def _fmt(v) -> str:
    return repr(float(v))


def comparison_rows(results, specs, methods):
    """Mean and bootstrap-over-seeds interval per method and task.

    ``results[method]`` is a list of per-seed EvalReports. With one seed the
    interval is that run's own bootstrap interval.
    """
    header = ["method"] + [f"{s.name}_{s.metric}_{c}" for s in specs for c in ("mean", "lo", "hi")]
    rows = [header]
    for m in methods:
        reps = results[m]
        row = [m]
        for s in specs:
            vals = np.array([r.value(s.task_id) for r in reps])
            if len(vals) == 1:
                lo, hi = reps[0].tasks[s.task_id].ci
            else:
                lo, hi = bootstrap_ci(lambda rows: float(vals[rows].mean()), len(vals), 1000, s.task_id)
            row += [_fmt(vals.mean()), _fmt(lo), _fmt(hi)]
        rows.append(row)
    return rows


def _write_csv(path, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for r in rows:
            fh.write(",".join(str(v) for v in r) + "\n")


def run_experiment(config, out_dir, include_time=False) -> str:
    """Run every (method, seed) cell and write the report directory.

    Written files: ``comparison.csv`` (mean and interval per method and task),
    ``reports/<method>_seed<k>.json``, ``traces/<method>_seed<k>.csv``,
    ``table2.csv`` (partial- versus full-label training, when enabled) and
    ``summary.json``. Timing columns are left out unless ``include_time`` so
    that reruns produce identical files.
    """
    if not isinstance(config, ExperimentConfig):
        config = load_config(config)
    fb = feedback_config(config.feedback, folds=config.folds)
    kinds = _kinds(config.kinds)
    os.makedirs(os.path.join(out_dir, "reports"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "traces"), exist_ok=True)

    results = {m: [] for m in config.methods}
    specs = None
    for seed in config.seeds:
        train, test = _experiment_data(config, seed)
        specs = train.specs
        for m in config.methods:
            rep, trace, _ = run_method(m, train, test, replace(fb, seed=seed), kinds, config.target_task,
                                       config.n_boot, seed)
            results[m].append(rep)
            with open(os.path.join(out_dir, "reports", f"{m}_seed{seed}.json"), "w", encoding="utf-8") as fh:
                json.dump(rep.to_dict(), fh, sort_keys=True, indent=1)
                fh.write("\n")
            if trace is not None:
                trace.to_csv(os.path.join(out_dir, "traces", f"{m}_seed{seed}.csv"), include_time)
    rows = comparison_rows(results, specs, config.methods)
    _write_csv(os.path.join(out_dir, "comparison.csv"), rows)

    summary = {"methods": list(config.methods), "seeds": list(config.seeds), "comparison": rows}
    if config.table2 and config.train_path is None:
        grid = table2_grid(config, fb, kinds)
        _write_csv(os.path.join(out_dir, "table2.csv"), grid)
        summary["table2"] = grid
    with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return out_dir


def _experiment_data(config: ExperimentConfig, seed):
    if config.train_path is not None:
        from .tasks import load_dataset

        specs = [TaskSpec.from_dict(s) for s in config.generator["specs"]]
        return load_dataset(config.train_path, specs), load_dataset(config.test_path, specs)
    gen = dict(config.generator)
    gen["seed"] = seed
    try:
        return generate_synthetic(SyntheticConfig(**gen))
    except TypeError as e:
        raise ConfigError(f"bad generator settings: {e}") from None


def table2_grid(config: ExperimentConfig, fb: FeedbackConfig, kinds=None):
    """Partial- versus full-label training for every cascade method.

    The same fully labeled training draw is used twice: as is, and reduced to
    half-and-half labels (each sample keeps a single task's label).
    """
    methods = [m for m in config.methods]
    header = ["coverage", "method"]
    rows = None
    for coverage in ("partial", "full"):
        for m in methods:
            vals = {}
            specs = None
            for seed in config.seeds:
                gen = dict(config.generator, seed=seed, coverage="full")
                train, test = generate_synthetic(SyntheticConfig(**gen))
                if coverage == "partial":
                    train = half_and_half(train, seed)
                specs = train.specs
                rep, _, _ = run_method(m, train, test, replace(fb, seed=seed), kinds, config.target_task, 0, seed)
                for s in specs:
                    vals.setdefault(s.task_id, []).append(rep.value(s.task_id))
            if rows is None:
                rows = [header + [f"{s.name}_{s.metric}" for s in specs]]
            rows.append([coverage, m] + [_fmt(np.mean(vals[s.task_id])) for s in specs])
    return rows


# -- persistence ---------------------------------------------------------------------


def dumps_any_model(model) -> str:
    d = model_to_dict(model) if isinstance(model, CascadeModel) else model.to_dict()
    return json.dumps(d, sort_keys=True, indent=1) + "\n"


def save_any_model(model, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_any_model(model))


def load_any_model(path):
    """Cascade or per-task baseline model, dispatched on the schema tag."""
    with open(path, encoding="utf-8") as fh:
        d = json.load(fh)
    if d.get("schema") == PER_TASK_SCHEMA:
        return PerTaskModel.from_dict(d)
    return model_from_dict(d)


def save_specs(specs, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump([s.to_dict() for s in specs], fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_specs(path) -> tuple:
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    if isinstance(doc, Mapping):
        doc = doc.get("specs", [])
    return tuple(TaskSpec.from_dict(d) for d in doc)


def predictions_rows(model, dataset):
    """Header plus one row per sample: ``sample_id`` then scores and label per task."""
    preds = predict_dataset(model, dataset) if isinstance(model, CascadeModel) else model.predict_dataset(dataset)
    header = ["sample_id"]
    for spec in dataset.specs:
        S = preds[spec.task_id][0]
        header += [f"s{spec.task_id}_{k}" for k in range(S.shape[1])] + [f"yhat{spec.task_id}"]
    rows = [header]
    for r in range(len(dataset)):
        row = [str(int(dataset.sample_ids[r]))]
        for spec in dataset.specs:
            S, lab = preds[spec.task_id]
            row += [repr(float(v)) for v in S[r]]
            row.append(str(int(lab[r])) if spec.is_categorical else repr(float(lab[r])))
        rows.append(row)
    return rows
