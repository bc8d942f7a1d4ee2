"""Task declarations, heterogeneous multi-task datasets and their CSV format.

A dataset holds, for every sample, one feature block per task and a (possibly
partial) set of labels. The index set of samples labeled for task ``j`` is
called its partition.
"""
from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import ContractError, DegenerateSplitError, ParseError, SchemaError, UnknownTaskError

CATEGORICAL = "categorical"
REGRESSION = "regression"
METRICS = ("accuracy", "rmse", "average_precision")

_FEATURE_COL = re.compile(r"^f(\d+)_(\d+)$")
_LABEL_COL = re.compile(r"^y(\d+)$")


@dataclass(frozen=True)
class TaskSpec:
    """One sub-task: its label space, feature dimension and evaluation metric."""

    task_id: int
    name: str
    label_space: str
    feature_dim: int
    n_classes: int | None = None
    metric: str | None = None

    def __post_init__(self):
        if self.label_space not in (CATEGORICAL, REGRESSION):
            raise ContractError(f"unknown label space {self.label_space!r}")
        if self.task_id < 1:
            raise ContractError("task ids start at 1")
        if self.feature_dim < 1:
            raise ContractError(f"task {self.task_id}: feature_dim must be positive")
        if self.label_space == CATEGORICAL:
            if self.n_classes is None or self.n_classes < 2:
                raise ContractError(f"task {self.task_id}: categorical tasks need K >= 2")
        elif self.n_classes is not None:
            raise ContractError(f"task {self.task_id}: regression tasks have no classes")
        if self.metric is None:
            object.__setattr__(self, "metric", "accuracy" if self.is_categorical else "rmse")
        if self.metric not in METRICS:
            raise ContractError(f"unknown metric {self.metric!r}")
        if self.metric == "rmse" and self.is_categorical:
            raise ContractError("rmse is only defined for regression tasks")
        if self.metric != "rmse" and not self.is_categorical:
            raise ContractError(f"{self.metric} is only defined for categorical tasks")

    @property
    def is_categorical(self) -> bool:
        return self.label_space == CATEGORICAL

    @property
    def output_dim(self) -> int:
        return self.n_classes if self.is_categorical else 1

    def to_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "name": self.name,
            "label_space": self.label_space,
            "feature_dim": self.feature_dim,
            "n_classes": self.n_classes,
            "metric": self.metric,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "TaskSpec":
        return cls(
            task_id=int(d["task_id"]),
            name=str(d.get("name", f"task{d['task_id']}")),
            label_space=d["label_space"],
            feature_dim=int(d["feature_dim"]),
            n_classes=None if d.get("n_classes") is None else int(d["n_classes"]),
            metric=d.get("metric"),
        )


def check_specs(specs: Sequence[TaskSpec]) -> tuple[TaskSpec, ...]:
    specs = tuple(sorted(specs, key=lambda s: s.task_id))
    ids = [s.task_id for s in specs]
    if ids != list(range(1, len(specs) + 1)):
        raise ContractError(f"task ids must be distinct and contiguous from 1, got {ids}")
    return specs


@dataclass(frozen=True)
class Sample:
    sample_id: int
    features: Mapping[int, np.ndarray]
    labels: Mapping[int, float] = field(default_factory=dict)


def _check_label(spec: TaskSpec, value: float) -> float:
    if not math.isfinite(value):
        raise ContractError(f"task {spec.task_id}: label must be finite")
    if spec.is_categorical and (value != int(value) or not 0 <= value < spec.n_classes):
        raise ContractError(f"task {spec.task_id}: class index {value} outside 0..{spec.n_classes - 1}")
    return value


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, dtype=float, copy=True)
    a.setflags(write=False)
    return a


class MultiTaskDataset:
    """Column-oriented, immutable heterogeneous dataset.

    ``features[j]`` is an ``(n, feature_dim_j)`` array and ``labels[j]`` an
    ``(n,)`` array with NaN where the sample carries no label for task ``j``.
    """

    def __init__(self, specs, sample_ids, features, labels):
        self.specs = check_specs(specs)
        ids = np.asarray(sample_ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ContractError("sample_ids must be one-dimensional")
        if len(np.unique(ids)) != len(ids):
            raise ContractError("sample ids must be unique")
        ids = ids.copy()
        ids.setflags(write=False)
        self.sample_ids = ids
        n = len(ids)
        feats, labs = {}, {}
        for spec in self.specs:
            j = spec.task_id
            if j not in features:
                raise ContractError(f"missing features for task {j}")
            f = _frozen(np.asarray(features[j], dtype=float).reshape(n, -1) if n else np.zeros((0, spec.feature_dim)))
            if f.shape != (n, spec.feature_dim):
                raise ContractError(f"task {j}: features have shape {f.shape}, expected {(n, spec.feature_dim)}")
            feats[j] = f
            y = np.full(n, np.nan) if j not in labels else np.asarray(labels[j], dtype=float).reshape(n)
            for v in y[~np.isnan(y)]:
                _check_label(spec, float(v))
            labs[j] = _frozen(y)
        extra = (set(features) | set(labels)) - set(feats)
        if extra:
            raise UnknownTaskError(f"undeclared task ids {sorted(extra)}")
        self.features = feats
        self.labels = labs
        self._samples = None

    @classmethod
    def from_samples(cls, specs: Sequence[TaskSpec], samples: Iterable[Sample]) -> "MultiTaskDataset":
        specs = check_specs(specs)
        samples = list(samples)
        feats = {s.task_id: np.zeros((len(samples), s.feature_dim)) for s in specs}
        labs = {s.task_id: np.full(len(samples), np.nan) for s in specs}
        for r, smp in enumerate(samples):
            for spec in specs:
                j = spec.task_id
                if j not in smp.features:
                    raise ContractError(f"sample {smp.sample_id}: missing features for task {j}")
                v = np.asarray(smp.features[j], dtype=float)
                if v.shape != (spec.feature_dim,):
                    raise ContractError(f"sample {smp.sample_id}, task {j}: expected {spec.feature_dim} features")
                feats[j][r] = v
            for j, y in smp.labels.items():
                if j not in labs:
                    raise UnknownTaskError(f"sample {smp.sample_id}: undeclared task {j}")
                labs[j][r] = y
        return cls(specs, [s.sample_id for s in samples], feats, labs)

    def __len__(self):
        return len(self.sample_ids)

    @property
    def n_samples(self) -> int:
        return len(self.sample_ids)

    @property
    def task_ids(self) -> tuple[int, ...]:
        return tuple(s.task_id for s in self.specs)

    def spec(self, j: int) -> TaskSpec:
        if not 1 <= j <= len(self.specs):
            raise UnknownTaskError(f"task {j} is not declared")
        return self.specs[j - 1]

    def labeled_mask(self, j: int) -> np.ndarray:
        self.spec(j)
        return ~np.isnan(self.labels[j])

    def partition(self, j: int) -> np.ndarray:
        """Sample ids labeled for task ``j``, ascending."""
        return np.sort(self.sample_ids[self.labeled_mask(j)])

    def label_sets(self) -> list[tuple[int, ...]]:
        masks = [self.labeled_mask(j) for j in self.task_ids]
        return [tuple(j for j, m in zip(self.task_ids, masks) if m[r]) for r in range(len(self))]

    @property
    def samples(self) -> tuple[Sample, ...]:
        if self._samples is None:
            out = []
            for r, sid in enumerate(self.sample_ids):
                feats = {j: self.features[j][r] for j in self.task_ids}
                labs = {}
                for spec in self.specs:
                    y = self.labels[spec.task_id][r]
                    if not np.isnan(y):
                        labs[spec.task_id] = int(y) if spec.is_categorical else float(y)
                out.append(Sample(int(sid), feats, labs))
            self._samples = tuple(out)
        return self._samples

    def subset(self, rows) -> "MultiTaskDataset":
        """Dataset restricted to the given row positions (order preserved)."""
        rows = np.asarray(rows, dtype=np.int64)
        return MultiTaskDataset(
            self.specs,
            self.sample_ids[rows],
            {j: f[rows] for j, f in self.features.items()},
            {j: y[rows] for j, y in self.labels.items()},
        )

    def sorted_by_id(self) -> "MultiTaskDataset":
        order = np.argsort(self.sample_ids, kind="stable")
        if np.array_equal(order, np.arange(len(order))):
            return self
        return self.subset(order)

    def with_labels(self, labels: Mapping[int, np.ndarray]) -> "MultiTaskDataset":
        return MultiTaskDataset(self.specs, self.sample_ids, self.features, labels)

    def __eq__(self, other):
        if not isinstance(other, MultiTaskDataset):
            return NotImplemented
        return (
            self.specs == other.specs
            and np.array_equal(self.sample_ids, other.sample_ids)
            and all(np.array_equal(self.features[j], other.features[j]) for j in self.task_ids)
            and all(np.array_equal(self.labels[j], other.labels[j], equal_nan=True) for j in self.task_ids)
        )

    def __repr__(self):
        sizes = ", ".join(f"|G{j}|={int(self.labeled_mask(j).sum())}" for j in self.task_ids)
        return f"MultiTaskDataset(n={len(self)}, {sizes})"


def partition(dataset: MultiTaskDataset, j: int) -> np.ndarray:
    return dataset.partition(j)


def concat(datasets: Sequence[MultiTaskDataset]) -> MultiTaskDataset:
    specs = datasets[0].specs
    return MultiTaskDataset(
        specs,
        np.concatenate([d.sample_ids for d in datasets]),
        {j: np.concatenate([d.features[j] for d in datasets]) for j in datasets[0].task_ids},
        {j: np.concatenate([d.labels[j] for d in datasets]) for j in datasets[0].task_ids},
    )


# -- splitting ---------------------------------------------------------------


def _largest_remainder(total: int, fractions: Sequence[float]) -> list[int]:
    quotas = [total * f for f in fractions]
    counts = [math.floor(q) for q in quotas]
    order = sorted(range(len(fractions)), key=lambda k: (-(quotas[k] - counts[k]), k))
    for k in order[: total - sum(counts)]:
        counts[k] += 1
    return counts


def _strata(dataset: MultiTaskDataset) -> list[tuple]:
    keys = []
    for r, tasks in enumerate(dataset.label_sets()):
        cls = -1
        for j in tasks:
            if dataset.spec(j).is_categorical:
                cls = int(dataset.labels[j][r])
                break
        keys.append((tasks, cls))
    return keys


def split(dataset: MultiTaskDataset, fractions: Sequence[float], seed: int) -> list[MultiTaskDataset]:
    """Stratified, seeded partition of ``dataset`` into ``len(fractions)`` parts.

    Samples are grouped by (labeled task set, class of the first categorical
    label). Part sizes follow largest-remainder rounding globally and within
    each group, so every partition is split close to proportionally.
    """
    fractions = [float(f) for f in fractions]
    if not fractions or any(f <= 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ContractError(f"fractions must be positive and sum to 1, got {fractions}")
    n = len(dataset)
    sizes = _largest_remainder(n, fractions)
    keys = _strata(dataset)
    groups: dict[tuple, list[int]] = {}
    for r, key in enumerate(keys):
        groups.setdefault(key, []).append(r)
    rng = np.random.default_rng(seed)
    group_keys = sorted(groups)
    members = {k: list(np.asarray(groups[k])[rng.permutation(len(groups[k]))]) for k in group_keys}

    # per-group largest remainder constrained by the global part sizes
    alloc = {k: [math.floor(len(members[k]) * f) for f in fractions] for k in group_keys}
    need_group = {k: len(members[k]) - sum(alloc[k]) for k in group_keys}
    need_part = [sizes[p] - sum(alloc[k][p] for k in group_keys) for p in range(len(fractions))]
    cands = sorted(
        ((len(members[k]) * fractions[p] - alloc[k][p], gi, p) for gi, k in enumerate(group_keys) for p in range(len(fractions))),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    for _, gi, p in cands:
        k = group_keys[gi]
        if need_group[k] > 0 and need_part[p] > 0:
            alloc[k][p] += 1
            need_group[k] -= 1
            need_part[p] -= 1
    for k in group_keys:
        for p in range(len(fractions)):
            while need_group[k] > 0 and need_part[p] > 0:
                alloc[k][p] += 1
                need_group[k] -= 1
                need_part[p] -= 1

    parts: list[list[int]] = [[] for _ in fractions]
    for k in group_keys:
        start = 0
        for p, c in enumerate(alloc[k]):
            parts[p].extend(members[k][start : start + c])
            start += c
    out = []
    for p, rows in enumerate(parts):
        rows = np.sort(np.asarray(rows, dtype=np.int64))
        part = dataset.subset(rows)
        for j in dataset.task_ids:
            if dataset.labeled_mask(j).any() and not part.labeled_mask(j).any():
                raise DegenerateSplitError(
                    f"part {p} (fraction {fractions[p]}) receives no samples labeled for task {j} "
                    f"({dataset.spec(j).name})"
                )
        out.append(part)
    return out


# -- file format ---------------------------------------------------------------


def _parse_header(header: Sequence[str], specs: Sequence[TaskSpec]):
    declared = {s.task_id: s for s in specs}
    id_col = None
    feat_cols: dict[int, dict[int, int]] = {j: {} for j in declared}
    label_cols: dict[int, int] = {}
    for c, name in enumerate(header):
        name = name.strip()
        if name == "sample_id":
            id_col = c
            continue
        m = _FEATURE_COL.match(name)
        if m:
            j, k = int(m.group(1)), int(m.group(2))
            if j not in declared:
                raise SchemaError(f"column {name!r} refers to undeclared task {j}")
            feat_cols[j][k] = c
            continue
        m = _LABEL_COL.match(name)
        if m:
            j = int(m.group(1))
            if j not in declared:
                raise SchemaError(f"column {name!r} refers to undeclared task {j}")
            label_cols[j] = c
            continue
        raise SchemaError(f"unrecognized column {name!r}")
    for j, spec in declared.items():
        if sorted(feat_cols[j]) != list(range(spec.feature_dim)):
            raise SchemaError(
                f"task {j} declares {spec.feature_dim} features but the header has columns "
                f"{sorted(feat_cols[j])}"
            )
        if j not in label_cols:
            raise SchemaError(f"no label column y{j} for task {j}")
    return id_col, feat_cols, label_cols


def load_dataset(path, specs: Sequence[TaskSpec]) -> MultiTaskDataset:
    """Read the comma-separated dataset format.

    Columns are ``sample_id`` (optional), ``f<task>_<k>`` feature blocks and
    one ``y<task>`` label column per task; an empty label field means the
    sample is unlabeled for that task. Row numbers in errors count data rows
    from 1.
    """
    specs = check_specs(specs)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file") from None
        id_col, feat_cols, label_cols = _parse_header(header, specs)
        ids, feats, labs = [], {s.task_id: [] for s in specs}, {s.task_id: [] for s in specs}
        row_no = 0
        for row in reader:
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            row_no += 1
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=row_no)
            try:
                ids.append(int(row[id_col]) if id_col is not None else row_no - 1)
            except ValueError:
                raise ParseError(f"bad sample_id {row[id_col]!r}", row=row_no) from None
            for spec in specs:
                j = spec.task_id
                vals = []
                for k in range(spec.feature_dim):
                    text = row[feat_cols[j][k]].strip()
                    try:
                        v = float(text)
                    except ValueError:
                        raise ParseError(f"non-numeric feature f{j}_{k}={text!r}", row=row_no) from None
                    if not math.isfinite(v):
                        raise ParseError(f"non-finite feature f{j}_{k}", row=row_no)
                    vals.append(v)
                feats[j].append(vals)
                text = row[label_cols[j]].strip()
                if text == "":
                    labs[j].append(np.nan)
                    continue
                try:
                    y = float(text)
                    _check_label(spec, y)
                except ValueError as exc:
                    raise ParseError(f"bad label y{j}={text!r}: {exc}", row=row_no) from None
                labs[j].append(y)
    n = len(ids)
    if len(set(ids)) != n:
        raise ParseError("duplicate sample_id values")
    return MultiTaskDataset(
        specs,
        ids,
        {j: np.asarray(v, dtype=float).reshape(n, specs[j - 1].feature_dim) for j, v in feats.items()},
        {j: np.asarray(v, dtype=float) for j, v in labs.items()},
    )


def save_dataset(dataset: MultiTaskDataset, path) -> None:
    header = ["sample_id"]
    for spec in dataset.specs:
        header += [f"f{spec.task_id}_{k}" for k in range(spec.feature_dim)]
    header += [f"y{j}" for j in dataset.task_ids]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in range(len(dataset)):
            row = [str(int(dataset.sample_ids[r]))]
            for j in dataset.task_ids:
                row += [repr(float(v)) for v in dataset.features[j][r]]
            for spec in dataset.specs:
                y = dataset.labels[spec.task_id][r]
                if np.isnan(y):
                    row.append("")
                elif spec.is_categorical:
                    row.append(str(int(y)))
                else:
                    row.append(repr(float(y)))
            w.writerow(row)
