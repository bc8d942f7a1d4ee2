"""Two-layer cascade: first-layer outputs are appended to every second-layer input.

Inference is two maximizations in sequence: each first-layer classifier
scores its own (standardized) features, then each second-layer classifier
scores ``[psi_j, A_1j z_1, ..., A_nj z_n]`` where ``A_ij`` is the adapter
from producer ``i`` to consumer ``j``. Adapters are linear maps; identity is
the default and a zero-row map drops a producer.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .classifiers import BuiltinClassifier, ClassifierParams
from .errors import ContractError
from .tasks import MultiTaskDataset, Sample, TaskSpec, check_specs

SCHEMA = "feccm.cascade/1"


@dataclass(frozen=True, eq=False)
class Adapter:
    """Linear map applied to a producer's latent before a consumer sees it.

    ``matrix`` is ``None`` for the identity (of whatever size); otherwise an
    ``(out, in)`` array, possibly with zero rows.
    """

    name: str = "identity"
    matrix: np.ndarray | None = None

    def out_dim(self, in_dim: int) -> int:
        if self.matrix is None:
            return in_dim
        if self.matrix.shape[1] != in_dim:
            raise ContractError(f"adapter {self.name!r} expects inputs of size {self.matrix.shape[1]}, got {in_dim}")
        return self.matrix.shape[0]

    def as_matrix(self, in_dim: int) -> np.ndarray:
        if self.matrix is None:
            return np.eye(in_dim)
        self.out_dim(in_dim)
        return self.matrix

    def __call__(self, z):
        z = np.asarray(z, dtype=float)
        if self.matrix is None:
            return z
        return z @ self.as_matrix(z.shape[-1]).T

    def to_dict(self) -> dict:
        d = {"name": self.name}
        if self.matrix is not None:
            d["shape"] = list(self.matrix.shape)
            d["matrix"] = [float(v) for v in self.matrix.ravel()]
        return d

    @classmethod
    def from_dict(cls, d) -> "Adapter":
        if "matrix" not in d:
            return cls(d.get("name", "identity"))
        return cls(d["name"], np.asarray(d["matrix"], dtype=float).reshape(d["shape"]))


IDENTITY = Adapter()


def drop_adapter(in_dim: int) -> Adapter:
    return Adapter("drop", np.zeros((0, in_dim)))


def select_adapter(in_dim: int, indices: Sequence[int]) -> Adapter:
    m = np.zeros((len(indices), in_dim))
    m[np.arange(len(indices)), list(indices)] = 1.0
    return Adapter("select", m)


def augment_features(psi_j, z_all, adapters: Sequence[Adapter] | None = None) -> np.ndarray:
    """Second-layer input ``[psi_j, adapter_1(z_1), ..., adapter_n(z_n)]``.

    ``z_all`` holds one latent vector per task in task order; ``adapters`` the
    matching adapters for this consumer (identity when omitted).
    """
    parts = [np.asarray(psi_j, dtype=float).ravel()]
    adapters = list(adapters) if adapters is not None else [IDENTITY] * len(z_all)
    if len(adapters) != len(z_all):
        raise ContractError("need one adapter per producer task")
    for i, (z, a) in enumerate(zip(z_all, adapters), start=1):
        if z is None:
            raise ContractError(f"missing first-layer output for task {i}")
        parts.append(np.atleast_1d(a(np.asarray(z, dtype=float).ravel())))
    return np.concatenate(parts)


@dataclass
class LatentState:
    """First-layer outputs treated as hidden variables during training.

    ``z[i]`` is an ``(n, dim_i)`` array aligned with ``sample_ids``; ``mask[i]``
    marks which rows hold a value. ``source`` records whether the values are the
    ground-truth initialization or estimates.
    """

    sample_ids: np.ndarray
    z: dict
    mask: dict
    source: str = "estimate"

    def covers(self, sample_id, task) -> bool:
        r = self._row(sample_id)
        return r is not None and bool(self.mask[task][r])

    def _row(self, sample_id):
        hit = np.flatnonzero(self.sample_ids == sample_id)
        return int(hit[0]) if hit.size else None

    def __getitem__(self, key):
        sample_id, task = key
        r = self._row(sample_id)
        if r is None or not self.mask[task][r]:
            raise KeyError(key)
        return self.z[task][r]

    def pairs(self):
        return [(int(self.sample_ids[r]), i) for i in sorted(self.z) for r in np.flatnonzero(self.mask[i])]

    @property
    def complete(self) -> bool:
        return all(bool(m.all()) for m in self.mask.values())

    def copy(self) -> "LatentState":
        return LatentState(
            self.sample_ids.copy(),
            {i: v.copy() for i, v in self.z.items()},
            {i: m.copy() for i, m in self.mask.items()},
            self.source,
        )


@dataclass(frozen=True, eq=False)
class CascadeModel:
    specs: tuple
    first_layer: dict  # task -> classifier object
    second_layer: dict
    theta: dict  # task -> first-layer params
    omega: dict  # task -> second-layer params
    means: dict = field(default_factory=dict)
    scales: dict = field(default_factory=dict)
    adapters: dict = field(default_factory=dict)  # (producer, consumer) -> Adapter

    def __post_init__(self):
        object.__setattr__(self, "specs", check_specs(self.specs))
        ids = {s.task_id for s in self.specs}
        for name in ("first_layer", "second_layer", "theta", "omega"):
            if set(getattr(self, name)) != ids:
                raise ContractError(f"{name} must cover every task exactly once")
        for j in ids:
            if j not in self.means:
                self.means[j] = np.zeros(self.specs[j - 1].feature_dim)
                self.scales[j] = np.ones(self.specs[j - 1].feature_dim)
        for j in sorted(ids):
            expected = self.second_input_dim(j)
            got = _param_input_dim(self.omega[j])
            if got is not None and got != expected:
                raise ContractError(f"omega[{j}] takes {got} inputs, the wiring provides {expected}")

    @property
    def task_ids(self):
        return tuple(s.task_id for s in self.specs)

    def latent_dim(self, i: int) -> int:
        p = self.theta[i]
        if isinstance(p, ClassifierParams):
            return p.output_dim
        return int(self.first_layer[i].output_dim(self.specs[i - 1].n_classes))

    def adapter(self, i: int, j: int) -> Adapter:
        return self.adapters.get((i, j), IDENTITY)

    def second_input_dim(self, j: int) -> int:
        return self.specs[j - 1].feature_dim + sum(
            self.adapter(i, j).out_dim(self.latent_dim(i)) for i in self.task_ids
        )

    def z_map(self, j: int) -> np.ndarray:
        """Matrix taking the concatenated latents to consumer ``j``'s appended columns."""
        blocks = [self.adapter(i, j).as_matrix(self.latent_dim(i)) for i in self.task_ids]
        rows = sum(b.shape[0] for b in blocks)
        out = np.zeros((rows, sum(b.shape[1] for b in blocks)))
        r = c = 0
        for b in blocks:
            out[r : r + b.shape[0], c : c + b.shape[1]] = b
            r += b.shape[0]
            c += b.shape[1]
        return out

    def standardize(self, j: int, X) -> np.ndarray:
        return (np.asarray(X, dtype=float) - self.means[j]) / self.scales[j]


def _param_input_dim(p):
    return p.input_dim if isinstance(p, ClassifierParams) else None


def fit_standardization(dataset: MultiTaskDataset):
    means, scales = {}, {}
    for j in dataset.task_ids:
        X = dataset.features[j]
        m = X.mean(axis=0)
        s = X.std(axis=0)
        s[s == 0] = 1.0
        means[j], scales[j] = m, s
    return means, scales


# -- inference ---------------------------------------------------------------------


def first_layer_outputs(model: CascadeModel, psi: Mapping[int, np.ndarray]) -> dict:
    """Batched first-layer scores ``{i: (n, dim_i)}`` from raw feature blocks."""
    out = {}
    for i in model.task_ids:
        if i not in psi:
            raise ContractError(f"missing features for task {i}")
        out[i] = np.asarray(model.first_layer[i].infer(model.theta[i], model.standardize(i, psi[i])), dtype=float)
    return out


def second_layer_inputs(model: CascadeModel, j: int, psi_std_j, z: Mapping[int, np.ndarray]) -> np.ndarray:
    parts = [np.atleast_2d(psi_std_j)]
    for i in model.task_ids:
        if i not in z:
            raise ContractError(f"missing first-layer output for task {i}")
        parts.append(model.adapter(i, j)(np.atleast_2d(z[i])))
    return np.hstack(parts)


def infer_first_layer(model: CascadeModel, sample: Sample) -> list:
    for i in model.task_ids:
        if i not in sample.features:
            raise ContractError(f"sample {sample.sample_id} has no features for task {i}")
    z = first_layer_outputs(model, {i: np.atleast_2d(sample.features[i]) for i in model.task_ids})
    return [z[i][0] for i in model.task_ids]


def predict(model: CascadeModel, sample: Sample) -> dict:
    """``{task: (scores, label)}`` for one sample; one first-layer pass is shared."""
    z = infer_first_layer(model, sample)
    out = {}
    for j in model.task_ids:
        phi = augment_features(
            model.standardize(j, sample.features[j]), z, [model.adapter(i, j) for i in model.task_ids]
        )
        clf = model.second_layer[j]
        s = np.asarray(clf.infer(model.omega[j], phi[None, :]), dtype=float)[0]
        out[j] = (s, _labels(clf, model.omega[j], phi[None, :], s[None, :])[0])
    return out


def _labels(clf, params, inputs, S):
    if hasattr(clf, "labels"):
        lab = clf.labels(params, inputs)
    else:
        from .classifiers import labels_from_scores

        lab = labels_from_scores(getattr(clf, "kind", "multinomial_logistic"), S)
    return [v.item() if hasattr(v, "item") else v for v in np.asarray(lab)]


def predict_dataset(model: CascadeModel, dataset: MultiTaskDataset) -> dict:
    """Batched :func:`predict`: ``{task: (scores (n, out), labels (n,))}``."""
    z = first_layer_outputs(model, dataset.features)
    out = {}
    for j in model.task_ids:
        phi = second_layer_inputs(model, j, model.standardize(j, dataset.features[j]), z)
        clf = model.second_layer[j]
        S = np.asarray(clf.infer(model.omega[j], phi), dtype=float)
        out[j] = (S, np.asarray(_labels(clf, model.omega[j], phi, S)))
    return out


# -- serialization -----------------------------------------------------------------


def model_to_dict(model: CascadeModel) -> dict:
    for layer in (model.first_layer, model.second_layer):
        for j, clf in layer.items():
            if not getattr(clf, "serializable", False):
                raise ContractError(f"classifier for task {j} ({clf!r}) cannot be serialized")
    return {
        "schema": SCHEMA,
        "specs": [s.to_dict() for s in model.specs],
        "theta": {str(j): model.theta[j].to_dict() for j in model.task_ids},
        "omega": {str(j): model.omega[j].to_dict() for j in model.task_ids},
        "adapters": [
            {"producer": i, "consumer": j, **a.to_dict()} for (i, j), a in sorted(model.adapters.items())
        ],
        "standardization": {
            str(j): {"mean": [float(v) for v in model.means[j]], "scale": [float(v) for v in model.scales[j]]}
            for j in model.task_ids
        },
    }


def model_from_dict(d: Mapping) -> CascadeModel:
    if d.get("schema") != SCHEMA:
        raise ContractError(f"unsupported model schema {d.get('schema')!r}")
    specs = [TaskSpec.from_dict(s) for s in d["specs"]]
    theta = {int(j): ClassifierParams.from_dict(p) for j, p in d["theta"].items()}
    omega = {int(j): ClassifierParams.from_dict(p) for j, p in d["omega"].items()}
    return CascadeModel(
        specs=tuple(specs),
        first_layer={j: BuiltinClassifier(p.kind, p.l2) for j, p in theta.items()},
        second_layer={j: BuiltinClassifier(p.kind, p.l2) for j, p in omega.items()},
        theta=theta,
        omega=omega,
        means={int(j): np.asarray(v["mean"], dtype=float) for j, v in d["standardization"].items()},
        scales={int(j): np.asarray(v["scale"], dtype=float) for j, v in d["standardization"].items()},
        adapters={(int(a["producer"]), int(a["consumer"])): Adapter.from_dict(a) for a in d.get("adapters", [])},
    )


def dumps_model(model: CascadeModel) -> str:
    return json.dumps(model_to_dict(model), sort_keys=True, indent=1) + "\n"


def save_model(model: CascadeModel, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dumps_model(model))


def load_model(path) -> CascadeModel:
    with open(path, encoding="utf-8") as fh:
        return model_from_dict(json.load(fh))
