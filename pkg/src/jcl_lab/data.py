"""Synthetic shifted-domain classification tasks.

Each class is an isotropic Gaussian around a mean placed on a circle. The
target domain rotates (about the origin) and translates the class means,
which shifts the covariates while keeping the labelling rule.

Target labels are generated but withheld: ``DomainDataset.labels`` is all -1
for the target, and the true labels are only reachable through
:func:`reveal_labels`, which only evaluation code calls.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from jcl_lab.errors import ContractError, DimensionError

SOURCE = "source"
TARGET = "target"


@dataclass
class DomainDataset:
    features: np.ndarray
    labels: np.ndarray
    domain: str
    pseudo_labels: np.ndarray | None = None
    certainty: np.ndarray | None = None
    _withheld: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.features)
        if self.features.ndim != 2:
            raise DimensionError("features must be a 2-D array")
        for name in ("labels", "pseudo_labels", "certainty", "_withheld"):
            value = getattr(self, name)
            if value is not None and len(value) != n:
                raise DimensionError(f"{name} has {len(value)} rows, features have {n}")
        if np.any(self.labels < -1):
            raise ContractError("labels must be -1 (unlabelled) or a class id")

    def __len__(self):
        return len(self.features)

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)

        def take(a):
            return None if a is None else a[idx]

        return DomainDataset(
            self.features[idx], self.labels[idx], self.domain,
            take(self.pseudo_labels), take(self.certainty), take(self._withheld),
        )

    def with_pseudo_labels(self, pseudo_labels, certainty):
        return DomainDataset(self.features, self.labels, self.domain,
                             np.asarray(pseudo_labels, dtype=np.int64),
                             np.asarray(certainty, dtype=bool), self._withheld)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        dim = self.features.shape[1]
        writer.writerow([f"x{i + 1}" for i in range(dim)] + ["label", "domain"])
        for row, label in zip(self.features, self.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label), self.domain])
        return buf.getvalue()


def reveal_labels(dataset):
    """True labels of a dataset, including withheld target labels. Evaluation only."""
    if dataset._withheld is not None:
        return dataset._withheld.copy()
    return dataset.labels.copy()


@dataclass
class SyntheticTaskConfig:
    n_classes: int = 3
    n_per_class: int = 100
    radius: float = 3.0
    # class-mean directions in degrees; None spreads them evenly over the circle
    angles_deg: tuple | None = None
    noise_std: float = 0.5
    rotation_deg: float = 30.0
    translation: tuple = (0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        if self.n_classes < 2:
            raise ContractError("need at least two classes")
        if self.noise_std <= 0:
            raise ContractError("noise_std must be positive")
        if self.n_per_class < 1:
            raise ContractError("need at least one sample per class")
        if self.angles_deg is not None:
            self.angles_deg = tuple(float(a) for a in self.angles_deg)
            if len(self.angles_deg) != self.n_classes:
                raise ContractError("one angle per class")
        self.translation = tuple(float(t) for t in self.translation)
        if len(self.translation) != 2:
            raise ContractError("translation must be a 2-vector")

    def class_means(self):
        if self.angles_deg is None:
            angles = np.arange(self.n_classes) * 360.0 / self.n_classes
        else:
            angles = np.asarray(self.angles_deg)
        rad = np.deg2rad(angles)
        return self.radius * np.stack([np.cos(rad), np.sin(rad)], axis=1)

    def target_means(self):
        theta = np.deg2rad(self.rotation_deg)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        return self.class_means() @ rot.T + np.asarray(self.translation)

    def to_json(self):
        return json.dumps(asdict(self), sort_keys=True)


def _sample(means, n_per_class, std, rng):
    labels = np.repeat(np.arange(len(means)), n_per_class)
    features = means[labels] + std * rng.standard_normal((len(labels), means.shape[1]))
    return features, labels


def gen_synthetic_pair(cfg):
    """Draw ``(source, target)`` datasets. Deterministic in ``cfg.seed``."""
    xs, ys = _sample(cfg.class_means(), cfg.n_per_class, cfg.noise_std, np.random.default_rng([cfg.seed, 0]))
    xt, yt = _sample(cfg.target_means(), cfg.n_per_class, cfg.noise_std, np.random.default_rng([cfg.seed, 1]))
    source = DomainDataset(xs, ys, SOURCE)
    target = DomainDataset(xt, np.full(len(yt), -1), TARGET, _withheld=yt)
    return source, target


def augment(batch, rng, sigma):
    """Two independently jittered views of ``batch`` (additive Gaussian noise)."""
    rng = np.random.default_rng(rng)
    batch = np.asarray(batch, dtype=np.float64)
    if sigma == 0:
        return batch.copy(), batch.copy()
    return (batch + sigma * rng.standard_normal(batch.shape),
            batch + sigma * rng.standard_normal(batch.shape))
