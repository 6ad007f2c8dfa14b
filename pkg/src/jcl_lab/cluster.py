"""Spherical k-means pseudo-labelling, certainty split and class rebalancing."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from jcl_lab.errors import ContractError

UNIT_TOL = 1e-9
# slack for floating-point noise when asserting the objective never increases
MONOTONE_TOL = 1e-12


@dataclass
class ClusterModel:
    centers: np.ndarray
    assignments: np.ndarray
    dissimilarity: np.ndarray
    objective_history: list
    n_iter: int

    @property
    def objective(self):
        return self.objective_history[-1]


def _check_unit(name, x):
    if np.max(np.abs(np.linalg.norm(x, axis=1) - 1.0)) > UNIT_TOL:
        raise ContractError(f"{name} must be unit-norm rows")


def _assign(features, centers):
    sims = features @ centers.T
    assignments = np.argmax(sims, axis=1)
    dissim = 1.0 - sims[np.arange(len(features)), assignments]
    return assignments, np.clip(dissim, 0.0, 2.0)


def spherical_kmeans(features, init_centers, max_iters=100, tol=1e-6):
    """Cluster unit vectors by cosine similarity.

    Alternates max-similarity assignment and normalized-mean center updates.
    A cluster that ends up empty, or whose members sum to the zero vector, is
    re-seeded at the point farthest from its currently assigned center.
    The objective is mean cosine dissimilarity and never increases; that is
    asserted at every iteration.
    """
    x = np.asarray(features, dtype=np.float64)
    centers = np.array(init_centers, dtype=np.float64)
    if x.ndim != 2 or len(x) == 0:
        raise ContractError("need a non-empty feature matrix")
    if centers.ndim != 2 or len(centers) < 1 or centers.shape[1] != x.shape[1]:
        raise ContractError("need k >= 1 centers with the feature width")
    _check_unit("features", x)
    _check_unit("init_centers", centers)

    assignments, dissim = _assign(x, centers)
    history = [float(dissim.mean())]
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        new_centers = centers.copy()
        taken = set()
        for j in range(len(centers)):
            members = assignments == j
            total = x[members].sum(axis=0)
            norm = np.linalg.norm(total)
            if members.any() and norm > 1e-12:
                new_centers[j] = total / norm
            else:
                order = np.argsort(-dissim, kind="stable")
                pick = next((int(i) for i in order if int(i) not in taken), int(order[0]))
                taken.add(pick)
                new_centers[j] = x[pick]
        centers = new_centers
        new_assignments, dissim = _assign(x, centers)
        history.append(float(dissim.mean()))
        if history[-1] > history[-2] + MONOTONE_TOL:
            raise AssertionError(f"objective increased: {history[-2]!r} -> {history[-1]!r}")
        unchanged = np.array_equal(new_assignments, assignments)
        assignments = new_assignments
        improvement = history[-2] - history[-1]
        if unchanged or improvement <= tol * max(abs(history[-2]), 1e-300):
            break
    return ClusterModel(centers, assignments, dissim, history, n_iter)


def split_certain(model, d):
    """Split points at cosine dissimilarity threshold ``d``.

    Returns ``(certain_idx, pseudo_labels, uncertain_idx)``; pseudo-labels are
    the cluster indices of the certain points.
    """
    if not 0.0 <= d <= 2.0:
        raise ContractError(f"threshold {d} outside [0, 2]")
    certain = model.dissimilarity <= d
    idx = np.flatnonzero(certain)
    return idx, model.assignments[idx], np.flatnonzero(~certain)


def cluster_report_csv(model, d):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["point_id", "cluster", "dissimilarity", "certain"])
    for i, (c, dis) in enumerate(zip(model.assignments, model.dissimilarity)):
        writer.writerow([i, int(c), repr(float(dis)), int(dis <= d)])
    return buf.getvalue()


def rebalance_indices(labels, classes, rng):
    """Indices that make every class in ``classes`` as frequent as the largest one.

    Every original index is kept; short classes are topped up by drawing
    uniformly with replacement from their own members. The original indices
    come first, in order, followed by the extra draws class by class.
    """
    labels = np.asarray(labels)
    classes = [int(c) for c in classes]
    members = {c: np.flatnonzero(labels == c) for c in classes}
    for c, idx in members.items():
        if len(idx) == 0:
            raise ContractError(f"class {c} has no samples to rebalance")
    keep = np.flatnonzero(np.isin(labels, classes))
    target = max(len(idx) for idx in members.values())
    extras = [rng.choice(members[c], size=target - len(members[c]), replace=True)
              for c in classes if len(members[c]) < target]
    return np.concatenate([keep] + extras).astype(np.int64)


def rebalance_classes(dataset, n_classes, rng, use_pseudo=False):
    """Return a copy of ``dataset`` with a flat histogram over ``range(n_classes)``."""
    labels = dataset.pseudo_labels if use_pseudo else dataset.labels
    idx = rebalance_indices(labels, range(n_classes), rng)
    return dataset.subset(idx)
