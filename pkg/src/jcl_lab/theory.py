"""Exact error terms and target-error bounds on finite input spaces.

Every quantity here is an expectation over a finite point set, so all of
them are computed exactly as dot products. Errors use the absolute-difference
form ``E|h(x) - f(x)|``; the same form is used for the disagreement between two
hypotheses inside the H-delta-H distance, which coincides with the
disagreement probability when hypotheses are binary.

The bounds hold whenever every function that the proofs feed into the
H-delta-H supremum is a member of the hypothesis class. For the combined
domain bounds that includes the labeling functions themselves, which is why
:func:`random_instance` adds ``f_s``, ``f_t`` and the pseudo-labels to ``H``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from jcl_lab.errors import ContractError, DimensionError

TOL = 1e-12


def _as_vector(values, name):
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 1:
        raise DimensionError(f"{name} must be one-dimensional, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class FiniteDomain:
    """A distribution over a finite point set paired with a labeling function."""

    probs: np.ndarray
    label_fn: np.ndarray
    points: tuple = None

    def __post_init__(self):
        probs = _as_vector(self.probs, "probs")
        label_fn = _as_vector(self.label_fn, "label_fn")
        points = tuple(range(len(probs))) if self.points is None else tuple(self.points)
        if len(probs) < 1:
            raise DimensionError("a domain needs at least one point")
        if not (len(probs) == len(label_fn) == len(points)):
            raise DimensionError(
                f"probs ({len(probs)}), label_fn ({len(label_fn)}) and points "
                f"({len(points)}) must have equal length"
            )
        if np.any(probs < 0) or abs(probs.sum() - 1.0) > TOL:
            raise ContractError(f"probs must be non-negative and sum to 1, sum={probs.sum()!r}")
        if np.any(label_fn < 0) or np.any(label_fn > 1):
            raise ContractError("label_fn values must lie in [0, 1]")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "label_fn", label_fn)
        object.__setattr__(self, "points", points)

    @property
    def size(self):
        return len(self.probs)


@dataclass(frozen=True)
class HypothesisClass:
    """Finite set of [0,1]-valued hypotheses, one row per hypothesis."""

    hypotheses: np.ndarray

    def __post_init__(self):
        hyps = np.asarray(self.hypotheses, dtype=np.float64)
        if hyps.ndim != 2 or hyps.shape[0] == 0:
            raise ContractError("hypothesis class must be a non-empty 2-D array")
        if np.any(hyps < 0) or np.any(hyps > 1):
            raise ContractError("hypothesis values must lie in [0, 1]")
        object.__setattr__(self, "hypotheses", hyps)

    def __len__(self):
        return self.hypotheses.shape[0]

    def __getitem__(self, index):
        return self.hypotheses[index]

    @property
    def n_points(self):
        return self.hypotheses.shape[1]

    def contains(self, h):
        h = np.asarray(h, dtype=np.float64)
        return bool(np.any(np.all(self.hypotheses == h, axis=1)))


@dataclass
class BoundReport:
    name: str
    lhs: float
    rhs_terms: dict
    rhs_total: float = field(init=False)
    slack: float = field(init=False)
    holds: bool = field(init=False)

    def __post_init__(self):
        self.rhs_total = float(sum(self.rhs_terms.values()))
        self.slack = self.rhs_total - self.lhs
        self.holds = bool(self.slack >= -TOL)


def _check_same_size(*arrays):
    sizes = {len(a) for a in arrays}
    if len(sizes) != 1:
        raise DimensionError(f"point counts disagree: {sorted(sizes)}")


def _check_class(H, *domains):
    for D in domains:
        if H.n_points != D.size:
            raise DimensionError(
                f"hypothesis class has {H.n_points} points, domain has {D.size}"
            )


def expected_error(h, f, D):
    """``sum_x D(x) |h(x) - f(x)|``."""
    h = _as_vector(h, "h")
    f = _as_vector(f, "f")
    _check_same_size(h, f, D.probs)
    return float(D.probs @ np.abs(h - f))


def _pairwise_disagreement(H, D):
    diffs = np.abs(H.hypotheses[:, None, :] - H.hypotheses[None, :, :])
    return diffs @ D.probs


def hdh_distance(H, D_S, D_T):
    """Twice the largest gap in pairwise disagreement between the two domains."""
    _check_class(H, D_S, D_T)
    gap = np.abs(_pairwise_disagreement(H, D_S) - _pairwise_disagreement(H, D_T))
    return float(2.0 * gap.max())


def combine_domains(D_S, D_T):
    """Equal mixture of the two distributions with averaged labels."""
    _check_same_size(D_S.probs, D_T.probs)
    probs = 0.5 * (D_S.probs + D_T.probs)
    return FiniteDomain(probs, 0.5 * (D_S.label_fn + D_T.label_fn), D_S.points)


def ideal_joint_lambda(H, S, T):
    """Return ``(index, lambda)`` of the hypothesis minimising the summed error.

    Ties go to the lowest index.
    """
    _check_class(H, S, T)
    combined = np.abs(H.hypotheses - S.label_fn) @ S.probs + np.abs(H.hypotheses - T.label_fn) @ T.probs
    index = int(np.argmin(combined))
    return index, float(combined[index])


def _hypothesis(H, h_index):
    if not 0 <= h_index < len(H):
        raise ContractError(f"hypothesis index {h_index} out of range for |H|={len(H)}")
    return H[h_index]


def check_theorem1(h_index, H, S, T):
    h = _hypothesis(H, h_index)
    _check_class(H, S, T)
    _, lam = ideal_joint_lambda(H, S, T)
    return BoundReport(
        "theorem1",
        lhs=expected_error(h, T.label_fn, T),
        rhs_terms={
            "source_error": expected_error(h, S.label_fn, S),
            "hdh_term": 0.5 * hdh_distance(H, S, T),
            "joint_term": lam,
        },
    )


def check_theorem2(h_index, H, S, T):
    h = _hypothesis(H, h_index)
    _check_class(H, S, T)
    U = combine_domains(S, T)
    return BoundReport(
        "theorem2",
        lhs=expected_error(h, T.label_fn, T),
        rhs_terms={
            "source_error": expected_error(h, S.label_fn, S),
            "hdh_term": 0.25 * hdh_distance(H, S, T),
            "joint_term": 2.0 * expected_error(h, U.label_fn, U),
        },
    )


def check_theorem3(h_index, H, S, T, f_hat_t):
    h = _hypothesis(H, h_index)
    _check_class(H, S, T)
    f_hat_t = _as_vector(f_hat_t, "f_hat_t")
    _check_same_size(f_hat_t, T.probs)
    if np.any(f_hat_t < 0) or np.any(f_hat_t > 1):
        raise ContractError("pseudo-label values must lie in [0, 1]")
    U_hat = combine_domains(S, FiniteDomain(T.probs, f_hat_t, T.points))
    return BoundReport(
        "theorem3",
        lhs=expected_error(h, T.label_fn, T),
        rhs_terms={
            "source_error": expected_error(h, S.label_fn, S),
            "hdh_term": 0.25 * hdh_distance(H, S, T),
            "joint_term": 2.0 * expected_error(h, U_hat.label_fn, U_hat),
            "pseudo_term": expected_error(T.label_fn, f_hat_t, T),
        },
    )


def check_lemma_triangle(h, h_prime, h_second, D):
    """Triangle inequality for the expected disagreement. Returns ``(holds, slack)``."""
    lhs = expected_error(h, h_prime, D)
    rhs = expected_error(h, h_second, D) + expected_error(h_second, h_prime, D)
    slack = rhs - lhs
    return bool(slack >= -TOL), float(slack)


def check_lemma_hdh(h, h_prime, H, S, T):
    """``|eps_S(h,h') - eps_T(h,h')| <= d/2`` for members of ``H``. Returns ``(holds, slack)``."""
    if not (H.contains(h) and H.contains(h_prime)):
        raise ContractError("both hypotheses must be members of H")
    gap = abs(expected_error(h, h_prime, S) - expected_error(h, h_prime, T))
    slack = 0.5 * hdh_distance(H, S, T) - gap
    return bool(slack >= -TOL), float(slack)


# --------------------------------------------------------------------------
# random instances and serialization


@dataclass
class BoundInstance:
    source: FiniteDomain
    target: FiniteDomain
    H: HypothesisClass
    f_hat_t: np.ndarray

    def to_json(self):
        return json.dumps(
            {
                "points": self.source.size,
                "probs_s": self.source.probs.tolist(),
                "probs_t": self.target.probs.tolist(),
                "f_s": self.source.label_fn.tolist(),
                "f_t": self.target.label_fn.tolist(),
                "f_hat_t": np.asarray(self.f_hat_t).tolist(),
                "hypotheses": self.H.hypotheses.tolist(),
            }
        )

    @classmethod
    def from_json(cls, text):
        obj = json.loads(text) if isinstance(text, str) else text
        n = int(obj["points"])
        source = FiniteDomain(obj["probs_s"], obj["f_s"])
        target = FiniteDomain(obj["probs_t"], obj["f_t"])
        if source.size != n or target.size != n:
            raise DimensionError(f"declared {n} points, got {source.size}/{target.size}")
        f_hat_t = obj.get("f_hat_t", obj["f_t"])
        return cls(source, target, HypothesisClass(obj["hypotheses"]), np.asarray(f_hat_t, dtype=float))


def _random_probs(rng, n):
    probs = rng.dirichlet(np.full(n, 0.7))
    if n > 1 and rng.random() < 0.3:
        # knock out part of the support to get disjoint-ish domains
        mask = rng.random(n) < 0.4
        if mask.all():
            mask[rng.integers(n)] = False
        probs[mask] = 0.0
        probs /= probs.sum()
    return probs


def random_instance(rng, max_points=8, max_hypotheses=32, binary=None):
    """Draw a random finite instance whose class contains f_s, f_t and f_hat_t.

    ``binary`` selects {0,1}-valued labels and hypotheses; otherwise values come
    from the grid {0, .25, .5, .75, 1}. ``None`` picks either at random.
    """
    if binary is None:
        binary = bool(rng.random() < 0.5)
    n = int(rng.integers(1, max_points + 1))
    grid = np.array([0.0, 1.0]) if binary else np.linspace(0.0, 1.0, 5)

    f_s = rng.choice(grid, size=n)
    f_t = rng.choice(grid, size=n)
    f_hat_t = f_t.copy()
    flip = rng.random(n) < 0.3
    f_hat_t[flip] = rng.choice(grid, size=int(flip.sum()))

    n_free = int(rng.integers(1, max_hypotheses - 3 + 1))
    free = rng.choice(grid, size=(n_free, n))
    hyps = np.vstack([free, f_s, f_t, f_hat_t])
    hyps = hyps[rng.permutation(len(hyps))]
    return BoundInstance(
        FiniteDomain(_random_probs(rng, n), f_s),
        FiniteDomain(_random_probs(rng, n), f_t),
        HypothesisClass(hyps),
        f_hat_t,
    )


REPORT_COLUMNS = (
    "instance_id", "check", "h_index", "lhs", "source_error", "hdh_term",
    "joint_term", "pseudo_term", "rhs_total", "slack", "holds",
)


def _report_row(instance_id, h_index, report):
    terms = report.rhs_terms
    return {
        "instance_id": instance_id,
        "check": report.name,
        "h_index": h_index,
        "lhs": report.lhs,
        "source_error": terms.get("source_error", ""),
        "hdh_term": terms.get("hdh_term", ""),
        "joint_term": terms.get("joint_term", ""),
        "pseudo_term": terms.get("pseudo_term", ""),
        "rhs_total": report.rhs_total,
        "slack": report.slack,
        "holds": report.holds,
    }


def check_instance(instance_id, inst, h_indices):
    """Run every bound and lemma checker on one instance; one row per check."""
    S, T, H = inst.source, inst.target, inst.H
    rows = []
    for i in h_indices:
        rows.append(_report_row(instance_id, i, check_theorem1(i, H, S, T)))
        rows.append(_report_row(instance_id, i, check_theorem2(i, H, S, T)))
        rows.append(_report_row(instance_id, i, check_theorem3(i, H, S, T, inst.f_hat_t)))
    h, h_prime, h_second = (H[j] for j in (list(h_indices) * 3)[:3])
    for D, tag in ((S, "s"), (T, "t")):
        holds, slack = check_lemma_triangle(h, h_prime, h_second, D)
        lhs = expected_error(h, h_prime, D)
        rows.append(_lemma_row(instance_id, f"lemma_triangle_{tag}", h_indices[0], lhs, slack, holds))
    holds, slack = check_lemma_hdh(h, h_prime, H, S, T)
    lhs = abs(expected_error(h, h_prime, S) - expected_error(h, h_prime, T))
    rows.append(_lemma_row(instance_id, "lemma_hdh", h_indices[0], lhs, slack, holds))
    return rows


def _lemma_row(instance_id, name, h_index, lhs, slack, holds):
    return {
        "instance_id": instance_id, "check": name, "h_index": h_index, "lhs": lhs,
        "source_error": "", "hdh_term": "", "joint_term": "", "pseudo_term": "",
        "rhs_total": lhs + slack, "slack": slack, "holds": holds,
    }


def check_random_instance(seed, instance_id, h_per_instance=3, max_points=8, max_hypotheses=32):
    """Draw instance ``instance_id`` of the stream rooted at ``seed`` and check it.

    Each instance has its own generator seeded by ``(seed, instance_id)``, so any
    subset can be replayed or evaluated out of order. The last checked
    hypothesis is always the one with the largest target error.
    """
    rng = np.random.default_rng([seed, instance_id])
    inst = random_instance(rng, max_points, max_hypotheses)
    picks = rng.choice(len(inst.H), size=h_per_instance, replace=len(inst.H) < h_per_instance)
    picks[-1] = int(np.argmax(np.abs(inst.H.hypotheses - inst.target.label_fn) @ inst.target.probs))
    return check_instance(instance_id, inst, [int(p) for p in picks])


def run_bound_suite(n_instances, seed, h_per_instance=3, max_points=8, max_hypotheses=32):
    """Check ``n_instances`` random instances; returns rows keyed by ``REPORT_COLUMNS``."""
    rows = []
    for i in range(n_instances):
        rows.extend(check_random_instance(seed, i, h_per_instance, max_points, max_hypotheses))
    return rows
