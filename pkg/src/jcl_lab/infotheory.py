"""Discrete information measures, the InfoNCE estimator and their identities.

Natural logarithms throughout, with ``0 log 0 = 0``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from jcl_lab.errors import ContractError, DimensionError

PMF_TOL = 1e-12
IDENTITY_TOL = 1e-10
# floor for log-ratios of zero-probability cells, keeps the critic finite
_LOG_FLOOR_PROB = 1e-300


def as_pmf(p, name="pmf"):
    """Validate and return ``p`` as a float array of non-negative mass summing to 1."""
    arr = np.asarray(p, dtype=np.float64)
    if arr.size == 0:
        raise ContractError(f"{name} is empty")
    if np.any(~np.isfinite(arr)) or np.any(arr < 0):
        raise ContractError(f"{name} has negative or non-finite entries")
    if abs(arr.sum() - 1.0) > PMF_TOL:
        raise ContractError(f"{name} sums to {arr.sum()!r}, not 1")
    return arr


def as_joint(j):
    arr = as_pmf(j, "joint")
    if arr.ndim != 2:
        raise DimensionError(f"joint must be a matrix, got shape {arr.shape}")
    return arr


def as_channel(m, name="channel"):
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim != 2:
        raise DimensionError(f"{name} must be a matrix")
    if np.any(arr < 0) or np.any(np.abs(arr.sum(axis=1) - 1.0) > PMF_TOL):
        raise ContractError(f"{name} rows must be probability vectors")
    return arr


def _plogp(p):
    p = np.asarray(p, dtype=np.float64).ravel()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy(p):
    """Shannon entropy in nats."""
    return _plogp(as_pmf(p))


def mutual_information(j):
    """``I(A;B) = H(A) + H(B) - H(A,B)`` for a joint pmf over rows x columns."""
    j = as_joint(j)
    return _plogp(j.sum(axis=1)) + _plogp(j.sum(axis=0)) - _plogp(j)


def mixture_joint(dists, pi):
    """Joint of (index, outcome) with P(i) = pi_i and P(z | i) = dists[i]."""
    pi = as_pmf(pi, "pi")
    dists = np.asarray(dists, dtype=np.float64)
    if dists.ndim != 2 or dists.shape[0] != pi.shape[0]:
        raise DimensionError(
            f"need one distribution per weight: {dists.shape} vs {pi.shape[0]} weights"
        )
    for i, d in enumerate(dists):
        as_pmf(d, f"dists[{i}]")
    return pi[:, None] * dists


def generalized_js(dists, pi):
    """Entropy of the pi-mixture minus the pi-weighted component entropies."""
    joint = mixture_joint(dists, pi)
    comp = sum(w * _plogp(d) for w, d in zip(pi, np.asarray(dists, dtype=float)))
    return _plogp(joint.sum(axis=0)) - comp


def check_js_mi_identity(dists, pi):
    """Absolute gap between the generalized JS divergence and I(label; outcome)."""
    return abs(generalized_js(dists, pi) - mutual_information(mixture_joint(dists, pi)))


def entropy_tradeoff(j):
    """Split ``I(Y;Z)`` into ``(H(Z), H(Z|Y), I)`` with Y on the first axis."""
    j = as_joint(j)
    h_z = _plogp(j.sum(axis=0))
    h_z_given_y = _plogp(j) - _plogp(j.sum(axis=1))
    return h_z, h_z_given_y, h_z - h_z_given_y


# --------------------------------------------------------------------------
# InfoNCE


def _logsumexp(a, axis):
    m = np.max(a, axis=axis, keepdims=True)
    return np.squeeze(m, axis=axis) + np.log(np.sum(np.exp(a - m), axis=axis))


def infonce_from_scores(scores):
    """InfoNCE value for a K x K critic matrix whose diagonal holds the joint pairs."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise DimensionError(f"scores must be square, got {scores.shape}")
    k = scores.shape[0]
    if k == 0:
        raise ContractError("InfoNCE needs at least one sample")
    if not np.all(np.isfinite(scores)):
        raise ContractError("critic values must be finite")
    return float(np.mean(np.diag(scores) - (_logsumexp(scores, axis=1) - np.log(k))))


def infonce_estimate(xs, ys, critic):
    """InfoNCE over K jointly drawn pairs ``(xs[i], ys[i])``.

    ``critic(x, y)`` must broadcast: it is called once as
    ``critic(xs[:, None], ys[None, :])`` and must return the K x K score matrix.
    The result never exceeds ``log K``.
    """
    xs = np.asarray(xs)
    ys = np.asarray(ys)
    if len(xs) != len(ys):
        raise DimensionError("xs and ys must have the same number of samples")
    if len(xs) == 0:
        raise ContractError("InfoNCE needs at least one sample")
    return infonce_from_scores(critic(xs[:, None], ys[None, :]))


def optimal_critic(joint):
    """Log density ratio ``log p(x,y) / (p(x) p(y))`` as an index-based critic."""
    joint = as_joint(joint)
    px = joint.sum(axis=1, keepdims=True)
    py = joint.sum(axis=0, keepdims=True)
    with np.errstate(divide="ignore"):
        table = np.log(np.maximum(joint, _LOG_FLOOR_PROB)) - np.log(px) - np.log(py)

    def critic(x, y):
        return table[x, y]

    return critic


@dataclass
class InfoNCEReport:
    k: int
    trials: int
    mean: float
    sem: float
    mi: float
    bound: float
    slack: float
    holds: bool


def check_infonce_bound(joint, k, trials, seed):
    """Monte-Carlo check that the optimal-critic InfoNCE mean stays below min(I, log K).

    Tolerance is three standard errors of the trial mean.
    """
    joint = as_joint(joint)
    if k < 1 or trials < 1:
        raise ContractError("need k >= 1 and trials >= 1")
    rng = np.random.default_rng(seed)
    n_rows, n_cols = joint.shape
    flat = joint.ravel()
    critic = optimal_critic(joint)
    values = np.empty(trials)
    for t in range(trials):
        cells = rng.choice(flat.size, size=k, p=flat)
        values[t] = infonce_estimate(cells // n_cols, cells % n_cols, critic)
    mean = float(values.mean())
    sem = float(values.std(ddof=1) / np.sqrt(trials)) if trials > 1 else 0.0
    mi = mutual_information(joint)
    bound = min(mi, float(np.log(k)))
    slack = bound + 3.0 * sem - mean
    return InfoNCEReport(k, trials, mean, sem, mi, bound, slack, bool(slack >= 0.0))


# --------------------------------------------------------------------------
# data processing inequality


@dataclass
class MarkovChain3:
    """Y -> X -> Z with a prior on Y and two row-stochastic channels."""

    prior: np.ndarray
    y_to_x: np.ndarray
    x_to_z: np.ndarray

    def __post_init__(self):
        self.prior = as_pmf(self.prior, "prior")
        self.y_to_x = as_channel(self.y_to_x, "y_to_x")
        self.x_to_z = as_channel(self.x_to_z, "x_to_z")
        if self.y_to_x.shape[0] != self.prior.shape[0]:
            raise DimensionError("y_to_x needs one row per value of Y")
        if self.x_to_z.shape[0] != self.y_to_x.shape[1]:
            raise DimensionError("x_to_z needs one row per value of X")


@dataclass
class DPIReport:
    i_yx: float
    i_yz: float
    i_z1z2: float
    i_yz1: float
    i_y_z1z2: float
    slacks: dict

    @property
    def holds(self):
        return all(s >= -IDENTITY_TOL for s in self.slacks.values())


def check_dpi_chain(chain):
    """Evaluate the single-branch and two-branch data processing inequalities exactly.

    The two-branch construction draws two X's independently given Y and pushes
    each through the same X -> Z channel.
    """
    p_y = chain.prior
    y_x = chain.y_to_x
    y_z = y_x @ chain.x_to_z

    i_yx = mutual_information(p_y[:, None] * y_x)
    i_yz = mutual_information(p_y[:, None] * y_z)

    # p(y, z1, z2) = p(y) q(z1|y) q(z2|y)
    three = p_y[:, None, None] * y_z[:, :, None] * y_z[:, None, :]
    i_z1z2 = mutual_information(three.sum(axis=0))
    i_yz1 = mutual_information(three.sum(axis=2))
    i_y_z1z2 = mutual_information(three.reshape(len(p_y), -1))

    slacks = {
        "yz_le_yx": i_yx - i_yz,
        "z1z2_le_yz1": i_yz1 - i_z1z2,
        "yz1_le_yz1z2": i_y_z1z2 - i_yz1,
    }
    return DPIReport(i_yx, i_yz, i_z1z2, i_yz1, i_y_z1z2, slacks)


# --------------------------------------------------------------------------
# random instances and suites


def random_pmf(rng, n, concentration=1.0, sparsity=0.0):
    p = rng.dirichlet(np.full(n, concentration))
    if sparsity > 0 and n > 1:
        drop = rng.random(n) < sparsity
        if drop.all():
            drop[rng.integers(n)] = False
        p[drop] = 0.0
    return p / p.sum()


def random_joint(rng, max_size=6, min_size=2):
    a, b = rng.integers(min_size, max_size + 1, size=2)
    conc = float(rng.choice([0.2, 0.5, 1.0, 3.0]))
    return random_pmf(rng, int(a * b), conc).reshape(int(a), int(b))


def random_chain(rng, max_size=5):
    ny, nx, nz = (int(v) for v in rng.integers(1, max_size + 1, size=3))
    conc = float(rng.choice([0.1, 0.5, 1.0, 5.0]))
    prior = random_pmf(rng, ny, conc, sparsity=0.2)
    y_to_x = np.stack([random_pmf(rng, nx, conc, sparsity=0.2) for _ in range(ny)])
    x_to_z = np.stack([random_pmf(rng, nz, conc, sparsity=0.2) for _ in range(nx)])
    return MarkovChain3(prior, y_to_x, x_to_z)


def random_mixture(rng, n=4, alphabet=6):
    pi = random_pmf(rng, n, 1.0)
    conc = float(rng.choice([0.1, 0.5, 1.0, 5.0]))
    dists = np.stack([random_pmf(rng, alphabet, conc, sparsity=0.2) for _ in range(n)])
    return dists, pi


CHECK_COLUMNS = ("check_name", "instance_id", "statistic", "bound", "slack", "pass")


def run_identity_suite(n_instances, seed, perturb=0.0):
    """JS = MI on random (n=4, alphabet 6) mixtures. ``perturb`` is added to the JS side."""
    rows = []
    for i in range(n_instances):
        dists, pi = random_mixture(np.random.default_rng([seed, 1, i]))
        gap = abs(generalized_js(dists, pi) + perturb - mutual_information(mixture_joint(dists, pi)))
        rows.append(_row("js_mi_identity", i, gap, IDENTITY_TOL, IDENTITY_TOL - gap))
    return rows


def run_dpi_suite(n_instances, seed):
    rows = []
    for i in range(n_instances):
        report = check_dpi_chain(random_chain(np.random.default_rng([seed, 2, i])))
        for name, slack in report.slacks.items():
            rows.append(_row(f"dpi_{name}", i, -slack, 0.0, slack, slack >= -IDENTITY_TOL))
    return rows


def run_infonce_suite(n_joints, seed, ks=(1, 8, 64), trials=200):
    rows = []
    for i in range(n_joints):
        joint = random_joint(np.random.default_rng([seed, 3, i]))
        for k in ks:
            rep = check_infonce_bound(joint, k, trials, seed=[seed, 4, i, k])
            ok = rep.holds and (k != 1 or rep.mean == 0.0)
            rows.append(_row(f"infonce_k{k}", i, rep.mean, rep.bound + 3 * rep.sem, rep.slack, ok))
    return rows


def _row(name, instance_id, statistic, bound, slack, ok=None):
    if ok is None:
        ok = slack >= 0.0
    return {
        "check_name": name,
        "instance_id": instance_id,
        "statistic": float(statistic),
        "bound": float(bound),
        "slack": float(slack),
        "pass": bool(ok),
    }
