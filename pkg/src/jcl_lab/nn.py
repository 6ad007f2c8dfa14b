"""A small dense network with hand-written gradients.

The encoder maps inputs to unit-norm features::

    x -> [Linear -> DomainNorm -> ReLU] * len(hidden) -> Linear -> L2 normalize -> z

and two heads sit on top of ``z``: a projection head (Linear -> L2 normalize)
for the contrastive loss and a linear classification head.

``DomainNorm`` standardizes each feature with batch statistics in train mode
and with running statistics of the batch's domain in eval mode. The affine
scale/shift is shared across domains; only the statistics are per domain.
Linear layers feeding a ``DomainNorm`` carry no bias since the mean
subtraction would cancel it.

Parameters live in a flat ``dict[str, ndarray]``; gradients use the same keys.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from jcl_lab.errors import ContractError, DimensionError


@dataclass(frozen=True)
class Architecture:
    in_dim: int = 2
    hidden: tuple = (64, 64)
    feat_dim: int = 16
    proj_dim: int = 8
    n_classes: int = 3
    activation: str = "relu"
    domain_norm: bool = True
    l2_normalize: bool = True
    norm_momentum: float = 0.9
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.activation not in _ACTIVATIONS:
            raise ContractError(f"unknown activation {self.activation!r}")


def _relu(a):
    return np.maximum(a, 0.0)


def _relu_grad(a, out):
    return (a > 0).astype(a.dtype)


def _tanh_grad(a, out):
    return 1.0 - out * out


_ACTIVATIONS = {"relu": (_relu, _relu_grad), "tanh": (np.tanh, _tanh_grad)}


@dataclass
class MlpState:
    arch: Architecture
    params: dict
    # running[domain][layer] -> {"mean": ..., "var": ...}
    running: dict = field(default_factory=dict)

    def copy(self):
        return MlpState(
            self.arch,
            {k: v.copy() for k, v in self.params.items()},
            {d: {layer: {s: a.copy() for s, a in st.items()} for layer, st in layers.items()}
             for d, layers in self.running.items()},
        )

    def stats(self, domain):
        """Running statistics for ``domain``, created at mean 0 / var 1 on first use."""
        if domain not in self.running:
            self.running[domain] = {
                f"enc.{i}": {"mean": np.zeros(w), "var": np.ones(w)}
                for i, w in enumerate(self.arch.hidden)
            } if self.arch.domain_norm else {}
        return self.running[domain]


def init_state(arch, rng):
    """He-initialised weights, unit norm scale, zero head biases."""
    params = {}
    widths = (arch.in_dim,) + arch.hidden
    for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"enc.{i}.W"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        if arch.domain_norm:
            params[f"enc.{i}.gamma"] = np.ones(fan_out)
            params[f"enc.{i}.beta"] = np.zeros(fan_out)
        else:
            params[f"enc.{i}.b"] = np.zeros(fan_out)
    last = widths[-1]
    params["enc.out.W"] = rng.normal(0.0, np.sqrt(1.0 / last), size=(last, arch.feat_dim))
    # non-zero so inputs that silence every hidden unit still have a direction
    params["enc.out.b"] = rng.normal(0.0, 0.1, size=arch.feat_dim)
    params["proj.W"] = rng.normal(0.0, np.sqrt(1.0 / arch.feat_dim), size=(arch.feat_dim, arch.proj_dim))
    params["proj.b"] = np.zeros(arch.proj_dim)
    params["cls.W"] = rng.normal(0.0, np.sqrt(1.0 / arch.feat_dim), size=(arch.feat_dim, arch.n_classes))
    params["cls.b"] = np.zeros(arch.n_classes)
    return MlpState(arch, params)


def encoder_param_names(arch):
    names = []
    for i in range(len(arch.hidden)):
        names.append(f"enc.{i}.W")
        names.extend([f"enc.{i}.gamma", f"enc.{i}.beta"] if arch.domain_norm else [f"enc.{i}.b"])
    return names + ["enc.out.W", "enc.out.b"]


# --------------------------------------------------------------------------
# building blocks


def _l2_forward(u):
    norm = np.linalg.norm(u, axis=1, keepdims=True)
    return u / norm, norm


def _l2_backward(z, norm, dz):
    return (dz - z * np.sum(z * dz, axis=1, keepdims=True)) / norm


def _norm_backward(dy, cache, gamma):
    n, inv_std, train = cache["n"], cache["inv_std"], cache["train"]
    dgamma = np.sum(dy * n, axis=0)
    dbeta = np.sum(dy, axis=0)
    dn = dy * gamma
    if not train:
        return dn * inv_std, dgamma, dbeta
    m = dy.shape[0]
    da = inv_std / m * (m * dn - dn.sum(axis=0) - n * np.sum(dn * n, axis=0))
    return da, dgamma, dbeta


# --------------------------------------------------------------------------
# encoder


def forward(state, x, domain, train_mode):
    """Encode a batch. Returns ``(z, cache)``.

    In train mode the batch statistics of every normalization layer are folded
    into ``domain``'s running statistics; other domains are untouched.
    """
    arch = state.arch
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"expected a non-empty (batch, features) array, got {x.shape}")
    if x.shape[1] != arch.in_dim:
        raise DimensionError(f"input width {x.shape[1]} != {arch.in_dim}")
    act, _ = _ACTIVATIONS[arch.activation]
    p = state.params
    stats = state.stats(domain) if arch.domain_norm else None
    layers = []
    h = x
    for i in range(len(arch.hidden)):
        layer = {"input": h}
        a = h @ p[f"enc.{i}.W"]
        if arch.domain_norm:
            key = f"enc.{i}"
            if train_mode:
                mean, var = a.mean(axis=0), a.var(axis=0)
                run = stats[key]
                mom = arch.norm_momentum
                run["mean"] = mom * run["mean"] + (1 - mom) * mean
                run["var"] = mom * run["var"] + (1 - mom) * var
            else:
                mean, var = stats[key]["mean"], stats[key]["var"]
            inv_std = 1.0 / np.sqrt(var + arch.norm_eps)
            n = (a - mean) * inv_std
            layer["norm"] = {"n": n, "inv_std": inv_std, "train": bool(train_mode)}
            a = n * p[f"enc.{i}.gamma"] + p[f"enc.{i}.beta"]
        else:
            a = a + p[f"enc.{i}.b"]
        out = act(a)
        layer["pre"] = a
        layer["out"] = out
        layers.append(layer)
        h = out
    u = h @ p["enc.out.W"] + p["enc.out.b"]
    cache = {"layers": layers, "last": h, "domain": domain, "arch": arch}
    if arch.l2_normalize:
        z, norm = _l2_forward(u)
        cache["l2"] = (z, norm)
    else:
        z = u
    return z, cache


def backward(state, cache, dz):
    """Encoder gradients for upstream ``dz``; returns a ``{name: array}`` gradient set."""
    arch = state.arch
    if cache.get("arch") != arch:
        raise ContractError("cache was produced by a different architecture")
    dz = np.asarray(dz, dtype=np.float64)
    if dz.shape != (cache["last"].shape[0], arch.feat_dim):
        raise DimensionError(f"upstream gradient has shape {dz.shape}")
    _, act_grad = _ACTIVATIONS[arch.activation]
    p = state.params
    grads = {}
    du = _l2_backward(*cache["l2"], dz) if arch.l2_normalize else dz
    grads["enc.out.W"] = cache["last"].T @ du
    grads["enc.out.b"] = du.sum(axis=0)
    dh = du @ p["enc.out.W"].T
    for i in reversed(range(len(arch.hidden))):
        layer = cache["layers"][i]
        da = dh * act_grad(layer["pre"], layer["out"])
        if arch.domain_norm:
            da, dgamma, dbeta = _norm_backward(da, layer["norm"], p[f"enc.{i}.gamma"])
            grads[f"enc.{i}.gamma"] = dgamma
            grads[f"enc.{i}.beta"] = dbeta
        else:
            grads[f"enc.{i}.b"] = da.sum(axis=0)
        grads[f"enc.{i}.W"] = layer["input"].T @ da
        dh = da @ p[f"enc.{i}.W"].T
    return grads


# --------------------------------------------------------------------------
# heads


def project(state, z):
    v = z @ state.params["proj.W"] + state.params["proj.b"]
    if not state.arch.l2_normalize:
        return v, {"z": z}
    w, norm = _l2_forward(v)
    return w, {"z": z, "l2": (w, norm)}


def project_backward(state, cache, dw):
    dv = _l2_backward(*cache["l2"], dw) if "l2" in cache else dw
    grads = {"proj.W": cache["z"].T @ dv, "proj.b": dv.sum(axis=0)}
    return grads, dv @ state.params["proj.W"].T


def classify(state, z):
    return z @ state.params["cls.W"] + state.params["cls.b"], {"z": z}


def classify_backward(state, cache, dlogits):
    grads = {"cls.W": cache["z"].T @ dlogits, "cls.b": dlogits.sum(axis=0)}
    return grads, dlogits @ state.params["cls.W"].T


def predict(state, x, domain):
    """Eval-mode class predictions using ``domain``'s running statistics."""
    z, _ = forward(state, x, domain, train_mode=False)
    logits, _ = classify(state, z)
    return np.argmax(logits, axis=1)


def accumulate(total, grads, scale=1.0):
    """Add ``scale * grads`` into ``total`` in place and return it."""
    for name, g in grads.items():
        if name in total:
            total[name] = total[name] + scale * g
        else:
            total[name] = scale * g
    return total


# --------------------------------------------------------------------------
# losses


def _log_softmax(logits):
    shifted = logits - logits.max(axis=1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def cross_entropy_loss(logits, labels):
    """Mean negative log-likelihood and its gradient with respect to the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"need {n} labels, got shape {labels.shape}")
    if np.any(labels < 0) or np.any(labels >= c):
        raise ContractError(f"labels must lie in [0, {c})")
    logp = _log_softmax(logits)
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / n


def contrastive_loss(queries, query_labels, keys, key_labels, tau):
    """Label-supervised InfoNCE over a key dictionary.

    For each query, every same-label key is a positive and every other key a
    negative. Each positive is contrasted against the query's negatives only:

        -log exp(s+/tau) / (exp(s+/tau) + sum_neg exp(s-/tau))

    averaged over the query's positives, then over queries. Keys are constants
    (no gradient). Returns ``(loss, d loss / d queries)``.
    """
    q = np.asarray(queries, dtype=np.float64)
    k = np.asarray(keys, dtype=np.float64)
    qy = np.asarray(query_labels)
    ky = np.asarray(key_labels)
    if tau <= 0:
        raise ContractError("tau must be positive")
    if q.ndim != 2 or k.ndim != 2 or q.shape[1] != k.shape[1]:
        raise DimensionError(f"query/key widths disagree: {q.shape} vs {k.shape}")
    if qy.shape != (q.shape[0],) or ky.shape != (k.shape[0],):
        raise DimensionError("one label per query and per key")

    logits = q @ k.T / tau
    pos = qy[:, None] == ky[None, :]
    n_pos = pos.sum(axis=1)
    if np.any(n_pos == 0):
        bad = int(np.flatnonzero(n_pos == 0)[0])
        raise ContractError(f"query {bad} (label {qy[bad]}) has no positive key")

    neg_logits = np.where(pos, -np.inf, logits)
    m = np.max(logits, axis=1, keepdims=True)
    neg_sum = np.exp(neg_logits - m).sum(axis=1, keepdims=True)
    # per (query, key) denominators for positive pairs
    denom = np.exp(logits - m) + neg_sum
    log_ratio = logits - m - np.log(denom)
    per_query = -np.where(pos, log_ratio, 0.0).sum(axis=1) / n_pos
    loss = float(per_query.mean())

    # d/d logit of positive p: (sigma_p - 1) / |P|
    # d/d logit of negative n: sum_p exp(l_n - m) / denom_p / |P|
    sigma = np.where(pos, np.exp(log_ratio), 0.0)
    inv_denom = np.where(pos, 1.0 / denom, 0.0).sum(axis=1, keepdims=True)
    dlogits = np.where(pos, sigma - 1.0, np.exp(neg_logits - m) * inv_denom)
    dlogits = dlogits / n_pos[:, None] / q.shape[0]
    return loss, dlogits @ k / tau


# --------------------------------------------------------------------------
# optimisation


def lr_schedule(p, eta0, alpha, beta):
    """``eta0 * (1 + alpha p) ** -beta`` for training progress ``p`` in [0, 1]."""
    if not 0.0 <= p <= 1.0:
        raise ContractError(f"progress {p} outside [0, 1]")
    if eta0 <= 0:
        raise ContractError("eta0 must be positive")
    return eta0 * (1.0 + alpha * p) ** (-beta)


@dataclass
class OptimizerState:
    eta0: float = 0.01
    alpha: float = 10.0
    beta: float = 0.75
    momentum: float = 0.9
    p: float = 0.0
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if not 0.0 <= self.momentum < 1.0:
            raise ContractError("momentum must lie in [0, 1)")

    @property
    def lr(self):
        return lr_schedule(self.p, self.eta0, self.alpha, self.beta)


def sgd_step(state, grads, opt):
    """Heavy-ball momentum step: ``v <- mu v + g``; ``theta <- theta - lr v``.

    Parameters without a gradient entry are left alone. Updates ``state`` in
    place and returns it.
    """
    lr = opt.lr
    for name, g in grads.items():
        param = state.params[name]
        if g.shape != param.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
        v = opt.velocity.get(name)
        v = g.copy() if v is None else opt.momentum * v + g
        opt.velocity[name] = v
        state.params[name] = param - lr * v
    return state


# --------------------------------------------------------------------------
# checkpoints


def to_checkpoint(state):
    return {
        "arch": asdict(state.arch),
        "params": {k: v.tolist() for k, v in sorted(state.params.items())},
        "running": {
            d: {layer: {s: a.tolist() for s, a in st.items()} for layer, st in layers.items()}
            for d, layers in sorted(state.running.items())
        },
    }


def from_checkpoint(obj):
    if isinstance(obj, str):
        obj = json.loads(obj)
    arch = Architecture(**obj["arch"])
    params = {k: np.asarray(v, dtype=np.float64) for k, v in obj["params"].items()}
    running = {
        d: {layer: {s: np.asarray(a, dtype=np.float64) for s, a in st.items()} for layer, st in layers.items()}
        for d, layers in obj.get("running", {}).items()
    }
    return MlpState(arch, params, running)
