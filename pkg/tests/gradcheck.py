"""Finite-difference helpers shared by the gradient tests."""

import numpy as np

from jcl_lab import nn


def rel_error(analytic, numeric, floor=1e-5):
    """Largest coordinate-wise relative error, with ``floor`` guarding near-zero entries."""
    a = np.asarray(analytic, dtype=float)
    n = np.asarray(numeric, dtype=float)
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / scale)) if a.size else 0.0


def central_difference(f, array, step=1e-5):
    """Numerical gradient of scalar ``f()`` with respect to ``array`` (perturbed in place)."""
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = array[idx]
        array[idx] = old + step
        up = f()
        array[idx] = old - step
        down = f()
        array[idx] = old
        grad[idx] = (up - down) / (2 * step)
    return grad


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def stack_loss(state, x, labels, keys, key_labels, tau, gamma, domain, train_mode):
    """Cross-entropy on the classifier head plus ``gamma`` times the contrastive loss
    on the projection head, both through the encoder. Returns ``(loss, grads)``."""
    z, cache = nn.forward(state, x, domain, train_mode)
    logits, ccache = nn.classify(state, z)
    w, pcache = nn.project(state, z)
    ls, dlogits = nn.cross_entropy_loss(logits, labels)
    lc, dw = nn.contrastive_loss(w, labels, keys, key_labels, tau)
    grads_c, dz_c = nn.classify_backward(state, ccache, dlogits)
    grads_p, dz_p = nn.project_backward(state, pcache, gamma * dw)
    grads = nn.backward(state, cache, dz_c + dz_p)
    nn.accumulate(grads, grads_c)
    nn.accumulate(grads, grads_p)
    return ls + gamma * lc, grads


def max_stack_gradient_error(seed, arch, train_mode=True, tau=0.05, gamma=0.7, batch=6):
    """Largest relative error between analytic and central-difference gradients
    over every parameter of a random network built from ``seed``."""
    rng = np.random.default_rng(seed)
    state = nn.init_state(arch, rng)
    for name in state.params:
        if name.endswith(".b") or name.endswith(".beta"):
            state.params[name] = rng.normal(scale=0.1, size=state.params[name].shape)
        if name.endswith(".gamma"):
            state.params[name] = 1.0 + rng.normal(scale=0.1, size=state.params[name].shape)
    x = rng.normal(size=(batch, arch.in_dim))
    labels = np.arange(batch) % arch.n_classes
    keys = unit_rows(rng, 3 * arch.n_classes, arch.proj_dim)
    key_labels = np.arange(len(keys)) % arch.n_classes
    if not train_mode:
        stats = state.stats("target")
        for layer in stats.values():
            layer["mean"] = rng.normal(size=layer["mean"].shape)
            layer["var"] = rng.uniform(0.5, 2.0, size=layer["var"].shape)

    def loss():
        return stack_loss(state, x, labels, keys, key_labels, tau, gamma, "target", train_mode)[0]

    _, grads = stack_loss(state, x, labels, keys, key_labels, tau, gamma, "target", train_mode)
    worst = 0.0
    for name, param in state.params.items():
        numeric = central_difference(loss, param)
        worst = max(worst, rel_error(grads[name], numeric))
    return worst
