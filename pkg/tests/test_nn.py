import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gradcheck import central_difference, max_stack_gradient_error, rel_error, unit_rows
from jcl_lab import nn
from jcl_lab.errors import ContractError, DimensionError


class TestForward:
    def test_identity_encoder(self):
        arch = nn.Architecture(in_dim=4, hidden=(), feat_dim=4, proj_dim=2, n_classes=2)
        state = nn.init_state(arch, np.random.default_rng(0))
        state.params["enc.out.W"] = np.eye(4)
        state.params["enc.out.b"] = np.zeros(4)
        x = unit_rows(np.random.default_rng(1), 5, 4)
        z, _ = nn.forward(state, x, "source", train_mode=True)
        np.testing.assert_allclose(z, x, atol=1e-15)

    def test_unit_norm_outputs(self, small_arch):
        rng = np.random.default_rng(2)
        state = nn.init_state(small_arch, rng)
        x = rng.normal(scale=5.0, size=(17, 3))
        for train in (True, False):
            z, _ = nn.forward(state, x, "source", train)
            np.testing.assert_allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)
            w, _ = nn.project(state, z)
            np.testing.assert_allclose(np.linalg.norm(w, axis=1), 1.0, atol=1e-9)

    def test_bit_stable(self, small_arch):
        outs = []
        for _ in range(2):
            rng = np.random.default_rng(3)
            state = nn.init_state(small_arch, rng)
            x = rng.normal(size=(8, 3))
            outs.append(nn.forward(state, x, "source", True)[0])
        assert outs[0].tobytes() == outs[1].tobytes()

    def test_errors(self, small_arch):
        state = nn.init_state(small_arch, np.random.default_rng(0))
        with pytest.raises(DimensionError):
            nn.forward(state, np.zeros((4, 2)), "source", True)
        with pytest.raises(DimensionError):
            nn.forward(state, np.zeros((0, 3)), "source", True)

    def test_domain_statistics_isolated(self, small_arch):
        rng = np.random.default_rng(4)
        state = nn.init_state(small_arch, rng)
        nn.forward(state, rng.normal(size=(10, 3)), "source", True)
        before = {k: {s: a.tobytes() for s, a in v.items()} for k, v in state.stats("source").items()}
        params_before = {k: v.tobytes() for k, v in state.params.items()}
        nn.forward(state, rng.normal(loc=3.0, size=(10, 3)), "target", True)
        after = {k: {s: a.tobytes() for s, a in v.items()} for k, v in state.stats("source").items()}
        assert before == after
        assert params_before == {k: v.tobytes() for k, v in state.params.items()}
        assert not np.allclose(state.stats("target")["enc.0"]["mean"], 0.0)

    def test_running_stats_momentum(self, small_arch):
        rng = np.random.default_rng(5)
        state = nn.init_state(small_arch, rng)
        x = rng.normal(size=(10, 3))
        a = x @ state.params["enc.0.W"]
        nn.forward(state, x, "source", True)
        run = state.stats("source")["enc.0"]
        np.testing.assert_allclose(run["mean"], 0.1 * a.mean(axis=0), atol=1e-14)
        np.testing.assert_allclose(run["var"], 0.9 + 0.1 * a.var(axis=0), atol=1e-14)
        assert np.all(run["var"] > 0)

    def test_eval_mode_does_not_touch_stats(self, small_arch):
        rng = np.random.default_rng(6)
        state = nn.init_state(small_arch, rng)
        nn.forward(state, rng.normal(size=(10, 3)), "source", False)
        np.testing.assert_array_equal(state.stats("source")["enc.0"]["mean"], 0.0)


class TestBackward:
    def test_zero_upstream(self, small_arch):
        rng = np.random.default_rng(0)
        state = nn.init_state(small_arch, rng)
        z, cache = nn.forward(state, rng.normal(size=(5, 3)), "source", True)
        grads = nn.backward(state, cache, np.zeros_like(z))
        assert set(grads) == set(nn.encoder_param_names(small_arch))
        assert all(np.all(g == 0) for g in grads.values())

    def test_linear_quadratic_closed_form(self):
        arch = nn.Architecture(in_dim=3, hidden=(), feat_dim=2, proj_dim=2, n_classes=2,
                               domain_norm=False, l2_normalize=False)
        rng = np.random.default_rng(1)
        state = nn.init_state(arch, rng)
        X = rng.normal(size=(7, 3))
        Y = rng.normal(size=(7, 2))
        z, cache = nn.forward(state, X, "source", True)
        # loss = ||XW + b - Y||^2 / (2N); dz = residual / N
        resid = X @ state.params["enc.out.W"] + state.params["enc.out.b"] - Y
        grads = nn.backward(state, cache, resid / len(X))
        np.testing.assert_allclose(grads["enc.out.W"], X.T @ resid / len(X), atol=1e-14)
        np.testing.assert_allclose(grads["enc.out.b"], resid.mean(axis=0), atol=1e-14)

    def test_cache_mismatch(self, small_arch):
        rng = np.random.default_rng(0)
        state = nn.init_state(small_arch, rng)
        other = nn.init_state(nn.Architecture(in_dim=3, hidden=(5,), feat_dim=4, proj_dim=3), rng)
        z, cache = nn.forward(other, rng.normal(size=(5, 3)), "source", True)
        with pytest.raises(ContractError):
            nn.backward(state, cache, np.zeros_like(z))

    @pytest.mark.parametrize("seed", range(5))
    @pytest.mark.parametrize("train_mode", [True, False])
    def test_full_stack_matches_finite_differences(self, small_arch, seed, train_mode):
        assert max_stack_gradient_error(seed, small_arch, train_mode) <= 1e-4

    @pytest.mark.parametrize("activation", ["relu", "tanh"])
    def test_without_domain_norm(self, activation):
        arch = nn.Architecture(in_dim=2, hidden=(6,), feat_dim=3, proj_dim=3, n_classes=2,
                               activation=activation, domain_norm=False)
        assert max_stack_gradient_error(11, arch) <= 1e-4


class TestCrossEntropy:
    def test_confident(self):
        loss, _ = nn.cross_entropy_loss(np.array([[50.0, 0.0, 0.0]]), np.array([0]))
        assert loss < 1e-20

    def test_uniform(self):
        loss, _ = nn.cross_entropy_loss(np.zeros((4, 5)), np.array([0, 1, 2, 3]))
        assert loss == pytest.approx(math.log(5), abs=1e-15)

    def test_two_class_value(self):
        loss, _ = nn.cross_entropy_loss(np.array([[1.0, 0.0]]), np.array([0]))
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)
        assert loss == pytest.approx(0.3133, abs=5e-5)

    def test_gradient(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(6, 4))
        labels = rng.integers(0, 4, 6)
        _, grad = nn.cross_entropy_loss(logits, labels)
        p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
        np.testing.assert_allclose(grad, (p - np.eye(4)[labels]) / 6, atol=1e-15)
        numeric = central_difference(lambda: nn.cross_entropy_loss(logits, labels)[0], logits)
        assert rel_error(grad, numeric) <= 1e-4

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            nn.cross_entropy_loss(np.zeros((2, 3)), np.array([0, 3]))

    def test_batch_permutation(self):
        rng = np.random.default_rng(1)
        logits, labels = rng.normal(size=(9, 3)), rng.integers(0, 3, 9)
        perm = rng.permutation(9)
        a = nn.cross_entropy_loss(logits, labels)[0]
        b = nn.cross_entropy_loss(logits[perm], labels[perm])[0]
        assert a == pytest.approx(b, abs=1e-15)


class TestContrastiveLoss:
    def test_single_positive_no_negatives(self):
        q = np.array([[1.0, 0.0]])
        loss, grad = nn.contrastive_loss(q, [0], np.array([[0.0, 1.0]]), [0], tau=0.05)
        assert loss == 0.0
        np.testing.assert_array_equal(grad, 0.0)

    def test_one_negative_value(self):
        q = np.array([[1.0, 0.0]])
        keys = np.array([[1.0, 0.0], [0.0, 1.0]])
        loss, _ = nn.contrastive_loss(q, [0], keys, [0, 1], tau=1.0)
        assert loss == pytest.approx(math.log(1 + math.exp(-1)), abs=1e-15)

    def test_matches_naive_definition(self):
        rng = np.random.default_rng(2)
        q, k = unit_rows(rng, 5, 4), unit_rows(rng, 12, 4)
        qy, ky = rng.integers(0, 3, 5), np.arange(12) % 3
        tau = 0.3
        total = 0.0
        for i in range(5):
            negs = [j for j in range(12) if ky[j] != qy[i]]
            poss = [j for j in range(12) if ky[j] == qy[i]]
            terms = []
            for p in poss:
                num = math.exp(q[i] @ k[p] / tau)
                den = num + sum(math.exp(q[i] @ k[n] / tau) for n in negs)
                terms.append(-math.log(num / den))
            total += sum(terms) / len(terms)
        assert nn.contrastive_loss(q, qy, k, ky, tau)[0] == pytest.approx(total / 5, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient(self, seed):
        rng = np.random.default_rng(seed)
        q, k = unit_rows(rng, 6, 5), unit_rows(rng, 20, 5)
        qy, ky = rng.integers(0, 4, 6), np.arange(20) % 4
        _, grad = nn.contrastive_loss(q, qy, k, ky, 0.05)
        numeric = central_difference(lambda: nn.contrastive_loss(q, qy, k, ky, 0.05)[0], q)
        assert rel_error(grad, numeric) <= 1e-4

    def test_queue_permutation_invariance(self):
        rng = np.random.default_rng(3)
        q, k = unit_rows(rng, 4, 3), unit_rows(rng, 15, 3)
        qy, ky = rng.integers(0, 3, 4), np.arange(15) % 3
        perm = rng.permutation(15)
        a, ga = nn.contrastive_loss(q, qy, k, ky, 0.1)
        b, gb = nn.contrastive_loss(q, qy, k[perm], ky[perm], 0.1)
        assert a == pytest.approx(b, abs=1e-12)
        np.testing.assert_allclose(ga, gb, atol=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            q, k = unit_rows(rng, 4, 3), unit_rows(rng, 10, 3)
            loss, _ = nn.contrastive_loss(q, rng.integers(0, 2, 4), k, np.arange(10) % 2, 0.05)
            assert loss >= 0.0

    def test_contract_errors(self):
        q = np.array([[1.0, 0.0]])
        with pytest.raises(ContractError):
            nn.contrastive_loss(q, [1], q, [0], 0.05)
        with pytest.raises(ContractError):
            nn.contrastive_loss(q, [0], q, [0], 0.0)


class TestSchedule:
    def test_start(self):
        assert nn.lr_schedule(0.0, 0.01, 10, 0.75) == 0.01

    def test_alpha_zero(self):
        assert all(nn.lr_schedule(p, 0.3, 0.0, 0.75) == 0.3 for p in np.linspace(0, 1, 11))

    def test_end_value(self):
        assert nn.lr_schedule(1.0, 0.01, 10, 0.75) == pytest.approx(0.01 * 11 ** -0.75, rel=1e-15)
        assert nn.lr_schedule(1.0, 0.01, 10, 0.75) == pytest.approx(1.6556e-3, abs=1e-7)

    def test_monotone(self):
        values = [nn.lr_schedule(p, 0.01, 10, 0.75) for p in np.linspace(0, 1, 100)]
        assert all(a >= b for a, b in zip(values, values[1:]))

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            nn.lr_schedule(1.5, 0.01, 10, 0.75)


def _scalar_state(value):
    arch = nn.Architecture(in_dim=1, hidden=(), feat_dim=1, proj_dim=1, n_classes=1)
    state = nn.init_state(arch, np.random.default_rng(0))
    state.params = {"w": np.array([value])}
    return state


class TestSgd:
    def test_zero_gradient(self):
        state = _scalar_state(3.0)
        nn.sgd_step(state, {"w": np.zeros(1)}, nn.OptimizerState(eta0=0.1, alpha=0.0))
        assert state.params["w"][0] == 3.0

    def test_plain_sgd(self):
        state = _scalar_state(3.0)
        nn.sgd_step(state, {"w": np.array([2.0])}, nn.OptimizerState(eta0=0.1, alpha=0.0, momentum=0.0))
        assert state.params["w"][0] == pytest.approx(3.0 - 0.2, abs=1e-15)

    def test_momentum_unrolled(self):
        state = _scalar_state(0.0)
        opt = nn.OptimizerState(eta0=1.0, alpha=0.0, momentum=0.9)
        nn.sgd_step(state, {"w": np.array([1.0])}, opt)
        nn.sgd_step(state, {"w": np.array([1.0])}, opt)
        assert -state.params["w"][0] == pytest.approx(2.9, abs=1e-15)

    def test_shape_mismatch(self):
        state = _scalar_state(0.0)
        with pytest.raises(DimensionError):
            nn.sgd_step(state, {"w": np.zeros(2)}, nn.OptimizerState())

    def test_invalid_momentum(self):
        with pytest.raises(ContractError):
            nn.OptimizerState(momentum=1.0)


def test_checkpoint_roundtrip(small_arch):
    rng = np.random.default_rng(0)
    state = nn.init_state(small_arch, rng)
    nn.forward(state, rng.normal(size=(5, 3)), "target", True)
    text = json.dumps(nn.to_checkpoint(state))
    back = nn.from_checkpoint(text)
    assert back.arch == small_arch
    for k in state.params:
        np.testing.assert_array_equal(back.params[k], state.params[k])
    np.testing.assert_array_equal(back.stats("target")["enc.1"]["var"], state.stats("target")["enc.1"]["var"])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31))
def test_predict_uses_eval_mode(seed):
    arch = nn.Architecture(in_dim=2, hidden=(4,), feat_dim=3, proj_dim=2, n_classes=3)
    rng = np.random.default_rng(seed)
    state = nn.init_state(arch, rng)
    x = rng.normal(size=(6, 2))
    before = state.stats("source")["enc.0"]["mean"].copy()
    pred = nn.predict(state, x, "source")
    assert pred.shape == (6,) and set(pred) <= {0, 1, 2}
    np.testing.assert_array_equal(state.stats("source")["enc.0"]["mean"], before)
