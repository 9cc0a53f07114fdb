"""Incentive math: closed-form examples, selectivity and bound properties,
the two gradient-equivalence identities, and the rank-one inverse update."""

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from emarl import nn
from emarl.incentive import (
    E3BState,
    IncentiveConfig,
    combined_reward,
    e3b_bonus,
    ec_loss_term,
    ec_target,
    episodic_incentive,
    episodic_incentive_batch,
    reward_ec,
)
from emarl.memory import EpisodicBuffer, RecallResult


def rec(h=0.0, xi=0, n_call=1, n_xi=0):
    return RecallResult(h=h, xi=xi, n_call=n_call, n_xi=n_xi, distance=0.0,
                        slot=0)


class TestConfig:
    def test_mode_validation(self):
        with pytest.raises(ValueError):
            IncentiveConfig(mode="curiosity")

    def test_scale_validation(self):
        with pytest.raises(ValueError):
            IncentiveConfig(lambda_ec=-1.0)
        with pytest.raises(ValueError):
            IncentiveConfig(lambda_e3b=0.0)
        with pytest.raises(ValueError):
            IncentiveConfig(beta_e3b=-0.1)


class TestEpisodicIncentive:
    def test_direct_evaluation(self):
        r = rec(h=5.0, xi=1, n_call=10, n_xi=10)
        assert episodic_incentive(r, 3.0, 0.99) == pytest.approx(1.98, abs=1e-15)

    def test_partial_ratio(self):
        r = rec(h=5.0, xi=1, n_call=10, n_xi=4)
        assert episodic_incentive(r, 3.0, 0.99) == pytest.approx(0.99 * 0.4 * 2.0)

    def test_zero_when_never_desirable(self):
        r = rec(h=50.0, xi=0, n_call=7, n_xi=0)
        assert episodic_incentive(r, 0.0, 0.99) == 0.0

    def test_zero_on_miss(self):
        assert episodic_incentive(None, 0.0, 0.99) == 0.0

    def test_clamp_floors_overestimated_target(self):
        r = rec(h=2.0, xi=1, n_call=5, n_xi=5)
        assert episodic_incentive(r, 3.0, 0.99) == 0.0
        assert episodic_incentive(r, 3.0, 0.99, clamp=False) == pytest.approx(-0.99)

    def test_counter_breach_raises(self):
        r = rec(h=1.0, xi=1, n_call=0, n_xi=2)
        with pytest.raises(ValueError):
            episodic_incentive(r, 0.0, 0.99)

    def test_gamma_validation(self):
        with pytest.raises(ValueError):
            episodic_incentive(None, 0.0, 1.0)
        with pytest.raises(ValueError):
            episodic_incentive(None, 0.0, -0.1)

    @given(st.integers(min_value=1, max_value=50), st.integers(min_value=0, max_value=50),
           st.floats(min_value=-20, max_value=20), st.floats(min_value=-20, max_value=20),
           st.floats(min_value=0, max_value=0.999))
    def test_bound_property(self, n_call, n_xi_raw, h, target_max, gamma):
        n_xi = min(n_xi_raw, n_call)
        r = rec(h=h, xi=int(n_xi > 0), n_call=n_call, n_xi=n_xi)
        rp = episodic_incentive(r, target_max, gamma)
        assert 0.0 <= rp <= gamma * max(0.0, h - target_max) + 1e-12
        if n_xi == 0:
            assert rp == 0.0

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(0)
        n = 200
        n_call = rng.integers(1, 20, size=n)
        n_xi = np.minimum(rng.integers(0, 20, size=n), n_call)
        h = rng.normal(size=n) * 5.0
        tm = rng.normal(size=n) * 5.0
        hit = rng.random(n) < 0.7
        got = episodic_incentive_batch(hit, h, n_call, n_xi, tm, 0.99)
        for i in range(n):
            r = rec(h=float(h[i]), xi=int(n_xi[i] > 0), n_call=int(n_call[i]),
                    n_xi=int(n_xi[i])) if hit[i] else None
            assert got[i] == pytest.approx(episodic_incentive(r, float(tm[i]), 0.99),
                                           abs=1e-15)

    def test_batch_counter_breach(self):
        with pytest.raises(ValueError):
            episodic_incentive_batch(np.array([True]), np.array([1.0]),
                                     np.array([0]), np.array([3]),
                                     np.array([0.0]), 0.99)

    def test_selectivity_over_random_buffers(self):
        # miniature of the acceptance sweep: random episodic buffers, random
        # queries, bonus must vanish without desirable evidence
        class Identity:
            trainable = False

            def embed(self, states, t_norm):
                return np.atleast_2d(np.asarray(states, dtype=np.float64)).copy()

        rng = np.random.default_rng(1)
        emb = Identity()
        for _ in range(30):
            buf = EpisodicBuffer(capacity=40, embed_dim=2, state_dim=2)
            for _ in range(15):
                n = int(rng.integers(1, 4))
                states = rng.normal(size=(n + 1, 2)) * 2.0
                buf.construct_from_trajectory(states, rng.normal(size=n) * 4.0,
                                              desirable=int(rng.random() < 0.4),
                                              delta=0.6, gamma=0.99,
                                              embedder=emb, t_max=50)
            for _ in range(20):
                res = buf.recall(rng.normal(size=2) * 2.0, 0.0, emb, 0.6)
                tm = float(rng.normal() * 3.0)
                rp = episodic_incentive(res, tm, 0.99)
                if res is None or res.xi == 0:
                    assert rp == 0.0
                assert 0.0 <= rp
                if res is not None:
                    assert rp <= 0.99 * max(0.0, res.h - tm) + 1e-12


class TestEcForms:
    def test_ec_target_examples(self):
        assert ec_target(0.0, 0.99, 10.0) == pytest.approx(9.9)
        assert ec_target(3.0, 0.0, 10.0) == 3.0
        rng = np.random.default_rng(2)
        r, g, h = rng.normal(), 0.5, rng.normal()
        assert ec_target(r, g, h) == pytest.approx(r + g * h, rel=1e-15)

    def test_ec_loss_term(self):
        assert ec_loss_term(5.0, 3.0, 0.1) == pytest.approx(0.4)
        assert ec_loss_term(7.0, 7.0, 0.5) == 0.0
        assert ec_loss_term(5.0, 1.0, 0.0) == 0.0
        with pytest.raises(ValueError):
            ec_loss_term(1.0, 1.0, -0.1)

    def test_reward_ec(self):
        assert reward_ec(0.0, 0.99, 10.0, 9.9, 0.1) == pytest.approx(0.0, abs=1e-12)
        assert reward_ec(1.0, 0.9, 5.0, 2.0, 0.0) == 0.0
        rng = np.random.default_rng(3)
        r, h, q = rng.normal(size=3)
        assert reward_ec(r, 0.9, h, q, 0.3) == pytest.approx(0.3 * (r + 0.9 * h - q))


class TestE3B:
    def test_first_step_unit_vector(self):
        s = E3BState(4, lambda_e3b=0.1)
        phi = np.array([1.0, 0.0, 0.0, 0.0])
        assert e3b_bonus(phi, s) == pytest.approx(10.0)

    def test_zero_embedding_is_inert(self):
        s = E3BState(3, lambda_e3b=0.5)
        before = s.inv_cov.copy()
        assert e3b_bonus(np.zeros(3), s) == 0.0
        np.testing.assert_array_equal(s.inv_cov, before)

    def test_matches_explicit_inverse(self):
        rng = np.random.default_rng(4)
        k, lam = 6, 0.1
        s = E3BState(k, lambda_e3b=lam)
        cov = lam * np.eye(k)
        for _ in range(100):
            phi = rng.normal(size=k)
            b = e3b_bonus(phi, s)
            explicit_b = float(phi @ np.linalg.inv(cov) @ phi)
            assert abs(b - explicit_b) <= 1e-8
            cov += np.outer(phi, phi)
            assert np.max(np.abs(s.inv_cov - np.linalg.inv(cov))) <= 1e-8

    def test_symmetry_and_positive_definite(self):
        rng = np.random.default_rng(5)
        s = E3BState(5, lambda_e3b=0.1)
        for _ in range(100):
            e3b_bonus(rng.normal(size=5), s)
        assert np.max(np.abs(s.inv_cov - s.inv_cov.T)) <= 1e-9
        np.linalg.cholesky(s.inv_cov)

    def test_reset(self):
        s = E3BState(3, lambda_e3b=0.2)
        e3b_bonus(np.ones(3), s)
        s.reset()
        np.testing.assert_array_equal(s.inv_cov, np.eye(3) / 0.2)

    def test_bad_lambda(self):
        with pytest.raises(ValueError):
            E3BState(3, lambda_e3b=-1.0)


class TestCombinedReward:
    def test_none_is_identity(self):
        assert combined_reward(2.5, IncentiveConfig(mode="none"), r_p=9.0) == 2.5

    def test_ec_keeps_reward(self):
        assert combined_reward(2.5, IncentiveConfig(mode="ec"), r_ec=9.0) == 2.5

    def test_e3b_scales_bonus(self):
        cfg = IncentiveConfig(mode="e3b", beta_e3b=0.01)
        assert combined_reward(1.0, cfg, bonus=10.0) == pytest.approx(1.1)

    def test_ei_adds_bonus(self):
        assert combined_reward(1.0, IncentiveConfig(mode="ei"), r_p=0.5) == 1.5
        assert combined_reward(1.0, IncentiveConfig(mode="ei"), r_p=0.0) == 1.0

    def test_rec_adds_residual(self):
        assert combined_reward(1.0, IncentiveConfig(mode="rec"), r_ec=-0.25) == 0.75


def tiny_q_net(rng, state_dim=3, n_actions=4):
    return nn.Sequential([
        nn.Dense(state_dim, 8, activation="relu", rng=rng),
        nn.Dense(8, n_actions, activation="identity", rng=rng),
    ])


def q_grads(net, s, action, d_q):
    """Gradients of d_q * Q(s, action) w.r.t. net parameters."""
    nn.zero_grads([net])
    q = net.forward(s)
    d_out = np.zeros_like(q)
    d_out[0, action] = d_q
    net.backward(d_out)
    return [g.copy() for g in nn.collect_grads([net])]


class TestGradientEquivalences:
    def test_reward_side_ec_matches_loss_side(self):
        # identity: d/dQ (y + lam*(r + g*H - Q)|const - Q)^2
        #         = d/dQ [(y - Q)^2 + lam*(r + g*H - Q)^2] up to float error
        rng = np.random.default_rng(6)
        gamma = 0.99
        for trial in range(10):
            net = tiny_q_net(rng)
            s = rng.normal(size=(1, 3))
            action = int(rng.integers(4))
            y, r, h = rng.normal(size=3) * 3.0
            q = float(net.forward(s)[0, action])
            for lam in (0.1, 0.5, 1.0):
                r_ec = reward_ec(r, gamma, h, q, lam)
                ga = q_grads(net, s, action, -2.0 * (y + r_ec - q))
                q_ec = ec_target(r, gamma, h)
                gb = q_grads(net, s, action,
                             -2.0 * (y - q) - 2.0 * lam * (q_ec - q))
                for a, b in zip(ga, gb):
                    assert np.max(np.abs(a - b)) <= 1e-8

    def test_incentive_recovers_optimal_bootstrap(self):
        # two-state chain: s1 absorbing with reward 1 each step, gamma 0.9,
        # so the true value of s1 is 10; with saturated counters and H = 10
        # the bonus-augmented target equals the target built from that value
        rng = np.random.default_rng(7)
        gamma = 0.9
        v_star = 1.0 / (1.0 - gamma)
        s0 = np.array([[1.0, 0.0]])
        s1 = np.array([[0.0, 1.0]])
        r = 1.0
        for trial in range(10):
            online = tiny_q_net(rng, state_dim=2, n_actions=2)
            target = tiny_q_net(rng, state_dim=2, n_actions=2)
            target_max = float(np.max(target.forward(s1)))
            assert target_max < v_star  # clamp must not bind
            res = rec(h=v_star, xi=1, n_call=9, n_xi=9)
            r_p = episodic_incentive(res, target_max, gamma)
            y_aug = r + r_p + gamma * target_max
            y_star = r + gamma * v_star
            action = int(rng.integers(2))
            q = float(online.forward(s0)[0, action])
            ga = q_grads(online, s0, action, -2.0 * (y_aug - q))
            gb = q_grads(online, s0, action, -2.0 * (y_star - q))
            for a, b in zip(ga, gb):
                assert np.max(np.abs(a - b)) <= 1e-8
