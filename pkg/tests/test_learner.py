"""Learner tests: GAE against a brute-force double-sum oracle, the clipped
surrogate against closed forms and finite differences, update determinism and
the skip-on-non-finite contract."""

import math
from dataclasses import replace

import numpy as np
import pytest

from parpo.envs import cartpole_spec, make_env, pendulum_spec
from parpo.errors import ConfigurationError, NonFiniteUpdateError, ProtocolError
from parpo.learner import (
    ExperienceBatch,
    Minibatch,
    PpoHyper,
    Segment,
    Transition,
    _pack_theta,
    _segment_advantages,
    _unpack_theta,
    compute_gae,
    normalize_advantages,
    ppo_loss_and_grad,
    ppo_update,
)
from parpo.nn_core import Rng, derive_worker_rng, finite_diff_grad, init_adam
from parpo.orchestrator import batch_from_chunks
from parpo.policy import init_policy
from parpo.sampler import collect_chunk


def gae_brute_force(rewards, values, terminated, bootstrap, gamma, lam):
    """Independent oracle: A_t = sum_k (gamma*lam)^k delta_{t+k}, cut at terminals."""
    T = len(rewards)
    v_next = np.append(values[1:], bootstrap)
    deltas = [
        rewards[t] + gamma * v_next[t] * (0.0 if terminated[t] else 1.0) - values[t]
        for t in range(T)
    ]
    out = np.zeros(T)
    for t in range(T):
        acc, weight = 0.0, 1.0
        for k in range(t, T):
            acc += weight * deltas[k]
            if terminated[k]:
                break
            weight *= gamma * lam
        out[t] = acc
    return out


class TestComputeGae:
    def test_lambda_zero_is_td_residual(self):
        adv, _ = compute_gae(
            np.array([1.0, 1.0, 1.0]),
            np.array([0.5, 0.5, 0.5]),
            np.array([False, False, False]),
            0.0,
            gamma=0.99,
            lam=0.0,
        )
        assert adv == pytest.approx([0.995, 0.995, 0.5], abs=1e-12)

    def test_all_zero(self):
        adv, ret = compute_gae(np.zeros(4), np.zeros(4), np.zeros(4, bool), 0.0, 0.99, 0.95)
        assert np.array_equal(adv, np.zeros(4))
        assert np.array_equal(ret, np.zeros(4))

    def test_oracle_derived_example(self):
        # frozen from the double-sum oracle:
        # A0 = 0.995 + 0.9405*0.995 + 0.9405^2*0.5 = 2.373067625
        adv, ret = compute_gae(
            np.array([1.0, 1.0, 1.0]),
            np.array([0.5, 0.5, 0.5]),
            np.array([False, False, False]),
            0.0,
            gamma=0.99,
            lam=0.95,
        )
        assert adv == pytest.approx([2.373067625, 1.46525, 0.5], abs=1e-12)
        assert ret == pytest.approx([2.873067625, 1.96525, 1.0], abs=1e-12)

    def test_matches_brute_force_on_random_segments(self):
        rng = Rng(1001)
        for _ in range(100):
            T = 1 + rng.randint_below(64)
            rewards = np.array([rng.normal() for _ in range(T)])
            values = np.array([rng.normal() for _ in range(T)])
            terminated = np.array([rng.uniform() < 0.12 for _ in range(T)])
            bootstrap = rng.normal()
            adv, _ = compute_gae(rewards, values, terminated, bootstrap, 0.99, 0.95)
            oracle = gae_brute_force(rewards, values, terminated, bootstrap, 0.99, 0.95)
            assert np.max(np.abs(adv - oracle)) < 1e-10

    def test_lambda_one_identity(self):
        # adv + values == discounted reward-to-go with discounted bootstrap tail
        rng = Rng(55)
        T = 40
        rewards = np.array([rng.normal() for _ in range(T)])
        values = np.array([rng.normal() for _ in range(T)])
        bootstrap = 1.7
        adv, _ = compute_gae(rewards, values, np.zeros(T, bool), bootstrap, 0.99, 1.0)
        tail = bootstrap
        rtg = np.zeros(T)
        for t in range(T - 1, -1, -1):
            tail = rewards[t] + 0.99 * tail
            rtg[t] = tail
        assert np.max(np.abs((adv + values) - rtg)) < 1e-10

    def test_terminal_kills_bootstrap(self):
        adv, _ = compute_gae(
            np.array([2.0]), np.array([0.5]), np.array([True]), 99.0, 0.99, 0.95
        )
        assert adv[0] == pytest.approx(1.5)

    def test_length_mismatch(self):
        with pytest.raises(ConfigurationError):
            compute_gae(np.zeros(3), np.zeros(2), np.zeros(3, bool), 0.0, 0.99, 0.95)


class TestNormalizeAdvantages:
    def test_two_point(self):
        out = normalize_advantages(np.array([1.0, -1.0]))
        assert out == pytest.approx([1.0, -1.0], rel=1e-7)

    def test_constant_vector(self):
        out = normalize_advantages(np.full(5, 3.3))
        assert np.max(np.abs(out)) < 1e-6

    def test_hand_computed_population_std(self):
        x = np.array([1.0, 2.0, 3.0, 4.0])
        std = math.sqrt(5.0 / 4.0)  # population std of [1,2,3,4]
        expected = (x - 2.5) / (std + 1e-8)
        assert normalize_advantages(x) == pytest.approx(expected, abs=1e-12)

    def test_single_element(self):
        assert np.array_equal(normalize_advantages(np.array([9.0])), np.zeros(1))


def _bias_only_discrete_snapshot(logit0, logit1):
    """Zero-weight cartpole policy whose logits are exactly the output biases."""
    snap = init_policy(cartpole_spec(), (4,), seed=0)
    policy = np.zeros_like(snap.policy_params)
    policy[-2] = logit0
    policy[-1] = logit1
    return replace(snap, policy_params=policy, value_params=np.zeros_like(snap.value_params))


class TestPpoLossAndGrad:
    def test_single_transition_direct_formula(self):
        # lp_new = ln .7 (exact from normalized logits), lp_old = ln .5, A = 2:
        # rho = 1.4, policy term = -min(2.8, 2.4) = -2.4
        snap = _bias_only_discrete_snapshot(math.log(0.7), math.log(0.3))
        mb = Minibatch(
            obs=np.zeros((1, 4)),
            actions=np.array([0], dtype=np.int64),
            logprob_old=np.array([math.log(0.5)]),
            advantages=np.array([2.0]),
            returns=np.array([0.0]),
        )
        hyper = PpoHyper(clip_eps=0.2, vf_coef=0.0, ent_coef=0.0)
        loss, _, stats = ppo_loss_and_grad(snap, mb, hyper)
        assert loss == pytest.approx(-2.4, abs=1e-12)
        assert stats.surrogate_loss == pytest.approx(-2.4, abs=1e-12)
        assert stats.clip_frac == 1.0  # |1.4 - 1| > 0.2

    def test_zero_advantages_zero_policy_grad(self):
        snap = init_policy(cartpole_spec(), (4,), seed=8)
        rng = Rng(3)
        n = 5
        mb = Minibatch(
            obs=np.array([[rng.normal() for _ in range(4)] for _ in range(n)]),
            actions=np.array([rng.randint_below(2) for _ in range(n)], dtype=np.int64),
            logprob_old=np.full(n, math.log(0.5)),
            advantages=np.zeros(n),
            returns=np.zeros(n),
        )
        hyper = PpoHyper(vf_coef=0.0, ent_coef=0.0)
        loss, grad, _ = ppo_loss_and_grad(snap, mb, hyper)
        assert loss == 0.0
        assert np.array_equal(grad, np.zeros_like(grad))

    def test_ratio_one_at_sampling_snapshot(self):
        # batch collected under snap, evaluated under snap: clip never active
        snap = init_policy(cartpole_spec(), (8,), seed=4)
        env = make_env(cartpole_spec())
        chunk = collect_chunk(env, snap, derive_worker_rng(4, 0), 96)
        batch = batch_from_chunks([chunk])
        hyper = PpoHyper()
        adv, ret = _segment_advantages(snap, batch, hyper)
        adv = normalize_advantages(adv)
        mb = Minibatch(
            obs=batch.obs,
            actions=batch.actions,
            logprob_old=batch.logprob_old,
            advantages=adv,
            returns=ret,
        )
        _, _, stats = ppo_loss_and_grad(snap, mb, hyper)
        assert stats.clip_frac == 0.0
        assert abs(stats.approx_kl) < 1e-12
        assert abs(stats.surrogate_loss) < 1e-12  # -mean(A_norm) with mean 0

    @pytest.mark.parametrize("spec_fn,ent_coef", [(cartpole_spec, 0.02), (pendulum_spec, 0.01)])
    def test_gradient_matches_finite_differences(self, spec_fn, ent_coef):
        # 10 random small nets per head type (20 total), <= 200 params
        rng = Rng(20_000 + int(ent_coef * 1000))
        spec = spec_fn()
        for trial in range(10):
            snap = init_policy(spec, (1 + rng.randint_below(5),), seed=trial)
            n = 3 if trial == 0 else 4 + rng.randint_below(5)
            obs = np.array([[rng.normal() for _ in range(spec.obs_dim)] for _ in range(n)])
            if snap.is_discrete:
                actions = np.array([rng.randint_below(2) for _ in range(n)], dtype=np.int64)
            else:
                actions = np.array([[rng.normal()] for _ in range(n)])
            mb = Minibatch(
                obs=obs,
                actions=actions,
                logprob_old=np.array([-1.0 + 0.2 * rng.normal() for _ in range(n)]),
                advantages=np.array([rng.normal() for _ in range(n)]),
                returns=np.array([rng.normal() for _ in range(n)]),
            )
            hyper = PpoHyper(ent_coef=ent_coef)
            _, grad, _ = ppo_loss_and_grad(snap, mb, hyper)
            assert len(_pack_theta(snap)) <= 200

            def loss_of(theta):
                return ppo_loss_and_grad(_unpack_theta(snap, theta), mb, hyper)[0]

            oracle = finite_diff_grad(loss_of, _pack_theta(snap), 1e-6)
            err = np.abs(grad - oracle) / (np.maximum(np.abs(grad), np.abs(oracle)) + 1e-7)
            assert err.max() < 1e-4

    def test_nonfinite_loss_raises(self):
        snap = init_policy(cartpole_spec(), (4,), seed=1)
        mb = Minibatch(
            obs=np.zeros((2, 4)),
            actions=np.array([0, 1], dtype=np.int64),
            logprob_old=np.array([math.log(0.5)] * 2),
            advantages=np.array([np.inf, 0.0]),
            returns=np.zeros(2),
        )
        with pytest.raises(NonFiniteUpdateError):
            ppo_loss_and_grad(snap, mb, PpoHyper())


def _small_batch(seed=7, n=64):
    snap = init_policy(cartpole_spec(), (8,), seed=seed)
    env = make_env(cartpole_spec())
    chunk = collect_chunk(env, snap, derive_worker_rng(seed, 0), n)
    return snap, batch_from_chunks([chunk])


class TestPpoUpdate:
    def test_zero_epochs_bumps_version_only(self):
        snap, batch = _small_batch()
        hyper = PpoHyper(epochs=0, minibatch_size=16)
        new, adam, stats = ppo_update(snap, batch, hyper, init_adam(len(_pack_theta(snap))), Rng(1))
        assert new.version == snap.version + 1
        assert np.array_equal(new.policy_params, snap.policy_params)
        assert np.array_equal(new.value_params, snap.value_params)
        assert adam.t == 0
        assert not stats.skipped

    def test_deterministic_across_runs(self):
        # fixed 64-transition batch, seed 7: two independent runs, bit-identical
        snap, batch = _small_batch(seed=7, n=64)
        hyper = PpoHyper(minibatch_size=16, epochs=4)
        adam = init_adam(len(_pack_theta(snap)))
        s1, a1, st1 = ppo_update(snap, batch, hyper, adam, Rng(7))
        s2, a2, st2 = ppo_update(snap, batch, hyper, adam, Rng(7))
        assert np.array_equal(s1.policy_params, s2.policy_params)
        assert np.array_equal(s1.value_params, s2.value_params)
        assert np.array_equal(a1.m, a2.m)
        assert st1.total_loss == st2.total_loss
        assert s1.version == snap.version + 1

    def test_version_mismatch_rejected(self):
        snap, batch = _small_batch()
        with pytest.raises(ProtocolError):
            ppo_update(snap.advance(), batch, PpoHyper(minibatch_size=16),
                       init_adam(len(_pack_theta(snap))), Rng(1))

    def test_nonfinite_batch_skips_update_but_bumps_version(self):
        snap, batch = _small_batch()
        batch.rewards[3] = np.inf  # poisons GAE -> advantages -> loss
        hyper = PpoHyper(minibatch_size=16)
        with np.errstate(invalid="ignore", over="ignore"):
            new, adam, stats = ppo_update(
                snap, batch, hyper, init_adam(len(_pack_theta(snap))), Rng(1)
            )
        assert stats.skipped
        assert new.version == snap.version + 1
        assert np.array_equal(new.policy_params, snap.policy_params)
        assert adam.t == 0

    def test_minibatch_larger_than_batch_rejected(self):
        snap, batch = _small_batch(n=32)
        with pytest.raises(ConfigurationError):
            ppo_update(snap, batch, PpoHyper(minibatch_size=1000),
                       init_adam(len(_pack_theta(snap))), Rng(1))

    def test_rho_one_on_first_minibatch(self):
        # single full-batch minibatch, one epoch: stats reflect the on-policy start
        snap, batch = _small_batch(n=48)
        hyper = PpoHyper(minibatch_size=48, epochs=1)
        _, _, stats = ppo_update(snap, batch, hyper, init_adam(len(_pack_theta(snap))), Rng(2))
        assert stats.clip_frac == 0.0
        assert abs(stats.approx_kl) < 1e-12


class TestExperienceBatch:
    def test_from_transitions_shapes(self):
        transitions = [
            Transition(np.array([0.1, 0.2]), 1, 1.0, False, False, -0.7),
            Transition(np.array([0.3, 0.4]), 0, 0.5, True, False, -0.6),
        ]
        segments = [Segment(0, 2, None)]
        batch = ExperienceBatch.from_transitions(transitions, segments, version=3)
        assert batch.version == 3
        assert batch.obs.shape == (2, 2)
        assert batch.actions.dtype == np.int64
        assert np.array_equal(batch.terminated, [False, True])
        assert len(batch) == 2

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            ExperienceBatch.from_transitions([], [], version=0)

    def test_missing_final_obs_rejected(self):
        snap = init_policy(cartpole_spec(), (4,), seed=0)
        transitions = [Transition(np.zeros(4), 0, 1.0, False, False, math.log(0.5))]
        batch = ExperienceBatch.from_transitions(transitions, [Segment(0, 1, None)], version=0)
        with pytest.raises(ConfigurationError):
            _segment_advantages(snap, batch, PpoHyper())
