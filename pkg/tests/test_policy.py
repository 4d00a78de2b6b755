import numpy as np
import pytest
from scipy.stats import binomtest

from metarlbo.policy import (GenEnv, PolicyParams, PolicySpec, RLConfig, Trajectory,
                             action_distribution, adapt, discounted_returns, init_policy,
                             inner_update, positional_encode, positional_table,
                             reinforce_loss, sample_sequences, sample_trajectories)
from metarlbo.seqcore import Alphabet

from gradcheck import check_gradient

AB = Alphabet.from_string("AB")


def zero_policy(env, hidden=(8,)):
    spec = env.policy_spec(hidden)
    return PolicyParams(spec, np.zeros(spec.layout.size))


def with_output_bias(params, bias):
    t = {k: v.copy() for k, v in params.tensors().items()}
    t[f"b{params.spec.n_layers - 1}"] = np.asarray(bias, dtype=float)
    return params.replace(params.spec.layout.pack(t))


def bandit_env(rewards=(1.0, 0.0)):
    r = np.asarray(rewards)
    return GenEnv(AB, 1, lambda seqs: r[[s[0] for s in seqs]])


def p_good(params, env):
    return action_distribution(params, [()])[0, 0]


class TestEncoding:
    def test_empty_prefix_is_pure_positional_grid(self):
        enc = positional_encode((), 6, 5).reshape(6, 5)
        np.testing.assert_array_equal(enc, positional_table(6, 5))

    def test_position_zero_closed_form(self):
        row = positional_table(4, 6)[0]
        assert row[0::2].tolist() == [0.0] * 3 and row[1::2].tolist() == [1.0] * 3

    def test_sinusoid_formula(self):
        d, table = 6, positional_table(10, 6)
        for pos in range(10):
            for i in range(d // 2):
                assert table[pos, 2 * i] == pytest.approx(np.sin(pos / 10000 ** (2 * i / d)), abs=1e-15)
                assert table[pos, 2 * i + 1] == pytest.approx(np.cos(pos / 10000 ** (2 * i / d)), abs=1e-15)

    def test_prefixes_differ_only_in_filled_rows(self):
        a = positional_encode((0, 1, 2), 6, 4).reshape(6, 4)
        b = positional_encode((0, 3, 2), 6, 4).reshape(6, 4)
        diff = np.nonzero(np.any(a != b, axis=1))[0]
        assert diff.tolist() == [1]
        np.testing.assert_array_equal(a[3:], positional_table(6, 4)[3:])

    def test_prefix_longer_than_horizon(self):
        with pytest.raises(ValueError):
            positional_encode((0, 1, 2), 2, 3)


class TestSampling:
    def test_uniform_policy_is_uniform(self):
        env = GenEnv(AB, 2, lambda s: np.zeros(len(s)))
        seqs = sample_sequences(zero_policy(env), env, 10_000, np.random.default_rng(0))
        n, p = 10_000, 0.25
        bound = 3 * np.sqrt(n * p * (1 - p))
        for s in [(0, 0), (0, 1), (1, 0), (1, 1)]:
            assert abs(seqs.count(s) - n * p) <= bound

    def test_forced_eos_gives_length_one(self):
        alpha = Alphabet.from_string("ABC", has_eos=True)
        env = GenEnv(alpha, 5, lambda s: np.zeros(len(s)), variable_length=True)
        params = with_output_bias(zero_policy(env), [0, 0, 0, 50.0])
        trajs = sample_trajectories(params, env, 200, np.random.default_rng(1))
        assert all(len(t.sequence) == 1 for t in trajs)
        assert all(t.actions[-1] == env.eos and t.length == 2 for t in trajs)

    def test_eos_never_first(self):
        alpha = Alphabet.from_string("AB", has_eos=True)
        env = GenEnv(alpha, 4, lambda s: np.zeros(len(s)), variable_length=True)
        params = with_output_bias(zero_policy(env), [0, 0, 3.0])
        seqs = sample_sequences(params, env, 500, np.random.default_rng(2))
        assert min(len(s) for s in seqs) >= 1
        assert action_distribution(params, [()], env.eos)[0, env.eos] == 0.0

    def test_fixed_seed_reproducible(self):
        env = GenEnv(Alphabet.from_string("ABCD"), 6, lambda s: np.ones(len(s)))
        params = init_policy(env.policy_spec((16,)), np.random.default_rng(0))
        a = sample_trajectories(params, env, 50, np.random.default_rng(9))
        b = sample_trajectories(params, env, 50, np.random.default_rng(9))
        assert [t.actions for t in a] == [t.actions for t in b]

    def test_reward_failure_has_context(self):
        def broken(seqs):
            raise KeyError("boom")
        env = GenEnv(AB, 3, broken)
        with pytest.raises(RuntimeError, match="reward function failed"):
            sample_trajectories(zero_policy(env), env, 4, np.random.default_rng(0))

    def test_returns_are_discounted_terminal_reward(self):
        env = GenEnv(Alphabet.from_string("ABC"), 5, lambda s: np.full(len(s), 2.0), gamma=0.9)
        for t in sample_trajectories(zero_policy(env), env, 5, np.random.default_rng(0)):
            T = t.length
            assert t.returns.tolist() == pytest.approx([0.9 ** (T - 1 - k) * 2.0 for k in range(T)])
        assert discounted_returns(3.0, 3, 1.0).tolist() == [3.0, 3.0, 3.0]

    def test_states_are_prefixes(self):
        t = Trajectory((2, 0, 1), 1.0, np.ones(3))
        assert t.states == [(), (2,), (2, 0)]


class TestLoss:
    @pytest.mark.parametrize("variable,gamma,coef,baseline", [
        (False, 1.0, 0.0, "none"), (False, 0.8, 0.05, "none"),
        (True, 0.9, 0.1, "none"), (True, 1.0, 0.02, "mean")])
    def test_gradient_matches_finite_differences(self, variable, gamma, coef, baseline, rng):
        alpha = Alphabet.from_string("ABC", has_eos=variable)
        env = GenEnv(alpha, 5, lambda s: np.array([np.sum(x) + 0.5 for x in s], float),
                     variable_length=variable, gamma=gamma)
        params = init_policy(env.policy_spec((12, 10)), rng, output_gain=1.0)
        trajs = sample_trajectories(params, env, 6, rng)
        _, grad = reinforce_loss(params, trajs, coef, env.eos, baseline)
        f = lambda th: reinforce_loss(params.replace(th), trajs, coef, env.eos, baseline)[0]
        worst, n = check_gradient(f, params.theta.copy(), grad, rng, n_coords=150)
        assert n >= 100 and worst <= 1e-4

    def test_single_trajectory_closed_form(self, rng):
        env = GenEnv(Alphabet.from_string("ABC"), 4, lambda s: np.full(len(s), 1.7))
        params = init_policy(env.policy_spec((8,)), rng, output_gain=1.0)
        (tr,) = sample_trajectories(params, env, 1, rng)
        _, grad = reinforce_loss(params, [tr])
        # -(f/T) * sum_t grad log pi(a_t|s_t), via finite differences of log-likelihood
        def loglik(th):
            p = params.replace(th)
            probs = action_distribution(p, tr.states)
            return float(np.sum(np.log(probs[np.arange(tr.length), list(tr.actions)])))
        worst, _ = check_gradient(lambda th: -(1.7 / tr.length) * loglik(th),
                                  params.theta.copy(), grad, rng, n_coords=120)
        assert worst <= 1e-4

    def test_zero_rewards_zero_gradient(self):
        env = GenEnv(AB, 3, lambda s: np.zeros(len(s)))
        params = init_policy(env.policy_spec((8,)), np.random.default_rng(0))
        trajs = sample_trajectories(params, env, 5, np.random.default_rng(1))
        loss, grad = reinforce_loss(params, trajs, entropy_coeff=0.0)
        assert loss == 0.0 and not grad.any()

    def test_softmax_shift_invariance(self, rng):
        env = GenEnv(Alphabet.from_string("ABCD"), 3, lambda s: np.zeros(len(s)))
        params = init_policy(env.policy_spec((8,)), rng, output_gain=1.0)
        shifted = with_output_bias(params, params.tensors()["b1"] + 7.25)
        prefixes = [(), (1,), (3, 2)]
        np.testing.assert_allclose(action_distribution(params, prefixes),
                                   action_distribution(shifted, prefixes), rtol=0, atol=1e-12)

    def test_empty(self):
        env = GenEnv(AB, 1, lambda s: np.zeros(len(s)))
        with pytest.raises(ValueError):
            reinforce_loss(zero_policy(env), [])


class TestUpdates:
    def test_bandit_converges(self):
        env = bandit_env()
        cfg = RLConfig(alpha=0.1, entropy_coeff=0.01)
        params = init_policy(env.policy_spec(), np.random.default_rng(0))
        rng = np.random.default_rng(1)
        for step in range(500):
            params = inner_update(params, env, cfg, rng)
            if p_good(params, env) > 0.95:
                break
        assert p_good(params, env) > 0.95

    def test_zero_step_size_is_identity(self):
        env = bandit_env()
        params = init_policy(env.policy_spec((8,)), np.random.default_rng(0))
        after = inner_update(params, env, RLConfig(alpha=0.0), np.random.default_rng(0))
        assert np.array_equal(after.theta, params.theta)

    def test_update_improves_expected_return(self):
        env = bandit_env()
        cfg = RLConfig(alpha=0.1, entropy_coeff=0.01)
        deltas = []
        for seed in range(100):
            params = init_policy(env.policy_spec((16,)), np.random.default_rng(seed))
            after = inner_update(params, env, cfg, np.random.default_rng(1000 + seed))
            deltas.append(p_good(after, env) - p_good(params, env))
        deltas = np.array(deltas)
        wins, n = int((deltas > 0).sum()), int((deltas != 0).sum())
        assert binomtest(wins, n, 0.5, alternative="greater").pvalue < 0.01

    def test_input_params_unmodified(self):
        env = bandit_env()
        params = init_policy(env.policy_spec((8,)), np.random.default_rng(0))
        before = params.theta.copy()
        inner_update(params, env, RLConfig(), np.random.default_rng(0))
        assert np.array_equal(params.theta, before)
        with pytest.raises(ValueError):
            params.theta[0] = 1.0

    def test_adapt_is_repeated_inner_update(self):
        env = bandit_env()
        cfg = RLConfig(alpha=0.3)
        params = init_policy(env.policy_spec((8,)), np.random.default_rng(0))
        rng = np.random.default_rng(5)
        manual = params
        for _ in range(3):
            manual = inner_update(manual, env, cfg, rng)
        assert np.array_equal(adapt(params, env, cfg, 3, np.random.default_rng(5)).theta, manual.theta)

    def test_entropy_bonus_drives_toward_uniform(self):
        env = GenEnv(Alphabet.from_string("ABCD"), 1, lambda s: np.zeros(len(s)))
        params = init_policy(env.policy_spec((16,)), np.random.default_rng(3), output_gain=3.0)
        cfg = RLConfig(alpha=0.5, entropy_coeff=0.1)
        rng = np.random.default_rng(0)

        def kl(p):
            pi = action_distribution(p, [()])[0]
            return float(np.sum(pi * np.log(pi * 4)))

        values = [kl(params)]
        for _ in range(100):
            params = inner_update(params, env, cfg, rng)
            values.append(kl(params))
        assert values[0] > 0.1 and values[-1] < 1e-3 * values[0]
        # nonincreasing up to round-off once KL reaches machine precision
        assert all(b <= a + 1e-12 for a, b in zip(values, values[1:]))


def test_policy_checkpoint_round_trip(tmp_path, rng):
    params = init_policy(PolicySpec(5, 3, (7, 6)), rng)
    params.save(tmp_path / "p.params", {"round": 2})
    back = PolicyParams.load(tmp_path / "p.params")
    assert back.spec == params.spec and back.theta.tobytes() == params.theta.tobytes()
