"""The recurrent genotype sampler and its policy-gradient update."""

import numpy as np
import pytest

from nasopt import controller as ctl
from nasopt import genotype as gt


def toy_controller(seed=0):
    """One binary token: a two-armed bandit."""
    return ctl.RnnController([(1, 2)], seed=seed)


class TestSampling:
    def test_uniform_at_init(self):
        # zero-initialized heads make every position exactly uniform
        c = ctl.RnnController(ctl.genotype_segments(), seed=1)
        rng = np.random.default_rng(2)
        counts = np.zeros((27, 3))
        n = 10_000
        for _ in range(n):
            tokens, _ = c.sample(rng)
            for pos, a in enumerate(tokens):
                counts[pos, a] += 1
        for pos in range(21):
            assert abs(counts[pos, 0] / n - 0.5) < 0.02
        for pos in range(21, 26):
            for a in range(3):
                assert abs(counts[pos, a] / n - 1 / 3) < 0.02
        assert abs(counts[26, 0] / n - 0.5) < 0.02

    def test_greedy_deterministic(self):
        c = ctl.RnnController(ctl.genotype_segments(), seed=3)
        rng = np.random.default_rng(0)
        c.update([(c.sample(rng)[0], 5.0), (c.sample(rng)[0], -1.0)])
        a, _ = c.sample(None, greedy=True)
        b, _ = c.sample(None, greedy=True)
        assert a == b

    def test_logp_trace_sums_to_sequence_logprob(self):
        c = ctl.RnnController(ctl.genotype_segments(), seed=4)
        rng = np.random.default_rng(5)
        tokens, logps = c.sample(rng)
        assert len(logps) == 27
        assert sum(logps) == pytest.approx(c.sequence_logprob(tokens),
                                           abs=1e-12)

    def test_tokens_assemble_to_genotype(self):
        c = ctl.RnnController(ctl.genotype_segments(), seed=6)
        rng = np.random.default_rng(7)
        g, logps = c.sample_genotype(rng)
        assert isinstance(g, gt.Genotype)
        assert len(logps) == 27

    def test_reward_mapping(self):
        assert ctl.reward_from_cost(1.0) == 0.0
        assert ctl.reward_from_cost(100.0) == -2.0
        assert ctl.reward_from_cost(1e-3) == 3.0
        assert ctl.reward_from_cost(1e30) == -ctl.REWARD_CLIP
        assert ctl.reward_from_cost(0.0) == ctl.REWARD_CLIP


class TestUpdate:
    def test_rewards_at_baseline_leave_params_unchanged(self):
        c = toy_controller(seed=8)
        rng = np.random.default_rng(9)
        before = {n: p.copy() for n, p in c.store.params.items()}
        c.baseline = 2.0
        episodes = [(c.sample(rng)[0], 2.0) for _ in range(6)]
        c.update(episodes)
        # zero advantage means only weight decay acts; disable it for the test
        c2 = toy_controller(seed=8)
        c2.weight_decay = 0.0
        c2.baseline = 2.0
        episodes2 = [(c2.sample(np.random.default_rng(9))[0], 2.0)
                     for _ in range(6)]
        c2.update(episodes2)
        for name, arr in c2.store.params.items():
            np.testing.assert_array_equal(arr, before[name])

    def test_two_armed_bandit_learns_better_arm(self):
        improved = 0
        for seed in range(5):
            c = toy_controller(seed=seed)
            c.weight_decay = 0.0
            rng = np.random.default_rng(seed + 100)

            def p_arm1():
                h1 = np.zeros(c.hidden)
                h2 = np.zeros(c.hidden)
                _, h1, h2 = c._step(-1, h1, h2)
                return c._probs(0, h2)[1]

            p0 = p_arm1()
            for _ in range(100):
                episodes = []
                for _ in range(8):
                    tokens, _ = c.sample(rng)
                    reward = 1.0 if tokens[0] == 1 else 0.0
                    episodes.append((tokens, reward))
                c.update(episodes)
            improved += p_arm1() > max(p0, 0.9)
        assert improved >= 4

    def test_gradient_sign_agreement_with_fd(self):
        """Score-function estimate vs finite differences of expected reward."""
        c = toy_controller(seed=11)
        c.weight_decay = 0.0
        rewards = {0: 0.3, 1: 1.1}

        def expected_reward():
            h1 = np.zeros(c.hidden)
            h2 = np.zeros(c.hidden)
            _, h1, h2 = c._step(-1, h1, h2)
            probs = c._probs(0, h2)
            return probs[0] * rewards[0] + probs[1] * rewards[1]

        # exact policy gradient by enumerating both episodes
        grads = {n: np.zeros_like(p) for n, p in c.store.params.items()}
        for arm in (0, 1):
            h1 = np.zeros(c.hidden)
            h2 = np.zeros(c.hidden)
            _, h1, h2 = c._step(-1, h1, h2)
            prob = c._probs(0, h2)[arm]
            # accumulate -(R * p) * grad logP so the sum is -grad E[R]
            c._accumulate_episode([arm], rewards[arm] * prob, grads)

        h = 1e-6
        agree = total = 0
        for name in ("head0_w", "head0_b", "w12", "b2"):
            p = c.store.params[name]
            it = np.nditer(p, flags=["multi_index"])
            for _ in it:
                idx = it.multi_index
                old = p[idx]
                p[idx] = old + h
                fp = expected_reward()
                p[idx] = old - h
                fm = expected_reward()
                p[idx] = old
                fd = (fp - fm) / (2 * h)
                analytic = -grads[name][idx]
                if abs(fd) < 1e-12 and abs(analytic) < 1e-12:
                    agree += 1
                elif np.sign(fd) == np.sign(analytic):
                    agree += 1
                total += 1
        assert agree / total >= 0.95

    def test_nan_rewards_skipped(self):
        c = toy_controller(seed=12)
        rng = np.random.default_rng(13)
        episodes = [(c.sample(rng)[0], np.nan), (c.sample(rng)[0], 1.0)]
        skipped = c.update(episodes)
        assert skipped == 1

    def test_baseline_ema(self):
        c = toy_controller(seed=14)
        rng = np.random.default_rng(15)
        c.update([(c.sample(rng)[0], 4.0)])
        assert c.baseline == pytest.approx(4.0)
        c.update([(c.sample(rng)[0], 0.0)])
        assert c.baseline == pytest.approx(0.95 * 4.0)
