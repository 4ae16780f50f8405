import numpy as np
import pytest

from ovenlab import net, train
from ovenlab.checkpoint import CheckpointError
from ovenlab.net import Arch
from ovenlab.train import TrainConfig

SMALL = Arch(conv_channels=4, hidden=8, mlp=8)


def gae_recursive_oracle(rewards, values, dones, boot, gamma, lam):
    """A_t written as an explicit weighted sum of TD errors up to the next done."""
    n = len(rewards)
    nxt = list(values[1:]) + [boot]
    deltas = [rewards[t] + gamma * nxt[t] * (1 - dones[t]) - values[t] for t in range(n)]
    adv = []
    for t in range(n):
        total, weight = 0.0, 1.0
        for k in range(t, n):
            total += weight * deltas[k]
            if dones[k]:
                break
            weight *= gamma * lam
        adv.append(total)
    return np.array(adv)


def discounted_sum_oracle(rewards, values, boot, gamma):
    n = len(rewards)
    return np.array([
        sum(gamma ** (k - t) * rewards[k] for k in range(t, n)) + gamma ** (n - t) * boot - values[t]
        for t in range(n)
    ])


class TestGae:
    def test_lambda_one_is_discounted_sum(self):
        rng = np.random.default_rng(0)
        r, v, boot = rng.normal(size=12), rng.normal(size=12), 0.7
        adv, ret = train.compute_gae(r, v, np.zeros(12, bool), boot, 0.9, 1.0)
        np.testing.assert_allclose(adv, discounted_sum_oracle(r, v, boot, 0.9), atol=1e-12)
        np.testing.assert_allclose(ret, adv + v)

    def test_all_zero(self):
        adv, _ = train.compute_gae(np.zeros(5), np.zeros(5), np.zeros(5, bool), 0.0, 0.99, 0.95)
        assert not adv.any()

    def test_random_buffer_matches_recursion(self):
        rng = np.random.default_rng(1)
        r, v = rng.normal(size=6), rng.normal(size=6)
        d = np.array([0, 0, 1, 0, 0, 0], bool)
        adv, _ = train.compute_gae(r, v, d, 0.3, 0.99, 0.95)
        np.testing.assert_allclose(adv, gae_recursive_oracle(r, v, d, 0.3, 0.99, 0.95), atol=1e-6)


def make_buffer(params, n=8, seed=0, arch=SMALL):
    runner = train.EnvRunner("single", 7, np.random.SeedSequence(seed), arch)
    return runner, train.collect_rollout(runner, params, n, np.random.default_rng(seed))


class TestRollout:
    def test_one_done_in_first_buffer(self):
        params = net.init_params(0, SMALL)
        _, buf = make_buffer(params, 128)
        assert buf.dones.sum() == 1 and buf.dones[99]
        assert buf.episode_starts[0] and buf.episode_starts[100]
        assert not buf.h0[100].any() and not buf.c0[100].any()

    def test_first_snapshot_is_carry(self):
        params = net.init_params(0, SMALL)
        runner, _ = make_buffer(params, 10)
        h, c = runner.h.copy(), runner.c.copy()
        buf = train.collect_rollout(runner, params, 5, np.random.default_rng(1))
        assert np.array_equal(buf.h0[0], h) and np.array_equal(buf.c0[0], c)
        assert not buf.episode_starts[0]

    def test_reforward_reproduces_log_probs(self):
        params = net.init_params(0)
        runner = train.EnvRunner("dual", 8, np.random.SeedSequence(0))
        buf = train.collect_rollout(runner, params, 128, np.random.default_rng(0))
        out = net.forward_sequence(params, buf.obs, buf.h0[0], buf.c0[0], buf.episode_starts)
        logp, _ = net.evaluate_actions(out.logits, buf.actions)
        np.testing.assert_allclose(logp, buf.log_probs, rtol=0, atol=1e-6)
        np.testing.assert_allclose(out.value, buf.values, rtol=0, atol=1e-6)

    def test_bootstrap_value(self):
        params = net.init_params(0, SMALL)
        runner, buf = make_buffer(params, 10)
        expect = net.forward(params, runner.obs, runner.h, runner.c).value
        assert buf.bootstrap_value == pytest.approx(float(expect))


def loss_inputs(B=4, seed=0):
    rng = np.random.default_rng(seed)
    logits = rng.normal(size=(B, 6))
    actions = rng.integers(0, 6, B)
    return logits, rng.normal(size=B), actions, rng.normal(size=B), rng.normal(size=B)


class TestPpoLoss:
    def test_ratio_one_surrogates_equal(self):
        logits, values, actions, adv, ret = loss_inputs()
        old = net.evaluate_actions(logits, actions)[0]
        stats, _, _ = train.ppo_loss_grads(logits, values, actions, old, adv, ret, TrainConfig())
        np.testing.assert_allclose(stats["ratio"], 1.0)
        assert stats["policy_loss"] == pytest.approx(-np.mean(adv))
        assert stats["clip_frac"] == 0.0

    def test_clip_kills_policy_gradient(self):
        cfg = TrainConfig(ent_coef=0.0, vf_coef=0.0)
        logits = np.array([[0.1, 0.2, -0.3, 0.0, 0.5, 0.1]])
        lp = net.evaluate_actions(logits, [2])[0]
        old = lp - np.log(1 + 2 * cfg.clip)  # ratio = 1 + 2 eps
        stats, dlogits, _ = train.ppo_loss_grads(logits, [0.0], np.array([2]), old, np.array([1.0]), np.array([0.0]), cfg)
        assert stats["ratio"][0] == pytest.approx(1.4)
        assert not dlogits.any()

    def test_gradients_match_finite_differences(self):
        cfg = TrainConfig()
        logits, values, actions, adv, ret = loss_inputs(6, seed=3)
        old = net.evaluate_actions(logits, actions)[0] + np.random.default_rng(4).normal(0, 0.3, 6)
        _, dlogits, dvalues = train.ppo_loss_grads(logits, values, actions, old, adv, ret, cfg)
        eps = 1e-6
        f = lambda lg, v: train.ppo_loss_grads(lg, v, actions, old, adv, ret, cfg)[0]["loss"]
        num = np.zeros_like(logits)
        for idx in np.ndindex(logits.shape):
            up, down = logits.copy(), logits.copy()
            up[idx] += eps
            down[idx] -= eps
            num[idx] = (f(up, values) - f(down, values)) / (2 * eps)
        np.testing.assert_allclose(dlogits, num, atol=1e-7)
        numv = [(f(logits, values + eps * e) - f(logits, values - eps * e)) / (2 * eps) for e in np.eye(6)]
        np.testing.assert_allclose(dvalues, numv, atol=1e-7)


class TestUpdate:
    def setup_update(self, config, arch=SMALL):
        flat, params = net.flatten_params(net.init_params(0, arch))
        _, buf = make_buffer(params, config.rollout_len, arch=arch)
        adv, ret = train.compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_value, 0.99, 0.95)
        opt = train.Adam(flat.size, config.lr)
        return flat, params, buf, adv, ret, opt

    def test_zero_lr_leaves_params_unchanged(self):
        cfg = TrainConfig(lr=0.0, rollout_len=16, epochs=2)
        flat, params, buf, adv, ret, opt = self.setup_update(cfg)
        before = flat.copy()
        train.ppo_update(params, flat, opt, buf, adv, ret, cfg, np.random.default_rng(0))
        assert flat.tobytes() == before.tobytes()

    def test_clipped_grad_norm_bound(self):
        g = np.random.default_rng(0).normal(0, 10, 1000).astype(np.float32)
        pre = train.clip_grad_norm(g, 0.5)
        assert pre > 0.5
        assert np.linalg.norm(g.astype(np.float64)) <= 0.5 + 1e-6

    def test_small_grad_untouched(self):
        g = np.full(4, 0.1, dtype=np.float32)
        train.clip_grad_norm(g, 0.5)
        np.testing.assert_array_equal(g, np.full(4, 0.1, dtype=np.float32))

    def test_first_minibatch_ratio_is_one(self):
        cfg = TrainConfig(rollout_len=32, minibatches=1, epochs=1)
        flat, params, buf, adv, ret, opt = self.setup_update(cfg, arch=net.DEFAULT_ARCH)
        out = net.forward_sequence(params, buf.obs, buf.h0[0], buf.c0[0], buf.episode_starts)
        stats, _, _ = train.ppo_loss_grads(out.logits, out.value, buf.actions, buf.log_probs, adv, ret, cfg)
        np.testing.assert_allclose(stats["ratio"], 1.0, atol=1e-6)

    def test_adam_matches_reference_formula(self):
        rng = np.random.default_rng(0)
        flat = rng.normal(size=10)
        ref = flat.copy()
        opt = train.Adam(10, 0.01, dtype=np.float64)
        m = v = np.zeros(10)
        for t in range(1, 4):
            g = rng.normal(size=10)
            opt.step(flat, g)
            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g * g
            ref -= 0.01 * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        np.testing.assert_allclose(flat, ref, rtol=1e-12)

    def test_non_finite_loss_aborts(self):
        cfg = TrainConfig(rollout_len=8, minibatches=1, epochs=1)
        flat, params, buf, adv, ret, opt = self.setup_update(cfg)
        ret[:] = np.nan
        with pytest.raises(train.NonFiniteLossError, match="value_loss"):
            train.ppo_update(params, flat, opt, buf, adv, ret, cfg, np.random.default_rng(0))


@pytest.fixture(scope="module")
def smoke(tmp_path_factory):
    out = tmp_path_factory.mktemp("smoke")
    result = train.train("single", 7, 1, TrainConfig(total_steps=2560), out_dir=out)
    return out, result


class TestTrainAndEvaluate:
    def test_smoke_curve(self, smoke):
        out, result = smoke
        lines = (out / "curve.csv").read_text().splitlines()
        assert lines[0] == ",".join(train.CURVE_COLUMNS)
        assert len(lines) == 21 and len(result.curve) == 20
        assert result.checkpoint.step == 2560

    def test_reproducible_checkpoint_bytes(self, smoke):
        out, _ = smoke
        again = train.train("single", 7, 1, TrainConfig(total_steps=2560))
        assert again.checkpoint.to_bytes() == (out / "checkpoint.bin").read_bytes()

    def test_manifest(self, smoke):
        import json

        meta = json.loads((smoke[0] / "run.json").read_text())
        assert meta["config"]["ent_coef"] == 0.05 and meta["config"]["total_steps"] == 2560
        assert meta["code_version"].startswith("0.1.0+")

    def test_evaluate_trace(self, smoke):
        out, _ = smoke
        trace = train.evaluate(out / "checkpoint.bin", n_episodes=25, eval_seed=3)
        assert len(trace) == 2500 and trace.hidden.shape == (25, 100, 256)
        assert trace.delivery.sum() == (trace.outcome == "deliver").sum()
        again = train.evaluate(out / "checkpoint.bin", n_episodes=25, eval_seed=3)
        assert np.array_equal(trace.action, again.action) and np.array_equal(trace.hidden, again.hidden)

    def test_evaluate_arch_mismatch(self, smoke):
        with pytest.raises(CheckpointError):
            train.evaluate(smoke[0] / "checkpoint.bin", n_episodes=1, expect_arch=SMALL)


def test_default_config_matches_protocol():
    cfg = TrainConfig()
    assert cfg.total_steps == 100_000 and cfg.ent_coef == 0.05
    assert (cfg.rollout_len, cfg.epochs, cfg.minibatches) == (128, 10, 4)
    assert (cfg.gamma, cfg.gae_lambda, cfg.clip, cfg.vf_coef, cfg.lr, cfg.max_grad_norm) == (0.99, 0.95, 0.2, 0.5, 3e-4, 0.5)
