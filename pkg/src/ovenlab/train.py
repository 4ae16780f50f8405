"""Recurrent PPO (clipped surrogate + value loss + entropy bonus) on one environment.

Seed scheme: a run seed ``s`` feeds ``np.random.SeedSequence(s)`` whose
three spawned children drive, in order, parameter initialisation,
environment episode seeds and action sampling / minibatch order.
Evaluation uses ``SeedSequence([EVAL_STREAM, eval_seed])`` so it never
overlaps a training stream.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numba
import numpy as np

from . import __version__
from .checkpoint import Checkpoint, CheckpointError
from .checkpoint import load as load_checkpoint
from .env import EPISODE_LEN, OvenEnv, TaskKind
from .net import (
    DEFAULT_ARCH,
    Arch,
    backward,
    flatten_params,
    forward,
    forward_sequence,
    init_params,
    log_softmax,
    sample_action,
    zero_hidden,
)
from .trace import EvalTrace, step_row

log = logging.getLogger(__name__)

EVAL_STREAM = 0x0E7A1
CURVE_COLUMNS = ("step", "mean_ep_reward", "policy_loss", "value_loss", "entropy", "clip_frac")


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    total_steps: int = 100_000
    rollout_len: int = 128
    epochs: int = 10
    minibatches: int = 4
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip: float = 0.2
    ent_coef: float = 0.05
    vf_coef: float = 0.5
    lr: float = 3e-4
    max_grad_norm: float = 0.5
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        if self.rollout_len % self.minibatches:
            raise ValueError("rollout_len must be divisible by minibatches")
        if self.total_steps <= 0 or self.rollout_len <= 0 or self.epochs <= 0:
            raise ValueError("total_steps, rollout_len and epochs must be positive")
        self.adam_betas = tuple(self.adam_betas)

    def as_dict(self) -> dict:
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d


def code_version() -> str:
    """Content hash of the package sources, prefixed with the release version."""
    digest = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        digest.update(path.name.encode())
        digest.update(path.read_bytes())
    return f"{__version__}+{digest.hexdigest()[:12]}"


# --------------------------------------------------------------------------- rollouts


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    values: np.ndarray
    rewards: np.ndarray
    dones: np.ndarray
    episode_starts: np.ndarray
    h0: np.ndarray
    c0: np.ndarray
    bootstrap_value: float = 0.0

    def __len__(self) -> int:
        return len(self.actions)


class EnvRunner:
    """Owns one environment, the current observation and the LSTM carry."""

    def __init__(self, task, target: int, seed_seq, arch: Arch = DEFAULT_ARCH, allow_any_target: bool = False):
        self.env = OvenEnv(task, target, allow_any_target)
        self.seed_rng = np.random.default_rng(seed_seq)
        self.arch = arch
        self.completed_rewards: list = []
        self._start_episode()

    def _start_episode(self):
        self.obs = self.env.reset(int(self.seed_rng.integers(2**63)))
        self.h, self.c = zero_hidden(self.arch)
        self.episode_start = True
        self.episode_reward = 0.0


def collect_rollout(runner: EnvRunner, params: dict, n: int, rng: np.random.Generator) -> RolloutBuffer:
    """Sample ``n`` steps with the current policy; the carry persists in ``runner``."""
    H = runner.arch.hidden
    buf = RolloutBuffer(
        obs=np.empty((n,) + runner.obs.shape, dtype=np.float32),
        actions=np.empty(n, dtype=np.int64),
        log_probs=np.empty(n),
        values=np.empty(n),
        rewards=np.empty(n),
        dones=np.empty(n, dtype=bool),
        episode_starts=np.empty(n, dtype=bool),
        h0=np.empty((n, H), dtype=np.float32),
        c0=np.empty((n, H), dtype=np.float32),
    )
    for t in range(n):
        buf.obs[t] = runner.obs
        buf.h0[t], buf.c0[t] = runner.h, runner.c
        buf.episode_starts[t] = runner.episode_start
        out = forward(params, runner.obs, runner.h, runner.c)
        action, logp = sample_action(out.logits, rng)
        res = runner.env.step(action)
        buf.actions[t], buf.log_probs[t], buf.values[t] = action, logp, out.value
        buf.rewards[t], buf.dones[t] = res.reward, res.done
        runner.episode_reward += res.reward
        if res.done:
            runner.completed_rewards.append(runner.episode_reward)
            runner._start_episode()
        else:
            runner.obs, runner.h, runner.c = res.observation, out.h, out.c
            runner.episode_start = False
    if not buf.dones[-1]:
        buf.bootstrap_value = float(forward(params, runner.obs, runner.h, runner.c).value)
    return buf


def compute_gae(rewards, values, dones, bootstrap_value: float, gamma: float, lam: float):
    """Generalised advantage estimates and returns (``advantages + values``)."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    n = len(rewards)
    adv = np.zeros(n)
    next_value, next_adv = float(bootstrap_value), 0.0
    for t in range(n - 1, -1, -1):
        alive = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * alive - values[t]
        next_adv = delta + gamma * lam * alive * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


# --------------------------------------------------------------------------- optimisation


@numba.njit(cache=True)
def _adam_kernel(flat, grad, m, v, b1, b2, a1, a2, lr_hat, inv_c2, eps):
    for i in range(flat.size):
        g = grad[i]
        mi = b1 * m[i] + a1 * g
        vi = b2 * v[i] + a2 * g * g
        m[i] = mi
        v[i] = vi
        flat[i] -= lr_hat * mi / (np.sqrt(vi * inv_c2) + eps)


class Adam:
    """Adam on a flat parameter vector (updated in place)."""

    def __init__(self, n: int, lr: float, betas=(0.9, 0.999), eps: float = 1e-8, dtype=np.float32):
        self.lr, self.eps = lr, eps
        self.b1, self.b2 = betas
        self.t = 0
        self.m = np.zeros(n, dtype=dtype)
        self.v = np.zeros(n, dtype=dtype)

    def step(self, flat: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        dt = flat.dtype.type
        _adam_kernel(flat, grad, self.m, self.v, dt(self.b1), dt(self.b2), dt(1.0 - self.b1),
                     dt(1.0 - self.b2), dt(self.lr / c1), dt(1.0 / c2), dt(self.eps))


def flat_grad(params: dict, grads: dict) -> np.ndarray:
    return np.concatenate([grads[k].ravel() for k in params])


def clip_grad_norm(grad: np.ndarray, max_norm: float) -> float:
    """Scale the flat ``grad`` in place to global norm at most ``max_norm``.  Returns the pre-clip norm."""
    norm = float(np.sqrt(np.dot(grad, grad)))
    coef = max_norm / (norm + 1e-6)
    if coef < 1.0:
        grad *= grad.dtype.type(coef)
    return norm


def ppo_loss_grads(logits, values, actions, old_log_probs, advantages, returns, config: TrainConfig):
    """Loss terms and their gradients with respect to logits and values.

    Returns ``(stats, dlogits, dvalues)``; ``stats["loss"]`` is the scalar objective.
    """
    B = len(actions)
    logp_all = log_softmax(logits)
    p = np.exp(logp_all)
    logp = logp_all[np.arange(B), actions]
    entropy = -(p * logp_all).sum(-1)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - config.clip, 1.0 + config.clip)
    surr1 = ratio * advantages
    surr2 = clipped * advantages
    unclipped_branch = surr1 <= surr2
    policy_loss = -np.mean(np.minimum(surr1, surr2))
    values = np.asarray(values, dtype=np.float64)
    value_loss = np.mean((values - returns) ** 2)
    ent_mean = float(np.mean(entropy))
    loss = policy_loss + config.vf_coef * value_loss - config.ent_coef * ent_mean

    dlogp = np.where(unclipped_branch, -advantages * ratio / B, 0.0)
    onehot = np.zeros_like(p)
    onehot[np.arange(B), actions] = 1.0
    dlogits = dlogp[:, None] * (onehot - p)
    dlogits += (config.ent_coef / B) * p * (logp_all + entropy[:, None])
    dvalues = 2.0 * config.vf_coef * (values - returns) / B

    log_ratio = logp - old_log_probs
    stats = {
        "loss": float(loss),
        "policy_loss": float(policy_loss),
        "value_loss": float(value_loss),
        "entropy": ent_mean,
        "clip_frac": float(np.mean(np.abs(ratio - 1.0) > config.clip)),
        "approx_kl": float(np.mean(np.expm1(log_ratio) - log_ratio)),
        "ratio": ratio,
    }
    return stats, dlogits, dvalues


def ppo_update(params: dict, flat: np.ndarray, optimizer: Adam, buf: RolloutBuffer, advantages, returns, config: TrainConfig, rng) -> dict:
    """Run ``config.epochs`` passes of contiguous-sequence minibatch updates.

    ``params`` must be views into ``flat`` (see ``net.flatten_params``); both
    are updated in place.
    """
    n = len(buf)
    seg = n // config.minibatches
    history = {k: [] for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl", "grad_norm")}
    for epoch in range(config.epochs):
        for mb in rng.permutation(config.minibatches):
            s, e = mb * seg, (mb + 1) * seg
            out = forward_sequence(params, buf.obs[s:e], buf.h0[s], buf.c0[s], buf.episode_starts[s:e])
            adv = advantages[s:e]
            adv = (adv - adv.mean()) / (adv.std() + 1e-8)
            stats, dlogits, dvalues = ppo_loss_grads(
                out.logits, out.value, buf.actions[s:e], buf.log_probs[s:e], adv, returns[s:e], config
            )
            if not np.isfinite(stats["loss"]):
                raise NonFiniteLossError(
                    f"non-finite loss at epoch {epoch}, minibatch {mb}: "
                    + ", ".join(f"{k}={v:.4g}" for k, v in stats.items() if k != "ratio")
                    + f"; max |logit|={np.abs(out.logits).max():.4g}"
                )
            grad = flat_grad(params, backward(params, out.tape, dlogits, dvalues))
            history["grad_norm"].append(clip_grad_norm(grad, config.max_grad_norm))
            optimizer.step(flat, grad)
            for k in ("policy_loss", "value_loss", "entropy", "clip_frac", "approx_kl"):
                history[k].append(stats[k])
    return {k: float(np.mean(v)) for k, v in history.items()}


# --------------------------------------------------------------------------- driver


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    curve: list = field(default_factory=list)


def train(task, target: int, seed: int, config: Optional[TrainConfig] = None, out_dir=None,
          arch: Arch = DEFAULT_ARCH, allow_any_target: bool = False) -> TrainResult:
    """Train one agent.  With ``out_dir`` set, writes ``checkpoint.bin``,
    ``curve.csv`` and ``run.json`` there."""
    config = config or TrainConfig()
    task = TaskKind(task)
    init_ss, env_ss, sample_ss = np.random.SeedSequence(seed).spawn(3)
    flat, params = flatten_params(init_params(init_ss, arch))
    runner = EnvRunner(task, target, env_ss, arch, allow_any_target)
    rng = np.random.default_rng(sample_ss)
    opt = Adam(flat.size, config.lr, config.adam_betas, config.adam_eps)

    curve = []
    steps = 0
    while steps < config.total_steps:
        buf = collect_rollout(runner, params, config.rollout_len, rng)
        steps += len(buf)
        adv, ret = compute_gae(buf.rewards, buf.values, buf.dones, buf.bootstrap_value, config.gamma, config.gae_lambda)
        stats = ppo_update(params, flat, opt, buf, adv, ret, config, rng)
        recent = runner.completed_rewards[-10:]
        row = {
            "step": steps,
            "mean_ep_reward": float(np.mean(recent)) if recent else float("nan"),
            **{k: stats[k] for k in CURVE_COLUMNS[2:]},
        }
        curve.append(row)
        if len(curve) % 50 == 0:
            log.info("%s T=%d seed=%d step %d reward %.2f", task.value, target, seed, steps, row["mean_ep_reward"])

    ckpt = Checkpoint(params, arch, task.value, int(target), int(seed), steps)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(out_dir / "checkpoint.bin")
        write_curve(out_dir / "curve.csv", curve)
        manifest = {
            "task": task.value,
            "target": int(target),
            "seed": int(seed),
            "config": config.as_dict(),
            "arch": arch.as_dict(),
            "seed_scheme": "SeedSequence(seed).spawn(3) -> init, env, sampling",
            "code_version": code_version(),
            "final_step": steps,
        }
        (out_dir / "run.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return TrainResult(ckpt, curve)


def write_curve(path, curve) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS, lineterminator="\n")
        w.writeheader()
        for row in curve:
            w.writerow({k: (row[k] if k == "step" else f"{row[k]:.6g}") for k in CURVE_COLUMNS})


# --------------------------------------------------------------------------- evaluation


def evaluate(checkpoint, n_episodes: int = 25, eval_seed: Optional[int] = None,
             expect_arch: Optional[Arch] = DEFAULT_ARCH, allow_any_target: bool = False) -> EvalTrace:
    """Roll out the stochastic policy for ``n_episodes`` full episodes.

    ``checkpoint`` is a :class:`Checkpoint` or a path.  Records every step and
    the LSTM output ``h`` that produced the action.
    """
    if not isinstance(checkpoint, Checkpoint):
        checkpoint = load_checkpoint(checkpoint, expect_arch)
    elif expect_arch is not None and checkpoint.arch != expect_arch:
        raise CheckpointError(f"architecture mismatch: {checkpoint.arch} vs {expect_arch}")
    eval_seed = checkpoint.seed if eval_seed is None else eval_seed
    env_ss, sample_ss = np.random.SeedSequence([EVAL_STREAM, int(eval_seed)]).spawn(2)
    env_seeds = np.random.default_rng(env_ss).integers(2**63, size=n_episodes)
    rng = np.random.default_rng(sample_ss)
    params, arch = checkpoint.params, checkpoint.arch
    env = OvenEnv(checkpoint.task, checkpoint.target, allow_any_target)

    rows = []
    hidden = np.zeros((n_episodes, EPISODE_LEN, arch.hidden), dtype=np.float32)
    for ep in range(n_episodes):
        obs = env.reset(int(env_seeds[ep]))
        h, c = zero_hidden(arch)
        done = False
        while not done:
            out = forward(params, obs, h, c)
            action, _ = sample_action(out.logits, rng)
            res = env.step(action)
            hidden[ep, res.info["step"]] = out.h
            rows.append(step_row(ep, action, res))
            obs, h, c, done = res.observation, out.h, out.c, res.done
    return EvalTrace.from_rows(checkpoint.task, checkpoint.target, rows, hidden)
