"""Recurrent actor-critic: 1x1 conv -> LSTM -> separate tanh MLP heads.

Everything is plain numpy with hand-written backward passes.  Parameters
live in an ordered ``dict`` of arrays; the dtype of the arrays decides the
precision of the whole forward/backward path (float32 for training,
float64 for gradient checks).

LSTM gate order in the stacked ``4H`` axis is input, forget, cell, output.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .env import N_ACTIONS, OBS_SHAPE


@dataclass(frozen=True)
class Arch:
    in_channels: int = OBS_SHAPE[0]
    height: int = OBS_SHAPE[1]
    width: int = OBS_SHAPE[2]
    conv_channels: int = 32
    hidden: int = 256
    mlp: int = 64
    n_actions: int = N_ACTIONS

    @property
    def features(self) -> int:
        return self.conv_channels * self.height * self.width

    def as_dict(self) -> dict:
        return asdict(self)


DEFAULT_ARCH = Arch()


def param_shapes(arch: Arch) -> list:
    """Parameter names and shapes in checkpoint order."""
    C, H, M = arch.conv_channels, arch.hidden, arch.mlp
    return [
        ("conv_w", (C, arch.in_channels)),
        ("conv_b", (C,)),
        ("lstm_wx", (arch.features, 4 * H)),
        ("lstm_wh", (H, 4 * H)),
        ("lstm_b", (4 * H,)),
        ("pi_w1", (H, M)),
        ("pi_b1", (M,)),
        ("pi_w2", (M, arch.n_actions)),
        ("pi_b2", (arch.n_actions,)),
        ("vf_w1", (H, M)),
        ("vf_b1", (M,)),
        ("vf_w2", (M, 1)),
        ("vf_b2", (1,)),
    ]


def param_count(arch: Arch) -> int:
    return sum(int(np.prod(s)) for _, s in param_shapes(arch))


def orthogonal(shape, gain: float, rng: np.random.Generator) -> np.ndarray:
    rows, cols = shape
    flat = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(flat)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_params(seed, arch: Arch = DEFAULT_ARCH, dtype=np.float32) -> dict:
    rng = np.random.default_rng(seed)
    H = arch.hidden
    gains = {
        "conv_w": np.sqrt(2.0),
        "lstm_wx": 1.0,
        "lstm_wh": 1.0,
        "pi_w1": np.sqrt(2.0),
        "pi_w2": 0.01,
        "vf_w1": np.sqrt(2.0),
        "vf_w2": 1.0,
    }
    params = {}
    for name, shape in param_shapes(arch):
        if name in gains:
            params[name] = orthogonal(shape, gains[name], rng).astype(dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    params["lstm_b"][H : 2 * H] = 1.0
    return params


def flatten_params(params: dict):
    """Copy ``params`` into one contiguous vector and return ``(flat, views)``.

    ``views`` maps each name to a reshaped view of ``flat``, so in-place
    updates of ``flat`` are visible through the dict.
    """
    dtype = next(iter(params.values())).dtype
    flat = np.concatenate([np.asarray(v, dtype=dtype).ravel() for v in params.values()])
    views, offset = {}, 0
    for name, value in params.items():
        views[name] = flat[offset : offset + value.size].reshape(value.shape)
        offset += value.size
    return flat, views


def zero_hidden(arch: Arch = DEFAULT_ARCH, dtype=np.float32):
    return np.zeros(arch.hidden, dtype=dtype), np.zeros(arch.hidden, dtype=dtype)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


@dataclass
class Tape:
    """Intermediates of ``forward_sequence`` needed by ``backward``."""

    obs: np.ndarray
    conv: np.ndarray
    x: np.ndarray
    h_prev: np.ndarray
    c_prev: np.ndarray
    gates: np.ndarray
    c: np.ndarray
    tanh_c: np.ndarray
    h: np.ndarray
    pi_a: np.ndarray
    vf_a: np.ndarray
    starts: np.ndarray


@dataclass
class ForwardOut:
    logits: np.ndarray
    value: np.ndarray
    h: np.ndarray
    c: np.ndarray
    tape: Tape


def _check_finite(obs):
    if not np.all(np.isfinite(obs)):
        raise ValueError("non-finite values in observation")


def forward_sequence(params: dict, obs: np.ndarray, h0, c0, starts=None) -> ForwardOut:
    """Run ``T`` consecutive steps.

    ``obs`` has shape ``(T, C, H, W)``.  ``starts[t]`` marks an episode start:
    the carry is zeroed before step ``t`` and no gradient crosses it.
    Returns per-step logits ``(T, A)``, values ``(T,)`` and the final carry.
    """
    obs = np.asarray(obs)
    _check_finite(obs)
    dtype = params["lstm_wx"].dtype
    obs = obs.astype(dtype, copy=False)
    T = obs.shape[0]
    Hn = params["lstm_wh"].shape[0]
    starts = np.zeros(T, dtype=bool) if starts is None else np.asarray(starts, dtype=bool)

    conv = np.einsum("oc,tchw->tohw", params["conv_w"], obs) + params["conv_b"][None, :, None, None]
    conv = np.maximum(conv, 0.0)
    x = conv.reshape(T, -1)
    xproj = x @ params["lstm_wx"] + params["lstm_b"]

    wh = params["lstm_wh"]
    h_prev = np.empty((T, Hn), dtype=dtype)
    c_prev = np.empty((T, Hn), dtype=dtype)
    gates = np.empty((T, 4 * Hn), dtype=dtype)
    cs = np.empty((T, Hn), dtype=dtype)
    tcs = np.empty((T, Hn), dtype=dtype)
    hs = np.empty((T, Hn), dtype=dtype)
    h = np.asarray(h0, dtype=dtype)
    c = np.asarray(c0, dtype=dtype)
    for t in range(T):
        if starts[t]:
            h = np.zeros(Hn, dtype=dtype)
            c = np.zeros(Hn, dtype=dtype)
        h_prev[t], c_prev[t] = h, c
        z = xproj[t] + h @ wh
        g = np.empty_like(z)
        g[: 2 * Hn] = _sigmoid(z[: 2 * Hn])
        g[2 * Hn : 3 * Hn] = np.tanh(z[2 * Hn : 3 * Hn])
        g[3 * Hn :] = _sigmoid(z[3 * Hn :])
        c = g[Hn : 2 * Hn] * c + g[:Hn] * g[2 * Hn : 3 * Hn]
        tc = np.tanh(c)
        h = g[3 * Hn :] * tc
        gates[t], cs[t], tcs[t], hs[t] = g, c, tc, h

    pi_a = np.tanh(hs @ params["pi_w1"] + params["pi_b1"])
    logits = pi_a @ params["pi_w2"] + params["pi_b2"]
    vf_a = np.tanh(hs @ params["vf_w1"] + params["vf_b1"])
    value = (vf_a @ params["vf_w2"] + params["vf_b2"])[:, 0]
    tape = Tape(obs, conv, x, h_prev, c_prev, gates, cs, tcs, hs, pi_a, vf_a, starts)
    return ForwardOut(logits, value, h, c, tape)


def forward(params: dict, obs: np.ndarray, h, c) -> ForwardOut:
    """Single step; ``obs`` has shape ``(C, H, W)``.  Logits ``(A,)``, scalar value."""
    out = forward_sequence(params, np.asarray(obs)[None], h, c)
    out.logits = out.logits[0]
    out.value = out.value[0]
    return out


def backward(params: dict, tape: Tape, dlogits: np.ndarray, dvalue: np.ndarray) -> dict:
    """Gradients of a scalar loss given its gradients w.r.t. logits and values.

    Backpropagates through time over the whole tape; gradients stop at the
    start of the tape and at every episode start.
    """
    dtype = params["lstm_wx"].dtype
    T, Hn = tape.h.shape
    dlogits = np.asarray(dlogits, dtype=dtype).reshape(T, -1)
    dvalue = np.asarray(dvalue, dtype=dtype).reshape(T, 1)
    if dlogits.shape[1] != params["pi_w2"].shape[1] or tape.x.shape[1] != params["lstm_wx"].shape[0]:
        raise ValueError("tape does not match parameter shapes")
    grads = {}

    grads["pi_w2"] = tape.pi_a.T @ dlogits
    grads["pi_b2"] = dlogits.sum(0)
    dz = (dlogits @ params["pi_w2"].T) * (1.0 - tape.pi_a**2)
    grads["pi_w1"] = tape.h.T @ dz
    grads["pi_b1"] = dz.sum(0)
    dh_out = dz @ params["pi_w1"].T

    grads["vf_w2"] = tape.vf_a.T @ dvalue
    grads["vf_b2"] = dvalue.sum(0)
    dz = (dvalue @ params["vf_w2"].T) * (1.0 - tape.vf_a**2)
    grads["vf_w1"] = tape.h.T @ dz
    grads["vf_b1"] = dz.sum(0)
    dh_out = dh_out + dz @ params["vf_w1"].T

    wh_t = params["lstm_wh"].T
    dgates = np.empty((T, 4 * Hn), dtype=dtype)
    dh_next = np.zeros(Hn, dtype=dtype)
    dc_next = np.zeros(Hn, dtype=dtype)
    for t in range(T - 1, -1, -1):
        g = tape.gates[t]
        i, f, gg, o = g[:Hn], g[Hn : 2 * Hn], g[2 * Hn : 3 * Hn], g[3 * Hn :]
        dh = dh_out[t] + dh_next
        tc = tape.tanh_c[t]
        dc = dc_next + dh * o * (1.0 - tc * tc)
        dg = dgates[t]
        dg[:Hn] = dc * gg * i * (1.0 - i)
        dg[Hn : 2 * Hn] = dc * tape.c_prev[t] * f * (1.0 - f)
        dg[2 * Hn : 3 * Hn] = dc * i * (1.0 - gg * gg)
        dg[3 * Hn :] = dh * tc * o * (1.0 - o)
        if tape.starts[t]:
            dh_next = np.zeros(Hn, dtype=dtype)
            dc_next = np.zeros(Hn, dtype=dtype)
        else:
            dh_next = dg @ wh_t
            dc_next = dc * f

    grads["lstm_wx"] = tape.x.T @ dgates
    grads["lstm_wh"] = tape.h_prev.T @ dgates
    grads["lstm_b"] = dgates.sum(0)

    dconv = (dgates @ params["lstm_wx"].T).reshape(tape.conv.shape)
    dconv = dconv * (tape.conv > 0)
    grads["conv_w"] = np.einsum("tohw,tchw->oc", dconv, tape.obs)
    grads["conv_b"] = dconv.sum(axis=(0, 2, 3))
    return {name: grads[name] for name in params}


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def sample_action(logits: np.ndarray, rng: np.random.Generator):
    """Draw one action from the categorical policy.  Returns ``(action, log_prob)``."""
    logp = log_softmax(logits)
    cdf = np.cumsum(np.exp(logp))
    action = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    action = min(action, len(cdf) - 1)
    return action, float(logp[action])


def evaluate_actions(logits: np.ndarray, actions):
    """Log-probabilities of ``actions`` and policy entropies, batched over rows."""
    logp = log_softmax(np.atleast_2d(logits))
    actions = np.atleast_1d(np.asarray(actions, dtype=np.int64))
    p = np.exp(logp)
    entropy = -(p * logp).sum(axis=-1)
    return logp[np.arange(len(actions)), actions], entropy
