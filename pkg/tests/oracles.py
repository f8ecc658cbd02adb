"""Independent reference computations the tests compare the package against.

Each oracle avoids the code path it checks: plain Python loops instead of
vectorized numpy, explicit weight sums instead of recurrences, exhaustive
dynamic programming instead of simulation.
"""

from __future__ import annotations

import math
import struct
import zlib

import numpy as np

from gorila import transport as wire
from gorila.config import RunConfig
from gorila.envs import TabularMDP
from gorila.experiment import build_env, component_seeds, initial_params, network_sizes
from gorila.nn import AdaGradState, QNetwork, adagrad_apply
from gorila.rl import EpsilonSchedule, Transition, epsilon_at, minibatch_loss_gradient, select_action


# --- networks ------------------------------------------------------------------


def loop_forward(weights, biases, x) -> list[float]:
    """MLP forward pass with Python lists and explicit sums."""
    act = [float(v) for v in x]
    last = len(weights) - 1
    for i, (w, b) in enumerate(zip(weights, biases)):
        out = []
        for r in range(len(w)):
            z = float(b[r])
            for c in range(len(act)):
                z += float(w[r][c]) * act[c]
            out.append(z if i == last else max(z, 0.0))
        act = out
    return act


def preactivations(net: QNetwork, x) -> list[np.ndarray]:
    acts = np.asarray(x, dtype=np.float64)
    out = []
    for w, b in zip(net.weights[:-1], net.biases[:-1]):
        z = w @ acts + b
        out.append(z)
        acts = np.maximum(z, 0.0)
    return out


def central_difference(f, theta: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of ``f`` evaluated in extended precision.

    ``f`` receives a long double vector. Doing the arithmetic in 64-bit
    mantissas keeps the oracle's own round-off (about eps * |f| / h) well
    below the 1e-5 tolerance even for gradient entries near 1e-6.
    """
    theta = np.asarray(theta, dtype=np.longdouble)
    step = np.longdouble(h)
    grad = np.empty(theta.size, dtype=np.float64)
    for i in range(theta.size):
        up = theta.copy()
        dn = theta.copy()
        up[i] += step
        dn[i] -= step
        grad[i] = float((f(up) - f(dn)) / (2 * step))
    return grad


def extended_net(sizes, values) -> QNetwork:
    from gorila.nn import mlp_layout, ParamVector

    return QNetwork(sizes, params=ParamVector(np.asarray(values), mlp_layout(sizes)),
                    dtype=np.longdouble)


def half_dqn_loss(sizes, values, batch, y) -> np.longdouble:
    """0.5 * mean (y_i - Q(s_i, a_i))^2 with targets held fixed."""
    net = extended_net(sizes, values)
    total = np.longdouble(0)
    for t, yi in zip(batch, y):
        d = np.longdouble(yi) - net.forward(t.state)[t.action]
        total += d * d
    return total / (2 * len(batch))


def max_relative_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-7) -> float:
    """Elementwise |a-b| / max(|a|, |b|, floor), maximised."""
    scale = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / scale))


# --- statistics ----------------------------------------------------------------


def explicit_mean(xs, decay: float) -> float:
    """EMA seeded with the first value, as one weighted sum.

    ``m_n = d^(n-1) x_0 + sum_{i>=1} (1-d) d^(n-1-i) x_i``
    """
    n = len(xs)
    return decay ** (n - 1) * xs[0] + sum((1 - decay) * decay ** (n - 1 - i) * xs[i]
                                          for i in range(1, n))


def ema_explicit(xs, decay: float) -> tuple[float, float]:
    """Moving mean and variance with every term's weight spelled out.

    ``var_n = sum_{k>=1} d^(n-1-k) * d(1-d) * (x_k - m_(k-1))^2`` where each
    ``m_(k-1)`` is itself the explicit weighted sum.
    """
    n = len(xs)
    var = sum(decay ** (n - 1 - k) * decay * (1 - decay) * (xs[k] - explicit_mean(xs[:k], decay)) ** 2
              for k in range(1, n))
    return explicit_mean(xs, decay), var


# --- environments --------------------------------------------------------------


def random_agent_value(mdp: TabularMDP, cap: int) -> tuple[float, float]:
    """Exact mean and variance of the undiscounted return of uniform play, capped at ``cap`` steps.

    Finite-horizon dynamic programming over (state, steps left) for the first
    and second moments of the return.
    """
    n = mdp.n_states
    pi = np.full(mdp.n_actions, 1.0 / mdp.n_actions)
    m1 = np.zeros(n)
    m2 = np.zeros(n)
    for _ in range(cap):
        new1 = np.zeros(n)
        new2 = np.zeros(n)
        for s in range(n):
            if mdp.terminal[s]:
                continue
            for a in range(mdp.n_actions):
                for s2 in range(n):
                    p = pi[a] * mdp.P[s, a, s2]
                    if p == 0:
                        continue
                    r = mdp.R[s, a, s2]
                    new1[s] += p * (r + m1[s2])
                    new2[s] += p * (r * r + 2 * r * m1[s2] + m2[s2])
        m1, m2 = new1, new2
    mean = float(mdp.start @ m1)
    second = float(mdp.start @ m2)
    return mean, second - mean * mean


def q_iteration_reference(P, R, terminal, gamma, sweeps=2000) -> np.ndarray:
    """Gauss-Seidel style Q iteration with explicit loops."""
    n_s, n_a, _ = P.shape
    q = [[0.0] * n_a for _ in range(n_s)]
    for _ in range(sweeps):
        for s in range(n_s):
            for a in range(n_a):
                total = 0.0
                for s2 in range(n_s):
                    if P[s, a, s2] == 0:
                        continue
                    cont = 0.0 if terminal[s2] else gamma * max(q[s2])
                    total += P[s, a, s2] * (R[s, a, s2] + cont)
                q[s][a] = total
    return np.array(q)


# --- serial Algorithm-1 loop -------------------------------------------------------


def serial_dqn_reference(cfg: RunConfig, steps: int, on_step=None) -> np.ndarray:
    """Single-process DQN with one shared parameter vector and whole-vector AdaGrad.

    Mirrors the per-step order of a bundle (act, store, sample, update, maybe
    refresh target) with no server, transport, replay class or staleness
    filter. ``on_step(i, theta)`` sees the parameters after every step.
    """
    seeds = component_seeds(cfg.seed, 0)
    env = build_env(cfg, seeds.env)
    sizes = network_sizes(cfg, env)
    theta = initial_params(cfg)
    acting = QNetwork(sizes, params=theta)
    current = QNetwork(sizes, params=theta)
    target = QNetwork(sizes, params=theta)
    ada = AdaGradState.zeros(theta.layout.total, cfg.lr, cfg.adagrad_eps)
    values = theta.values.copy()
    sched = EpsilonSchedule(cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_horizon)
    actor_rng = np.random.default_rng(seeds.actor)
    replay_rng = np.random.default_rng(seeds.replay)
    memory: list[Transition] = []
    version = 0
    last_target = 0
    obs = None
    first = True
    ep_steps = 0
    total_steps = 0
    for i in range(steps):
        if obs is None:
            obs = env.reset(seeds.env if first else None)
            first = False
            ep_steps = 0
        acting.load_flat(values)
        action = select_action(acting, obs, epsilon_at(sched, version), actor_rng)
        nxt, reward, terminal = env.step(action)
        memory.append(Transition(obs, action, reward, nxt, terminal, 0, total_steps))
        if len(memory) > cfg.replay_capacity:
            memory.pop(0)
        total_steps += 1
        ep_steps += 1
        obs = None if terminal or ep_steps >= cfg.episode_cap else nxt

        if len(memory) >= max(cfg.replay_warmup, 1):
            current.load_flat(values)
            idx = replay_rng.integers(0, len(memory), size=cfg.batch_size)
            batch = [memory[j] for j in idx]
            grad, _, _ = minibatch_loss_gradient(batch, current, target, cfg.gamma)
            adagrad_apply(values, grad, ada)
            version += 1
            if version >= last_target + cfg.target_period:
                target.load_flat(values)
                last_target = version
        if on_step is not None:
            on_step(i, values)
    return values


def chi_square_stat(counts, expected) -> float:
    counts = np.asarray(counts, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    return float(np.sum((counts - expected) ** 2 / expected))


def normal_se(values) -> float:
    values = np.asarray(values, dtype=np.float64)
    return float(values.std(ddof=1) / math.sqrt(len(values)))


# --- wire ---------------------------------------------------------------------------


def hand_frame(kind, payload):
    """Frame built straight from the documented layout."""
    return b"GRL1" + struct.pack("<BI", kind, len(payload)) + payload + struct.pack(
        "<I", zlib.crc32(payload))


def random_transition(rng):
    dim = int(rng.integers(1, 6))
    return Transition(rng.normal(size=dim), int(rng.integers(0, 2**32)), float(rng.normal()),
                      rng.normal(size=dim), bool(rng.integers(2)), int(rng.integers(0, 2**32)),
                      int(rng.integers(0, 2**63)))


def random_message(rng):
    """One message of a uniformly chosen kind with random contents."""
    kind = int(rng.integers(1, 11))
    if kind == 1:
        return wire.GradPush(int(rng.integers(0, 2**63)),
                             [(int(i), rng.normal(size=int(rng.integers(0, 5))))
                              for i in range(int(rng.integers(0, 4)))])
    if kind == 2:
        n = int(rng.integers(0, 40))
        chosen = frozenset(int(i) for i in np.flatnonzero(rng.random(n) < 0.5))
        return wire.ParamFetchReq(chosen or None)
    if kind == 3:
        slices = [wire.ShardSlice(int(i), int(rng.integers(0, 2**40)),
                                  rng.normal(size=int(rng.integers(0, 5))))
                  for i in range(int(rng.integers(0, 4)))]
        return wire.ParamFetchResp(int(rng.integers(0, 2**63)), slices)
    if kind == 4:
        return wire.PutExp(random_transition(rng))
    if kind == 5:
        return wire.SampleReq(int(rng.integers(0, 2**32)))
    if kind == 6:
        return wire.SampleResp([random_transition(rng) for _ in range(int(rng.integers(0, 3)))])
    if kind == 7:
        return wire.StatsReq()
    if kind == 8:
        return wire.StatsResp({"n": int(rng.integers(0, 1000)), "x": float(rng.normal())})
    if kind == 9:
        return wire.Ack(int(rng.integers(0, 2**32)), int(rng.integers(0, 2**63)))
    return wire.Err(int(rng.integers(0, 2**16)), "e" * int(rng.integers(0, 10)) + "é")
