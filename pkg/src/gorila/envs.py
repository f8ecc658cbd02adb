"""Small environments with exactly solvable dynamics, plus evaluation affordances.

Tabular MDPs expose one-hot observations so the same Q-network code runs on
them, while value iteration gives the exact Q* to check learning against.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

TRAJECTORY_MAGIC = b"GRTJ"
TRAJECTORY_VERSION = 1
SNAPSHOT_VERSION = 1


class EnvError(RuntimeError):
    pass


class FixtureError(RuntimeError):
    """A recorded trajectory does not replay on the given environment."""


class UnsupportedEnv(TypeError):
    pass


@dataclass
class TabularMDP:
    """``P[s, a, s']`` transition probabilities and ``R[s, a, s']`` rewards."""

    P: np.ndarray
    R: np.ndarray
    terminal: np.ndarray
    start: np.ndarray

    def __post_init__(self):
        self.P = np.asarray(self.P, dtype=np.float64)
        self.R = np.broadcast_to(np.asarray(self.R, dtype=np.float64), self.P.shape).copy()
        self.terminal = np.asarray(self.terminal, dtype=bool)
        self.start = np.asarray(self.start, dtype=np.float64)
        n_s, n_a, n_s2 = self.P.shape
        if n_s != n_s2 or self.terminal.shape != (n_s,) or self.start.shape != (n_s,):
            raise ValueError("inconsistent tabular MDP shapes")
        if not np.allclose(self.P.sum(axis=2), 1.0) or not np.isclose(self.start.sum(), 1.0):
            raise ValueError("transition rows and start distribution must sum to 1")

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def expected_reward(self) -> np.ndarray:
        return (self.P * self.R).sum(axis=2)


class Environment:
    name = "env"
    action_count: int
    observation_dim: int
    null_action: int | None = None
    deterministic = False

    def reset(self, seed: int | None = None) -> np.ndarray:
        raise NotImplementedError

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        raise NotImplementedError

    def snapshot(self):
        raise NotImplementedError

    def restore(self, snap) -> None:
        raise NotImplementedError


class TabularEnv(Environment):
    def __init__(self, mdp: TabularMDP, seed: int | None = None, name: str = "tabular",
                 null_action: int | None = None):
        self.mdp = mdp
        self.name = name
        self.null_action = null_action
        self.action_count = mdp.n_actions
        self.observation_dim = mdp.n_states
        self.deterministic = bool(np.all(mdp.P.max(axis=2) == 1.0) and mdp.start.max() == 1.0)
        self._cum_p = np.cumsum(mdp.P, axis=2)
        self._cum_start = np.cumsum(mdp.start)
        self._rng = np.random.default_rng(seed)
        self.state: int | None = None
        self.done = True
        self.steps = 0

    def observe(self, s: int) -> np.ndarray:
        obs = np.zeros(self.observation_dim)
        obs[s] = 1.0
        return obs

    def _draw(self, cum: np.ndarray) -> int:
        return min(int(np.searchsorted(cum, self._rng.random(), side="right")), len(cum) - 1)

    def reset(self, seed: int | None = None) -> np.ndarray:
        if seed is not None:
            self._rng = np.random.default_rng(seed)
        self.state = self._draw(self._cum_start)
        self.done = bool(self.mdp.terminal[self.state])
        self.steps = 0
        return self.observe(self.state)

    def step(self, action: int) -> tuple[np.ndarray, float, bool]:
        if self.done:
            raise EnvError("step called on a finished episode; reset first")
        if not 0 <= action < self.action_count:
            raise EnvError(f"invalid action {action}")
        s = self.state
        s2 = self._draw(self._cum_p[s, action])
        reward = float(self.mdp.R[s, action, s2])
        self.state = s2
        self.done = bool(self.mdp.terminal[s2])
        self.steps += 1
        return self.observe(s2), reward, self.done

    def snapshot(self):
        return (SNAPSHOT_VERSION, self.state, self.done, self.steps,
                dict(self._rng.bit_generator.state))

    def restore(self, snap) -> None:
        version, state, done, steps, rng_state = snap
        if version != SNAPSHOT_VERSION:
            raise EnvError(f"unsupported snapshot version {version}")
        self.state, self.done, self.steps = state, done, steps
        self._rng.bit_generator.state = rng_state


def chain_mdp(n_states: int = 5, slip: float = 0.1, step_cost: float = 0.01,
              with_noop: bool = False) -> TabularMDP:
    """Corridor from state 0 to a rewarding terminal at the right end.

    Actions are left (0), right (1) and optionally stay (2). With probability
    ``slip`` a move goes the opposite way. Entering the terminal pays 1,
    every other step costs ``step_cost``.
    """
    n_a = 3 if with_noop else 2
    P = np.zeros((n_states, n_a, n_states))
    goal = n_states - 1
    for s in range(n_states):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        left, right = max(s - 1, 0), s + 1
        P[s, 0, left] += 1 - slip
        P[s, 0, right] += slip
        P[s, 1, right] += 1 - slip
        P[s, 1, left] += slip
        if with_noop:
            P[s, 2, s] = 1.0
    R = np.full((n_states, n_a, n_states), -step_cost)
    R[:, :, goal] = 1.0
    R[goal] = 0.0
    terminal = np.zeros(n_states, dtype=bool)
    terminal[goal] = True
    start = np.zeros(n_states)
    start[0] = 1.0
    return TabularMDP(P, R, terminal, start)


GRID_MOVES = [(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)]  # stay, up, down, left, right


def gridworld_mdp(width: int = 5, height: int = 5, slip: float = 0.2,
                  step_cost: float = 0.01) -> TabularMDP:
    """Grid from the top-left corner to a terminal goal in the bottom-right.

    Action 0 stays put. A move is replaced by a uniformly random move with
    probability ``slip``; bumping a wall leaves the agent in place.
    """
    n = width * height
    goal = n - 1

    def target(s, move):
        x, y = s % width, s // width
        dx, dy = GRID_MOVES[move]
        nx, ny = min(max(x + dx, 0), width - 1), min(max(y + dy, 0), height - 1)
        return ny * width + nx

    P = np.zeros((n, 5, n))
    for s in range(n):
        if s == goal:
            P[s, :, s] = 1.0
            continue
        P[s, 0, s] = 1.0
        for a in range(1, 5):
            P[s, a, target(s, a)] += 1 - slip
            for m in range(1, 5):
                P[s, a, target(s, m)] += slip / 4
    R = np.full((n, 5, n), -step_cost)
    R[:, :, goal] = 1.0
    R[goal] = 0.0
    terminal = np.zeros(n, dtype=bool)
    terminal[goal] = True
    start = np.zeros(n)
    start[0] = 1.0
    return TabularMDP(P, R, terminal, start)


def make_env(name: str, seed: int | None = None, **kw) -> TabularEnv:
    if name == "chain":
        noop = kw.pop("with_noop", True)
        return TabularEnv(chain_mdp(with_noop=noop, **kw), seed, name="chain",
                          null_action=2 if noop else None)
    if name == "gridworld":
        return TabularEnv(gridworld_mdp(**kw), seed, name="gridworld", null_action=0)
    raise ValueError(f"unknown environment {name!r}")


def value_iteration(mdp, gamma: float, tol: float = 1e-10, max_iter: int = 1_000_000) -> np.ndarray:
    """Q* table with sup-norm Bellman residual below ``tol``.

    Terminal states are absorbing with value 0.
    """
    if isinstance(mdp, TabularEnv):
        mdp = mdp.mdp
    if not isinstance(mdp, TabularMDP):
        raise UnsupportedEnv("value iteration needs a tabular MDP")
    r = mdp.expected_reward()
    live = ~mdp.terminal
    q = np.zeros((mdp.n_states, mdp.n_actions))
    for _ in range(max_iter):
        q_next = r + gamma * mdp.P @ np.where(live, q.max(axis=1), 0.0)
        q_next[mdp.terminal] = 0.0
        residual = np.max(np.abs(q_next - q))
        q = q_next
        if residual < tol:
            return q
    raise RuntimeError("value iteration did not converge")


def bellman_residual(mdp: TabularMDP, q: np.ndarray, gamma: float) -> float:
    v = np.where(mdp.terminal, 0.0, q.max(axis=1))
    backup = mdp.expected_reward() + gamma * mdp.P @ v
    backup[mdp.terminal] = 0.0
    return float(np.max(np.abs(backup - q)))


def q_table_policy(q: np.ndarray) -> Callable[[np.ndarray], int]:
    """Greedy policy on a Q table for one-hot (possibly stacked) observations."""
    n_states = q.shape[0]

    def policy(obs):
        return int(np.argmax(q[int(np.argmax(obs[-n_states:]))]))

    return policy


# --- observation stacking ----------------------------------------------------


class ObservationStacker:
    """Sliding window over the last ``k`` observations, zero-padded at the start."""

    def __init__(self, k: int, obs_dim: int):
        if k < 1:
            raise ValueError("window must be >= 1")
        self.k = k
        self.obs_dim = obs_dim
        self.reset()

    def reset(self) -> None:
        self.buffer = np.zeros((self.k, self.obs_dim))

    def push(self, obs) -> np.ndarray:
        self.buffer = np.roll(self.buffer, -1, axis=0)
        self.buffer[-1] = obs
        return self.buffer.ravel().copy()

    @property
    def output_dim(self) -> int:
        return self.k * self.obs_dim


def stack(stacker: ObservationStacker, obs) -> np.ndarray:
    return stacker.push(obs)


class StackedEnv(Environment):
    """Wraps an environment so observations are windows of ``k`` frames."""

    def __init__(self, env: Environment, k: int):
        self.env = env
        self.k = k
        self.stacker = ObservationStacker(k, env.observation_dim)
        self.name = env.name
        self.action_count = env.action_count
        self.observation_dim = self.stacker.output_dim
        self.null_action = env.null_action
        self.deterministic = env.deterministic

    def reset(self, seed=None):
        self.stacker.reset()
        return self.stacker.push(self.env.reset(seed))

    def step(self, action):
        obs, reward, terminal = self.env.step(action)
        return self.stacker.push(obs), reward, terminal

    def snapshot(self):
        return (self.env.snapshot(), self.stacker.buffer.copy())

    def restore(self, snap):
        inner, buf = snap
        self.env.restore(inner)
        self.stacker.buffer = buf.copy()


# --- rollouts and trajectories -------------------------------------------------

StartFn = Callable[[Environment, np.random.Generator], tuple[np.ndarray, int, bool]]


def rollout(env: Environment, policy: Callable[[np.ndarray, np.random.Generator], int],
            rng: np.random.Generator, cap: int, start: StartFn | None = None,
            seed: int | None = None) -> float:
    """Score of one episode played by ``policy`` after an optional injected start.

    ``start`` returns ``(obs, steps_already_used, done)``; those steps count
    toward ``cap`` but their rewards do not count toward the score.
    """
    if start is None:
        obs, used, done = env.reset(seed), 0, False
    else:
        obs, used, done = start(env, rng)
    score = 0.0
    while not done and used < cap:
        obs, reward, done = env.step(policy(obs, rng))
        score += reward
        used += 1
    return score


def uniform_policy(n_actions: int):
    def policy(obs, rng):
        return int(rng.integers(n_actions))

    return policy


def random_agent_rollout(env: Environment, rng: np.random.Generator, cap: int,
                         start: StartFn | None = None, seed: int | None = None) -> float:
    """One decision per step, uniformly over the action set."""
    return rollout(env, uniform_policy(env.action_count), rng, cap, start, seed)


@dataclass
class Trajectory:
    env_name: str
    seed: int
    k: int
    actions: list[int]
    rewards: list[float]
    terminals: list[bool]

    def __len__(self):
        return len(self.actions)


def save_trajectory(path: str | Path, traj: Trajectory) -> None:
    name = traj.env_name.encode("utf-8")
    out = bytearray(TRAJECTORY_MAGIC)
    out += struct.pack("<IH", TRAJECTORY_VERSION, len(name)) + name
    out += struct.pack("<QIQ", traj.seed, traj.k, len(traj))
    for a, r, t in zip(traj.actions, traj.rewards, traj.terminals):
        out += struct.pack("<IdB", a, r, int(t))
    Path(path).write_bytes(bytes(out))


def load_trajectory(path: str | Path) -> Trajectory:
    data = Path(path).read_bytes()
    if data[:4] != TRAJECTORY_MAGIC:
        raise FixtureError("not a trajectory file")
    try:
        version, name_len = struct.unpack_from("<IH", data, 4)
        if version != TRAJECTORY_VERSION:
            raise FixtureError(f"unsupported trajectory version {version}")
        pos = 10
        name = data[pos:pos + name_len].decode("utf-8")
        pos += name_len
        seed, k, n = struct.unpack_from("<QIQ", data, pos)
        pos += 20
        rec = struct.Struct("<IdB")
        actions, rewards, terminals = [], [], []
        for _ in range(n):
            a, r, t = rec.unpack_from(data, pos)
            pos += rec.size
            actions.append(a)
            rewards.append(r)
            terminals.append(bool(t))
    except struct.error as exc:
        raise FixtureError(f"truncated trajectory file: {exc}") from None
    return Trajectory(name, seed, k, actions, rewards, terminals)


def record_trajectory(env: Environment, policy: Callable[[np.ndarray], int], seed: int,
                      max_steps: int, k: int = 1) -> Trajectory:
    """Play ``policy`` from ``reset(seed)`` and record the decisions it makes."""
    obs = env.reset(seed)
    actions, rewards, terminals = [], [], []
    for _ in range(max_steps):
        a = policy(obs)
        obs, r, done = env.step(a)
        actions.append(a)
        rewards.append(r)
        terminals.append(done)
        if done:
            break
    return Trajectory(env.name, seed, k, actions, rewards, terminals)


def replay_prefix(env: Environment, traj: Trajectory, n_steps: int) -> tuple[np.ndarray, float, bool]:
    """Reset to the recorded seed and replay the first ``n_steps`` decisions.

    Returns the observation at the hand-off point, the reward collected in
    the prefix and whether the episode already ended.
    """
    if traj.env_name != env.name:
        raise FixtureError(f"trajectory recorded on {traj.env_name!r}, env is {env.name!r}")
    if n_steps > len(traj):
        raise FixtureError(f"trajectory has only {len(traj)} steps")
    obs = env.reset(traj.seed)
    total = 0.0
    done = False
    for i in range(n_steps):
        obs, r, done = env.step(traj.actions[i])
        if r != traj.rewards[i] or done != traj.terminals[i]:
            raise FixtureError(f"trajectory diverges from environment at step {i}")
        total += r
    return obs, total, done
