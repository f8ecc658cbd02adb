"""DQN targets, losses, the behaviour policy and its exploration schedule."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .nn import QNetwork, ShapeError


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    actor_id: int = 0
    step: int = 0

    def __post_init__(self):
        self.state = np.asarray(self.state, dtype=np.float64)
        self.next_state = np.asarray(self.next_state, dtype=np.float64)
        if self.state.shape != self.next_state.shape:
            raise ShapeError("state and next_state dimensions differ")
        self.action = int(self.action)
        self.reward = float(self.reward)
        self.terminal = bool(self.terminal)

    def __eq__(self, other):
        if not isinstance(other, Transition):
            return NotImplemented
        return (
            np.array_equal(self.state, other.state)
            and self.action == other.action
            and self.reward == other.reward
            and np.array_equal(self.next_state, other.next_state)
            and self.terminal == other.terminal
            and self.actor_id == other.actor_id
            and self.step == other.step
        )


@dataclass(frozen=True)
class EpsilonSchedule:
    start: float = 1.0
    end: float = 0.1
    horizon: int = 1_000_000

    def __post_init__(self):
        if not 0.0 <= self.end <= self.start <= 1.0:
            raise ValueError("epsilon schedule needs 0 <= end <= start <= 1")
        if self.horizon <= 0:
            raise ValueError("epsilon horizon must be positive")


def check_gamma(gamma: float) -> float:
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"discount {gamma} outside [0, 1]")
    return float(gamma)


def epsilon_at(sched: EpsilonSchedule, global_updates: int) -> float:
    """Linear anneal from ``start`` to ``end`` over ``horizon`` global updates."""
    if global_updates >= sched.horizon:
        return sched.end
    frac = max(global_updates, 0) / sched.horizon
    return sched.start + frac * (sched.end - sched.start)


def bellman_target(t: Transition, target_net: QNetwork, gamma: float) -> float:
    if t.terminal:
        return t.reward
    return t.reward + gamma * float(np.max(target_net.forward(t.next_state)))


def dqn_loss_and_upstream(
    t: Transition, current: QNetwork, target: QNetwork, gamma: float
) -> tuple[float, float, float]:
    """Return ``(loss, upstream, y)`` for one transition.

    ``upstream`` is the residual ``y - Q(s, a)``; moving the parameters along
    ``+upstream * grad Q`` decreases the loss.
    """
    y = bellman_target(t, target, gamma)
    delta = y - float(current.forward(t.state)[t.action])
    return delta * delta, delta, y


def select_action(net: QNetwork, state, epsilon: float, rng: np.random.Generator) -> int:
    """Epsilon-greedy action; ties go to the lowest index.

    Always consumes exactly one uniform draw (plus one integer draw when
    exploring) so streams stay aligned across runs.
    """
    if rng.random() < epsilon:
        return int(rng.integers(net.n_actions))
    return int(np.argmax(net.forward(state)))


def clip_reward(reward: float, bound: float | None) -> float:
    if bound is None:
        return reward
    return float(np.clip(reward, -bound, bound))


def stack_batch(batch: Sequence[Transition]):
    states = np.stack([t.state for t in batch])
    actions = np.array([t.action for t in batch], dtype=np.int64)
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    next_states = np.stack([t.next_state for t in batch])
    terminals = np.array([t.terminal for t in batch], dtype=bool)
    return states, actions, rewards, next_states, terminals


def minibatch_loss_gradient(
    batch: Sequence[Transition], current: QNetwork, target: QNetwork, gamma: float
) -> tuple[np.ndarray, float, np.ndarray]:
    """Gradient of half the mean squared Bellman error, plus the mean loss and targets.

    The returned gradient is ``-mean_i(delta_i * grad Q(s_i, a_i))``, i.e. a
    descent direction for ``params -= lr * grad``.
    """
    states, actions, rewards, next_states, terminals = stack_batch(batch)
    next_q = target.forward_batch(next_states).max(axis=1)
    y = rewards + np.where(terminals, 0.0, gamma * next_q)
    q = current.forward_batch(states)[np.arange(len(batch)), actions]
    delta = y - q
    loss = float(np.mean(delta * delta))
    grad = current.gradient_batch(states, actions, -delta / len(batch))
    return grad, loss, y
