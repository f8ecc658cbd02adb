"""Acting loop: sync the behaviour network, act epsilon-greedily, store experience."""

from __future__ import annotations

import logging
import threading
from dataclasses import dataclass, field

import numpy as np

from .envs import Environment
from .nn import QNetwork
from .rl import EpsilonSchedule, Transition, clip_reward, epsilon_at, select_action

log = logging.getLogger(__name__)


@dataclass
class ActorConfig:
    actor_id: int = 0
    sync_period_steps: int = 1
    epsilon: EpsilonSchedule = field(default_factory=EpsilonSchedule)
    episode_cap: int = 1000
    env_seed: int | None = None
    reward_clip: float | None = None

    def __post_init__(self):
        if self.sync_period_steps < 1:
            raise ValueError("sync_period_steps must be >= 1")
        if self.episode_cap < 1:
            raise ValueError("episode_cap must be >= 1")


@dataclass
class ActorStats:
    episodes: int = 0
    steps: int = 0
    total_reward: float = 0.0
    fetches: int = 0
    aborted_episodes: int = 0


class Actor:
    """One actor process worth of state, advanced a step at a time.

    ``replay`` is anything with ``insert(transition)``; ``client`` anything
    with ``fetch() -> (flat_params, version)``.
    """

    def __init__(self, cfg: ActorConfig, env: Environment, net: QNetwork, replay, client,
                 rng: np.random.Generator):
        self.cfg = cfg
        self.env = env
        self.net = net
        self.replay = replay
        self.client = client
        self.rng = rng
        self.stats = ActorStats()
        self.version = 0
        self._obs: np.ndarray | None = None
        self._started = False
        self._episode_steps = 0
        self._since_sync = 0
        self._episode_reward = 0.0
        self.episode_returns: list[float] = []

    def sync(self) -> None:
        flat, self.version = self.client.fetch()
        self.net.load_flat(flat.astype(self.net.dtype, copy=False))
        self.stats.fetches += 1
        self._since_sync = 0

    def _begin_episode(self) -> None:
        seed = None if self._started else self.cfg.env_seed
        self._started = True
        self._obs = self.env.reset(seed)
        self._episode_steps = 0
        self._episode_reward = 0.0
        self.sync()

    def _end_episode(self, aborted: bool = False) -> None:
        self.stats.episodes += 1
        if aborted:
            self.stats.aborted_episodes += 1
        else:
            self.episode_returns.append(self._episode_reward)
        self._obs = None

    def step(self) -> Transition | None:
        if self._obs is None:
            self._begin_episode()
        elif self._since_sync >= self.cfg.sync_period_steps:
            self.sync()
        eps = epsilon_at(self.cfg.epsilon, self.version)
        action = select_action(self.net, self._obs, eps, self.rng)
        try:
            next_obs, reward, terminal = self.env.step(action)
        except Exception:
            log.exception("actor %d: environment fault, aborting episode", self.cfg.actor_id)
            self._end_episode(aborted=True)
            return None
        t = Transition(self._obs, action, clip_reward(reward, self.cfg.reward_clip), next_obs,
                       terminal, self.cfg.actor_id, self.stats.steps)
        self.replay.insert(t)
        self.stats.steps += 1
        self.stats.total_reward += reward
        self._episode_reward += reward
        self._episode_steps += 1
        self._since_sync += 1
        self._obs = next_obs
        if terminal or self._episode_steps >= self.cfg.episode_cap:
            self._end_episode()
        return t


def run_actor(cfg: ActorConfig, env: Environment, net: QNetwork, replay, client,
              stop: threading.Event, rng: np.random.Generator,
              max_steps: int | None = None) -> ActorStats:
    """Act until ``stop`` is set or ``max_steps`` transitions have been stored."""
    actor = Actor(cfg, env, net, replay, client, rng)
    while not stop.is_set() and (max_steps is None or actor.stats.steps < max_steps):
        actor.step()
    return actor.stats
