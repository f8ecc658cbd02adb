"""Learning loop: DQN minibatch gradients, outlier rejection, target-network sync."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

from .nn import QNetwork
from .replay import ReplayNotReady
from .rl import minibatch_loss_gradient


class StepOutcome(Enum):
    PUSHED = "pushed"
    REJECTED_OUTLIER = "rejected_outlier"
    REPLAY_NOT_READY = "replay_not_ready"


@dataclass(frozen=True)
class LossStats:
    """Exponential moving mean and variance of the minibatch loss."""

    mean: float = 0.0
    var: float = 0.0
    count: int = 0
    decay: float = 0.999
    k_sigma: float = 3.0
    warmup: int = 100

    @property
    def std(self) -> float:
        return math.sqrt(self.var)

    @property
    def active(self) -> bool:
        return self.count >= self.warmup

    @property
    def threshold(self) -> float:
        return self.mean + self.k_sigma * self.std


def update_loss_stats(stats: LossStats, abs_loss: float) -> LossStats:
    if abs_loss < 0:
        raise ValueError("loss magnitude must be non-negative")
    if stats.count == 0:
        return dataclasses.replace(stats, mean=abs_loss, var=0.0, count=1)
    d = stats.decay
    diff = abs_loss - stats.mean
    mean = stats.mean + (1 - d) * diff
    var = d * (stats.var + (1 - d) * diff * diff)
    return dataclasses.replace(stats, mean=mean, var=var, count=stats.count + 1)


def is_outlier(stats: LossStats, loss: float) -> bool:
    return stats.active and abs(loss) > stats.threshold


@dataclass(frozen=True)
class TargetSyncPolicy:
    period: int = 60_000

    def __post_init__(self):
        if self.period < 1:
            raise ValueError("target sync period must be >= 1")


def maybe_sync_target(policy: TargetSyncPolicy, last_sync_version: int, client,
                      target_net: QNetwork, version: int | None = None) -> int | None:
    """Refresh the target network once the server has moved ``period`` versions on.

    A big jump in version still triggers a single refresh. Returns the version
    the target was synced at, or ``None`` when nothing happened. ``version``
    avoids a stats round trip when the caller already knows it.
    """
    if version is None:
        version = client.version()
    if version < last_sync_version + policy.period:
        return None
    flat, fetched = client.fetch()
    target_net.load_flat(flat.astype(target_net.dtype, copy=False))
    return fetched


@dataclass
class StepResult:
    outcome: StepOutcome
    loss: float = float("nan")
    base_version: int = 0
    accepted: bool = False
    version: int = 0
    target_synced: bool = False


@dataclass
class LearnerCounters:
    steps: int = 0
    pushed: int = 0
    rejected: int = 0
    stale: int = 0
    not_ready: int = 0
    target_syncs: int = 0
    losses: list[float] = field(default_factory=list)


class Learner:
    """One learner replica with its current and target networks.

    ``replay`` needs ``sample(batch, rng)`` (and ``__len__`` for the warm-up
    check when it has one); ``client`` needs ``fetch`` and ``push``.
    """

    def __init__(
        self,
        current: QNetwork,
        target: QNetwork,
        replay,
        client,
        rng: np.random.Generator,
        gamma: float,
        batch: int = 32,
        warmup: int = 1000,
        stats: LossStats | None = None,
        reject_outliers: bool = True,
        target_policy: TargetSyncPolicy | None = None,
        sync_period: int = 1,
        on_step: Callable[[StepResult], None] | None = None,
    ):
        self.current = current
        self.target = target
        self.replay = replay
        self.client = client
        self.rng = rng
        self.gamma = gamma
        self.batch = batch
        self.warmup = warmup
        self.stats = stats or LossStats()
        self.reject_outliers = reject_outliers
        self.target_policy = target_policy or TargetSyncPolicy()
        self.sync_period = sync_period
        self.on_step = on_step
        self.counters = LearnerCounters()
        self.base_version = 0
        self.last_target_sync = 0
        self.version = 0
        self._since_sync = None

    def start(self) -> None:
        """Initial sync: theta and theta-minus both take the server's weights."""
        flat, version = self.client.fetch()
        self.current.load_flat(flat.astype(self.current.dtype, copy=False))
        self.target.load_flat(flat.astype(self.target.dtype, copy=False))
        self.base_version = self.version = self.last_target_sync = version
        # forces a fresh sync on the first step that actually samples
        self._since_sync = self.sync_period

    def sync_current(self) -> None:
        flat, self.base_version = self.client.fetch()
        self.current.load_flat(flat.astype(self.current.dtype, copy=False))
        self.version = max(self.version, self.base_version)
        self._since_sync = 0

    def step(self) -> StepResult:
        if self._since_sync is None:
            self.start()
        self.counters.steps += 1
        if hasattr(self.replay, "__len__") and len(self.replay) < max(self.warmup, 1):
            return self._finish(StepResult(StepOutcome.REPLAY_NOT_READY))
        if self._since_sync >= self.sync_period:
            self.sync_current()
        self._since_sync += 1
        try:
            batch = self.replay.sample(self.batch, self.rng)
        except ReplayNotReady:
            return self._finish(StepResult(StepOutcome.REPLAY_NOT_READY))

        grad, loss, _ = minibatch_loss_gradient(batch, self.current, self.target, self.gamma)
        outlier = self.reject_outliers and is_outlier(self.stats, loss)
        # a rejected loss enters the running stats clipped at the threshold so
        # one poisoned batch cannot drag the filter open
        observed = min(loss, self.stats.threshold) if outlier else loss
        self.stats = update_loss_stats(self.stats, observed)
        self.counters.losses.append(loss)
        if outlier:
            self.counters.rejected += 1
            return self._finish(StepResult(StepOutcome.REJECTED_OUTLIER, loss, self.base_version,
                                           version=self.version))

        result = self.client.push(self.base_version, grad.astype(np.float64, copy=False))
        self.counters.pushed += 1
        if not result.accepted:
            self.counters.stale += 1
        self.version = max(self.version, result.version)
        return self._finish(StepResult(StepOutcome.PUSHED, loss, self.base_version,
                                       result.accepted, result.version))

    def _finish(self, res: StepResult) -> StepResult:
        if res.outcome is StepOutcome.REPLAY_NOT_READY:
            self.counters.not_ready += 1
        else:
            synced = maybe_sync_target(self.target_policy, self.last_target_sync, self.client,
                                       self.target, self.version)
            if synced is not None:
                self.last_target_sync = synced
                self.version = max(self.version, synced)
                self.counters.target_syncs += 1
                res.target_synced = True
        if self.on_step is not None:
            self.on_step(res)
        return res


def learner_step(learner: Learner) -> StepResult:
    return learner.step()
