"""Run configuration and its versioned ``key = value`` file format.

A config file looks like::

    # comments start with '#'
    config_version = 1
    env = chain
    gamma = 0.9
    hidden = 64, 64
    max_delay = inf

Unknown keys are rejected; missing keys take the defaults below.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Any

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # environment
    env: str = "chain"
    env_size: int = 5
    env_slip: float = 0.1
    env_step_cost: float = 0.01
    episode_cap: int = 1000
    stack: int = 1
    gamma: float = 0.99
    reward_clip: float | None = None

    # topology
    n_actors: int = 1
    n_learners: int = 1
    n_param_shards: int = 31
    bundled: bool = True
    transport: str = "inprocess"
    serial: bool = True

    # replay
    replay_capacity: int = 100_000
    replay_warmup: int = 1000
    global_replay_shards: int = 4

    # acting
    epsilon_start: float = 1.0
    epsilon_end: float = 0.1
    epsilon_horizon: int = 1_000_000
    actor_sync_period: int = 1

    # learning
    hidden: tuple[int, ...] = (64, 64)
    batch_size: int = 32
    lr: float = 0.05
    adagrad_eps: float = 1e-8
    target_period: int = 60_000
    max_delay: int | None = 50
    reject_outliers: bool = True
    k_sigma: float = 3.0
    loss_warmup: int = 100
    loss_decay: float = 0.999
    learner_sync_period: int = 1
    dtype: str = "float64"

    # run control
    seed: int = 0
    steps_per_actor: int = 10_000
    max_wall_clock_s: float | None = None

    # evaluation
    eval_protocol: str = "null_op"
    eval_period: int = 10_000
    eval_episodes: int = 30
    eval_start_points: int = 100
    eval_null_op_cap: int = 1000
    eval_human_starts_cap: int = 3000
    eval_max_null_ops: int = 30
    eval_seed: int = 12345
    stop_score: float | None = None
    repetitions: int = 5

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        self.validate()

    def validate(self) -> None:
        if self.bundled and self.n_actors != self.n_learners:
            raise ConfigError("bundled mode needs one learner per actor (n_actors == n_learners)")
        if self.n_actors < 1 or self.n_learners < 1 or self.n_param_shards < 1:
            raise ConfigError("need at least one actor, learner and parameter shard")
        if self.env not in ("chain", "gridworld"):
            raise ConfigError(f"unknown environment {self.env!r}")
        if self.transport not in ("inprocess", "socket"):
            raise ConfigError(f"unknown transport {self.transport!r}")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")
        if self.max_delay is not None and self.max_delay < 0:
            raise ConfigError("max_delay must be >= 0")
        if self.dtype not in ("float64", "float32"):
            raise ConfigError("dtype must be float64 or float32")
        if self.eval_protocol not in ("null_op", "human_starts"):
            raise ConfigError(f"unknown evaluation protocol {self.eval_protocol!r}")
        for name in ("episode_cap", "stack", "replay_capacity", "batch_size", "target_period",
                     "actor_sync_period", "learner_sync_period", "eval_period", "epsilon_horizon"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.steps_per_actor < 0:
            raise ConfigError("steps_per_actor must be >= 0")

    @property
    def n_bundles(self) -> int:
        return self.n_actors

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_NONE = ("none", "null", "")


def _parse_value(name: str, text: str) -> Any:
    kind = str(_FIELDS[name].type)
    text = text.strip()
    optional = "None" in kind
    if name == "max_delay" and text.lower() in ("inf", "infinity"):
        return None
    if optional and text.lower() in _NONE:
        return None
    try:
        if kind.startswith("bool"):
            if text.lower() in ("true", "yes", "1", "on"):
                return True
            if text.lower() in ("false", "no", "0", "off"):
                return False
            raise ValueError(text)
        if kind.startswith("tuple"):
            return tuple(int(p) for p in text.replace(" ", "").split(",") if p)
        if kind.startswith("int"):
            return int(text.replace("_", ""))
        if kind.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value for {name}: {text!r}") from None
    return text


def parse_config(text: str) -> RunConfig:
    values: dict[str, Any] = {}
    version = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if key == "config_version":
            version = int(value)
            continue
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        values[key] = _parse_value(key, value)
    if version is None:
        raise ConfigError("config_version is missing")
    if version != CONFIG_VERSION:
        raise ConfigError(f"unsupported config_version {version}")
    return RunConfig(**values)


def load_config(path: str | Path) -> RunConfig:
    return parse_config(Path(path).read_text())


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ", ".join(str(v) for v in value)
    if isinstance(value, float) and math.isinf(value):
        return "inf"
    return str(value)


def dump_config(cfg: RunConfig) -> str:
    lines = [f"config_version = {CONFIG_VERSION}"]
    for name in _FIELDS:
        value = getattr(cfg, name)
        if name == "max_delay" and value is None:
            lines.append("max_delay = inf")
        else:
            lines.append(f"{name} = {_format_value(value)}")
    return "\n".join(lines) + "\n"


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dump_config(cfg))
