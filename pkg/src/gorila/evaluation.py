"""Evaluation protocols, baseline-normalized scores and the normalized score tables."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .envs import Environment, Trajectory, replay_prefix, rollout, uniform_policy
from .nn import QNetwork

NULL_OP = "null_op"
HUMAN_STARTS = "human_starts"

# report flags
HUMAN_BELOW_RANDOM = "human_below_random"
DQN_BELOW_RANDOM = "dqn_below_random"
RANDOM_ZEROED = "random_zeroed"
DQN_NORMALIZED_UNDEFINED = "dqn_normalized_undefined"
HUMAN_NORMALIZED_UNDEFINED = "human_normalized_undefined"

RAW_COLUMNS = ("game", "random", "human", "dqn", "gorila")
REPORT_COLUMNS = ("game", "dqn_human_normalized", "gorila_human_normalized",
                  "gorila_dqn_normalized", "marker")


class UndefinedBaselineError(ValueError):
    """The two reference scores coincide, so the normalized score has no scale."""


class SchemaError(ValueError):
    pass


def normalize(agent: float, random: float, human: float) -> float:
    """Score on a scale where random play is 0 and the human reference is 100."""
    if human == random:
        raise UndefinedBaselineError(f"human and random scores are both {human}")
    return 100.0 * (agent - random) / (human - random)


def dqn_normalize(gorila: float, random: float, dqn: float,
                  zero_random_fallback: bool = False) -> float:
    """Score relative to a reference agent: random is 0, the reference is 100.

    With ``zero_random_fallback`` a reference at or below the random score is
    measured against a random score of 0 instead; if the reference is still
    not positive the value is undefined.
    """
    if zero_random_fallback and dqn <= random:
        random = 0.0
        if dqn <= 0.0:
            raise UndefinedBaselineError(f"reference score {dqn} is not above 0")
    if dqn == random:
        raise UndefinedBaselineError(f"reference and random scores are both {dqn}")
    return 100.0 * (gorila - random) / (dqn - random)


# --- protocols ---------------------------------------------------------------


@dataclass
class EvalProtocol:
    kind: str = NULL_OP
    episodes: int = 30
    start_points: int = 100
    null_op_cap: int = 1000
    human_starts_cap: int = 3000
    max_initial_null_ops: int = 30

    def __post_init__(self):
        if self.kind not in (NULL_OP, HUMAN_STARTS):
            raise ValueError(f"unknown protocol {self.kind!r}")
        if min(self.null_op_cap, self.human_starts_cap) <= 0:
            raise ValueError("step caps must be positive")
        if self.episodes <= 0 or self.start_points <= 0 or self.max_initial_null_ops < 0:
            raise ValueError("episode counts must be positive")


Policy = Callable[[np.ndarray, np.random.Generator], int]


def greedy_policy(net: QNetwork) -> Policy:
    def policy(obs, rng):
        return int(np.argmax(net.forward(obs)))

    return policy


def as_policy(agent) -> Policy:
    if isinstance(agent, QNetwork):
        return greedy_policy(agent)
    return agent


def null_op_start(max_null_ops: int, episode_seed: int | None = None):
    """Start injector: reset, then a uniform number of do-nothing actions.

    The null-op steps count toward the episode cap but their reward does not
    count toward the agent's score.
    """

    def start(env: Environment, rng: np.random.Generator):
        if env.null_action is None:
            raise ValueError(f"{env.name} has no null action")
        obs = env.reset(episode_seed)
        n = int(rng.integers(0, max_null_ops + 1))
        done = False
        used = 0
        while used < n and not done:
            obs, _, done = env.step(env.null_action)
            used += 1
        return obs, used, done

    return start


def null_op_scores(agent, env: Environment, protocol: EvalProtocol,
                   rng: np.random.Generator) -> list[float]:
    policy = as_policy(agent)
    scores = []
    for _ in range(protocol.episodes):
        seed = int(rng.integers(2**63))
        start = null_op_start(protocol.max_initial_null_ops, seed)
        scores.append(rollout(env, policy, rng, protocol.null_op_cap, start))
    return scores


def eval_null_op(agent, env: Environment, protocol: EvalProtocol,
                 rng: np.random.Generator) -> float:
    return float(np.mean(null_op_scores(agent, env, protocol, rng)))


def valid_start_points(traj: Trajectory) -> int:
    """Number of hand-off positions (0..n) that leave the episode running."""
    for i, term in enumerate(traj.terminals):
        if term:
            return i + 1
    return len(traj) + 1


def human_start(traj: Trajectory, n_steps: int):
    def start(env: Environment, rng: np.random.Generator):
        obs, _, done = replay_prefix(env, traj, n_steps)
        return obs, n_steps, done

    return start


def human_starts_scores(agent, env: Environment, traj: Trajectory, protocol: EvalProtocol,
                        rng: np.random.Generator) -> list[float]:
    policy = as_policy(agent)
    points = rng.integers(0, valid_start_points(traj), size=protocol.start_points)
    return [
        rollout(env, policy, rng, protocol.human_starts_cap, human_start(traj, int(j)))
        for j in points
    ]


def eval_human_starts(agent, env: Environment, traj: Trajectory, protocol: EvalProtocol,
                      rng: np.random.Generator) -> float:
    """Mean post-hand-off score over start points drawn from a recorded trajectory.

    Prefix steps count toward the total cap; prefix reward is ignored.
    """
    return float(np.mean(human_starts_scores(agent, env, traj, protocol, rng)))


def evaluate(agent, env: Environment, protocol: EvalProtocol, seed: int,
             trajectory: Trajectory | None = None) -> float:
    rng = np.random.default_rng(seed)
    if protocol.kind == NULL_OP:
        return eval_null_op(agent, env, protocol, rng)
    if trajectory is None:
        raise ValueError("human starts evaluation needs a recorded trajectory")
    return eval_human_starts(agent, env, trajectory, protocol, rng)


def random_baseline(env: Environment, protocol: EvalProtocol, seed: int,
                    trajectory: Trajectory | None = None) -> float:
    """Uniform random play under the same start states as the agent."""
    return evaluate(uniform_policy(env.action_count), env, protocol, seed, trajectory)


@dataclass
class ScoreRecord:
    agent_score: float
    random_score: float
    human_score: float
    dqn_score: float | None = None

    def human_normalized(self) -> float:
        return normalize(self.agent_score, self.random_score, self.human_score)

    def dqn_normalized(self, zero_random_fallback: bool = True) -> float | None:
        if self.dqn_score is None:
            return None
        return dqn_normalize(self.agent_score, self.random_score, self.dqn_score,
                             zero_random_fallback)


# --- score tables ------------------------------------------------------------


@dataclass
class RawScores:
    game: str
    random: float
    human: float
    dqn: float
    gorila: float


@dataclass
class ReportRow:
    game: str
    dqn_human: float | None
    gorila_human: float | None
    gorila_dqn: float | None
    flags: tuple[str, ...] = field(default_factory=tuple)


def read_raw_scores(source: str | Path | io.TextIOBase) -> list[RawScores]:
    if isinstance(source, (str, Path)):
        with open(source, newline="") as fh:
            return read_raw_scores(fh)
    reader = csv.DictReader(line for line in source if not line.lstrip().startswith("#"))
    missing = [c for c in RAW_COLUMNS if c not in (reader.fieldnames or [])]
    if missing:
        raise SchemaError(f"raw score file lacks columns: {', '.join(missing)}")
    rows = []
    for rec in reader:
        try:
            rows.append(RawScores(rec["game"], float(rec["random"]), float(rec["human"]),
                                  float(rec["dqn"]), float(rec["gorila"])))
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"bad numeric value in row {rec}: {exc}") from None
    return rows


def _human_normalized(agent: float, random: float, human: float, flags: list[str]) -> float | None:
    if human == random:
        flags.append(HUMAN_NORMALIZED_UNDEFINED)
        return None
    if human < random:
        # the published tables keep the sign of (agent - random) in this case
        flags.append(HUMAN_BELOW_RANDOM)
        return 100.0 * (agent - random) / abs(human - random)
    return normalize(agent, random, human)


def report_row(raw: RawScores) -> ReportRow:
    flags: list[str] = []
    dqn_h = _human_normalized(raw.dqn, raw.random, raw.human, flags)
    gor_h = _human_normalized(raw.gorila, raw.random, raw.human, flags)
    if raw.dqn < raw.random:
        flags.append(DQN_BELOW_RANDOM)
    try:
        gor_d = dqn_normalize(raw.gorila, raw.random, raw.dqn, zero_random_fallback=True)
        if raw.dqn <= raw.random:
            flags.append(RANDOM_ZEROED)
    except UndefinedBaselineError:
        gor_d = None
        flags.append(DQN_NORMALIZED_UNDEFINED)
    return ReportRow(raw.game, dqn_h, gor_h, gor_d, tuple(dict.fromkeys(flags)))


def report_tables(raw: Iterable[RawScores] | str | Path) -> list[ReportRow]:
    """Human-normalized and reference-normalized scores for every game row."""
    if isinstance(raw, (str, Path)):
        raw = read_raw_scores(raw)
    return [report_row(r) for r in raw]


def _fmt(v: float | None) -> str:
    return "" if v is None else f"{v:.2f}"


def write_report(rows: Sequence[ReportRow], out: io.TextIOBase) -> None:
    writer = csv.writer(out, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for r in rows:
        writer.writerow([r.game, _fmt(r.dqn_human), _fmt(r.gorila_human), _fmt(r.gorila_dqn),
                         ";".join(r.flags)])


def shipped_raw_scores(protocol: str) -> Path:
    """Path of the bundled raw-score table for ``null_op`` or ``human_starts``."""
    name = {NULL_OP: "raw_null_op.csv", HUMAN_STARTS: "raw_human_starts.csv"}[protocol]
    return Path(str(resources.files("gorila") / "data" / name))
