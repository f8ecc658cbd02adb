"""Experiment orchestration: wire actors, learners, replay and the parameter server.

Three execution modes share the same components:

* serial: one bundle, in-process transport, actor and learner steps
  interleaved in one thread. Fully deterministic for fixed seeds.
* threads: every bundle (or actor / learner) in its own thread, in-process
  transport.
* processes: every bundle (or actor / learner) in its own OS process talking
  to the server over TCP.
"""

from __future__ import annotations

import csv
import json
import logging
import multiprocessing as mp
import queue
import threading
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .actor import Actor, ActorConfig, ActorStats
from .config import RunConfig, save_config
from .envs import (
    Environment,
    StackedEnv,
    TabularEnv,
    Trajectory,
    load_trajectory,
    make_env,
    q_table_policy,
    record_trajectory,
    save_trajectory,
    value_iteration,
)
from .evaluation import (
    EvalProtocol,
    ScoreRecord,
    UndefinedBaselineError,
    evaluate,
    greedy_policy,
    random_baseline,
)
from .learner import Learner, LearnerCounters, LossStats, StepOutcome, TargetSyncPolicy
from .nn import ParamVector, QNetwork, save_checkpoint
from .param_server import ParameterServer, ServerClient
from .replay import GlobalReplay, LocalReplay, RemoteReplay, ReplayService
from .rl import EpsilonSchedule
from .transport import ServiceHost, socket_connect, socket_listen

log = logging.getLogger(__name__)

METRICS_COLUMNS = ("wall_clock_s", "global_version", "mean_eval_score", "loss",
                   "rejected_batches", "stale_discards")


class RunFailed(RuntimeError):
    pass


# --- construction helpers ------------------------------------------------------


@dataclass(frozen=True)
class ComponentSeeds:
    env: int
    actor: int
    replay: int


def component_seeds(seed: int, index: int) -> ComponentSeeds:
    """Independent seeds for bundle / component ``index`` of a run."""
    env, actor, replay = np.random.SeedSequence([seed, index]).generate_state(3, dtype=np.uint64)
    return ComponentSeeds(int(env), int(actor), int(replay))


def init_seed(seed: int) -> int:
    return int(np.random.SeedSequence([seed, 2**31]).generate_state(1, dtype=np.uint64)[0])


def build_env(cfg: RunConfig, seed: int | None = None) -> Environment:
    if cfg.env == "chain":
        env = make_env("chain", seed, n_states=cfg.env_size, slip=cfg.env_slip,
                       step_cost=cfg.env_step_cost)
    elif cfg.env == "gridworld":
        env = make_env("gridworld", seed, width=cfg.env_size, height=cfg.env_size,
                       slip=cfg.env_slip, step_cost=cfg.env_step_cost)
    else:
        raise ValueError(f"unknown environment {cfg.env!r}")
    return StackedEnv(env, cfg.stack) if cfg.stack > 1 else env


def tabular_core(env: Environment) -> TabularEnv | None:
    while isinstance(env, StackedEnv):
        env = env.env
    return env if isinstance(env, TabularEnv) else None


def network_sizes(cfg: RunConfig, env: Environment) -> list[int]:
    return [env.observation_dim, *cfg.hidden, env.action_count]


def initial_params(cfg: RunConfig) -> ParamVector:
    env = build_env(cfg)
    return QNetwork(network_sizes(cfg, env), seed=init_seed(cfg.seed)).flatten()


def make_server(cfg: RunConfig, params: ParamVector | None = None, **kw) -> ParameterServer:
    return ParameterServer(params if params is not None else initial_params(cfg),
                           n_shards=cfg.n_param_shards, lr=cfg.lr, eps=cfg.adagrad_eps,
                           max_delay=cfg.max_delay, **kw)


def actor_config(cfg: RunConfig, index: int, env_seed: int) -> ActorConfig:
    return ActorConfig(
        actor_id=index,
        sync_period_steps=cfg.actor_sync_period,
        epsilon=EpsilonSchedule(cfg.epsilon_start, cfg.epsilon_end, cfg.epsilon_horizon),
        episode_cap=cfg.episode_cap,
        env_seed=env_seed,
        reward_clip=cfg.reward_clip,
    )


def build_actor(cfg: RunConfig, index: int, replay, client) -> Actor:
    seeds = component_seeds(cfg.seed, index)
    env = build_env(cfg, seeds.env)
    net = QNetwork(network_sizes(cfg, env), params=initial_params(cfg), dtype=cfg.dtype)
    return Actor(actor_config(cfg, index, seeds.env), env, net, replay, client,
                 np.random.default_rng(seeds.actor))


def build_learner(cfg: RunConfig, index: int, replay, client, on_step=None) -> Learner:
    seeds = component_seeds(cfg.seed, index)
    sizes = network_sizes(cfg, build_env(cfg))
    return Learner(
        QNetwork(sizes, params=initial_params(cfg), dtype=cfg.dtype),
        QNetwork(sizes, params=initial_params(cfg), dtype=cfg.dtype),
        replay,
        client,
        np.random.default_rng(seeds.replay),
        gamma=cfg.gamma,
        batch=cfg.batch_size,
        warmup=cfg.replay_warmup,
        stats=LossStats(decay=cfg.loss_decay, k_sigma=cfg.k_sigma, warmup=cfg.loss_warmup),
        reject_outliers=cfg.reject_outliers,
        target_policy=TargetSyncPolicy(cfg.target_period),
        sync_period=cfg.learner_sync_period,
        on_step=on_step,
    )


class Bundle:
    """Actor, local replay and learner with the per-step ordering of the serial loop."""

    def __init__(self, cfg: RunConfig, index: int, connect: Callable[[], ServerClient],
                 on_step=None):
        self.index = index
        self.replay = LocalReplay(cfg.replay_capacity)
        self.actor = build_actor(cfg, index, self.replay, connect())
        self.learner = build_learner(cfg, index, self.replay, connect(), on_step)

    def step(self):
        self.actor.step()
        return self.learner.step()


# --- metrics -------------------------------------------------------------------


class MetricsAccumulator:
    """Collects learner step results from any number of threads."""

    def __init__(self):
        self._lock = threading.Lock()
        self.loss_sum = 0.0
        self.loss_n = 0
        self.rejected = 0

    def on_step(self, res) -> None:
        if res.outcome is StepOutcome.REPLAY_NOT_READY:
            return
        with self._lock:
            self.loss_sum += res.loss
            self.loss_n += 1
            if res.outcome is StepOutcome.REJECTED_OUTLIER:
                self.rejected += 1

    def add(self, loss_sum: float, loss_n: int, rejected: int) -> None:
        with self._lock:
            self.loss_sum += loss_sum
            self.loss_n += loss_n
            self.rejected += rejected

    def drain(self) -> tuple[float, int]:
        """Mean loss since the last drain and the cumulative rejected count."""
        with self._lock:
            mean = self.loss_sum / self.loss_n if self.loss_n else float("nan")
            self.loss_sum, self.loss_n = 0.0, 0
            return mean, self.rejected


class _ProcessReporter:
    """``on_step`` hook for worker processes: batches metrics onto a queue."""

    def __init__(self, q, every: int = 50):
        self.q = q
        self.every = every
        self.acc = MetricsAccumulator()
        self.n = 0
        self._sent_rejected = 0

    def on_step(self, res) -> None:
        self.acc.on_step(res)
        self.n += 1
        if self.n % self.every == 0:
            self.flush()

    def flush(self) -> None:
        with self.acc._lock:
            loss_sum, loss_n, rejected = self.acc.loss_sum, self.acc.loss_n, self.acc.rejected
            self.acc.loss_sum, self.acc.loss_n = 0.0, 0
        self.q.put(("metrics", loss_sum, loss_n, rejected - self._sent_rejected))
        self._sent_rejected = rejected


class MetricsWriter:
    def __init__(self, path: Path):
        self.path = path
        self.rows: list[dict] = []
        with open(path, "w", newline="") as fh:
            csv.writer(fh).writerow(METRICS_COLUMNS)

    def write(self, row: dict) -> None:
        self.rows.append(row)
        with open(self.path, "a", newline="") as fh:
            csv.writer(fh).writerow([_cell(row[c]) for c in METRICS_COLUMNS])


def _cell(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 6)) if np.isfinite(v) else "nan"
    return str(v)


def read_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --- evaluation during training ------------------------------------------------


class Evaluator:
    def __init__(self, cfg: RunConfig, trajectory: Trajectory | None):
        self.cfg = cfg
        self.env = build_env(cfg, None)
        self.sizes = network_sizes(cfg, self.env)
        self.trajectory = trajectory
        self.protocol = EvalProtocol(
            kind=cfg.eval_protocol,
            episodes=cfg.eval_episodes,
            start_points=cfg.eval_start_points,
            null_op_cap=cfg.eval_null_op_cap,
            human_starts_cap=cfg.eval_human_starts_cap,
            max_initial_null_ops=cfg.eval_max_null_ops,
        )
        self._net = QNetwork(self.sizes)

    def score(self, params: ParamVector) -> float:
        self._net.sync_from(params)
        return evaluate(self._net, self.env, self.protocol, self.cfg.eval_seed, self.trajectory)

    def score_policy(self, policy) -> float:
        return evaluate(policy, self.env, self.protocol, self.cfg.eval_seed, self.trajectory)


def expert_policy(cfg: RunConfig, env: Environment):
    core = tabular_core(env)
    if core is None:
        return None
    return q_table_policy(value_iteration(core.mdp, cfg.gamma, tol=1e-10))


def record_expert(cfg: RunConfig, seed: int = 0, max_steps: int | None = None) -> Trajectory:
    """Near-optimal demonstration (greedy on Q*) standing in for a human expert."""
    env = build_env(cfg, None)
    policy = expert_policy(cfg, env)
    if policy is None:
        raise ValueError("expert trajectories need a tabular environment")
    return record_trajectory(env, policy, seed, max_steps or cfg.eval_human_starts_cap,
                             cfg.stack)


# --- the run -------------------------------------------------------------------


@dataclass
class RunResult:
    run_dir: Path
    rows: list[dict]
    final_params: ParamVector
    best_params: ParamVector
    best_score: float
    best_version: int
    server_stats: dict
    actor_stats: list[ActorStats] = field(default_factory=list)
    learner_counters: list[LearnerCounters] = field(default_factory=list)
    time_to_stop_score: float | None = None
    wall_clock_s: float = 0.0
    bundles: list[Bundle] = field(default_factory=list)
    replays: list = field(default_factory=list)


class _Run:
    def __init__(self, cfg: RunConfig, out_dir: Path):
        self.cfg = cfg
        self.out = out_dir
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.txt")
        self.metrics = MetricsWriter(out_dir / "metrics.csv")
        self.acc = MetricsAccumulator()
        self.server = make_server(cfg)
        self.trajectory = None
        if tabular_core(build_env(cfg)) is not None:
            self.trajectory = record_expert(cfg)
            save_trajectory(out_dir / "expert_trajectory.grtj", self.trajectory)
        self.evaluator = Evaluator(cfg, self.trajectory)
        self.next_eval = 0
        self.best_score = -np.inf
        self.best_params: ParamVector | None = None
        self.best_version = 0
        self.time_to_stop_score: float | None = None
        self.stop = threading.Event()
        self.t0 = time.monotonic()

    def elapsed(self) -> float:
        return time.monotonic() - self.t0

    def maybe_evaluate(self, force: bool = False) -> None:
        version = self.server.version
        if not force and version < self.next_eval:
            return
        params, version = self.server.snapshot()
        score = self.evaluator.score(params)
        loss, rejected = self.acc.drain()
        stats = self.server.stats()
        last = self.metrics.rows[-1] if self.metrics.rows else None
        wall = self.elapsed()
        if last is not None:
            wall = max(wall, last["wall_clock_s"])
            version = max(version, last["global_version"])
        self.metrics.write({
            "wall_clock_s": wall,
            "global_version": version,
            "mean_eval_score": score,
            "loss": loss,
            "rejected_batches": rejected,
            "stale_discards": stats.discarded_stale,
        })
        if score > self.best_score:
            self.best_score, self.best_params, self.best_version = score, params, version
            save_checkpoint(self.out / "checkpoints" / "best.grla", params)
        if (self.cfg.stop_score is not None and score >= self.cfg.stop_score
                and self.time_to_stop_score is None):
            self.time_to_stop_score = wall
            self.stop.set()
        while self.next_eval <= version:
            self.next_eval += self.cfg.eval_period

    def out_of_time(self) -> bool:
        return self.cfg.max_wall_clock_s is not None and self.elapsed() >= self.cfg.max_wall_clock_s

    def fail(self, component: str, error: str) -> None:
        (self.out / "failure.json").write_text(json.dumps(
            {"component": component, "error": error, "wall_clock_s": self.elapsed(),
             "global_version": self.server.version}, indent=2))
        raise RunFailed(f"{component} failed:\n{error}")

    def finish(self, **extra) -> RunResult:
        if self.metrics.rows and self.metrics.rows[-1]["global_version"] != self.server.version:
            self.maybe_evaluate(force=True)
        final, _ = self.server.snapshot()
        save_checkpoint(self.out / "checkpoints" / "final.grla", final)
        self.write_report()
        return RunResult(
            run_dir=self.out,
            rows=self.metrics.rows,
            final_params=final,
            best_params=self.best_params,
            best_score=float(self.best_score),
            best_version=self.best_version,
            server_stats=self.server.stats().as_dict(),
            time_to_stop_score=self.time_to_stop_score,
            wall_clock_s=self.elapsed(),
            **extra,
        )

    def write_report(self) -> None:
        ev = self.evaluator
        rnd = random_baseline(ev.env, ev.protocol, self.cfg.eval_seed, self.trajectory)
        expert = expert_policy(self.cfg, ev.env)
        human = ev.score_policy(lambda obs, rng: expert(obs)) if expert else None
        report = {"protocol": self.cfg.eval_protocol, "agent_score": self.best_score,
                  "best_version": self.best_version, "random_score": rnd,
                  "human_score": human, "human_normalized": None}
        if human is not None:
            try:
                report["human_normalized"] = ScoreRecord(self.best_score, rnd, human).human_normalized()
            except UndefinedBaselineError:
                pass
        (self.out / "eval_report.json").write_text(json.dumps(report, indent=2))


def run_experiment(cfg: RunConfig, out_dir: str | Path) -> RunResult:
    """Train according to ``cfg`` and write the run directory.

    The directory holds ``config.txt``, ``metrics.csv``, ``checkpoints/``
    (best-by-evaluation and final), ``eval_report.json`` and, for tabular
    environments, the expert trajectory used by human-starts evaluation.
    """
    cfg.validate()
    run = _Run(cfg, Path(out_dir))
    run.maybe_evaluate(force=True)
    if cfg.steps_per_actor == 0:
        return run.finish()
    if cfg.transport == "socket":
        return _run_processes(run)
    if cfg.serial and cfg.bundled and cfg.n_bundles == 1:
        return _run_serial(run)
    return _run_threads(run)


def _in_process_client(host: ServiceHost) -> ServerClient:
    return ServerClient(host.connect_in_process())


def _run_serial(run: _Run) -> RunResult:
    host = ServiceHost(run.server.handle)
    bundle = Bundle(run.cfg, 0, lambda: _in_process_client(host), run.acc.on_step)
    for _ in range(run.cfg.steps_per_actor):
        try:
            bundle.step()
        except Exception:
            run.fail("bundle-0", traceback.format_exc())
        run.maybe_evaluate()
        if run.stop.is_set() or run.out_of_time():
            break
    return run.finish(actor_stats=[bundle.actor.stats], learner_counters=[bundle.learner.counters],
                      bundles=[bundle], replays=[bundle.replay])


def _supervise(run: _Run, alive: Callable[[], bool], errors: queue.Queue, poll: float = 0.005):
    while alive():
        try:
            component, err = errors.get_nowait()
        except queue.Empty:
            pass
        else:
            run.stop.set()
            run.fail(component, err)
        run.maybe_evaluate()
        if run.out_of_time():
            run.stop.set()
        time.sleep(poll)
    if not errors.empty():
        component, err = errors.get_nowait()
        run.fail(component, err)


def _run_threads(run: _Run) -> RunResult:
    cfg = run.cfg
    host = ServiceHost(run.server.handle)
    errors: queue.Queue = queue.Queue()
    actors_done = threading.Event()

    def guarded(name, fn):
        def target():
            try:
                fn()
            except Exception:
                errors.put((name, traceback.format_exc()))
        return threading.Thread(target=target, name=name, daemon=True)

    threads: list[threading.Thread] = []
    bundles: list[Bundle] = []
    actors: list[Actor] = []
    learners: list[Learner] = []
    replays: list = []

    if cfg.bundled:
        for i in range(cfg.n_bundles):
            b = Bundle(cfg, i, lambda: _in_process_client(host), run.acc.on_step)
            bundles.append(b)
            replays.append(b.replay)

            def loop(b=b):
                while not run.stop.is_set() and b.actor.stats.steps < cfg.steps_per_actor:
                    b.step()
            threads.append(guarded(f"bundle-{i}", loop))
    else:
        store = GlobalReplay(cfg.global_replay_shards,
                             max(1, cfg.replay_capacity // cfg.global_replay_shards))
        replays.append(store)
        for i in range(cfg.n_actors):
            a = build_actor(cfg, i, store, _in_process_client(host))
            actors.append(a)

            def act(a=a):
                while not run.stop.is_set() and a.stats.steps < cfg.steps_per_actor:
                    a.step()
            threads.append(guarded(f"actor-{i}", act))
        for j in range(cfg.n_learners):
            lrn = build_learner(cfg, cfg.n_actors + j, store, _in_process_client(host),
                                run.acc.on_step)
            learners.append(lrn)

            def learn(lrn=lrn):
                while not run.stop.is_set() and not actors_done.is_set():
                    lrn.step()
            threads.append(guarded(f"learner-{j}", learn))

    for t in threads:
        t.start()
    actor_threads = [t for t in threads if not t.name.startswith("learner")]

    def alive():
        if not any(t.is_alive() for t in actor_threads):
            actors_done.set()
        return any(t.is_alive() for t in threads)

    _supervise(run, alive, errors)
    if bundles:
        actors = [b.actor for b in bundles]
        learners = [b.learner for b in bundles]
    return run.finish(actor_stats=[a.stats for a in actors],
                      learner_counters=[lr.counters for lr in learners],
                      bundles=bundles, replays=replays)


# --- multi-process mode ----------------------------------------------------------


def _connector(address):
    def connect():
        return socket_connect(address)
    return connect


def _worker(role: str, cfg: RunConfig, index: int, server_addr, replay_addr, stop, q) -> None:
    try:
        connect = _connector(server_addr)
        reporter = _ProcessReporter(q)

        def client():
            return ServerClient(connect(), reconnect=connect)

        if role == "bundle":
            b = Bundle(cfg, index, client, reporter.on_step)
            while not stop.is_set() and b.actor.stats.steps < cfg.steps_per_actor:
                b.step()
            summary = {"actor": b.actor.stats.__dict__, "learner": _counters(b.learner.counters)}
        elif role == "actor":
            rconnect = _connector(replay_addr)
            a = build_actor(cfg, index, RemoteReplay(rconnect(), rconnect), client())
            while not stop.is_set() and a.stats.steps < cfg.steps_per_actor:
                a.step()
            summary = {"actor": a.stats.__dict__}
        else:
            rconnect = _connector(replay_addr)
            lrn = build_learner(cfg, index, RemoteReplay(rconnect(), rconnect), client(),
                                reporter.on_step)
            while not stop.is_set():
                lrn.step()
            summary = {"learner": _counters(lrn.counters)}
        reporter.flush()
        q.put(("done", role, index, summary))
    except Exception:
        q.put(("error", role, index, traceback.format_exc()))


def _counters(c: LearnerCounters) -> dict:
    d = dict(c.__dict__)
    d.pop("losses")
    return d


def _run_processes(run: _Run) -> RunResult:
    cfg = run.cfg
    ctx = mp.get_context("fork")
    q = ctx.Queue()
    stop = ctx.Event()
    listener = socket_listen()
    server_addr = listener.address
    replay_listener = None
    replay_addr = None
    if not cfg.bundled:
        replay_listener = socket_listen()
        replay_addr = replay_listener.address

    roles = ([("bundle", i) for i in range(cfg.n_bundles)] if cfg.bundled else
             [("actor", i) for i in range(cfg.n_actors)]
             + [("learner", cfg.n_actors + j) for j in range(cfg.n_learners)])
    # fork before any server thread exists
    procs = {}
    for role, idx in roles:
        p = ctx.Process(target=_worker, args=(role, cfg, idx, server_addr, replay_addr, stop, q),
                        daemon=True)
        p.start()
        procs[(role, idx)] = p

    host = ServiceHost(run.server.handle)
    host.serve(listener)
    store = None
    if replay_listener is not None:
        store = GlobalReplay(cfg.global_replay_shards,
                             max(1, cfg.replay_capacity // cfg.global_replay_shards))
        rhost = ServiceHost(ReplayService(store, seed=cfg.seed, warmup=cfg.replay_warmup).handle)
        rhost.serve(replay_listener)

    summaries: dict = {}
    errors: queue.Queue = queue.Queue()
    pending = set(procs)

    def drain():
        while True:
            try:
                item = q.get_nowait()
            except queue.Empty:
                return
            if item[0] == "metrics":
                run.acc.add(*item[1:])
            elif item[0] == "done":
                summaries[(item[1], item[2])] = item[3]
                pending.discard((item[1], item[2]))
            else:
                pending.discard((item[1], item[2]))
                errors.put((f"{item[1]}-{item[2]}", item[3]))

    def alive():
        drain()
        actors_left = [k for k in pending if k[0] != "learner"]
        if not actors_left:
            stop.set()
        if run.stop.is_set():
            stop.set()
        for key, p in procs.items():
            if key in pending and not p.is_alive() and p.exitcode not in (0, None):
                pending.discard(key)
                errors.put((f"{key[0]}-{key[1]}", f"process exited with code {p.exitcode}"))
        return bool(pending)

    try:
        _supervise(run, alive, errors)
    finally:
        stop.set()
        for p in procs.values():
            p.join(timeout=5)
            if p.is_alive():
                p.terminate()
        host.close()
    drain()
    actor_stats = [ActorStats(**s["actor"]) for k, s in sorted(summaries.items()) if "actor" in s]
    learner_counters = [LearnerCounters(**s["learner"]) for k, s in sorted(summaries.items())
                        if "learner" in s]
    return run.finish(actor_stats=actor_stats, learner_counters=learner_counters,
                      replays=[store] if store is not None else [])


def run_repetitions(cfg: RunConfig, out_dir: str | Path, repetitions: int | None = None) -> dict:
    """Independent runs with consecutive seeds; mean of their best evaluations."""
    out = Path(out_dir)
    n = repetitions or cfg.repetitions
    results = []
    for k in range(n):
        res = run_experiment(cfg.replace(seed=cfg.seed + k), out / f"run_{k}")
        results.append({"seed": cfg.seed + k, "best_score": res.best_score,
                        "best_version": res.best_version, "wall_clock_s": res.wall_clock_s})
    summary = {"runs": results, "mean_best_score": float(np.mean([r["best_score"] for r in results]))}
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    return summary


def load_run_trajectory(run_dir: str | Path) -> Trajectory | None:
    path = Path(run_dir) / "expert_trajectory.grtj"
    return load_trajectory(path) if path.exists() else None


__all__ = [
    "Bundle",
    "ComponentSeeds",
    "Evaluator",
    "METRICS_COLUMNS",
    "MetricsAccumulator",
    "RunFailed",
    "RunResult",
    "build_actor",
    "build_env",
    "build_learner",
    "component_seeds",
    "greedy_policy",
    "init_seed",
    "initial_params",
    "make_server",
    "network_sizes",
    "read_metrics",
    "record_expert",
    "run_experiment",
    "run_repetitions",
]
