import json

import numpy as np
import pytest

from gorila.config import RunConfig, load_config
from gorila.experiment import (
    METRICS_COLUMNS,
    Bundle,
    RunFailed,
    load_run_trajectory,
    read_metrics,
    run_experiment,
    run_repetitions,
)
from gorila.nn import load_checkpoint

SMALL = dict(env="chain", gamma=0.9, hidden=(16,), steps_per_actor=600, replay_warmup=50,
             replay_capacity=1000, epsilon_horizon=400, target_period=100, eval_period=200,
             eval_episodes=5, eval_start_points=5, eval_null_op_cap=50, episode_cap=50,
             n_param_shards=4, seed=3)


def small(**kw):
    return RunConfig(**{**SMALL, **kw})


def test_empty_run_has_initial_eval_only(tmp_path):
    res = run_experiment(small(steps_per_actor=0), tmp_path)
    assert len(res.rows) == 1 and res.rows[0]["global_version"] == 0
    for name in ("config.txt", "metrics.csv", "eval_report.json", "expert_trajectory.grtj",
                 "checkpoints/best.grla", "checkpoints/final.grla"):
        assert (tmp_path / name).exists(), name
    assert load_config(tmp_path / "config.txt") == small(steps_per_actor=0)


def test_metrics_header(tmp_path):
    run_experiment(small(steps_per_actor=0), tmp_path)
    header = (tmp_path / "metrics.csv").read_text().splitlines()[0]
    assert tuple(header.split(",")) == METRICS_COLUMNS == (
        "wall_clock_s", "global_version", "mean_eval_score", "loss", "rejected_batches",
        "stale_discards")


def _strip_wall(rows):
    return [{k: v for k, v in r.items() if k != "wall_clock_s"} for r in rows]


def test_identical_seeds_identical_metrics(tmp_path):
    a = run_experiment(small(), tmp_path / "a")
    b = run_experiment(small(), tmp_path / "b")
    assert _strip_wall(read_metrics(tmp_path / "a" / "metrics.csv")) == _strip_wall(
        read_metrics(tmp_path / "b" / "metrics.csv"))
    assert a.final_params.values.tobytes() == b.final_params.values.tobytes()
    assert (tmp_path / "a/checkpoints/final.grla").read_bytes() == (
        tmp_path / "b/checkpoints/final.grla").read_bytes()


def test_rows_monotone(tmp_path):
    rows = run_experiment(small(), tmp_path).rows
    assert len(rows) >= 3
    for prev, cur in zip(rows, rows[1:]):
        assert cur["wall_clock_s"] >= prev["wall_clock_s"]
        assert cur["global_version"] >= prev["global_version"]


def test_best_checkpoint_matches_best_row(tmp_path):
    res = run_experiment(small(), tmp_path)
    assert res.best_score == max(r["mean_eval_score"] for r in res.rows)
    best = load_checkpoint(tmp_path / "checkpoints" / "best.grla")
    assert best.values.tobytes() == res.best_params.values.tobytes()
    report = json.loads((tmp_path / "eval_report.json").read_text())
    assert report["agent_score"] == res.best_score


def test_component_crash_writes_failure_record(tmp_path, monkeypatch):
    calls = {"n": 0}
    original = Bundle.step

    def flaky(self):
        calls["n"] += 1
        if calls["n"] == 250:
            raise RuntimeError("replay corrupted")
        return original(self)

    monkeypatch.setattr(Bundle, "step", flaky)
    with pytest.raises(RunFailed):
        run_experiment(small(), tmp_path)
    failure = json.loads((tmp_path / "failure.json").read_text())
    assert failure["component"] == "bundle-0" and "replay corrupted" in failure["error"]
    # partial metrics survive
    assert len(read_metrics(tmp_path / "metrics.csv")) >= 2


def test_threads_mode_bundled(tmp_path):
    res = run_experiment(small(n_actors=2, n_learners=2, serial=False), tmp_path)
    assert [s.steps for s in res.actor_stats] == [600, 600]
    assert res.server_stats["version"] > 0


def test_threads_mode_global_replay(tmp_path):
    cfg = small(n_actors=2, n_learners=1, bundled=False, serial=False, global_replay_shards=3)
    res = run_experiment(cfg, tmp_path)
    store = res.replays[0]
    assert sum(s.steps for s in res.actor_stats) == 1200 == len(store) + store.evicted()
    assert res.server_stats["applied"] == sum(c.pushed - c.stale for c in res.learner_counters)


def test_stop_score_ends_run_early(tmp_path):
    res = run_experiment(small(steps_per_actor=5000, stop_score=-1.0), tmp_path)
    assert res.time_to_stop_score is not None
    assert res.actor_stats[0].steps <= 200


def test_saved_trajectory_loads(tmp_path):
    run_experiment(small(steps_per_actor=0), tmp_path)
    traj = load_run_trajectory(tmp_path)
    assert traj.env_name == "chain" and len(traj) > 0


def test_repetitions_summary(tmp_path):
    summary = run_repetitions(small(steps_per_actor=100), tmp_path, repetitions=2)
    assert [r["seed"] for r in summary["runs"]] == [3, 4]
    assert summary["mean_best_score"] == pytest.approx(
        np.mean([r["best_score"] for r in summary["runs"]]))
    assert (tmp_path / "summary.json").exists()


@pytest.mark.slow
def test_socket_processes_mode(tmp_path):
    res = run_experiment(small(n_actors=2, n_learners=2, serial=False, transport="socket",
                               max_wall_clock_s=60), tmp_path)
    assert [s.steps for s in res.actor_stats] == [600, 600]
    assert res.server_stats["version"] > 0
