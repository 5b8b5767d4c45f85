import json

import numpy as np
import pytest

from edgerl.cloud import MetricsSink
from edgerl.config import KEYS, RunConfig, load_config, parse_config_text
from edgerl.ddpg import ActorCritic
from edgerl.experiment import (
    BANDWIDTH_GRID,
    FRICTION_GRID,
    EvalRecord,
    LoadedResults,
    RunResult,
    RunSpec,
    append_result,
    delay_grid,
    evaluate_actor,
    load_pretrained,
    load_results,
    pretrain,
    render_report,
    summarize,
    sweep,
    sweep_specs,
    transfer_run,
)
from edgerl.nn import ACTOR_SPEC, deserialize, serialize

SMALL = RunConfig().with_overrides({"B": 8, "N_c": 16, "N_a": 24, "T_e": 60, "T_g": 40})


@pytest.fixture(scope="module")
def blobs():
    ac = ActorCritic.fresh(SMALL.trainer, np.random.default_rng(0))
    return serialize(ac.actor), serialize(ac.critic)


class TestConfig:
    def test_defaults_match_table(self):
        flat = RunConfig().as_flat()
        expected = {"x_max": 0.34, "alpha_dot_max": 20.0, "d_T": 0.05, "k_f": 10.0, "T_e": 1000, "T_g": 750, "delta": 5.0, "u": 0.1, "v": 20.0, "N_c": 3500, "N_a": 5000, "B": 128}
        assert {k: flat[k] for k in expected} == expected

    def test_parse_with_and_without_header(self):
        text = "N_c = 128\nN_a = 256  # comment\n"
        assert parse_config_text(text) == {"N_c": "128", "N_a": "256"}
        assert parse_config_text("[run]\n" + text) == {"N_c": "128", "N_a": "256"}

    def test_overrides(self):
        cfg = RunConfig().with_overrides({"N_c": "128", "N_a": 128, "x_max": 0.3, "T_e": "500", "T_g": 400})
        assert cfg.trainer.critic_delay == 128 and cfg.trainer.actor_delay == 128
        assert cfg.mdp.x_max == 0.3 and cfg.plant.x_max == 0.3
        assert cfg.edge.max_episode_steps == 500
        assert cfg.as_flat()["N_a"] == 128

    def test_unknown_key(self):
        with pytest.raises(KeyError):
            RunConfig().with_overrides({"bogus": 1})

    def test_invalid_values_rejected(self):
        with pytest.raises(ValueError):
            RunConfig().with_overrides({"N_c": 6000})

    def test_round_trip_all_keys(self):
        flat = RunConfig().as_flat()
        assert set(flat) == set(KEYS)
        assert RunConfig().with_overrides(flat) == RunConfig()

    def test_load_file(self, tmp_path):
        path = tmp_path / "run.cfg"
        path.write_text("k_f = 16\nB = 64\n")
        cfg = load_config(path)
        assert cfg.plant.k_f == 16 and cfg.trainer.batch_size == 64
        assert load_config(None) == RunConfig()


class TestSpecs:
    def test_bad_mode(self):
        with pytest.raises(ValueError):
            RunSpec(mode="real")

    def test_trainer_config(self):
        spec = RunSpec(critic_delay=128, actor_delay=256, td3_actor_delay=True, use_cer=False)
        tcfg = spec.trainer_config(RunConfig().trainer)
        assert (tcfg.critic_delay, tcfg.actor_delay, tcfg.td3_actor_delay, tcfg.use_cer) == (128, 256, True, False)
        assert RunSpec().trainer_config(RunConfig().trainer).critic_delay == 3500

    def test_label_ignores_seed(self):
        assert RunSpec(seed=1).label() == RunSpec(seed=2).label()
        assert "bw=unlimited" in RunSpec().label()
        assert "td3" in RunSpec(td3_actor_delay=True).label()

    def test_delay_grid(self):
        grid = delay_grid()
        assert len(grid) == 7
        assert all(a >= c for c, a, _ in grid)
        assert (3500, 5000, True) in grid and (128, 128, False) in grid

    def test_sweep_sizes(self):
        base = RunSpec()
        assert len(sweep_specs("friction", base, [0, 1])) == 2 * len(FRICTION_GRID)
        assert len(sweep_specs("delays", base, [0])) == 7
        bw = sweep_specs("bandwidth", base, [0])
        assert len(bw) == 2 * len(BANDWIDTH_GRID)
        assert {s.use_cer for s in bw} == {True, False}
        with pytest.raises(ValueError):
            sweep_specs("gravity", base, [0])

    def test_friction_vary(self):
        plant = sweep_specs("friction", RunSpec(), [0])
        assert [s.plant_kf for s in plant] == list(FRICTION_GRID)
        assert {s.pretrain_kf for s in plant} == {10.0}
        pre = sweep_specs("friction", RunSpec(), [0], vary="pretrain")
        assert [s.pretrain_kf for s in pre] == list(FRICTION_GRID)
        with pytest.raises(ValueError):
            sweep_specs("friction", RunSpec(), [0], vary="both")


class TestResults:
    def test_json_round_trip(self):
        r = RunResult(RunSpec(seed=3, bandwidth_mbit=0.5), True, 1234, [EvalRecord(100, 800, True)], 1.5)
        assert RunResult.from_json(json.loads(json.dumps(r.to_json()))) == r

    def test_time_requires_convergence(self):
        with pytest.raises(ValueError):
            RunResult(RunSpec(), converged=False, convergence_time=5)

    def test_summary_excludes_aborted(self):
        runs = [
            RunResult(RunSpec(seed=0), True, 100),
            RunResult(RunSpec(seed=1), True, 300),
            RunResult(RunSpec(seed=2), False, aborted=True, abort_reason="plant fault"),
            RunResult(RunSpec(seed=3), False),
            RunResult(RunSpec(plant_kf=16, seed=0), True, 50),
        ]
        rows, aborted = summarize(runs)
        by = {r.label: r for r in rows}
        base = by[RunSpec().label()]
        assert (base.runs, base.converged, base.aborted, base.median) == (4, 2, 1, 200)
        assert by[RunSpec(plant_kf=16).label()].median == 50
        assert len(aborted) == 1
        text = render_report(LoadedResults(runs=runs))
        assert "aborted runs" in text and "plant fault" in text

    def test_load_reports_bad_lines(self, tmp_path):
        path = tmp_path / "runs.jsonl"
        append_result(path, RunResult(RunSpec(), True, 10))
        with open(path, "a") as fh:
            fh.write("{not json\n\n")
        loaded = load_results(tmp_path)
        assert len(loaded.runs) == 1 and len(loaded.problems) == 1
        assert load_results(tmp_path / "missing").problems


class TestPretrain:
    def test_zero_budget_returns_initial_networks(self):
        a = pretrain(RunSpec(mode="pretrain", step_budget=0, seed=4), SMALL)
        b = pretrain(RunSpec(mode="pretrain", step_budget=0, seed=4), SMALL)
        assert a.result.training_steps == 0 and not a.result.evaluations
        assert a.actor_blob == b.actor_blob
        assert deserialize(a.actor_blob, ACTOR_SPEC).version == 0

    def test_deterministic(self):
        runs = [pretrain(RunSpec(mode="pretrain", step_budget=400, seed=1), SMALL) for _ in range(2)]
        assert runs[0].actor_blob == runs[1].actor_blob
        assert runs[0].result.evaluations == runs[1].result.evaluations
        assert runs[0].result.training_steps >= 400
        other = pretrain(RunSpec(mode="pretrain", step_budget=400, seed=2), SMALL)
        assert other.actor_blob != runs[0].actor_blob

    def test_progress_and_save(self, tmp_path):
        seen = []
        res = pretrain(RunSpec(mode="pretrain", step_budget=300, seed=0), SMALL, progress=seen.append)
        assert seen and {"steps", "eval_n", "moving_average", "successes", "sigma"} <= set(seen[0])
        res.save(tmp_path)
        assert load_pretrained(tmp_path) == (res.actor_blob, res.critic_blob)
        meta = json.loads((tmp_path / "pretrain.json").read_text())
        assert meta["best_score"] == res.best_score

    def test_evaluate_actor(self, blobs):
        ns = evaluate_actor(deserialize(blobs[0], ACTOR_SPEC), SMALL, 10.0, episodes=3)
        assert len(ns) == 3 and all(0 <= n <= 60 for n in ns)


class TestTransfer:
    def test_budget_and_bookkeeping(self, blobs):
        run = transfer_run(RunSpec(step_budget=400), *blobs, SMALL)
        r = run.result
        assert r.training_steps >= 400 and not r.aborted
        assert r.experiences == run.cloud.trainer.experiences
        assert r.experiences <= r.training_steps
        assert r.final_version > 0
        assert r.spec.critic_delay == 16

    def test_deterministic(self, blobs):
        a = transfer_run(RunSpec(step_budget=300, seed=5), *blobs, SMALL)
        b = transfer_run(RunSpec(step_budget=300, seed=5), *blobs, SMALL)
        assert a.event_log() == b.event_log()
        assert a.final_actor_blob == b.final_actor_blob

    def test_crash_keeps_cloud_state(self, blobs):
        run = transfer_run(RunSpec(step_budget=500, seed=2), *blobs, SMALL, crash_at=200)
        kinds = [e[0] for e in run.system.events]
        assert kinds.count("crash") == 1 and kinds.count("connect") == 2
        crash = next(e for e in run.system.events if e[0] == "crash")
        reconnect = [e for e in run.system.events if e[0] == "connect"][1]
        assert crash[2] == reconnect[2] > 0
        assert len(run.edges) == 2
        assert run.result.training_steps >= 500
        assert run.cloud.trainer.experiences > crash[2]

    def test_metrics_written(self, blobs, tmp_path):
        sink = MetricsSink(tmp_path / "m.jsonl")
        transfer_run(RunSpec(step_budget=100), *blobs, SMALL, metrics=sink)
        sink.close()
        types = {json.loads(l)["type"] for l in (tmp_path / "m.jsonl").read_text().splitlines()}
        assert {"session", "train_step", "episode_event"} <= types

    def test_sweep_records_failures(self, blobs, tmp_path):
        def pretrained(k_f):
            if k_f == 0.0:
                raise FileNotFoundError("no blob for k_f=0")
            return blobs

        cfg = SMALL.with_overrides({"transfer_steps": 60})
        results = sweep("friction", RunSpec(), [0], pretrained, tmp_path, cfg, vary="pretrain")
        assert len(results) == len(FRICTION_GRID)
        assert results[0].aborted and "FileNotFoundError" in results[0].abort_reason
        for name in ("runs.jsonl", "summary.csv", "runs.csv", "timeseries.csv"):
            assert (tmp_path / name).exists()
        assert len(load_results(tmp_path / "runs.jsonl").runs) == len(FRICTION_GRID)

