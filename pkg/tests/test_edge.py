import math
import threading

import numpy as np
import pytest

from edgerl.edge import EVAL, TRAIN, DoubleBufferedActor, EdgeConfig, EdgeRuntime, SingleBufferedActor
from edgerl.mdp import PlantState
from edgerl.nn import ACTOR_SPEC, Mlp, serialize
from edgerl.plant import PlantFault, PlantInterface, ResetFault, SimulatedPlant
from edgerl.transport import EpisodeEvent, EpisodeEventPayload, StateActionPayload, Tag

ON_TARGET = PlantState()
HANGING = PlantState(alpha=math.pi)


class ScriptedPlant(PlantInterface):
    """Reports states from ``script(read_index)`` and records every command."""

    def __init__(self, script=lambda i: ON_TARGET, reset_failures=0, fault_at=None):
        self.script = script
        self.reads = 0
        self.actions = []
        self.resets = 0
        self.calibrations = 0
        self.reset_failures = reset_failures
        self.fault_at = fault_at

    def read_state(self):
        if self.fault_at is not None and self.reads >= self.fault_at:
            raise PlantFault("sensor lost")
        s = self.script(self.reads)
        self.reads += 1
        return s

    def apply_action(self, action):
        self.actions.append(action)
        return ON_TARGET

    def reset_to(self, x_target):
        self.resets += 1
        if self.reset_failures > 0:
            self.reset_failures -= 1
            raise ResetFault("stuck")
        self.reads = 0
        return HANGING

    def calibrate(self):
        self.calibrations += 1


def actor(seed=0, version=0) -> Mlp:
    net = Mlp.initialized(ACTOR_SPEC, np.random.default_rng(seed))
    net.version = version
    return net


def blob(seed, version) -> bytes:
    return serialize(actor(seed, version))


def make_edge(plant, cfg=None, seed=0, buffered=DoubleBufferedActor) -> EdgeRuntime:
    return EdgeRuntime(plant, buffered(actor()), cfg or EdgeConfig(), seed=seed)


def run_episode(edge: EdgeRuntime, kind=None):
    if kind == EVAL:
        edge.sup.train_episodes_since_eval = edge.cfg.eval_every
    edge.start_episode()
    while True:
        out = edge.control_tick()
        if out is not None:
            return out


def payloads(edge, tag):
    return [p for t, p in edge.outbox if t == tag]


def events(edge):
    return [EpisodeEventPayload.unpack(p) for p in payloads(edge, Tag.EPISODE_EVENT)]


def test_config_validation():
    with pytest.raises(ValueError):
        EdgeConfig(success_steps=2000)
    with pytest.raises(ValueError):
        EdgeConfig(eval_every=0)


class TestActions:
    def test_eval_actions_are_pure_inference(self):
        plant = SimulatedPlant(state=PlantState(0.0, 0.0, 2.5, 0.0))
        edge = make_edge(plant)
        edge.sent_observations = []
        edge.sup.train_episodes_since_eval = 5
        edge.start_episode()
        for _ in range(50):
            assert edge.control_tick() is None
        net = edge.actor.active
        expected = [min(1.0, max(-1.0, float(net(o)[0]))) for o in edge.sent_observations]
        sent = [StateActionPayload.unpack(p).action for p in payloads(edge, Tag.STATE_ACTION)]
        assert np.array_equal(np.float32(expected), np.float32(sent))
        assert list(edge.history.as_tuple()) == expected[-5:]

    def test_training_actions_add_noise_and_clip(self):
        cfg = EdgeConfig(exploration_std=0.7)
        plant = SimulatedPlant(state=PlantState(0.0, 0.0, 2.5, 0.0))
        edge = make_edge(plant, cfg, seed=5)
        edge.sent_observations = []
        edge.start_episode()
        for _ in range(30):
            edge.control_tick()
        rng = np.random.default_rng(5)
        net = edge.actor.active
        expected = [min(1.0, max(-1.0, float(net(o)[0]) + rng.normal(0.0, 0.7))) for o in edge.sent_observations]
        assert list(edge.history.as_tuple()) == pytest.approx(expected[-5:], abs=0)
        assert any(abs(a) == 1.0 for a in expected)

    def test_markov_bookkeeping_matches_actuated_actions(self):
        plant = SimulatedPlant(state=PlantState(0.0, 0.0, 3.0, 0.0))
        plant.log_applied = True
        edge = make_edge(plant, EdgeConfig(exploration_std=0.3))
        edge.sent_observations = []
        edge.start_episode()
        for _ in range(40):
            edge.control_tick()
        edge.plant.tick(0.0)  # flush the last action through the delay line
        # applied_log[k] reached the motor at tick k, it was commanded at tick k - 1
        commanded = plant.applied_log[1:]
        for t, obs in enumerate(edge.sent_observations):
            window = [commanded[j] if j >= 0 else 0.0 for j in range(t - 5, t)]
            assert obs[5:].tolist() == window


class TestEpisodes:
    def test_terminal_ends_immediately(self):
        edge = make_edge(ScriptedPlant(lambda i: PlantState(x=0.4)))
        out = run_episode(edge)
        assert out.reason == "terminal" and out.steps == 0
        last = StateActionPayload.unpack(payloads(edge, Tag.STATE_ACTION)[-1])
        assert last.terminal

    def test_training_resets_after_100_on_target(self):
        edge = make_edge(ScriptedPlant())
        out = run_episode(edge)
        assert out.reason == "on_target"
        assert out.on_target == 101 and out.steps == 100
        assert out.kind == TRAIN and not out.success

    def test_eval_ignores_on_target_cap(self):
        edge = make_edge(ScriptedPlant())
        out = run_episode(edge, EVAL)
        assert out.reason == "time_limit" and out.steps == 1000
        assert out.success

    @pytest.mark.parametrize("off_target,success", [(250, True), (251, False)])
    def test_eval_success_threshold(self, off_target, success):
        edge = make_edge(ScriptedPlant(lambda i: HANGING if i < off_target else ON_TARGET))
        out = run_episode(edge, EVAL)
        assert out.on_target == 1000 - off_target
        assert out.success is success

    def test_eval_accumulates_no_steps(self):
        edge = make_edge(ScriptedPlant(lambda i: HANGING))
        out = run_episode(edge, EVAL)
        assert out.steps == 1000 and out.cumulative_steps == 0
        assert edge.sup.global_steps == 1000

    def test_accounting_and_schedule(self):
        cfg = EdgeConfig(max_episode_steps=20, success_steps=15, on_target_cap=5, eval_every=2, converge_after=3)
        edge = make_edge(ScriptedPlant(), cfg)
        outcomes = []
        while not edge.sup.converged:
            outcomes.append(run_episode(edge))
            edge.reset_plant()
        kinds = [o.kind for o in outcomes]
        assert kinds == [TRAIN, TRAIN, EVAL] * 3
        train_steps = sum(o.steps for o in outcomes if o.kind == TRAIN)
        assert edge.sup.cumulative_steps == train_steps == 6 * 5
        converged = [e for e in events(edge) if e.event == EpisodeEvent.CONVERGED]
        assert len(converged) == 1 and converged[0].cumulative_steps == train_steps

    def test_failed_eval_breaks_the_streak(self):
        cfg = EdgeConfig(max_episode_steps=20, success_steps=15, on_target_cap=5, eval_every=1, converge_after=2)
        good = make_edge(ScriptedPlant(), cfg)
        good.sup.consecutive_successes = 1
        run_episode(good, EVAL)
        assert good.sup.converged
        bad = make_edge(ScriptedPlant(lambda i: HANGING), cfg)
        bad.sup.consecutive_successes = 1
        run_episode(bad, EVAL)
        assert not bad.sup.converged and bad.sup.consecutive_successes == 0

    def test_event_order(self):
        edge = make_edge(ScriptedPlant())
        edge.supervise_episode()
        assert [e.event for e in events(edge)] == [
            EpisodeEvent.TRAIN_BEGIN,
            EpisodeEvent.TRAIN_END,
            EpisodeEvent.RESET_BEGIN,
            EpisodeEvent.RESET_END,
        ]

    def test_step_indices_increase(self):
        edge = make_edge(ScriptedPlant())
        run_episode(edge)
        steps = [StateActionPayload.unpack(p).step for p in payloads(edge, Tag.STATE_ACTION)]
        assert steps == list(range(len(steps)))


class TestFaults:
    def test_plant_fault_aborts_with_zero_action(self):
        plant = ScriptedPlant(fault_at=3)
        edge = make_edge(plant)
        out = run_episode(edge)
        assert out.reason == "fault" and out.steps == 3
        assert plant.actions[-1] == 0.0

    def test_reset_retried_once(self):
        plant = ScriptedPlant(reset_failures=1)
        make_edge(plant).reset_plant()
        assert plant.resets == 2

    def test_reset_gives_up_after_retry(self):
        with pytest.raises(ResetFault):
            make_edge(ScriptedPlant(reset_failures=2)).reset_plant()

    def test_unreachable_cloud_buffers_locally(self):
        edge = make_edge(ScriptedPlant(lambda i: HANGING))
        run_episode(edge, EVAL)
        assert len(payloads(edge, Tag.STATE_ACTION)) == 1001

    def test_bounded_upstream_ring(self):
        edge = make_edge(ScriptedPlant(lambda i: HANGING), EdgeConfig(upstream_capacity=50))
        run_episode(edge, EVAL)
        assert len(edge.outbox) == 50


class TestCalibration:
    def test_fires_between_episodes_after_each_period(self):
        cfg = EdgeConfig(max_episode_steps=30, success_steps=10, calibration_period=50, on_target_cap=1000)
        plant = ScriptedPlant(lambda i: HANGING)
        edge = make_edge(plant, cfg)
        history = []
        for _ in range(6):
            run_episode(edge)
            before = plant.calibrations
            edge.reset_plant()
            history.append((edge.sup.global_steps, plant.calibrations - before))
        # the boundaries at 50, 100 and 150 are handled at the next episode end
        assert history == [(30, 0), (60, 1), (90, 0), (120, 1), (150, 1), (180, 0)]

    def test_real_plant_drift_cleared(self):
        from edgerl.plant import PlantConfig

        plant = SimulatedPlant(PlantConfig(encoder_drift=1e-3))
        edge = EdgeRuntime(plant, DoubleBufferedActor(actor()), EdgeConfig(max_episode_steps=20, success_steps=10, calibration_period=20), seed=0)
        run_episode(edge)
        assert plant.encoder_offset != 0.0
        edge.reset_plant()
        assert plant.encoder_offset == 0.0


class TestWeights:
    def test_apply_toggles_and_versions_increase(self):
        edge = make_edge(ScriptedPlant())
        slot = edge.actor.active_slot
        assert edge.apply_weights(blob(1, 1))
        assert edge.actor.active_slot != slot
        assert edge.apply_weights(blob(2, 2))
        assert edge.actor.version == 2 and edge.actor.active_slot == slot
        x = np.zeros(10)
        assert np.array_equal(edge.actor.active(x), actor(2)(x))

    def test_stale_version_ignored(self):
        edge = make_edge(ScriptedPlant())
        edge.apply_weights(blob(1, 5))
        assert not edge.apply_weights(blob(2, 4))
        assert edge.actor.version == 5

    def test_corrupt_blob_keeps_active(self):
        edge = make_edge(ScriptedPlant())
        edge.apply_weights(blob(1, 1))
        bad = bytearray(blob(2, 2))
        bad[2:4] = b"\xff\xff"
        assert not edge.apply_weights(bytes(bad))
        wrong_spec = blob(2, 3)[:-4]
        assert not edge.apply_weights(wrong_spec)
        assert edge.actor.version == 1 and edge.actor.rejected == 2

    def test_inference_never_sees_a_half_written_actor(self):
        nets = [actor(1), actor(2)]
        probes = np.random.default_rng(0).normal(size=(1, 10))
        expected = {float(n(probes[0])[0]) for n in nets}
        double = DoubleBufferedActor(nets[0])
        stop = threading.Event()

        def writer():
            v = 1
            while not stop.is_set():
                nets[v % 2].version = v
                double.apply(serialize(nets[v % 2]))
                v += 1

        thread = threading.Thread(target=writer)
        thread.start()
        try:
            seen = {double.infer(probes[0]) for _ in range(3000)}
        finally:
            stop.set()
            thread.join()
        assert seen <= expected
        assert double.applies > 0

    def test_single_buffer_writes_the_live_slot(self):
        single = SingleBufferedActor(actor(0))
        slot = single.active_slot
        assert single.apply(blob(3, 1))
        assert single.active_slot == slot and single.version == 1
        assert single.blocks_inference and not DoubleBufferedActor.blocks_inference


def test_tick_compute_within_period():
    plant = SimulatedPlant(state=PlantState(0.0, 0.0, 2.0, 0.0))
    edge = make_edge(plant)
    edge.start_episode()
    for _ in range(300):
        if edge.control_tick() is not None:
            edge.start_episode()
    walls = sorted(r.wall for r in edge.ticks)
    assert walls[-1] < edge.cfg.period
