"""Pretraining, transfer runs, parameter sweeps and result aggregation."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
import statistics
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable

import numpy as np

from .cloud import CloudService, MetricsSink
from .config import RunConfig
from .ddpg import ActorCritic, Trainer, TrainerConfig
from .edge import EVAL, TRAIN, DoubleBufferedActor, EdgeRuntime
from .mdp import ActionHistory, PlantState, build_observation, distance_to_target, is_terminal, reward, update_on_target
from .nn import ACTOR_SPEC, Mlp, deserialize, serialize
from .noise import OuNoise
from .plant import PlantFault, ResetFault, SimulatedPlant, with_friction
from .replay import Experience, ReplayBuffer
from .system import LinkConfig, SimSystem

log = logging.getLogger(__name__)

FRICTION_GRID = (0.0, 5.0, 10.0, 12.0, 16.0)
DELAY_VALUES = (128, 3500, 5000)
BANDWIDTH_GRID = (0.06, 0.1, 0.5, 5.0, 10.0, 15.0, None)
MOVING_AVERAGE_WINDOW = 10
MAX_FAULTS = 100


@dataclass(frozen=True)
class RunSpec:
    mode: str = "transfer"  # pretrain | transfer
    pretrain_kf: float = 10.0
    plant_kf: float = 10.0
    critic_delay: int | None = None  # None keeps the config value
    actor_delay: int | None = None
    td3_actor_delay: bool = False
    bandwidth_mbit: float | None = None
    use_cer: bool = True
    seed: int = 0
    step_budget: int | None = None  # None keeps the config value

    def __post_init__(self):
        if self.mode not in ("pretrain", "transfer"):
            raise ValueError(f"unknown run mode {self.mode!r}")

    def trainer_config(self, base: TrainerConfig) -> TrainerConfig:
        return replace(
            base,
            critic_delay=base.critic_delay if self.critic_delay is None else self.critic_delay,
            actor_delay=base.actor_delay if self.actor_delay is None else self.actor_delay,
            td3_actor_delay=self.td3_actor_delay,
            use_cer=self.use_cer,
        )

    def label(self) -> str:
        """Configuration name shared by all seeds of one sweep cell."""
        parts = [self.mode, f"pre_kf={self.pretrain_kf:g}"]
        if self.mode == "transfer":
            bw = "unlimited" if self.bandwidth_mbit is None else f"{self.bandwidth_mbit:g}"
            parts += [f"plant_kf={self.plant_kf:g}", f"N_c={self.critic_delay}", f"N_a={self.actor_delay}", f"bw={bw}", f"cer={int(self.use_cer)}"]
            if self.td3_actor_delay:
                parts.append("td3")
        return " ".join(parts)


@dataclass
class EvalRecord:
    cumulative_steps: int
    on_target: int
    success: bool


@dataclass
class RunResult:
    spec: RunSpec
    converged: bool = False
    convergence_time: int | None = None
    evaluations: list[EvalRecord] = field(default_factory=list)
    wall_time: float = 0.0
    aborted: bool = False
    abort_reason: str | None = None
    training_steps: int = 0
    experiences: int = 0
    final_version: int = 0

    def __post_init__(self):
        if self.convergence_time is not None and not self.converged:
            raise ValueError("convergence time is only defined for converged runs")

    def to_json(self) -> dict:
        d = asdict(self)
        d["label"] = self.spec.label()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "RunResult":
        d = dict(d)
        d.pop("label", None)
        spec = RunSpec(**d.pop("spec"))
        evals = [EvalRecord(**e) for e in d.pop("evaluations")]
        return cls(spec=spec, evaluations=evals, **d)


@dataclass
class PretrainResult:
    actor_blob: bytes
    critic_blob: bytes
    result: RunResult
    best_score: float

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        (directory / "actor.bin").write_bytes(self.actor_blob)
        (directory / "critic.bin").write_bytes(self.critic_blob)
        (directory / "pretrain.json").write_text(json.dumps({**self.result.to_json(), "best_score": self.best_score}, indent=1))


def load_pretrained(directory: str | Path) -> tuple[bytes, bytes]:
    directory = Path(directory)
    return (directory / "actor.bin").read_bytes(), (directory / "critic.bin").read_bytes()


# -- simulation-only episodes ------------------------------------------------------


def _hanging_start(rng: np.random.Generator, cfg: RunConfig) -> PlantState:
    half = 0.5 * cfg.mdp.x_max
    return PlantState(float(rng.uniform(-half, half)), 0.0, math.pi, 0.0)


def _random_start(rng: np.random.Generator, cfg: RunConfig) -> PlantState:
    half = 0.5 * cfg.mdp.x_max
    return PlantState(float(rng.uniform(-half, half)), float(rng.uniform(-0.1, 0.1)), float(rng.uniform(-math.pi, math.pi)), float(rng.uniform(-0.5, 0.5)))


def run_sim_episode(
    plant: SimulatedPlant,
    start: PlantState,
    policy: Callable[[np.ndarray], float],
    cfg: RunConfig,
    training: bool,
    on_transition: Callable[[Experience], None] | None = None,
) -> tuple[int, int, str]:
    """One episode directly against the simulator. Returns (steps, final n, end reason)."""
    mdp, ecfg = cfg.mdp, cfg.edge
    s = plant.teleport(start)
    history = ActionHistory()
    n = 0
    prev = None
    for t in range(ecfg.max_episode_steps + 1):
        obs = build_observation(s, history)
        terminal = is_terminal(s, mdp)
        if prev is not None and on_transition is not None:
            p_obs, p_a, p_s = prev
            on_transition(Experience(p_obs.astype(np.float32), p_a, reward(p_s, p_a, s, mdp), obs.astype(np.float32), terminal))
        if t == ecfg.max_episode_steps:
            return t, n, "time_limit"
        if terminal:
            return t, n, "terminal"
        n = update_on_target(n, distance_to_target(s, mdp), mdp)
        if training and n > ecfg.on_target_cap:
            return t, n, "on_target"
        a = min(1.0, max(-1.0, policy(obs)))
        prev = (obs, a, s)
        s = plant.tick(a)
        history.push(a)
    raise AssertionError("unreachable")


def evaluate_actor(actor: Mlp, cfg: RunConfig, k_f: float, episodes: int = 5, seed: int = 0) -> list[int]:
    """Noise-free episodes from rest in the simulator; returns n at the end of each."""
    rng = np.random.default_rng(seed)
    plant = SimulatedPlant(with_friction(cfg.plant, k_f))
    policy = lambda o: float(actor(o)[0])  # noqa: E731
    return [run_sim_episode(plant, _hanging_start(rng, cfg), policy, cfg, training=False)[1] for _ in range(episodes)]


def pretrain(
    spec: RunSpec,
    cfg: RunConfig | None = None,
    stop_on_convergence: bool = True,
    progress: Callable[[dict], None] | None = None,
) -> PretrainResult:
    """DDPG in the simulator with OU exploration; keeps the best moving-average snapshot.

    Training episodes start from random states, evaluation episodes from rest.
    With ``stop_on_convergence`` the run ends at the first convergence and
    returns the converged networks.
    """
    cfg = cfg or RunConfig()
    budget = cfg.pretrain_steps if spec.step_budget is None else spec.step_budget
    seeds = np.random.SeedSequence(spec.seed).spawn(4)
    tcfg = spec.trainer_config(cfg.trainer)
    spec = replace(spec, critic_delay=tcfg.critic_delay, actor_delay=tcfg.actor_delay)
    ac = ActorCritic.fresh(tcfg, np.random.default_rng(seeds[0]))
    trainer = Trainer(ac, tcfg, seed=seeds[1])
    buffer = ReplayBuffer(cfg.replay_capacity)
    noise = OuNoise(np.random.default_rng(seeds[2]), decay_steps=cfg.ou_decay_steps)
    starts = np.random.default_rng(seeds[3])
    plant = SimulatedPlant(with_friction(cfg.plant, spec.pretrain_kf))
    ecfg = cfg.edge

    result = RunResult(spec)
    best = (serialize(ac.actor), serialize(ac.critic))
    best_score = -math.inf
    scores: list[int] = []
    successes = 0
    t0 = time.perf_counter()

    def learn(e: Experience) -> None:
        trainer.ingest_and_train(buffer, e)
        result.training_steps += 1

    def explore(obs: np.ndarray) -> float:
        return float(ac.actor(obs)[0]) + noise.sample()

    def act(obs: np.ndarray) -> float:
        return float(ac.actor(obs)[0])

    while result.training_steps < budget:
        for _ in range(ecfg.eval_every):
            if result.training_steps >= budget:
                break
            noise.reset()
            run_sim_episode(plant, _random_start(starts, cfg), explore, cfg, True, learn)
        if trainer.faults >= MAX_FAULTS:
            result.aborted, result.abort_reason = True, "diverged"
            break
        steps, n, reason = run_sim_episode(plant, _hanging_start(starts, cfg), act, cfg, False)
        success = reason == "time_limit" and n >= ecfg.success_steps
        result.evaluations.append(EvalRecord(result.training_steps, n, success))
        successes = successes + 1 if success else 0
        scores.append(n)
        score = statistics.fmean(scores[-MOVING_AVERAGE_WINDOW:])
        if score > best_score:
            best_score = score
            best = (serialize(ac.actor), serialize(ac.critic))
        if progress is not None:
            progress({"steps": result.training_steps, "eval_n": n, "moving_average": score, "successes": successes, "sigma": noise.sigma})
        if successes >= ecfg.converge_after and not result.converged:
            result.converged = True
            result.convergence_time = result.training_steps
            if stop_on_convergence:
                best = (serialize(ac.actor), serialize(ac.critic))
                break
    result.experiences = trainer.experiences
    result.final_version = ac.actor.version
    result.wall_time = time.perf_counter() - t0
    return PretrainResult(best[0], best[1], result, best_score)


# -- transfer -------------------------------------------------------------------------


@dataclass
class TransferRun:
    """Everything a finished transfer run leaves behind, for inspection in tests."""

    result: RunResult
    system: SimSystem
    edges: list[EdgeRuntime]

    @property
    def cloud(self) -> CloudService:
        return self.system.cloud

    @property
    def final_actor_blob(self) -> bytes:
        return serialize(self.system.cloud.actor)

    def event_log(self) -> list[str]:
        return [json.dumps(list(e)) for e in self.system.events]


def _make_edge(actor_blob: bytes, plant: SimulatedPlant, cfg: RunConfig, seed: int) -> EdgeRuntime:
    actor = DoubleBufferedActor(deserialize(actor_blob, ACTOR_SPEC))
    return EdgeRuntime(plant, actor, cfg.edge, cfg.mdp, seed=seed)


def transfer_run(
    spec: RunSpec,
    actor_blob: bytes,
    critic_blob: bytes,
    cfg: RunConfig | None = None,
    link: LinkConfig | None = None,
    metrics: MetricsSink | None = None,
    crash_at: int | None = None,
    max_episodes: int | None = None,
) -> TransferRun:
    """Continue training a pretrained actor-critic on a plant with friction ``spec.plant_kf``.

    The run stops at convergence or when the step budget of cumulative
    training steps is spent. ``crash_at`` kills the edge once that many
    training steps have been taken and starts a fresh one from the same
    pretrained actor.
    """
    cfg = cfg or RunConfig()
    budget = cfg.transfer_steps if spec.step_budget is None else spec.step_budget
    tcfg = spec.trainer_config(cfg.trainer)
    spec = replace(spec, critic_delay=tcfg.critic_delay, actor_delay=tcfg.actor_delay)
    seeds = np.random.SeedSequence(spec.seed).generate_state(4)
    cloud = CloudService.from_blobs(actor_blob, critic_blob, tcfg, cfg.transfer_replay_capacity, seed=int(seeds[0]), metrics=metrics)
    plant = SimulatedPlant(with_friction(cfg.plant, spec.plant_kf), seed=int(seeds[1]))
    link = link or LinkConfig(bandwidth_mbit=spec.bandwidth_mbit)
    edge = _make_edge(actor_blob, plant, cfg, int(seeds[2]))
    system = SimSystem(cloud, edge, link)
    edges = [edge]
    result = RunResult(spec)
    offset = 0  # training steps taken by edges that have since crashed
    episodes = 0
    t0 = time.perf_counter()
    try:
        system.reset_plant()
        while not result.converged and offset + edge.sup.cumulative_steps < budget:
            if max_episodes is not None and episodes >= max_episodes:
                break
            edge.start_episode()
            out = None
            while out is None:
                if crash_at is not None and edge.sup.kind == TRAIN and offset + edge.sup.cumulative_steps >= crash_at:
                    break
                out = system.tick()
            if out is None:
                crash_at = None
                offset += edge.sup.cumulative_steps
                system.crash_edge()
                edge = _make_edge(actor_blob, plant, cfg, int(seeds[3]))
                edges.append(edge)
                system.connect(edge)
                system.reset_plant()
                continue
            episodes += 1
            system.events.append(("episode", out.episode, out.kind, out.steps, out.on_target, out.reason, out.success, offset + out.cumulative_steps, out.actor_version))
            if out.kind == EVAL:
                result.evaluations.append(EvalRecord(offset + out.cumulative_steps, out.on_target, out.success))
            if edge.sup.converged:
                result.converged = True
                result.convergence_time = offset + out.cumulative_steps
            if out.reason == "fault":
                result.aborted, result.abort_reason = True, "plant fault"
                break
            if cloud.trainer.faults >= MAX_FAULTS:
                result.aborted, result.abort_reason = True, "diverged"
                break
            system.reset_plant()
    except ResetFault as exc:
        result.aborted, result.abort_reason = True, f"reset failed: {exc}"
    except PlantFault as exc:
        result.aborted, result.abort_reason = True, f"plant fault: {exc}"
    result.training_steps = offset + edge.sup.cumulative_steps
    result.experiences = cloud.trainer.experiences
    result.final_version = cloud.actor.version
    result.wall_time = time.perf_counter() - t0
    return TransferRun(result, system, edges)


# -- sweeps ------------------------------------------------------------------------------


def delay_grid() -> list[tuple[int, int, bool]]:
    """(N_c, N_a, TD3 actor delay) cells: every pair with N_a >= N_c plus one TD3 variant."""
    cells = [(c, a, False) for c in DELAY_VALUES for a in DELAY_VALUES if a >= c]
    cells.append((3500, 5000, True))
    return cells


def sweep_specs(kind: str, base: RunSpec, seeds: Iterable[int], vary: str = "plant") -> list[RunSpec]:
    """The grid of one sweep. Only the swept variable differs from ``base``.

    For the friction sweep ``vary`` picks whether the plant (``plant``) or the
    pretraining simulator (``pretrain``) takes the grid values.
    """
    seeds = list(seeds)
    if kind == "friction":
        if vary not in ("plant", "pretrain"):
            raise ValueError("vary must be 'plant' or 'pretrain'")
        key = "plant_kf" if vary == "plant" else "pretrain_kf"
        cells = [{key: kf} for kf in FRICTION_GRID]
    elif kind == "delays":
        cells = [{"critic_delay": c, "actor_delay": a, "td3_actor_delay": td3} for c, a, td3 in delay_grid()]
    elif kind == "bandwidth":
        cells = [{"bandwidth_mbit": bw, "use_cer": cer} for bw in BANDWIDTH_GRID for cer in (True, False)]
    else:
        raise ValueError(f"unknown sweep {kind!r}")
    return [replace(base, seed=seed, **cell) for cell in cells for seed in seeds]


def sweep(
    kind: str,
    base: RunSpec,
    seeds: Iterable[int],
    pretrained: Callable[[float], tuple[bytes, bytes]],
    out_dir: str | Path,
    cfg: RunConfig | None = None,
    vary: str = "plant",
    on_result: Callable[[RunResult], None] | None = None,
) -> list[RunResult]:
    """Run a sweep, appending each result to ``out_dir/runs.jsonl`` as it finishes.

    ``pretrained(k_f)`` returns the (actor, critic) blobs pretrained at ``k_f``.
    A run that raises is recorded as aborted and the sweep carries on.
    """
    cfg = cfg or RunConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for spec in sweep_specs(kind, base, seeds, vary):
        try:
            actor_blob, critic_blob = pretrained(spec.pretrain_kf)
            result = transfer_run(spec, actor_blob, critic_blob, cfg).result
        except Exception as exc:  # one broken cell must not take the sweep down
            log.exception("run %s seed %d failed", spec.label(), spec.seed)
            result = RunResult(spec, aborted=True, abort_reason=f"{type(exc).__name__}: {exc}")
        append_result(out_dir / "runs.jsonl", result)
        results.append(result)
        if on_result is not None:
            on_result(result)
    write_report(load_results(out_dir), out_dir)
    return results


# -- results and reports ---------------------------------------------------------------


def append_result(path: str | Path, result: RunResult) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(result.to_json(), sort_keys=True) + "\n")


@dataclass
class LoadedResults:
    runs: list[RunResult] = field(default_factory=list)
    problems: list[str] = field(default_factory=list)  # unreadable files or lines


def load_results(path: str | Path) -> LoadedResults:
    """Read every ``*.jsonl`` result file under ``path`` (or the single file given)."""
    path = Path(path)
    loaded = LoadedResults()
    if not path.exists():
        loaded.problems.append(f"{path}: missing")
        return loaded
    files = [path] if path.is_file() else sorted(path.rglob("*.jsonl"))
    for f in files:
        for lineno, line in enumerate(f.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                loaded.runs.append(RunResult.from_json(json.loads(line)))
            except (ValueError, TypeError, KeyError) as exc:
                loaded.problems.append(f"{f}:{lineno}: {exc}")
    return loaded


@dataclass
class ConfigSummary:
    label: str
    runs: int
    converged: int
    aborted: int
    median: float | None
    minimum: int | None
    maximum: int | None


def summarize(runs: list[RunResult]) -> tuple[list[ConfigSummary], list[RunResult]]:
    """Per-configuration statistics over converged runs, plus the aborted runs."""
    by_label: dict[str, list[RunResult]] = {}
    for r in runs:
        by_label.setdefault(r.spec.label(), []).append(r)
    rows = []
    for label, group in by_label.items():
        times = [r.convergence_time for r in group if r.converged and not r.aborted]
        rows.append(
            ConfigSummary(
                label,
                len(group),
                len(times),
                sum(r.aborted for r in group),
                statistics.median(times) if times else None,
                min(times) if times else None,
                max(times) if times else None,
            )
        )
    return rows, [r for r in runs if r.aborted]


def render_report(loaded: LoadedResults) -> str:
    rows, aborted = summarize(loaded.runs)
    out = io.StringIO()
    out.write(f"{'configuration':<70} {'runs':>4} {'conv':>4} {'abrt':>4} {'median':>9} {'min':>8} {'max':>8}\n")
    for r in rows:
        fmt = lambda v: "-" if v is None else f"{v:g}"  # noqa: E731
        out.write(f"{r.label:<70} {r.runs:>4} {r.converged:>4} {r.aborted:>4} {fmt(r.median):>9} {fmt(r.minimum):>8} {fmt(r.maximum):>8}\n")
    if aborted:
        out.write("\naborted runs:\n")
        for r in aborted:
            out.write(f"  {r.spec.label()} seed={r.spec.seed}: {r.abort_reason}\n")
    if loaded.problems:
        out.write("\nunreadable results:\n")
        for p in loaded.problems:
            out.write(f"  {p}\n")
    return out.getvalue()


def write_report(loaded: LoadedResults, out_dir: str | Path) -> None:
    """summary.csv (one row per configuration), runs.csv (one per run), timeseries.csv (one per evaluation)."""
    out_dir = Path(out_dir)
    rows, _ = summarize(loaded.runs)
    with open(out_dir / "summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "runs", "converged", "aborted", "median", "min", "max"])
        for r in rows:
            w.writerow([r.label, r.runs, r.converged, r.aborted, r.median, r.minimum, r.maximum])
    with open(out_dir / "runs.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "seed", "converged", "convergence_time", "aborted", "abort_reason", "training_steps", "wall_time"])
        for r in loaded.runs:
            w.writerow([r.spec.label(), r.spec.seed, r.converged, r.convergence_time, r.aborted, r.abort_reason, r.training_steps, f"{r.wall_time:.1f}"])
    with open(out_dir / "timeseries.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["configuration", "seed", "cumulative_steps", "on_target", "success"])
        for r in loaded.runs:
            for e in r.evaluations:
                w.writerow([r.spec.label(), r.spec.seed, e.cumulative_steps, e.on_target, e.success])
