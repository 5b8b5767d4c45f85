"""Command line entry point: ``edgerl <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment as ex
from .cloud import CheckpointError, CloudService, MetricsSink
from .config import RunConfig, load_config
from .edge import DoubleBufferedActor, EdgeRuntime
from .nn import ACTOR_SPEC, BlobError, deserialize
from .plant import PLANTS, make_plant, with_friction
from .realtime import CloudServer, EdgeClient, parse_addr
from .transport import ThrottleConfig

EXIT_OK = 0
EXIT_PROBLEMS = 1
EXIT_BAD_INPUT = 2
EXIT_NOTHING = 3

log = logging.getLogger("edgerl")


def _bandwidth(text: str) -> float | None:
    if text.lower() in ("none", "unlimited", "inf"):
        return None
    value = float(text)
    if value <= 0:
        raise argparse.ArgumentTypeError("bandwidth must be positive")
    return value


def _pretrained_paths(path: str) -> tuple[Path, Path]:
    """A directory holding actor.bin/critic.bin, or the actor blob itself with critic.bin beside it."""
    p = Path(path)
    if p.is_dir():
        return p / "actor.bin", p / "critic.bin"
    return p, p.with_name("critic.bin")


def _load_pretrained(path: str) -> tuple[bytes, bytes]:
    actor, critic = _pretrained_paths(path)
    return actor.read_bytes(), critic.read_bytes()


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None))
    if getattr(args, "period_hz", None):
        period = 1.0 / args.period_hz
        cfg = replace(cfg, edge=replace(cfg.edge, period=period), plant=replace(cfg.plant, period=period))
    return cfg


def _spec(args, mode: str) -> ex.RunSpec:
    return ex.RunSpec(
        mode=mode,
        pretrain_kf=args.pretrain_kf,
        plant_kf=getattr(args, "plant_kf", args.pretrain_kf),
        critic_delay=getattr(args, "critic_delay", None),
        actor_delay=getattr(args, "actor_delay", None),
        td3_actor_delay=getattr(args, "td3", False),
        bandwidth_mbit=getattr(args, "bandwidth_mbit", None),
        use_cer=not getattr(args, "no_cer", False),
        seed=args.seed,
        step_budget=args.steps,
    )


# -- subcommands ------------------------------------------------------------------------


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    spec = _spec(args, "pretrain")

    def progress(p: dict) -> None:
        log.info("steps=%d eval_n=%d avg=%.1f successes=%d sigma=%.3f", p["steps"], p["eval_n"], p["moving_average"], p["successes"], p["sigma"])

    res = ex.pretrain(spec, cfg, stop_on_convergence=not args.full_budget, progress=progress)
    res.save(args.out)
    r = res.result
    print(f"pretraining {'converged at ' + str(r.convergence_time) if r.converged else 'did not converge'}; {r.training_steps} steps in {r.wall_time:.0f}s; saved to {args.out}")
    return EXIT_OK if not r.aborted else EXIT_PROBLEMS


def cmd_transfer(args) -> int:
    cfg = _config(args)
    spec = _spec(args, "transfer")
    actor_blob, critic_blob = _load_pretrained(args.pretrained)
    metrics = MetricsSink(args.metrics) if args.metrics else None
    run = ex.transfer_run(spec, actor_blob, critic_blob, cfg, metrics=metrics, crash_at=args.crash_at)
    if metrics is not None:
        metrics.close()
    r = run.result
    if args.out:
        ex.append_result(args.out, r)
    if args.event_log:
        Path(args.event_log).write_text("\n".join(run.event_log()) + "\n", encoding="utf-8")
    status = f"converged after {r.convergence_time} training steps" if r.converged else ("aborted: " + str(r.abort_reason) if r.aborted else "did not converge")
    print(f"{spec.label()} seed={spec.seed}: {status} ({r.wall_time:.0f}s)")
    return EXIT_OK if not r.aborted else EXIT_PROBLEMS


def cmd_sweep(args) -> int:
    cfg = _config(args)
    base = _spec(args, "transfer")
    cache: dict[float, tuple[bytes, bytes]] = {}

    def pretrained(k_f: float) -> tuple[bytes, bytes]:
        if k_f not in cache:
            path = args.pretrained.format(k_f=f"{k_f:g}")
            cache[k_f] = _load_pretrained(path)
        return cache[k_f]

    def show(r: ex.RunResult) -> None:
        print(f"{r.spec.label()} seed={r.spec.seed}: converged={r.converged} time={r.convergence_time} ({r.wall_time:.0f}s)", flush=True)

    ex.sweep(args.kind, base, args.seeds, pretrained, args.out, cfg, vary=args.vary, on_result=show)
    print(ex.render_report(ex.load_results(args.out)))
    return EXIT_OK


def cmd_report(args) -> int:
    loaded = ex.load_results(args.results)
    if not loaded.runs:
        print("nothing to report")
        for p in loaded.problems:
            print(f"  {p}")
        return EXIT_NOTHING
    print(ex.render_report(loaded), end="")
    out = Path(args.out) if args.out else (Path(args.results) if Path(args.results).is_dir() else Path(args.results).parent)
    out.mkdir(parents=True, exist_ok=True)
    ex.write_report(loaded, out)
    return EXIT_PROBLEMS if loaded.problems else EXIT_OK


def cmd_cloud(args) -> int:
    cfg = _config(args)
    tcfg = _spec(args, "transfer").trainer_config(cfg.trainer)
    metrics = MetricsSink(args.metrics) if args.metrics else None
    ckpt = None
    if args.checkpoint_dir:
        Path(args.checkpoint_dir).mkdir(parents=True, exist_ok=True)
        ckpt = Path(args.checkpoint_dir) / "cloud.npz"
    if ckpt is not None and ckpt.exists():
        cloud = CloudService.restore(ckpt, cfg.mdp, metrics=metrics, checkpoint_path=ckpt)
        log.info("resumed from %s at %d experiences", ckpt, cloud.trainer.experiences)
    else:
        actor_blob, critic_blob = _load_pretrained(args.pretrained)
        cloud = CloudService.from_blobs(actor_blob, critic_blob, tcfg, cfg.transfer_replay_capacity, seed=args.seed, mdp_cfg=cfg.mdp, metrics=metrics, checkpoint_path=ckpt)
    server = CloudServer(cloud, parse_addr(args.listen_addr), ThrottleConfig(args.bandwidth_mbit), ckpt)
    print(f"listening on {server.address[0]}:{server.address[1]}", flush=True)
    try:
        server.serve(args.duration)
    except KeyboardInterrupt:
        pass
    finally:
        if metrics is not None:
            metrics.close()
    print(f"stopped after {cloud.trainer.experiences} experiences; converged={server.converged.is_set()}")
    return EXIT_OK


def cmd_edge(args) -> int:
    cfg = _config(args)
    actor_path, _ = _pretrained_paths(args.pretrained)
    actor = deserialize(actor_path.read_bytes(), ACTOR_SPEC)
    plant = make_plant(args.plant, with_friction(cfg.plant, args.plant_kf), seed=args.seed)
    edge = EdgeRuntime(plant, DoubleBufferedActor(actor), cfg.edge, cfg.mdp, seed=args.seed)
    client = EdgeClient(edge, parse_addr(args.cloud_addr), sim_time=args.sim_time)
    try:
        outcomes = client.run(max_episodes=args.episodes, duration=args.duration)
    except KeyboardInterrupt:
        outcomes = edge.sup.outcomes
    worst = max((t.wall for t in edge.ticks), default=0.0)
    print(f"{len(outcomes)} episodes, {len(edge.ticks)} ticks, worst tick {worst * 1e3:.2f} ms, converged={edge.sup.converged}")
    if args.outcomes:
        Path(args.outcomes).write_text("\n".join(json.dumps(o.__dict__) for o in outcomes) + "\n", encoding="utf-8")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="edgerl", description="Cloud-edge DDPG for the cart-pole swing-up.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, steps=True):
        sp.add_argument("--config", help="key = value file overriding the defaults")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--pretrain-kf", type=float, default=10.0, help="friction factor of the pretraining simulator")
        if steps:
            sp.add_argument("--steps", type=int, default=None, help="step budget (default from config)")

    def trainer_flags(sp):
        sp.add_argument("--critic-delay", "--N_c", type=int, default=None)
        sp.add_argument("--actor-delay", "--N_a", type=int, default=None)
        sp.add_argument("--td3", action="store_true", help="TD3-style delayed actor updates")
        sp.add_argument("--no-cer", action="store_true", help="plain uniform replay instead of CER")
        sp.add_argument("--bandwidth-mbit", type=_bandwidth, default=None)

    sp = sub.add_parser("pretrain", help="train in simulation and save the best actor/critic")
    common(sp)
    sp.add_argument("--out", required=True, help="output directory for actor.bin/critic.bin")
    sp.add_argument("--full-budget", action="store_true", help="keep training after convergence")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("transfer", help="one simulated-clock transfer run")
    common(sp)
    trainer_flags(sp)
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--plant-kf", type=float, default=10.0)
    sp.add_argument("--out", help="append the run result to this JSON-lines file")
    sp.add_argument("--event-log")
    sp.add_argument("--metrics")
    sp.add_argument("--crash-at", type=int, default=None, help="kill and restart the edge after this many training steps")
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("sweep", help="run a parameter sweep of transfer runs")
    sp.add_argument("kind", choices=["friction", "delays", "bandwidth"])
    common(sp)
    trainer_flags(sp)
    sp.add_argument("--pretrained", required=True, help="pretrained directory; may contain {k_f} for per-friction models")
    sp.add_argument("--plant-kf", type=float, default=10.0)
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--vary", choices=["plant", "pretrain"], default="plant", help="friction sweep: which side takes the grid values")
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="aggregate results into text and CSV tables")
    sp.add_argument("results", help="results directory or JSON-lines file")
    sp.add_argument("--out", help="where to write the CSV tables")
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("cloud", help="run the training service over TCP")
    common(sp, steps=False)
    trainer_flags(sp)
    sp.add_argument("--listen-addr", default="127.0.0.1:7878")
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--checkpoint-dir")
    sp.add_argument("--metrics")
    sp.add_argument("--duration", type=float, default=None, help="stop after this many seconds")
    sp.set_defaults(func=cmd_cloud, steps=None)

    sp = sub.add_parser("edge", help="run the control loop against a remote cloud")
    common(sp, steps=False)
    sp.add_argument("--cloud-addr", default="127.0.0.1:7878")
    sp.add_argument("--pretrained", required=True)
    sp.add_argument("--plant", choices=sorted(PLANTS), default="simulated")
    sp.add_argument("--plant-kf", type=float, default=10.0)
    sp.add_argument("--period-hz", type=float, default=None)
    sp.add_argument("--sim-time", action="store_true", help="tick as fast as possible instead of at the period")
    sp.add_argument("--episodes", type=int, default=None)
    sp.add_argument("--duration", type=float, default=None)
    sp.add_argument("--outcomes", help="write episode outcomes as JSON lines")
    sp.set_defaults(func=cmd_edge, steps=None)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    if args.command == "pretrain" and args.verbose is False:
        log.setLevel(logging.INFO)
    try:
        return args.func(args)
    except (OSError, BlobError, CheckpointError, KeyError) as exc:
        print(f"edgerl {args.command}: {exc}", file=sys.stderr)
        return EXIT_BAD_INPUT


if __name__ == "__main__":
    sys.exit(main())
