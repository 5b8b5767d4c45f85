import socket
import subprocess
import sys
import threading
import time

import numpy as np
import pytest

from edgerl.cloud import CloudService
from edgerl.ddpg import ActorCritic, Trainer, TrainerConfig
from edgerl.edge import DoubleBufferedActor, EdgeConfig, EdgeRuntime
from edgerl.mdp import PlantState
from edgerl.nn import ACTOR_SPEC, Mlp, serialize
from edgerl.plant import SimulatedPlant
from edgerl.realtime import CloudServer, EdgeClient, parse_addr
from edgerl.replay import ReplayBuffer
from edgerl.transport import Tag

CFG = TrainerConfig(batch_size=8, critic_delay=16, actor_delay=24)
EDGE_CFG = EdgeConfig(max_episode_steps=60, success_steps=40)


def make_cloud():
    ac = ActorCritic.fresh(CFG, np.random.default_rng(0))
    return CloudService(Trainer(ac, CFG), ReplayBuffer(10_000))


def make_edge(net, seed=0):
    plant = SimulatedPlant(state=PlantState(0.0, 0.0, 2.0, 0.0), seed=seed)
    return EdgeRuntime(plant, DoubleBufferedActor(net.copy()), EDGE_CFG, seed=seed)


def free_port():
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        return s.getsockname()[1]


def start_server(cloud, port=0, **kwargs):
    server = CloudServer(cloud, ("127.0.0.1", port), **kwargs)
    thread = threading.Thread(target=server.serve, daemon=True)
    thread.start()
    return server, thread


def test_parse_addr():
    assert parse_addr("127.0.0.1:7878") == ("127.0.0.1", 7878)
    with pytest.raises(ValueError):
        parse_addr("localhost")


def test_real_clock_session():
    cloud = make_cloud()
    server, thread = start_server(cloud)
    try:
        edge = make_edge(cloud.actor)
        client = EdgeClient(edge, server.address)
        outcomes = client.run(duration=4.0, until_converged=False)
    finally:
        server.stop.set()
        thread.join(timeout=5)
    assert outcomes
    walls = [t.wall for t in edge.ticks]
    assert len(walls) > 60
    assert max(walls) < 1 / 30
    assert cloud.trainer.experiences > 30
    assert edge.actor.applies > 0 and edge.actor.version > 0


def test_outbox_survives_until_cloud_appears():
    cloud = make_cloud()
    port = free_port()
    edge = make_edge(cloud.actor)
    client = EdgeClient(edge, ("127.0.0.1", port), sim_time=True)
    # two episodes with nobody listening: everything stays queued on the edge
    runner = threading.Thread(target=client.run, kwargs={"max_episodes": 2, "until_converged": False})
    runner.start()
    runner.join(timeout=30)
    assert not client.connected.is_set()
    queued = [p for t, p in edge.outbox if t == Tag.STATE_ACTION]
    assert len(queued) > 10

    server, thread = start_server(cloud, port)
    try:
        client2 = EdgeClient(edge, ("127.0.0.1", port), sim_time=True)
        client2.run(max_episodes=1, until_converged=False)
        deadline = time.monotonic() + 5
        while cloud.trainer.experiences < len(queued) - 4 and time.monotonic() < deadline:
            time.sleep(0.05)
    finally:
        server.stop.set()
        thread.join(timeout=5)
    assert not edge.outbox
    assert cloud.trainer.experiences >= len(queued) - 4


def test_edge_restart_keeps_replay():
    cloud = make_cloud()
    server, thread = start_server(cloud)
    try:
        first = EdgeClient(make_edge(cloud.actor), server.address, sim_time=True)
        first.run(max_episodes=3, until_converged=False)
        time.sleep(0.3)
        replay, steps = len(cloud.buffer), cloud.trainer.experiences
        assert replay > 0
        second = EdgeClient(make_edge(cloud.actor, seed=1), server.address, sim_time=True)
        second.run(max_episodes=3, until_converged=False)
        deadline = time.monotonic() + 5
        while cloud.trainer.experiences <= steps and time.monotonic() < deadline:
            time.sleep(0.05)
    finally:
        server.stop.set()
        thread.join(timeout=5)
    assert len(cloud.buffer) > replay
    assert cloud.trainer.experiences > steps
    assert cloud.session == 2


def test_spec_mismatch_stops_client():
    cloud = make_cloud()
    server, thread = start_server(cloud)
    try:
        other = Mlp(type(ACTOR_SPEC)((10, 4, 1), "tanh"))
        edge = EdgeRuntime(SimulatedPlant(), DoubleBufferedActor(other), EDGE_CFG)
        client = EdgeClient(edge, server.address, sim_time=True)
        client.run(max_episodes=50, until_converged=False)
    finally:
        server.stop.set()
        thread.join(timeout=5)
    assert client.stop.is_set() and not client.connected.is_set()
    assert cloud.session == 0


def test_checkpoint_on_close(tmp_path):
    cloud = make_cloud()
    path = tmp_path / "cloud.npz"
    server, thread = start_server(cloud, checkpoint_path=path)
    try:
        EdgeClient(make_edge(cloud.actor), server.address, sim_time=True).run(max_episodes=2, until_converged=False)
        time.sleep(0.2)
    finally:
        server.stop.set()
        thread.join(timeout=5)
    assert CloudService.restore(path).trainer.experiences == cloud.trainer.experiences


def test_cli_processes(tmp_path):
    cfg = tmp_path / "small.cfg"
    cfg.write_text("B = 8\nN_c = 16\nN_a = 24\nT_e = 60\nT_g = 40\n")
    ac = ActorCritic.fresh(CFG, np.random.default_rng(1))
    (tmp_path / "actor.bin").write_bytes(serialize(ac.actor))
    (tmp_path / "critic.bin").write_bytes(serialize(ac.critic))
    cloud = subprocess.Popen(
        [sys.executable, "-m", "edgerl", "cloud", "--config", str(cfg), "--pretrained", str(tmp_path), "--listen-addr", "127.0.0.1:0", "--duration", "20", "--checkpoint-dir", str(tmp_path / "ck")],
        stdout=subprocess.PIPE,
        text=True,
    )
    try:
        line = cloud.stdout.readline()
        assert line.startswith("listening on ")
        addr = line.split()[-1]
        outcomes = tmp_path / "outcomes.jsonl"
        edge = subprocess.run(
            [sys.executable, "-m", "edgerl", "edge", "--config", str(cfg), "--pretrained", str(tmp_path / "actor.bin"), "--cloud-addr", addr, "--duration", "3", "--outcomes", str(outcomes)],
            capture_output=True,
            text=True,
            timeout=60,
        )
        assert edge.returncode == 0, edge.stderr
        worst = float(edge.stdout.split("worst tick ")[1].split()[0])
        assert worst < 33.3
        assert outcomes.read_text().strip()
    finally:
        cloud.terminate()
        cloud.wait(timeout=30)
    assert (tmp_path / "ck" / "cloud.npz").exists()
