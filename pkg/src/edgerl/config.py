"""Run configuration: one object bundling the task, plant, edge and trainer settings.

Config files are plain ``key = value`` lines (an optional ``[run]`` header is
accepted). Keys use the short hyperparameter names::

    x_max = 0.34
    alpha_dot_max = 20
    d_T = 0.05
    k_f = 10
    T_e = 1000
    T_g = 750
    delta = 5
    u = 0.1
    v = 20
    N_c = 3500
    N_a = 5000
    B = 128
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field, replace
from pathlib import Path

from .ddpg import TrainerConfig
from .edge import EdgeConfig
from .mdp import MdpConfig
from .plant import PlantConfig

# short name -> (section, attribute, type)
KEYS = {
    "x_max": ("mdp", "x_max", float),
    "alpha_dot_max": ("mdp", "alpha_dot_max", float),
    "d_T": ("mdp", "d_target", float),
    "delta": ("mdp", "delta", float),
    "u": ("mdp", "u", float),
    "v": ("mdp", "v", float),
    "k_f": ("plant", "k_f", float),
    "T_e": ("edge", "max_episode_steps", int),
    "T_g": ("edge", "success_steps", int),
    "N_c": ("trainer", "critic_delay", int),
    "N_a": ("trainer", "actor_delay", int),
    "B": ("trainer", "batch_size", int),
    "gamma": ("trainer", "gamma", float),
    "tau": ("trainer", "tau", float),
    "actor_lr": ("trainer", "actor_lr", float),
    "critic_lr": ("trainer", "critic_lr", float),
    "exploration_std": ("edge", "exploration_std", float),
    "replay_capacity": ("run", "replay_capacity", int),
    "transfer_replay_capacity": ("run", "transfer_replay_capacity", int),
    "pretrain_steps": ("run", "pretrain_steps", int),
    "transfer_steps": ("run", "transfer_steps", int),
    "ou_decay_steps": ("run", "ou_decay_steps", int),
}


@dataclass(frozen=True)
class RunConfig:
    mdp: MdpConfig = field(default_factory=MdpConfig)
    plant: PlantConfig = field(default_factory=PlantConfig)
    edge: EdgeConfig = field(default_factory=EdgeConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    replay_capacity: int = 1_000_000  # pretraining
    transfer_replay_capacity: int = 200_000
    pretrain_steps: int = 1_000_000
    transfer_steps: int = 200_000
    ou_decay_steps: int = 500_000

    def __post_init__(self):
        if self.plant.x_max != self.mdp.x_max:
            object.__setattr__(self, "plant", replace(self.plant, x_max=self.mdp.x_max))
        if self.mdp.pole_length != self.plant.pole_length:
            raise ValueError("task and plant disagree on the pole length")

    def with_overrides(self, values: dict[str, str | int | float]) -> "RunConfig":
        groups: dict[str, dict] = {"mdp": {}, "plant": {}, "edge": {}, "trainer": {}, "run": {}}
        for key, raw in values.items():
            if key not in KEYS:
                raise KeyError(f"unknown config key {key!r}; known: {', '.join(KEYS)}")
            section, attr, typ = KEYS[key]
            groups[section][attr] = typ(raw)
        return replace(
            self,
            mdp=replace(self.mdp, **groups["mdp"]),
            plant=replace(self.plant, **groups["plant"]),
            edge=replace(self.edge, **groups["edge"]),
            trainer=replace(self.trainer, **groups["trainer"]),
            **groups["run"],
        )

    def as_flat(self) -> dict[str, float | int]:
        parts = {"mdp": self.mdp, "plant": self.plant, "edge": self.edge, "trainer": self.trainer, "run": self}
        return {key: getattr(parts[section], attr) for key, (section, attr, _) in KEYS.items()}


def parse_config_text(text: str) -> dict[str, str]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    parser.optionxform = str  # keys are case sensitive (T_e vs t_e)
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    parser.read_string(text)
    values: dict[str, str] = {}
    for section in parser.sections():
        values.update(parser[section])
    return values


def load_config(path: str | Path | None, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    if path is None:
        return base
    return base.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8")))
