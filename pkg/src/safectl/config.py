"""Run configuration: file + flag resolution with strict key checking."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .cbflearn import LearnerConfig
from .dynamics import (
    DroneParams, ShipParams, drone_blackbox, make_perturbed_truth,
    ship_blackbox,
)
from .env import Scenario, city_scenario, valley_scenario


class ConfigError(ValueError):
    """Unknown keys, bad values, or inconsistent settings."""


@dataclass
class RunConfig:
    """Everything a pipeline run needs; every field has a usable default."""
    env: str = "city"                    # city | valley
    seed: int = 0
    out: str = "runs/latest"
    jobs: int = 1
    # scenario
    npc_count: int | None = None         # None: env default (32 / 8)
    npc_mode: str = "static"
    scenario_seed: int = 0
    corridor_frac: float | None = None
    corridor_radius: float | None = None
    # dynamics
    dt_sim: float | None = None          # None: env default (0.05 / 0.2)
    noise_sigma: float = 0.0
    perturb_eps: float = 0.0
    # nominal model
    nominal_kind: str | None = None      # None: linear (city) / mlp (valley)
    nominal_samples: int | None = None   # None: 10_000 / 50_000
    nominal_hidden: int = 32
    nominal_train_steps: int = 4000
    # evaluation / ablation
    eval_episodes: int = 10
    ablation_seeds: tuple = (0, 1, 2)
    ablation_error_targets: tuple = (0.0, 0.3, 0.5)
    ablation_budgets: tuple | None = None  # None: {0, B/10, B} from learner
    learner: LearnerConfig = field(default_factory=LearnerConfig)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["learner"] = self.learner.to_dict()
        for key in ("ablation_seeds", "ablation_error_targets",
                    "ablation_budgets"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        raw = dict(raw)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if "learner" in raw:
            try:
                raw["learner"] = LearnerConfig.from_dict(raw["learner"])
            except TypeError as exc:
                raise ConfigError(f"bad learner section: {exc}") from exc
        for key in ("ablation_seeds", "ablation_error_targets",
                    "ablation_budgets"):
            if raw.get(key) is not None:
                raw[key] = tuple(raw[key])
        try:
            cfg = cls(**raw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if cfg.env not in ("city", "valley"):
            raise ConfigError(f"unknown env {cfg.env!r}")
        if cfg.npc_mode not in ("static", "moving", "both"):
            raise ConfigError(f"unknown npc mode {cfg.npc_mode!r}")
        return cfg


def load_config(path: str | None, overrides: dict | None = None) -> RunConfig:
    """File values then flag overrides; learner keys live in 'learner'."""
    raw = {}
    if path is not None:
        raw = json.loads(Path(path).read_text())
        if not isinstance(raw, dict):
            raise ConfigError("config file must hold a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key.startswith("learner."):
            raw.setdefault("learner", {})
            raw["learner"][key.split(".", 1)[1]] = value
        else:
            raw[key] = value
    return RunConfig.from_dict(raw)


def build_scenario(cfg: RunConfig) -> Scenario:
    make = city_scenario if cfg.env == "city" else valley_scenario
    kw = dict(npc_mode="static" if cfg.npc_mode == "both" else cfg.npc_mode,
              seed=cfg.scenario_seed)
    if cfg.npc_count is not None:
        kw["npc_count"] = cfg.npc_count
    if cfg.corridor_frac is not None:
        kw["corridor_frac"] = cfg.corridor_frac
    if cfg.corridor_radius is not None:
        kw["corridor_radius"] = cfg.corridor_radius
    return make(**kw)


def build_blackbox(cfg: RunConfig, seed: int = 0):
    """True dynamics per config; perturb_eps shifts the hidden derivative."""
    if cfg.env == "city":
        params = DroneParams(sigma=cfg.noise_sigma)
        if cfg.dt_sim is not None:
            params.dt = cfg.dt_sim
        bb = drone_blackbox(params, seed=seed)
    else:
        params = ShipParams(sigma=cfg.noise_sigma)
        if cfg.dt_sim is not None:
            params.dt = cfg.dt_sim
        bb = ship_blackbox(params, seed=seed)
    if cfg.perturb_eps > 0.0:
        bb = make_perturbed_truth(bb, cfg.perturb_eps)
    return bb


def resolved_learner(cfg: RunConfig, bb) -> LearnerConfig:
    """Learner config with the learning interval pinned to the simulator."""
    if abs(cfg.learner.dt - bb.dt) > 1e-12:
        return dataclasses.replace(cfg.learner, dt=bb.dt)
    return cfg.learner


def echo_config(cfg: RunConfig, out_dir: Path) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(
        json.dumps(cfg.to_dict(), indent=1, sort_keys=True) + "\n")
