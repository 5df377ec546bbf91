"""Learner configuration."""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

LOSS_VARIANTS = ("lp1", "lp2", "lp3", "whitebox")


@dataclass
class LearnerConfig:
    """Knobs of the co-learning loop.

    Desk-scale defaults; paper-scale values (N=2000, K=1, batch 1024,
    learning rate 1e-4) remain legal settings.  ``loss_variant`` selects
    how the barrier-decrease term is approximated; "whitebox" requires a
    differentiable true model and is only for tests.
    """
    goal_weight: float = 0.1          # weight of the goal-following term
    alpha_gain: float = 1.0           # class-K slope, 1/s
    dt: float = 0.05                  # learning interval, s (= simulator step)
    episodes_per_iter: int = 2        # K
    iterations: int = 200             # N
    update_iters: int = 100           # gradient steps per update
    batch_size: int = 256
    learning_rate: float = 1e-3
    loss_variant: str = "lp3"
    cbf_hidden: tuple = (128, 128, 128)
    ctrl_hidden: tuple = (128, 128, 128)
    checkpoint_interval: int = 50     # iterations between saved snapshots
    sample_budget: int | None = None  # cap on total collected samples

    def __post_init__(self):
        if self.loss_variant not in LOSS_VARIANTS:
            raise ValueError(f"unknown loss variant {self.loss_variant!r}")
        if self.goal_weight < 0 or self.alpha_gain <= 0 or self.dt <= 0:
            raise ValueError("invalid learner configuration")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cbf_hidden"] = list(self.cbf_hidden)
        d["ctrl_hidden"] = list(self.ctrl_hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LearnerConfig":
        d = dict(d)
        if "cbf_hidden" in d:
            d["cbf_hidden"] = tuple(d["cbf_hidden"])
        if "ctrl_hidden" in d:
            d["ctrl_hidden"] = tuple(d["ctrl_hidden"])
        return cls(**d)
