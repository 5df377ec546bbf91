from .config import LOSS_VARIANTS, LearnerConfig
from .compose import ObsComposer
from .data import TrainData, sample_batch
from .episodes import policy_fn, run_episode
from .losses import (
    LossBreakdown, class_k, corrected_successor, loss_danger,
    loss_deriv_corrected, loss_deriv_logged, loss_deriv_nominal, loss_goal,
    loss_init, predicted_next_obs, rate_hinge, total_loss,
)
from .training import (
    HISTORY_COLUMNS, TrainResult, history_to_table, init_nets,
    load_checkpoint, save_checkpoint, train, update,
)

__all__ = [
    "LOSS_VARIANTS", "LearnerConfig", "ObsComposer", "TrainData",
    "sample_batch", "policy_fn", "run_episode", "LossBreakdown", "class_k",
    "corrected_successor", "loss_danger", "loss_deriv_corrected",
    "loss_deriv_logged", "loss_deriv_nominal", "loss_goal", "loss_init",
    "predicted_next_obs", "rate_hinge", "total_loss", "HISTORY_COLUMNS",
    "TrainResult", "history_to_table", "init_nets", "load_checkpoint",
    "save_checkpoint", "train", "update",
]
