"""Training records assembled from episode logs.

Each record pairs a step with its logged successor observation, so the
final step of every episode is excluded.  Set labels: ``in_s0`` marks
comfortable clearance (the initial-set predicate), ``in_sd`` marks danger.
Membership in the barrier's current safe set is re-evaluated per gradient
step, not stored here.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class TrainData:
    obs: np.ndarray        # (M, d) observation at t
    obs_next: np.ndarray   # (M, d) logged observation at t + dt
    state: np.ndarray      # (M, ns) ego state at t
    u_nom: np.ndarray      # (M, nu) nominal control at t
    in_s0: np.ndarray      # (M,) bool
    in_sd: np.ndarray      # (M,) bool

    def __len__(self) -> int:
        return len(self.obs)

    @classmethod
    def from_logs(cls, logs) -> "TrainData":
        obs, obs_next, state, u_nom, s0, sd = [], [], [], [], [], []
        for log in logs:
            if len(log) < 2:
                continue
            obs.append(log.obs[:-1])
            obs_next.append(log.obs[1:])
            state.append(log.state[:-1])
            u_nom.append(log.u_nom[:-1])
            s0.append(log.in_s0[:-1])
            sd.append(log.danger_flag[:-1])
        if not obs:
            raise ValueError("no usable records in the provided logs")
        return cls(obs=np.concatenate(obs), obs_next=np.concatenate(obs_next),
                   state=np.concatenate(state), u_nom=np.concatenate(u_nom),
                   in_s0=np.concatenate(s0), in_sd=np.concatenate(sd))

    def subset(self, idx) -> "TrainData":
        return TrainData(self.obs[idx], self.obs_next[idx], self.state[idx],
                         self.u_nom[idx], self.in_s0[idx], self.in_sd[idx])


def sample_batch(data: TrainData, batch_size: int,
                 rng: np.random.Generator) -> TrainData:
    n = len(data)
    if batch_size >= n:
        return data
    return data.subset(rng.choice(n, size=batch_size, replace=False))
