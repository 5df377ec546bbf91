"""Successor observations as differentiable functions of the ego state.

Training needs the observation the ego *would* see after a predicted ego
transition, holding everything exogenous (NPCs, reference point) at its
current-step value.  The map from ego state to observation is affine for
the drone layout; the ship's relative-velocity block additionally rotates
body speeds through the heading, which is built from sin/cos tape ops.

Constants are derived per record from (obs_t, s_t), so a zero predicted
motion reproduces obs_t and the gradient of the composed observation with
respect to the predicted ego state matches the true observation map.
"""

from __future__ import annotations

import numpy as np

from ..diffcore import Tape
from ..env import ObsLayout


class ObsComposer:
    def __init__(self, kind: str, layout: ObsLayout, npc_count: int):
        self.kind = kind
        self.layout = layout
        lay = layout
        ns, m, k = lay.state_dim, lay.pos_dim, lay.n_slots
        n_real = min(k, npc_count)

        t_mat = np.zeros((lay.total, ns))
        t_mat[:ns, :ns] = np.eye(ns)
        mask = np.ones(lay.total)
        for c in range(m):
            for i in range(k):
                rp = lay.relpos_start + c * k + i
                rv = lay.relvel_start + c * k + i
                t_mat[rp, c] = -1.0
                if kind == "city":
                    t_mat[rv, 3 + c] = -1.0
                if i >= n_real:
                    mask[rp] = 0.0
                    mask[rv] = 0.0
            t_mat[lay.ref_start + c, c] = -1.0
        self.t_mat = t_mat
        self.mask = mask
        if kind == "valley":
            px = np.zeros(lay.total)
            py = np.zeros(lay.total)
            px[lay.relvel_start:lay.relvel_start + k] = mask[lay.relvel_start:lay.relvel_start + k]
            py[lay.relvel_start + k:lay.relvel_start + 2 * k] = \
                mask[lay.relvel_start + k:lay.relvel_start + 2 * k]
            self.p_x = px.reshape(-1, 1)
            self.p_y = py.reshape(-1, 1)
            self.sel_th = np.eye(ns)[2:3]
            self.sel_u = np.eye(ns)[3:4]
            self.sel_v = np.eye(ns)[4:5]

    def _world_vel_cols(self, s: np.ndarray):
        th, su, sv = s[:, 2:3], s[:, 3:4], s[:, 4:5]
        return (su * np.cos(th) - sv * np.sin(th),
                su * np.sin(th) + sv * np.cos(th))

    def constants(self, obs_t: np.ndarray, s_t: np.ndarray) -> np.ndarray:
        """Per-record constant vector; composing at s_t returns obs_t."""
        c = obs_t - self.mask * np.matmul(s_t, self.t_mat.T)
        if self.kind == "valley":
            vx, vy = self._world_vel_cols(s_t)
            c = c + self.p_x.T * vx + self.p_y.T * vy
        return c

    def build(self, tape: Tape, s_node: int, constants: np.ndarray) -> int:
        """Observation node for a batch of predicted ego states (B, ns)."""
        affine = tape.mul(tape.matvec(tape.const(self.t_mat), s_node),
                          tape.const(self.mask))
        out = tape.add(tape.const(constants), affine)
        if self.kind == "valley":
            th = tape.matvec(tape.const(self.sel_th), s_node)
            su = tape.matvec(tape.const(self.sel_u), s_node)
            sv = tape.matvec(tape.const(self.sel_v), s_node)
            cth, sth = tape.cos(th), tape.sin(th)
            vx = tape.sub(tape.mul(su, cth), tape.mul(sv, sth))
            vy = tape.add(tape.mul(su, sth), tape.mul(sv, cth))
            out = tape.sub(out, tape.matvec(tape.const(self.p_x), vx))
            out = tape.sub(out, tape.matvec(tape.const(self.p_y), vy))
        return out
