"""Adam optimizer over flat parameter vectors."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class NonFiniteGradient(FloatingPointError):
    """A gradient contained NaN/Inf; the update is refused."""


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_init(n_params: int, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> AdamState:
    return AdamState(m=np.zeros(n_params), v=np.zeros(n_params), t=0,
                     lr=lr, beta1=beta1, beta2=beta2, eps=eps)


def adam_step(params: np.ndarray, grad: np.ndarray, st: AdamState) -> np.ndarray:
    """One bias-corrected Adam update; mutates ``st``, returns new params."""
    if params.shape != grad.shape:
        raise ValueError(f"shape mismatch: {params.shape} vs {grad.shape}")
    if not np.all(np.isfinite(grad)):
        bad = int(np.sum(~np.isfinite(grad)))
        raise NonFiniteGradient(
            f"{bad}/{grad.size} non-finite gradient entries at step {st.t + 1}")
    st.t += 1
    st.m *= st.beta1
    st.m += (1.0 - st.beta1) * grad
    st.v *= st.beta2
    st.v += (1.0 - st.beta2) * grad * grad
    m_hat = st.m / (1.0 - st.beta1 ** st.t)
    v_hat = st.v / (1.0 - st.beta2 ** st.t)
    v_hat = np.sqrt(v_hat, out=v_hat)
    v_hat += st.eps
    m_hat /= v_hat
    m_hat *= st.lr
    return params - m_hat
