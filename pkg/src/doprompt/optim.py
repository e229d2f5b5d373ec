"""AdamW with decoupled weight decay."""

from __future__ import annotations

import numpy as np

from .tensor import ShapeError, Tensor

__all__ = ["AdamWState", "adamw_step", "init_adamw_state", "zero_grads"]


class AdamWState:
    """First/second moment estimates plus the shared step counter."""

    def __init__(self, m: dict, v: dict, t: int = 0):
        self.m = m
        self.v = v
        self.t = t


def init_adamw_state(params: dict) -> AdamWState:
    m = {name: np.zeros_like(p.data) for name, p in params.items()}
    v = {name: np.zeros_like(p.data) for name, p in params.items()}
    return AdamWState(m, v, t=0)


def zero_grads(params: dict) -> None:
    for p in params.values():
        p.grad = None


def adamw_step(
    params: dict,
    grads: dict,
    state: AdamWState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> tuple[dict, AdamWState]:
    """One update over `params` (name -> Tensor), in place.

    Weight decay is decoupled: p -= lr * wd * p, applied separately from the
    moment-based update. Missing grads are treated as zero; the parameter
    still decays. Only names present in `params` are touched.
    """
    state.t += 1
    t = state.t
    bc1 = 1.0 - beta1**t
    bc2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ShapeError(
                f"adamw_step: grad shape {g.shape} != param shape {p.data.shape} for {name!r}"
            )
        m = state.m[name]
        v = state.v[name]
        if m.shape != p.data.shape:
            raise ShapeError(
                f"adamw_step: moment shape {m.shape} != param shape {p.data.shape} for {name!r}"
            )
        m[...] = beta1 * m + (1.0 - beta1) * g
        v[...] = beta2 * v + (1.0 - beta2) * (g * g)
        m_hat = m / bc1
        v_hat = v / bc2
        p.data = p.data - lr * m_hat / (np.sqrt(v_hat) + eps)
        if weight_decay:
            p.data = p.data - lr * weight_decay * p.data
    return params, state


def collect_grads(params: dict) -> dict:
    """Snapshot `.grad` arrays keyed like `params` (zeros where absent)."""
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def step_params(params: dict, state: AdamWState, trainable, lr, weight_decay, beta1=0.9, beta2=0.999, eps=1e-8):
    """Apply adamw_step to the subset of `params` named in `trainable`."""
    subset = {name: params[name] for name in trainable}
    adamw_step(subset, collect_grads(subset), state, lr=lr, beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay)
