"""Shared helpers: finite-difference gradient checking and tiny model builders."""

import numpy as np
import pytest

from doprompt import tensor as T
from doprompt.config import DataConfig, RunConfig, TrainConfig
from doprompt.vit import ViTConfig


def central_diff(f, x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar f at x, one coordinate at a time."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.abs(analytic - numeric)
    den = np.maximum(np.abs(analytic) + np.abs(numeric), 1e-8)
    return float((num / den).max())


def norm_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """L2-relative error; the right metric when FD noise dwarfs tiny entries."""
    a = np.asarray(analytic, dtype=np.float64).reshape(-1)
    n = np.asarray(numeric, dtype=np.float64).reshape(-1)
    return float(np.linalg.norm(a - n) / max(np.linalg.norm(a), np.linalg.norm(n), 1e-12))


def check_gradient(build_loss, params, h=1e-5, tol=1e-6, seed_grads=True):
    """Compare backward() grads against central differences for each param.

    `build_loss` re-evaluates the scalar loss from the current param data;
    `params` is a dict of name -> Tensor whose .data arrays are perturbed in
    place. Call under float64 for tight tolerances.
    """
    for p in params.values():
        p.grad = None
    loss = build_loss()
    T.backward(loss)
    worst = 0.0
    for name, p in params.items():
        numeric = central_diff(lambda: build_loss().item(), p.data, h=h)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        err = rel_error(analytic, numeric)
        assert err < tol, f"gradient mismatch for {name}: rel err {err:.3g} >= {tol}"
        worst = max(worst, err)
    return worst


@pytest.fixture
def tiny_vit_cfg():
    return ViTConfig(
        image_size=8,
        patch_size=4,
        channels=3,
        embed_dim=8,
        depth=1,
        num_heads=2,
        mlp_ratio=2.0,
        dropout_rate=0.0,
        num_classes=3,
    )


def tiny_run_config(**train_kwargs) -> RunConfig:
    defaults = dict(
        steps=10,
        batch_per_domain=4,
        learning_rate=1e-3,
        weight_decay=1e-2,
        dropout=0.0,
        lam=1.0,
        prompt_length=2,
        seed=0,
        eval_interval=5,
    )
    defaults.update(train_kwargs)
    train = TrainConfig(**defaults)
    vit_cfg = ViTConfig(
        image_size=32,
        patch_size=8,
        channels=3,
        embed_dim=16,
        depth=1,
        num_heads=2,
        mlp_ratio=2.0,
        dropout_rate=train.dropout,
        num_classes=5,
    )
    return RunConfig(train=train, vit=vit_cfg, data=DataConfig(num_domains=4, per_domain_count=40))
