"""Deterministic SGD training for the small convnets.

Same seed + same data + same config reproduces weights bit-for-bit: the init
and the epoch shuffles come from one seeded Generator and all math is plain
numpy. Final weights are rounded through float32 so a checkpoint round-trip
is exact.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .layers import cross_entropy
from .model import ArchSpec, Model


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 32
    lr: float = 0.1
    momentum: float = 0.9
    seed: int = 0
    rescale_augment: bool = False
    adversarial_augment: bool = False
    adv_eps: float = 8.0


def _margin_rescale(x: np.ndarray) -> np.ndarray:
    # same map the stimulus pipeline applies: [0,255] -> [40,215]
    return 40.0 + x * (175.0 / 255.0)


def _fgsm_batch(model: Model, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    logits, caches = model.forward_cached(x)
    _, dlogits = cross_entropy(logits, y)
    dx, _ = model.backward(dlogits, caches)
    return np.clip(x + eps * np.sign(dx), 0.0, 255.0)


def train_model(arch: ArchSpec, images: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig) -> Model:
    """Train a model from scratch; metadata records the loss trajectory.

    images: (N, H, W, C) float in [0, 255] already at the model's input dims.
    """
    x_all = np.asarray(images, dtype=np.float64)
    y_all = np.asarray(labels, dtype=np.int64)
    if x_all.shape[0] != y_all.shape[0]:
        raise ValueError("images and labels disagree on N")
    if x_all.shape[0] == 0:
        raise ValueError("empty training set")
    h, w = arch.input_hw
    if x_all.shape[1:] != (h, w, arch.in_channels):
        raise ValueError(f"training images {x_all.shape[1:]} != arch input ({h}, {w}, {arch.in_channels})")
    if y_all.min() < 0 or y_all.max() >= arch.n_fine:
        raise ValueError("label outside fine-class range")

    rng = np.random.default_rng(cfg.seed)
    model = Model.build(arch)
    for layer in model.layers:
        if hasattr(layer, "init_params"):
            layer.init_params(rng)

    n = x_all.shape[0]
    velocity: dict[str, np.ndarray] = {}
    epoch_losses: list[float] = []
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        batch_losses = []
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            xb, yb = x_all[idx], y_all[idx]
            if cfg.rescale_augment:
                xb = np.concatenate([xb, _margin_rescale(xb)])
                yb = np.concatenate([yb, yb])
            if cfg.adversarial_augment:
                xb = np.concatenate([xb, _fgsm_batch(model, xb, yb, cfg.adv_eps)])
                yb = np.concatenate([yb, yb])
            logits, caches = model.forward_cached(xb)
            loss, dlogits = cross_entropy(logits, yb)
            if not np.isfinite(loss):
                raise FloatingPointError(
                    f"non-finite training loss at epoch {epoch}, batch {start // cfg.batch_size}"
                )
            _, grads = model.backward(dlogits, caches, want_param_grads=True)
            params = model.named_params()
            for key, g in grads.items():
                v = velocity.get(key)
                v = cfg.momentum * v - cfg.lr * g if v is not None else -cfg.lr * g
                velocity[key] = v
                model.set_param(key, params[key] + v)
            batch_losses.append(loss)
        epoch_losses.append(float(np.mean(batch_losses)))

    if len(epoch_losses) >= 2 and epoch_losses[-1] >= epoch_losses[0]:
        warnings.warn(
            f"training loss did not decrease ({epoch_losses[0]:.4f} -> {epoch_losses[-1]:.4f})",
            stacklevel=2,
        )

    model.quantize_weights_f32()
    model.meta = {
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "batch_size": cfg.batch_size,
        "lr": cfg.lr,
        "rescale_augment": cfg.rescale_augment,
        "adversarial_augment": cfg.adversarial_augment,
        "n_train": int(n),
        "epoch_losses": epoch_losses,
    }
    return model


def accuracy(model: Model, images: np.ndarray, labels: np.ndarray,
             batch_size: int = 128) -> float:
    """Fine-label accuracy over a set."""
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        logits = model.forward(images[start : start + batch_size])
        hits += int((np.argmax(logits, axis=1) == labels[start : start + batch_size]).sum())
    return hits / images.shape[0]
