"""Iterative targeted perturbations against a coarse-class ensemble.

Each step moves the image along the negative sign of the ensemble loss
gradient by step_size, then re-projects into the l-inf box of radius epsilon
around the source (and the pixel value range). The finished perturbation is
scaled so its l-inf norm equals epsilon exactly, and the per-member success
bits are recomputed on that finalized image; the retention rule (all members
fooled, or at least m of k) then decides whether the stimulus is kept.

Sources must live inside the intensity margin [40, 215], so the epsilon-box
never leaves [0, 255] for epsilon <= 40 and the vertically-flipped control
perturbation stays valid on the same source.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .coarse import CoarsePartition, Ensemble, ensemble_loss_and_gradient, member_success_bits

MARGIN_LO = 40.0
MARGIN_HI = 215.0


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float = 32.0
    step_size: float = 2.0
    max_iters: int | None = None  # None: 2 * epsilon / step_size + 16
    retention_m: int | None = None  # None: every member must be fooled
    clip_min: float = 0.0
    clip_max: float = 255.0
    # export fidelity: when set, candidate deltas are snapped to the 1/scale
    # fixed-point grid (the stored artifact) before success is judged, and
    # eval_8bit additionally judges success on the rounded 8-bit render, so a
    # retained record is guaranteed to fool the members as actually served
    quantize_scale: int | None = None
    eval_8bit: bool = False

    def __post_init__(self):
        if not 0.0 < self.step_size <= self.epsilon:
            raise ValueError("need 0 < step_size <= epsilon")
        if self.max_iters is not None and self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.retention_m is not None and self.retention_m < 1:
            raise ValueError("retention_m must be >= 1")
        if self.clip_min >= self.clip_max:
            raise ValueError("empty pixel range")
        if self.quantize_scale is not None:
            if self.quantize_scale < 1:
                raise ValueError("quantize_scale must be >= 1")
            if not float(self.epsilon * self.quantize_scale).is_integer():
                raise ValueError("epsilon must sit on the fixed-point grid")

    @property
    def iters(self) -> int:
        if self.max_iters is not None:
            return self.max_iters
        return int(2.0 * self.epsilon / self.step_size) + 16


@dataclass
class PerturbationRecord:
    source_id: str
    group: str
    target: str
    condition: str  # "adv" or "false"
    epsilon: float
    delta: np.ndarray  # finalized (or zeros when the attack never moved)
    success_bits: tuple[bool, ...]
    retained: bool
    iterations: int
    loss_first: float
    loss_last: float
    iter_linf: list[float] = field(default_factory=list)  # ||delta||_inf after each step


def retention_filter(bits, retention_m: int | None = None) -> bool:
    """All-members rule when retention_m is None, else at least m of k.

    Ties in the underlying coarse argmax already arrive as False bits.
    """
    bits = tuple(bool(b) for b in bits)
    if retention_m is None:
        return all(bits)
    if retention_m > len(bits):
        raise ValueError(f"retention_m {retention_m} exceeds member count {len(bits)}")
    return sum(bits) >= retention_m


def finalize_perturbation_norm(image: np.ndarray, x_adv: np.ndarray, epsilon: float) -> np.ndarray:
    """Return delta = x_adv - image rescaled so ||delta||_inf == epsilon exactly.

    Signs are preserved pointwise; elements attaining the max magnitude are
    assigned +-epsilon outright so the norm is exact in floating point. The
    finished stimulus is image + delta. A zero perturbation cannot be
    normalized and is rejected.
    """
    x0 = np.asarray(image, dtype=np.float64)
    delta = np.asarray(x_adv, dtype=np.float64) - x0
    m = float(np.abs(delta).max())
    if m == 0.0:
        raise ValueError("zero perturbation cannot be scaled to the target norm")
    if m > epsilon * (1.0 + 1e-9):
        raise ValueError(f"perturbation norm {m} already exceeds epsilon {epsilon}")
    scaled = delta * (epsilon / m)
    np.clip(scaled, -epsilon, epsilon, out=scaled)
    at_max = np.abs(delta) == m
    scaled[at_max] = np.sign(delta[at_max]) * epsilon
    return scaled


def _candidate_delta(x0: np.ndarray, x: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    delta = finalize_perturbation_norm(x0, x, cfg.epsilon)
    if cfg.quantize_scale is not None:
        s = float(cfg.quantize_scale)
        delta = np.rint(delta * s) / s
    return delta


def _artifact(x0: np.ndarray, delta: np.ndarray, cfg: AttackConfig) -> np.ndarray:
    img = x0 + delta
    if cfg.eval_8bit:
        img = np.rint(np.clip(img, cfg.clip_min, cfg.clip_max))
    return img


def _check_margin(image: np.ndarray) -> np.ndarray:
    x = np.asarray(image, dtype=np.float64)
    if x.min() < MARGIN_LO - 1e-9 or x.max() > MARGIN_HI + 1e-9:
        raise ValueError(
            f"source intensities [{x.min():.2f}, {x.max():.2f}] outside the attack margin "
            f"[{MARGIN_LO}, {MARGIN_HI}]; rescale first"
        )
    return x


def iterative_targeted_attack(image: np.ndarray, target: str, group: str,
                              ensemble: Ensemble, partition: CoarsePartition,
                              cfg: AttackConfig, source_id: str = "",
                              condition: str = "adv") -> PerturbationRecord:
    """Run the sign-step attack; stops early once the finalized candidate
    passes the retention rule. The returned record's delta and success bits
    always describe the norm-finalized image."""
    x0 = _check_margin(image)
    lo = np.maximum(x0 - cfg.epsilon, cfg.clip_min)
    hi = np.minimum(x0 + cfg.epsilon, cfg.clip_max)

    x = x0.copy()
    loss_first: float | None = None
    loss_last = math.nan
    iter_linf: list[float] = []
    used = 0
    for _ in range(cfg.iters):
        loss, grad = ensemble_loss_and_gradient(ensemble, x, partition, target)
        if not (math.isfinite(loss) and np.isfinite(grad).all()):
            raise FloatingPointError(
                f"non-finite loss/gradient at iteration {used + 1} "
                f"(source {source_id!r}, target {target!r})"
            )
        if loss_first is None:
            loss_first = loss
        loss_last = loss
        x = np.clip(x - cfg.step_size * np.sign(grad), lo, hi)
        used += 1
        linf = float(np.abs(x - x0).max())
        if linf > cfg.epsilon * (1.0 + 1e-12):
            raise AssertionError("box invariant violated")  # clip above makes this unreachable
        iter_linf.append(linf)
        if linf > 0.0:
            delta = _candidate_delta(x0, x, cfg)
            bits = member_success_bits(ensemble, _artifact(x0, delta, cfg), partition, target)
            if retention_filter(bits, cfg.retention_m):
                return PerturbationRecord(
                    source_id=source_id, group=group, target=target, condition=condition,
                    epsilon=cfg.epsilon, delta=delta, success_bits=bits,
                    retained=True, iterations=used, loss_first=loss_first,
                    loss_last=loss_last, iter_linf=iter_linf,
                )

    if float(np.abs(x - x0).max()) == 0.0:
        # degenerate (e.g. zero gradient throughout): unchanged image
        bits = member_success_bits(ensemble, x0, partition, target)
        return PerturbationRecord(
            source_id=source_id, group=group, target=target, condition=condition,
            epsilon=cfg.epsilon, delta=np.zeros_like(x0), success_bits=bits,
            retained=False, iterations=used,
            loss_first=loss_first if loss_first is not None else math.nan,
            loss_last=loss_last, iter_linf=iter_linf,
        )

    delta = _candidate_delta(x0, x, cfg)
    bits = member_success_bits(ensemble, _artifact(x0, delta, cfg), partition, target)
    return PerturbationRecord(
        source_id=source_id, group=group, target=target, condition=condition,
        epsilon=cfg.epsilon, delta=delta, success_bits=bits,
        retained=retention_filter(bits, cfg.retention_m), iterations=used,
        loss_first=loss_first, loss_last=loss_last, iter_linf=iter_linf,
    )


def make_flip_control(image: np.ndarray, delta: np.ndarray,
                      clip_min: float = 0.0, clip_max: float = 255.0) -> np.ndarray:
    """Control stimulus: the same perturbation flipped top-to-bottom.

    Flipping permutes pixels, so the intensity histogram and every p-norm of
    the perturbation are untouched; only spatial correspondence breaks.
    """
    x0 = np.asarray(image, dtype=np.float64)
    d = np.asarray(delta, dtype=np.float64)
    if d.shape != x0.shape:
        raise ValueError("delta shape must match image")
    return np.clip(x0 + np.flipud(d), clip_min, clip_max)


def make_false_stimulus(distractor_image: np.ndarray, distractor_fine: int,
                        group: str, target: str, ensemble: Ensemble,
                        partition: CoarsePartition, cfg: AttackConfig,
                        source_id: str = "") -> PerturbationRecord:
    """Attack a distractor image (true class outside the group) toward one of
    the group's classes. Callers alternate the target to keep counts balanced."""
    fine_class = partition.coarse_of_fine(distractor_fine)
    pair = partition.groups[group]
    if fine_class in pair:
        raise ValueError(
            f"fine label {distractor_fine} belongs to group class {fine_class!r}; "
            "false stimuli need sources from outside the group"
        )
    if target not in pair:
        raise ValueError(f"target {target!r} not in group {group!r}")
    return iterative_targeted_attack(
        distractor_image, target, group, ensemble, partition, cfg,
        source_id=source_id, condition="false",
    )


def default_false_retention(k: int) -> int:
    """m for the at-least-m-of-k rule on mismatched stimuli: ceil(0.7 k)."""
    return max(1, math.ceil(0.7 * k))
