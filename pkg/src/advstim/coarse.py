"""Coarse-class probabilities and the ensemble objective.

A coarse class is a set of fine labels. Its probability under one model is
the sum of fine softmax masses, computed here in logit form: the coarse
logit is logsumexp over the class's fine logits minus logsumexp over the
rest, and the probability is its sigmoid. The two are the same number by
algebra; both are shift-invariant.

The ensemble combines members by the geometric mean of their coarse
probabilities, renormalized over the binary outcome {target, not target}.
That equals sigmoid(mean of member coarse logits), so the attack loss
-log P_ens(target) is softplus(-mean logit) and its gradient flows through
each member and back through that member's preprocessing (retinal blur or
plain center crop) by the exact adjoints.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn.model import Model
from .retina import (
    BlurOperator, RetinaParams, ViewingGeometry, blur_operator, center_crop,
    center_crop_adjoint,
)

PROB_CLAMP = 1e-12


@dataclass(frozen=True)
class CoarsePartition:
    """Fine-label sets per coarse class, experiment group pairs, distractors.

    classes: coarse name -> tuple of fine-label indices (mutually disjoint).
    groups: group name -> (coarse_a, coarse_b).
    distractors: fine labels outside every coarse class.
    Every fine label in [0, n_fine) belongs to exactly one coarse class or
    the distractor pool.
    """

    n_fine: int
    classes: dict[str, tuple[int, ...]]
    groups: dict[str, tuple[str, str]]
    distractors: tuple[int, ...] = ()

    def __post_init__(self):
        seen: dict[int, str] = {}
        for name, fines in self.classes.items():
            if not fines:
                raise ValueError(f"coarse class {name!r} is empty")
            for f in fines:
                if not 0 <= f < self.n_fine:
                    raise ValueError(f"fine label {f} out of range in class {name!r}")
                if f in seen:
                    raise ValueError(f"fine label {f} in both {seen[f]!r} and {name!r}")
                seen[f] = name
        for f in self.distractors:
            if f in seen:
                raise ValueError(f"fine label {f} is both {seen[f]!r} and a distractor")
            seen[f] = "<distractor>"
        missing = [f for f in range(self.n_fine) if f not in seen]
        if missing:
            raise ValueError(f"fine labels {missing} belong to no coarse class or distractor pool")
        for gname, pair in self.groups.items():
            if len(pair) != 2 or pair[0] == pair[1]:
                raise ValueError(f"group {gname!r} must pair two distinct coarse classes")
            for cname in pair:
                if cname not in self.classes:
                    raise ValueError(f"group {gname!r} references unknown class {cname!r}")

    def target_and_rest(self, coarse_name: str) -> tuple[np.ndarray, np.ndarray]:
        """Fine indices of the class vs everything else (the complement)."""
        target = np.asarray(self.classes[coarse_name], dtype=np.int64)
        mask = np.ones(self.n_fine, dtype=bool)
        mask[target] = False
        return target, np.nonzero(mask)[0]

    def other_in_group(self, group: str, coarse_name: str) -> str:
        a, b = self.groups[group]
        if coarse_name == a:
            return b
        if coarse_name == b:
            return a
        raise ValueError(f"class {coarse_name!r} is not in group {group!r}")

    def coarse_of_fine(self, fine: int) -> str | None:
        for name, fines in self.classes.items():
            if fine in fines:
                return name
        return None

    def to_json_dict(self) -> dict:
        return {
            "n_fine": self.n_fine,
            "classes": {k: list(v) for k, v in self.classes.items()},
            "groups": {k: list(v) for k, v in self.groups.items()},
            "distractors": list(self.distractors),
        }

    @staticmethod
    def from_json_dict(d: dict) -> "CoarsePartition":
        return CoarsePartition(
            n_fine=int(d["n_fine"]),
            classes={k: tuple(v) for k, v in d["classes"].items()},
            groups={k: (v[0], v[1]) for k, v in d["groups"].items()},
            distractors=tuple(d.get("distractors", ())),
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @staticmethod
    def load(path) -> "CoarsePartition":
        return CoarsePartition.from_json_dict(json.loads(Path(path).read_text()))


def _logsumexp(v: np.ndarray) -> float:
    m = float(np.max(v))
    return m + float(np.log(np.exp(v - m).sum()))


def coarse_logit(fine_logits: np.ndarray, partition: CoarsePartition, coarse_name: str) -> float:
    """log of the coarse-class odds: lse(target fines) - lse(rest)."""
    logits = np.asarray(fine_logits, dtype=np.float64)
    if logits.shape != (partition.n_fine,):
        raise ValueError(f"expected {partition.n_fine} fine logits, got {logits.shape}")
    target, rest = partition.target_and_rest(coarse_name)
    return _logsumexp(logits[target]) - _logsumexp(logits[rest])


def coarse_probability(fine_logits: np.ndarray, partition: CoarsePartition, coarse_name: str) -> float:
    """Softmax mass of the coarse class: sigmoid of the coarse logit."""
    z = coarse_logit(fine_logits, partition, coarse_name)
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return e / (1.0 + e)


def coarse_logit_input_grad(fine_logits: np.ndarray, partition: CoarsePartition,
                            coarse_name: str) -> np.ndarray:
    """d coarse_logit / d fine_logits: within-set softmaxes with +- signs."""
    logits = np.asarray(fine_logits, dtype=np.float64)
    target, rest = partition.target_and_rest(coarse_name)
    g = np.zeros_like(logits)
    zt = logits[target] - logits[target].max()
    et = np.exp(zt)
    g[target] = et / et.sum()
    zr = logits[rest] - logits[rest].max()
    er = np.exp(zr)
    g[rest] = -er / er.sum()
    return g


def coarse_argmax(fine_logits: np.ndarray, partition: CoarsePartition) -> str | None:
    """Coarse class with the largest fine-mass sum; None on an exact tie.

    Distractor fine labels belong to no class and cannot win.
    """
    logits = np.asarray(fine_logits, dtype=np.float64)
    shift = logits.max()
    sums = {name: float(np.exp(logits[list(f)] - shift).sum()) for name, f in partition.classes.items()}
    best = max(sums.values())
    winners = [name for name, v in sums.items() if v == best]
    if len(winners) != 1:
        return None
    return winners[0]


def geometric_mean_binary(member_probs, clamp: float = PROB_CLAMP) -> tuple[float, bool]:
    """Geometric-mean combination of binary outcome probabilities.

    Returns (P, clamped) where P = gm(p) / (gm(p) + gm(1-p)) and clamped
    reports whether any member prob hit 0 or 1 in floating point and was
    pulled into [clamp, 1-clamp]. Order-invariant by construction.
    """
    ps = np.asarray(member_probs, dtype=np.float64)
    if ps.size == 0:
        raise ValueError("need at least one member probability")
    if np.any((ps < 0) | (ps > 1)):
        raise ValueError("probabilities must lie in [0, 1]")
    clamped = bool(np.any((ps <= 0.0) | (ps >= 1.0)))
    ps = np.clip(ps, clamp, 1.0 - clamp)
    # sigmoid of the mean log-odds, for numerical symmetry
    z = float(np.mean(np.log(ps) - np.log1p(-ps)))
    if z >= 0:
        p = 1.0 / (1.0 + np.exp(-z))
    else:
        e = np.exp(z)
        p = e / (1.0 + e)
    return float(p), clamped


@dataclass
class Ensemble:
    """k member models sharing one viewing geometry.

    Members whose arch has the retina flag see blur_op.apply(image); the
    rest see a plain center crop to the same post-crop dims.
    """

    members: list[Model]
    geometry: ViewingGeometry
    retina_params: RetinaParams = field(default_factory=RetinaParams)

    def __post_init__(self):
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        self.blur_op: BlurOperator = blur_operator(self.geometry, self.retina_params)
        out_px = self.blur_op.out_px
        for i, m in enumerate(self.members):
            if m.arch.input_hw != (out_px, out_px):
                raise ValueError(
                    f"member {i} input {m.arch.input_hw} != post-crop dims ({out_px}, {out_px})"
                )

    @property
    def k(self) -> int:
        return len(self.members)

    def retina_flags(self) -> list[bool]:
        return [m.arch.retina for m in self.members]

    def preprocess(self, image: np.ndarray, member: Model) -> np.ndarray:
        if member.arch.retina:
            return self.blur_op.apply(image)
        return center_crop(image)

    def member_fine_logits(self, image: np.ndarray) -> list[np.ndarray]:
        """Per-member fine logits for one full-size image; blur shared."""
        blurred = None
        cropped = None
        out = []
        for m in self.members:
            if m.arch.retina:
                if blurred is None:
                    blurred = self.blur_op.apply(image)
                out.append(m.forward(blurred))
            else:
                if cropped is None:
                    cropped = center_crop(image)
                out.append(m.forward(cropped))
        return out


def ensemble_coarse_probability(ensemble: Ensemble, image: np.ndarray,
                                partition: CoarsePartition, target: str) -> tuple[float, bool]:
    """Geometric-mean coarse-target probability for one image."""
    probs = [
        coarse_probability(lg, partition, target)
        for lg in ensemble.member_fine_logits(image)
    ]
    return geometric_mean_binary(probs)


def ensemble_loss_and_gradient(ensemble: Ensemble, image: np.ndarray,
                               partition: CoarsePartition, target: str):
    """J = -log P_ens(target | image) and dJ/dimage, exact.

    Returns (loss, gradient) with gradient at the full image size. Uses the
    identity P_ens = sigmoid(mean member coarse logit), so J is softplus of
    the negative mean logit; members are differentiated one at a time and
    their input gradients pulled back through the shared blur/crop adjoints.
    """
    x = np.asarray(image, dtype=np.float64)
    blurred = None
    cropped = None
    zs = []
    per_member = []  # (model, preprocessed input, caches, dlogits placeholder)
    for m in ensemble.members:
        if m.arch.retina:
            if blurred is None:
                blurred = ensemble.blur_op.apply(x)
            inp = blurred
        else:
            if cropped is None:
                cropped = center_crop(x)
            inp = cropped
        logits, caches = m.forward_cached(inp)
        zs.append(coarse_logit(logits[0], partition, target))
        per_member.append((m, logits[0], caches))

    z_mean = float(np.mean(zs))
    loss = float(np.logaddexp(0.0, -z_mean))  # softplus(-z)
    # dJ/dz_mean = -sigmoid(-z_mean); per member scaled by 1/k
    dz = -1.0 / (1.0 + np.exp(z_mean)) / ensemble.k

    grad_blurred = None
    grad_cropped = None
    for m, logits, caches in per_member:
        dlogits = dz * coarse_logit_input_grad(logits, partition, target)
        dinp, _ = m.backward(dlogits[None], caches)
        dinp = dinp[0]
        if m.arch.retina:
            grad_blurred = dinp if grad_blurred is None else grad_blurred + dinp
        else:
            grad_cropped = dinp if grad_cropped is None else grad_cropped + dinp

    grad = np.zeros_like(x)
    if grad_blurred is not None:
        grad += ensemble.blur_op.adjoint(grad_blurred)
    if grad_cropped is not None:
        grad += center_crop_adjoint(grad_cropped, x.shape[:2])
    return loss, grad


def member_success_bits(ensemble: Ensemble, image: np.ndarray,
                        partition: CoarsePartition, target: str) -> tuple[bool, ...]:
    """Per-member bit: coarse argmax equals the target (ties fail)."""
    return tuple(
        coarse_argmax(lg, partition) == target
        for lg in ensemble.member_fine_logits(image)
    )
