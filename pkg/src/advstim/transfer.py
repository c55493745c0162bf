"""Model evaluation across stimulus conditions, plus attack ablation sweeps.

evaluate_models scores each model (ensemble members flagged "train",
held-out models flagged "test") on every pool stimulus: accuracy against the
true coarse class where one exists, and attack success against the
adversarial target where one exists. For flipped controls the success column
asks whether the model picks the class the perturbation targeted before it
was flipped. ablation_sweep rebuilds stimuli over a grid of perturbation
sizes and ensemble prefix sizes and measures held-out success per cell.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .attack import AttackConfig, iterative_targeted_attack
from .coarse import CoarsePartition, Ensemble, coarse_argmax
from .nn.model import Model
from .retina import RetinaParams, ViewingGeometry
from .stats import paired_success_sign_test
from .stimuli import StimulusRecord, read_stimulus_png, rescale_to_margin, write_stimulus_png

ROLES = ("train", "test")


@dataclass(frozen=True)
class NamedModel:
    model_id: str
    role: str  # "train": attack-ensemble member; "test": held out
    model: Model

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")


@dataclass
class StimulusOutcome:
    model_id: str
    stimulus_id: str
    source_id: str
    group: str
    condition: str
    predicted: str | None  # None on an exact coarse tie
    correct: bool | None  # vs true class; None for false stimuli
    target_hit: bool | None  # vs adversarial target; None for clean images


@dataclass
class EvalCell:
    model_id: str
    role: str
    group: str
    condition: str
    n: int
    n_correct: int | None
    n_target: int | None

    @property
    def accuracy(self) -> float | None:
        return None if self.n_correct is None else self.n_correct / self.n

    @property
    def success(self) -> float | None:
        return None if self.n_target is None else self.n_target / self.n


@dataclass
class EvalReport:
    cells: list[EvalCell]
    outcomes: list[StimulusOutcome]

    def _pool(self, model_id: str, condition: str, group: str | None,
              field: str) -> float:
        num = 0
        den = 0
        for c in self.cells:
            if c.model_id != model_id or c.condition != condition:
                continue
            if group is not None and c.group != group:
                continue
            val = getattr(c, field)
            if val is None:
                continue
            num += val
            den += c.n
        if den == 0:
            raise ValueError(f"no {condition!r} cells for model {model_id!r}")
        return num / den

    def accuracy(self, model_id: str, condition: str, group: str | None = None) -> float:
        return self._pool(model_id, condition, group, "n_correct")

    def success(self, model_id: str, condition: str, group: str | None = None) -> float:
        return self._pool(model_id, condition, group, "n_target")

    def to_json_dict(self) -> dict:
        return {
            "cells": [
                {"model_id": c.model_id, "role": c.role, "group": c.group,
                 "condition": c.condition, "n": c.n, "n_correct": c.n_correct,
                 "n_target": c.n_target, "accuracy": c.accuracy,
                 "success": c.success}
                for c in self.cells
            ],
        }

    def save_json(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["model_id", "role", "group", "condition", "n",
                        "accuracy", "success"])
            for c in self.cells:
                w.writerow([
                    c.model_id, c.role, c.group, c.condition, c.n,
                    "" if c.accuracy is None else f"{c.accuracy:.6f}",
                    "" if c.success is None else f"{c.success:.6f}",
                ])


def _implied_target(rec: StimulusRecord, partition: CoarsePartition) -> str | None:
    if rec.condition in ("adv", "false"):
        return rec.target
    if rec.condition == "flip":
        return partition.other_in_group(rec.group, rec.true_class)
    return None


def evaluate_models(models: list[NamedModel], geometry: ViewingGeometry,
                    records: list[StimulusRecord], pool_dir,
                    partition: CoarsePartition,
                    retina_params: RetinaParams | None = None) -> EvalReport:
    """Score every model on every stimulus; deterministic in input order."""
    if len({m.model_id for m in models}) != len(models):
        raise ValueError("duplicate model ids")
    ens = Ensemble([m.model for m in models], geometry,
                   retina_params if retina_params is not None else RetinaParams())
    pool_dir = Path(pool_dir)

    outcomes: list[StimulusOutcome] = []
    for rec in records:
        img = read_stimulus_png(pool_dir / rec.path)
        if img.shape[:2] != (geometry.image_px, geometry.image_px):
            raise ValueError(
                f"stimulus {rec.id} is {img.shape[:2]}, geometry expects "
                f"({geometry.image_px}, {geometry.image_px})")
        target = _implied_target(rec, partition)
        for nm, logits in zip(models, ens.member_fine_logits(img)):
            pred = coarse_argmax(logits, partition)
            outcomes.append(StimulusOutcome(
                model_id=nm.model_id, stimulus_id=rec.id, source_id=rec.source_id,
                group=rec.group, condition=rec.condition, predicted=pred,
                correct=None if rec.true_class is None else pred == rec.true_class,
                target_hit=None if target is None else pred == target,
            ))

    keyed: dict[tuple, list[StimulusOutcome]] = {}
    roles = {m.model_id: m.role for m in models}
    for o in outcomes:
        keyed.setdefault((o.model_id, o.group, o.condition), []).append(o)
    cells = []
    for (model_id, group, condition), rows in sorted(keyed.items()):
        corr = [o.correct for o in rows if o.correct is not None]
        hit = [o.target_hit for o in rows if o.target_hit is not None]
        cells.append(EvalCell(
            model_id=model_id, role=roles[model_id], group=group,
            condition=condition, n=len(rows),
            n_correct=sum(corr) if corr else None,
            n_target=sum(hit) if hit else None,
        ))
    return EvalReport(cells=cells, outcomes=outcomes)


@dataclass
class PairedComparison:
    """Discordant-pair binomial test that adv beats flip on one model."""

    n_pairs: int
    adv_only: int  # adv hit, flip missed
    flip_only: int  # flip hit, adv missed
    p_value: float  # P(X >= adv_only), X ~ Binomial(adv_only + flip_only, 1/2)


def flip_adv_comparison(report: EvalReport, model_id: str) -> PairedComparison:
    """Pair adv and flip outcomes of the same source and compare hits."""
    adv = {(o.source_id, o.group): o.target_hit for o in report.outcomes
           if o.model_id == model_id and o.condition == "adv"}
    flip = {(o.source_id, o.group): o.target_hit for o in report.outcomes
            if o.model_id == model_id and o.condition == "flip"}
    keys = sorted(set(adv) & set(flip))
    if not keys:
        raise ValueError(f"no adv/flip pairs for model {model_id!r}")
    b = sum(1 for k in keys if adv[k] and not flip[k])
    c = sum(1 for k in keys if flip[k] and not adv[k])
    return PairedComparison(n_pairs=len(keys), adv_only=b, flip_only=c,
                            p_value=paired_success_sign_test(b, c))


# ---------------------------------------------------------------------------
# ablation sweeps

@dataclass
class SweepCell:
    variant: str
    epsilon: float
    ensemble_size: int
    model_id: str
    n: int
    n_success: int

    @property
    def success(self) -> float:
        return self.n_success / self.n


@dataclass
class SweepReport:
    cells: list[SweepCell]

    def save_csv(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "epsilon", "ensemble_size", "model_id",
                        "n", "n_success", "success"])
            for c in self.cells:
                w.writerow([c.variant, c.epsilon, c.ensemble_size, c.model_id,
                            c.n, c.n_success, f"{c.success:.6f}"])


def ablation_sweep(sources, variants: dict[str, list[Model]],
                   geometry: ViewingGeometry, partition: CoarsePartition,
                   eval_models: list[NamedModel], eps_list, prefix_sizes,
                   out_dir, step_size: float = 2.0,
                   retina_params: RetinaParams | None = None) -> SweepReport:
    """Attack each source over a (variant, epsilon, ensemble-prefix) grid.

    sources: (source_id, group, image_0_255, true_coarse) tuples. eps 0 means
    the clean rescaled image (nothing to attack). Every attacked stimulus is
    kept regardless of retention; the sweep measures raw transfer rates. Grid
    images land under out_dir/<variant>/eps<e>_k<k>/.
    """
    eps_list = [float(e) for e in eps_list]
    if eps_list != sorted(eps_list) or len(set(eps_list)) != len(eps_list):
        raise ValueError("eps list must be strictly ascending")
    if any(e < 0 for e in eps_list):
        raise ValueError("eps must be non-negative")
    prefix_sizes = [int(k) for k in prefix_sizes]
    for name, members in variants.items():
        if max(prefix_sizes) > len(members):
            raise ValueError(f"prefix size exceeds variant {name!r} ensemble")
    if min(prefix_sizes) < 1:
        raise ValueError("prefix sizes must be >= 1")
    rp = retina_params if retina_params is not None else RetinaParams()
    out_dir = Path(out_dir)

    eval_ens = Ensemble([m.model for m in eval_models], geometry, rp)
    cells: list[SweepCell] = []
    for vname, members in variants.items():
        for eps in eps_list:
            for ksize in prefix_sizes:
                attack_ens = Ensemble(members[:ksize], geometry, rp)
                hits = {m.model_id: 0 for m in eval_models}
                n = 0
                cell_dir = out_dir / vname / f"eps{eps:g}_k{ksize}"
                for source_id, group, image, true_coarse in sources:
                    src = rescale_to_margin(image)
                    target = partition.other_in_group(group, true_coarse)
                    if eps == 0.0:
                        stim = np.rint(src)
                    else:
                        cfg = AttackConfig(epsilon=eps, step_size=min(step_size, eps),
                                           eval_8bit=True)
                        rec = iterative_targeted_attack(
                            src, target, group, attack_ens, partition, cfg,
                            source_id=source_id)
                        stim = np.rint(src + rec.delta)
                    write_stimulus_png(cell_dir / f"{source_id}.png", stim)
                    n += 1
                    for nm, logits in zip(eval_models, eval_ens.member_fine_logits(stim)):
                        if coarse_argmax(logits, partition) == target:
                            hits[nm.model_id] += 1
                for nm in eval_models:
                    cells.append(SweepCell(
                        variant=vname, epsilon=eps, ensemble_size=ksize,
                        model_id=nm.model_id, n=n, n_success=hits[nm.model_id]))
    report = SweepReport(cells=cells)
    report.save_csv(out_dir / "sweep.csv")
    return report
