"""Stimulus pools and balanced session schedules.

Sources are rescaled into the [40, 215] margin so every epsilon-box stays
inside [0, 255]. The pool generator turns labeled sources into the four trial
conditions (clean image, adversarial, flipped control, and mismatched "false"
stimuli built from distractor sources), exporting each as an 8-bit PNG with a
JSON sidecar and a fixed-point perturbation array. assemble_session then
draws a seeded trial schedule with exact count balance per condition and
class, uniform fixation draws, and per-session button randomization.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .attack import (
    AttackConfig, default_false_retention, iterative_targeted_attack,
    make_false_stimulus, make_flip_control,
)
from .coarse import CoarsePartition, Ensemble
from .nn.data import Dataset

DELTA_SCALE = 256  # fixed-point step for stored perturbations (1/256 intensity)
CONDITIONS = ("image", "adv", "flip", "false")


def rescale_to_margin(image) -> np.ndarray:
    """Map [0, 255] linearly onto [40, 215]; endpoints land exactly."""
    x = np.asarray(image, dtype=np.float64)
    if x.size == 0 or x.min() < 0.0 or x.max() > 255.0:
        raise ValueError("input must be non-empty with values in [0, 255]")
    return 40.0 + (x * 175.0) / 255.0


def margin_to_full(image) -> np.ndarray:
    """Inverse of rescale_to_margin on its range."""
    x = np.asarray(image, dtype=np.float64)
    return ((x - 40.0) * 255.0) / 175.0


def build_coarse_groups(fine_names, coarse_map, group_pairs) -> CoarsePartition:
    """Partition from a manifest's fine-label table.

    coarse_map sends each fine name to a coarse class name or "distractor";
    group_pairs names the two coarse classes of each experiment group.
    """
    names = list(fine_names)
    if len(set(names)) != len(names):
        raise ValueError("duplicate fine label names in manifest")
    classes: dict[str, list[int]] = {}
    distractors: list[int] = []
    for idx, name in enumerate(names):
        if name not in coarse_map:
            raise ValueError(f"fine label {name!r} missing from the coarse map")
        coarse = coarse_map[name]
        if coarse == "distractor":
            distractors.append(idx)
        else:
            classes.setdefault(coarse, []).append(idx)
    return CoarsePartition(
        n_fine=len(names),
        classes={k: tuple(v) for k, v in classes.items()},
        groups={k: (v[0], v[1]) for k, v in group_pairs.items()},
        distractors=tuple(distractors),
    )


@dataclass
class StimulusRecord:
    """One exported stimulus. Field presence depends on the condition:

    image: true_class only; adv: true_class + target + perturbation;
    flip: true_class + perturbation (no target of its own);
    false: target + perturbation (no true class among the button options).
    """

    id: str
    condition: str
    group: str
    path: str  # PNG, relative to the pool root
    source_id: str
    true_class: str | None = None
    target: str | None = None
    epsilon: float | None = None
    success_bits: tuple[bool, ...] | None = None
    delta_path: str | None = None
    retained: bool = True

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ValueError(f"unknown condition {self.condition!r}")
        need_true = self.condition in ("image", "adv", "flip")
        need_target = self.condition in ("adv", "false")
        need_delta = self.condition in ("adv", "flip", "false")
        if need_true != (self.true_class is not None):
            raise ValueError(f"{self.condition}: true_class presence mismatch")
        if need_target != (self.target is not None):
            raise ValueError(f"{self.condition}: target presence mismatch")
        if need_delta != (self.epsilon is not None) or need_delta != (self.delta_path is not None):
            raise ValueError(f"{self.condition}: perturbation fields mismatch")
        if (self.condition in ("adv", "false")) != (self.success_bits is not None):
            raise ValueError(f"{self.condition}: success_bits presence mismatch")

    def to_json_dict(self) -> dict:
        d = {
            "id": self.id, "condition": self.condition, "group": self.group,
            "path": self.path, "source_id": self.source_id,
            "true_class": self.true_class, "target": self.target,
            "epsilon": self.epsilon,
            "success_bits": None if self.success_bits is None else list(self.success_bits),
            "delta_path": self.delta_path, "retained": self.retained,
        }
        return d

    @staticmethod
    def from_json_dict(d: dict) -> "StimulusRecord":
        bits = d.get("success_bits")
        return StimulusRecord(
            id=d["id"], condition=d["condition"], group=d["group"], path=d["path"],
            source_id=d["source_id"], true_class=d.get("true_class"),
            target=d.get("target"), epsilon=d.get("epsilon"),
            success_bits=None if bits is None else tuple(bool(b) for b in bits),
            delta_path=d.get("delta_path"), retained=bool(d.get("retained", True)),
        )


def write_stimulus_png(path, image: np.ndarray) -> None:
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    out = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(out, mode="L").save(path)


def read_stimulus_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("L"), dtype=np.float64)
    return arr[:, :, None]


def save_delta(path, delta: np.ndarray) -> None:
    q = np.rint(np.asarray(delta, dtype=np.float64) * DELTA_SCALE)
    if np.abs(q).max() > np.iinfo(np.int16).max:
        raise ValueError("perturbation too large for int16 fixed point")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    np.save(path, q.astype(np.int16))


def load_delta(path) -> np.ndarray:
    return np.load(path).astype(np.float64) / DELTA_SCALE


def load_exclusions(path) -> frozenset[str]:
    """Plain-text source ids to skip, one per line, '#' starts a comment."""
    p = Path(path)
    if not p.exists():
        return frozenset()
    out = set()
    for line in p.read_text().splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            out.add(line)
    return frozenset(out)


# ---------------------------------------------------------------------------
# pool generation

@dataclass
class PoolSummary:
    counts: dict  # group -> condition -> exported count
    attempts: dict  # group -> condition -> attack attempts (adv/false)

    def total(self) -> int:
        return sum(c for per in self.counts.values() for c in per.values())


def _export(pool_dir: Path, rec: StimulusRecord, image: np.ndarray,
            delta: np.ndarray | None) -> StimulusRecord:
    write_stimulus_png(pool_dir / rec.path, image)
    if delta is not None:
        save_delta(pool_dir / rec.delta_path, delta)
    (pool_dir / "stimuli" / f"{rec.id}.json").write_text(
        json.dumps(rec.to_json_dict(), indent=1))
    return rec


def generate_stimulus_pool(data: Dataset, partition: CoarsePartition,
                           ensemble: Ensemble, out_dir,
                           adv_cfg: AttackConfig | None = None,
                           false_cfg: AttackConfig | None = None,
                           groups=None, max_sources_per_group: int | None = None,
                           max_false_per_group: int | None = None,
                           seed: int = 0,
                           exclusions: frozenset[str] = frozenset()) -> PoolSummary:
    """Attack every selected source and export the retained stimuli.

    Member sources yield one clean record each plus, when the attack passes
    retention, an adversarial record and its flipped control. Distractor
    sources are attacked toward the group's two classes with targets
    alternated on retention so the exported counts stay balanced.
    """
    if adv_cfg is None:
        adv_cfg = AttackConfig(epsilon=32.0, quantize_scale=DELTA_SCALE, eval_8bit=True)
    if false_cfg is None:
        false_cfg = AttackConfig(epsilon=40.0,
                                 retention_m=default_false_retention(len(ensemble.members)),
                                 quantize_scale=DELTA_SCALE, eval_8bit=True)
    pool_dir = Path(out_dir)
    pool_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    group_names = list(groups) if groups is not None else sorted(partition.groups)

    by_coarse: dict[str, list[int]] = {}
    distractor_rows: list[int] = []
    for row, fine in enumerate(data.labels):
        if data.ids[row] in exclusions:
            continue
        coarse = partition.coarse_of_fine(int(fine))
        if coarse is None:
            distractor_rows.append(row)
        else:
            by_coarse.setdefault(coarse, []).append(row)

    records: list[StimulusRecord] = []
    counts = {g: {c: 0 for c in CONDITIONS} for g in group_names}
    attempts = {g: {"adv": 0, "false": 0} for g in group_names}

    # ids are opaque so a client that sees them cannot infer the condition
    def next_id() -> str:
        return f"stim-{len(records):05d}"

    for gname in group_names:
        class_a, class_b = partition.groups[gname]
        member_rows = sorted(by_coarse.get(class_a, []) + by_coarse.get(class_b, []))
        member_rows = [member_rows[i] for i in rng.permutation(len(member_rows))]
        if max_sources_per_group is not None:
            member_rows = member_rows[:max_sources_per_group]

        for row in member_rows:
            sid = data.ids[row]
            true_coarse = partition.coarse_of_fine(int(data.labels[row]))
            src = rescale_to_margin(data.images[row])
            img_id = next_id()
            records.append(_export(
                pool_dir,
                StimulusRecord(id=img_id, condition="image", group=gname,
                               path=f"stimuli/{img_id}.png", source_id=sid,
                               true_class=true_coarse),
                src, None))
            counts[gname]["image"] += 1

            target = partition.other_in_group(gname, true_coarse)
            attempts[gname]["adv"] += 1
            rec = iterative_targeted_attack(src, target, gname, ensemble,
                                            partition, adv_cfg, source_id=sid)
            if not rec.retained:
                continue
            adv_id = next_id()
            records.append(_export(
                pool_dir,
                StimulusRecord(id=adv_id, condition="adv", group=gname,
                               path=f"stimuli/{adv_id}.png", source_id=sid,
                               true_class=true_coarse, target=target,
                               epsilon=adv_cfg.epsilon, success_bits=rec.success_bits,
                               delta_path=f"deltas/{adv_id}.npy"),
                src + rec.delta, rec.delta))
            counts[gname]["adv"] += 1

            flip_id = next_id()
            flip_delta = np.flipud(rec.delta)
            records.append(_export(
                pool_dir,
                StimulusRecord(id=flip_id, condition="flip", group=gname,
                               path=f"stimuli/{flip_id}.png", source_id=sid,
                               true_class=true_coarse, epsilon=adv_cfg.epsilon,
                               delta_path=f"deltas/{flip_id}.npy"),
                make_flip_control(src, rec.delta), flip_delta))
            counts[gname]["flip"] += 1

        false_rows = [distractor_rows[i] for i in rng.permutation(len(distractor_rows))]
        if max_false_per_group is not None:
            false_rows = false_rows[:max_false_per_group]
        false_counts = {class_a: 0, class_b: 0}
        for row in false_rows:
            sid = data.ids[row]
            src = rescale_to_margin(data.images[row])
            # aim at whichever class currently has fewer retained stimuli
            target = class_a if false_counts[class_a] <= false_counts[class_b] else class_b
            attempts[gname]["false"] += 1
            rec = make_false_stimulus(src, int(data.labels[row]), gname, target,
                                      ensemble, partition, false_cfg, source_id=sid)
            if not rec.retained:
                continue
            false_id = next_id()
            records.append(_export(
                pool_dir,
                StimulusRecord(id=false_id, condition="false", group=gname,
                               path=f"stimuli/{false_id}.png", source_id=sid,
                               target=target, epsilon=false_cfg.epsilon,
                               success_bits=rec.success_bits,
                               delta_path=f"deltas/{false_id}.npy"),
                src + rec.delta, rec.delta))
            counts[gname]["false"] += 1
            false_counts[target] += 1

    partition.save(pool_dir / "partition.json")
    index = {
        "partition": "partition.json",
        "records": [r.to_json_dict() for r in records],
    }
    (pool_dir / "index.json").write_text(json.dumps(index, indent=1))
    return PoolSummary(counts=counts, attempts=attempts)


def load_pool(pool_dir) -> tuple[list[StimulusRecord], CoarsePartition]:
    pool_dir = Path(pool_dir)
    index = json.loads((pool_dir / "index.json").read_text())
    records = [StimulusRecord.from_json_dict(d) for d in index["records"]]
    partition = CoarsePartition.load(pool_dir / index["partition"])
    return records, partition


# ---------------------------------------------------------------------------
# session assembly

MASK_COUNT = 10
MASK_MS = 20.0


@dataclass
class TrialSpec:
    trial_id: str
    stimulus_id: str
    fixation_ms: float  # uniform draw in [500, 1000]
    exposure_ms: float
    response_window_ms: float
    mask_seed: int
    mask_count: int = MASK_COUNT
    mask_ms: float = MASK_MS

    def to_json_dict(self) -> dict:
        return {
            "trial_id": self.trial_id, "stimulus_id": self.stimulus_id,
            "fixation_ms": self.fixation_ms, "exposure_ms": self.exposure_ms,
            "response_window_ms": self.response_window_ms,
            "mask_seed": self.mask_seed, "mask_count": self.mask_count,
            "mask_ms": self.mask_ms,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "TrialSpec":
        return TrialSpec(
            trial_id=d["trial_id"], stimulus_id=d["stimulus_id"],
            fixation_ms=float(d["fixation_ms"]), exposure_ms=float(d["exposure_ms"]),
            response_window_ms=float(d["response_window_ms"]),
            mask_seed=int(d["mask_seed"]), mask_count=int(d.get("mask_count", MASK_COUNT)),
            mask_ms=float(d.get("mask_ms", MASK_MS)),
        )


@dataclass
class SessionManifest:
    session_id: str
    group: str
    buttons: tuple[str, str]  # on-screen order, randomized per session
    seed: int
    trials: list[TrialSpec] = field(default_factory=list)

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id, "group": self.group,
            "buttons": list(self.buttons), "seed": self.seed,
            "trials": [t.to_json_dict() for t in self.trials],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "SessionManifest":
        return SessionManifest(
            session_id=d["session_id"], group=d["group"],
            buttons=(d["buttons"][0], d["buttons"][1]), seed=int(d["seed"]),
            trials=[TrialSpec.from_json_dict(t) for t in d["trials"]],
        )

    def save(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1))

    @staticmethod
    def load(path) -> "SessionManifest":
        return SessionManifest.from_json_dict(json.loads(Path(path).read_text()))


def assemble_session(records: list[StimulusRecord], group: str,
                     trials_per_condition: int, seed: int,
                     session_id: str | None = None,
                     exposure_ms: float = 63.0,
                     response_window_ms: float = 2200.0,
                     exclusions: frozenset[str] = frozenset()) -> SessionManifest:
    """Draw a balanced trial schedule from the pool.

    image/adv/flip each contribute trials_per_condition trials split evenly
    between the group's two classes; false trials split evenly between the
    two adversarial targets. Scheduling, fixation draws, mask seeds, and the
    button order all derive from the one seed.
    """
    if trials_per_condition < 2 or trials_per_condition % 2 != 0:
        raise ValueError("trials_per_condition must be even and >= 2")

    pool = [r for r in records if r.group == group and r.retained
            and r.source_id not in exclusions and r.id not in exclusions]
    if not pool:
        raise ValueError(f"no retained stimuli for group {group!r}")
    # recover the class pair from the pool's own records
    classes = sorted({r.true_class for r in pool if r.true_class is not None}
                     | {r.target for r in pool if r.target is not None})
    if len(classes) != 2:
        raise ValueError(f"group {group!r} pool spans classes {classes}, expected 2")
    class_a, class_b = classes

    half = trials_per_condition // 2
    buckets: dict[tuple[str, str], list[StimulusRecord]] = {}
    for r in pool:
        if r.condition == "false":
            key = ("false", r.target)
        else:
            key = (r.condition, r.true_class)
        buckets.setdefault(key, []).append(r)

    shortfalls = []
    for cond in CONDITIONS:
        for cls in (class_a, class_b):
            have = len(buckets.get((cond, cls), []))
            if have < half:
                shortfalls.append(f"{cond}/{cls}: need {half}, have {have}")
    if shortfalls:
        raise ValueError("stimulus pool shortfall: " + "; ".join(shortfalls))

    rng = np.random.default_rng(seed)
    sid = session_id if session_id is not None else f"{group}-s{seed}"
    chosen: list[StimulusRecord] = []
    for cond in CONDITIONS:
        for cls in (class_a, class_b):
            bucket = sorted(buckets[(cond, cls)], key=lambda r: r.id)
            picks = rng.permutation(len(bucket))[:half]
            chosen.extend(bucket[i] for i in picks)

    order = rng.permutation(len(chosen))
    buttons = (class_a, class_b) if rng.integers(2) == 0 else (class_b, class_a)
    trials = []
    for pos, idx in enumerate(order):
        trials.append(TrialSpec(
            trial_id=f"{sid}-t{pos:03d}",
            stimulus_id=chosen[idx].id,
            fixation_ms=float(rng.uniform(500.0, 1000.0)),
            exposure_ms=exposure_ms,
            response_window_ms=response_window_ms,
            mask_seed=int(rng.integers(0, 2**31)),
        ))
    return SessionManifest(session_id=sid, group=group, buttons=buttons,
                           seed=seed, trials=trials)
