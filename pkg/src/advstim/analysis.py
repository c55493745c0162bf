"""Response-log statistics: target-choice rates in the mismatched condition,
per-condition accuracy with pairwise tests, reaction-time terciles, and the
JSON/CSV report writer.

Records arrive as JSONL, one object per line, already enriched server-side
with the condition, group, true class, and adversarial target (the client
never sees those). Unless stated otherwise every statistic uses counted
records with a non-null choice: repeat presses and timeouts carry no choice
information.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .stats import (
    AnovaResult, PearsonResult, TTestResult, TwoSampleTResult, one_sample_t,
    one_way_anova, pearson_correlation, two_sample_t,
)

__all__ = [
    "ResponseRecord", "load_responses", "append_response",
    "TargetChoiceResult", "target_choice_rate",
    "ConditionComparison", "AccuracyByCondition", "accuracy_by_condition",
    "RTBin", "RTBinnedResult", "rt_binned_target_rate",
    "one_way_anova", "pearson_correlation", "write_report",
    "AnovaResult", "PearsonResult", "TTestResult", "TwoSampleTResult",
]

TERCILE_EDGES = ((0.0, 100.0 / 3.0), (100.0 / 3.0, 200.0 / 3.0), (200.0 / 3.0, 100.0))


@dataclass(frozen=True)
class ResponseRecord:
    """One response post, as persisted. choice None means the window lapsed."""

    session_id: str
    subject_id: str
    trial_id: str
    stimulus_id: str
    condition: str
    group: str
    choice: str | None
    rt_ms: float | None
    counted: bool  # first choice of the trial
    true_class: str | None = None
    target: str | None = None
    timing_flagged: bool = False

    def __post_init__(self):
        if self.rt_ms is not None and self.rt_ms < 0:
            raise ValueError(f"negative response time on trial {self.trial_id!r}")
        if (self.choice is None) != (self.rt_ms is None):
            raise ValueError(f"trial {self.trial_id!r}: choice and rt must come together")

    def to_json_dict(self) -> dict:
        return {
            "session_id": self.session_id, "subject_id": self.subject_id,
            "trial_id": self.trial_id, "stimulus_id": self.stimulus_id,
            "condition": self.condition, "group": self.group,
            "choice": self.choice, "rt_ms": self.rt_ms, "counted": self.counted,
            "true_class": self.true_class, "target": self.target,
            "timing_flagged": self.timing_flagged,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "ResponseRecord":
        return ResponseRecord(
            session_id=d["session_id"], subject_id=d["subject_id"],
            trial_id=d["trial_id"], stimulus_id=d["stimulus_id"],
            condition=d["condition"], group=d["group"], choice=d.get("choice"),
            rt_ms=None if d.get("rt_ms") is None else float(d["rt_ms"]),
            counted=bool(d["counted"]), true_class=d.get("true_class"),
            target=d.get("target"), timing_flagged=bool(d.get("timing_flagged", False)),
        )


def load_responses(path) -> list[ResponseRecord]:
    """Strict JSONL parse; a malformed line is an error, not a skip."""
    out = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(ResponseRecord.from_json_dict(json.loads(line)))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
                raise ValueError(f"{path}:{lineno}: bad response line ({e})") from e
    return out


def append_response(path, record: ResponseRecord) -> None:
    """Append one JSONL line and push it to disk before returning."""
    with open(path, "a", encoding="utf-8") as fh:
        fh.write(json.dumps(record.to_json_dict()) + "\n")
        fh.flush()
        os.fsync(fh.fileno())


def _usable(responses, condition=None):
    out = [r for r in responses if r.counted and r.choice is not None]
    if condition is not None:
        out = [r for r in out if r.condition == condition]
    return out


@dataclass
class TargetChoiceResult:
    n: int
    n_target: int
    rate: float
    test: TTestResult  # one-sample t of the choice indicator against 0.5


def target_choice_rate(responses) -> TargetChoiceResult:
    """Fraction of counted mismatched-condition choices landing on the
    adversarial target, tested against the 0.5 chance level."""
    responses = list(responses)
    if any(r.condition != "false" for r in responses):
        raise ValueError("target_choice_rate expects false-condition records only")
    rows = [r for r in responses if r.counted and r.choice is not None]
    if not rows:
        raise ValueError("no counted responses")
    hits = [1.0 if r.choice == r.target else 0.0 for r in rows]
    return TargetChoiceResult(
        n=len(hits), n_target=int(sum(hits)), rate=sum(hits) / len(hits),
        test=one_sample_t(hits, 0.5),
    )


@dataclass
class ConditionComparison:
    condition_a: str
    condition_b: str
    trial_pooled: TwoSampleTResult
    subject_mean: TwoSampleTResult | None  # None when < 2 subjects per side
    excluded_subjects: tuple[str, ...]  # no trials in one of the conditions


@dataclass
class AccuracyByCondition:
    accuracy: dict  # condition -> trial-pooled accuracy
    n: dict  # condition -> counted trials
    comparisons: list[ConditionComparison]
    n_subjects: int
    adv_below_image: int
    adv_below_flip: int
    per_subject: dict  # subject -> condition -> (n, accuracy)


def _subject_table(rows):
    table: dict[str, dict[str, list[float]]] = {}
    for r in rows:
        table.setdefault(r.subject_id, {}).setdefault(r.condition, []).append(
            1.0 if r.choice == r.true_class else 0.0)
    return table


def accuracy_by_condition(responses) -> AccuracyByCondition:
    """Accuracy per condition plus adv-vs-image and adv-vs-flip tests.

    Both units of analysis are reported: trials pooled across subjects, and
    per-subject mean accuracies. Subjects with zero trials in a compared
    condition are excluded from that subject-level test and listed.
    """
    rows = [r for r in _usable(responses) if r.condition in ("image", "adv", "flip")]
    if not rows:
        raise ValueError("no counted responses in image/adv/flip")
    for r in rows:
        if r.true_class is None:
            raise ValueError(f"record {r.trial_id!r} lacks a true class")

    indicators: dict[str, list[float]] = {"image": [], "adv": [], "flip": []}
    for r in rows:
        indicators[r.condition].append(1.0 if r.choice == r.true_class else 0.0)
    accuracy = {c: (sum(v) / len(v) if v else float("nan")) for c, v in indicators.items()}
    n = {c: len(v) for c, v in indicators.items()}

    table = _subject_table(rows)
    comparisons = []
    for cond_b in ("image", "flip"):
        if len(indicators["adv"]) < 2 or len(indicators[cond_b]) < 2:
            continue
        pooled = two_sample_t(indicators["adv"], indicators[cond_b])
        with_both = [s for s, t in sorted(table.items())
                     if t.get("adv") and t.get(cond_b)]
        excluded = tuple(s for s in sorted(table) if s not in with_both)
        subj = None
        if len(with_both) >= 2:
            a_means = [float(np.mean(table[s]["adv"])) for s in with_both]
            b_means = [float(np.mean(table[s][cond_b])) for s in with_both]
            subj = two_sample_t(a_means, b_means)
        comparisons.append(ConditionComparison(
            condition_a="adv", condition_b=cond_b, trial_pooled=pooled,
            subject_mean=subj, excluded_subjects=excluded))

    per_subject = {
        s: {c: (len(v), sum(v) / len(v)) for c, v in conds.items()}
        for s, conds in sorted(table.items())
    }
    adv_below_image = sum(
        1 for s, conds in table.items()
        if conds.get("adv") and conds.get("image")
        and np.mean(conds["adv"]) < np.mean(conds["image"]))
    adv_below_flip = sum(
        1 for s, conds in table.items()
        if conds.get("adv") and conds.get("flip")
        and np.mean(conds["adv"]) < np.mean(conds["flip"]))
    return AccuracyByCondition(
        accuracy=accuracy, n=n, comparisons=comparisons,
        n_subjects=len(table), adv_below_image=adv_below_image,
        adv_below_flip=adv_below_flip, per_subject=per_subject)


@dataclass
class RTBin:
    lo_pct: float
    hi_pct: float
    n: int
    n_target: int
    rate: float
    rt_lo: float
    rt_hi: float
    test: TTestResult


@dataclass
class RTBinnedResult:
    bins: list[RTBin]
    edges_ms: tuple[float, float]  # empirical tercile boundaries


def rt_binned_target_rate(responses) -> RTBinnedResult:
    """Target-choice rate within empirical reaction-time terciles."""
    responses = list(responses)
    if any(r.condition != "false" for r in responses):
        raise ValueError("rt_binned_target_rate expects false-condition records only")
    rows = [r for r in responses if r.counted and r.choice is not None]
    if len(rows) < 3:
        raise ValueError("need at least 3 responses to form terciles")
    rts = np.array([r.rt_ms for r in rows], dtype=np.float64)
    lo_edge, hi_edge = np.percentile(rts, [100.0 / 3.0, 200.0 / 3.0])

    def bin_of(rt: float) -> int:
        if rt <= lo_edge:
            return 0
        if rt <= hi_edge:
            return 1
        return 2

    grouped: list[list] = [[], [], []]
    for r in rows:
        grouped[bin_of(r.rt_ms)].append(r)
    bins = []
    for i, members in enumerate(grouped):
        hits = [1.0 if r.choice == r.target else 0.0 for r in members]
        member_rts = [r.rt_ms for r in members]
        bins.append(RTBin(
            lo_pct=TERCILE_EDGES[i][0], hi_pct=TERCILE_EDGES[i][1],
            n=len(members), n_target=int(sum(hits)),
            rate=(sum(hits) / len(hits)) if hits else float("nan"),
            rt_lo=min(member_rts) if member_rts else float("nan"),
            rt_hi=max(member_rts) if member_rts else float("nan"),
            test=one_sample_t(hits, 0.5) if hits else TTestResult(0.0, 0, 1.0, 0, float("nan")),
        ))
    return RTBinnedResult(bins=bins, edges_ms=(float(lo_edge), float(hi_edge)))


# ---------------------------------------------------------------------------
# report writer

def _ttest_dict(t: TTestResult | TwoSampleTResult | None) -> dict | None:
    if t is None:
        return None
    if isinstance(t, TTestResult):
        return {"statistic": t.statistic, "dof": t.dof, "p_value": t.p_value,
                "n": t.n, "mean": t.mean}
    return {"statistic": t.statistic, "dof": t.dof, "p_value": t.p_value,
            "n_a": t.n_a, "n_b": t.n_b, "mean_a": t.mean_a, "mean_b": t.mean_b}


def write_report(responses, out_dir) -> dict:
    """Full JSON report plus CSV tables; returns the report dict."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report: dict = {"n_records": len(responses)}

    acc_rows = [r for r in _usable(responses) if r.condition in ("image", "adv", "flip")]
    if acc_rows:
        acc = accuracy_by_condition(responses)
        report["accuracy"] = {
            "by_condition": acc.accuracy, "n": acc.n,
            "n_subjects": acc.n_subjects,
            "adv_below_image": acc.adv_below_image,
            "adv_below_flip": acc.adv_below_flip,
            "comparisons": [
                {"a": c.condition_a, "b": c.condition_b,
                 "trial_pooled": _ttest_dict(c.trial_pooled),
                 "subject_mean": _ttest_dict(c.subject_mean),
                 "excluded_subjects": list(c.excluded_subjects)}
                for c in acc.comparisons
            ],
        }
        with open(out / "accuracy_by_condition.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["condition", "n", "accuracy"])
            for cond in ("image", "adv", "flip"):
                if acc.n.get(cond):
                    w.writerow([cond, acc.n[cond], f"{acc.accuracy[cond]:.6f}"])

    false_rows = _usable(responses, "false")
    if false_rows:
        tc = target_choice_rate(false_rows)
        report["false_condition"] = {
            "n": tc.n, "n_target": tc.n_target, "rate": tc.rate,
            "test_vs_chance": _ttest_dict(tc.test),
        }
        per_group: dict[str, dict] = {}
        for g in sorted({r.group for r in false_rows}):
            sub = [r for r in false_rows if r.group == g]
            gtc = target_choice_rate(sub)
            per_group[g] = {"n": gtc.n, "rate": gtc.rate,
                            "p_value": gtc.test.p_value}
        report["false_condition"]["per_group"] = per_group
        with open(out / "false_target_rate.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "n", "rate", "p_value"])
            w.writerow(["all", tc.n, f"{tc.rate:.6f}", f"{tc.test.p_value:.6g}"])
            for g, row in per_group.items():
                w.writerow([g, row["n"], f"{row['rate']:.6f}", f"{row['p_value']:.6g}"])

        if len(false_rows) >= 3:
            rt = rt_binned_target_rate(false_rows)
            report["rt_terciles"] = {
                "edges_ms": list(rt.edges_ms),
                "bins": [
                    {"lo_pct": b.lo_pct, "hi_pct": b.hi_pct, "n": b.n,
                     "rate": b.rate, "p_value": b.test.p_value}
                    for b in rt.bins
                ],
            }
            with open(out / "rt_terciles.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["lo_pct", "hi_pct", "n", "rate", "p_value"])
                for b in rt.bins:
                    w.writerow([f"{b.lo_pct:.1f}", f"{b.hi_pct:.1f}", b.n,
                                f"{b.rate:.6f}", f"{b.test.p_value:.6g}"])

    (out / "report.json").write_text(json.dumps(report, indent=1))
    return report
