"""Robustness metrics: consensus score, prediction flips, accuracy gap.

The consensus score of a question group is the fraction of its size-m
subsets whose members are all answered correctly; with c correct answers in
a group of g records that is C(c, m) / C(g, m), so the implementation counts
rather than enumerates and stays exact for any group size.

Flips compare paired predictions before and after an input edit: in IV mode
a flip is any changed prediction; in CV mode (counting questions, one
relevant object removed) a prediction flips unless it is exactly one less
than the original.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .objective import CIBConfig


@dataclass
class QuestionGroup:
    """One original question plus its rephrasings, with per-record correctness."""

    group_id: int
    records: list[dict]  # each {"is_original": bool, "correct": bool}

    def __post_init__(self):
        originals = sum(1 for r in self.records if r["is_original"])
        if originals != 1:
            raise ValueError(f"group {self.group_id} has {originals} originals, expected 1")

    @property
    def n(self) -> int:
        """Number of rephrasings (group size minus the original)."""
        return len(self.records) - 1

    @property
    def size(self) -> int:
        return len(self.records)

    @property
    def n_correct(self) -> int:
        return sum(1 for r in self.records if r["correct"])


def consensus_score(groups: Sequence[QuestionGroup], m: int) -> float:
    """Mean over groups of C(correct, m) / C(size, m)."""
    if m < 1:
        raise ValueError(f"m must be >= 1, got {m}")
    if not groups:
        raise ValueError("consensus_score needs at least one group")
    total = 0.0
    for g in groups:
        if m > g.size:
            raise ValueError(f"m={m} exceeds group {g.group_id} size {g.size}")
        total += math.comb(g.n_correct, m) / math.comb(g.size, m)
    return total / len(groups)


def flips(orig_preds: Sequence, edited_preds: Sequence, mode: str) -> float:
    """Fraction of paired predictions that flip under the edit.

    IV: edited != original.  CV: edited != original - 1 (integer answers
    required, since the edit removes exactly one counted object).
    """
    if len(orig_preds) != len(edited_preds):
        raise ValueError(f"length mismatch: {len(orig_preds)} vs {len(edited_preds)}")
    if not orig_preds:
        raise ValueError("flips needs at least one pair")
    if mode == "IV":
        return float(np.mean([o != e for o, e in zip(orig_preds, edited_preds)]))
    if mode == "CV":
        for v in list(orig_preds) + list(edited_preds):
            if not float(v).is_integer():
                raise ValueError(f"CV mode needs integer answers, got {v!r}")
        return float(np.mean([int(e) != int(o) - 1 for o, e in zip(orig_preds, edited_preds)]))
    raise ValueError(f"unknown flips mode {mode!r}; expected 'IV' or 'CV'")


@dataclass
class RobustnessReport:
    """Consensus scores, flips, paired accuracies, and the empirical gap."""

    cs: dict[int, float] = field(default_factory=dict)
    flips_iv: float | None = None
    flips_cv: float | None = None
    acc_clean: float = 0.0
    acc_perturbed: float = 0.0
    empirical_gap: float = 0.0
    mi_terms: dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cs": {str(m): v for m, v in sorted(self.cs.items())},
            "flips_iv": self.flips_iv,
            "flips_cv": self.flips_cv,
            "acc_clean": self.acc_clean,
            "acc_perturbed": self.acc_perturbed,
            "empirical_gap": self.empirical_gap,
            "mi_terms": self.mi_terms,
        }


def performance_gap(model, clean_split, perturbed_split,
                    cfg: CIBConfig | None = None) -> RobustnessReport:
    """Accuracy gap between paired clean and perturbed splits.

    The splits must be paired one-to-one by example identity.  The report
    carries the evaluation-mode regularizer terms on both splits so the
    relationship between compression and the gap can be inspected.
    """
    from .model import mi_snapshot, predict_answers

    if len(clean_split) != len(perturbed_split):
        raise ValueError(f"splits differ in size: {len(clean_split)} vs {len(perturbed_split)}")
    for a, b in zip(clean_split, perturbed_split):
        if a.meta.example_id != b.meta.example_id:
            raise ValueError(
                f"splits are not paired: {a.meta.example_id!r} vs {b.meta.example_id!r}")
    cfg = cfg or CIBConfig()

    gold_clean = np.array([ex.y for ex in clean_split])
    gold_pert = np.array([ex.y for ex in perturbed_split])
    pred_clean = predict_answers(model, clean_split)
    pred_pert = predict_answers(model, perturbed_split)
    acc_clean = float(np.mean(pred_clean == gold_clean))
    acc_pert = float(np.mean(pred_pert == gold_pert))

    def terms(split) -> dict:
        return mi_snapshot(model, split, cfg).to_dict()

    return RobustnessReport(
        acc_clean=acc_clean,
        acc_perturbed=acc_pert,
        empirical_gap=abs(acc_clean - acc_pert),
        mi_terms={"clean": terms(clean_split), "perturbed": terms(perturbed_split)},
    )


def groups_from_split(examples, correct: Sequence[bool]) -> list[QuestionGroup]:
    """Assemble question groups from a rephrase-style split plus per-example
    correctness flags (in split order)."""
    by_group: dict[int, list[dict]] = {}
    for ex, ok in zip(examples, correct):
        by_group.setdefault(ex.meta.group_id, []).append(
            {"is_original": ex.meta.is_original, "correct": bool(ok)})
    return [QuestionGroup(group_id=g, records=recs) for g, recs in sorted(by_group.items())]


def evaluate_robustness(model, dataset, cfg: CIBConfig | None = None,
                        cs_values: Sequence[int] = (1, 2, 3, 4)) -> RobustnessReport:
    """Full robustness report for a trained model on one dataset.

    Consensus scores come from the rephrase groups; IV flips from the
    remove-irrelevant split, CV flips from the remove-relevant counting
    split; the accuracy gap and MI terms from the counterexample split.
    """
    from .model import predict_answers

    cfg = cfg or CIBConfig()
    report = performance_gap(model, dataset["clean"], dataset["counterexample"], cfg)

    reph = dataset["rephrase"]
    pred = predict_answers(model, reph)
    correct = [p == ex.y for p, ex in zip(pred, reph)]
    groups = groups_from_split(reph, correct)
    max_m = min(g.size for g in groups)
    report.cs = {m: consensus_score(groups, m) for m in cs_values if m <= max_m}

    report.flips_iv = flips(list(predict_answers(model, dataset["clean"])),
                            list(predict_answers(model, dataset["remove_irrelevant"])),
                            mode="IV")
    report.flips_cv = flips(list(predict_answers(model, dataset["count_clean"])),
                            list(predict_answers(model, dataset["remove_relevant"])),
                            mode="CV")
    return report
