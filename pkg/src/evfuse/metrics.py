"""Recall metrics for expression classification.

WAR is plain accuracy (sample-weighted recall); UAR averages per-class
recalls so small classes count as much as large ones.  Records also carry a
lighting-condition tag for per-condition accuracy breakdowns.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .autodiff import ContractError

CONDITIONS = ("normal", "overexposure", "lowlight", "hdr")


@dataclass(frozen=True)
class EvalRecord:
    true_class: int
    predicted_class: int
    condition: str = "normal"

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise ContractError(
                f"condition must be one of {CONDITIONS}, got {self.condition!r}"
            )


def war(records: Iterable[EvalRecord]) -> float:
    """Total correct / total samples."""
    records = list(records)
    if not records:
        raise ContractError("war requires at least one record")
    correct = sum(r.predicted_class == r.true_class for r in records)
    return correct / len(records)


def uar(records: Iterable[EvalRecord]) -> float:
    """Mean of per-class recalls over the classes present in the true labels."""
    records = list(records)
    if not records:
        raise ContractError("uar requires at least one record")
    totals: Counter[int] = Counter()
    hits: Counter[int] = Counter()
    for r in records:
        totals[r.true_class] += 1
        if r.predicted_class == r.true_class:
            hits[r.true_class] += 1
    recalls = [hits[c] / totals[c] for c in sorted(totals)]
    return sum(recalls) / len(recalls)


def condition_accuracy(records: Iterable[EvalRecord]) -> dict[str, float]:
    """Per-condition WAR; conditions with no records are simply absent."""
    records = list(records)
    buckets: dict[str, list[EvalRecord]] = {}
    for r in records:
        buckets.setdefault(r.condition, []).append(r)
    return {cond: war(rs) for cond, rs in buckets.items()}


def per_class_recall(records: Iterable[EvalRecord]) -> dict[int, float]:
    records = list(records)
    totals: Counter[int] = Counter()
    hits: Counter[int] = Counter()
    for r in records:
        totals[r.true_class] += 1
        if r.predicted_class == r.true_class:
            hits[r.true_class] += 1
    return {c: hits[c] / totals[c] for c in sorted(totals)}


def metrics_report(records: Iterable[EvalRecord]) -> dict:
    """The JSON-ready report: {war, uar, per_condition, per_class}."""
    records = list(records)
    return {
        "war": war(records),
        "uar": uar(records),
        "per_condition": condition_accuracy(records),
        "per_class": {str(c): r for c, r in per_class_recall(records).items()},
    }
