"""
Evaluation metrics for row completion: recall@N and MAP for subject
suggestion, precision/recall@k for gap filling.
"""

import sys
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from src.utils import normalize_text


def _top_n(candidates, n: int) -> List:
    """Top-n of a ranked list; sets are sorted first so truncation is deterministic."""
    if isinstance(candidates, (set, frozenset)):
        candidates = sorted(candidates)
    return list(candidates)[:n]


def recall_at_n(candidates, truth: Iterable[Hashable], n: int) -> float:
    """
    Share of truth items among the top-n candidates.

    Args:
        candidates: Ranked list or unordered set of candidates
        truth: Ground-truth items
        n: Cutoff (>= 0)

    Returns:
        |top-n ∩ truth| / |truth|, or 1.0 when truth is empty
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    truth = set(truth)
    if not truth:
        return 1.0
    return len(set(_top_n(candidates, n)) & truth) / len(truth)


def recall_at_n_micro(per_table: Sequence[Tuple[object, Iterable[Hashable]]], n: int) -> float:
    """Recall@n pooled over all tables: total hits / total truth items."""
    hits, total = 0, 0
    for candidates, truth in per_table:
        truth = set(truth)
        hits += len(set(_top_n(candidates, n)) & truth)
        total += len(truth)
    return 1.0 if total == 0 else hits / total


def average_precision(ranked: Sequence[Hashable], truth: Iterable[Hashable]) -> float:
    """Mean precision at the rank of each truth item; unretrieved items count 0."""
    truth = set(truth)
    if not truth:
        return 1.0
    hits = 0
    total = 0.0
    seen = set()
    for rank, item in enumerate(ranked, start=1):
        if item in truth and item not in seen:
            seen.add(item)
            hits += 1
            total += hits / rank
    return total / len(truth)


def mean_average_precision(tables: Sequence[Tuple[Sequence[Hashable], Iterable[Hashable]]]) -> float:
    """Mean AP over (ranked, truth) pairs; 0.0 for no tables."""
    if not tables:
        return 0.0
    return float(np.mean([average_precision(ranked, truth) for ranked, truth in tables]))


def fill_precision_recall_at_k(
    fills: Mapping[Hashable, Sequence[str]],
    truth: Mapping[Hashable, str],
    k: int,
) -> Tuple[float, float]:
    """
    Precision and recall of gap filling at k.

    A cell is correct when any of its top-k fills matches the truth value
    after case and whitespace normalization.

    Args:
        fills: Cell -> fill values in rank order
        truth: Cell -> expected value

    Returns:
        (correct / cells with any fill, correct / cells with truth);
        precision is 1.0 without fills, recall is 1.0 without truth
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    filled = {cell: values for cell, values in fills.items() if values}
    correct = 0
    for cell, values in filled.items():
        expected = truth.get(cell)
        if expected is None:
            continue
        expected = normalize_text(expected)
        if any(normalize_text(v) == expected for v in values[:k]):
            correct += 1
    precision = 1.0 if not filled else correct / len(filled)
    recall = 1.0 if not truth else correct / len(truth)
    return precision, recall


def mean_std(values: Sequence[float]) -> Dict[str, Optional[float]]:
    """Mean and population standard deviation; None for an empty sequence."""
    if not values:
        return {"mean": None, "std": None}
    arr = np.asarray(values, dtype=np.float64)
    return {"mean": float(arr.mean()), "std": float(arr.std())}


def print_metrics(report: Dict, stream=None):
    """Print the aggregate part of an evaluation report to stderr."""
    out = stream or sys.stderr
    aggregate = report.get("aggregate", {})
    print("\n" + "=" * 60, file=out)
    print(f"Evaluation: {report.get('benchmark', '')}", file=out)
    print("=" * 60, file=out)
    print(f"Tables evaluated: {report.get('tables_evaluated', 0)}", file=out)
    skipped = report.get("skipped", [])
    if skipped:
        print(f"Tables skipped:   {len(skipped)}", file=out)

    for name, value in sorted(aggregate.items()):
        if isinstance(value, dict):
            mean, std = value.get("mean"), value.get("std")
            text = "n/a" if mean is None else f"{mean:.4f} ± {std:.4f}"
        else:
            text = "n/a" if value is None else f"{value:.4f}"
        print(f"  {name:<22} {text}", file=out)
    print("=" * 60, file=out)
