"""
End-to-end pipeline behind the `rowcomp` commands.

Each command returns a JSON-ready dict. Failures inside a stage are
re-raised as PipelineStageError tagged with the stage name; configuration,
IO and format errors pass through untouched.
"""

import itertools
import logging
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager, nullcontext
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from evalharness.metrics.compute import (
    average_precision,
    fill_precision_recall_at_k,
    mean_average_precision,
    mean_std,
    recall_at_n,
    recall_at_n_micro,
)
from evalharness.perf.latency import StageTimer

from .clients import Clients, build_clients
from .config import PipelineConfig
from .embed import EmbeddingIndex, load_embeddings
from .errors import (
    ConfigError,
    EmbeddingFormatError,
    IngestError,
    KbFormatError,
    PipelineStageError,
    TableFormatError,
)
from .gapfill import ContextCache, complete_row, fill_cell
from .ingest import ingest_file
from .interpret import LinkedTable, RangeCache, Table, build_remover, link_main_column, link_table
from .kb import KnowledgeBase, load_kb
from .suggest import suggest_subjects
from .utils import load_json, set_seed

logger = logging.getLogger(__name__)

PASSTHROUGH_ERRORS = (
    ConfigError, FileNotFoundError, KbFormatError, EmbeddingFormatError, TableFormatError, IngestError,
)


@contextmanager
def stage(name: str, timer: Optional[StageTimer] = None):
    """Time a stage and tag unexpected failures with its name."""
    with (timer.stage(name) if timer is not None else nullcontext()):
        try:
            yield
        except PASSTHROUGH_ERRORS:
            raise
        except PipelineStageError:
            raise
        except Exception as e:
            raise PipelineStageError(name, e) from e


@dataclass
class Resources:
    """Everything loaded once per invocation and shared read-only across workers."""
    config: PipelineConfig
    kb: KnowledgeBase
    idx: EmbeddingIndex
    clients: Clients
    ranges: RangeCache


def load_resources(config: PipelineConfig, timer: Optional[StageTimer] = None, need_clients: bool = True) -> Resources:
    set_seed(config.reproducibility.seed)
    with stage("load", timer):
        kb = load_kb(config.kb_path)
        idx = load_embeddings(config.embeddings_path)
        clients = build_clients(config.clients) if need_clients else None
        remover = build_remover(config.linking, config.reproducibility.seed)
        ranges = RangeCache(kb, remover, config.linking.min_range_support)
    return Resources(config, kb, idx, clients, ranges)


def _threshold(config: PipelineConfig) -> Optional[float]:
    policy = config.linking.threshold_policy
    return None if policy == "majority" else float(policy)


def _link(res: Resources, table: Table, timer: Optional[StageTimer]) -> LinkedTable:
    with stage("link", timer):
        return link_table(res.kb, res.idx, table, _threshold(res.config), res.config.linking, res.ranges)


def cmd_link(table_path, config: PipelineConfig, timer: Optional[StageTimer] = None) -> Dict:
    """Link a table to the KB and report main-column and column links."""
    table = Table.from_csv(table_path)
    res = load_resources(config, timer, need_clients=False)
    linked = _link(res, table, timer)
    return {"table": _table_name(table_path), "linked_table": linked.to_dict(res.kb)}


def _table_name(table_path) -> str:
    path = Path(table_path)
    return path.parent.name if path.stem == "table" else path.stem


def complete_table(
    res: Resources,
    table: Table,
    suggestions_requested: int,
    timer: Optional[StageTimer] = None,
) -> Tuple[LinkedTable, List, List[Dict]]:
    """Link, suggest and fill; returns (linked table, all ranked suggestions, completed rows)."""
    config = res.config
    linked = _link(res, table, timer)

    with stage("suggest", timer):
        ranked = suggest_subjects(res.kb, res.idx, res.clients.generator, linked, config.suggestion)

    rows = []
    contexts = ContextCache()
    with stage("gapfill", timer):
        for rank, suggestion in enumerate(ranked[:suggestions_requested]):
            row_index = table.n_rows + rank
            filled = complete_row(suggestion, linked, res.kb, res.clients, config.gap_filling, contexts,
                                  workers=config.evaluation.workers)
            cells = [fill.to_dict(row_index, column) for column, fills in filled for fill in fills]
            rows.append({
                "row": row_index,
                "entity": suggestion.entity,
                "label": res.kb.label(suggestion.entity),
                "score": round(suggestion.score, 6),
                "source": suggestion.source.value,
                "cells": cells,
            })
    return linked, ranked, rows


def cmd_complete(
    table_path,
    config: PipelineConfig,
    seed_rows: Optional[int] = None,
    timer: Optional[StageTimer] = None,
) -> Dict:
    """
    Suggest new rows for a table and fill their cells.

    Args:
        table_path: Header-less CSV, main column first
        config: Pipeline configuration
        seed_rows: Number of top rows used as seeds; `config.evaluation.seed_rows` when None

    Returns:
        Completion report (validates against schemas/completion.schema.json)
    """
    table = Table.from_csv(table_path)
    table = table.head(seed_rows if seed_rows is not None else config.evaluation.seed_rows)
    res = load_resources(config, timer)
    requested = config.evaluation.suggestions_requested
    linked, ranked, rows = complete_table(res, table, requested, timer)
    return {
        "table": _table_name(table_path),
        "config": config.name,
        "candidates": len(ranked),
        "linked_table": linked.to_dict(res.kb),
        "suggestions": [s.to_dict(res.kb) for s in ranked[:requested]],
        "rows": rows,
    }


# ----------------------------------------------------------------------
# Evaluation
# ----------------------------------------------------------------------

def _parse_truth(raw: Dict, n_rows: int) -> Tuple[List[str], Dict[Tuple[int, int], str], Optional[int]]:
    subjects = list(raw.get("subjects", []))
    fills = {}
    for key, value in (raw.get("fills") or {}).items():
        try:
            r, c = (int(x) for x in key.split(","))
        except ValueError:
            raise ConfigError(f"Invalid fill key {key!r}; expected 'row,column'")
        if not 0 <= r < n_rows:
            raise ConfigError(f"Fill key {key!r} outside the table")
        fills[(r, c)] = str(value)
    seeds = raw.get("seeds")
    return subjects, fills, None if seeds is None else int(seeds)


def _run_seed_set(res: Resources, table: Table, seed_indices: Sequence[int], timer) -> Tuple[LinkedTable, List[str]]:
    seed_table = table.select_rows(seed_indices)
    linked = _link(res, seed_table, timer)
    with stage("suggest", timer):
        ranked = suggest_subjects(res.kb, res.idx, res.clients.generator, linked, res.config.suggestion)
    return linked, [s.entity for s in ranked]


def evaluate_table(res: Resources, table_dir: Path, timer: Optional[StageTimer] = None) -> Dict:
    """Suggestion recall/AP and fill precision/recall for one benchmark table."""
    config = res.config
    table = Table.from_csv(table_dir / "table.csv")
    subjects, truth_fills, seeds = _parse_truth(load_json(table_dir / "truth.json"), table.n_rows)
    n_seeds = min(seeds if seeds is not None else config.evaluation.seed_rows, table.n_rows)

    linked, ranked = _run_seed_set(res, table, range(n_seeds), timer)
    truth = set(subjects) - set(linked.seeds)

    result = {
        "seeds": n_seeds,
        "candidates": len(ranked),
        "truth_subjects": len(truth),
        "average_precision": average_precision(ranked, truth),
    }
    for n in config.evaluation.recall_cutoffs:
        result[f"recall@{n}"] = recall_at_n(ranked, truth, n)

    held_out = link_main_column(res.kb, table, config.linking.fuzzy_threshold).main_column
    fills: Dict[Tuple[int, int], List[str]] = {}
    held_truth = {cell: v for cell, v in truth_fills.items() if cell[0] >= n_seeds}
    contexts = ContextCache()
    with stage("gapfill", timer):
        for r in sorted({cell[0] for cell in held_truth}):
            subject = held_out[r]
            if subject is None:
                continue
            for c in range(1, table.n_cols):
                values = fill_cell(res.kb, linked, subject, c, res.clients, config.gap_filling, contexts)
                fills[(r, c)] = [f.value for f in values]
    for k in config.evaluation.fill_ks:
        precision, recall = fill_precision_recall_at_k(fills, held_truth, k)
        result[f"fill_precision@{k}"] = precision
        result[f"fill_recall@{k}"] = recall

    result["_ranked"] = ranked
    result["_truth"] = sorted(truth)
    result["_fills"] = fills
    result["_truth_fills"] = held_truth
    return result


def evaluate_table_stability(res: Resources, table_dir: Path, timer: Optional[StageTimer] = None) -> Dict:
    """Suggestion metrics over every seed combination drawn from the top rows."""
    config = res.config
    table = Table.from_csv(table_dir / "table.csv")
    subjects, _, seeds = _parse_truth(load_json(table_dir / "truth.json"), table.n_rows)
    size = seeds if seeds is not None else config.evaluation.seed_rows
    pool = list(range(min(config.evaluation.stability_pool, table.n_rows)))
    pool_entities = link_main_column(res.kb, table, config.linking.fuzzy_threshold).main_column

    runs = []
    for combination in itertools.combinations(pool, min(size, len(pool))):
        linked, ranked = _run_seed_set(res, table, combination, timer)
        left_out = {pool_entities[i] for i in pool if i not in combination and pool_entities[i] is not None}
        truth = (set(subjects) | left_out) - set(linked.seeds)
        run = {"seeds": list(combination), "average_precision": average_precision(ranked, truth)}
        for n in config.evaluation.recall_cutoffs:
            run[f"recall@{n}"] = recall_at_n(ranked, truth, n)
        runs.append(run)

    metric_names = ["average_precision"] + [f"recall@{n}" for n in config.evaluation.recall_cutoffs]
    summary = {name: mean_std([run[name] for run in runs]) for name in metric_names}
    summary["combinations"] = len(runs)
    summary["runs"] = runs
    return summary


def _table_dirs(benchmark_dir: Path) -> Tuple[List[Path], List[Dict]]:
    root = benchmark_dir / "tables" if (benchmark_dir / "tables").is_dir() else benchmark_dir
    usable, skipped = [], []
    for path in sorted(p for p in root.iterdir() if p.is_dir()):
        if not (path / "table.csv").exists():
            skipped.append({"table": path.name, "reason": "missing table.csv"})
        elif not (path / "truth.json").exists():
            skipped.append({"table": path.name, "reason": "missing truth.json"})
        else:
            usable.append(path)
    for entry in skipped:
        logger.warning("Skipping table %s: %s", entry["table"], entry["reason"])
    return usable, skipped


def cmd_evaluate(
    benchmark_dir,
    config: PipelineConfig,
    stability: bool = False,
    timer: Optional[StageTimer] = None,
    progress: bool = False,
) -> Dict:
    """
    Evaluate the pipeline on a benchmark directory.

    Returns:
        Report with per-table metrics, macro aggregates and skipped tables
    """
    benchmark_dir = Path(benchmark_dir)
    if not benchmark_dir.is_dir():
        raise FileNotFoundError(f"Benchmark directory not found: {benchmark_dir}")
    res = load_resources(config, timer)
    table_dirs, skipped = _table_dirs(benchmark_dir)

    evaluate = evaluate_table_stability if stability else evaluate_table
    workers = max(1, min(config.evaluation.workers, len(table_dirs) or 1))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(tqdm(
            pool.map(lambda d: evaluate(res, d, timer), table_dirs),
            total=len(table_dirs), desc="Tables", disable=not progress,
        ))
    per_table = {d.name: r for d, r in zip(table_dirs, results)}

    report = {
        "benchmark": benchmark_dir.name,
        "config": config.name,
        "mode": "stability" if stability else "standard",
        "tables_evaluated": len(per_table),
        "skipped": skipped,
    }
    if stability:
        report["tables"] = per_table
        report["aggregate"] = _aggregate_stability(per_table, config)
    else:
        report["aggregate"] = _aggregate(per_table, config)
        report["tables"] = {
            name: {k: v for k, v in r.items() if not k.startswith("_")} for name, r in per_table.items()
        }
    return report


def _aggregate(per_table: Dict[str, Dict], config: PipelineConfig) -> Dict:
    """Macro averages over tables, with pooled `_micro` companions for recall and fills."""
    if not per_table:
        aggregate = {"map": None}
        for n in config.evaluation.recall_cutoffs:
            aggregate[f"recall@{n}"] = None
            aggregate[f"recall@{n}_micro"] = None
        for k in config.evaluation.fill_ks:
            for name in (f"fill_precision@{k}", f"fill_recall@{k}"):
                aggregate[name] = None
                aggregate[f"{name}_micro"] = None
        return aggregate

    results = [per_table[name] for name in sorted(per_table)]
    aggregate = {"map": mean_average_precision([(r["_ranked"], r["_truth"]) for r in results])}
    for n in config.evaluation.recall_cutoffs:
        aggregate[f"recall@{n}"] = sum(r[f"recall@{n}"] for r in results) / len(results)
        aggregate[f"recall@{n}_micro"] = recall_at_n_micro([(r["_ranked"], r["_truth"]) for r in results], n)

    pooled_fills, pooled_truth = {}, {}
    for name in sorted(per_table):
        r = per_table[name]
        pooled_fills.update({(name,) + cell: values for cell, values in r["_fills"].items()})
        pooled_truth.update({(name,) + cell: value for cell, value in r["_truth_fills"].items()})
    for k in config.evaluation.fill_ks:
        precision, recall = fill_precision_recall_at_k(pooled_fills, pooled_truth, k)
        aggregate[f"fill_precision@{k}"] = sum(r[f"fill_precision@{k}"] for r in results) / len(results)
        aggregate[f"fill_recall@{k}"] = sum(r[f"fill_recall@{k}"] for r in results) / len(results)
        aggregate[f"fill_precision@{k}_micro"] = precision
        aggregate[f"fill_recall@{k}_micro"] = recall
    return aggregate


def _aggregate_stability(per_table: Dict[str, Dict], config: PipelineConfig) -> Dict:
    names = ["average_precision"] + [f"recall@{n}" for n in config.evaluation.recall_cutoffs]
    aggregate = {}
    for name in names:
        runs = [run[name] for t in sorted(per_table) for run in per_table[t]["runs"]]
        aggregate[name] = mean_std(runs)
    return aggregate


def cmd_ingest(input_path, output_path, keep_first: bool = False) -> Dict:
    with stage("ingest"):
        return ingest_file(input_path, output_path, keep_first=keep_first)
