"""
Table interpretation.

Links main-column cells to KB entities and table columns to KB properties.
Column linking sums exact per-cell scores over the candidate properties and,
when no property wins outright, adds approximate scores on the rows that did
not match exactly: characteristic ranges for numeric columns, the
missing-property likelihood for string columns.
"""

import logging
import threading
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from sklearn.ensemble import IsolationForest

from .config import LinkingConfig
from .embed import EmbeddingIndex, normalized_levenshtein
from .errors import TableFormatError
from .kb import KnowledgeBase
from .units import SCALAR, Quantity, conv, parse_number, quantities_equal
from .utils import normalize_text

logger = logging.getLogger(__name__)

FAIL_NO_CANDIDATES = "no-candidates"
FAIL_TIE = "tie"
FAIL_BELOW_THRESHOLD = "below-threshold"


# ----------------------------------------------------------------------
# Tables
# ----------------------------------------------------------------------

@dataclass(frozen=True)
class Table:
    """Rectangular m x n grid of cell texts; column 0 is the main column."""
    cells: Tuple[Tuple[str, ...], ...]

    def __post_init__(self):
        if not self.cells:
            raise TableFormatError("Table must have at least one row")
        width = len(self.cells[0])
        if width == 0:
            raise TableFormatError("Table must have at least one column")
        for i, row in enumerate(self.cells):
            if len(row) != width:
                raise TableFormatError(f"Row {i} has {len(row)} cells, expected {width}")

    @classmethod
    def from_rows(cls, rows: Sequence[Sequence[str]]) -> 'Table':
        return cls(tuple(tuple("" if c is None else str(c) for c in row) for row in rows))

    @classmethod
    def from_csv(cls, path) -> 'Table':
        """Read a header-less UTF-8 CSV file."""
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Table file not found: {path}")
        try:
            frame = pd.read_csv(
                path,
                header=None,
                dtype=str,
                keep_default_na=False,
                na_filter=False,
                skip_blank_lines=True,
                encoding="utf-8",
            )
        except pd.errors.EmptyDataError:
            raise TableFormatError(f"{path}: table is empty")
        except (pd.errors.ParserError, UnicodeDecodeError) as e:
            raise TableFormatError(f"{path}: malformed CSV: {e}")
        frame = frame.fillna("")
        return cls.from_rows(frame.values.tolist())

    @property
    def n_rows(self) -> int:
        return len(self.cells)

    @property
    def n_cols(self) -> int:
        return len(self.cells[0])

    def cell(self, i: int, j: int) -> str:
        return self.cells[i][j]

    def row(self, i: int) -> Tuple[str, ...]:
        return self.cells[i]

    def column(self, j: int) -> List[str]:
        return [row[j] for row in self.cells]

    def select_rows(self, indices: Sequence[int]) -> 'Table':
        return Table(tuple(self.cells[i] for i in indices))

    def head(self, k: int) -> 'Table':
        return self.select_rows(range(min(k, self.n_rows)))


@dataclass
class LinkedTable:
    """A table with its main-column entity links and column -> property links."""
    table: Table
    main_column: List[Optional[str]]
    column_links: Dict[int, Optional[str]] = field(default_factory=dict)
    column_failures: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        if len(self.main_column) != self.table.n_rows:
            raise ValueError("main_column length must equal the number of rows")
        for j in self.column_links:
            if not 1 <= j < self.table.n_cols:
                raise ValueError(f"Column link key {j} outside 1..{self.table.n_cols - 1}")

    @property
    def seeds(self) -> List[str]:
        """Distinct linked main-column entities in row order."""
        seen = []
        for entity in self.main_column:
            if entity is not None and entity not in seen:
                seen.append(entity)
        return seen

    @property
    def in_table_properties(self) -> FrozenSet[str]:
        return frozenset(p for p in self.column_links.values() if p is not None)

    def to_dict(self, kb: KnowledgeBase) -> Dict:
        return {
            "rows": self.table.n_rows,
            "columns": self.table.n_cols,
            "main_column": [
                {
                    "row": i,
                    "cell": self.table.cell(i, 0),
                    "entity": entity,
                    "label": kb.label(entity) if entity is not None else None,
                }
                for i, entity in enumerate(self.main_column)
            ],
            "column_links": [
                {
                    "column": j,
                    "property": self.column_links.get(j),
                    "label": kb.property_label(self.column_links[j]) if self.column_links.get(j) else None,
                    "failure": self.column_failures.get(j),
                }
                for j in range(1, self.table.n_cols)
            ],
        }


@dataclass(frozen=True)
class CharacteristicRange:
    """[low, high] of a numeric property over the entities of one type, after outlier removal."""
    property: str
    type: str
    low: float
    high: float
    dimension: str = SCALAR
    unit: Optional[str] = None

    def __post_init__(self):
        if self.low > self.high:
            raise ValueError("low must not exceed high")

    def contains(self, value: float) -> bool:
        return self.low <= value <= self.high


# ----------------------------------------------------------------------
# Outlier removal for characteristic ranges
# ----------------------------------------------------------------------

class IsolationForestRemover:
    """Drops values flagged by a seeded 1-D isolation forest."""

    def __init__(self, n_estimators: int = 100, max_samples: int = 256,
                 contamination: float = 0.05, random_state: int = 42):
        self.n_estimators = n_estimators
        self.max_samples = max_samples
        self.contamination = contamination
        self.random_state = random_state

    def filter(self, values: Sequence[float]) -> List[float]:
        X = np.asarray(values, dtype=np.float64).reshape(-1, 1)
        model = IsolationForest(
            n_estimators=self.n_estimators,
            max_samples=min(self.max_samples, len(X)),
            contamination=self.contamination,
            random_state=self.random_state,
        )
        keep = model.fit_predict(X) == 1
        return [float(v) for v, k in zip(values, keep) if k]


class IqrRemover:
    """Drops values outside [Q1 - f*IQR, Q3 + f*IQR]."""

    def __init__(self, factor: float = 1.5):
        self.factor = factor

    def filter(self, values: Sequence[float]) -> List[float]:
        q1, q3 = np.percentile(np.asarray(values, dtype=np.float64), [25, 75])
        iqr = q3 - q1
        low, high = q1 - self.factor * iqr, q3 + self.factor * iqr
        return [float(v) for v in values if low <= v <= high]


def build_remover(config: LinkingConfig, seed: int = 42):
    if config.outlier_remover == "iqr":
        return IqrRemover(config.iqr_factor)
    return IsolationForestRemover(
        n_estimators=config.isolation_trees,
        max_samples=config.isolation_max_samples,
        contamination=config.isolation_contamination,
        random_state=seed,
    )


def characteristic_range(
    kb: KnowledgeBase,
    property_id: str,
    type_id: str,
    remover=None,
    min_support: int = 3,
) -> Optional[CharacteristicRange]:
    """
    Characteristic range of a numeric property for a type.

    Collects the unit-normalized numeric values of `property_id` over the
    entities directly typed `type_id`, removes outliers and returns the range
    of the survivors. When values span several dimensions the most common
    one is used. For a physical dimension the range also records the unit
    most of its KB values were stated in, which unitless cells adopt.

    Returns:
        CharacteristicRange, or None with fewer than `min_support` values
    """
    if not kb.has_entity(type_id) or not kb.has_property(property_id):
        return None

    by_dimension: Dict[str, List[float]] = {}
    units: Dict[str, Counter] = {}
    for entity_id in sorted(kb.entities_of_type(type_id)):
        obj = kb.property_lookup(entity_id, property_id)
        if obj is None or obj.kind != "number":
            continue
        dimension, value = conv(obj.quantity())
        by_dimension.setdefault(dimension, []).append(value)
        if obj.unit is not None:
            units.setdefault(dimension, Counter())[obj.unit] += 1

    if not by_dimension:
        return None
    counts = Counter({d: len(v) for d, v in by_dimension.items()})
    dimension = sorted(counts, key=lambda d: (-counts[d], d))[0]
    values = by_dimension[dimension]
    if len(values) < min_support:
        return None

    survivors = (remover or IsolationForestRemover()).filter(values)
    if not survivors:
        return None
    unit = None
    if dimension != SCALAR and dimension in units:
        unit = sorted(units[dimension], key=lambda u: (-units[dimension][u], u))[0]
    return CharacteristicRange(property_id, type_id, min(survivors), max(survivors), dimension, unit)


class RangeCache:
    """Lazily computed, read-mostly map (property, type) -> characteristic range."""

    def __init__(self, kb: KnowledgeBase, remover=None, min_support: int = 3):
        self.kb = kb
        self.remover = remover or IsolationForestRemover()
        self.min_support = min_support
        self._ranges: Dict[Tuple[str, str], Optional[CharacteristicRange]] = {}
        self._lock = threading.Lock()

    def get(self, property_id: str, type_id: str) -> Optional[CharacteristicRange]:
        key = (property_id, type_id)
        with self._lock:
            if key in self._ranges:
                return self._ranges[key]
        computed = characteristic_range(self.kb, property_id, type_id, self.remover, self.min_support)
        with self._lock:
            self._ranges.setdefault(key, computed)
            return self._ranges[key]


# ----------------------------------------------------------------------
# Main-column linking
# ----------------------------------------------------------------------

def link_cell(kb: KnowledgeBase, text: str, fuzzy_threshold: float = 0.2) -> Optional[str]:
    """Unique exact label/alias match, else unique fuzzy match, else None."""
    exact = kb.resolve_label(text)
    if len(exact) == 1:
        return next(iter(exact))
    if exact:
        return None

    query = normalize_text(text)
    if not query:
        return None
    matches = set()
    for form, entity_id in kb.surface_forms():
        longest = max(len(form), len(query))
        if abs(len(form) - len(query)) > fuzzy_threshold * longest:
            continue
        if normalized_levenshtein(form, query) <= fuzzy_threshold:
            matches.add(entity_id)
    if len(matches) == 1:
        return matches.pop()
    return None


def link_main_column(kb: KnowledgeBase, table: Table, fuzzy_threshold: float = 0.2) -> LinkedTable:
    """Link every main-column cell; unlinkable or ambiguous cells yield None."""
    main_column = [link_cell(kb, table.cell(i, 0), fuzzy_threshold) for i in range(table.n_rows)]
    linked = sum(1 for e in main_column if e is not None)
    logger.info("Linked %d/%d main-column cells", linked, table.n_rows)
    return LinkedTable(table=table, main_column=main_column)


def candidate_properties(kb: KnowledgeBase, main_column: Sequence[Optional[str]]) -> FrozenSet[str]:
    """Properties held by at least one linked entity."""
    props = set()
    for entity_id in main_column:
        if entity_id is not None:
            props |= kb.properties_of(entity_id)
    return frozenset(props)


def is_numeric_column(table: Table, j: int) -> bool:
    """True iff at least half of the non-empty cells parse as numbers."""
    non_empty = [c for c in table.column(j) if c.strip()]
    if not non_empty:
        return False
    numeric = sum(1 for c in non_empty if parse_number(c) is not None)
    return 2 * numeric >= len(non_empty)


# ----------------------------------------------------------------------
# Cell scores
# ----------------------------------------------------------------------

def numeric_exact_score(
    kb: KnowledgeBase,
    main_column: Sequence[Optional[str]],
    table: Table,
    i: int,
    j: int,
    property_id: str,
    tolerance: float = 1e-9,
) -> int:
    """1 iff p(L_i) equals the cell value within unit conversion."""
    entity_id = main_column[i]
    quantity = parse_number(table.cell(i, j))
    if entity_id is None or quantity is None:
        return 0
    obj = kb.property_lookup(entity_id, property_id)
    if obj is None:
        return 0
    if obj.kind == "number":
        return int(quantities_equal(obj.quantity(), quantity, rel_tol=tolerance))
    if obj.kind == "time" and quantity.unit is None and float(quantity.value).is_integer():
        return int(obj.year() == int(quantity.value))
    return 0


def numeric_approx_score(
    kb: KnowledgeBase,
    main_column: Sequence[Optional[str]],
    table: Table,
    i: int,
    j: int,
    property_id: str,
    ranges: RangeCache,
) -> int:
    """
    1 iff some type of L_i has a characteristic range for p containing the cell value.

    A unitless cell is read in the unit the range's KB values were stated in.
    """
    entity_id = main_column[i]
    quantity = parse_number(table.cell(i, j))
    if entity_id is None or quantity is None:
        return 0
    for type_id in sorted(kb.types_of(entity_id)):
        crange = ranges.get(property_id, type_id)
        if crange is None:
            continue
        cell = quantity
        if cell.unit is None and crange.unit is not None:
            cell = Quantity(quantity.value, crange.unit)
        dimension, value = conv(cell)
        if cell.unit is not None and dimension != crange.dimension:
            continue
        if crange.contains(value):
            return 1
    return 0


def string_exact_score(
    kb: KnowledgeBase,
    main_column: Sequence[Optional[str]],
    table: Table,
    i: int,
    j: int,
    property_id: str,
    fuzzy_threshold: float = 0.2,
) -> int:
    """1 iff the rendered p(L_i) fuzzy-matches the cell."""
    entity_id = main_column[i]
    cell = normalize_text(table.cell(i, j))
    if entity_id is None or not cell:
        return 0
    obj = kb.property_lookup(entity_id, property_id)
    if obj is None:
        return 0
    rendered = normalize_text(obj.render(kb))
    return int(normalized_levenshtein(rendered, cell) <= fuzzy_threshold)


def missing_property_score(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    entity_id: str,
    property_id: str,
    n_neighbors: int = 10,
) -> float:
    """
    Likelihood that `entity_id` lacks `property_id` only by omission.

    Looks at the `n_neighbors` nearest entities (Euclidean distance in the
    embedding space) that share a type with the entity. Each neighbor votes
    +sim if it has the property and -sim otherwise, with
    sim = 1 - L2 / max L2 over the selected neighbors (0 when that maximum
    is 0, e.g. a single neighbor). The mean vote is clamped to [0, 1]. The L2-based similarity follows translation-style
    (TransE) embeddings.
    """
    if n_neighbors < 1:
        raise ValueError("n_neighbors must be >= 1")
    idx.vector(entity_id)

    pool = set()
    for type_id in kb.types_of(entity_id):
        pool |= kb.entities_of_type(type_id)
    pool.discard(entity_id)
    if not pool:
        return 0.0

    distances = idx.euclidean_distances(entity_id, sorted(pool))
    if not distances:
        return 0.0
    nearest = sorted(distances.items(), key=lambda item: (item[1], item[0]))[:n_neighbors]
    max_distance = max(d for _, d in nearest)

    total = 0.0
    for neighbor, distance in nearest:
        sim = 0.0 if max_distance == 0 else 1.0 - distance / max_distance
        has_property = kb.property_lookup(neighbor, property_id) is not None
        total += sim if has_property else -sim
    mean = total / len(nearest)
    return min(max(0.0, mean), 1.0)


def string_approx_score(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    main_column: Sequence[Optional[str]],
    table: Table,
    i: int,
    j: int,
    property_id: str,
    n_neighbors: int = 10,
) -> float:
    """Missing-property likelihood of p for L_i when L_i lacks p; 0 otherwise."""
    entity_id = main_column[i]
    if entity_id is None or not table.cell(i, j).strip():
        return 0.0
    if kb.property_lookup(entity_id, property_id) is not None:
        return 0.0
    if entity_id not in idx:
        return 0.0
    return missing_property_score(kb, idx, entity_id, property_id, n_neighbors)


# ----------------------------------------------------------------------
# Column linking
# ----------------------------------------------------------------------

@dataclass
class ColumnLink:
    """Outcome of linking one column: a property, or a failure reason."""
    column: int
    property_id: Optional[str] = None
    failure: Optional[str] = None
    stage: Optional[str] = None
    numeric: bool = False
    scores: Dict[str, float] = field(default_factory=dict)
    approx_scores: Dict[str, float] = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.property_id is not None


def _score_functions(kb, idx, table, main_column, j, config: LinkingConfig, ranges: RangeCache):
    if is_numeric_column(table, j):
        def exact(i, p):
            return numeric_exact_score(kb, main_column, table, i, j, p, config.numeric_tolerance)

        def approx(i, p):
            return numeric_approx_score(kb, main_column, table, i, j, p, ranges)

        return True, exact, approx

    def exact(i, p):
        return string_exact_score(kb, main_column, table, i, j, p, config.fuzzy_threshold)

    def approx(i, p):
        return string_approx_score(kb, idx, main_column, table, i, j, p, config.n_neighbors)

    return False, exact, approx


def link_column(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    table: Table,
    main_column: Sequence[Optional[str]],
    j: int,
    threshold: float,
    config: Optional[LinkingConfig] = None,
    ranges: Optional[RangeCache] = None,
) -> ColumnLink:
    """
    Link column `j` to a property of the main-column entities.

    Returns the unique top property by summed exact score when it reaches
    `threshold`; otherwise re-scores the tied top properties with
    approximate scores on rows whose exact score is 0 and applies the same
    test. Anything else fails with `no-candidates`, `tie` or
    `below-threshold`.
    """
    if not 1 <= j < table.n_cols:
        raise ValueError(f"Column {j} outside 1..{table.n_cols - 1}")
    config = config or LinkingConfig()
    ranges = ranges or RangeCache(kb, min_support=config.min_range_support)

    props = sorted(candidate_properties(kb, main_column))
    if not props:
        return ColumnLink(column=j, failure=FAIL_NO_CANDIDATES)

    numeric, exact, approx = _score_functions(kb, idx, table, main_column, j, config, ranges)
    rows = range(table.n_rows)

    exact_cells = {(i, p): exact(i, p) for p in props for i in rows}
    scores = {p: float(sum(exact_cells[(i, p)] for i in rows)) for p in props}
    best = max(scores.values())
    scores_max = [p for p in props if scores[p] == best]
    if len(scores_max) == 1 and best >= threshold:
        return ColumnLink(column=j, property_id=scores_max[0], stage="exact", numeric=numeric, scores=scores)

    approx_scores = {
        p: scores[p] + sum(approx(i, p) for i in rows if exact_cells[(i, p)] == 0)
        for p in scores_max
    }
    best_approx = max(approx_scores.values())
    approx_max = [p for p in scores_max if approx_scores[p] == best_approx]
    if len(approx_max) == 1 and best_approx >= threshold:
        return ColumnLink(
            column=j, property_id=approx_max[0], stage="approximate", numeric=numeric,
            scores=scores, approx_scores=approx_scores,
        )

    failure = FAIL_TIE if len(approx_max) > 1 else FAIL_BELOW_THRESHOLD
    return ColumnLink(
        column=j, failure=failure, numeric=numeric, scores=scores, approx_scores=approx_scores,
    )


def link_table(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    table: Table,
    threshold: Optional[float] = None,
    config: Optional[LinkingConfig] = None,
    ranges: Optional[RangeCache] = None,
) -> LinkedTable:
    """
    Link the main column, then every other column against it.

    Args:
        threshold: Coverage threshold; defaults to ceil(0.5 * linked rows)

    Returns:
        LinkedTable with failed columns recorded as None
    """
    config = config or LinkingConfig()
    ranges = ranges or RangeCache(kb, min_support=config.min_range_support)
    linked = link_main_column(kb, table, config.fuzzy_threshold)

    n_linked = sum(1 for e in linked.main_column if e is not None)
    if threshold is None:
        threshold = float(-(-n_linked // 2))

    for j in range(1, table.n_cols):
        if n_linked == 0:
            result = ColumnLink(column=j, failure=FAIL_NO_CANDIDATES)
        else:
            result = link_column(kb, idx, table, linked.main_column, j, threshold, config, ranges)
        linked.column_links[j] = result.property_id
        if result.failure:
            linked.column_failures[j] = result.failure
        logger.info("Column %d -> %s", j, result.property_id or f"unresolved ({result.failure})")
    return linked
