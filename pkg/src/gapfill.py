"""
Ranked gap filling.

A cell whose column is linked to a property the subject already has in the
KB is filled straight from the triple. Every other cell is filled from
generator samples, each kept only when some web snippet about it is close
enough to the context built from the seed rows.
"""

import logging
import re
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .clients import Clients, GenerationRequest, SearchClient, SearchSnippet, SentenceEncoder
from .config import GapFillingConfig
from .errors import LinkingError
from .interpret import LinkedTable
from .kb import KnowledgeBase, ObjectValue, Triple
from .suggest import RankedSuggestion
from .units import parse_number

logger = logging.getLogger(__name__)

KB_TRIPLE = "kb-triple"
WEB_SNIPPET = "web-snippet"

_SENTENCE_END = re.compile(r"[.!?](?=\s|$)")
_TRIM_CHARS = " \t\"'`,;:"


@dataclass(frozen=True)
class Provenance:
    """Where a fill comes from: a KB triple, or a web snippet with its context similarity."""
    kind: str
    triple: Optional[Triple] = None
    snippet: Optional[SearchSnippet] = None
    similarity: Optional[float] = None

    def __post_init__(self):
        if self.kind == KB_TRIPLE:
            if self.triple is None or self.snippet is not None:
                raise ValueError("kb-triple provenance carries exactly a triple")
        elif self.kind == WEB_SNIPPET:
            if self.snippet is None or self.triple is not None or self.similarity is None:
                raise ValueError("web-snippet provenance carries a snippet and a similarity")
            if not -1.0 - 1e-9 <= self.similarity <= 1.0 + 1e-9:
                raise ValueError("similarity must be in [-1, 1]")
        else:
            raise ValueError(f"Unknown provenance kind {self.kind!r}")

    @classmethod
    def from_triple(cls, triple: Triple) -> 'Provenance':
        return cls(KB_TRIPLE, triple=triple)

    @classmethod
    def from_snippet(cls, snippet: SearchSnippet, similarity: float) -> 'Provenance':
        return cls(WEB_SNIPPET, snippet=snippet, similarity=float(similarity))


@dataclass(frozen=True)
class GapFill:
    value: str
    provenance: Provenance
    numeric_warning: bool = False

    def __post_init__(self):
        if not self.value:
            raise ValueError("Fill value must be non-empty")

    def to_dict(self, row: int, column: int) -> Dict:
        out = {
            "row": row,
            "column": column,
            "value": self.value,
            "provenanceKind": self.provenance.kind,
            "numericWarning": self.numeric_warning,
        }
        if self.provenance.kind == KB_TRIPLE:
            out["tripleId"] = self.provenance.triple.triple_id
        else:
            out["url"] = self.provenance.snippet.url
            out["similarity"] = round(self.provenance.similarity, 6)
        return out


@dataclass
class SeedContext:
    """Context sentences gathered from the seed rows, with their unit vectors."""
    sentences: List[str] = field(default_factory=list)
    vectors: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)))

    def __post_init__(self):
        if len(self.sentences) != len(self.vectors):
            raise ValueError("sentences and vectors must have the same length")

    def __len__(self) -> int:
        return len(self.sentences)

    def score(self, vector: np.ndarray) -> float:
        """Max cosine similarity of `vector` to the context sentences; 0 for an empty context."""
        if not self.sentences:
            return 0.0
        norms = np.linalg.norm(self.vectors, axis=1) * np.linalg.norm(vector)
        dots = self.vectors @ vector
        sims = np.divide(dots, norms, out=np.zeros_like(dots, dtype=np.float64), where=norms > 0)
        return float(np.max(sims))


def _seed_rows(linked: LinkedTable, j: int, exclude_row: Optional[int] = None) -> List[int]:
    return [
        i for i, entity in enumerate(linked.main_column)
        if entity is not None and i != exclude_row and linked.table.cell(i, j).strip()
    ]


def _unitless_column(linked: LinkedTable, j: int, integral: bool = False) -> bool:
    """True when every non-empty cell of column j is a unitless number (an integer with `integral`)."""
    cells = [c for c in linked.table.column(j) if c.strip()]
    if not cells:
        return False
    for cell in cells:
        quantity = parse_number(cell)
        if quantity is None or quantity.unit is not None:
            return False
        if integral and not float(quantity.value).is_integer():
            return False
    return True


def format_for_column(obj: ObjectValue, kb: KnowledgeBase, linked: LinkedTable, j: int) -> str:
    """Render a KB object the way column j writes its values: years for dates, bare numbers for unitless columns."""
    if obj.kind == "time" and _unitless_column(linked, j, integral=True):
        return str(obj.year())
    if obj.kind == "number" and obj.unit and _unitless_column(linked, j):
        return ObjectValue.numeric(obj.number).render()
    return obj.render(kb)


def _pairwise_cosine(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = vectors / safe[:, None]
    return unit @ unit.T


def context_of_seeds(
    search: SearchClient,
    encoder: SentenceEncoder,
    kb: KnowledgeBase,
    linked: LinkedTable,
    j: int,
    property_id: Optional[str] = None,
    sim_threshold: float = 0.5,
    mode: str = "mean",
    restrict: Optional[Sequence[str]] = None,
    exclude_row: Optional[int] = None,
) -> SeedContext:
    """
    Build the seed context for column `j`.

    Searches {subject label, cell value, property label} for every seed row
    except `exclude_row`, pools the snippet descriptions and keeps each one
    whose mean (or max) cosine similarity to the rest of the pool reaches
    `sim_threshold`.
    A pool of one sentence keeps it.
    """
    pool: List[str] = []
    for i in _seed_rows(linked, j, exclude_row):
        keywords = [kb.label(linked.main_column[i]), linked.table.cell(i, j).strip()]
        if property_id is not None:
            keywords.append(kb.property_label(property_id))
        pool.extend(s.description for s in search.search(keywords, restrict))

    if not pool:
        return SeedContext()
    vectors = np.asarray([encoder.encode(s) for s in pool], dtype=np.float64)
    if len(pool) == 1:
        return SeedContext(pool, vectors)

    sims = _pairwise_cosine(vectors)
    keep = []
    for a in range(len(pool)):
        others = np.delete(sims[a], a)
        aggregate = float(np.max(others)) if mode == "max" else float(np.mean(others))
        if aggregate >= sim_threshold:
            keep.append(a)
    logger.debug("Column %d context: kept %d/%d sentences", j, len(keep), len(pool))
    return SeedContext([pool[a] for a in keep], vectors[keep] if keep else np.zeros((0, vectors.shape[1])))


def build_fill_prompt(
    kb: KnowledgeBase,
    linked: LinkedTable,
    j: int,
    subject: str,
    property_id: Optional[str] = None,
    exclude_row: Optional[int] = None,
) -> Tuple[str, str]:
    """
    Prompt for column `j` of a row about `subject`.

    Returns:
        (prompt, open stub the generator is expected to continue)
    """
    rows = _seed_rows(linked, j, exclude_row)
    if not rows:
        raise LinkingError(f"No linked seed rows with a value in column {j}")
    target = kb.label(subject)

    if property_id is not None:
        relation = kb.property_label(property_id)
        lines = [f"{kb.label(linked.main_column[i])} has {relation} {linked.table.cell(i, j).strip()}" for i in rows]
        stub = f"{target} has {relation}"
        return "\n".join(lines + [stub]), stub

    pairs = [f"{kb.label(linked.main_column[i])} is to {linked.table.cell(i, j).strip()}" for i in rows]
    stub = f"{target} is to"
    return " as ".join(pairs + [stub]), stub


def extract_value(text: str, prompt: str, stub: str, analogy: bool = False) -> str:
    """Cut the generated value out of a continuation; may return an empty string."""
    value = text
    if value.startswith(prompt):
        value = value[len(prompt):]
    value = value.lstrip()
    if value.startswith(stub):
        value = value[len(stub):]
    value = value.lstrip()

    value = value.split("\n", 1)[0]
    match = _SENTENCE_END.search(value)
    if match:
        value = value[:match.start()]
    if analogy:
        value = value.split(" as ", 1)[0]
    return value.strip(_TRIM_CHARS)


def rank_values(
    kb: KnowledgeBase,
    linked: LinkedTable,
    subject: str,
    j: int,
    property_id: Optional[str],
    clients: Clients,
    config: Optional[GapFillingConfig] = None,
    context: Optional[SeedContext] = None,
    exclude_row: Optional[int] = None,
) -> List[GapFill]:
    """
    Generate candidate values and keep those a web snippet verifies.

    A value survives when its best snippet scores above `fill_threshold`
    against the seed context. Output is ordered by similarity, then value.
    """
    config = config or GapFillingConfig()
    if context is None:
        context = context_of_seeds(
            clients.search, clients.encoder, kb, linked, j, property_id,
            config.sim_threshold, config.context_mode, config.restrict_sources, exclude_row,
        )
    if not len(context):
        logger.debug("Empty context for column %d; nothing can be verified", j)
        return []

    prompt, stub = build_fill_prompt(kb, linked, j, subject, property_id, exclude_row)
    request = GenerationRequest(prompt, config.samples, config.temperature, config.max_sentences)
    analogy = property_id is None

    values: List[str] = []
    for generation in clients.generator.generate(request):
        value = extract_value(generation.text, prompt, stub, analogy)
        if value and value not in values:
            values.append(value)

    fills = []
    for value in values:
        keywords = [kb.label(subject)]
        if property_id is not None:
            keywords.append(kb.property_label(property_id))
        keywords.append(value)

        best: Optional[Tuple[float, SearchSnippet]] = None
        for snippet in clients.search.search(keywords, config.restrict_sources):
            score = context.score(clients.encoder.encode(snippet.description))
            if best is None or score > best[0] or (score == best[0] and snippet.url < best[1].url):
                best = (score, snippet)

        if best is not None and best[0] > config.fill_threshold:
            fills.append(GapFill(
                value,
                Provenance.from_snippet(best[1], best[0]),
                numeric_warning=parse_number(value) is not None,
            ))
    fills.sort(key=lambda f: (-f.provenance.similarity, f.value))
    return fills


class ContextCache:
    """Seed context per (column, excluded row), shared by every fill against the same table."""

    def __init__(self):
        self._contexts: Dict[Tuple[int, Optional[int]], SeedContext] = {}
        self._lock = threading.Lock()

    def get(self, j: int, build, exclude_row: Optional[int] = None) -> SeedContext:
        key = (j, exclude_row)
        with self._lock:
            if key in self._contexts:
                return self._contexts[key]
        context = build()
        with self._lock:
            return self._contexts.setdefault(key, context)


def fill_cell(
    kb: KnowledgeBase,
    linked: LinkedTable,
    subject: str,
    j: int,
    clients: Clients,
    config: Optional[GapFillingConfig] = None,
    contexts: Optional[ContextCache] = None,
    exclude_row: Optional[int] = None,
) -> List[GapFill]:
    """Fill column `j` for `subject`: the KB triple when present, otherwise verified generations."""
    if not 1 <= j < linked.table.n_cols:
        raise ValueError(f"Column {j} outside 1..{linked.table.n_cols - 1}")
    config = config or GapFillingConfig()
    property_id = linked.column_links.get(j)

    if property_id is not None:
        obj = kb.property_lookup(subject, property_id)
        if obj is not None:
            value = format_for_column(obj, kb, linked, j)
            return [GapFill(value, Provenance.from_triple(Triple(subject, property_id, obj)))]

    if not _seed_rows(linked, j, exclude_row):
        return []

    def build():
        return context_of_seeds(
            clients.search, clients.encoder, kb, linked, j, property_id,
            config.sim_threshold, config.context_mode, config.restrict_sources, exclude_row,
        )

    context = contexts.get(j, build, exclude_row) if contexts is not None else build()
    return rank_values(kb, linked, subject, j, property_id, clients, config, context, exclude_row)


def gap_fill(
    i: int,
    j: int,
    linked: LinkedTable,
    kb: KnowledgeBase,
    clients: Clients,
    config: Optional[GapFillingConfig] = None,
    contexts: Optional[ContextCache] = None,
) -> List[GapFill]:
    """Fill cell (i, j) of a linked table."""
    subject = linked.main_column[i]
    if subject is None:
        raise LinkingError(f"Row {i} has no linked subject")
    return fill_cell(kb, linked, subject, j, clients, config, contexts, exclude_row=i)


def complete_row(
    suggestion: RankedSuggestion,
    linked: LinkedTable,
    kb: KnowledgeBase,
    clients: Clients,
    config: Optional[GapFillingConfig] = None,
    contexts: Optional[ContextCache] = None,
    workers: int = 1,
) -> List[Tuple[int, List[GapFill]]]:
    """
    Fill every non-main column for a virtual row about `suggestion.entity`.

    Returns:
        (column, fills) pairs in column order
    """
    columns = list(range(1, linked.table.n_cols))
    if not columns:
        return []
    contexts = contexts or ContextCache()

    def fill(j):
        return fill_cell(kb, linked, suggestion.entity, j, clients, config, contexts)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(fill, columns))
    else:
        results = [fill(j) for j in columns]
    return list(zip(columns, results))
