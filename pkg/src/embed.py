"""
Dense entity-embedding index and string-distance utilities.

EmbeddingIndex answers exact k-NN queries by a vectorized linear scan under
the metric the embeddings were trained with (cosine or dot product). Label
embeddings and normalized Levenshtein distance back the string features of
candidate ranking.
"""

import logging
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Protocol, Sequence

import numpy as np
from sklearn.feature_extraction.text import HashingVectorizer

from .errors import EmbeddingFormatError, UnknownIdError

logger = logging.getLogger(__name__)

METRICS = ("cosine", "dot")
_METRIC_ALIASES = {"cosine": "cosine", "dot": "dot", "dot-product": "dot", "dot_product": "dot"}


def canonical_metric(metric: str) -> str:
    try:
        return _METRIC_ALIASES[metric.strip().lower()]
    except KeyError:
        raise ValueError(f"Unknown metric {metric!r}; expected one of {sorted(_METRIC_ALIASES)}")


@dataclass(frozen=True)
class Neighbor:
    """A nearest neighbor; higher similarity means closer."""
    entity: str
    similarity: float


class EmbeddingIndex:
    """
    Entity -> vector map with a fixed similarity metric.

    Rows are stored in ascending entity-id order, so a stable sort on
    similarity breaks ties by entity id.
    """

    def __init__(self, vectors: Mapping[str, Sequence[float]], metric: str = "cosine", dim: Optional[int] = None):
        self.metric = canonical_metric(metric)
        self._ids: List[str] = sorted(vectors)
        self._position: Dict[str, int] = {e: i for i, e in enumerate(self._ids)}

        if self._ids:
            lengths = {len(vectors[e]) for e in self._ids}
            if len(lengths) != 1:
                raise EmbeddingFormatError(f"Ragged vectors: lengths {sorted(lengths)}")
            matrix = np.asarray([np.asarray(vectors[e], dtype=np.float64) for e in self._ids])
            if matrix.ndim != 2:
                raise EmbeddingFormatError("All vectors must have the same length")
            if dim is not None and matrix.shape[1] != dim:
                raise EmbeddingFormatError(f"Vectors have length {matrix.shape[1]}, declared dim {dim}")
            if not np.all(np.isfinite(matrix)):
                raise EmbeddingFormatError("Vectors must have finite components")
            self.dim = int(matrix.shape[1])
        else:
            matrix = np.zeros((0, dim or 0), dtype=np.float64)
            self.dim = int(dim or 0)

        matrix.setflags(write=False)
        self._matrix = matrix
        norms = np.linalg.norm(matrix, axis=1) if len(matrix) else np.zeros(0)
        safe = np.where(norms > 0, norms, 1.0)
        unit = matrix / safe[:, None] if len(matrix) else matrix
        unit.setflags(write=False)
        self._unit = unit

    def __len__(self) -> int:
        return len(self._ids)

    def __contains__(self, entity_id: str) -> bool:
        return entity_id in self._position

    @property
    def ids(self) -> List[str]:
        return list(self._ids)

    def vector(self, entity_id: str) -> np.ndarray:
        return self._matrix[self._row(entity_id)]

    def _row(self, entity_id: str) -> int:
        try:
            return self._position[entity_id]
        except KeyError:
            raise UnknownIdError(f"Entity {entity_id!r} is not in the embedding index")

    def _scores(self, row: int) -> np.ndarray:
        if self.metric == "cosine":
            return self._unit @ self._unit[row]
        return self._matrix @ self._matrix[row]

    def similarity(self, a: str, b: str) -> float:
        """Cosine similarity or dot product, per the index metric."""
        ra, rb = self._row(a), self._row(b)
        if self.metric == "cosine":
            return float(self._unit[ra] @ self._unit[rb])
        return float(self._matrix[ra] @ self._matrix[rb])

    def distance(self, a: str, b: str) -> float:
        """Metric-consistent distance: 1 - cosine, or negated dot product."""
        sim = self.similarity(a, b)
        return 1.0 - sim if self.metric == "cosine" else -sim

    def nearest_neighbors(self, entity_id: str, k: int) -> List[Neighbor]:
        """
        Exact top-k neighbors of `entity_id`, excluding itself.

        Ordered by descending similarity, ties by ascending entity id.
        """
        if k < 0:
            raise ValueError(f"k must be non-negative, got {k}")
        row = self._row(entity_id)
        if k == 0 or len(self._ids) <= 1:
            return []
        scores = self._scores(row)
        order = np.argsort(-scores, kind="stable")
        result = []
        for position in order:
            if position == row:
                continue
            result.append(Neighbor(self._ids[position], float(scores[position])))
            if len(result) == k:
                break
        return result

    def euclidean_distances(self, entity_id: str, others: Iterable[str]) -> Dict[str, float]:
        """L2 distances from `entity_id` to every id in `others` present in the index."""
        origin = self._matrix[self._row(entity_id)]
        present = [o for o in others if o in self._position]
        if not present:
            return {}
        rows = self._matrix[[self._position[o] for o in present]]
        dists = np.linalg.norm(rows - origin, axis=1)
        return {o: float(d) for o, d in zip(present, dists)}


def load_embeddings(path, metric: Optional[str] = None) -> EmbeddingIndex:
    """
    Load an embedding index from the text format.

    First line `dim metric`; then `entity_id v1 ... vdim` per line.

    Args:
        path: Path to the embedding file
        metric: Expected metric; must agree with the header when given

    Returns:
        EmbeddingIndex
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Embedding file not found: {path}")

    vectors: Dict[str, List[float]] = {}
    dim: Optional[int] = None
    header_metric: Optional[str] = None

    with open(path, 'r', encoding='utf-8') as f:
        for line_no, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line:
                continue
            fields = line.split()
            if dim is None:
                if len(fields) != 2:
                    raise EmbeddingFormatError("Header must be `dim metric`", line_no)
                try:
                    dim = int(fields[0])
                except ValueError:
                    raise EmbeddingFormatError(f"Dimension is not an integer: {fields[0]!r}", line_no)
                if dim <= 0:
                    raise EmbeddingFormatError("Dimension must be positive", line_no)
                try:
                    header_metric = canonical_metric(fields[1])
                except ValueError as e:
                    raise EmbeddingFormatError(str(e), line_no)
                continue

            entity_id, values = fields[0], fields[1:]
            if len(values) != dim:
                raise EmbeddingFormatError(f"Expected {dim} components, got {len(values)}", line_no)
            try:
                vector = [float(v) for v in values]
            except ValueError:
                raise EmbeddingFormatError("Non-numeric component", line_no)
            if not all(math.isfinite(v) for v in vector):
                raise EmbeddingFormatError("Non-finite component", line_no)
            if entity_id in vectors:
                raise EmbeddingFormatError(f"Duplicate entity {entity_id!r}", line_no)
            vectors[entity_id] = vector

    if metric is not None and header_metric is not None and canonical_metric(metric) != header_metric:
        raise EmbeddingFormatError(f"File declares metric {header_metric!r}, expected {canonical_metric(metric)!r}")

    index = EmbeddingIndex(vectors, metric=header_metric or metric or "cosine", dim=dim)
    logger.info("Loaded %d embeddings (dim=%d, metric=%s) from %s", len(index), index.dim, index.metric, path)
    return index


def nearest_neighbors(idx: EmbeddingIndex, entity_id: str, k: int) -> List[Neighbor]:
    return idx.nearest_neighbors(entity_id, k)


def similarity(idx: EmbeddingIndex, a: str, b: str) -> float:
    return idx.similarity(a, b)


# ----------------------------------------------------------------------
# String distances
# ----------------------------------------------------------------------

def levenshtein_distance(s1: str, s2: str) -> int:
    """
    Levenshtein distance between two strings.

    Args:
        s1: First string
        s2: Second string

    Returns:
        Edit distance (number of insertions, deletions, substitutions)
    """
    if len(s1) < len(s2):
        return levenshtein_distance(s2, s1)

    if len(s2) == 0:
        return len(s1)

    previous_row = list(range(len(s2) + 1))
    for i, c1 in enumerate(s1):
        current_row = [i + 1]
        for j, c2 in enumerate(s2):
            insertions = previous_row[j + 1] + 1
            deletions = current_row[j] + 1
            substitutions = previous_row[j] + (c1 != c2)
            current_row.append(min(insertions, deletions, substitutions))
        previous_row = current_row

    return previous_row[-1]


def normalized_levenshtein(a: str, b: str) -> float:
    """Edit distance divided by the longer length; 0 when both are empty."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 0.0
    return levenshtein_distance(a, b) / longest


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity; 0 when either vector is zero."""
    denom = float(np.linalg.norm(u) * np.linalg.norm(v))
    if denom == 0.0:
        return 0.0
    return float(np.dot(u, v) / denom)


# ----------------------------------------------------------------------
# Label embeddings
# ----------------------------------------------------------------------

class LabelEmbedder(Protocol):
    dim: int

    def embed(self, text: str) -> np.ndarray:
        ...


class HashedNgramEmbedder:
    """
    Character n-gram hashing embedding (n = 3..5, 128 buckets, L2-normalized).

    Deterministic and dependency-free beyond scikit-learn's murmur hashing.
    """

    def __init__(self, dim: int = 128, ngram_range=(3, 5)):
        self.dim = dim
        self._vectorizer = HashingVectorizer(
            analyzer="char",
            ngram_range=tuple(ngram_range),
            n_features=dim,
            alternate_sign=False,
            norm="l2",
            lowercase=True,
        )
        self._embed_cached = lru_cache(maxsize=65536)(self._embed)

    def _embed(self, text: str) -> np.ndarray:
        vector = self._vectorizer.transform([text]).toarray()[0]
        vector.setflags(write=False)
        return vector

    def buckets(self, text: str) -> frozenset:
        """Indices of the non-zero components."""
        return frozenset(int(i) for i in self._vectorizer.transform([text]).indices)

    def embed(self, text: str) -> np.ndarray:
        return self._embed_cached(text)


class PretrainedLabelEmbedder:
    """
    Label embedding from a FastText-style `.vec` file.

    A label embeds as the mean of its lower-cased token vectors; unknown
    tokens are skipped, and a label with no known token embeds as zeros.
    """

    def __init__(self, vectors: Mapping[str, np.ndarray], dim: int):
        self.dim = dim
        self._vectors = dict(vectors)

    @classmethod
    def from_file(cls, path, limit: Optional[int] = None) -> 'PretrainedLabelEmbedder':
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Label vector file not found: {path}")
        vectors: Dict[str, np.ndarray] = {}
        dim = None
        with open(path, 'r', encoding='utf-8') as f:
            for line_no, raw in enumerate(f, start=1):
                fields = raw.rstrip().split(" ")
                if line_no == 1 and len(fields) == 2:
                    dim = int(fields[1])
                    continue
                if dim is None:
                    dim = len(fields) - 1
                if len(fields) != dim + 1:
                    raise EmbeddingFormatError(f"Expected {dim} components", line_no)
                vectors[fields[0]] = np.asarray(fields[1:], dtype=np.float64)
                if limit is not None and len(vectors) >= limit:
                    break
        if dim is None:
            raise EmbeddingFormatError(f"Empty label vector file: {path}")
        return cls(vectors, dim)

    def embed(self, text: str) -> np.ndarray:
        tokens = [t for t in text.lower().split() if t in self._vectors]
        if not tokens:
            return np.zeros(self.dim)
        return np.mean([self._vectors[t] for t in tokens], axis=0)


_DEFAULT_LABEL_EMBEDDER = HashedNgramEmbedder()


def label_embedding(text: str, embedder: Optional[LabelEmbedder] = None) -> np.ndarray:
    """Embed a label with the configured provider (hashed character n-grams by default)."""
    return (embedder or _DEFAULT_LABEL_EMBEDDER).embed(text)
