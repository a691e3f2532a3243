"""
Subject suggestion.

Candidates come from two generators: the embedding neighborhood of the seed
entities and language-model continuations of the table rendered as
"S has P V" sentences. Every candidate gets an eight-slot feature vector and
the set is ranked by an unsupervised outlier detector.
"""

import logging
import math
from dataclasses import dataclass
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Mapping, Optional, Sequence, Set

import numpy as np
from scipy.special import expit
from sklearn.neighbors import LocalOutlierFactor, NearestNeighbors
from sklearn.preprocessing import MinMaxScaler

from .clients import GenerationRequest, TextGenerator
from .config import SuggestionConfig
from .embed import EmbeddingIndex, LabelEmbedder, cosine, label_embedding, normalized_levenshtein
from .errors import LinkingError
from .interpret import LinkedTable, Table
from .kb import KnowledgeBase
from .utils import normalize_text

logger = logging.getLogger(__name__)


class CandidateSource(str, Enum):
    EMBEDDING = "embedding"
    LM = "lm"
    BOTH = "both"

    def merge(self, other: 'CandidateSource') -> 'CandidateSource':
        return self if self == other else CandidateSource.BOTH


SOURCE_ORDER = (CandidateSource.EMBEDDING, CandidateSource.LM, CandidateSource.BOTH)


@dataclass(frozen=True)
class FeatureVector:
    """
    Ranking features of one candidate.

    f1 distance to the closest seed in the embedding space (+inf without an embedding),
    f2 overlap of non-table properties with the seeds, f3 minimum normalized label
    edit distance, f4 minimum label-embedding cosine distance, f5 type overlap,
    f6 fraction of seeds having the candidate as a neighbor, f7 generator,
    f8 language-model score (None when unavailable).
    """
    f1: float
    f2: float
    f3: float
    f4: float
    f5: float
    f6: float
    f7: CandidateSource
    f8: Optional[float] = None

    def __post_init__(self):
        for name in ("f2", "f3", "f5", "f6"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")
        if not 0.0 <= self.f4 <= 2.0:
            raise ValueError(f"f4 must be in [0, 2], got {self.f4}")
        if self.f7 == CandidateSource.EMBEDDING and self.f8 is not None:
            raise ValueError("Embedding-only candidates carry no LM score")

    def to_row(self) -> List[float]:
        """Numeric encoding: f1..f6, one-hot f7, f8 (0 when missing), f8 presence."""
        one_hot = [1.0 if self.f7 == s else 0.0 for s in SOURCE_ORDER]
        return [self.f1, self.f2, self.f3, self.f4, self.f5, self.f6, *one_hot,
                0.0 if self.f8 is None else self.f8, 0.0 if self.f8 is None else 1.0]


@dataclass
class Candidate:
    entity: str
    source: CandidateSource
    lm_score: Optional[float] = None
    features: Optional[FeatureVector] = None


@dataclass(frozen=True)
class RankedSuggestion:
    entity: str
    score: float
    source: CandidateSource = CandidateSource.EMBEDDING

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise ValueError("Suggestion score must be finite")

    def to_dict(self, kb: Optional[KnowledgeBase] = None) -> Dict:
        out = {"entity": self.entity, "score": round(self.score, 6), "source": self.source.value}
        if kb is not None:
            out["label"] = kb.label(self.entity)
        return out


def _seeds(main_column: Sequence[Optional[str]]) -> List[str]:
    return sorted({e for e in main_column if e is not None})


def _is_high_cardinality(kb: KnowledgeBase, type_id: str, high_cardinality: Iterable[str]) -> bool:
    names = {normalize_text(h) for h in high_cardinality}
    return normalize_text(type_id) in names or normalize_text(kb.label(type_id)) in names


# ----------------------------------------------------------------------
# Candidate generation
# ----------------------------------------------------------------------

def generate_embedding_candidates(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    main_column: Sequence[Optional[str]],
    in_table_props: FrozenSet[str],
    k_per_seed: int = 1000,
    high_cardinality_types: Sequence[str] = ("human",),
) -> List[Candidate]:
    """
    Neighbors of the seeds that share a type with a seed and hold in-table properties.

    A candidate must hold at least one in-table property, or all of them when
    a shared type is high-cardinality (e.g. human). Seeds are never returned.
    """
    if k_per_seed < 1:
        raise ValueError("k_per_seed must be >= 1")
    seeds = _seeds(main_column)
    seed_set = set(seeds)
    seed_types: Set[str] = set()
    for seed in seeds:
        seed_types |= kb.types_of(seed)

    neighbors: Set[str] = set()
    for seed in seeds:
        if seed not in idx:
            logger.debug("Seed %s has no embedding", seed)
            continue
        neighbors.update(n.entity for n in idx.nearest_neighbors(seed, k_per_seed))

    candidates = []
    for entity_id in sorted(neighbors - seed_set):
        if not kb.has_entity(entity_id):
            continue
        shared = kb.types_of(entity_id) & seed_types
        if not shared:
            continue
        if in_table_props:
            held = kb.properties_of(entity_id) & in_table_props
            if any(_is_high_cardinality(kb, t, high_cardinality_types) for t in shared):
                if held != in_table_props:
                    continue
            elif not held:
                continue
        candidates.append(Candidate(entity_id, CandidateSource.EMBEDDING))
    logger.info("Embedding candidates: %d from %d seeds", len(candidates), len(seeds))
    return candidates


def to_prompt(
    kb: KnowledgeBase,
    table: Table,
    main_column: Sequence[Optional[str]],
    column_links: Mapping[int, Optional[str]],
    i: int,
) -> str:
    """Render row `i` as "S has P1 V1 and has P2 V2"; the bare label when nothing is linked."""
    subject = main_column[i]
    if subject is None:
        raise LinkingError(f"Row {i} has no linked subject")
    parts = []
    for j in sorted(column_links):
        property_id = column_links[j]
        cell = table.cell(i, j).strip()
        if property_id is None or not cell:
            continue
        parts.append(f"{kb.property_label(property_id)} {cell}")
    label = kb.label(subject)
    if not parts:
        return label
    return f"{label} has " + " and has ".join(parts)


def parse_generated_subject(line: str) -> str:
    """Leading subject of an "S has P V" line, or the whole line."""
    subject = line.split(" has ", 1)[0].strip()
    return subject[:-1].strip() if subject.endswith(".") else subject


def generate_lm_candidates(
    kb: KnowledgeBase,
    generator: TextGenerator,
    table: Table,
    main_column: Sequence[Optional[str]],
    column_links: Mapping[int, Optional[str]],
    samples: int = 100,
    temperature: float = 0.7,
    max_sentences: int = 1,
) -> List[Candidate]:
    """
    Ask the generator to continue the table and link the subjects it writes.

    The prompt is the seed rows' sentences, one per line, in row order.
    """
    rows = [i for i, e in enumerate(main_column) if e is not None]
    if not rows:
        raise LinkingError("No linked seed rows to build a prompt from")
    prompt = "\n".join(to_prompt(kb, table, main_column, column_links, i) for i in rows) + "\n"
    request = GenerationRequest(prompt, samples=samples, temperature=temperature, max_sentences=max_sentences)

    seeds = set(main_column)
    scores: Dict[str, Optional[float]] = {}
    for generation in generator.generate(request):
        for line in generation.text.splitlines():
            subject = parse_generated_subject(line)
            if not subject:
                continue
            hits = kb.resolve_label(subject)
            if len(hits) != 1:
                continue
            entity_id = next(iter(hits))
            if entity_id in seeds:
                continue
            previous = scores.get(entity_id)
            if entity_id not in scores or (generation.score is not None and (previous is None or generation.score > previous)):
                scores[entity_id] = generation.score

    logger.info("LM candidates: %d", len(scores))
    return [Candidate(e, CandidateSource.LM, lm_score=scores[e]) for e in sorted(scores)]


def merge_candidates(*groups: Iterable[Candidate]) -> List[Candidate]:
    """Union by entity; an entity proposed by both generators becomes `both`."""
    merged: Dict[str, Candidate] = {}
    for group in groups:
        for candidate in group:
            existing = merged.get(candidate.entity)
            if existing is None:
                merged[candidate.entity] = Candidate(candidate.entity, candidate.source, candidate.lm_score)
                continue
            existing.source = existing.source.merge(candidate.source)
            if candidate.lm_score is not None:
                existing.lm_score = candidate.lm_score if existing.lm_score is None else max(existing.lm_score, candidate.lm_score)
    return [merged[e] for e in sorted(merged)]


# ----------------------------------------------------------------------
# Features
# ----------------------------------------------------------------------

class SeedProfile:
    """Seed-side aggregates shared by every candidate's feature extraction."""

    def __init__(
        self,
        kb: KnowledgeBase,
        idx: EmbeddingIndex,
        main_column: Sequence[Optional[str]],
        in_table_props: FrozenSet[str],
        k_per_seed: int = 1000,
        label_embedder: Optional[LabelEmbedder] = None,
        feature2_normalization: str = "seed",
    ):
        self.kb = kb
        self.idx = idx
        self.in_table_props = frozenset(in_table_props)
        self.seeds = _seeds(main_column)
        self.label_embedder = label_embedder
        self.feature2_normalization = feature2_normalization

        self.seed_props: Set[str] = set()
        self.seed_types: Set[str] = set()
        for seed in self.seeds:
            self.seed_props |= kb.properties_of(seed)
            self.seed_types |= kb.types_of(seed)

        self.embedded_seeds = [s for s in self.seeds if s in idx]
        self.neighbor_sets = {
            s: {n.entity for n in idx.nearest_neighbors(s, k_per_seed)} for s in self.embedded_seeds
        }
        self.seed_labels = {s: normalize_text(kb.label(s)) for s in self.seeds}
        self.seed_label_vectors = {s: label_embedding(kb.label(s), label_embedder) for s in self.seeds}


def extract_features(profile: SeedProfile, candidate: Candidate) -> FeatureVector:
    """Compute the eight ranking features of a candidate against the seeds."""
    kb, idx = profile.kb, profile.idx
    entity_id = candidate.entity
    n_seeds = len(profile.seeds)

    if entity_id in idx and profile.embedded_seeds:
        f1 = min(idx.distance(seed, entity_id) for seed in profile.embedded_seeds)
    else:
        f1 = math.inf

    extra = kb.properties_of(entity_id) - profile.in_table_props
    if profile.feature2_normalization == "candidate":
        denominator = max(1, len(extra))
    else:
        denominator = max(1, len(profile.seed_props - profile.in_table_props))
    f2 = min(1.0, len(extra & profile.seed_props) / denominator)

    label = normalize_text(kb.label(entity_id))
    f3 = min((normalized_levenshtein(label, s) for s in profile.seed_labels.values()), default=1.0)

    vector = label_embedding(kb.label(entity_id), profile.label_embedder)
    f4 = min((1.0 - cosine(vector, v) for v in profile.seed_label_vectors.values()), default=1.0)
    f4 = min(max(f4, 0.0), 2.0)

    f5 = len(kb.types_of(entity_id) & profile.seed_types) / max(1, len(profile.seed_types))

    hits = sum(1 for s in profile.embedded_seeds if entity_id in profile.neighbor_sets[s])
    f6 = hits / n_seeds if n_seeds else 0.0

    lm_score = None if candidate.source == CandidateSource.EMBEDDING else candidate.lm_score
    return FeatureVector(f1, f2, f3, f4, f5, f6, candidate.source, lm_score)


# ----------------------------------------------------------------------
# Ranking
# ----------------------------------------------------------------------

def detector_k(n_samples: int) -> int:
    """max(5, ceil(0.03 N)), capped at N - 1."""
    return max(1, min(max(5, math.ceil(0.03 * n_samples)), n_samples - 1))


class KnnDistanceDetector:
    """Outlier score = distance to the k-th nearest other sample."""

    name = "knn"

    def score(self, X: np.ndarray) -> np.ndarray:
        k = detector_k(len(X))
        model = NearestNeighbors(n_neighbors=k).fit(X)
        distances, _ = model.kneighbors()
        return distances[:, -1]


class LofDetector:
    """Outlier score = local outlier factor."""

    name = "lof"

    def score(self, X: np.ndarray) -> np.ndarray:
        model = LocalOutlierFactor(n_neighbors=detector_k(len(X)))
        model.fit(X)
        return -model.negative_outlier_factor_


DETECTORS = {"knn": KnnDistanceDetector, "lof": LofDetector}


def build_detector(name: str):
    try:
        return DETECTORS[name]()
    except KeyError:
        raise ValueError(f"Unknown detector {name!r}; expected one of {sorted(DETECTORS)}")


def feature_matrix(features: Sequence[FeatureVector]) -> np.ndarray:
    """Encoded rows with infinite f1 replaced by the column's largest finite value, min-max scaled."""
    X = np.asarray([f.to_row() for f in features], dtype=np.float64)
    f1 = X[:, 0]
    finite = np.isfinite(f1)
    X[~finite, 0] = f1[finite].max() if finite.any() else 0.0
    return MinMaxScaler().fit_transform(X)


def normalize_scores(raw: np.ndarray, contamination: float = 0.05) -> np.ndarray:
    """Logistic squashing centered at the (1 - contamination) quantile; constant input maps to 1."""
    if len(raw) <= 1:
        return np.ones(len(raw))
    scale = float(np.std(raw))
    if scale == 0.0:
        return np.ones(len(raw))
    center = float(np.quantile(raw, 1.0 - contamination))
    return expit((raw - center) / scale)


def rank_candidates(candidates: Sequence[Candidate], detector: str = "knn", contamination: float = 0.05) -> List[RankedSuggestion]:
    """
    Rank featurized candidates by outlier score, highest first, ties by entity id.

    Args:
        candidates: Candidates with extracted features
        detector: `knn` or `lof`
        contamination: Expected share of outliers, used only to normalize scores

    Returns:
        Ranked suggestions with scores in [0, 1]
    """
    if not candidates:
        raise ValueError("rank_candidates needs at least one candidate")
    if any(c.features is None for c in candidates):
        raise ValueError("Every candidate needs extracted features")

    ordered = sorted(candidates, key=lambda c: c.entity)
    if len(ordered) == 1:
        only = ordered[0]
        return [RankedSuggestion(only.entity, 1.0, only.source)]

    X = feature_matrix([c.features for c in ordered])
    raw = np.nan_to_num(build_detector(detector).score(X), nan=0.0, posinf=np.finfo(np.float64).max)
    normalized = normalize_scores(raw, contamination)

    order = sorted(range(len(ordered)), key=lambda i: (-raw[i], ordered[i].entity))
    return [RankedSuggestion(ordered[i].entity, float(normalized[i]), ordered[i].source) for i in order]


def suggest_subjects(
    kb: KnowledgeBase,
    idx: EmbeddingIndex,
    generator: TextGenerator,
    linked: LinkedTable,
    config: Optional[SuggestionConfig] = None,
    label_embedder: Optional[LabelEmbedder] = None,
) -> List[RankedSuggestion]:
    """
    Suggest new subject entities for a linked table.

    Returns:
        Ranked suggestions; empty when no seed is linked or no candidate is found
    """
    config = config or SuggestionConfig()
    if not linked.seeds:
        logger.warning("No linked seeds; nothing to suggest")
        return []

    in_table = linked.in_table_properties
    embedding_candidates = generate_embedding_candidates(
        kb, idx, linked.main_column, in_table, config.k_per_seed, config.high_cardinality_types,
    )
    lm_candidates = generate_lm_candidates(
        kb, generator, linked.table, linked.main_column, linked.column_links,
        samples=config.samples, temperature=config.temperature, max_sentences=config.max_sentences,
    )
    candidates = merge_candidates(embedding_candidates, lm_candidates)
    if not candidates:
        return []

    profile = SeedProfile(
        kb, idx, linked.main_column, in_table, config.k_per_seed, label_embedder, config.feature2_normalization,
    )
    for candidate in candidates:
        candidate.features = extract_features(profile, candidate)
    return rank_candidates(candidates, config.detector, config.contamination)
