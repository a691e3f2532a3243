import json
import math

import numpy as np
import pytest

from evalharness.metrics.compute import recall_at_n
from src.clients import MockTextGenerator
from src.config import SuggestionConfig
from src.errors import LinkingError
from src.interpret import Table, link_table
from src.suggest import (
    Candidate,
    CandidateSource,
    FeatureVector,
    KnnDistanceDetector,
    SeedProfile,
    detector_k,
    extract_features,
    feature_matrix,
    generate_embedding_candidates,
    generate_lm_candidates,
    merge_candidates,
    normalize_scores,
    parse_generated_subject,
    rank_candidates,
    suggest_subjects,
    to_prompt,
)

RAPPERS = {"Q130798", "Q33240", "Q6096", "Q173637", "Q194220"}
SEEDS = {"Q15935", "Q62766", "Q5608"}


@pytest.fixture
def rappers(micro_kb, micro_idx, micro_table):
    return link_table(micro_kb, micro_idx, micro_table("t01_rappers_pseudonym", 3))


@pytest.fixture
def generator(micro_dir):
    return MockTextGenerator.from_file(micro_dir / "generations.json")


# ----------------------------------------------------------------------
# Prompts
# ----------------------------------------------------------------------

def test_row_prompt(micro_kb, rappers):
    prompt = to_prompt(micro_kb, rappers.table, rappers.main_column, rappers.column_links, 0)
    assert prompt == "Kanye West has pseudonym Yeezy and has date of birth 1977"


def test_row_prompt_without_linked_columns_is_the_label(micro_kb, rappers):
    assert to_prompt(micro_kb, rappers.table, rappers.main_column, {1: None, 2: None}, 1) == "Jay-Z"


def test_row_prompt_needs_a_linked_subject(micro_kb, rappers):
    with pytest.raises(LinkingError):
        to_prompt(micro_kb, rappers.table, [None, None, None], rappers.column_links, 0)


@pytest.mark.parametrize("line,subject", [
    ("Drake has pseudonym Drizzy", "Drake"),
    ("Kendrick Lamar.", "Kendrick Lamar"),
    ("  Nas  ", "Nas"),
])
def test_parse_generated_subject(line, subject):
    assert parse_generated_subject(line) == subject


# ----------------------------------------------------------------------
# Candidate generation
# ----------------------------------------------------------------------

def test_embedding_candidates_respect_types_and_in_table_properties(micro_kb, micro_idx, rappers):
    candidates = generate_embedding_candidates(
        micro_kb, micro_idx, rappers.main_column, rappers.in_table_properties, k_per_seed=50,
    )
    # humans must hold every in-table property: the rappers and the one athlete with a pseudonym
    assert {c.entity for c in candidates} == RAPPERS | {"Q169452"}
    assert all(c.source == CandidateSource.EMBEDDING for c in candidates)


def test_embedding_candidates_without_high_cardinality_need_one_property(micro_kb, micro_idx, rappers):
    candidates = generate_embedding_candidates(
        micro_kb, micro_idx, rappers.main_column, rappers.in_table_properties,
        k_per_seed=50, high_cardinality_types=(),
    )
    entities = {c.entity for c in candidates}
    assert RAPPERS <= entities
    assert "Q36159" in entities
    assert not entities & SEEDS


def test_lm_candidates_link_generated_subjects(micro_kb, generator, rappers):
    candidates = generate_lm_candidates(
        micro_kb, generator, rappers.table, rappers.main_column, rappers.column_links, samples=5,
    )
    # Tupac is not in the KB and Kanye West is a seed
    assert [(c.entity, c.lm_score) for c in candidates] == [("Q130798", -0.42), ("Q33240", -0.57)]
    assert generator.calls == 1


def test_lm_candidates_need_a_linked_row(micro_kb, generator, rappers):
    with pytest.raises(LinkingError):
        generate_lm_candidates(micro_kb, generator, rappers.table, [None, None, None], rappers.column_links)


def test_merge_marks_shared_candidates_as_both():
    merged = merge_candidates(
        [Candidate("a", CandidateSource.EMBEDDING), Candidate("b", CandidateSource.EMBEDDING)],
        [Candidate("b", CandidateSource.LM, -1.0), Candidate("c", CandidateSource.LM, None)],
    )
    assert [(c.entity, c.source, c.lm_score) for c in merged] == [
        ("a", CandidateSource.EMBEDDING, None),
        ("b", CandidateSource.BOTH, -1.0),
        ("c", CandidateSource.LM, None),
    ]


# ----------------------------------------------------------------------
# Features and ranking
# ----------------------------------------------------------------------

def test_extract_features_for_an_embedded_rapper(micro_kb, micro_idx, rappers):
    profile = SeedProfile(micro_kb, micro_idx, rappers.main_column, rappers.in_table_properties, k_per_seed=50)
    embedded = extract_features(profile, Candidate("Q130798", CandidateSource.EMBEDDING, -0.4))

    assert 0.0 <= embedded.f1 < math.inf
    assert 0.0 <= embedded.f2 <= 1.0
    assert 0.0 <= embedded.f3 <= 1.0
    assert 0.0 <= embedded.f4 <= 2.0
    assert embedded.f5 == 1.0
    assert 0.0 <= embedded.f6 <= 1.0
    # embedding-only candidates never carry a generation score
    assert embedded.f8 is None

    generated = extract_features(profile, Candidate("Q130798", CandidateSource.LM, -0.4))
    assert generated.f8 == -0.4
    assert generated.f1 == embedded.f1


def test_feature_vector_validation():
    with pytest.raises(ValueError):
        FeatureVector(0.1, 1.5, 0.0, 0.0, 0.0, 0.0, CandidateSource.LM)
    with pytest.raises(ValueError):
        FeatureVector(0.1, 0.5, 0.0, 0.0, 0.0, 0.0, CandidateSource.EMBEDDING, -0.3)
    row = FeatureVector(math.inf, 0.5, 0.2, 0.3, 1.0, 0.0, CandidateSource.BOTH, -0.3).to_row()
    assert row[6:] == [0.0, 0.0, 1.0, -0.3, 1.0]


def test_feature_matrix_replaces_infinite_distances():
    features = [
        FeatureVector(f1, 0.5, 0.5, 0.5, 1.0, 0.0, CandidateSource.LM)
        for f1 in (0.2, 0.6, math.inf)
    ]
    X = feature_matrix(features)
    np.testing.assert_allclose(X[:, 0], [0.0, 1.0, 1.0])
    assert np.all((X >= 0.0) & (X <= 1.0))


@pytest.mark.parametrize("n,k", [(2, 1), (3, 2), (10, 5), (200, 6), (1000, 30)])
def test_detector_k(n, k):
    assert detector_k(n) == k


def test_normalize_scores():
    np.testing.assert_allclose(normalize_scores(np.array([2.0, 2.0, 2.0])), [1.0, 1.0, 1.0])
    scores = normalize_scores(np.array([0.1, 0.2, 0.3, 5.0]), contamination=0.05)
    assert np.all((scores > 0.0) & (scores < 1.0))
    assert np.argmax(scores) == 3


def planted(n_inliers=20, seed=0):
    rng = np.random.default_rng(seed)
    candidates = []
    for i in range(n_inliers):
        jitter = rng.uniform(-0.01, 0.01, size=6)
        features = FeatureVector(
            0.1 + jitter[0], 0.5 + jitter[1], 0.3 + jitter[2], 0.4 + jitter[3], 1.0 - abs(jitter[4]), 0.5 + jitter[5],
            CandidateSource.EMBEDDING,
        )
        candidates.append(Candidate(f"in{i:02d}", CandidateSource.EMBEDDING, features=features))
    outlier = FeatureVector(0.9, 0.0, 1.0, 1.5, 0.0, 0.0, CandidateSource.EMBEDDING)
    candidates.append(Candidate("out", CandidateSource.EMBEDDING, features=outlier))
    return candidates


@pytest.mark.parametrize("detector", ["knn", "lof"])
def test_planted_outlier_ranks_first(detector):
    ranked = rank_candidates(planted(), detector=detector)
    assert ranked[0].entity == "out"
    assert len(ranked) == 21
    assert all(0.0 <= s.score <= 1.0 for s in ranked)
    assert ranked[0].score == max(s.score for s in ranked)


def test_ranking_ignores_input_order():
    candidates = planted(seed=3)
    shuffled = list(candidates)
    np.random.default_rng(11).shuffle(shuffled)
    assert rank_candidates(candidates) == rank_candidates(shuffled)


def test_single_candidate_scores_one():
    only = Candidate("a", CandidateSource.LM, -0.2,
                     FeatureVector(0.1, 0.5, 0.3, 0.4, 1.0, 0.5, CandidateSource.LM, -0.2))
    ranked = rank_candidates([only])
    assert [(s.entity, s.score) for s in ranked] == [("a", 1.0)]


def planted_cluster(rng, n_inliers=50, n_outliers=3):
    """A tight inlier box and a few candidates displaced along every feature."""
    candidates = []
    for i in range(n_inliers):
        features = FeatureVector(
            rng.uniform(0.05, 0.25), rng.uniform(0.4, 0.6), rng.uniform(0.2, 0.4),
            rng.uniform(0.3, 0.5), rng.uniform(0.8, 1.0), rng.uniform(0.4, 0.6),
            CandidateSource.EMBEDDING,
        )
        candidates.append(Candidate(f"in{i:02d}", CandidateSource.EMBEDDING, features=features))
    for i in range(n_outliers):
        features = FeatureVector(
            rng.uniform(0.8, 1.0), rng.uniform(0.0, 0.1), rng.uniform(0.8, 1.0),
            rng.uniform(1.5, 2.0), rng.uniform(0.0, 0.2), rng.uniform(0.0, 0.1),
            CandidateSource.EMBEDDING,
        )
        candidates.append(Candidate(f"out{i}", CandidateSource.EMBEDDING, features=features))
    return candidates


def test_planted_outliers_reach_the_top_five():
    rng = np.random.default_rng(42)
    hits = 0
    for _ in range(200):
        top = {s.entity for s in rank_candidates(planted_cluster(rng), detector="knn")[:5]}
        hits += {"out0", "out1", "out2"} <= top
    assert hits >= 190


@pytest.mark.parametrize("detector", ["knn", "lof"])
def test_ranking_is_invariant_to_affine_feature_rescaling(detector):
    rng = np.random.default_rng(8)
    for _ in range(20):
        candidates = planted_cluster(rng, n_inliers=int(rng.integers(10, 40)))
        rescaled = []
        for c in candidates:
            f = c.features
            values = [0.5 * v + 0.25 for v in (f.f1, f.f2, f.f3, f.f4, f.f5, f.f6)]
            rescaled.append(Candidate(c.entity, c.source, features=FeatureVector(*values, f.f7)))

        original = rank_candidates(candidates, detector=detector)
        moved = rank_candidates(rescaled, detector=detector)
        assert [s.entity for s in moved] == [s.entity for s in original]
        np.testing.assert_allclose([s.score for s in moved], [s.score for s in original], atol=1e-9)


def test_knn_detector_scores_the_kth_neighbor_distance():
    rng = np.random.default_rng(9)
    X = rng.random((30, 4))
    k = detector_k(len(X))
    pairwise = np.linalg.norm(X[:, None, :] - X[None, :, :], axis=2)
    np.fill_diagonal(pairwise, np.inf)
    expected = np.sort(pairwise, axis=1)[:, k - 1]
    np.testing.assert_allclose(KnnDistanceDetector().score(X), expected, rtol=1e-7, atol=1e-9)



def test_rank_candidates_needs_features():
    with pytest.raises(ValueError):
        rank_candidates([Candidate("a", CandidateSource.LM)])
    with pytest.raises(ValueError):
        rank_candidates([])


# ----------------------------------------------------------------------
# End to end on the micro-benchmark
# ----------------------------------------------------------------------

def test_suggest_subjects_on_rappers(micro_kb, micro_idx, generator, rappers):
    config = SuggestionConfig(k_per_seed=50, samples=5)
    ranked = suggest_subjects(micro_kb, micro_idx, generator, rappers, config)

    by_entity = {s.entity: s for s in ranked}
    assert set(by_entity) == RAPPERS | {"Q169452"}
    assert by_entity["Q130798"].source == CandidateSource.BOTH
    assert by_entity["Q33240"].source == CandidateSource.BOTH
    assert by_entity["Q6096"].source == CandidateSource.EMBEDDING
    assert all(0.0 <= s.score <= 1.0 for s in ranked)
    assert ranked == suggest_subjects(micro_kb, micro_idx, generator, rappers, config)

    payload = ranked[0].to_dict(micro_kb)
    assert set(payload) == {"entity", "label", "score", "source"}


def test_suggest_subjects_without_seeds(micro_kb, micro_idx, generator, rappers):
    rappers.main_column = [None, None, None]
    assert suggest_subjects(micro_kb, micro_idx, generator, rappers) == []
    assert generator.calls == 0


def test_candidate_union_recalls_at_least_either_source(micro_kb, micro_idx, micro_dir, generator):
    for table_dir in sorted((micro_dir / "tables").iterdir()):
        truth = json.loads((table_dir / "truth.json").read_text(encoding="utf-8"))
        linked = link_table(micro_kb, micro_idx, Table.from_csv(table_dir / "table.csv").head(truth["seeds"]))
        if not linked.seeds:
            continue
        embedding = generate_embedding_candidates(
            micro_kb, micro_idx, linked.main_column, linked.in_table_properties, k_per_seed=50,
        )
        generated = generate_lm_candidates(
            micro_kb, generator, linked.table, linked.main_column, linked.column_links, samples=5,
        )
        merged = merge_candidates(embedding, generated)
        groups = [{c.entity for c in group} for group in (embedding, generated, merged)]
        subjects = set(truth["subjects"]) - set(linked.seeds)

        for n in (len(groups[2]), 1000):
            from_embedding, from_lm, combined = (recall_at_n(g, subjects, n) for g in groups)
            assert combined >= max(from_embedding, from_lm), table_dir.name
