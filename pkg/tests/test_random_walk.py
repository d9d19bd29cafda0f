"""
Tests for affinity scoring, walk normalization/iteration and subgraph selection
"""

from itertools import combinations

import numpy as np
import pytest

from src.analyzers.random_walk import (
    BilinearScorer,
    average_affinity,
    graph_walk_matrix,
    iterate_walk,
    make_scorer,
    normalize_affinities,
    pairwise_affinities,
    score_affinity,
    select_best_graph,
    walk_step,
)
from src.core.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    EmptyInputError,
    NumericalError,
)
from src.models import AffinityMatrix, ScorerConfig, WalkState
from src.processors.graph_builder import build_graph, induced_subgraph, sweep_candidates

from helpers import make_group, make_person, random_group


def W_of(rows):
    W = np.asarray(rows, dtype=np.float64)
    return AffinityMatrix(raw=W, normalized=W)


def oracle_average_affinity(cand_feats, gal_feats, steps):
    """直接按定义计算：联合图、逐行 softmax、y0、t 步游走、候选节点均值"""
    feats = np.vstack([cand_feats, gal_feats])
    n, k = len(feats), len(cand_feats)
    S = (feats @ feats.T + 1.0) / 2.0
    W = np.zeros((n, n))
    for i in range(n):
        denom = sum(np.exp(S[i, m]) for m in range(n) if m != i)
        for j in range(n):
            if j != i:
                W[i, j] = np.exp(S[i, j]) / denom
    cross = S[:k, k:]
    y = np.concatenate([cross.mean(axis=1), cross.max(axis=0)])
    for _ in range(steps):
        y = W @ y
    return float(y[:k].mean())


class TestScoreAffinity:

    def test_cosine_examples(self, scorer):
        a = make_person('a', [1, 0], 1)
        assert score_affinity(a, make_person('b', [1, 0], 2), scorer) == pytest.approx(1.0)
        assert score_affinity(a, make_person('c', [0, 1], 2), scorer) == pytest.approx(0.5)
        assert score_affinity(a, make_person('d', [-1, 0], 2), scorer) == pytest.approx(0.0)

    def test_symmetric(self, rng, scorer):
        a = make_person('a', rng.standard_normal(8), 1)
        b = make_person('b', rng.standard_normal(8), 2)
        assert score_affinity(a, b, scorer) == score_affinity(b, a, scorer)

    def test_dimension_mismatch(self, scorer):
        with pytest.raises(DimensionMismatchError):
            score_affinity(make_person('a', [1, 0], 1), make_person('b', [1, 0, 0], 1), scorer)

    def test_bilinear_identity_is_sigmoid_of_inner_product(self):
        scorer = make_scorer(ScorerConfig(kind='bilinear'), feature_dim=3)
        a = make_person('a', [1, 0, 0], 1)
        b = make_person('b', [1, 1, 0], 1)
        expected = 1.0 / (1.0 + np.exp(-np.dot(a.feature, b.feature)))
        assert score_affinity(a, b, scorer) == pytest.approx(expected, abs=1e-15)

    def test_bilinear_is_symmetric_for_any_matrix(self, rng):
        scorer = BilinearScorer(rng.standard_normal((4, 4)))
        a = make_person('a', rng.standard_normal(4), 1)
        b = make_person('b', rng.standard_normal(4), 1)
        assert score_affinity(a, b, scorer) == pytest.approx(score_affinity(b, a, scorer), abs=1e-15)
        assert 0.0 <= score_affinity(a, b, scorer) <= 1.0

    def test_unknown_scorer(self):
        with pytest.raises(ConfigurationError):
            make_scorer(ScorerConfig(kind='siamese'))

    def test_pairwise_matches_single(self, rng, scorer):
        people = [make_person(f"p{k}", rng.standard_normal(5), k) for k in range(4)]
        S = pairwise_affinities(people, people, scorer)
        for i in range(4):
            for j in range(4):
                assert S[i, j] == pytest.approx(score_affinity(people[i], people[j], scorer), abs=1e-15)


class TestNormalizeAffinities:

    def test_two_nodes(self):
        W = normalize_affinities(np.array([[5.0, -3.0], [0.7, 2.0]]))
        assert np.array_equal(W.normalized, [[0.0, 1.0], [1.0, 0.0]])

    def test_equal_off_diagonal(self):
        W = normalize_affinities(np.full((3, 3), 0.3)).normalized
        off = W[~np.eye(3, dtype=bool)]
        assert np.allclose(off, 0.5, atol=1e-15)

    def test_hand_evaluated_row(self):
        S = np.zeros((3, 3))
        S[0, 1] = np.log(2.0)
        W = normalize_affinities(S).normalized
        assert W[0, 1] == pytest.approx(2 / 3, abs=1e-15)
        assert W[0, 2] == pytest.approx(1 / 3, abs=1e-15)

    def test_non_finite_rejected(self):
        S = np.zeros((3, 3))
        S[1, 2] = np.nan
        with pytest.raises(NumericalError):
            normalize_affinities(S)

    def test_needs_two_nodes(self):
        with pytest.raises(DimensionMismatchError):
            normalize_affinities(np.zeros((1, 1)))

    def test_large_values_do_not_overflow(self):
        S = np.array([[0.0, 1000.0, 999.0], [1000.0, 0.0, 0.0], [5.0, 5.0, 0.0]])
        W = normalize_affinities(S).normalized
        assert np.all(np.isfinite(W))
        assert W[0, 1] == pytest.approx(1 / (1 + np.exp(-1.0)), abs=1e-12)

    def test_invariants_on_random_matrices(self, rng):
        for _ in range(1000):
            n = int(rng.integers(2, 17))
            S = rng.uniform(-5.0, 5.0, size=(n, n))
            W = normalize_affinities(S).normalized
            assert np.all(np.diag(W) == 0.0)
            assert np.all(np.abs(W.sum(axis=1) - 1.0) <= 1e-9)
            assert np.all((W >= 0.0) & (W <= 1.0))

            shift = S + rng.uniform(-3.0, 3.0, size=(n, 1))
            assert np.max(np.abs(normalize_affinities(shift).normalized - W)) <= 1e-9


class TestWalk:

    def test_permutation_step(self):
        y = walk_step(W_of([[0, 1], [1, 0]]), WalkState(scores=np.array([0.2, 0.8])))
        assert np.allclose(y.scores, [0.8, 0.2])
        assert y.iteration == 1

    def test_zero_vector(self):
        y = walk_step(W_of([[0, 1], [1, 0]]), WalkState(scores=np.zeros(2)))
        assert not y.scores.any()

    def test_uniform_three(self):
        W = normalize_affinities(np.zeros((3, 3)))
        y = walk_step(W, WalkState(scores=np.array([1.0, 0.0, 0.0])))
        assert np.allclose(y.scores, [0.0, 0.5, 0.5], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            walk_step(W_of([[0, 1], [1, 0]]), WalkState(scores=np.zeros(3)))

    def test_iterate_examples(self):
        W = W_of([[0, 1], [1, 0]])
        y0 = WalkState(scores=np.array([0.2, 0.8]))
        assert np.array_equal(iterate_walk(W, y0, 1).scores, walk_step(W, y0).scores)
        y2 = iterate_walk(W, y0, 2)
        assert np.allclose(y2.scores, [0.2, 0.8])
        assert y2.iteration == 2

    def test_steps_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            iterate_walk(W_of([[0, 1], [1, 0]]), WalkState(scores=np.zeros(2)), 0)

    def test_matches_repeated_products(self, rng):
        for _ in range(500):
            n = int(rng.integers(2, 9))
            W = normalize_affinities(rng.uniform(0, 1, size=(n, n)))
            y0 = rng.standard_normal(n)
            steps = int(rng.integers(1, 6))
            expected = y0.copy()
            for _ in range(steps):
                expected = W.normalized @ expected
            got = iterate_walk(W, WalkState(scores=y0), steps).scores
            assert np.max(np.abs(got - expected)) <= 1e-12

    def test_linearity_convexity_and_composition(self, rng):
        for _ in range(100):
            n = int(rng.integers(2, 8))
            W = normalize_affinities(rng.uniform(0, 1, size=(n, n)))
            y, z = rng.standard_normal(n), rng.standard_normal(n)
            a, b = rng.standard_normal(2)
            lhs = walk_step(W, WalkState(scores=a * y + b * z)).scores
            rhs = a * walk_step(W, WalkState(scores=y)).scores + b * walk_step(W, WalkState(scores=z)).scores
            assert np.max(np.abs(lhs - rhs)) <= 1e-12

            stepped = walk_step(W, WalkState(scores=y)).scores
            assert np.all(stepped >= y.min() - 1e-12) and np.all(stepped <= y.max() + 1e-12)

            joint = iterate_walk(W, WalkState(scores=y), 5).scores
            split = iterate_walk(W, iterate_walk(W, WalkState(scores=y), 2), 3).scores
            assert np.max(np.abs(joint - split)) <= 1e-12


class TestAverageAffinity:

    def test_matches_oracle(self, rng, scorer):
        for steps in (1, 2, 3):
            cand = build_graph(random_group(rng, 'g', 'A', 3, 6), n_max=4)
            gal = build_graph(random_group(rng, 'g', 'B', 4, 6), n_max=4)
            expected = oracle_average_affinity(cand.real_features(), gal.real_features(), steps)
            assert average_affinity(cand, gal, scorer, steps) == pytest.approx(expected, abs=1e-12)

    def test_single_nodes_keep_initial_score(self, scorer):
        a = make_person('a', [1, 0], 1)
        b = make_person('b', [0.6, 0.8], 1)
        cand = build_graph(make_group('g', 'A', [a]), n_max=1)
        gal = build_graph(make_group('g', 'B', [b]), n_max=1)
        assert average_affinity(cand, gal, scorer) == pytest.approx(score_affinity(a, b, scorer), abs=1e-15)

    def test_identical_candidate_beats_half_overlap(self, scorer):
        eye = np.eye(9)
        gallery_people = [make_person(f"m{k}", eye[k], k + 1) for k in range(6)]
        gallery = build_graph(make_group('g', 'B', gallery_people), n_max=6)
        identical = build_graph(make_group('g', 'A', [
            make_person(f"m{k}", eye[k], 6 - k) for k in range(6)
        ]), n_max=6)
        half = build_graph(make_group('g', 'A', [
            make_person(f"m{k}", eye[k], k + 1) for k in range(3)
        ] + [
            make_person(f"x{k}", eye[6 + k], k + 4) for k in range(3)
        ]), n_max=6)
        assert average_affinity(identical, gallery, scorer) > average_affinity(half, gallery, scorer)

    def test_all_identical_features_tie(self, scorer):
        people = [make_person(f"p{k}", [1, 1], k) for k in range(4)]
        probe = build_graph(make_group('g', 'A', people), n_max=4)
        gallery = build_graph(make_group('g', 'B', people[:3]), n_max=3)
        scores = [average_affinity(induced_subgraph(probe, idx), gallery, scorer)
                  for idx in ([0, 1], [1, 2, 3], [0, 1, 2, 3])]
        assert max(scores) - min(scores) <= 1e-12

    def test_layout_invariance(self, rng, scorer):
        group = random_group(rng, 'g', 'A', 4, 5)
        gal = build_graph(random_group(rng, 'g', 'B', 3, 5), n_max=4)
        shuffled = type(group)(group_id='g', camera_id='A',
                               members=tuple(group.members[i] for i in rng.permutation(4)))
        a = average_affinity(build_graph(group, n_max=4), gal, scorer)
        b = average_affinity(build_graph(shuffled, n_max=4), gal, scorer)
        assert a == b

    def test_empty_candidate(self, scorer):
        gal = build_graph(make_group('g', 'B', [make_person('a', [1, 0], 1)]), n_max=2)
        empty = induced_subgraph(gal, [])
        with pytest.raises(EmptyInputError):
            average_affinity(empty, gal, scorer)


class TestSelectBestGraph:

    def test_single_candidate(self, rng, scorer):
        cand = build_graph(random_group(rng, 'g', 'A', 3, 4), n_max=3)
        gal = build_graph(random_group(rng, 'g', 'B', 3, 4), n_max=3)
        best, score = select_best_graph([cand], gal, scorer)
        assert best is cand
        assert score == pytest.approx(average_affinity(cand, gal, scorer), abs=1e-12)

    def test_empty_candidates(self, rng, scorer):
        gal = build_graph(random_group(rng, 'g', 'B', 3, 4), n_max=3)
        with pytest.raises(EmptyInputError):
            select_best_graph([], gal, scorer)

    def test_duplicate_node_sets_evaluated_once(self, rng, scorer):
        probe = build_graph(random_group(rng, 'g', 'A', 3, 4), n_max=3)
        gal = build_graph(random_group(rng, 'g', 'B', 3, 4), n_max=3)
        first = induced_subgraph(probe, [0, 1])
        again = induced_subgraph(probe, [1, 0])
        best, _ = select_best_graph([first, again], gal, scorer)
        assert best is first

    def test_planted_subgroup(self, scorer):
        eye = np.eye(5)
        planted = [make_person(f"m{k}", eye[k], k + 1) for k in range(3)]
        distractors = [make_person(f"x{k}", eye[3 + k], k + 4) for k in range(2)]
        probe = build_graph(make_group('g', 'A', planted + distractors), n_max=5)
        gallery = build_graph(make_group('g', 'B', [
            make_person(f"m{k}", eye[k], 3 - k) for k in range(3)
        ]), n_max=5)

        exhaustive = [induced_subgraph(probe, idx)
                      for size in range(2, 6) for idx in combinations(range(5), size)]
        best, _ = select_best_graph(exhaustive, gallery, scorer)
        assert best.node_set == frozenset({'m0', 'm1', 'm2'})

        swept, _ = select_best_graph(sweep_candidates(probe, graph_walk_matrix(probe, scorer)), gallery, scorer)
        assert swept.node_set == frozenset({'m0', 'm1', 'm2'})

    def test_agrees_with_exhaustive_enumeration(self, scorer):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n = int(rng.integers(2, 9))
            m = int(rng.integers(1, 7))
            dim = int(rng.integers(2, 7))
            probe = build_graph(random_group(rng, 'g', 'A', n, dim), n_max=n)
            gallery = build_graph(random_group(rng, 'g', 'B', m, dim), n_max=m)
            steps = int(rng.integers(1, 3))

            subsets = [idx for size in range(2, n + 1) for idx in combinations(range(n), size)]
            feats = probe.real_features()
            oracle = [oracle_average_affinity(feats[list(idx)], gallery.real_features(), steps)
                      for idx in subsets]
            top = max(oracle)
            expected = next(i for i, v in enumerate(oracle) if v == top)

            best, score = select_best_graph([induced_subgraph(probe, idx) for idx in subsets],
                                            gallery, scorer, steps)
            chosen = subsets.index(tuple(sorted(
                [d.person_id for d in probe.descriptors].index(d.person_id) for d in best.descriptors
            )))
            assert score == pytest.approx(top, abs=1e-12)
            if chosen != expected:
                # 只允许数值上的并列
                assert abs(oracle[chosen] - top) <= 1e-12
