"""
Tests for inter-graph attention matching: single-step operators, propagation, readout and similarity
"""

import numpy as np
import pytest
import torch
from torch import nn

from src.analyzers.group_matching import (
    MatchParams,
    aggregate_messages,
    attention_weights,
    cosine_similarity,
    group_similarity,
    importance_weight,
    match_scores,
    match_similarity,
    propagate,
    propagate_tensors,
    readout,
    readout_tensors,
    stack_graphs,
    update_node,
)
from src.core.exceptions import (
    ConfigurationError,
    DimensionMismatchError,
    EmptyInputError,
    NumericalError,
)
from src.models import GraphEmbedding
from src.processors.graph_builder import build_graph, induced_subgraph
from src.services.evaluator import baseline_similarity

from helpers import make_group, make_person, random_group


def np_mlp(params, x):
    w1 = params.update_mlp[0].weight.detach().numpy()
    b1 = params.update_mlp[0].bias.detach().numpy()
    w2 = params.update_mlp[2].weight.detach().numpy()
    b2 = params.update_mlp[2].bias.detach().numpy()
    return w2 @ np.maximum(w1 @ x + b1, 0.0) + b2


def np_softmax(v):
    z = np.exp(v - np.max(v))
    return z / z.sum()


def unrolled_propagate(params, hs, hr):
    """逐节点、逐部件展开的前向计算，hs/hr 为 (n, P, D_p) 的真实节点特征"""
    hs, hr = hs.copy(), hr.copy()
    for proj_t in params.projections:
        proj = proj_t.detach().numpy()
        e = np.zeros((len(hs), len(hr)))
        for i in range(len(hs)):
            for j in range(len(hr)):
                e[i, j] = sum(np.dot(proj @ hs[i, p], proj @ hr[j, p]) for p in range(hs.shape[1]))
        new_s, new_r = np.zeros_like(hs), np.zeros_like(hr)
        for i in range(len(hs)):
            a = np_softmax(e[i, :])
            for p in range(hs.shape[1]):
                o = sum(a[j] * (proj @ hr[j, p]) for j in range(len(hr)))
                new_s[i, p] = np_mlp(params, np.concatenate([hs[i, p], o]))
        for j in range(len(hr)):
            a = np_softmax(e[:, j])
            for p in range(hr.shape[1]):
                o = sum(a[i] * (proj @ hs[i, p]) for i in range(len(hs)))
                new_r[j, p] = np_mlp(params, np.concatenate([hr[j, p], o]))
        hs, hr = new_s, new_r
    return hs, hr


def zero_mlp(params):
    with torch.no_grad():
        for layer in params.update_mlp:
            if isinstance(layer, nn.Linear):
                layer.weight.zero_()
                layer.bias.zero_()


class TestSingleStepOperators:

    def test_importance_weight_examples(self):
        eye = np.eye(2)
        assert float(importance_weight([1.0, 0.0], [1.0, 0.0], eye)) == pytest.approx(1.0)
        assert float(importance_weight([1.0, 0.0], [0.0, 1.0], eye)) == pytest.approx(0.0)
        half = [0.5, np.sqrt(3) / 2]
        assert float(importance_weight([1.0, 0.0], half, 2 * eye)) == pytest.approx(2.0, abs=1e-12)

    def test_importance_weight_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            importance_weight([1.0, 0.0], [1.0, 0.0, 0.0], np.eye(2))

    def test_attention_examples(self):
        assert attention_weights([0.3]).tolist() == [1.0]
        assert np.allclose(attention_weights([2.0] * 4).numpy(), 0.25, atol=1e-15)
        assert np.allclose(attention_weights([0.0, np.log(3.0)]).numpy(), [0.25, 0.75], atol=1e-12)

    def test_attention_masks_dummies(self):
        a = attention_weights([0.0, 5.0, np.log(3.0)], mask=[True, False, True]).numpy()
        assert a[1] == 0.0
        assert a.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.allclose(a[[0, 2]], [0.25, 0.75], atol=1e-12)

    def test_attention_needs_a_node(self):
        with pytest.raises(EmptyInputError):
            attention_weights([1.0, 2.0], mask=[False, False])

    def test_aggregate_examples(self):
        eye = np.eye(3)
        h = np.array([[0.3, -0.2, 0.9]])
        assert np.allclose(aggregate_messages(h, [1.0], eye, part=0).numpy(), h[0])

        opposite = np.array([[1.0, 2.0, 3.0], [-1.0, -2.0, -3.0]])
        assert np.allclose(aggregate_messages(opposite, [0.5, 0.5], eye, part=0).numpy(), 0.0)

        basis = np.eye(3)
        o = aggregate_messages(basis, [0.2, 0.3, 0.5], eye, part=0).numpy()
        assert np.allclose(o, [0.2, 0.3, 0.5], atol=1e-15)

    def test_aggregate_parts_share_attention(self, rng):
        src = rng.standard_normal((3, 2, 4))
        attn = [0.1, 0.6, 0.3]
        proj = rng.standard_normal((4, 4))
        out = aggregate_messages(src, attn, proj).numpy()
        for q in range(2):
            expected = sum(attn[i] * (proj @ src[i, q]) for i in range(3))
            assert np.allclose(out[q], expected, atol=1e-12)

    def test_update_node_zero_mlp(self, small_params):
        zero_mlp(small_params)
        out = update_node([0.4, -1.0], [2.0, 3.0], small_params.update_mlp).detach().numpy()
        assert np.array_equal(out, [0.0, 0.0])

    def test_update_node_bias_only(self, small_params):
        zero_mlp(small_params)
        with torch.no_grad():
            small_params.update_mlp[2].bias.copy_(torch.tensor([0.7, -0.1], dtype=torch.float64))
        out = update_node([0.4, -1.0], [2.0, 3.0], small_params.update_mlp).detach().numpy()
        assert np.allclose(out, [0.7, -0.1])

    def test_update_node_matches_matrix_oracle(self, small_params, rng):
        h, o = rng.standard_normal(2), rng.standard_normal(2)
        out = update_node(h, o, small_params.update_mlp).detach().numpy()
        assert np.allclose(out, np_mlp(small_params, np.concatenate([h, o])), atol=1e-12)

    def test_update_node_dummy_stays_zero(self, small_params):
        out = update_node([0.0, 0.0], [1.0, 1.0], small_params.update_mlp, is_dummy=True)
        assert not out.any()


class TestPropagate:

    def test_rounds_must_be_positive(self):
        with pytest.raises(ConfigurationError):
            MatchParams(part_dim=2, part_count=2, rounds=0)

    def test_zero_mlp_zeroes_real_nodes(self, rng):
        params = MatchParams(part_dim=2, part_count=2, rounds=1, seed=1)
        zero_mlp(params)
        g = build_graph(random_group(rng, 'g', 'A', 3, 4, part_count=2), n_max=4)
        p_s, p_r = propagate(g, g, params)
        assert not p_s.part_tensor().any()
        assert not p_r.part_tensor().any()

    def test_identical_graphs_stay_identical(self, rng, small_params):
        g = build_graph(random_group(rng, 'g', 'A', 3, 4, part_count=2), n_max=5)
        p_s, p_r = propagate(g, g, small_params)
        assert np.allclose(p_s.part_tensor(), p_r.part_tensor(), rtol=0, atol=1e-14)

    def test_matches_unrolled_oracle(self, rng, small_params):
        g_s = build_graph(random_group(rng, 'g', 'A', 2, 4, part_count=2), n_max=3)
        g_r = build_graph(random_group(rng, 'h', 'B', 2, 4, part_count=2), n_max=3)
        p_s, p_r = propagate(g_s, g_r, small_params)
        hs, hr = unrolled_propagate(small_params, g_s.part_tensor()[:2], g_r.part_tensor()[:2])
        assert np.max(np.abs(p_s.part_tensor()[:2] - hs)) <= 1e-12
        assert np.max(np.abs(p_r.part_tensor()[:2] - hr)) <= 1e-12
        assert not p_s.part_tensor()[2:].any()

    def test_part_mismatch(self, rng, small_params):
        g = build_graph(random_group(rng, 'g', 'A', 2, 6, part_count=3), n_max=2)
        with pytest.raises(ConfigurationError):
            propagate(g, g, small_params)


class TestReadout:

    def test_single_node(self, rng, small_params):
        g = build_graph(random_group(rng, 'g', 'A', 1, 4, part_count=2), n_max=3)
        h = readout(g, small_params).vector
        expected = g.descriptors[0].feature @ small_params.readout_proj.detach().numpy()
        assert np.allclose(h, expected, atol=1e-14)

    def test_identical_nodes(self, small_params):
        people = [make_person(f"p{k}", [1, 2, 3, 4], k, part_count=2) for k in range(3)]
        g = build_graph(make_group('g', 'A', people), n_max=4)
        expected = people[0].feature @ small_params.readout_proj.detach().numpy()
        assert np.allclose(readout(g, small_params).vector, expected, atol=1e-14)

    def test_matches_softmax_oracle(self, rng, small_params):
        g = build_graph(random_group(rng, 'g', 'A', 3, 4, part_count=2), n_max=5)
        Wu = small_params.readout_proj.detach().numpy()
        values = g.real_features() @ Wu
        weights = np_softmax(values[:, 0])
        assert weights.sum() == pytest.approx(1.0, abs=1e-9)
        assert np.max(np.abs(readout(g, small_params).vector - weights @ values)) <= 1e-12

    def test_no_real_nodes(self, small_params):
        g = build_graph(make_group('g', 'A', [make_person('a', [1, 0, 0, 0], 1, part_count=2)]), n_max=2)
        with pytest.raises(EmptyInputError):
            readout(induced_subgraph(g, []), small_params)


class TestGroupSimilarity:

    def test_examples(self):
        a = GraphEmbedding(vector=np.array([1.0, 2.0, 0.0]))
        assert group_similarity(a, a) == pytest.approx(1.0)
        assert group_similarity(a, np.array([-2.0, 1.0, 5.0])) == pytest.approx(0.0, abs=1e-15)
        assert group_similarity(a, -a.vector) == pytest.approx(-1.0)

    def test_zero_vector(self):
        with pytest.raises(NumericalError):
            group_similarity(np.zeros(3), np.ones(3))

    def test_batched_equals_pairwise(self, rng, small_params):
        probes = [build_graph(random_group(rng, f"g{k}", 'A', int(rng.integers(1, 5)), 4, 2), n_max=4)
                  for k in range(4)]
        gallery = [build_graph(random_group(rng, f"g{k}", 'B', int(rng.integers(1, 4)), 4, 2), n_max=3)
                   for k in range(4)]
        batched = match_scores(probes, gallery, small_params)
        single = [match_similarity(p, g, small_params) for p, g in zip(probes, gallery)]
        assert np.max(np.abs(batched - np.array(single))) <= 1e-12

    def test_permutation_and_padding_invariance(self):
        rng = np.random.default_rng(99)
        for case in range(100):
            P, Dp = 2, int(rng.integers(1, 5))
            params = MatchParams(part_dim=Dp, part_count=P, rounds=int(rng.integers(1, 3)), seed=case)
            n_s, n_r = int(rng.integers(1, 5)), int(rng.integers(1, 5))
            xs = rng.standard_normal((n_s, P, Dp))
            xr = rng.standard_normal((n_r, P, Dp))

            def sim(a, b, pad_a, pad_b):
                ta = np.concatenate([a, np.zeros((pad_a, P, Dp))])[None]
                tb = np.concatenate([b, np.zeros((pad_b, P, Dp))])[None]
                ma = torch.tensor([[True] * len(a) + [False] * pad_a])
                mb = torch.tensor([[True] * len(b) + [False] * pad_b])
                with torch.no_grad():
                    return float(params(torch.from_numpy(ta), ma, torch.from_numpy(tb), mb)[0])

            base = sim(xs, xr, 0, 0)
            shuffled = sim(xs[rng.permutation(n_s)], xr[rng.permutation(n_r)],
                           int(rng.integers(0, 4)), int(rng.integers(0, 4)))
            assert abs(base - shuffled) < 1e-12


class TestBatchedTensors:

    def test_dummy_rows_stay_zero(self, rng, small_params):
        graphs = [build_graph(random_group(rng, 'g', 'A', 2, 4, 2), n_max=4),
                  build_graph(random_group(rng, 'h', 'A', 3, 4, 2), n_max=4)]
        xs, ms = stack_graphs(graphs)
        xr, mr = stack_graphs(list(reversed(graphs)))
        with torch.no_grad():
            ys, yr = propagate_tensors(small_params, xs, ms, xr, mr)
        assert not ys[~ms].any()
        assert not yr[~mr].any()
        sims = cosine_similarity(readout_tensors(small_params, ys, ms), readout_tensors(small_params, yr, mr))
        assert sims.shape == (2,)

    def test_stack_pads_to_largest(self, rng):
        a = build_graph(random_group(rng, 'g', 'A', 2, 4, 2), n_max=2)
        b = build_graph(random_group(rng, 'h', 'A', 3, 4, 2), n_max=5)
        x, m = stack_graphs([a, b])
        assert tuple(x.shape) == (2, 5, 2, 2)
        assert m.sum(dim=1).tolist() == [2, 3]


class TestPassthroughInit:

    def test_starts_at_mean_feature_cosine(self, rng):
        params = MatchParams(part_dim=2, part_count=2, rounds=2, init='passthrough')
        for _ in range(10):
            a = build_graph(random_group(rng, 'g', 'A', int(rng.integers(1, 5)), 4, 2), n_max=4)
            b = build_graph(random_group(rng, 'g', 'B', int(rng.integers(1, 5)), 4, 2), n_max=4)
            assert abs(match_similarity(a, b, params) - baseline_similarity(a, b)) < 1e-12

    def test_embed_dim_defaults_to_one_extra_column(self):
        params = MatchParams(part_dim=2, part_count=2, rounds=1, init='passthrough')
        assert params.embed_dim == 5
        assert params.describe()['init'] == 'passthrough'

    def test_embed_dim_too_small(self):
        with pytest.raises(ConfigurationError):
            MatchParams(part_dim=2, part_count=2, rounds=1, embed_dim=4, init='passthrough')

    def test_unknown_init(self):
        with pytest.raises(ConfigurationError):
            MatchParams(part_dim=2, part_count=2, rounds=1, init='zeros')
