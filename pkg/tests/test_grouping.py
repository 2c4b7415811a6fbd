import itertools
import math

import numpy as np
import pytest

from relconv import instrument
from relconv.convolution import GraphletFilters, enumerate_groups, rel_inner_product_bank, relconv_discrete
from relconv.gradcheck import check_gradients
from relconv.grouping import (
    GroupAttention,
    RelConvGroupAttention,
    SoftGroupRelConv,
    entropy_regularizer,
    entropy_scale,
    group_match_scores,
    relconv_group_attention_from,
    relconv_soft,
    soft_rel_inner_product,
)
from relconv.relation import MDIPR
from relconv.tensor import Tensor
from tests.test_tensor import sparsemax_oracle


def attention_oracle(x, q, keys, beta):
    n_g, s, _ = q.shape
    n = x.shape[0]
    alpha = np.zeros((n_g, s, n))
    retrieved = np.zeros((n_g, s, x.shape[1]))
    for g in range(n_g):
        for i in range(s):
            logits = np.array([beta * np.dot(q[g, i], keys[j]) for j in range(n)])
            e = np.exp(logits - logits.max())
            alpha[g, i] = e / e.sum()
            retrieved[g, i] = sum(alpha[g, i, j] * x[j] for j in range(n))
    return retrieved, alpha


@pytest.mark.parametrize("mode", ["positional", "feature", "positional+feature"])
def test_group_attention_matches_loop_oracle(rng, mode):
    att = GroupAttention(3, 2, 2, rng, d_key=4, key_mode=mode)
    x = rng.normal(size=(1, 4, 3))
    keys = att.compute_keys(Tensor(x)).data.reshape(-1, 4, 4)[-1]
    retrieved, alpha = att(x)
    want_r, want_a = attention_oracle(x[0], att.queries.data, keys, att.beta.data)
    np.testing.assert_allclose(alpha.data[0], want_a, atol=1e-12)
    np.testing.assert_allclose(retrieved.data[0], want_r, atol=1e-12)


def test_key_modes(rng):
    x = Tensor(rng.normal(size=(2, 5, 4)))
    pos = GroupAttention(4, 2, 2, rng, d_key=4, key_mode="positional")
    np.testing.assert_array_equal(pos.compute_keys(x).data, pos.compute_keys(Tensor(np.zeros((2, 5, 4)))).data)
    feat = GroupAttention(4, 2, 2, rng, d_key=4, key_mode="feature")
    feat.key_proj.weight.data[...] = np.eye(4)
    np.testing.assert_array_equal(feat.compute_keys(x).data, x.data)
    both = GroupAttention(4, 2, 2, rng, d_key=4, key_mode="positional+feature")
    summed = both.key_proj(x).data + both.pos_embedding.data[:5]
    np.testing.assert_allclose(both.compute_keys(x).data, summed)
    ctx = GroupAttention(4, 2, 2, rng, d_key=4, key_mode="contextual")
    assert ctx.compute_keys(x).shape == (2, 5, 4)


def test_positional_table_limit(rng):
    att = GroupAttention(2, 1, 2, rng, n_max=4)
    with pytest.raises(ValueError):
        att(np.zeros((1, 5, 2)))
    with pytest.raises(ValueError):
        GroupAttention(2, 1, 2, rng, key_mode="bogus")


def test_large_beta_saturates_to_argmax(rng):
    att = GroupAttention(3, 1, 2, rng, d_key=2)
    att.pos_embedding.data[:4] = [[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.2, 0.3]]
    att.queries.data[...] = [[[1.0, 0.0], [0.0, 1.0]]]
    att.beta.data[...] = 1000.0
    x = rng.normal(size=(1, 4, 3))
    retrieved, _ = att(x)
    np.testing.assert_allclose(retrieved.data[0, 0, 0], x[0, 1], atol=1e-6)
    np.testing.assert_allclose(retrieved.data[0, 0, 1], x[0, 2], atol=1e-6)


def test_identical_keys_give_the_mean(rng):
    att = GroupAttention(3, 2, 2, rng, d_key=2)
    att.pos_embedding.data[...] = 0.7
    x = rng.normal(size=(1, 4, 3))
    retrieved, alpha = att(x)
    np.testing.assert_allclose(retrieved.data[0], np.broadcast_to(x[0].mean(axis=0), (2, 2, 3)), atol=1e-12)
    np.testing.assert_allclose(alpha.data.sum(axis=-1), 1.0, atol=1e-12)


def test_input_dependent_queries(rng):
    att = GroupAttention(3, 2, 2, rng, input_queries=True)
    _, a1 = att(rng.normal(size=(1, 5, 3)))
    _, a2 = att(rng.normal(size=(1, 5, 3)))
    assert not np.allclose(a1.data, a2.data)


def test_hard_selection_reduces_to_discrete_relconv(rng):
    n, s, d = 6, 3, 4
    mdipr = MDIPR(d, 3, 2, rng)
    bank = GraphletFilters(s, 3, 5, rng)
    x = rng.normal(size=(n, d))
    group = (4, 0, 2)
    retrieved = np.stack([x[list(group)]])[None]  # exact one-hot retrieval, (1, 1, s, d)
    got = relconv_group_attention_from(Tensor(retrieved), mdipr, bank).data[0, 0]
    want = relconv_discrete(mdipr(x), bank, [group]).data[0]
    np.testing.assert_allclose(got, want, atol=1e-12)


def test_relconv_group_attention_output_shape(rng):
    att = GroupAttention(5, 8, 3, rng)
    layer = RelConvGroupAttention(att, MDIPR(5, 4, 2, rng), GraphletFilters(3, 4, 16, rng))
    out, alpha = layer(rng.normal(size=(2, 9, 5)))
    assert out.shape == (2, 8, 16) and alpha.shape == (2, 8, 3, 9)


def test_relconv_group_attention_composition_oracle(rng):
    att = GroupAttention(3, 2, 2, rng, d_key=3)
    mdipr = MDIPR(3, 2, 2, rng)
    bank = GraphletFilters(2, 2, 3, rng)
    x = rng.normal(size=(1, 4, 3))
    out, _ = RelConvGroupAttention(att, mdipr, bank)(x)
    retrieved, _ = att(x)
    for g in range(2):
        r = mdipr(retrieved.data[0, g]).data
        np.testing.assert_allclose(out.data[0, g], rel_inner_product_bank(r, bank).data, atol=1e-12)


def test_entropy_regularizer_values():
    assert entropy_regularizer(np.full((8, 3, 9), 1 / 9)).item() == pytest.approx(math.log(9), abs=1e-12)
    assert entropy_regularizer(np.eye(9)[:3][None]).item() == 0.0
    two = np.array([[0.5, 0.5], [1.0, 0.0]])
    assert entropy_regularizer(two).item() == pytest.approx(math.log(2) / 2, abs=1e-12)


def test_entropy_scale():
    assert entropy_scale(2, 9) == pytest.approx(0.31546487678572877, abs=1e-12)
    assert entropy_scale(5, 5) == 1.0
    assert entropy_scale(2, 16) < entropy_scale(2, 9)


def test_entropy_gradient_matches_finite_differences(rng):
    att = GroupAttention(3, 2, 3, rng, d_key=2)
    x = rng.normal(size=(2, 5, 3))
    res = check_gradients(lambda *_: entropy_regularizer(att(x)[1]), att.parameters())
    assert res.max_rel_error < 1e-6


def match_scores_oracle(G, groups):
    sp = np.log1p(np.exp(G))
    raw = np.array([[np.prod([sp[i, k] for i in g]) for k in range(G.shape[1])] for g in groups])
    return np.stack([sparsemax_oracle(np.log(raw[:, k])) for k in range(G.shape[1])], axis=1)


def test_group_match_scores_oracle(rng):
    G = rng.normal(size=(4, 2))
    groups = enumerate_groups(4, 2)
    alpha = group_match_scores(G, groups).data
    np.testing.assert_allclose(alpha, match_scores_oracle(G, groups), atol=1e-12)
    np.testing.assert_allclose(alpha.sum(axis=0), 1.0, atol=1e-12)
    assert np.all(alpha >= 0)


def test_group_match_scores_edge_cases():
    assert group_match_scores(np.zeros((3, 1)), [(0, 1)]).data.tolist() == [[1.0]]
    G = np.full((5, 1), -30.0)
    G[[1, 3], 0] = 30.0
    groups = enumerate_groups(5, 2)
    alpha = group_match_scores(G, groups).data[:, 0]
    assert alpha[groups.index((1, 3))] == 1.0 and alpha.sum() == 1.0
    with pytest.raises(ValueError):
        group_match_scores(G, [])


def test_soft_rel_inner_product_cases(rng):
    r = rng.normal(size=(4, 4, 2))
    bank = GraphletFilters(2, 2, 3, rng)
    groups = enumerate_groups(4, 2)
    vals = relconv_discrete(r, bank, groups).data
    onehot = np.eye(len(groups))[2]
    np.testing.assert_allclose(soft_rel_inner_product(r, bank, onehot, groups).data, vals[2], atol=1e-12)
    mid = np.zeros(len(groups))
    mid[[0, 5]] = 0.5
    np.testing.assert_allclose(soft_rel_inner_product(r, bank, mid, groups).data, (vals[0] + vals[5]) / 2, atol=1e-12)
    alpha = rng.dirichlet(np.ones(len(groups)))
    np.testing.assert_allclose(soft_rel_inner_product(r, bank, alpha, groups).data, alpha @ vals, atol=1e-12)


def test_relconv_soft_shape_and_reduction(rng):
    groups = enumerate_groups(6, 3)
    bank = GraphletFilters(3, 2, 4, rng)
    r = rng.normal(size=(6, 6, 2))
    assert relconv_soft(r, bank, rng.normal(size=(6, 3)), groups).shape == (3, 4)
    G = np.full((6, 2), -40.0)
    G[[0, 1, 2], 0] = 40.0
    G[[2, 4, 5], 1] = 40.0
    out = relconv_soft(r, bank, G, groups).data
    dense = relconv_discrete(r, bank, groups).data
    np.testing.assert_allclose(out, dense[[groups.index((0, 1, 2)), groups.index((2, 4, 5))]], atol=1e-12)


def test_soft_groups_layer_counts_fewer_pairs(rng):
    n = 8
    mdipr = MDIPR(3, 2, 2, rng)
    layer = SoftGroupRelConv(n, 2, mdipr, GraphletFilters(2, 2, 3, rng), rng)
    layer.group_matrix.data[...] = -40.0
    layer.group_matrix.data[[0, 1], 0] = 40.0
    layer.group_matrix.data[[5, 6], 1] = 40.0
    x = rng.normal(size=(1, n, 3))
    with instrument.counting() as counts:
        out, alpha = layer(x)
    assert counts["relation_pairs"] == 8 < n * n
    dense = relconv_soft(mdipr(x), layer.bank, layer.group_matrix, layer.groups).data
    np.testing.assert_allclose(out.data, dense, atol=1e-12)


def test_soft_groups_gradient_away_from_boundaries(rng):
    layer = SoftGroupRelConv(5, 2, MDIPR(3, 2, 2, rng), GraphletFilters(3, 2, 3, rng), rng)
    x = rng.normal(size=(2, 5, 3))
    w = rng.normal(size=(2, 2, 3))
    res = check_gradients(lambda *_: (layer(x)[0] * w).sum(), layer.parameters(), skip_kinks=True)
    assert res.max_rel_error < 1e-6


@pytest.mark.parametrize("n", [8, 16, 32, 64])
def test_score_work_is_linear_in_n(rng, n):
    att = GroupAttention(4, 8, 3, rng, d_key=8, n_max=64)
    with instrument.counting() as counts:
        att(np.zeros((1, n, 4)))
    assert counts["score_macs"] == n * 8 * 3 * 8
