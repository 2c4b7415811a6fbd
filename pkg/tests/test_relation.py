import numpy as np
import pytest

from relconv.gradcheck import grad_check
from relconv.relation import MDIPR, mdipr_param_count
from relconv.tensor import Tensor


def loop_oracle(x, w1, w2):
    n = x.shape[0]
    d_r = w1.shape[0]
    r = np.zeros((n, n, d_r))
    for i in range(n):
        for j in range(n):
            for k in range(d_r):
                r[i, j, k] = np.dot(w1[k] @ x[i], w2[k] @ x[j])
    return r


@pytest.mark.parametrize("symmetric", [True, False])
def test_matches_loop_oracle(rng, symmetric):
    layer = MDIPR(5, 3, 4, rng, symmetric=symmetric)
    x = rng.normal(size=(6, 5))
    np.testing.assert_allclose(layer(x).data, loop_oracle(x, layer.W1.data, layer.W2.data), atol=1e-12)


def test_symmetric_relations_are_bitwise_symmetric(rng):
    layer = MDIPR(7, 4, 3, rng, symmetric=True)
    r = layer(rng.normal(size=(2, 5, 7))).data
    assert np.array_equal(r, r.transpose(0, 2, 1, 3))


def test_asymmetric_relations_differ(rng):
    layer = MDIPR(7, 4, 3, rng, symmetric=False)
    r = layer(rng.normal(size=(5, 7))).data
    assert not np.allclose(r, r.transpose(1, 0, 2))


def test_mlp_phi_is_shared(rng):
    layer = MDIPR(4, 2, 3, rng, phi="mlp", d_phi=6)
    x = rng.normal(size=(3, 4))
    h = np.tanh(x @ layer.phi.layers[0].weight.data + layer.phi.layers[0].bias.data)
    np.testing.assert_allclose(layer(x).data, loop_oracle(h, layer.W1.data, layer.W1.data), atol=1e-12)


def test_relation_pairs_match_dense(rng):
    layer = MDIPR(5, 3, 2, rng, symmetric=False)
    x = rng.normal(size=(2, 4, 5))
    left, right = np.array([0, 3, 2]), np.array([1, 3, 0])
    dense = layer(x).data
    np.testing.assert_allclose(layer.relation_pairs(x, left, right).data, dense[:, left, right], atol=1e-12)


@pytest.mark.parametrize("symmetric,factor", [(True, 1), (False, 2)])
def test_param_count_formula(rng, symmetric, factor):
    layer = MDIPR(6, 5, 4, rng, symmetric=symmetric)
    assert mdipr_param_count(layer) == factor * 5 * 4 * 6 == layer.num_parameters()


def test_gradients(rng):
    layer = MDIPR(4, 3, 2, rng, symmetric=False, phi="mlp", d_phi=3)
    x = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    w = rng.normal(size=(2, 3, 3, 3))
    assert grad_check(lambda *_: (layer(x) * w).sum(), [x, *layer.parameters()]) < 1e-6


def test_rejects_wrong_width(rng):
    with pytest.raises(ValueError):
        MDIPR(4, 3, 2, rng)(np.zeros((3, 5)))
