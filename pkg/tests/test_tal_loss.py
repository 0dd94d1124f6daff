import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from gea.errors import BatchError, ValidationError
from gea.tal_loss import TALConfig, positive_aggregate, softmax_weights, tal, tal_terms, total_loss
from gea.tgte import SimilarityMatrix

from oracles import tal_reference


def sim(S, ids_i, ids_t=None):
    return SimilarityMatrix.from_arrays(S, ids_i, ids_i if ids_t is None else ids_t)


def random_case(rng, K, groups):
    ids = rng.permutation(np.arange(K) % groups)
    return rng.uniform(-1, 1, (K, K)), ids


@pytest.mark.parametrize("s", [-1.0, -0.3, 0.0, 0.42, 1.0])
def test_single_pair_collapses_to_twice_the_margin(s):
    assert float(tal(sim([[s]], [0]))) == pytest.approx(0.2, abs=1e-12)


def test_matches_literal_transcription():
    rng = np.random.default_rng(0)
    for K, groups in [(4, 2), (6, 3), (8, 8), (5, 1)]:
        S, ids = random_case(rng, K, groups)
        assert float(tal(sim(S, ids))) == pytest.approx(tal_reference(S, ids, ids), rel=1e-12, abs=1e-14)


def test_rectangular_ids_and_custom_hyperparameters():
    rng = np.random.default_rng(1)
    S, ids = random_case(rng, 6, 3)
    cfg = TALConfig(margin=0.3, temperature=0.2)
    assert float(tal(sim(S, ids), cfg)) == pytest.approx(tal_reference(S, ids, ids, 0.3, 0.2), rel=1e-12)


def test_loss_is_at_least_twice_the_margin():
    rng = np.random.default_rng(2)
    for _ in range(20):
        S, ids = random_case(rng, 8, 4)
        assert float(tal(sim(S, ids))) >= 0.2 - 1e-12


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    S, ids = random_case(rng, 6, 3)
    t = torch.tensor(S, requires_grad=True)
    tal(SimilarityMatrix(t, torch.as_tensor(ids), torch.as_tensor(ids))).backward()
    h = 1e-6
    fd = np.zeros_like(S)
    for i in range(6):
        for j in range(6):
            up, dn = S.copy(), S.copy()
            up[i, j] += h
            dn[i, j] -= h
            fd[i, j] = (tal_reference(up, ids, ids) - tal_reference(dn, ids, ids)) / (2 * h)
    np.testing.assert_allclose(t.grad.numpy(), fd, rtol=1e-5, atol=1e-7)


def test_softmax_weights_extremes():
    row = torch.tensor([50.0, -50.0, 0.0, 49.0], dtype=torch.float64)
    w = softmax_weights(row, tau=0.015)
    assert torch.isfinite(w).all()
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
    masked = softmax_weights(row, torch.tensor([False, True, True, False]), tau=1.0)
    assert float(masked[0]) == 0.0 and float(masked[3]) == 0.0
    with pytest.raises(ValidationError):
        softmax_weights(row, torch.zeros(4, dtype=torch.bool))


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=12), st.floats(1e-3, 10.0))
def test_softmax_is_a_distribution(values, tau):
    w = softmax_weights(torch.tensor(values, dtype=torch.float64), tau=tau)
    assert float(w.sum()) == pytest.approx(1.0, abs=1e-12)
    assert bool((w >= 0).all())


def test_positive_aggregate_is_a_convex_combination_of_positives():
    rng = np.random.default_rng(4)
    S, ids = random_case(rng, 8, 2)
    agg = positive_aggregate(sim(S, ids), "i2t", TALConfig(temperature=1.0)).numpy()
    for i in range(8):
        pos = S[i, ids == ids[i]]
        assert pos.min() - 1e-12 <= agg[i] <= pos.max() + 1e-12


def test_all_pairs_restriction_differs():
    rng = np.random.default_rng(5)
    S, ids = random_case(rng, 6, 2)
    a = tal(sim(S, ids))
    b = tal(sim(S, ids), TALConfig(positive_restriction="all_pairs"))
    assert float(a) != float(b)


def test_missing_positive_is_a_batch_error():
    with pytest.raises(BatchError, match="row 1"):
        tal(sim(np.eye(2), [0, 1], [0, 0]))


def test_configuration_validation():
    for bad in (dict(margin=0.0), dict(temperature=-1.0), dict(positive_restriction="x")):
        with pytest.raises(ValidationError):
            TALConfig(**bad)
    with pytest.raises(ValidationError, match="square"):
        tal_terms(sim(np.zeros((2, 3)), [0, 1], [0, 1, 1]), TALConfig())


def test_total_loss_with_identical_matrices_doubles():
    rng = np.random.default_rng(6)
    S, ids = random_case(rng, 6, 3)
    s = sim(S, ids)
    assert float(total_loss(s, s)) == pytest.approx(2 * float(tal(s)), rel=1e-14)
    with pytest.raises(ValidationError):
        total_loss(s, sim(np.eye(2), [0, 1]))


def test_permutation_invariance():
    rng = np.random.default_rng(7)
    S, ids = random_case(rng, 8, 4)
    p = rng.permutation(8)
    q = rng.permutation(8)
    a = tal(sim(S, ids))
    b = tal(sim(S[p][:, q], ids[p], ids[q]))
    assert float(a) == pytest.approx(float(b), rel=1e-12)
