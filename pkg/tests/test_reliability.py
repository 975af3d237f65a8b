import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedrn.errors import ConfigError, ContractViolation
from fedrn.reliability import (
    ReliabilityTable,
    cosine_matrix,
    expertise_scores,
    make_probe,
    minmax,
    reliability,
    similarity_matrix,
    top_k_neighbors,
)


def random_softmax(rng, n, c):
    z = rng.normal(size=(n, c)) * 3
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


class TestExpertise:
    def test_affine(self):
        np.testing.assert_allclose(expertise_scores([0.5, 0.7, 0.9]), [0.0, 0.5, 1.0], atol=1e-15)

    def test_constant_gives_half(self):
        np.testing.assert_array_equal(expertise_scores([0.4] * 5), 0.5)

    def test_rank_order(self):
        acc = np.random.default_rng(3).random(10)
        out = expertise_scores(acc)
        assert np.argsort(out).tolist() == sorted(range(10), key=lambda i: acc[i])
        assert out.min() == 0.0 and out.max() == 1.0

    def test_single_client(self):
        with pytest.raises(ContractViolation):
            expertise_scores([0.9])


class TestSimilarity:
    def test_identical_outputs(self):
        S = cosine_matrix([[0.2, 0.8], [0.2, 0.8]])
        assert S[0, 1] == pytest.approx(1.0, abs=1e-15)

    def test_orthogonal_outputs(self):
        assert cosine_matrix([[1.0, 0.0], [0.0, 1.0]])[0, 1] == 0.0

    def test_three_clients(self):
        P = [[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]
        S = cosine_matrix(P)
        r = 1 / math.sqrt(2)
        np.testing.assert_allclose([S[0, 1], S[0, 2], S[1, 2]], [r, 0.0, r], atol=1e-15)
        N = similarity_matrix(P)
        np.testing.assert_allclose([N[0, 1], N[0, 2], N[1, 2]], [1.0, 0.0, 1.0], atol=1e-15)
        np.testing.assert_array_equal(np.diag(N), 1.0)

    def test_zero_vector_rejected(self):
        with pytest.raises(ContractViolation):
            cosine_matrix([[0.0, 0.0], [1.0, 0.0]])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**32 - 1), st.integers(2, 12), st.integers(2, 10))
    def test_symmetric_and_bounded(self, seed, n, c):
        S = similarity_matrix(random_softmax(np.random.default_rng(seed), n, c))
        assert np.abs(S - S.T).max() <= 1e-12
        assert S.min() >= 0.0 and S.max() <= 1.0
        np.testing.assert_array_equal(np.diag(S), 1.0)


class TestReliability:
    def test_alpha_one(self):
        exp = np.array([0.1, 0.9, 0.4])
        R = reliability(exp, np.random.default_rng(0).random((3, 3)), 1.0)
        np.testing.assert_array_equal(R, np.tile(exp, (3, 1)))

    def test_alpha_zero(self):
        S = similarity_matrix(random_softmax(np.random.default_rng(1), 4, 3))
        np.testing.assert_array_equal(reliability(np.zeros(4), S, 0.0), S)

    def test_hand_value(self):
        R = reliability([0.5, 0.5], [[1.0, 1.0], [1.0, 1.0]], 0.6)
        assert R[0, 1] == pytest.approx(0.7, abs=1e-15)

    def test_alpha_range(self):
        with pytest.raises(ContractViolation):
            reliability([0.5], [[1.0]], 1.5)


class TestTopK:
    def test_all_neighbours(self):
        assert sorted(top_k_neighbors(0, [4, 2, 9], [0.1, 0.5, 0.3], 3)) == [2, 4, 9]

    def test_tie_goes_to_smaller_id(self):
        assert top_k_neighbors(0, [3, 5, 7], [0.9, 0.2, 0.9], 1) == [3]
        assert top_k_neighbors(0, [7, 5, 3], [0.9, 0.2, 0.9], 1) == [3]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            ids = rng.permutation(20)[:8].tolist()
            s = rng.integers(0, 4, size=8) / 4.0
            best = sorted(zip(ids, s), key=lambda t: (-t[1], t[0]))[:2]
            assert top_k_neighbors(99, ids, s, 2) == [b[0] for b in best]

    @pytest.mark.parametrize("k", [0, 4])
    def test_k_out_of_range(self, k):
        with pytest.raises(ConfigError):
            top_k_neighbors(0, [1, 2, 3], [0.1, 0.2, 0.3], k)

    def test_self_rejected(self):
        with pytest.raises(ContractViolation):
            top_k_neighbors(1, [1, 2], [0.1, 0.2], 1)


def test_minmax_range():
    v = minmax([3.0, -1.0, 7.0])
    assert v.min() == 0.0 and v.max() == 1.0


def test_probe_is_shared():
    np.testing.assert_array_equal(make_probe(5, [3, 4]), make_probe(5, [3, 4]))


def test_table_csv(tmp_path):
    rng = np.random.default_rng(0)
    t = ReliabilityTable.build([2, 5, 8], [0.3, 0.9, 0.6], random_softmax(rng, 3, 4), 0.6)
    path = tmp_path / "sim.csv"
    t.to_csv(path, "reliability")
    lines = path.read_text().splitlines()
    assert lines[0] == "client,2,5,8"
    row = [float(v) for v in lines[2].split(",")[1:]]
    np.testing.assert_array_equal(row, t.scores[1])
    assert t.index(8) == 2
