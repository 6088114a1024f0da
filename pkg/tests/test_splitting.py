import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from satfed import datagen as dg
from satfed import model as moe
from satfed import splitting as sp


def diag_setup():
    """3 experts, 3 clusters, gate aligned so cluster c routes to expert c."""
    cfg = moe.MoEConfig(n_layers=2, n_experts=3, top_k=1, d_in=3, d_hidden=4,
                        d_out=3, n_classes=2)
    params = moe.init_params(cfg, np.random.default_rng(0))
    params.values["backbone.w_in"] = np.eye(3)
    params.values["backbone.w_mid"] = np.eye(3)
    for l in range(2):
        params.values[f"gate.{l}"] = np.eye(3) * 4.0
    trials = [dg.Shard(np.tile(np.eye(3)[c] * 3.0, (5, 1)),
                       np.zeros(5, dtype=int), np.full(5, c))
              for c in range(3)]
    return params, trials


class TestRelevance:
    def test_columns_sum_to_top_k(self):
        params, trials = diag_setup()
        p = sp.relevance(params, trials)
        np.testing.assert_allclose(p.sum(axis=0), params.config.top_k)

    def test_aligned_gate_gives_diagonal(self):
        params, trials = diag_setup()
        p = sp.relevance(params, trials)
        np.testing.assert_allclose(p, np.eye(3), atol=1e-12)

    def test_hand_counted_matrix(self):
        # Single layer, K=1, gate = identity: expert argmax(x) is selected.
        cfg = moe.MoEConfig(1, 2, 1, 2, 3, 2, 2)
        params = moe.init_params(cfg, np.random.default_rng(1))
        params.values["backbone.w_in"] = np.eye(2)
        params.values["gate.0"] = np.eye(2)
        X = np.array([[2.0, 0.0], [2.0, 0.0], [0.0, 2.0], [3.0, 1.0]])
        trial = dg.Shard(X, np.zeros(4, dtype=int), np.zeros(4))
        p = sp.relevance(params, [trial])
        np.testing.assert_allclose(p[:, 0], [0.75, 0.25])

    def test_noise_forced_off(self):
        cfg = moe.MoEConfig(1, 2, 1, 2, 3, 2, 2, noise_std=5.0)
        params = moe.init_params(cfg, np.random.default_rng(1))
        params.values["backbone.w_in"] = np.eye(2)
        params.values["gate.0"] = np.eye(2)
        trial = dg.Shard(np.tile([4.0, 0.0], (6, 1)), np.zeros(6, dtype=int),
                         np.zeros(6))
        p1 = sp.relevance(params, [trial])
        p2 = sp.relevance(params, [trial])
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_allclose(p1[:, 0], [1.0, 0.0])

    def test_empty_trial_rejected(self):
        params, trials = diag_setup()
        trials[1] = dg.Shard(np.zeros((0, 3)), np.zeros(0, dtype=int),
                             np.zeros(0))
        with pytest.raises(ValueError):
            sp.relevance(params, trials)


class TestTruncate:
    def test_threshold_boundary_kept(self):
        p = np.array([[0.3, 0.2, 0.5]])
        np.testing.assert_array_equal(sp.truncate(p, 0.3), [[0.3, 0.0, 0.5]])

    def test_zero_threshold_is_identity(self):
        p = np.random.default_rng(0).random((4, 3))
        np.testing.assert_array_equal(sp.truncate(p, 0.0), p)

    def test_invalid_threshold_rejected(self):
        with pytest.raises(ValueError):
            sp.truncate(np.ones((1, 1)), 1.5)


class TestAssignProbs:
    def test_rows_normalized(self):
        p = np.array([[0.2, 0.6], [0.0, 0.0], [0.5, 0.5]])
        probs = sp.assign_probs(p)
        np.testing.assert_allclose(probs[0], [0.25, 0.75])
        np.testing.assert_array_equal(probs[1], [0.0, 0.0])
        np.testing.assert_allclose(probs[2], [0.5, 0.5])


class TestSplit:
    def test_deterministic_when_rows_singleton(self):
        p = np.eye(3)
        a = sp.split(p, 3, cap=1, rng=np.random.default_rng(0))
        assert a.groups == [{0}, {1}, {2}]

    def test_non_overlapping_and_support(self):
        rng = np.random.default_rng(42)
        p = np.array([[0.5, 0.5, 0.0],
                      [0.0, 0.4, 0.6],
                      [0.9, 0.0, 0.1],
                      [0.0, 0.0, 0.0]])
        for _ in range(200):
            a = sp.split(p, 3, cap=2, rng=rng)
            seen: set[int] = set()
            for c, g in enumerate(a.groups):
                assert not (g & seen)
                seen |= g
                for m in g:
                    assert p[m, c] > 0
            assert 3 not in seen  # all-zero row stays unassigned

    def test_cap_respected_while_feasible(self):
        # 4 experts all relevant to both clusters, cap 2 -> exactly 2 each.
        rng = np.random.default_rng(7)
        p = np.full((4, 2), 0.5)
        for _ in range(100):
            a = sp.split(p, 2, cap=2, rng=rng)
            assert sorted(len(g) for g in a.groups) == [2, 2]

    def test_cap_waived_when_all_relevant_full(self):
        # both experts relevant only to cluster 0; cap 1 cannot hold.
        a = sp.split(np.array([[1.0, 0.0], [1.0, 0.0]]), 2, cap=1,
                     rng=np.random.default_rng(0))
        assert a.groups[0] == {0, 1}

    def test_sampling_follows_row_probabilities(self):
        rng = np.random.default_rng(123)
        p = np.array([[0.9, 0.1]])
        hits = sum(0 in sp.split(p, 2, cap=1, rng=rng).groups[0]
                   for _ in range(2000))
        assert 0.85 < hits / 2000 < 0.95

    def test_invalid_cap_rejected(self):
        with pytest.raises(ValueError):
            sp.split(np.eye(2), 2, cap=0, rng=np.random.default_rng(0))

    @given(st.integers(0, 10_000))
    @settings(max_examples=50, deadline=None)
    def test_disjointness_property(self, seed):
        rng = np.random.default_rng(seed)
        p = rng.random((5, 3))
        p = sp.truncate(p, 0.4)
        a = sp.split(p, 3, cap=2, rng=rng)
        all_members = [m for g in a.groups for m in g]
        assert len(all_members) == len(set(all_members))


class TestPipeline:
    def test_compute_split_diagonal_scenario(self):
        params, trials = diag_setup()
        mat, assign = sp.compute_split(params, trials, p_th=0.5, cap=1,
                                       rng=np.random.default_rng(0))
        np.testing.assert_allclose(mat.p, np.eye(3), atol=1e-12)
        assert assign.groups == [{0}, {1}, {2}]
        assert mat.unassignable() == []

    def test_unassignable_reported(self):
        mat = sp.RelevanceMatrix(np.array([[0.1, 0.1]]), 0.5,
                                 p_trunc=np.zeros((1, 2)))
        assert mat.unassignable() == [0]

    def test_export(self, tmp_path):
        a = sp.ExpertAssignment(2, [{0, 2}, {1}])
        path = tmp_path / "assign.txt"
        a.export(path)
        lines = path.read_text().strip().splitlines()
        assert lines[1:] == ["0 0", "1 1", "2 0"]


class TestDefaultCap:
    def test_ceiling_division(self):
        assert sp.default_cap(8, 3) == 3
        assert sp.default_cap(6, 3) == 2
        assert sp.default_cap(1, 4) == 1
