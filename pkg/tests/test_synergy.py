import unittest

import numpy as np

from neuromotor.errors import AnalysisError
from neuromotor.synergy import (
    SynergyDecomposition,
    cluster_procedure,
    kmeans,
    match_synergies,
    nmf,
    normalize_columns,
    optimal_count_from_curve,
    segment_by_subtask,
    vaf,
    vaf_curve,
    vaf_per_channel,
)


def _block_rank_two(n_samples=200, seed=0):
    rng = np.random.default_rng(seed)
    W = np.zeros((8, 2))
    W[:4, 0] = rng.uniform(0.5, 1.0, 4)
    W[4:, 1] = rng.uniform(0.5, 1.0, 4)
    H = rng.uniform(0.0, 1.0, (2, n_samples))
    return W @ H


def _decomposition(W, energy=(2.0, 1.0)):
    W = np.asarray(W, dtype=float)
    H = np.outer(energy, np.ones(10))
    return SynergyDecomposition(k=W.shape[1], W=W, H=H, objective=0.0, seed=0, n_iter=1, converged=True)


class TestNmf(unittest.TestCase):
    def setUp(self):
        self.E = _block_rank_two()

    def test_exact_rank_two(self):
        decomposition = nmf(self.E, 2, seeds=[0, 1, 2])
        self.assertGreater(vaf(self.E, decomposition.W, decomposition.H), 0.999)
        self.assertGreaterEqual(decomposition.W.min(), 0.0)
        self.assertGreaterEqual(decomposition.H.min(), 0.0)
        np.testing.assert_allclose(np.linalg.norm(decomposition.W, axis=0), 1.0)

    def test_objective_never_rises(self):
        decomposition = nmf(self.E, 3, seeds=[4])
        trace = np.array(decomposition.objective_trace)
        slack = 1e-12 * float(np.sum(self.E**2))
        self.assertTrue(np.all(np.diff(trace) <= slack))

    def test_best_of_seeds(self):
        single = [nmf(self.E, 1, seeds=[seed]).objective for seed in (0, 1, 2)]
        self.assertAlmostEqual(nmf(self.E, 1, seeds=[0, 1, 2]).objective, min(single))

    def test_identity_at_full_rank(self):
        decomposition = nmf(self.E, 8, seeds=[0], max_iter=5)
        self.assertEqual(decomposition.objective, 0.0)
        self.assertEqual(vaf(self.E, decomposition.W, decomposition.H), 1.0)

    def test_rejects_bad_input(self):
        with self.assertRaises(AnalysisError):
            nmf(-self.E, 2, seeds=[0])
        with self.assertRaises(AnalysisError):
            nmf(np.zeros((8, 10)), 2, seeds=[0])
        with self.assertRaises(AnalysisError):
            nmf(self.E, 0, seeds=[0])
        with self.assertRaises(AnalysisError):
            nmf(self.E, 2, seeds=[])

    def test_normalize_columns(self):
        W = np.array([[3.0, 0.0], [4.0, 2.0]])
        H = np.ones((2, 3))
        Wn, Hn = normalize_columns(W, H)
        np.testing.assert_allclose(Wn @ Hn, W @ H)
        np.testing.assert_allclose(np.linalg.norm(Wn, axis=0), 1.0)


class TestVaf(unittest.TestCase):
    def test_curve_picks_rank_two(self):
        curve = vaf_curve(_block_rank_two(), seeds=[0, 1, 2])
        self.assertEqual(curve.optimal_k, 2)
        self.assertFalse(curve.saturated)
        self.assertEqual(len(curve.values), 8)
        self.assertEqual(curve.best().k, 2)

    def test_rule(self):
        self.assertEqual(optimal_count_from_curve([0.5, 0.8, 0.92, 0.94, 0.95]), (3, False))
        self.assertEqual(optimal_count_from_curve([0.5, 0.91, 0.95, 0.96]), (3, False))
        self.assertEqual(optimal_count_from_curve([0.5, 0.95]), (2, False))
        self.assertEqual(optimal_count_from_curve([0.1, 0.2]), (2, True))

    def test_per_channel(self):
        E = np.ones((3, 4))
        E[2] = 0.0
        W = np.array([[1.0], [0.5], [0.0]])
        H = np.ones((1, 4))
        values = vaf_per_channel(E, W, H)
        self.assertEqual(values[0], 1.0)
        self.assertAlmostEqual(values[1], 0.75)
        self.assertTrue(np.isnan(values[2]))


class TestClustering(unittest.TestCase):
    def test_blobs(self):
        rng = np.random.default_rng(3)
        centers = np.array([[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]])
        points = np.vstack([center + 0.1 * rng.standard_normal((20, 2)) for center in centers])
        assignment = kmeans(points, 3, seeds=[0, 1])
        np.testing.assert_array_equal(assignment.labels, np.repeat([0, 1, 2], 20))
        self.assertLess(assignment.inertia, 60 * 0.1)

    def test_too_few_points(self):
        with self.assertRaises(AnalysisError):
            kmeans(np.zeros((2, 3)), 3, seeds=[0])

    def _decompositions(self):
        a = np.eye(8)[:, :2]
        b = np.eye(8)[:, 2:4]
        return {"02": [_decomposition(a), _decomposition(a)], "03": [_decomposition(b)]}

    def test_procedure_one(self):
        results = cluster_procedure(1, self._decompositions(), [1, 2, 8], seeds=[0])
        self.assertEqual(sorted(results), [1, 2])
        self.assertEqual(len(results[2].labels), 6)
        self.assertEqual(results[2].items[0], "02:0")

    def test_procedure_two_majority(self):
        results = cluster_procedure(2, self._decompositions(), [2], seeds=[0, 1], top_n=1)
        assignment = results[2]
        self.assertEqual(len(assignment.labels), 3)
        self.assertNotEqual(assignment.owner_labels["02"], assignment.owner_labels["03"])

    def test_procedure_three(self):
        results = cluster_procedure(3, self._decompositions(), [2, 3], seeds=[0])
        self.assertEqual(sorted(results), [2])
        assignment = results[2]
        self.assertEqual(assignment.items, ("02", "03"))
        self.assertEqual(list(assignment.labels), [0, 1])
        self.assertEqual(assignment.to_dict()["owner_labels"], {"02": 0, "03": 1})

    def test_procedure_three_one_point_per_participant(self):
        rng = np.random.default_rng(11)
        healthy = np.abs(np.eye(8)[:, :3] + 0.02 * rng.standard_normal((8, 3)))
        impaired = np.abs(np.eye(8)[:, 5:8] + 0.02 * rng.standard_normal((8, 3)))
        slots = ("A/XAxis", "A/YAxis", "B/XAxis")
        participants = {}
        for i in range(6):
            base = healthy if i < 4 else impaired
            participants[f"{i + 2:02d}"] = {
                slot: _decomposition(np.abs(base + 0.01 * rng.standard_normal(base.shape)), (3.0, 2.0, 1.0))
                for slot in slots
            }
        # one participant lacks a slot and one has a smaller decomposition; both are zero-padded
        del participants["03"]["B/XAxis"]
        participants["04"]["A/YAxis"] = _decomposition(healthy[:, :2])

        assignment = cluster_procedure(3, participants, [2], seeds=[0, 1])[2]
        self.assertEqual(len(assignment.labels), len(participants))
        self.assertEqual(assignment.items, tuple(sorted(participants)))
        self.assertEqual(list(assignment.labels), [0, 0, 0, 0, 1, 1])

    def test_procedure_three_rejects_mixed_muscle_counts(self):
        groups = {"02": [_decomposition(np.eye(8)[:, :2])], "03": [_decomposition(np.eye(6)[:, :2])]}
        with self.assertRaises(AnalysisError):
            cluster_procedure(3, groups, [1], seeds=[0])

    def test_unknown_procedure(self):
        with self.assertRaises(AnalysisError):
            cluster_procedure(4, self._decompositions(), [1], seeds=[0])


class TestMatchingAndSegments(unittest.TestCase):
    def test_match_permutation(self):
        reference = np.random.default_rng(5).uniform(size=(8, 3))
        order, similarity = match_synergies(reference, reference[:, [2, 0, 1]])
        np.testing.assert_array_equal(order, [1, 2, 0])
        np.testing.assert_allclose(similarity, 1.0)

    def test_segments(self):
        E = np.arange(14, dtype=float).reshape(2, 7)
        labels = np.array([0, 0, 1, 1, 0, 0, 1])
        by_direction = segment_by_subtask(E, labels)
        self.assertEqual([s.label for s in by_direction], [0, 1])
        self.assertEqual(by_direction[0].E.shape, (2, 4))
        by_repetition = segment_by_subtask(E, labels, mode="repetition")
        self.assertEqual([(s.label, s.index) for s in by_repetition], [(0, 0), (1, 0), (0, 1), (1, 1)])
        np.testing.assert_array_equal(by_repetition[2].E, E[:, 4:6])

    def test_label_length(self):
        with self.assertRaises(AnalysisError):
            segment_by_subtask(np.ones((2, 5)), np.zeros(4))


if __name__ == '__main__':
    unittest.main()
