import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd
from pydantic import ValidationError

from neuromotor.core import PoseCondition, TaskId
from neuromotor.errors import NeuromotorError
from neuromotor.gamesync import derive_subtasks, labels_at
from neuromotor.ingest import load_manifest, load_trial, validate_dataset
from neuromotor.synth import (
    GROUND_TRUTH_FILE,
    MANIFEST_FILE,
    SCENARIOS,
    SynthSpec,
    cohort_participants,
    gen_cohort,
    gen_emg_trial,
    gen_force_trial,
    planted_synergy_matrix,
    scenario_spec,
    sticky_chain,
    target_path,
)


def _tree(root):
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


class TestScenarios(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def test_catalogue(self):
        self.assertEqual(sorted(SCENARIOS), ["cohort", "minimal", "separated-cohort"])
        spec = scenario_spec("separated-cohort", seed=4)
        self.assertEqual((spec.n_healthy, spec.n_post_stroke), (13, 2))
        self.assertEqual(spec.seed, 4)

    def test_unknown_scenario(self):
        with self.assertRaises(NeuromotorError):
            scenario_spec("nope")

    def test_regeneration_is_byte_identical(self):
        first, second = self.root / "a", self.root / "b"
        gen_cohort(scenario_spec("minimal", seed=9), first)
        gen_cohort(scenario_spec("minimal", seed=9), second)
        self.assertEqual(_tree(first), _tree(second))

    def test_minimal_validates_and_records_truth(self):
        manifest = gen_cohort(scenario_spec("minimal"), self.root)
        report = validate_dataset(load_manifest(self.root / MANIFEST_FILE))
        self.assertEqual(report.issues, [])
        self.assertEqual(len(manifest.trials), 1)
        truth = json.loads((self.root / GROUND_TRUTH_FILE).read_text(encoding="utf-8"))
        self.assertEqual(truth["trials"]["02/A/XAxis"]["offsets"], [1.5, -0.7, 3.2])
        self.assertEqual(truth["trials"]["02/A/XAxis"]["emg_alignment"], "aligned")
        self.assertEqual(truth["participants"]["02"]["cohort"], "Healthy")
        states = pd.read_csv(self.root / truth["trials"]["02/A/XAxis"]["states"])
        self.assertEqual(list(states.columns), ["t", "state"])
        self.assertTrue(set(states["state"].unique()) <= {0, 1})

    def test_planted_synergies_recorded(self):
        spec = SynthSpec(duration=1.0, n_healthy=1, n_post_stroke=0, emg_mode="synergy", synergy_rank=2,
                         conditions=[PoseCondition.A], tasks=[TaskId.X_AXIS])
        gen_cohort(spec, self.root)
        entry = json.loads((self.root / GROUND_TRUTH_FILE).read_text(encoding="utf-8"))["trials"]["02/A/XAxis"]
        self.assertNotIn("states", entry)
        self.assertEqual(np.asarray(entry["W0"]).shape, (8, 2))
        H0 = pd.read_csv(self.root / entry["H0"])
        self.assertEqual(list(H0.columns), ["t", "s1", "s2"])
        self.assertEqual(len(H0), 1001)
        self.assertGreaterEqual(H0[["s1", "s2"]].to_numpy().min(), 0.0)

    def test_planted_states_match_generator(self):
        spec = SynthSpec(duration=1.0, n_healthy=1, n_post_stroke=0, emg_mode="hmm",
                         conditions=[PoseCondition.A], tasks=[TaskId.Y_AXIS])
        gen_cohort(spec, self.root)
        entry = json.loads((self.root / GROUND_TRUTH_FILE).read_text(encoding="utf-8"))["trials"]["02/A/YAxis"]
        manifest = load_manifest(self.root / MANIFEST_FILE)
        trial = load_trial(manifest, manifest.trials[0])
        expected = labels_at(derive_subtasks(trial.task, trial.game), trial.emg.timestamps)
        recorded = pd.read_csv(self.root / entry["states"])["state"].to_numpy()
        np.testing.assert_array_equal(recorded, expected)

    def test_participants(self):
        participants = cohort_participants(SynthSpec(n_healthy=2, n_post_stroke=1))
        self.assertEqual([p.id for p in participants], ["02", "03", "04"])
        self.assertEqual(participants[2].impaired_side, "left")


class TestSpec(unittest.TestCase):
    def test_rates_must_nest(self):
        with self.assertRaises(ValidationError):
            SynthSpec(wrench_rate=1000.0, game_rate=300.0)

    def test_negative_duration(self):
        with self.assertRaises(ValidationError):
            SynthSpec(duration=-1.0)


class TestPaths(unittest.TestCase):
    def test_circle_radius(self):
        t = np.linspace(0.0, 10.0, 501)
        path = target_path(TaskId.CIRCLE_CW, t, 10.0, amplitude=2.0)
        np.testing.assert_allclose(np.linalg.norm(path, axis=1), 2.0)
        self.assertLess(path[1, 1], 0.0)
        self.assertGreater(target_path(TaskId.CIRCLE_CCW, t, 10.0)[1, 1], 0.0)

    def test_triangle_bounds(self):
        t = np.linspace(0.0, 10.0, 501)
        path = target_path(TaskId.X_AXIS, t, 10.0)
        self.assertLessEqual(np.abs(path[:, 0]).max(), 1.0)
        self.assertGreater(path[:, 0].max(), 0.95)
        self.assertLess(path[:, 0].min(), -0.95)
        np.testing.assert_array_equal(path[:, 1], 0.0)

    def test_spline_closes(self):
        t = np.linspace(0.0, 10.0, 501)
        path = target_path(TaskId.SPLINE_1, t, 10.0)
        np.testing.assert_allclose(path[0], path[-1], atol=1e-12)


class TestEmg(unittest.TestCase):
    def test_planted_matrix(self):
        E, W0, H0 = planted_synergy_matrix(3, 150, 20.0, np.random.default_rng(0))
        self.assertEqual(E.shape, (8, 150))
        self.assertEqual(E.max(), 1.0)
        self.assertGreaterEqual(E.min(), 0.0)
        self.assertEqual(W0.shape, (8, 3))
        self.assertEqual(H0.shape, (3, 150))

    def test_synergy_trial(self):
        synth = gen_emg_trial(SynthSpec(duration=2.0, emg_mode="synergy", synergy_rank=2))
        self.assertEqual(synth.W0.shape, (8, 2))
        self.assertEqual(synth.trial.emg.n_samples, 2001)
        self.assertIsNone(synth.states)

    def test_aligned_states_follow_subtasks(self):
        synth = gen_emg_trial(SynthSpec(duration=4.0, emg_mode="hmm"), TaskId.Y_AXIS)
        trial = synth.trial
        expected = labels_at(derive_subtasks(trial.task, trial.game), trial.emg.timestamps)
        np.testing.assert_array_equal(synth.states, expected)

    def test_sticky_chain(self):
        states = sticky_chain(5000, 0.9, np.random.default_rng(1))
        switches = np.count_nonzero(np.diff(states))
        self.assertTrue(set(np.unique(states)) <= {0, 1})
        self.assertAlmostEqual(switches / 4999, 0.1, delta=0.02)

    def test_force_truth(self):
        synth = gen_force_trial(SynthSpec(duration=2.0), TaskId.Z_AXIS)
        np.testing.assert_allclose(
            synth.trial.wrench.values[:, :3] - synth.true_force[:, :3], np.tile([1.5, -0.7, 3.2], (2001, 1))
        )


if __name__ == '__main__':
    unittest.main()
