"""
End-to-end checks against synthetic data with planted ground truth.

These are the slow tests: HMM separation, planted synergy ranks and two
full pipeline runs.
"""

import json
import tempfile
import unittest
from pathlib import Path

import numpy as np
import yaml

from neuromotor.core import PoseCondition, TaskId
from neuromotor.hmm import multi_restart_error
from neuromotor.main import main
from neuromotor.pipeline import EXIT_OK, INDEX_FILE
from neuromotor.synergy import vaf_curve
from neuromotor.synth import MANIFEST_FILE, SynthSpec, gen_cohort, gen_emg_trial, planted_synergy_matrix, scenario_spec

SEEDS = range(20)


def _tree(root):
    return {path.relative_to(root).as_posix(): path.read_bytes() for path in sorted(root.rglob("*")) if path.is_file()}


class TestHmmSeparation(unittest.TestCase):
    def _mean_error(self, alignment, seed):
        spec = SynthSpec(emg_mode="hmm", duration=4.999, game_rate=500.0, hmm_alignment=alignment, seed=seed)
        trial = gen_emg_trial(spec, TaskId.X_AXIS).trial
        self.assertEqual(trial.emg.n_samples, 5000)
        report, _ = multi_restart_error(trial, trial.emg, 25, 0)
        return report.mean

    def test_aligned_states_are_decoded(self):
        for seed in SEEDS:
            self.assertLessEqual(self._mean_error("aligned", seed), 0.05, msg=f"seed {seed}")

    def test_independent_states_are_not(self):
        for seed in SEEDS:
            self.assertGreaterEqual(self._mean_error("independent", seed), 0.40, msg=f"seed {seed}")


class TestPlantedRank(unittest.TestCase):
    def test_ranks_one_to_five(self):
        for rank in range(1, 6):
            recovered = 0
            for seed in SEEDS:
                E, _, _ = planted_synergy_matrix(rank, 150, 20.0, np.random.default_rng([rank, seed]))
                curve = vaf_curve(E, seeds=range(5), max_iter=500)
                recovered += curve.optimal_k == rank
                for decomposition in curve.decompositions:
                    trace = np.array(decomposition.objective_trace)
                    self.assertTrue(np.all(np.diff(trace) <= 1e-12 * float(np.sum(E**2))))
            self.assertGreaterEqual(recovered, 18, msg=f"rank {rank}")


class TestPipeline(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _analyze(self, manifest, out, *flags):
        return main(["analyze", "--manifest", str(manifest), "--out", str(out), "--quiet", *flags])

    def test_complete_separation(self):
        data = self.root / "data"
        gen_cohort(scenario_spec("separated-cohort"), data)
        out = self.root / "out"
        code = self._analyze(data / MANIFEST_FILE, out, "--stages", "validate,sync,metrics,stats")
        self.assertEqual(code, EXIT_OK)
        results = json.loads((out / "stats" / "results.json").read_text(encoding="utf-8"))
        rmse = next(row for row in results if row["metric"] == "rmse" and row["condition"] == "A")
        self.assertEqual(rmse["test"]["u"], 0)
        self.assertEqual((rmse["test"]["n1"], rmse["test"]["n2"]), (2, 13))
        self.assertAlmostEqual(rmse["test"]["p_two_sided"], 2 / 105, places=12)
        self.assertEqual(rmse["r"], 1.0)

    def test_byte_identical_reruns(self):
        data = self.root / "data"
        spec = SynthSpec(n_healthy=2, n_post_stroke=2, duration=2.0, conditions=[PoseCondition.A], seed=5)
        gen_cohort(spec, data)
        config = self.root / "fast.yaml"
        config.write_text(yaml.safe_dump({
            "workers": 2,
            "synergy": {"restarts": 2, "max_iter": 100, "kmeans_restarts": 2, "clusters": [1, 2, 3]},
            "hmm": {"restarts": 3, "max_iter": 30},
        }), encoding="utf-8")

        runs = []
        for name in ("first", "second"):
            out = self.root / name
            self.assertEqual(self._analyze(data / MANIFEST_FILE, out, "--config", str(config)), EXIT_OK)
            runs.append(out)

        first, second = (_tree(out) for out in runs)
        self.assertEqual(sorted(first), sorted(second))
        for relative in first:
            self.assertEqual(first[relative], second[relative], msg=relative)
        index = json.loads(first[INDEX_FILE])
        self.assertEqual(index["index_hash"], json.loads(second[INDEX_FILE])["index_hash"])
        for expected in ("stats/results.csv", "synergy/clusters.json", "hmm/errors.csv", "plot/force_box.csv"):
            self.assertIn(expected, first)
        per_participant = json.loads(first["synergy/clusters.json"])["procedure_3"]["2"]
        self.assertEqual(per_participant["items"], ["02", "03", "04", "05"])
        self.assertEqual(len(per_participant["labels"]), 4)


if __name__ == '__main__':
    unittest.main()
