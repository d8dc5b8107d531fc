import json
import tempfile
import unittest
from pathlib import Path
from unittest import mock

import pandas as pd

from neuromotor import hmm as hmm_module
from neuromotor.core import PoseCondition, TaskId
from neuromotor.errors import AlignmentError, AnalysisError, ConfigError
from neuromotor.main import build_parser, main, overrides_from_args
from neuromotor.pipeline import (
    EXIT_ANALYSIS,
    EXIT_INPUT,
    EXIT_OK,
    INDEX_FILE,
    RUN_CONFIG_FILE,
    AnalysisPipeline,
    ArtifactWriter,
    stage_seeds,
)
from neuromotor.settings import load_config
from neuromotor.synth import MANIFEST_FILE, SynthSpec, gen_cohort


class TestCommandLine(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        self.data = self.root / "data"
        self.out = self.root / "out"
        self.assertEqual(main(["synth", "--scenario", "minimal", "--out", str(self.data), "--quiet"]), EXIT_OK)
        self.manifest = str(self.data / MANIFEST_FILE)

    def tearDown(self):
        self._tmp.cleanup()

    def _run(self, command, *flags):
        return main([command, "--manifest", self.manifest, "--out", str(self.out), "--quiet", *flags])

    def test_validate(self):
        self.assertEqual(self._run("validate"), EXIT_OK)
        validation = json.loads((self.out / "validation.json").read_text(encoding="utf-8"))
        self.assertTrue(validation["passed"])
        index = json.loads((self.out / INDEX_FILE).read_text(encoding="utf-8"))
        self.assertIn(RUN_CONFIG_FILE, [entry["path"] for entry in index["files"]])

    def test_dsp_writes_envelopes(self):
        self.assertEqual(self._run("dsp"), EXIT_OK)
        self.assertTrue((self.out / "dsp" / "02" / "A" / "XAxis.emg.proc.csv").is_file())
        maxima = json.loads((self.out / "dsp" / "maxima.json").read_text(encoding="utf-8"))
        self.assertEqual(len(maxima["02"]), 8)
        run_config = json.loads((self.out / RUN_CONFIG_FILE).read_text(encoding="utf-8"))
        self.assertEqual(run_config["plan"], ["validate", "dsp"])

    def test_missing_manifest(self):
        self.manifest = str(self.root / "absent.json")
        self.assertEqual(self._run("validate"), EXIT_INPUT)

    def test_bad_band(self):
        self.assertEqual(self._run("dsp", "--low-hz", "500", "--high-hz", "100"), EXIT_INPUT)

    def test_unknown_stage(self):
        with self.assertRaises(SystemExit) as raised:
            self._run("analyze", "--stages", "validate,bogus")
        self.assertEqual(raised.exception.code, 2)

    def test_single_axis_group_keeps_its_evidenced_offset(self):
        # a lone XAxis trial pins fx only
        self.assertEqual(self._run("analyze", "--stages", "stats"), EXIT_OK)
        offsets = json.loads((self.out / "sync" / "offsets.json").read_text(encoding="utf-8"))
        fx, fy, fz = offsets["02/A"]["offsets"]
        self.assertAlmostEqual(fx, 1.5, places=6)
        self.assertIsNone(fy)
        self.assertIsNone(fz)
        self.assertEqual(offsets["02/A"]["sample_counts"][1:], [0, 0])
        reports = json.loads((self.out / "metrics" / "reports.json").read_text(encoding="utf-8"))
        self.assertEqual([r["trial"] for r in reports], ["02/A/XAxis"])
        self.assertEqual(reports[0]["nonproductive"], [])
        results = (self.out / "stats" / "results.csv").read_text(encoding="utf-8").splitlines()
        self.assertEqual(len(results), 1)

    def test_plot_data_on_single_trial(self):
        self.assertEqual(self._run("plot-data"), EXIT_OK)
        plot = self.out / "plot"
        force = pd.read_csv(plot / "force_box.csv")
        self.assertEqual(force.groupby("metric").size().tolist(), [1] * 4)
        self.assertEqual(len(pd.read_csv(plot / "hmm_box.csv")), 1)
        axes = pd.read_csv(plot / "force_axes.csv")
        self.assertEqual(axes["axis"].tolist(), ["fx"])
        self.assertTrue(axes["productive"].all())
        self.assertTrue((plot / "traces" / "02" / "A" / "XAxis.csv").is_file())
        self.assertTrue((plot / "viterbi" / "02" / "A" / "XAxis.csv").is_file())
        index = json.loads((self.out / INDEX_FILE).read_text(encoding="utf-8"))
        self.assertTrue(index["complete"])
        self.assertEqual(set(index["stages"].values()), {"ok"})

    def test_failed_stage_is_indexed(self):
        emg = self.data / "02" / "A" / "XAxis.emg.csv"
        emg.write_text("t,AD\n0.0,1.0\n", encoding="utf-8")
        self.assertEqual(self._run("analyze", "--stages", "validate,dsp"), EXIT_ANALYSIS)
        index = json.loads((self.out / INDEX_FILE).read_text(encoding="utf-8"))
        self.assertFalse(index["complete"])
        self.assertEqual(index["stages"], {"validate": "failed", "dsp": "pending"})
        self.assertEqual(index["failure"]["stage"], "validate")
        self.assertIn("validation failed", index["failure"]["error"])
        self.assertIn("validation.json", [entry["path"] for entry in index["files"]])


class TestPlanning(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.out = Path(self._tmp.name)

    def tearDown(self):
        self._tmp.cleanup()

    def _pipeline(self, stages):
        config = load_config({"manifest": self.out / "m.json", "out": self.out, "stages": stages})
        return AnalysisPipeline(config, quiet=True)

    def test_dependencies_run_when_uncached(self):
        self.assertEqual(self._pipeline(["stats"]).plan(), ["validate", "sync", "metrics", "stats"])
        self.assertEqual(self._pipeline(["plot-data"]).plan(),
                         ["validate", "dsp", "sync", "metrics", "hmm", "plot-data"])

    def test_cached_dependencies_are_reused(self):
        writer = ArtifactWriter(self.out)
        writer.json("metrics/reports.json", [])
        self.assertEqual(self._pipeline(["stats"]).plan(), ["stats"])

    def test_requires_manifest(self):
        with self.assertRaises(ConfigError):
            AnalysisPipeline(load_config({"out": self.out}))


class TestArtifacts(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.writer = ArtifactWriter(Path(self._tmp.name))

    def tearDown(self):
        self._tmp.cleanup()

    def test_index_hash_tracks_content(self):
        self.writer.json("a/b.json", {"x": 1})
        first = self.writer.write_index()
        self.assertEqual(self.writer.write_index(), first)
        self.writer.json("a/b.json", {"x": 2})
        self.assertNotEqual(self.writer.write_index(), first)

    def test_missing_input_names_stage(self):
        with self.assertRaisesRegex(AnalysisError, "run the sync stage first"):
            self.writer.read_json("sync/offsets.json", "sync")


class TestArguments(unittest.TestCase):
    def test_nested_overrides(self):
        args = build_parser().parse_args([
            "analyze", "--manifest", "m.json", "--out", "o", "--stages", "dsp,hmm",
            "--synergy-restarts", "3", "--clusters", "1-3", "--hmm-restarts", "4", "--decimate", "2",
        ])
        overrides = overrides_from_args(args)
        self.assertEqual(overrides["stages"], ["dsp", "hmm"])
        self.assertEqual(overrides["synergy"], {"restarts": 3, "clusters": [1, 2, 3]})
        self.assertEqual(overrides["hmm"], {"restarts": 4, "decimate": 2})
        self.assertNotIn("filter", overrides)

    def test_single_stage_command(self):
        args = build_parser().parse_args(["hmm", "--manifest", "m.json", "--out", "o", "--restarts", "5"])
        overrides = overrides_from_args(args)
        self.assertEqual(overrides["stages"], ["hmm"])
        self.assertEqual(overrides["hmm"]["restarts"], 5)

    def test_stage_seeds(self):
        self.assertEqual(stage_seeds(3, "hmm", "02/A/XAxis"), stage_seeds(3, "hmm", "02/A/XAxis"))
        self.assertNotEqual(stage_seeds(3, "hmm", "02/A/XAxis"), stage_seeds(3, "hmm", "02/A/YAxis"))
        self.assertEqual(len(stage_seeds(0, "synergy", n=5)), 5)


class TestTrialRecovery(unittest.TestCase):
    def setUp(self):
        self._tmp = tempfile.TemporaryDirectory()
        self.root = Path(self._tmp.name)
        spec = SynthSpec(n_healthy=1, n_post_stroke=0, duration=2.0, conditions=[PoseCondition.A],
                         tasks=[TaskId.X_AXIS, TaskId.Y_AXIS])
        gen_cohort(spec, self.root / "data")
        self.manifest = str(self.root / "data" / MANIFEST_FILE)

    def tearDown(self):
        self._tmp.cleanup()

    def test_misaligned_trial_is_skipped(self):
        real = hmm_module.multi_restart_error

        def misaligned_y(trial, *args, **kwargs):
            if trial.task.task_id == TaskId.Y_AXIS:
                raise AlignmentError("game and EMG timelines do not overlap")
            return real(trial, *args, **kwargs)

        out = self.root / "out"
        with mock.patch("neuromotor.pipeline.multi_restart_error", side_effect=misaligned_y):
            code = main(["hmm", "--manifest", self.manifest, "--out", str(out), "--quiet", "--restarts", "2"])
        self.assertEqual(code, EXIT_OK)
        skipped = json.loads((out / "hmm" / "skipped.json").read_text(encoding="utf-8"))
        self.assertEqual([entry["trial"] for entry in skipped], ["02/A/YAxis"])
        self.assertIn("do not overlap", skipped[0]["reason"])
        reports = json.loads((out / "hmm" / "reports.json").read_text(encoding="utf-8"))
        self.assertEqual([report["trial"] for report in reports], ["02/A/XAxis"])


if __name__ == '__main__':
    unittest.main()
