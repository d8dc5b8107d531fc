"""
Stage orchestration for ``neuromotor analyze`` and the per-stage subcommands.

Stages register themselves with :func:`stage` and are described in
``config/stages.yaml``. A stage that was not selected but is listed in the
``context`` of a selected one is read back from the output directory when its
first listed output exists there, and run otherwise.
"""

from __future__ import annotations

import hashlib
import json
import logging
import zlib
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Callable, Optional

import numpy as np
import pandas as pd
from tqdm import tqdm

from neuromotor import __version__
from neuromotor.core import EMG_CHANNELS, FORCE_TASKS, EmgRecord, Trial
from neuromotor.dsp import (
    EnvelopeSpec,
    FilterSpec,
    baseline_correct_forces,
    preprocess_participant,
    trim_to_game_window,
)
from neuromotor.errors import (
    AlignmentError,
    AnalysisError,
    ConfigError,
    IngestError,
    NeuromotorError,
    SignalError,
)
from neuromotor.gamesync import (
    OffsetEstimate,
    align_nearest,
    derive_subtasks,
    estimate_offsets,
    ideal_force,
    labels_at,
    tracking_traces,
)
from neuromotor.hmm import HmmErrorReport, multi_restart_error
from neuromotor.ingest import (
    CSV_FLOAT_FORMAT,
    DatasetManifest,
    load_manifest,
    load_trial,
    read_series_csv,
    validate_dataset,
    write_series_csv,
)
from neuromotor.metrics import (
    CohortAggregate,
    ForceMetricsReport,
    aggregate_cohorts,
    reports_to_frame,
    trial_metrics,
)
from neuromotor.plotdata import PlotInputs, emit_plot_data, force_box_table, viterbi_frame
from neuromotor.settings import STAGE_ORDER, RunConfig, load_stage_catalog
from neuromotor.stats import comparisons_to_frame, results_table
from neuromotor.synergy import cluster_procedure, segment_by_subtask, vaf_curve

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ANALYSIS = 1
EXIT_INPUT = 2

INDEX_FILE = "index.json"
RUN_CONFIG_FILE = "run_config.json"

_STAGES: dict[str, Callable[["AnalysisPipeline"], None]] = {}


def stage(name: str):
    """Register a pipeline method as the implementation of stage ``name``."""
    def register(method):
        _STAGES[name] = method
        return method
    return register


def stage_seeds(seed: int, *keys, n: int = 1) -> list[int]:
    """Independent 32-bit seeds derived from the run seed and a stable key path."""
    entropy = [int(seed)] + [zlib.crc32(str(key).encode("utf-8")) for key in keys]
    return [int(value) for value in np.random.SeedSequence(entropy).generate_state(n)]


def _group_name(trial: Trial) -> str:
    return f"{trial.participant.id}/{trial.condition.value}"


class ArtifactWriter:
    """Writes every artifact under one root and indexes them by content hash."""

    def __init__(self, root: Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, relative: str) -> Path:
        target = self.root / relative
        target.parent.mkdir(parents=True, exist_ok=True)
        return target

    def exists(self, relative: str) -> bool:
        return (self.root / relative).is_file()

    def json(self, relative: str, payload: Any) -> Path:
        target = self.path(relative)
        with open(target, "w", encoding="utf-8", newline="\n") as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)
            handle.write("\n")
        return target

    def frame(self, relative: str, frame: pd.DataFrame) -> Path:
        target = self.path(relative)
        frame.to_csv(target, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
        return target

    def series(self, relative: str, series) -> Path:
        return write_series_csv(series, self.path(relative))

    def read_json(self, relative: str, stage_name: str) -> Any:
        if not self.exists(relative):
            raise AnalysisError(f"{relative} is missing; run the {stage_name} stage first")
        with open(self.root / relative, "r", encoding="utf-8") as handle:
            return json.load(handle)

    def read_frame(self, relative: str) -> pd.DataFrame:
        return pd.read_csv(self.root / relative, float_precision="round_trip")

    def write_index(self, stages: Optional[dict[str, str]] = None, failure: Optional[dict] = None) -> str:
        """Hash every file under the root and record how far the run got.

        Args:
            stages: Planned stage names mapped to "ok", "failed" or "pending".
            failure: The failing stage and its error message, if any.

        Returns:
            The index hash, which covers file paths and digests only.
        """
        entries = []
        for path in sorted(p for p in self.root.rglob("*") if p.is_file()):
            relative = path.relative_to(self.root).as_posix()
            if relative == INDEX_FILE:
                continue
            digest = hashlib.sha256(path.read_bytes()).hexdigest()
            entries.append({"path": relative, "sha256": digest, "bytes": path.stat().st_size})
        joined = "".join(f"{e['path']}\t{e['sha256']}\n" for e in entries)
        index_hash = hashlib.sha256(joined.encode("utf-8")).hexdigest()
        stages = dict(stages or {})
        self.json(INDEX_FILE, {
            "files": entries,
            "index_hash": index_hash,
            "stages": stages,
            "complete": failure is None and all(status == "ok" for status in stages.values()),
            "failure": failure,
        })
        return index_hash


class AnalysisPipeline:
    """
    Runs the selected stages of one configuration against one output directory.

    Intermediate results are kept in memory while a run lasts, so downstream
    stages only read cached files for stages that did not run.
    """

    def __init__(self, config: RunConfig, quiet: bool = False):
        if config.manifest is None:
            raise ConfigError("a dataset manifest is required")
        if config.out is None:
            raise ConfigError("an output directory is required")
        self.config = config
        self.quiet = quiet
        self.catalog = load_stage_catalog()
        self.writer = ArtifactWriter(config.out)
        self.workers = config.resolved_workers()
        self.status: dict[str, str] = {}
        self.index_hash: Optional[str] = None

        self._manifest: Optional[DatasetManifest] = None
        self._trials: Optional[dict[str, Trial]] = None
        self.envelopes: Optional[dict[str, EmgRecord]] = None
        self.offsets: Optional[dict[str, OffsetEstimate]] = None
        self.force_reports: Optional[list[ForceMetricsReport]] = None
        self.aggregate: Optional[CohortAggregate] = None
        self.hmm_reports: Optional[list[HmmErrorReport]] = None
        self.viterbi_paths: Optional[dict[str, pd.DataFrame]] = None

    # -- planning ---------------------------------------------------------

    def _marker(self, name: str) -> str:
        return self.catalog[name]["outputs"][0]

    def plan(self) -> list[str]:
        """Selected stages plus any uncached stage they depend on, in run order."""
        needed = set(self.config.stages)
        pending = list(self.config.stages)
        while pending:
            name = pending.pop()
            for dependency in self.catalog[name].get("context") or []:
                if dependency in needed or self.writer.exists(self._marker(dependency)):
                    continue
                logger.info("Stage %s needs %s, which has no cached outputs; running it", name, dependency)
                needed.add(dependency)
                pending.append(dependency)
        return [name for name in STAGE_ORDER if name in needed]

    def run(self) -> str:
        """Run the plan and write ``index.json``; returns the index hash."""
        plan = self.plan()
        provenance = dict(self.config.provenance(), version=__version__, plan=plan)
        self.writer.json(RUN_CONFIG_FILE, provenance)
        self.status = {name: "pending" for name in plan}
        failure = None
        try:
            for name in plan:
                logger.info("Stage %s started", name)
                try:
                    _STAGES[name](self)
                except Exception as exc:
                    self.status[name] = "failed"
                    failure = {"stage": name, "error": str(exc) or type(exc).__name__}
                    raise
                self.status[name] = "ok"
                logger.info("Stage %s finished", name)
        finally:
            self.index_hash = self.writer.write_index(self.status, failure)
        return self.index_hash

    # -- shared inputs ----------------------------------------------------

    def _map(self, func: Callable, items, desc: str) -> list:
        """Apply ``func`` to ``items`` on the worker pool; results keep input order."""
        items = list(items)
        if self.workers == 1 or len(items) < 2:
            return [func(item) for item in tqdm(items, desc=desc, disable=self.quiet)]
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            return list(tqdm(pool.map(func, items), total=len(items), desc=desc, disable=self.quiet))

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            self._manifest = load_manifest(self.config.manifest)
        return self._manifest

    def trials(self) -> dict[str, Trial]:
        if self._trials is None:
            entries = sorted(self.manifest.trials, key=lambda entry: entry.key)
            loaded = self._map(lambda entry: load_trial(self.manifest, entry), entries, "load")
            self._trials = {trial.key: trial for trial in loaded}
        return self._trials

    def _cached_envelopes(self) -> dict[str, EmgRecord]:
        if self.envelopes is None:
            envelopes = {}
            for key in sorted(self.trials()):
                relative = f"dsp/{key}.emg.proc.csv"
                if not self.writer.exists(relative):
                    raise AnalysisError(f"{relative} is missing; run the dsp stage first")
                envelopes[key] = read_series_csv(self.writer.root / relative, EmgRecord)
            self.envelopes = envelopes
        return self.envelopes

    def _cached_offsets(self) -> dict[str, OffsetEstimate]:
        if self.offsets is None:
            payload = self.writer.read_json("sync/offsets.json", "sync")
            self.offsets = {
                name: OffsetEstimate.model_validate(entry)
                for name, entry in payload.items() if "error" not in entry
            }
        return self.offsets

    def _cached_force_reports(self, required: bool = True) -> Optional[list[ForceMetricsReport]]:
        if self.force_reports is None:
            if not required and not self.writer.exists("metrics/reports.json"):
                return None
            payload = self.writer.read_json("metrics/reports.json", "metrics")
            self.force_reports = [ForceMetricsReport.model_validate(entry) for entry in payload]
        return self.force_reports

    def _cached_aggregate(self) -> CohortAggregate:
        if self.aggregate is None:
            payload = self.writer.read_json("metrics/aggregate.json", "metrics")
            self.aggregate = CohortAggregate.model_validate({"rows": payload["rows"]})
        return self.aggregate

    def _cached_hmm(self) -> tuple[Optional[list[HmmErrorReport]], dict[str, pd.DataFrame]]:
        if self.hmm_reports is None:
            if not self.writer.exists("hmm/reports.json"):
                return None, {}
            payload = self.writer.read_json("hmm/reports.json", "hmm")
            self.hmm_reports = [HmmErrorReport.model_validate(entry) for entry in payload]
            paths = {}
            for report in self.hmm_reports:
                relative = f"hmm/paths/{report.trial}.csv"
                if self.writer.exists(relative):
                    paths[report.trial] = self.writer.read_frame(relative)
            self.viterbi_paths = paths
        return self.hmm_reports, self.viterbi_paths or {}

    # -- stages -----------------------------------------------------------

    @stage("validate")
    def validate(self) -> None:
        report = validate_dataset(self.manifest)
        self.writer.json("validation.json", dict(report.model_dump(mode="json"), passed=report.passed))
        for issue in report.issues:
            log = logger.error if issue.severity == "error" else logger.warning
            log("%s: %s", issue.location, issue.message)
        if not report.passed:
            raise AnalysisError(f"dataset validation failed with {len(report.errors)} error(s)")

    @stage("dsp")
    def dsp(self) -> None:
        trials = self.trials()
        filter_spec = FilterSpec(
            low_hz=self.config.filter.low_hz,
            high_hz=self.config.filter.high_hz,
            order=self.config.filter.order,
            causal=self.config.filter.causal,
        )
        envelope_spec = EnvelopeSpec(window=self.config.envelope.rms_window)
        by_participant = defaultdict(dict)
        for key, trial in trials.items():
            by_participant[trial.participant.id][key] = trial

        def preprocess(participant_id: str):
            group = by_participant[participant_id]
            return participant_id, preprocess_participant(
                {key: trial.emg for key, trial in group.items()},
                {key: (trial.game_start, trial.game_end) for key, trial in group.items()},
                filter_spec,
                envelope_spec,
            )

        self.envelopes = {}
        maxima = {}
        for participant_id, normalized in self._map(preprocess, sorted(by_participant), "dsp"):
            maxima[participant_id] = dict(zip(EMG_CHANNELS, (float(m) for m in normalized.maxima)))
            self.envelopes.update(normalized.envelopes)
        for key in sorted(self.envelopes):
            self.writer.series(f"dsp/{key}.emg.proc.csv", self.envelopes[key])
        self.writer.json("dsp/maxima.json", maxima)

    @stage("sync")
    def sync(self) -> None:
        trials = self.trials()
        threshold = self.config.sync.align_threshold
        groups = defaultdict(list)
        for trial in trials.values():
            groups[_group_name(trial)].append(trial)

        def estimate(name: str):
            try:
                return name, estimate_offsets(groups[name], threshold=threshold), None
            except (AnalysisError, AlignmentError, SignalError) as exc:
                return name, None, str(exc)

        self.offsets, payload = {}, {}
        for name, result, error in self._map(estimate, sorted(groups), "sync"):
            if result is None:
                logger.warning("No offsets for %s: %s", name, error)
                payload[name] = {"error": error}
            else:
                self.offsets[name] = result
                payload[name] = result.model_dump(mode="json")
        self.writer.json("sync/offsets.json", payload)

        coverage = {}
        for key in sorted(trials):
            trial = trials[key]
            coverage[key] = {}
            for kind in ("wrench", "emg"):
                try:
                    coverage[key][kind] = align_nearest(trial.game, getattr(trial, kind), threshold).coverage()
                except AlignmentError as exc:
                    coverage[key][kind] = {"error": str(exc)}
        self.writer.json("sync/coverage.json", coverage)
        if not self.offsets:
            raise AnalysisError("offsets could not be estimated for any participant and condition")

    @stage("metrics")
    def metrics(self) -> None:
        offsets = self._cached_offsets()
        threshold = self.config.sync.align_threshold
        mode = self.config.metrics.rmse_mode
        force_trials = [trial for _, trial in sorted(self.trials().items()) if trial.task.is_force_task]
        ready = [trial for trial in force_trials if _group_name(trial) in offsets]
        for trial in force_trials:
            if _group_name(trial) not in offsets:
                logger.warning("Skipping %s: no offsets for %s", trial.key, _group_name(trial))

        def measure(trial: Trial) -> Optional[ForceMetricsReport]:
            estimate = offsets[_group_name(trial)]
            try:
                wrench = trim_to_game_window(trial.wrench, trial.game_start, trial.game_end)
                corrected = baseline_correct_forces(wrench, estimate)
                alignment = align_nearest(trial.game, corrected, threshold)
                ideal = ideal_force(trial.task, trial.game, trial.scaling_factor, estimate)
                return trial_metrics(trial, corrected, ideal, alignment, mode, estimate.unavailable_channels)
            except (AnalysisError, AlignmentError, SignalError) as exc:
                logger.warning("Skipping %s: %s", trial.key, exc)
                return None

        reports = [report for report in self._map(measure, ready, "metrics") if report is not None]
        if not reports:
            raise AnalysisError("no force-task trial could be measured")
        self.force_reports = reports

        by_group = defaultdict(set)
        for report in reports:
            by_group[(report.participant, report.condition.value)].add(report.task)
        required = {task.value for task in FORCE_TASKS}
        incomplete = sorted(f"{p}/{c}" for (p, c), tasks in by_group.items() if not required <= tasks)
        for name in incomplete:
            logger.warning("Not aggregating %s: some force tasks are missing", name)
        complete = [r for r in reports if f"{r.participant}/{r.condition.value}" not in incomplete]
        self.aggregate = aggregate_cohorts(complete, self.manifest.participants)

        self.writer.json("metrics/reports.json", [report.model_dump(mode="json") for report in reports])
        self.writer.frame("metrics/trials.csv", reports_to_frame(reports))
        self.writer.json("metrics/aggregate.json", dict(self.aggregate.model_dump(mode="json"), incomplete=incomplete))
        self.writer.frame("metrics/box_stats.csv", force_box_table(reports))

    @stage("synergy")
    def synergy(self) -> None:
        settings = self.config.synergy
        envelopes = self._cached_envelopes()
        trials = self.trials()

        def decompose(key: str):
            E = envelopes[key].values.T
            seeds = stage_seeds(self.config.seed, "synergy", key, n=settings.restarts)
            curve = vaf_curve(E, seeds, settings.max_k, settings.max_iter, settings.tol,
                              settings.vaf_threshold, settings.vaf_increment)
            return key, curve, self._segment_counts(trials[key], envelopes[key], E)

        curves, segment_rows = {}, []
        for key, curve, rows in self._map(decompose, sorted(envelopes), "synergy"):
            curves[key] = curve
            segment_rows.extend(rows)

        vaf_rows, osc_rows = [], []
        for key, curve in curves.items():
            trial = trials[key]
            ident = {
                "trial": key, "participant": trial.participant.id, "cohort": trial.participant.cohort.value,
                "condition": trial.condition.value, "task": trial.task.task_id.value,
            }
            for k, value in enumerate(curve.values, start=1):
                vaf_rows.append(dict(ident, k=k, vaf=float(value)))
            best = curve.best()
            osc_rows.append(dict(ident, osc=curve.optimal_k, saturated=curve.saturated,
                                 converged=all(d.converged for d in curve.decompositions)))
            labels = [f"s{i + 1}" for i in range(best.k)]
            W = pd.DataFrame(best.W, columns=labels)
            W.insert(0, "muscle", list(envelopes[key].channel_labels))
            H = pd.DataFrame(best.H.T, columns=labels)
            H.insert(0, "t", envelopes[key].timestamps)
            self.writer.frame(f"synergy/W/{key}.csv", W)
            self.writer.frame(f"synergy/H/{key}.csv", H)

        self.writer.frame("synergy/osc.csv", pd.DataFrame(osc_rows))
        self.writer.frame("synergy/vaf_curves.csv", pd.DataFrame(vaf_rows))
        self.writer.frame("synergy/segments.csv", pd.DataFrame(
            segment_rows, columns=["trial", "mode", "subtask", "segment", "n_samples", "osc", "saturated"]
        ))

        by_participant = defaultdict(dict)
        for key in sorted(curves):
            trial = trials[key]
            slot = f"{trial.condition.value}/{trial.task.task_id.value}"
            by_participant[trial.participant.id][slot] = curves[key].best()
        kmeans_seeds = stage_seeds(self.config.seed, "kmeans", n=settings.kmeans_restarts)
        clusters = {}
        for procedure in settings.procedures:
            result = cluster_procedure(procedure, by_participant, settings.clusters, kmeans_seeds,
                                       settings.top_n, settings.kmeans_max_iter)
            clusters[f"procedure_{procedure}"] = {str(k): a.to_dict() for k, a in sorted(result.items())}
        self.writer.json("synergy/clusters.json", clusters)

    def _segment_counts(self, trial: Trial, env: EmgRecord, E: np.ndarray) -> list[dict]:
        """Optimal synergy counts per subtask segment of a single-axis trial."""
        if not trial.task.is_single_axis:
            return []
        settings = self.config.synergy
        try:
            subtasks = derive_subtasks(trial.task, trial.game, epsilon_frac=self.config.sync.epsilon_frac)
        except AnalysisError as exc:
            logger.warning("No subtask segmentation for %s: %s", trial.key, exc)
            return []
        rows = []
        labels = labels_at(subtasks, env.timestamps)
        for segment in segment_by_subtask(E, labels, settings.segment_mode):
            seeds = stage_seeds(self.config.seed, "segment", trial.key, segment.label, segment.index,
                                n=settings.restarts)
            try:
                curve = vaf_curve(segment.E, seeds, settings.max_k, settings.max_iter, settings.tol,
                                  settings.vaf_threshold, settings.vaf_increment)
            except AnalysisError as exc:
                logger.debug("Skipping segment %d/%d of %s: %s", segment.label, segment.index, trial.key, exc)
                continue
            rows.append({
                "trial": trial.key, "mode": settings.segment_mode, "subtask": segment.label,
                "segment": segment.index, "n_samples": int(segment.E.shape[1]),
                "osc": curve.optimal_k, "saturated": curve.saturated,
            })
        return rows

    @stage("hmm")
    def hmm(self) -> None:
        settings = self.config.hmm
        envelopes = self._cached_envelopes()
        trials = self.trials()
        keys = [key for key in sorted(envelopes) if trials[key].task.is_single_axis]
        if not keys:
            raise AnalysisError("the dataset has no single-axis trials for HMM analysis")

        def fit(key: str):
            base_seed = stage_seeds(self.config.seed, "hmm", key)[0]
            try:
                report, restarts = multi_restart_error(
                    trials[key], envelopes[key], settings.restarts, base_seed, settings.max_iter,
                    settings.tol, settings.variance_floor, settings.covariance, settings.decimate,
                    epsilon_frac=self.config.sync.epsilon_frac,
                )
            except (AnalysisError, AlignmentError, SignalError) as exc:
                logger.warning("HMM skipped for %s: %s", key, exc)
                return key, str(exc), []
            return key, report, restarts

        reports, error_rows, paths, skipped = [], [], {}, []
        for key, report, restarts in self._map(fit, keys, "hmm"):
            if isinstance(report, str):
                skipped.append({"trial": key, "reason": report})
                continue
            reports.append(report)
            for restart in restarts:
                error_rows.append({
                    "trial": key, "participant": report.participant, "cohort": report.cohort.value,
                    "condition": report.condition.value, "task": report.task, "seed": restart.seed,
                    "error": restart.error, "converged": restart.model.converged,
                    "n_iter": restart.model.n_iter, "log_likelihood": restart.model.loglik_trace[-1],
                })
            timestamps = envelopes[key].timestamps[::settings.decimate]
            first = restarts[0]
            paths[key] = viterbi_frame(
                timestamps, first.sample_indices, first.subtask_labels,
                {restart.seed: restart.path.states for restart in restarts},
            )
        if not reports:
            raise AnalysisError("no single-axis trial produced an HMM fit")

        self.hmm_reports, self.viterbi_paths = reports, paths
        self.writer.json("hmm/reports.json", [report.model_dump(mode="json") for report in reports])
        self.writer.frame("hmm/errors.csv", pd.DataFrame(error_rows))
        self.writer.json("hmm/skipped.json", skipped)
        for key, frame in sorted(paths.items()):
            self.writer.frame(f"hmm/paths/{key}.csv", frame)

    @stage("stats")
    def stats(self) -> None:
        comparisons = results_table(self._cached_aggregate())
        if not comparisons:
            logger.warning("No cohort comparison has two or more participants per cohort; writing empty tables")
        self.writer.json("stats/results.json", [c.model_dump(mode="json") for c in comparisons])
        self.writer.frame("stats/results.csv", comparisons_to_frame(comparisons))

    @stage("plot-data")
    def plot_data(self) -> None:
        hmm_reports, viterbi_paths = self._cached_hmm()
        traces = {key: tracking_traces(trial) for key, trial in sorted(self.trials().items())}
        inputs = PlotInputs(
            force_reports=self._cached_force_reports(required=False),
            hmm_reports=hmm_reports,
            viterbi_paths=viterbi_paths,
            traces=traces,
        )
        for relative, frame in emit_plot_data(inputs).items():
            self.writer.frame(relative, frame)


def run_pipeline(config: RunConfig, quiet: bool = False) -> int:
    """Run a configuration end to end and map failures to exit codes.

    Args:
        config: Resolved run configuration.
        quiet: Suppress progress bars.

    Returns:
        0 on success, 1 when an analysis stage or validation fails, 2 for bad
        configuration or unreadable input.
    """
    try:
        pipeline = AnalysisPipeline(config, quiet=quiet)
        index_hash = pipeline.run()
    except (ConfigError, IngestError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    except NeuromotorError as exc:
        logger.error("%s", exc)
        return EXIT_ANALYSIS
    except OSError as exc:
        logger.error("I/O failure: %s", exc)
        return EXIT_INPUT
    logger.info("Wrote %s (index %s)", config.out, index_hash[:12])
    return EXIT_OK
