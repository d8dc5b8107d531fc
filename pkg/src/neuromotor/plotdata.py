"""
Plot-ready tables. Nothing here renders; every function returns a DataFrame
that an analyst can feed to their plotting tool.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
import pandas as pd

from neuromotor.errors import AnalysisError
from neuromotor.hmm import HmmErrorReport
from neuromotor.metrics import ForceMetricsReport, box_stats

FORCE_BOX_METRICS = ("rmse", "impulse", "rms_average", "peak")
NONPRODUCTIVE_BOX_METRICS = ("rms_average", "peak", "variance", "rectified_variance")
FORCE_AXES_COLUMNS = ("participant", "cohort", "condition", "task", "axis", "productive", "mean", "variance")


@dataclass
class PlotInputs:
    force_reports: Optional[list[ForceMetricsReport]] = None
    hmm_reports: Optional[list[HmmErrorReport]] = None
    viterbi_paths: dict[str, pd.DataFrame] = field(default_factory=dict)
    traces: dict[str, pd.DataFrame] = field(default_factory=dict)


def box_table(frame: pd.DataFrame, by: list[str], value: str = "value") -> pd.DataFrame:
    """One box-plot row per group of ``by``; outliers are ';'-joined."""
    rows = []
    for keys, group in frame.groupby(by, sort=True):
        keys = keys if isinstance(keys, tuple) else (keys,)
        stats = box_stats(group[value].to_numpy())
        stats["outliers"] = ";".join(repr(x) for x in stats["outliers"])
        rows.append({**dict(zip(by, keys)), **stats})
    return pd.DataFrame(rows)


def force_box_table(reports: Iterable[ForceMetricsReport]) -> pd.DataFrame:
    """Per participant, condition and metric: box statistics over the force tasks."""
    long = [
        {
            "participant": r.participant, "cohort": r.cohort.value, "condition": r.condition.value,
            "metric": metric, "value": getattr(r, metric),
        }
        for r in reports for metric in FORCE_BOX_METRICS
    ]
    if not long:
        raise AnalysisError("no force-metric reports to summarize")
    return box_table(pd.DataFrame(long), ["participant", "cohort", "condition", "metric"])


def nonproductive_box_table(reports: Iterable[ForceMetricsReport]) -> pd.DataFrame:
    long = [
        {
            "participant": r.participant, "cohort": r.cohort.value, "condition": r.condition.value,
            "metric": metric, "value": getattr(axis, metric),
        }
        for r in reports for axis in r.nonproductive for metric in NONPRODUCTIVE_BOX_METRICS
    ]
    if not long:
        raise AnalysisError("no non-productive force data to summarize")
    return box_table(pd.DataFrame(long), ["participant", "cohort", "condition", "metric"])


def force_axes_table(reports: Iterable[ForceMetricsReport]) -> pd.DataFrame:
    """One row per trial and force axis: mean and variance of the rectified force."""
    rows = [
        {
            "participant": r.participant, "cohort": r.cohort.value, "condition": r.condition.value,
            "task": r.task, "axis": axis.channel, "productive": axis.productive,
            "mean": axis.mean, "variance": axis.variance,
        }
        for r in reports for axis in r.axes
    ]
    return pd.DataFrame(rows, columns=FORCE_AXES_COLUMNS)


def hmm_box_table(reports: Iterable[HmmErrorReport]) -> pd.DataFrame:
    """Per participant and condition: box statistics over every restart of every task."""
    long = [
        {"participant": r.participant, "cohort": r.cohort.value, "condition": r.condition.value, "value": e}
        for r in reports for e in r.errors
    ]
    if not long:
        raise AnalysisError("no HMM reports to summarize")
    return box_table(pd.DataFrame(long), ["participant", "cohort", "condition"])


def viterbi_frame(timestamps: np.ndarray, indices: np.ndarray, labels: np.ndarray,
                  paths: dict[int, np.ndarray]) -> pd.DataFrame:
    """Target subtask and each restart's decoded state at the compared samples."""
    frame = pd.DataFrame({"t": np.asarray(timestamps)[indices], "target_subtask": np.asarray(labels)})
    for seed in sorted(paths):
        frame[f"state_seed{seed}"] = np.asarray(paths[seed])[indices]
    return frame


def emit_plot_data(results: PlotInputs) -> dict[str, pd.DataFrame]:
    """Build every plot table available from ``results``, keyed by relative output path."""
    if not results.force_reports and not results.hmm_reports:
        raise AnalysisError("plot data needs metrics or hmm results")
    tables = {}
    if results.force_reports:
        tables["plot/force_box.csv"] = force_box_table(results.force_reports)
        if any(report.nonproductive for report in results.force_reports):
            tables["plot/nonproductive_box.csv"] = nonproductive_box_table(results.force_reports)
        tables["plot/force_axes.csv"] = force_axes_table(results.force_reports)
    if results.hmm_reports:
        tables["plot/hmm_box.csv"] = hmm_box_table(results.hmm_reports)
    for key, frame in sorted(results.traces.items()):
        tables[f"plot/traces/{key}.csv"] = frame
    for key, frame in sorted(results.viterbi_paths.items()):
        tables[f"plot/viterbi/{key}.csv"] = frame
    return tables
