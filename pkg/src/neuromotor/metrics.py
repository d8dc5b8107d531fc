"""
Force metrics for the seven force tasks.

Productive metrics (RMSE against the ideal force, impulse, RMS average, peak)
run on the task's productive axes; the same descriptors plus variance are
reported for every non-productive force axis. Torque is never analyzed here.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass
from typing import Iterable, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy.integrate import trapezoid

from neuromotor.core import (
    FORCE_CHANNELS,
    FORCE_TASKS,
    WRENCH_CHANNELS,
    Cohort,
    ParticipantInfo,
    PoseCondition,
    Trial,
    WrenchRecord,
    nonproductive_channels,
    productive_channels,
)
from neuromotor.errors import AnalysisError, ExcludedTaskError
from neuromotor.gamesync import AlignmentMap, IdealForceSeries

logger = logging.getLogger(__name__)

RmseMode = Literal["stacked", "norm-diff"]
AGGREGATED_METRICS = ("rmse", "impulse", "rms_average", "peak", "np_rms_average", "np_peak")


@dataclass(frozen=True, eq=False)
class ProductiveSeries:
    """Scalar productive force plus the per-axis components it was built from.

    ``values`` is the signed axis for single-axis tasks and the pointwise L2
    norm otherwise.
    """

    timestamps: np.ndarray
    values: np.ndarray
    components: np.ndarray
    channels: tuple[int, ...]


class NonProductiveAxis(BaseModel):
    channel: str
    rms_average: float = Field(ge=0)
    peak: float = Field(ge=0)
    impulse: float = Field(ge=0)
    variance: float = Field(ge=0, description="Variance of the signed, baseline-corrected series.")
    rectified_variance: float = Field(ge=0, description="Variance of |F|, for display.")
    rmse: Optional[float] = Field(default=None, ge=0, description="RMSE against a zero ideal.")


class AxisForceSummary(BaseModel):
    """Mean and variance of one rectified force axis over the trial."""

    channel: str
    productive: bool
    mean: float = Field(ge=0, description="Mean of |F| in newtons.")
    variance: float = Field(ge=0, description="Variance of |F| in newtons squared.")


class ForceMetricsReport(BaseModel):
    trial: str
    participant: str
    cohort: Cohort
    condition: PoseCondition
    task: str
    rmse: Optional[float] = Field(default=None, ge=0, description="Newtons; force tasks only.")
    impulse: float = Field(ge=0, description="Newton-seconds.")
    rms_average: float = Field(ge=0)
    peak: float = Field(ge=0)
    nonproductive: list[NonProductiveAxis] = Field(default_factory=list)
    axes: list[AxisForceSummary] = Field(default_factory=list)

    @property
    def np_rms_average(self) -> float:
        if not self.nonproductive:
            return float("nan")
        return float(np.mean([axis.rms_average for axis in self.nonproductive]))

    @property
    def np_peak(self) -> float:
        if not self.nonproductive:
            return float("nan")
        return float(np.mean([axis.peak for axis in self.nonproductive]))


class ParticipantAggregate(BaseModel):
    participant: str
    cohort: Cohort
    condition: PoseCondition
    mean: dict[str, float]
    sd: dict[str, float]


class CohortAggregate(BaseModel):
    rows: list[ParticipantAggregate] = Field(default_factory=list)

    def values(self, metric: str, condition: PoseCondition | str, cohort: Cohort | str) -> np.ndarray:
        """Per-participant task means for one metric, ordered by participant id."""
        condition, cohort = PoseCondition(condition), Cohort(cohort)
        return np.array([
            row.mean[metric] for row in self.rows
            if row.condition == condition and row.cohort == cohort
        ])

    def conditions(self) -> list[PoseCondition]:
        return sorted({row.condition for row in self.rows}, key=lambda c: c.value)


def _require_force_task(trial: Trial) -> None:
    if not trial.task.is_force_task:
        raise ExcludedTaskError(f"{trial.key}: torque task is excluded from force metrics")


def productive_series(trial: Trial, corrected: WrenchRecord) -> ProductiveSeries:
    _require_force_task(trial)
    channels = trial.task.input_channels
    components = corrected.values[:, list(channels)]
    if len(channels) == 1:
        values = components[:, 0].copy()
    else:
        values = np.linalg.norm(components, axis=1)
    return ProductiveSeries(
        timestamps=corrected.timestamps, values=values, components=components, channels=channels
    )


def force_rmse(measured: ProductiveSeries, ideal: IdealForceSeries, alignment: AlignmentMap,
               mode: RmseMode = "stacked") -> float:
    """RMSE over aligned pairs.

    ``stacked`` pools the per-axis residuals; ``norm-diff`` compares the
    productive series against the norm of the ideal force.
    """
    if alignment.n_matched == 0:
        raise AnalysisError("RMSE needs at least one aligned pair")
    target = ideal.corrected()[alignment.game_indices]
    if mode == "stacked":
        residual = measured.components[alignment.sensor_indices] - target
    elif mode == "norm-diff":
        reference = target[:, 0] if target.shape[1] == 1 else np.linalg.norm(target, axis=1)
        residual = measured.values[alignment.sensor_indices] - reference
    else:
        raise AnalysisError(f"unknown RMSE mode {mode!r}")
    return float(np.sqrt(np.mean(residual**2)))


def impulse(values, timestamps) -> float:
    values = np.asarray(values, dtype=float)
    if values.size < 2:
        raise AnalysisError("impulse needs at least two samples")
    return float(trapezoid(np.abs(values), np.asarray(timestamps, dtype=float)))


def rms_average(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise AnalysisError("RMS of an empty series")
    return float(np.sqrt(np.mean(values**2)))


def peak(values) -> float:
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        raise AnalysisError("peak of an empty series")
    return float(np.max(np.abs(values)))


def nonproductive_profile(trial: Trial, corrected: WrenchRecord, alignment: Optional[AlignmentMap] = None,
                          exclude: Iterable[int] = ()) -> list[NonProductiveAxis]:
    """Descriptors of every non-productive force axis not listed in ``exclude``."""
    _require_force_task(trial)
    exclude = set(exclude)
    profile = []
    for channel in nonproductive_channels(trial.task):
        if channel in exclude:
            continue
        series = corrected.values[:, channel]
        rmse = None
        if alignment is not None and alignment.n_matched:
            rmse = rms_average(series[alignment.sensor_indices])
        profile.append(NonProductiveAxis(
            channel=WRENCH_CHANNELS[channel],
            rms_average=rms_average(series),
            peak=peak(series),
            impulse=impulse(series, corrected.timestamps),
            variance=float(np.var(series)),
            rectified_variance=float(np.var(np.abs(series))),
            rmse=rmse,
        ))
    return profile


def rectified_axis_summary(trial: Trial, corrected: WrenchRecord,
                           exclude: Iterable[int] = ()) -> list[AxisForceSummary]:
    """Mean and variance of |F| on every force axis not listed in ``exclude``."""
    _require_force_task(trial)
    exclude = set(exclude)
    productive = productive_channels(trial.task)
    summary = []
    for channel in FORCE_CHANNELS:
        if channel in exclude:
            continue
        rectified = np.abs(corrected.values[:, channel])
        summary.append(AxisForceSummary(
            channel=WRENCH_CHANNELS[channel],
            productive=channel in productive,
            mean=float(np.mean(rectified)),
            variance=float(np.var(rectified)),
        ))
    return summary


def trial_metrics(trial: Trial, corrected: WrenchRecord, ideal: IdealForceSeries,
                  alignment: AlignmentMap, mode: RmseMode = "stacked",
                  unavailable: Iterable[int] = ()) -> ForceMetricsReport:
    """Productive and non-productive metrics of one force trial.

    ``unavailable`` lists force channels without a baseline offset; they are
    left out of the non-productive profile and the per-axis summary.
    """
    measured = productive_series(trial, corrected)
    return ForceMetricsReport(
        trial=trial.key,
        participant=trial.participant.id,
        cohort=trial.participant.cohort,
        condition=trial.condition,
        task=trial.task.task_id.value,
        rmse=force_rmse(measured, ideal, alignment, mode),
        impulse=impulse(measured.values, measured.timestamps),
        rms_average=rms_average(measured.values),
        peak=peak(measured.values),
        nonproductive=nonproductive_profile(trial, corrected, alignment, unavailable),
        axes=rectified_axis_summary(trial, corrected, unavailable),
    )


def aggregate_cohorts(reports: Iterable[ForceMetricsReport],
                      participants: Optional[Iterable[ParticipantInfo]] = None) -> CohortAggregate:
    """Mean and sample SD over the seven force tasks, per participant and condition."""
    grouped = defaultdict(dict)
    cohorts = {info.id: info.cohort for info in participants or ()}
    for report in reports:
        group = grouped[(report.participant, report.condition)]
        if report.task in group:
            raise AnalysisError(f"duplicate report for {report.trial}")
        group[report.task] = report
        cohorts.setdefault(report.participant, report.cohort)

    required = {task.value for task in FORCE_TASKS}
    rows = []
    for (participant, condition), by_task in sorted(grouped.items(), key=lambda item: (item[0][0], item[0][1].value)):
        missing = sorted(required - set(by_task))
        if missing:
            raise AnalysisError(f"{participant}/{condition.value}: missing force-task reports {missing}")
        ordered = [by_task[task] for task in sorted(required)]
        mean, sd = {}, {}
        for metric in AGGREGATED_METRICS:
            values = np.array([getattr(report, metric) for report in ordered], dtype=float)
            mean[metric] = float(np.mean(values))
            sd[metric] = float(np.std(values, ddof=1))
        rows.append(ParticipantAggregate(
            participant=participant, cohort=cohorts[participant], condition=condition, mean=mean, sd=sd
        ))
    return CohortAggregate(rows=rows)


def box_stats(values) -> dict:
    """Box-plot summary: quartiles, whiskers at the most extreme data within 1.5 IQR, outliers."""
    data = np.sort(np.asarray(values, dtype=float))
    if data.size == 0:
        raise AnalysisError("box statistics of an empty sample")
    q1, median, q3 = np.percentile(data, [25, 50, 75])
    iqr = q3 - q1
    inside = data[(data >= q1 - 1.5 * iqr) & (data <= q3 + 1.5 * iqr)]
    outliers = data[(data < q1 - 1.5 * iqr) | (data > q3 + 1.5 * iqr)]
    return {
        "n": int(data.size),
        "median": float(median),
        "q1": float(q1),
        "q3": float(q3),
        "whisker_low": float(inside.min()),
        "whisker_high": float(inside.max()),
        "outliers": [float(x) for x in outliers],
    }


def reports_to_frame(reports: Iterable[ForceMetricsReport]) -> pd.DataFrame:
    rows = []
    for report in sorted(reports, key=lambda r: r.trial):
        row = {
            "trial": report.trial,
            "participant": report.participant,
            "cohort": report.cohort.value,
            "condition": report.condition.value,
            "task": report.task,
            "rmse": report.rmse,
            "impulse": report.impulse,
            "rms_average": report.rms_average,
            "peak": report.peak,
        }
        for axis in report.nonproductive:
            for field in ("rms_average", "peak", "impulse", "variance", "rectified_variance", "rmse"):
                row[f"np_{axis.channel}_{field}"] = getattr(axis, field)
        rows.append(row)
    return pd.DataFrame(rows)
