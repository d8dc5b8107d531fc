"""
Game/sensor synchronization and the ideal-force model.

The game maps a productive force F (newtons) to avatar velocity through a
constant scaling factor k, ``v = k * (F - b)``, where b is a constant per-axis
sensor offset. Inverting the map on the target's velocity gives the force that
would have tracked the target exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field

from neuromotor.core import (
    FORCE_CHANNELS,
    GAME_X,
    GAME_Y,
    WRENCH_CHANNELS,
    GameTrace,
    SampledSeries,
    SubtaskSequence,
    TaskSpec,
    Trial,
)
from neuromotor.errors import AlignmentError, AnalysisError, ExcludedTaskError, SignalError

logger = logging.getLogger(__name__)

DEFAULT_THRESHOLD = 0.001
DEFAULT_EPSILON_FRAC = 0.02


@dataclass(frozen=True, eq=False)
class AlignmentMap:
    """Retained game/sensor index pairs; everything beyond ``threshold`` is counted, not kept."""

    game_indices: np.ndarray
    sensor_indices: np.ndarray
    gaps: np.ndarray
    threshold: float
    n_game: int

    @property
    def n_matched(self) -> int:
        return int(self.game_indices.size)

    @property
    def n_unmatched(self) -> int:
        return self.n_game - self.n_matched

    def coverage(self) -> dict:
        return {
            "n_game": self.n_game,
            "matched": self.n_matched,
            "unmatched": self.n_unmatched,
            "max_gap": float(self.gaps.max()) if self.gaps.size else None,
            "threshold": self.threshold,
        }


OptionalAxes = tuple[Optional[float], Optional[float], Optional[float]]


class OffsetEstimate(BaseModel):
    participant: str
    condition: str
    offsets: OptionalAxes = Field(
        description="Constant (bx, by, bz) in newtons; None where no task made the axis productive."
    )
    residual_rms: OptionalAxes = Field(description="RMS of F - v/k - b per axis.")
    sample_counts: tuple[int, int, int] = Field(description="Aligned samples used per axis.")

    @property
    def unavailable_channels(self) -> tuple[int, ...]:
        return tuple(c for c, b in zip(FORCE_CHANNELS, self.offsets) if b is None)

    def offset(self, channel: int) -> float:
        value = self.offsets[FORCE_CHANNELS.index(channel)]
        if value is None:
            raise AnalysisError(
                f"no offset for {WRENCH_CHANNELS[channel]} in {self.participant}/{self.condition}: "
                "no task of that group makes it productive"
            )
        return value


def offset_vector(offsets) -> np.ndarray:
    """(bx, by, bz) as floats, NaN where an offset is unavailable."""
    values = getattr(offsets, "offsets", offsets)
    return np.array([np.nan if b is None else b for b in values], dtype=float)


@dataclass(frozen=True, eq=False)
class IdealForceSeries:
    """Ideal productive forces on the game timeline, one column per productive channel."""

    timestamps: np.ndarray
    values: np.ndarray
    channels: tuple[int, ...]
    offsets: tuple[float, ...]

    def corrected(self) -> np.ndarray:
        """Ideal force with the offsets removed, i.e. v_target / k."""
        return self.values - np.asarray(self.offsets)

    @property
    def channel_labels(self) -> tuple[str, ...]:
        return tuple(WRENCH_CHANNELS[c] for c in self.channels)


def align_nearest(game, sensor, threshold: float = DEFAULT_THRESHOLD) -> AlignmentMap:
    """Match every game sample to the nearest sensor sample within ``threshold`` seconds."""
    t_game = np.asarray(game.timestamps, dtype=float)
    t_sensor = np.asarray(sensor.timestamps, dtype=float)
    if t_game.size == 0 or t_sensor.size == 0:
        raise AlignmentError("cannot align an empty series")

    right = np.clip(np.searchsorted(t_sensor, t_game), 0, t_sensor.size - 1)
    left = np.clip(right - 1, 0, t_sensor.size - 1)
    gap_right = np.abs(t_sensor[right] - t_game)
    gap_left = np.abs(t_sensor[left] - t_game)
    nearest = np.where(gap_left <= gap_right, left, right)
    gaps = np.abs(t_sensor[nearest] - t_game)

    keep = gaps <= threshold
    if not keep.any():
        raise AlignmentError(
            f"no game sample lies within {threshold * 1000:g} ms of a sensor sample "
            f"(closest gap {gaps.min() * 1000:.3g} ms)"
        )
    return AlignmentMap(
        game_indices=np.flatnonzero(keep),
        sensor_indices=nearest[keep],
        gaps=gaps[keep],
        threshold=threshold,
        n_game=t_game.size,
    )


def _velocity(game: GameTrace, columns: slice, labels: tuple[str, str]) -> SampledSeries:
    if game.n_samples < 3:
        raise SignalError(f"velocity needs at least 3 game samples, got {game.n_samples}")
    position = game.values[:, columns]
    velocity = np.gradient(position, game.timestamps, axis=0, edge_order=1)
    return SampledSeries(timestamps=game.timestamps, values=velocity, channel_labels=labels)


def target_velocity(game: GameTrace) -> SampledSeries:
    """Central differences inside, one-sided at the two ends."""
    return _velocity(game, slice(0, 2), ("vx", "vy"))


def avatar_velocity(game: GameTrace) -> SampledSeries:
    return _velocity(game, slice(2, 4), ("vx", "vy"))


def estimate_offsets(trials: Iterable[Trial], k: Optional[float] = None,
                     threshold: float = DEFAULT_THRESHOLD) -> OffsetEstimate:
    """Least-squares constant offsets pooled over one participant and condition.

    For every force axis, b = mean(F - v_avatar / k) over the aligned samples of
    all tasks where that axis is productive. Axes no task makes productive are
    reported as None; a group with no productive evidence at all is an error.
    """
    trials = sorted(trials, key=lambda trial: trial.key)
    if not trials:
        raise AnalysisError("offset estimation needs at least one trial")
    groups = {(trial.participant.id, trial.condition) for trial in trials}
    if len(groups) > 1:
        raise AnalysisError(f"offsets are estimated per participant and condition, got {sorted(groups)}")

    evidence = {channel: [] for channel in FORCE_CHANNELS}
    for trial in trials:
        if not trial.task.is_force_task:
            continue
        scale = trial.scaling_factor if k is None else k
        alignment = align_nearest(trial.game, trial.wrench, threshold)
        v_avatar = avatar_velocity(trial.game).values[alignment.game_indices]
        forces = trial.wrench.values[alignment.sensor_indices]
        for channel in trial.task.input_channels:
            axis = trial.task.output_axis(channel)
            evidence[channel].append(forces[:, channel] - v_avatar[:, axis] / scale)

    group_name = trials[0].key.rsplit("/", 1)[0]
    if not any(evidence.values()):
        raise AnalysisError(f"no productive force evidence in {group_name}")

    offsets, residuals, counts = [], [], []
    for channel in FORCE_CHANNELS:
        if not evidence[channel]:
            logger.info("No productive evidence for %s in %s; offset unavailable",
                        WRENCH_CHANNELS[channel], group_name)
            offsets.append(None)
            residuals.append(None)
            counts.append(0)
            continue
        pooled = np.concatenate(evidence[channel])
        b = float(np.mean(pooled))
        offsets.append(b)
        residuals.append(float(np.sqrt(np.mean((pooled - b) ** 2))))
        counts.append(int(pooled.size))

    participant, condition = groups.pop()
    estimate = OffsetEstimate(
        participant=participant,
        condition=condition.value,
        offsets=tuple(offsets),
        residual_rms=tuple(residuals),
        sample_counts=tuple(counts),
    )
    logger.debug("Offsets %s/%s: %s", participant, condition.value, estimate.offsets)
    return estimate


def ideal_force(task: TaskSpec, game: GameTrace, k: float, offsets) -> IdealForceSeries:
    """F_ideal = v_target / k + b on each productive axis, on the game timeline."""
    if not task.is_force_task:
        raise ExcludedTaskError(f"{task.task_id.value} is excluded from force analysis")
    if not k > 0:
        raise AnalysisError(f"scaling factor must be positive, got {k}")
    b_all = offset_vector(offsets)
    v_target = target_velocity(game).values

    columns, b = [], []
    for channel in task.input_channels:
        b.append(float(b_all[FORCE_CHANNELS.index(channel)]))
        if np.isnan(b[-1]):
            raise AnalysisError(
                f"{task.task_id.value} needs the {WRENCH_CHANNELS[channel]} offset, which is unavailable"
            )
        columns.append(v_target[:, task.output_axis(channel)] / k + b[-1])
    return IdealForceSeries(
        timestamps=game.timestamps,
        values=np.column_stack(columns),
        channels=task.input_channels,
        offsets=tuple(b),
    )


def default_epsilon(velocity: np.ndarray, frac: float = DEFAULT_EPSILON_FRAC) -> float:
    return frac * float(np.max(np.abs(velocity)))


def derive_subtasks(task: TaskSpec, game: GameTrace, epsilon: Optional[float] = None,
                    epsilon_frac: float = DEFAULT_EPSILON_FRAC) -> SubtaskSequence:
    """Direction labels from the sign of the target velocity on the task's output axis.

    1 above +epsilon, 0 below -epsilon; inside the dead band the previous label
    is held, and leading undecided samples take the first decided label.
    """
    if not task.is_single_axis:
        raise AnalysisError(f"{task.task_id.value} is not a single-axis task")
    v = target_velocity(game).values[:, task.output_axes[0]]
    if epsilon is None:
        epsilon = default_epsilon(v, epsilon_frac)

    raw = pd.Series(np.where(v > epsilon, 1.0, np.where(v < -epsilon, 0.0, np.nan)))
    if raw.isna().all():
        raise AnalysisError(
            f"target speed never exceeds epsilon={epsilon:g} on {task.task_id.value}"
        )
    labels = raw.ffill().bfill().to_numpy().astype(np.int8)
    return SubtaskSequence(timestamps=game.timestamps, labels=labels)


def resample_labels(subtasks: SubtaskSequence, timestamps: np.ndarray,
                    threshold: Optional[float] = None) -> tuple[np.ndarray, np.ndarray]:
    """Carry labels onto another timeline by nearest-neighbour matching.

    Each subtask sample is matched to the nearest entry of ``timestamps``
    within ``threshold`` (one median period of ``timestamps`` by default).
    Returns the matched indices into ``timestamps`` and their labels.
    """
    timestamps = np.asarray(timestamps, dtype=float)
    if threshold is None:
        threshold = float(np.median(np.diff(timestamps))) if timestamps.size > 1 else DEFAULT_THRESHOLD
    reference = SampledSeries(timestamps=timestamps, values=np.zeros(timestamps.size))
    alignment = align_nearest(subtasks, reference, threshold)
    return alignment.sensor_indices, subtasks.labels[alignment.game_indices]


def labels_at(subtasks: SubtaskSequence, timestamps: np.ndarray) -> np.ndarray:
    """Nearest subtask label for every timestamp, without a distance limit."""
    timestamps = np.asarray(timestamps, dtype=float)
    alignment = align_nearest(
        SampledSeries(timestamps=timestamps, values=np.zeros(timestamps.size)), subtasks, np.inf
    )
    return subtasks.labels[alignment.sensor_indices]


def tracking_traces(trial: Trial) -> pd.DataFrame:
    """Target and avatar paths with their velocities, for tracking-strategy inspection."""
    game = trial.game
    v_target = target_velocity(game).values
    v_avatar = avatar_velocity(game).values
    return pd.DataFrame({
        "t": game.timestamps,
        "target_x": game.target[:, GAME_X],
        "target_y": game.target[:, GAME_Y],
        "avatar_x": game.avatar[:, GAME_X],
        "avatar_y": game.avatar[:, GAME_Y],
        "target_vx": v_target[:, GAME_X],
        "target_vy": v_target[:, GAME_Y],
        "avatar_vx": v_avatar[:, GAME_X],
        "avatar_vy": v_avatar[:, GAME_Y],
    })
