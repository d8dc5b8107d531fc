"""
Core domain model.

Shared types for participants, tasks and recorded series. Numeric records are
frozen dataclasses holding read-only numpy arrays; metadata types are pydantic
models so they serialize straight into manifests and reports.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import ClassVar, Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from neuromotor.errors import SchemaError

EMG_CHANNELS = ("AD", "MD", "PD", "BB", "TR", "BR", "FL", "EX")
WRENCH_CHANNELS = ("fx", "fy", "fz", "tx", "ty", "tz")
GAME_CHANNELS = ("target_x", "target_y", "avatar_x", "avatar_y")

FX, FY, FZ, TX, TY, TZ = range(6)
FORCE_CHANNELS = (FX, FY, FZ)
GAME_X, GAME_Y = 0, 1

NOMINAL_EMG_RATE = 1000.0


class Cohort(str, Enum):
    HEALTHY = "Healthy"
    POST_STROKE = "PostStroke"


class PoseCondition(str, Enum):
    A = "A"
    B = "B"


class TaskId(str, Enum):
    X_AXIS = "XAxis"
    Y_AXIS = "YAxis"
    Z_AXIS = "ZAxis"
    TORQUE = "Torque"
    CIRCLE_CW = "CircleCW"
    CIRCLE_CCW = "CircleCCW"
    SPLINE_1 = "Spline1"
    SPLINE_2 = "Spline2"


class ParticipantInfo(BaseModel):
    model_config = ConfigDict(frozen=True)

    id: str = Field(min_length=1, description="Opaque participant label, e.g. '02'.")
    cohort: Cohort = Field(description="Healthy or post-stroke group membership.")
    handedness: Optional[str] = Field(default=None, description="Self-reported handedness.")
    impaired_side: Optional[str] = Field(default=None, description="Hemiparetic side, if any.")


class TaskSpec(BaseModel):
    """One row of the trajectory tracking task table.

    ``input_channels[i]`` drives game axis ``output_axes[i]``.
    """

    model_config = ConfigDict(frozen=True)

    task_id: TaskId
    input_channels: tuple[int, ...] = Field(description="Productive wrench channel indices.")
    output_axes: tuple[int, ...] = Field(description="Game axes driven by the inputs.")
    repetitions: int = Field(gt=0)
    rotation: Optional[Literal["CW", "CCW"]] = None

    @property
    def is_force_task(self) -> bool:
        return all(channel in FORCE_CHANNELS for channel in self.input_channels)

    @property
    def is_single_axis(self) -> bool:
        return len(self.input_channels) == 1

    def output_axis(self, channel: int) -> int:
        return self.output_axes[self.input_channels.index(channel)]


_TASK_TABLE = (
    TaskSpec(task_id=TaskId.X_AXIS, input_channels=(FX,), output_axes=(GAME_X,), repetitions=7),
    TaskSpec(task_id=TaskId.Y_AXIS, input_channels=(FY,), output_axes=(GAME_Y,), repetitions=7),
    TaskSpec(task_id=TaskId.Z_AXIS, input_channels=(FZ,), output_axes=(GAME_Y,), repetitions=7),
    TaskSpec(task_id=TaskId.TORQUE, input_channels=(TZ,), output_axes=(GAME_X,), repetitions=5),
    TaskSpec(task_id=TaskId.CIRCLE_CW, input_channels=(FX, FY), output_axes=(GAME_X, GAME_Y),
             repetitions=3, rotation="CW"),
    TaskSpec(task_id=TaskId.CIRCLE_CCW, input_channels=(FX, FY), output_axes=(GAME_X, GAME_Y),
             repetitions=3, rotation="CCW"),
    TaskSpec(task_id=TaskId.SPLINE_1, input_channels=(FX, FY), output_axes=(GAME_X, GAME_Y),
             repetitions=3, rotation="CCW"),
    TaskSpec(task_id=TaskId.SPLINE_2, input_channels=(FX, FY), output_axes=(GAME_X, GAME_Y),
             repetitions=3, rotation="CW"),
)
_TASKS_BY_ID = {spec.task_id: spec for spec in _TASK_TABLE}

FORCE_TASKS = tuple(spec.task_id for spec in _TASK_TABLE if spec.is_force_task)
SINGLE_AXIS_TASKS = tuple(spec.task_id for spec in _TASK_TABLE if spec.is_single_axis)


def builtin_task_table() -> list[TaskSpec]:
    return list(_TASK_TABLE)


def task_spec(task_id: TaskId | str) -> TaskSpec:
    try:
        return _TASKS_BY_ID[TaskId(task_id)]
    except ValueError as exc:
        raise SchemaError(f"unknown task id {task_id!r}") from exc


def productive_channels(task: TaskSpec) -> frozenset[int]:
    return frozenset(task.input_channels)


def nonproductive_channels(task: TaskSpec) -> tuple[int, ...]:
    """Force channels with no influence on the task; empty for the torque task."""
    if not task.is_force_task:
        return ()
    return tuple(c for c in FORCE_CHANNELS if c not in task.input_channels)


def _frozen_array(values, ndim: int) -> np.ndarray:
    array = np.array(values, dtype=float, copy=True)
    if array.ndim != ndim:
        raise SchemaError(f"expected a {ndim}-d array, got shape {array.shape}")
    array.flags.writeable = False
    return array


@dataclass(frozen=True, eq=False)
class SampledSeries:
    """Multichannel samples on a strictly increasing timeline (seconds)."""

    CHANNELS: ClassVar[Optional[tuple[str, ...]]] = None

    timestamps: np.ndarray
    values: np.ndarray
    channel_labels: tuple[str, ...] = ()

    def __post_init__(self):
        timestamps = _frozen_array(self.timestamps, 1)
        values = np.asarray(self.values, dtype=float)
        if values.ndim == 1:
            values = values[:, None]
        values = _frozen_array(values, 2)
        labels = tuple(self.channel_labels)
        name = type(self).__name__

        if self.CHANNELS is not None:
            if not labels:
                labels = self.CHANNELS
            elif labels != self.CHANNELS:
                raise SchemaError(f"{name} channels must be {self.CHANNELS}, got {labels}")
        elif not labels:
            labels = tuple(f"c{i}" for i in range(values.shape[1]))

        if timestamps.size == 0:
            raise SchemaError(f"{name} is empty")
        if values.shape[0] != timestamps.size:
            raise SchemaError(f"{name} has {timestamps.size} timestamps but {values.shape[0]} rows")
        if values.shape[1] != len(labels):
            raise SchemaError(
                f"{name} channel-count mismatch: {values.shape[1]} columns for {len(labels)} labels"
            )
        if not np.all(np.isfinite(timestamps)) or not np.all(np.isfinite(values)):
            raise SchemaError(f"{name} contains non-finite samples")
        if timestamps.size > 1 and not np.all(np.diff(timestamps) > 0):
            raise SchemaError(f"{name} timestamps are not strictly increasing")

        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "channel_labels", labels)

    @property
    def n_samples(self) -> int:
        return self.timestamps.size

    @property
    def n_channels(self) -> int:
        return self.values.shape[1]

    @property
    def start(self) -> float:
        return float(self.timestamps[0])

    @property
    def end(self) -> float:
        return float(self.timestamps[-1])

    def sample_rate(self) -> float:
        """Rate implied by the median sample interval."""
        if self.n_samples < 2:
            raise SchemaError(f"{type(self).__name__} needs two samples to infer a rate")
        return 1.0 / float(np.median(np.diff(self.timestamps)))

    def channel(self, label: str) -> np.ndarray:
        return self.values[:, self.channel_labels.index(label)]

    def with_values(self, values, timestamps=None):
        return replace(
            self,
            values=values,
            timestamps=self.timestamps if timestamps is None else timestamps,
        )


@dataclass(frozen=True, eq=False)
class EmgRecord(SampledSeries):
    CHANNELS: ClassVar[tuple[str, ...]] = EMG_CHANNELS

    def rate_matches(self, declared_rate: float = NOMINAL_EMG_RATE, tolerance: float = 0.1) -> bool:
        interval = float(np.median(np.diff(self.timestamps)))
        return abs(interval * declared_rate - 1.0) <= tolerance


@dataclass(frozen=True, eq=False)
class WrenchRecord(SampledSeries):
    CHANNELS: ClassVar[tuple[str, ...]] = WRENCH_CHANNELS


@dataclass(frozen=True, eq=False)
class GameTrace(SampledSeries):
    CHANNELS: ClassVar[tuple[str, ...]] = GAME_CHANNELS

    @property
    def target(self) -> np.ndarray:
        return self.values[:, 0:2]

    @property
    def avatar(self) -> np.ndarray:
        return self.values[:, 2:4]


@dataclass(frozen=True, eq=False)
class Trial:
    participant: ParticipantInfo
    condition: PoseCondition
    task: TaskSpec
    emg: EmgRecord
    wrench: WrenchRecord
    game: GameTrace
    scaling_factor: float
    game_start: float = 0.0
    game_end: Optional[float] = None

    def __post_init__(self):
        if not self.scaling_factor > 0:
            raise SchemaError(f"scaling factor must be positive, got {self.scaling_factor}")
        if self.game_end is None:
            object.__setattr__(self, "game_end", self.game.end)
        if not self.game_start < self.game_end:
            raise SchemaError(f"{self.key}: empty game window [{self.game_start}, {self.game_end}]")
        for name in ("emg", "wrench", "game"):
            series = getattr(self, name)
            if series.end < self.game_start or series.start > self.game_end:
                raise SchemaError(f"{self.key}: {name} does not overlap the game window")

    @property
    def key(self) -> str:
        return trial_key(self.participant.id, self.condition, self.task.task_id)


def trial_key(participant_id: str, condition: PoseCondition | str, task_id: TaskId | str) -> str:
    return f"{participant_id}/{PoseCondition(condition).value}/{TaskId(task_id).value}"


@dataclass(frozen=True, eq=False)
class SubtaskSequence:
    """Prescribed direction labels (0/1) on a reference timeline."""

    timestamps: np.ndarray
    labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int8))

    def __post_init__(self):
        timestamps = _frozen_array(self.timestamps, 1)
        labels = np.array(self.labels, copy=True)
        if labels.shape != timestamps.shape:
            raise SchemaError("subtask labels and timestamps differ in length")
        if not np.all((labels == 0) | (labels == 1)):
            raise SchemaError("subtask labels must be 0 or 1")
        labels = labels.astype(np.int8)
        labels.flags.writeable = False
        object.__setattr__(self, "timestamps", timestamps)
        object.__setattr__(self, "labels", labels)

    def __len__(self) -> int:
        return self.labels.size
