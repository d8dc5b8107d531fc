"""
Dataset loading and validation.

A dataset is one JSON manifest plus three CSV files per trial:

    EMG     t,AD,MD,PD,BB,TR,BR,FL,EX
    wrench  t,fx,fy,fz,tx,ty,tz
    game    t,target_x,target_y,avatar_x,avatar_y

Timestamps are seconds. Paths in the manifest are relative to the manifest's
directory. Trials are re-timed on load so that t = 0 is the game start.
"""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from pathlib import Path
from typing import Literal, Optional, Type, TypeVar

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, PrivateAttr, ValidationError

from neuromotor.core import (
    EmgRecord,
    GameTrace,
    ParticipantInfo,
    PoseCondition,
    SampledSeries,
    TaskId,
    Trial,
    WrenchRecord,
    task_spec,
    trial_key,
)
from neuromotor.errors import IngestError, ManifestError, SchemaError

logger = logging.getLogger(__name__)

SeriesT = TypeVar("SeriesT", bound=SampledSeries)

RATE_TOLERANCE = 0.1
CSV_FLOAT_FORMAT = "%.17g"


class SampleRates(BaseModel):
    emg: float = Field(default=1000.0, gt=0, description="Declared EMG rate in Hz.")
    wrench: Optional[float] = Field(default=None, gt=0, description="Declared wrench rate in Hz.")
    game: Optional[float] = Field(default=None, gt=0, description="Declared game rate in Hz.")


class TrialEntry(BaseModel):
    participant: str = Field(min_length=1)
    condition: PoseCondition
    task: TaskId
    emg: str = Field(description="EMG CSV path, relative to the manifest.")
    wrench: str = Field(description="Wrench CSV path, relative to the manifest.")
    game: str = Field(description="Game CSV path, relative to the manifest.")
    game_start: Optional[float] = Field(default=None, description="Game start on the file clock.")
    game_end: Optional[float] = Field(default=None, description="Game end on the file clock.")

    @property
    def key(self) -> str:
        return trial_key(self.participant, self.condition, self.task)


class DatasetManifest(BaseModel):
    name: str = "dataset"
    version: str = "1"
    scaling_factor: float = Field(gt=0, description="Game units per second per newton.")
    sample_rates: SampleRates = Field(default_factory=SampleRates)
    participants: list[ParticipantInfo] = Field(default_factory=list)
    trials: list[TrialEntry] = Field(default_factory=list)

    _root: Path = PrivateAttr(default=Path("."))

    @property
    def root(self) -> Path:
        return self._root

    def participant(self, participant_id: str) -> ParticipantInfo:
        for info in self.participants:
            if info.id == participant_id:
                return info
        raise ManifestError(f"participant {participant_id!r} is not declared in the manifest")

    def resolve(self, relative: str) -> Path:
        return self._root / relative

    def entry(self, key: str) -> TrialEntry:
        for entry in self.trials:
            if entry.key == key:
                return entry
        raise ManifestError(f"no trial {key!r} in manifest")


class ValidationIssue(BaseModel):
    severity: Literal["error", "warning"]
    message: str
    location: str = Field(description="Trial key, file path or 'manifest'.")


class ValidationReport(BaseModel):
    n_trials: int = 0
    issues: list[ValidationIssue] = Field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not any(issue.severity == "error" for issue in self.issues)

    @property
    def errors(self) -> list[ValidationIssue]:
        return [issue for issue in self.issues if issue.severity == "error"]

    @property
    def warnings(self) -> list[ValidationIssue]:
        return [issue for issue in self.issues if issue.severity == "warning"]

    def by_trial(self) -> dict[str, list[ValidationIssue]]:
        grouped = defaultdict(list)
        for issue in self.issues:
            grouped[issue.location].append(issue)
        return dict(grouped)


def _check_manifest(manifest: DatasetManifest) -> None:
    seen_ids = set()
    for info in manifest.participants:
        if info.id in seen_ids:
            raise ManifestError(f"participant {info.id!r} declared twice")
        seen_ids.add(info.id)

    seen_keys = set()
    for entry in manifest.trials:
        if entry.key in seen_keys:
            raise ManifestError(f"duplicate trial {entry.key}")
        seen_keys.add(entry.key)
        if entry.participant not in seen_ids:
            raise ManifestError(f"trial {entry.key} references undeclared participant")
        for kind in ("emg", "wrench", "game"):
            path = manifest.resolve(getattr(entry, kind))
            if not path.is_file():
                raise ManifestError(f"trial {entry.key}: {kind} file {path} does not exist")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as handle:
            raw = json.load(handle)
    except FileNotFoundError as exc:
        raise ManifestError(f"manifest {path} not found") from exc
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise ManifestError(f"manifest {path} is not valid JSON: {exc}") from exc

    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as exc:
        raise ManifestError(f"manifest {path} failed validation: {exc}") from exc

    manifest._root = path.parent
    _check_manifest(manifest)
    logger.info("Loaded manifest %s: %d participants, %d trials",
                path, len(manifest.participants), len(manifest.trials))
    return manifest


def read_series_csv(path, record_type: Type[SeriesT]) -> SeriesT:
    """Parse one canonical CSV into ``record_type``, enforcing its column layout."""
    path = Path(path)
    expected = ("t",) + tuple(record_type.CHANNELS)
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except pd.errors.EmptyDataError as exc:
        raise SchemaError(f"{path}: empty file") from exc
    except ValueError as exc:
        # ParserError and UnicodeDecodeError are ValueErrors
        raise SchemaError(f"{path}: unreadable CSV: {exc}") from exc
    except OSError as exc:
        raise IngestError(f"{path}: {exc}") from exc

    columns = tuple(str(column).strip() for column in frame.columns)
    if len(columns) != len(expected):
        raise SchemaError(
            f"{path}: channel-count mismatch, expected {len(expected) - 1} channels, "
            f"found {len(columns) - 1}"
        )
    if columns != expected:
        raise SchemaError(f"{path}: header {columns} differs from {expected}")
    try:
        data = frame.to_numpy(dtype=float)
    except (TypeError, ValueError) as exc:
        raise SchemaError(f"{path}: non-numeric value: {exc}") from exc

    try:
        return record_type(timestamps=data[:, 0], values=data[:, 1:], channel_labels=expected[1:])
    except SchemaError as exc:
        raise SchemaError(f"{path}: {exc}") from exc


def write_series_csv(series: SampledSeries, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame = pd.DataFrame(series.values, columns=list(series.channel_labels))
    frame.insert(0, "t", series.timestamps)
    frame.to_csv(path, index=False, float_format=CSV_FLOAT_FORMAT, lineterminator="\n")
    return path


def write_manifest(manifest: DatasetManifest, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = manifest.model_dump(mode="json")
    with open(path, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
        handle.write("\n")
    manifest._root = path.parent
    return path


def _shift(series: SeriesT, origin: float) -> SeriesT:
    if origin == 0.0:
        return series
    return series.with_values(series.values, series.timestamps - origin)


def load_trial(manifest: DatasetManifest, entry: TrialEntry) -> Trial:
    """Read one trial's three CSV files and cut them to the game window.

    Args:
        manifest: Dataset manifest; relative file paths resolve against its directory.
        entry: The trial to load.

    Returns:
        The trial with every timeline shifted so the game window starts at 0.

    Raises:
        SchemaError: A file is malformed or the game window is empty.
        IngestError: A file is missing or unreadable.
    """
    emg = read_series_csv(manifest.resolve(entry.emg), EmgRecord)
    wrench = read_series_csv(manifest.resolve(entry.wrench), WrenchRecord)
    game = read_series_csv(manifest.resolve(entry.game), GameTrace)

    start = game.start if entry.game_start is None else entry.game_start
    end = game.end if entry.game_end is None else entry.game_end
    if not start < end:
        raise SchemaError(f"{entry.key}: game window [{start}, {end}] is empty")

    inside = (game.timestamps >= start) & (game.timestamps <= end)
    if not inside.any():
        raise SchemaError(f"{entry.key}: no game samples inside [{start}, {end}]")
    if not inside.all():
        game = game.with_values(game.values[inside], game.timestamps[inside])

    return Trial(
        participant=manifest.participant(entry.participant),
        condition=entry.condition,
        task=task_spec(entry.task),
        emg=_shift(emg, start),
        wrench=_shift(wrench, start),
        game=_shift(game, start),
        scaling_factor=manifest.scaling_factor,
        game_start=0.0,
        game_end=end - start,
    )


def _rate_issue(series: SampledSeries, declared: Optional[float], kind: str, key: str):
    if declared is None or series.n_samples < 2:
        return None
    interval = float(np.median(np.diff(series.timestamps)))
    if abs(interval * declared - 1.0) > RATE_TOLERANCE:
        return ValidationIssue(
            severity="warning",
            location=key,
            message=(f"{kind} declared at {declared:g} Hz but median interval is "
                     f"{interval * 1000:.4g} ms ({1.0 / interval:.4g} Hz)"),
        )
    return None


def validate_dataset(manifest: DatasetManifest) -> ValidationReport:
    """Load every trial and collect problems without stopping at the first one."""
    report = ValidationReport(n_trials=len(manifest.trials))
    for entry in manifest.trials:
        try:
            trial = load_trial(manifest, entry)
        except IngestError as exc:
            report.issues.append(ValidationIssue(severity="error", message=str(exc), location=entry.key))
            continue

        rates = manifest.sample_rates
        for series, declared, kind in (
            (trial.emg, rates.emg, "emg"),
            (trial.wrench, rates.wrench, "wrench"),
            (trial.game, rates.game, "game"),
        ):
            issue = _rate_issue(series, declared, kind, entry.key)
            if issue is not None:
                report.issues.append(issue)

        for kind in ("emg", "wrench"):
            series = getattr(trial, kind)
            if series.start > trial.game_start or series.end < trial.game_end:
                report.issues.append(ValidationIssue(
                    severity="warning",
                    location=entry.key,
                    message=(f"{kind} covers [{series.start:g}, {series.end:g}] s, "
                             f"not the full game window [0, {trial.game_end:g}] s"),
                ))

    logger.info("Validated %d trials: %d errors, %d warnings",
                report.n_trials, len(report.errors), len(report.warnings))
    return report


# Column names expected in the public OpenRobotRehab release, keyed by the
# canonical column they would map to. Unconfirmed against the actual archive.
SIMTK_COLUMN_MAP = {
    "emg": {
        "time": "t",
        "Anterior Deltoid": "AD",
        "Middle Deltoid": "MD",
        "Posterior Deltoid": "PD",
        "Biceps Brachii": "BB",
        "Triceps Brachii": "TR",
        "Brachioradialis": "BR",
        "Flexor Carpi Radialis": "FL",
        "Extensor Carpi Radialis": "EX",
    },
    "wrench": {"time": "t", "Fx": "fx", "Fy": "fy", "Fz": "fz", "Tx": "tx", "Ty": "ty", "Tz": "tz"},
    "game": {
        "time": "t",
        "TargetX": "target_x",
        "TargetY": "target_y",
        "AvatarX": "avatar_x",
        "AvatarY": "avatar_y",
    },
}


def convert_simtk_layout(source_dir, out_dir) -> DatasetManifest:
    """Adapter point for the external SimTK archive.

    The archive layout has not been confirmed, so no conversion is attempted.
    Once it is, rename columns with ``SIMTK_COLUMN_MAP``, write each series with
    ``write_series_csv`` and finish with ``write_manifest``.
    """
    raise NotImplementedError(
        f"cannot convert {source_dir}: the OpenRobotRehab 1.0 file layout is unconfirmed; "
        "export the data to the canonical CSV layout instead"
    )
