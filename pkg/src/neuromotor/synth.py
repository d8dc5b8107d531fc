"""
Synthetic trials with known ground truth.

Every generator is deterministic in its seed. Force trials follow the game
model exactly: the avatar tracks the target (optionally with a sinusoidal
tracking error), its velocity fixes the true force ``F = v / k`` and the sensor
reports ``F + b + noise``. EMG comes from planted synergies, from a planted
two-state HMM, or as noise modulated by an HMM envelope ("raw").
"""

from __future__ import annotations

import json
import logging
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, Field, model_validator
from scipy.interpolate import CubicSpline
from scipy.signal import sawtooth
from tqdm import tqdm

from neuromotor.core import (
    EMG_CHANNELS,
    FORCE_CHANNELS,
    FORCE_TASKS,
    GAME_X,
    GAME_Y,
    Cohort,
    EmgRecord,
    GameTrace,
    ParticipantInfo,
    PoseCondition,
    SampledSeries,
    TaskId,
    Trial,
    WrenchRecord,
    builtin_task_table,
    task_spec,
)
from neuromotor.errors import AnalysisError, NeuromotorError
from neuromotor.gamesync import avatar_velocity, derive_subtasks, labels_at
from neuromotor.ingest import DatasetManifest, SampleRates, TrialEntry, write_manifest, write_series_csv

logger = logging.getLogger(__name__)

EmgMode = Literal["synergy", "hmm", "raw"]
AlignmentMode = Literal["aligned", "independent"]

GROUND_TRUTH_FILE = "ground_truth.json"
MANIFEST_FILE = "manifest.json"

# control points of the closed spline path, in units of the target amplitude
_SPLINE_POINTS = np.array([
    [1.0, 0.0], [0.55, 0.75], [-0.2, 0.6], [-0.9, 0.35],
    [-0.7, -0.45], [0.05, -0.8], [0.6, -0.5], [1.0, 0.0],
])


class SynthSpec(BaseModel):
    scenario: str = "custom"
    seed: int = Field(default=0, ge=0)
    duration: float = Field(default=10.0, gt=0, description="Seconds per trial.")
    emg_rate: float = Field(default=1000.0, gt=0)
    wrench_rate: float = Field(default=1000.0, gt=0)
    game_rate: float = Field(default=50.0, gt=0)
    scaling_factor: float = Field(default=2.0, gt=0)
    amplitude: float = Field(default=1.0, ge=0, description="Target excursion in game units.")
    offsets: tuple[float, float, float] = (1.5, -0.7, 3.2)
    offset_spread: float = Field(default=0.0, ge=0, description="SD of per participant-condition offset jitter.")
    force_noise: float = Field(default=0.0, ge=0, description="Wrench noise SD in newtons.")
    tracking_error: float = Field(default=0.0, ge=0, description="Avatar error amplitude, game units.")
    tracking_frequency: float = Field(default=0.7, gt=0)
    healthy_error: tuple[float, float] = (0.05, 0.15)
    post_stroke_error: tuple[float, float] = (0.4, 0.6)

    emg_mode: EmgMode = "raw"
    synergy_rank: int = Field(default=3, ge=1, le=8)
    snr_db: Optional[float] = 20.0
    hmm_alignment: AlignmentMode = "aligned"
    hmm_separation: float = Field(default=5.0, gt=0, description="Mean gap between states in SDs.")
    hmm_sd: float = Field(default=0.02, gt=0)
    hmm_stickiness: float = Field(default=0.8, gt=0, lt=1)

    n_healthy: int = Field(default=13, ge=0)
    n_post_stroke: int = Field(default=2, ge=0)
    conditions: list[PoseCondition] = Field(default_factory=lambda: [PoseCondition.A, PoseCondition.B])
    tasks: list[TaskId] = Field(default_factory=lambda: [spec.task_id for spec in builtin_task_table()])
    impaired_emg: AlignmentMode = "independent"

    @model_validator(mode="after")
    def _grids_nest(self):
        step = self.wrench_rate / self.game_rate
        if abs(step - round(step)) > 1e-9 or step < 1:
            raise ValueError("wrench_rate must be an integer multiple of game_rate")
        return self

    @property
    def game_step(self) -> int:
        return int(round(self.wrench_rate / self.game_rate))


SCENARIOS: dict[str, dict] = {
    "minimal": dict(
        duration=2.0, n_healthy=1, n_post_stroke=0,
        conditions=[PoseCondition.A], tasks=[TaskId.X_AXIS],
    ),
    "cohort": dict(duration=10.0, n_healthy=13, n_post_stroke=2, force_noise=0.2, offset_spread=0.5),
    "separated-cohort": dict(
        duration=2.0, n_healthy=13, n_post_stroke=2,
        conditions=[PoseCondition.A], tasks=list(FORCE_TASKS), offset_spread=0.5,
    ),
}


def scenario_spec(name: str, seed: int = 0, **overrides) -> SynthSpec:
    if name not in SCENARIOS:
        raise NeuromotorError(f"unknown scenario {name!r}; choose from {sorted(SCENARIOS)}")
    return SynthSpec(scenario=name, seed=seed, **{**SCENARIOS[name], **overrides})


@dataclass(frozen=True, eq=False)
class SynthTrial:
    trial: Trial
    offsets: tuple[float, float, float]
    true_force: np.ndarray
    tracking_error: float
    states: Optional[np.ndarray] = None
    W0: Optional[np.ndarray] = None
    H0: Optional[np.ndarray] = None
    alignment: AlignmentMode = "aligned"


def _rng(*keys) -> np.random.Generator:
    entropy = [k if isinstance(k, int) else zlib.crc32(str(k).encode()) for k in keys]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def _timeline(duration: float, rate: float) -> np.ndarray:
    return np.arange(int(round(duration * rate)) + 1) / rate


def target_path(task_id: TaskId, t: np.ndarray, duration: float, amplitude: float = 1.0) -> np.ndarray:
    """Target (x, y) for a task: triangle waves, circles or a closed spline."""
    task = task_spec(task_id)
    phase = task.repetitions * t / duration
    path = np.zeros((t.size, 2))
    if task.is_single_axis:
        path[:, task.output_axes[0]] = amplitude * sawtooth(2 * np.pi * phase - np.pi / 2, width=0.5)
        return path

    direction = -1.0 if task.rotation == "CW" else 1.0
    if task_id in (TaskId.CIRCLE_CW, TaskId.CIRCLE_CCW):
        angle = direction * 2 * np.pi * phase
        path[:, GAME_X] = amplitude * np.cos(angle)
        path[:, GAME_Y] = amplitude * np.sin(angle)
        return path

    knots = np.linspace(0.0, 1.0, len(_SPLINE_POINTS))
    spline = CubicSpline(knots, _SPLINE_POINTS, bc_type="periodic")
    return amplitude * spline(np.mod(direction * phase, 1.0))


def _avatar(target: np.ndarray, t: np.ndarray, task, error: float, frequency: float,
            rng: np.random.Generator) -> np.ndarray:
    avatar = target.copy()
    if error > 0:
        for axis in set(task.output_axes):
            phase = rng.uniform(0, 2 * np.pi)
            avatar[:, axis] += error * np.sin(2 * np.pi * frequency * t + phase)
    return avatar


def planted_synergies(rank: int, n_samples: int, rng: np.random.Generator,
                      n_bursts: int = 4, n_muscles: int = len(EMG_CHANNELS)) -> tuple[np.ndarray, np.ndarray]:
    """Near-orthogonal W0 (each muscle has one primary synergy) and burst-shaped H0."""
    W0 = rng.uniform(0.0, 0.1, size=(n_muscles, rank))
    for muscle in range(n_muscles):
        W0[muscle, muscle % rank] = rng.uniform(0.7, 1.0)
    W0 /= np.linalg.norm(W0, axis=0)

    t = np.arange(n_samples)
    slots = rank * n_bursts
    width = n_samples / slots
    H0 = np.zeros((rank, n_samples))
    for j in range(rank):
        for burst in range(n_bursts):
            center = (burst * rank + j + 0.5) * width
            H0[j] += rng.uniform(0.6, 1.0) * np.exp(-0.5 * ((t - center) / (width / 3)) ** 2)
    return W0, H0


def planted_synergy_matrix(rank: int, n_samples: int, snr_db: Optional[float],
                           rng: np.random.Generator):
    """Return ``(E, W0, H0)`` with E = clip(W0 H0 + noise, 0) scaled to a unit maximum."""
    W0, H0 = planted_synergies(rank, n_samples, rng)
    clean = W0 @ H0
    E = clean
    if snr_db is not None:
        sigma = np.sqrt(np.mean(clean**2) / 10 ** (snr_db / 10))
        E = np.clip(clean + sigma * rng.standard_normal(clean.shape), 0.0, None)
    scale = E.max()
    return E / scale, W0, H0 * (1.0 / scale)


def sticky_chain(n_samples: int, stickiness: float, rng: np.random.Generator) -> np.ndarray:
    switches = rng.uniform(size=n_samples) > stickiness
    switches[0] = False
    states = np.cumsum(switches) % 2
    if rng.uniform() < 0.5:
        states = 1 - states
    return states.astype(np.int8)


def hmm_envelope(states: np.ndarray, separation: float, sd: float,
                 rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Diagonal-Gaussian 8-channel envelopes whose state means rise on every channel."""
    base = 0.2 + 0.02 * np.arange(len(EMG_CHANNELS))
    means = np.vstack([base, base + separation * sd])
    obs = means[states] + sd * rng.standard_normal((states.size, len(EMG_CHANNELS)))
    return np.clip(obs, 0.0, None), means


def _states(spec: SynthSpec, task, game: GameTrace, t_emg: np.ndarray, alignment: AlignmentMode,
            rng: np.random.Generator) -> np.ndarray:
    if alignment == "aligned" and task.is_single_axis:
        try:
            return labels_at(derive_subtasks(task, game), t_emg).astype(np.int8)
        except AnalysisError:
            logger.debug("Target never moves on %s; drawing independent states", task.task_id.value)
    return sticky_chain(t_emg.size, spec.hmm_stickiness, rng)


def _generate(spec: SynthSpec, task_id: TaskId, participant: ParticipantInfo, condition: PoseCondition,
              offsets: tuple[float, float, float], error: float, alignment: AlignmentMode,
              rng: np.random.Generator) -> SynthTrial:
    task = task_spec(task_id)
    k = spec.scaling_factor
    t_sensor = _timeline(spec.duration, spec.wrench_rate)
    t_game = t_sensor[:: spec.game_step]
    t_emg = _timeline(spec.duration, spec.emg_rate)

    target = target_path(task_id, t_game, spec.duration, spec.amplitude)
    avatar = _avatar(target, t_game, task, error, spec.tracking_frequency, rng)
    game = GameTrace(timestamps=t_game, values=np.hstack([target, avatar]))

    v_avatar = avatar_velocity(game).values
    true_force = np.zeros((t_sensor.size, 6))
    for channel in task.input_channels:
        true_force[:, channel] = np.interp(t_sensor, t_game, v_avatar[:, task.output_axis(channel)] / k)
    measured = true_force.copy()
    measured[:, list(FORCE_CHANNELS)] += np.asarray(offsets)
    if spec.force_noise > 0:
        measured += spec.force_noise * rng.standard_normal(measured.shape)
    wrench = WrenchRecord(timestamps=t_sensor, values=measured)

    states = W0 = H0 = None
    if spec.emg_mode == "synergy":
        values, W0, H0 = planted_synergy_matrix(spec.synergy_rank, t_emg.size, spec.snr_db, rng)
        values = values.T
    else:
        states = _states(spec, task, game, t_emg, alignment, rng)
        values, _ = hmm_envelope(states, spec.hmm_separation, spec.hmm_sd, rng)
        if spec.emg_mode == "raw":
            values = values * rng.standard_normal(values.shape)
    emg = EmgRecord(timestamps=t_emg, values=values)

    trial = Trial(
        participant=participant, condition=condition, task=task, emg=emg, wrench=wrench, game=game,
        scaling_factor=k, game_start=0.0, game_end=float(t_game[-1]),
    )
    return SynthTrial(
        trial=trial, offsets=tuple(float(b) for b in offsets), true_force=true_force,
        tracking_error=error, states=states, W0=W0, H0=H0, alignment=alignment,
    )


def _default_participant() -> ParticipantInfo:
    return ParticipantInfo(id="02", cohort=Cohort.HEALTHY)


def gen_force_trial(spec: SynthSpec, task_id: TaskId | str = TaskId.X_AXIS,
                    participant: Optional[ParticipantInfo] = None,
                    condition: PoseCondition = PoseCondition.A) -> SynthTrial:
    """One trial with planted offsets ``spec.offsets`` and tracking error ``spec.tracking_error``."""
    return _generate(
        spec, TaskId(task_id), participant or _default_participant(), condition,
        spec.offsets, spec.tracking_error, spec.hmm_alignment, _rng(spec.seed, "force", TaskId(task_id).value),
    )


def gen_emg_trial(spec: SynthSpec, task_id: TaskId | str = TaskId.X_AXIS,
                  participant: Optional[ParticipantInfo] = None,
                  condition: PoseCondition = PoseCondition.A) -> SynthTrial:
    """One trial whose EMG carries planted synergies or planted HMM states (``spec.emg_mode``)."""
    return _generate(
        spec, TaskId(task_id), participant or _default_participant(), condition,
        spec.offsets, spec.tracking_error, spec.hmm_alignment, _rng(spec.seed, "emg", TaskId(task_id).value),
    )


def cohort_participants(spec: SynthSpec) -> list[ParticipantInfo]:
    total = spec.n_healthy + spec.n_post_stroke
    return [
        ParticipantInfo(
            id=f"{index + 2:02d}",
            cohort=Cohort.HEALTHY if index < spec.n_healthy else Cohort.POST_STROKE,
            handedness="right",
            impaired_side=None if index < spec.n_healthy else "left",
        )
        for index in range(total)
    ]


def _planted_truth(generated: SynthTrial, stem: Path, out_dir: Path) -> dict:
    """Ground truth of one trial; long planted sequences go to CSV files beside the trial."""
    t_emg = generated.trial.emg.timestamps
    entry = {
        "offsets": list(generated.offsets),
        "tracking_error": generated.tracking_error,
        "emg_alignment": generated.alignment,
    }
    if generated.W0 is not None:
        rank = generated.W0.shape[1]
        entry["W0"] = generated.W0.tolist()
        H0 = SampledSeries(timestamps=t_emg, values=generated.H0.T,
                           channel_labels=tuple(f"s{j + 1}" for j in range(rank)))
        entry["H0"] = write_series_csv(H0, out_dir / f"{stem}.H0.csv").relative_to(out_dir).as_posix()
    if generated.states is not None:
        states = SampledSeries(timestamps=t_emg, values=generated.states.astype(float), channel_labels=("state",))
        entry["states"] = write_series_csv(states, out_dir / f"{stem}.states.csv").relative_to(out_dir).as_posix()
    return entry


def gen_cohort(spec: SynthSpec, out_dir, quiet: bool = True) -> DatasetManifest:
    """Write a canonical dataset plus ``ground_truth.json`` under ``out_dir``."""
    out_dir = Path(out_dir)
    participants = cohort_participants(spec)
    entries, truth_trials, truth_participants = [], {}, {}

    jobs = [(p, c, t) for p in participants for c in spec.conditions for t in spec.tasks]
    for participant, condition, task_id in tqdm(jobs, desc="synth", disable=quiet):
        prng = _rng(spec.seed, "participant", participant.id)
        low, high = spec.healthy_error if participant.cohort == Cohort.HEALTHY else spec.post_stroke_error
        error = float(prng.uniform(low, high))
        crng = _rng(spec.seed, "offsets", participant.id, condition.value)
        offsets = tuple(float(b) for b in np.asarray(spec.offsets) + spec.offset_spread * crng.standard_normal(3))
        alignment = "aligned" if participant.cohort == Cohort.HEALTHY else spec.impaired_emg

        generated = _generate(
            spec, task_id, participant, condition, offsets, error, alignment,
            _rng(spec.seed, "trial", participant.id, condition.value, task_id.value),
        )
        trial = generated.trial
        stem = Path(participant.id) / condition.value / task_id.value
        for kind, series in (("emg", trial.emg), ("wrench", trial.wrench), ("game", trial.game)):
            write_series_csv(series, out_dir / f"{stem}.{kind}.csv")
        entries.append(TrialEntry(
            participant=participant.id, condition=condition, task=task_id,
            emg=f"{stem.as_posix()}.emg.csv", wrench=f"{stem.as_posix()}.wrench.csv",
            game=f"{stem.as_posix()}.game.csv",
        ))
        truth_participants[participant.id] = {"cohort": participant.cohort.value, "tracking_error": error}
        truth_trials[trial.key] = _planted_truth(generated, stem, out_dir)

    manifest = DatasetManifest(
        name=f"synth-{spec.scenario}",
        version="1",
        scaling_factor=spec.scaling_factor,
        sample_rates=SampleRates(emg=spec.emg_rate, wrench=spec.wrench_rate, game=spec.game_rate),
        participants=participants,
        trials=entries,
    )
    write_manifest(manifest, out_dir / MANIFEST_FILE)
    truth = {
        "spec": spec.model_dump(mode="json"),
        "participants": truth_participants,
        "trials": truth_trials,
    }
    with open(out_dir / GROUND_TRUTH_FILE, "w", encoding="utf-8", newline="\n") as handle:
        json.dump(truth, handle, indent=2, sort_keys=True)
        handle.write("\n")
    logger.info("Wrote %d synthetic trials to %s", len(entries), out_dir)
    return manifest
