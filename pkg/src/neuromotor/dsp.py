"""
EMG and force preprocessing.

The EMG chain is band-pass -> rectify -> centered moving RMS -> normalization by
the participant's per-muscle maximum across all trials. Force channels are only
trimmed and baseline corrected; offsets come from gamesync.estimate_offsets.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Optional, Sequence, TypeVar

import numpy as np
from scipy import signal

from neuromotor.core import FORCE_CHANNELS, EmgRecord, SampledSeries, WrenchRecord
from neuromotor.errors import SignalError

logger = logging.getLogger(__name__)

SeriesT = TypeVar("SeriesT", bound=SampledSeries)


@dataclass(frozen=True)
class FilterSpec:
    low_hz: float = 30.0
    high_hz: float = 450.0
    order: int = 4
    sample_rate: Optional[float] = None
    causal: bool = False

    def check(self, sample_rate: float) -> None:
        if self.order < 1:
            raise SignalError(f"filter order must be positive, got {self.order}")
        if not 0 < self.low_hz < self.high_hz < sample_rate / 2:
            raise SignalError(
                f"band {self.low_hz}-{self.high_hz} Hz invalid for {sample_rate:g} Hz sampling "
                f"(needs 0 < low < high < {sample_rate / 2:g})"
            )

    def sos(self, sample_rate: float) -> np.ndarray:
        self.check(sample_rate)
        return signal.butter(
            self.order, [self.low_hz, self.high_hz], btype="bandpass", fs=sample_rate, output="sos"
        )


@dataclass(frozen=True)
class EnvelopeSpec:
    window: int = 400

    def __post_init__(self):
        if self.window < 1:
            raise SignalError(f"RMS window must be at least 1 sample, got {self.window}")


@dataclass(frozen=True)
class NormalizedParticipant:
    envelopes: dict
    maxima: np.ndarray


def trim_to_game_window(series: SeriesT, start: float, end: float) -> SeriesT:
    if not start < end:
        raise SignalError(f"trim window [{start}, {end}] is empty")
    keep = (series.timestamps >= start) & (series.timestamps <= end)
    if not keep.any():
        raise SignalError(
            f"no samples of [{series.start:g}, {series.end:g}] fall inside [{start:g}, {end:g}]"
        )
    if keep.all():
        return series
    return series.with_values(series.values[keep], series.timestamps[keep])


def baseline_correct_forces(wrench: WrenchRecord, offsets) -> WrenchRecord:
    """Subtract constant (bx, by, bz) from the force channels; torques are untouched.

    An axis whose offset is unavailable (None or NaN) is left as recorded.
    """
    b = getattr(offsets, "offsets", offsets)
    b = np.array([np.nan if value is None else value for value in b], dtype=float)
    if b.shape != (len(FORCE_CHANNELS),):
        raise SignalError(f"expected offsets for fx, fy, fz, got shape {b.shape}")
    known = ~np.isnan(b)
    values = np.array(wrench.values, copy=True)
    values[:, np.asarray(FORCE_CHANNELS)[known]] -= b[known]
    return wrench.with_values(values)


def _sample_rate(emg: SampledSeries, spec: FilterSpec) -> float:
    return spec.sample_rate if spec.sample_rate is not None else emg.sample_rate()


def bandpass_filter(emg: SeriesT, spec: FilterSpec = FilterSpec()) -> SeriesT:
    """Butterworth band-pass as second-order sections.

    Zero-phase (forward-backward) by default, so the effective magnitude
    response is the squared design response.
    """
    sos = spec.sos(_sample_rate(emg, spec))
    if spec.causal:
        filtered = signal.sosfilt(sos, emg.values, axis=0)
    else:
        try:
            filtered = signal.sosfiltfilt(sos, emg.values, axis=0)
        except ValueError:
            # series shorter than the default edge padding
            filtered = signal.sosfiltfilt(sos, emg.values, axis=0, padlen=emg.n_samples - 1)
    return emg.with_values(filtered)


def rectify(emg: SeriesT) -> SeriesT:
    return emg.with_values(np.abs(emg.values))


def moving_rms(emg: SeriesT, spec: EnvelopeSpec = EnvelopeSpec()) -> SeriesT:
    """Centered RMS; the window is clipped at both ends and the mean uses the clipped count."""
    values = emg.values
    n = values.shape[0]
    width = spec.window
    squares = np.vstack([np.zeros((1, values.shape[1])), np.cumsum(values**2, axis=0)])

    lo = np.arange(n) - width // 2
    hi = lo + width
    lo = np.clip(lo, 0, n)
    hi = np.clip(hi, 0, n)
    counts = (hi - lo)[:, None]
    mean_square = (squares[hi] - squares[lo]) / counts
    return emg.with_values(np.sqrt(np.clip(mean_square, 0.0, None)))


def envelope(emg: EmgRecord, filter_spec: FilterSpec = FilterSpec(),
             envelope_spec: EnvelopeSpec = EnvelopeSpec()) -> EmgRecord:
    return moving_rms(rectify(bandpass_filter(emg, filter_spec)), envelope_spec)


def normalize_per_muscle(envelopes: Mapping[str, SeriesT] | Sequence[SeriesT]):
    """Divide each channel by its maximum across every supplied trial.

    Accepts a mapping of trial key to envelope (returned as a mapping) or a
    sequence (returned as a list). Returns ``(normalized, maxima)``.
    """
    keyed = isinstance(envelopes, Mapping)
    items = list(envelopes.values()) if keyed else list(envelopes)
    if not items:
        raise SignalError("normalization needs at least one trial")

    maxima = np.max(np.vstack([np.max(item.values, axis=0) for item in items]), axis=0)
    degenerate = [label for label, peak in zip(items[0].channel_labels, maxima) if not peak > 0]
    if degenerate:
        raise SignalError(f"zero maximum for channel(s) {degenerate}; cannot normalize")

    normalized = [item.with_values(np.clip(item.values / maxima, 0.0, 1.0)) for item in items]
    if keyed:
        return dict(zip(envelopes.keys(), normalized)), maxima
    return normalized, maxima


def preprocess_participant(emg_by_trial: Mapping[str, EmgRecord],
                           windows: Mapping[str, tuple[float, float]],
                           filter_spec: FilterSpec = FilterSpec(),
                           envelope_spec: EnvelopeSpec = EnvelopeSpec()) -> NormalizedParticipant:
    """Envelope every trial of one participant, then normalize across them."""
    envelopes = {}
    for key in sorted(emg_by_trial):
        start, end = windows[key]
        trimmed = trim_to_game_window(emg_by_trial[key], start, end)
        envelopes[key] = envelope(trimmed, filter_spec, envelope_spec)
    normalized, maxima = normalize_per_muscle(envelopes)
    logger.debug("Normalized %d trials, maxima %s", len(normalized), np.round(maxima, 6))
    return NormalizedParticipant(envelopes=normalized, maxima=maxima)
