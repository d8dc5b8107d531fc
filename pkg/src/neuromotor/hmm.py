"""
Two-state Gaussian HMMs over normalized EMG envelopes.

Baum-Welch uses scaled forward-backward recursions on emission probabilities
that are shifted by their per-sample maximum; the shifts and scaling factors
are added back when reporting the log-likelihood. Viterbi decoding runs in log
space. Both recursions are compiled with numba.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Literal, Optional

import numba
import numpy as np
from pydantic import BaseModel, Field
from scipy.special import logsumexp

from neuromotor.core import Cohort, EmgRecord, PoseCondition, SubtaskSequence, Trial
from neuromotor.dsp import EnvelopeSpec, FilterSpec, envelope, normalize_per_muscle, trim_to_game_window
from neuromotor.errors import AnalysisError, ExcludedTaskError
from neuromotor.gamesync import derive_subtasks, resample_labels

logger = logging.getLogger(__name__)

CovarianceType = Literal["diag", "full"]

STICKY_SELF = 0.95
INIT_NOISE = 0.1
LL_SLACK = 1e-8  # absolute, in nats
STOCHASTIC_TOL = 1e-9


@numba.njit(cache=True)
def _forward(startprob, transmat, prob):
    n_samples, n_states = prob.shape
    alpha = np.empty((n_samples, n_states))
    scale = np.empty(n_samples)

    total = 0.0
    for i in range(n_states):
        alpha[0, i] = startprob[i] * prob[0, i]
        total += alpha[0, i]
    scale[0] = total
    for i in range(n_states):
        alpha[0, i] /= total

    for t in range(1, n_samples):
        total = 0.0
        for i in range(n_states):
            acc = 0.0
            for j in range(n_states):
                acc += alpha[t - 1, j] * transmat[j, i]
            alpha[t, i] = acc * prob[t, i]
            total += alpha[t, i]
        scale[t] = total
        if total > 0.0:
            for i in range(n_states):
                alpha[t, i] /= total
    return alpha, scale


@numba.njit(cache=True)
def _backward(transmat, prob, scale):
    n_samples, n_states = prob.shape
    beta = np.empty((n_samples, n_states))
    for i in range(n_states):
        beta[n_samples - 1, i] = 1.0
    for t in range(n_samples - 2, -1, -1):
        for i in range(n_states):
            acc = 0.0
            for j in range(n_states):
                acc += transmat[i, j] * prob[t + 1, j] * beta[t + 1, j]
            beta[t, i] = acc / scale[t + 1]
    return beta


@numba.njit(cache=True)
def _transition_counts(alpha, beta, transmat, prob, scale):
    n_samples, n_states = prob.shape
    counts = np.zeros((n_states, n_states))
    for t in range(n_samples - 1):
        for i in range(n_states):
            for j in range(n_states):
                counts[i, j] += (alpha[t, i] * transmat[i, j] * prob[t + 1, j]
                                 * beta[t + 1, j] / scale[t + 1])
    return counts


@numba.njit(cache=True)
def _viterbi(log_start, log_trans, log_emission):
    n_samples, n_states = log_emission.shape
    delta = np.empty((n_samples, n_states))
    back = np.zeros((n_samples, n_states), dtype=np.int64)
    for i in range(n_states):
        delta[0, i] = log_start[i] + log_emission[0, i]

    for t in range(1, n_samples):
        for i in range(n_states):
            best = -np.inf
            arg = 0
            for j in range(n_states):
                value = delta[t - 1, j] + log_trans[j, i]
                if value > best:
                    best = value
                    arg = j
            delta[t, i] = best + log_emission[t, i]
            back[t, i] = arg

    path = np.empty(n_samples, dtype=np.int64)
    last = 0
    for i in range(1, n_states):
        if delta[n_samples - 1, i] > delta[n_samples - 1, last]:
            last = i
    path[n_samples - 1] = last
    for t in range(n_samples - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path, delta[n_samples - 1, last]


@dataclass(frozen=True, eq=False)
class HmmModel:
    n_states: int
    startprob: np.ndarray
    transmat: np.ndarray
    means: np.ndarray
    covars: np.ndarray
    covariance_type: CovarianceType = "diag"
    seed: Optional[int] = None
    loglik_trace: tuple[float, ...] = ()
    n_iter: int = 0
    converged: bool = False

    def __post_init__(self):
        if abs(float(np.sum(self.startprob)) - 1.0) > STOCHASTIC_TOL:
            raise AnalysisError("initial distribution does not sum to 1")
        if np.any(np.abs(self.transmat.sum(axis=1) - 1.0) > STOCHASTIC_TOL):
            raise AnalysisError("transition matrix is not row-stochastic")

    @property
    def n_features(self) -> int:
        return self.means.shape[1]

    def log_emission(self, obs: np.ndarray) -> np.ndarray:
        return _log_emission(obs, self.means, self.covars, self.covariance_type)

    def sample(self, n_samples: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
        """Draw ``(states, observations)`` from the model."""
        rng = np.random.default_rng(seed)
        states = np.empty(n_samples, dtype=np.int64)
        states[0] = rng.choice(self.n_states, p=self.startprob)
        for t in range(1, n_samples):
            states[t] = rng.choice(self.n_states, p=self.transmat[states[t - 1]])
        obs = np.empty((n_samples, self.n_features))
        for i in range(self.n_states):
            mask = states == i
            cov = np.diag(self.covars[i]) if self.covariance_type == "diag" else self.covars[i]
            obs[mask] = rng.multivariate_normal(self.means[i], cov, size=int(mask.sum()))
        return states, obs


@dataclass(frozen=True, eq=False)
class ViterbiPath:
    states: np.ndarray
    log_prob: float

    def __len__(self) -> int:
        return self.states.size


@dataclass(frozen=True, eq=False)
class RestartResult:
    seed: int
    error: float
    model: HmmModel
    path: ViterbiPath
    sample_indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    subtask_labels: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))


class HmmErrorReport(BaseModel):
    trial: str
    participant: str
    cohort: Cohort
    condition: PoseCondition
    task: str
    n_restarts: int = Field(ge=1)
    seeds: list[int]
    errors: list[float] = Field(description="Subtask classification error per restart, in [0, 0.5].")
    mean: float
    variance: float = Field(description="Population variance across restarts.")
    n_samples: int
    n_compared: int = Field(description="Samples where a subtask label was available.")
    decimate: int = 1


def _log_emission(obs, means, covars, covariance_type) -> np.ndarray:
    n_samples, n_features = obs.shape
    n_states = means.shape[0]
    out = np.empty((n_samples, n_states))
    log_2pi = n_features * np.log(2.0 * np.pi)
    for i in range(n_states):
        diff = obs - means[i]
        if covariance_type == "diag":
            out[:, i] = -0.5 * (log_2pi + np.sum(np.log(covars[i]))
                                + np.sum(diff * diff / covars[i], axis=1))
        else:
            chol = np.linalg.cholesky(covars[i])
            solved = np.linalg.solve(chol, diff.T)
            out[:, i] = -0.5 * (log_2pi + 2.0 * np.sum(np.log(np.diag(chol)))
                                + np.sum(solved * solved, axis=0))
    return out


def _e_step(model_parts, obs):
    startprob, transmat, means, covars, covariance_type = model_parts
    log_b = _log_emission(obs, means, covars, covariance_type)
    shift = log_b.max(axis=1)
    prob = np.exp(log_b - shift[:, None])
    alpha, scale = _forward(startprob, transmat, prob)
    if np.any(scale <= 0) or not np.all(np.isfinite(scale)):
        raise AnalysisError("forward recursion underflowed")
    loglik = float(np.sum(np.log(scale)) + np.sum(shift))
    beta = _backward(transmat, prob, scale)
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    xi = _transition_counts(alpha, beta, transmat, prob, scale)
    return loglik, gamma, xi


def _m_step(obs, gamma, xi, previous, floor: float):
    startprob, transmat, means, covars, covariance_type = previous
    n_states, n_features = means.shape
    new_start = gamma[0] / gamma[0].sum()

    new_trans = transmat.copy()
    row_mass = xi.sum(axis=1)
    for i in range(n_states):
        if row_mass[i] > 0:
            new_trans[i] = xi[i] / row_mass[i]

    new_means = means.copy()
    new_covars = covars.copy()
    weight = gamma.sum(axis=0)
    for i in range(n_states):
        if weight[i] <= 0:
            continue
        w = gamma[:, i]
        new_means[i] = w @ obs / weight[i]
        diff = obs - new_means[i]
        if covariance_type == "diag":
            new_covars[i] = np.maximum(w @ (diff * diff) / weight[i], floor)
        else:
            cov = (diff * w[:, None]).T @ diff / weight[i]
            eigvals, eigvecs = np.linalg.eigh(0.5 * (cov + cov.T))
            new_covars[i] = (eigvecs * np.maximum(eigvals, floor)) @ eigvecs.T
    return new_start, new_trans, new_means, new_covars, covariance_type


def _initial_parameters(obs, n_states: int, rng, floor: float, covariance_type: CovarianceType):
    n_samples, n_features = obs.shape
    startprob = np.full(n_states, 1.0 / n_states)
    off = (1.0 - STICKY_SELF) / (n_states - 1)
    transmat = np.full((n_states, n_states), off)
    np.fill_diagonal(transmat, STICKY_SELF)

    order = np.argsort(obs, axis=0, kind="stable")
    bins = np.array_split(np.arange(n_samples), n_states)
    std = obs.std(axis=0)
    means = np.empty((n_states, n_features))
    for i, rows in enumerate(bins):
        means[i] = np.take_along_axis(obs, order[rows], axis=0).mean(axis=0)
    means += INIT_NOISE * std * rng.standard_normal((n_states, n_features))

    variance = np.maximum(obs.var(axis=0), floor)
    if covariance_type == "diag":
        covars = np.tile(variance, (n_states, 1))
    else:
        covars = np.tile(np.diag(variance), (n_states, 1, 1))
    return startprob, transmat, means, covars, covariance_type


def _check_obs(obs, n_states: int) -> np.ndarray:
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.ndim != 2:
        raise AnalysisError(f"observations must be T x D, got shape {obs.shape}")
    if obs.shape[0] < 2 * n_states:
        raise AnalysisError(f"{obs.shape[0]} samples are too few for {n_states} states")
    if not np.all(np.isfinite(obs)):
        raise AnalysisError("observations contain non-finite values")
    return obs


def fit_hmm(obs, n_states: int = 2, seed: int = 0, max_iter: int = 200, tol: float = 1e-4,
            variance_floor: float = 1e-6, covariance_type: CovarianceType = "diag") -> HmmModel:
    """Baum-Welch fit of a Gaussian HMM by scaled forward-backward.

    Args:
        obs: Observations, one row per sample (a 1-d array is one channel).
        n_states: Number of hidden states.
        seed: Seed for the random initial parameters.
        max_iter: EM iteration cap.
        tol: Stop once one iteration gains less than this much log-likelihood.
        variance_floor: Lower bound on every emission variance.
        covariance_type: ``"diag"`` or ``"full"`` emission covariances.

    Returns:
        The fitted model with its per-iteration log-likelihood trace.

    Raises:
        AnalysisError: Degenerate observations, or the log-likelihood falls
            by more than ``LL_SLACK`` between iterations.
    """
    obs = _check_obs(obs, n_states)
    if np.all(obs.var(axis=0) <= variance_floor):
        raise AnalysisError("observations are degenerate: every channel is at the variance floor")

    rng = np.random.default_rng(seed)
    params = _initial_parameters(obs, n_states, rng, variance_floor, covariance_type)
    trace = []
    converged = False
    n_iter = 0
    while True:
        loglik, gamma, xi = _e_step(params, obs)
        if trace and loglik < trace[-1] - LL_SLACK:
            raise AnalysisError(
                f"log-likelihood decreased from {trace[-1]:.10g} to {loglik:.10g} at iteration {n_iter}"
            )
        improved = loglik - trace[-1] if trace else np.inf
        trace.append(loglik)
        if improved < tol:
            converged = True
            break
        if n_iter >= max_iter:
            break
        params = _m_step(obs, gamma, xi, params, variance_floor)
        n_iter += 1

    startprob, transmat, means, covars, _ = params
    return HmmModel(
        n_states=n_states, startprob=startprob, transmat=transmat, means=means, covars=covars,
        covariance_type=covariance_type, seed=seed, loglik_trace=tuple(trace),
        n_iter=n_iter, converged=converged,
    )


def forward_log_likelihood(model: HmmModel, obs) -> float:
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    log_b = model.log_emission(obs)
    shift = log_b.max(axis=1)
    _, scale = _forward(model.startprob, model.transmat, np.exp(log_b - shift[:, None]))
    return float(np.sum(np.log(scale)) + np.sum(shift))


def viterbi(model: HmmModel, obs) -> ViterbiPath:
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    if obs.shape[0] == 0 or not np.all(np.isfinite(obs)):
        raise AnalysisError("Viterbi needs a non-empty, finite observation matrix")
    with np.errstate(divide="ignore"):
        log_start = np.log(model.startprob)
        log_trans = np.log(model.transmat)
    path, log_prob = _viterbi(log_start, log_trans, model.log_emission(obs))
    return ViterbiPath(states=path, log_prob=float(log_prob))


def subtask_error(A, V) -> float:
    """Swap-invariant Hamming fraction between prescribed subtasks and decoded states."""
    a = np.asarray(getattr(A, "labels", A))
    v = np.asarray(getattr(V, "states", V))
    if a.shape != v.shape or a.ndim != 1:
        raise AnalysisError(f"subtask and state sequences differ in length ({a.shape} vs {v.shape})")
    if a.size == 0:
        raise AnalysisError("cannot score empty sequences")
    for name, seq in (("subtask", a), ("state", v)):
        if not np.all((seq == 0) | (seq == 1)):
            raise AnalysisError(f"{name} sequence is not binary")
    hamming = float(np.mean(a != v))
    complement = float(np.mean((1 - a) != v))
    return min(hamming, complement)


def trial_envelope(trial: Trial, filter_spec: FilterSpec = FilterSpec(),
                   envelope_spec: EnvelopeSpec = EnvelopeSpec()) -> EmgRecord:
    """Envelope of one trial normalized by its own maxima."""
    trimmed = trim_to_game_window(trial.emg, trial.game_start, trial.game_end)
    (normalized,), _ = normalize_per_muscle([envelope(trimmed, filter_spec, envelope_spec)])
    return normalized


def multi_restart_error(trial: Trial, envelope_record: Optional[EmgRecord] = None, n_restarts: int = 25,
                        base_seed: int = 0, max_iter: int = 200, tol: float = 1e-4,
                        variance_floor: float = 1e-6, covariance_type: CovarianceType = "diag",
                        decimate: int = 1, epsilon: Optional[float] = None,
                        epsilon_frac: float = 0.02) -> tuple[HmmErrorReport, list[RestartResult]]:
    """Fit ``n_restarts`` HMMs with seeds ``base_seed..base_seed+n-1`` and score each path.

    ``envelope_record`` defaults to the trial's own normalized envelope.
    """
    if not trial.task.is_single_axis:
        raise ExcludedTaskError(f"{trial.key}: HMM analysis covers single-axis tasks only")
    if n_restarts < 1:
        raise AnalysisError("at least one restart is required")
    if decimate < 1:
        raise AnalysisError(f"decimation factor must be positive, got {decimate}")

    env = envelope_record if envelope_record is not None else trial_envelope(trial)
    timestamps = env.timestamps[::decimate]
    obs = env.values[::decimate]

    subtasks: SubtaskSequence = derive_subtasks(trial.task, trial.game, epsilon, epsilon_frac)
    indices, labels = resample_labels(subtasks, timestamps)

    restarts = []
    for seed in range(base_seed, base_seed + n_restarts):
        model = fit_hmm(obs, 2, seed, max_iter, tol, variance_floor, covariance_type)
        path = viterbi(model, obs)
        error = subtask_error(labels, path.states[indices])
        restarts.append(RestartResult(
            seed=seed, error=error, model=model, path=path,
            sample_indices=indices, subtask_labels=labels,
        ))
    errors = np.array([r.error for r in restarts])

    report = HmmErrorReport(
        trial=trial.key,
        participant=trial.participant.id,
        cohort=trial.participant.cohort,
        condition=trial.condition,
        task=trial.task.task_id.value,
        n_restarts=n_restarts,
        seeds=[r.seed for r in restarts],
        errors=[float(e) for e in errors],
        mean=float(errors.mean()),
        variance=float(errors.var()),
        n_samples=int(obs.shape[0]),
        n_compared=int(indices.size),
        decimate=decimate,
    )
    logger.debug("%s: mean subtask error %.4f over %d restarts", trial.key, report.mean, n_restarts)
    return report, restarts


def brute_force_log_likelihood(model: HmmModel, obs) -> tuple[float, np.ndarray, float]:
    """Exhaustive marginal and MAP path over all state sequences; small T only.

    Returns ``(log_likelihood, best_path, best_log_prob)``.
    """
    obs = np.asarray(obs, dtype=float)
    if obs.ndim == 1:
        obs = obs[:, None]
    n_samples = obs.shape[0]
    if model.n_states ** n_samples > 1 << 16:
        raise AnalysisError("exhaustive enumeration is limited to 65536 sequences")
    log_b = model.log_emission(obs)
    with np.errstate(divide="ignore"):
        log_start = np.log(model.startprob)
        log_trans = np.log(model.transmat)

    grids = np.indices((model.n_states,) * n_samples).reshape(n_samples, -1).T
    scores = log_start[grids[:, 0]] + log_b[0, grids[:, 0]]
    for t in range(1, n_samples):
        scores = scores + log_trans[grids[:, t - 1], grids[:, t]] + log_b[t, grids[:, t]]
    best = int(np.argmax(scores))
    return float(logsumexp(scores)), grids[best], float(scores[best])
