"""
Muscle synergy analysis.

E (muscles x time) is factored as W @ H with nonnegative W (synergy vectors in
its columns) and H (activation coefficients in its rows). The number of
synergies is chosen from the variance-accounted-for curve over ranks 1..8, and
decompositions are grouped with k-means in three ways:

1. every synergy vector is a point;
2. only each decomposition's top-n synergies (by activation energy) are
   points, and owners are labeled by majority vote;
3. each participant's synergies from every condition and task are concatenated
   (fixed slot order, energy order within a slot, zero-padded) into one point
   per participant.
"""

from __future__ import annotations

import logging
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable, Literal, Mapping, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from neuromotor.errors import AnalysisError

logger = logging.getLogger(__name__)

MAX_SYNERGIES = 8
VAF_THRESHOLD = 0.90
VAF_INCREMENT = 0.03
MONOTONE_SLACK = 1e-12


@dataclass(frozen=True, eq=False)
class SynergyDecomposition:
    k: int
    W: np.ndarray
    H: np.ndarray
    objective: float
    seed: Optional[int]
    n_iter: int
    converged: bool
    objective_trace: tuple[float, ...] = ()

    @property
    def energy(self) -> np.ndarray:
        """Activation energy per synergy (row sums of H)."""
        return self.H.sum(axis=1)

    def reconstruction(self) -> np.ndarray:
        return self.W @ self.H


@dataclass(frozen=True, eq=False)
class VafCurve:
    values: np.ndarray
    decompositions: tuple[SynergyDecomposition, ...]
    optimal_k: int
    saturated: bool

    def best(self, k: Optional[int] = None) -> SynergyDecomposition:
        return self.decompositions[(k or self.optimal_k) - 1]


@dataclass(frozen=True, eq=False)
class ClusterAssignment:
    procedure: Optional[int]
    k: int
    labels: np.ndarray
    inertia: float
    items: tuple[str, ...] = ()
    owner_labels: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "procedure": self.procedure,
            "k": self.k,
            "inertia": self.inertia,
            "items": list(self.items),
            "labels": [int(label) for label in self.labels],
            "owner_labels": {owner: int(label) for owner, label in sorted(self.owner_labels.items())},
        }


@dataclass(frozen=True, eq=False)
class SubtaskSegment:
    label: int
    index: int
    E: np.ndarray


def _check_matrix(E) -> np.ndarray:
    E = np.asarray(E, dtype=float)
    if E.ndim != 2:
        raise AnalysisError(f"EMG matrix must be 2-d, got shape {E.shape}")
    if np.any(E < 0) or not np.all(np.isfinite(E)):
        raise AnalysisError("EMG matrix must be finite and nonnegative")
    if not np.any(E > 0):
        raise AnalysisError("EMG matrix is all zeros")
    return E


def _objective(E: np.ndarray, W: np.ndarray, H: np.ndarray) -> float:
    residual = E - W @ H
    return float(np.sum(residual * residual))


def normalize_columns(W: np.ndarray, H: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Scale W columns to unit length and push the scale into the rows of H."""
    norms = np.linalg.norm(W, axis=0)
    norms = np.where(norms > 0, norms, 1.0)
    return W / norms, H * norms[:, None]


def _fit_once(E: np.ndarray, k: int, seed: int, max_iter: int, tol: float) -> SynergyDecomposition:
    rng = np.random.default_rng(seed)
    n_rows, n_cols = E.shape
    scale = np.sqrt(E.mean() / k)
    W = scale * rng.uniform(0.1, 1.0, size=(n_rows, k))
    H = scale * rng.uniform(0.1, 1.0, size=(k, n_cols))

    tiny = np.finfo(float).tiny
    slack = MONOTONE_SLACK * float(np.sum(E * E))
    previous = _objective(E, W, H)
    trace = [previous]
    converged = False
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        H *= (W.T @ E) / np.maximum(W.T @ W @ H, tiny)
        W *= (E @ H.T) / np.maximum(W @ (H @ H.T), tiny)
        current = _objective(E, W, H)
        trace.append(current)
        if current > previous + slack:
            raise AnalysisError(
                f"NMF objective rose from {previous:.6g} to {current:.6g} at iteration {n_iter}"
            )
        if previous == 0 or (previous - current) / previous < tol:
            converged = True
            previous = current
            break
        previous = current

    W, H = normalize_columns(W, H)
    return SynergyDecomposition(
        k=k, W=W, H=H, objective=previous, seed=seed, n_iter=n_iter,
        converged=converged, objective_trace=tuple(trace),
    )


def _identity_candidate(E: np.ndarray) -> SynergyDecomposition:
    n_rows = E.shape[0]
    return SynergyDecomposition(
        k=n_rows, W=np.eye(n_rows), H=E.copy(), objective=0.0, seed=None, n_iter=0, converged=True
    )


def nmf(E, k: int, seeds: Sequence[int], max_iter: int = 500, tol: float = 1e-6) -> SynergyDecomposition:
    """Best-of-seeds Lee-Seung multiplicative-update NMF under the Frobenius loss.

    When ``k`` equals the number of muscles the exact factorization W = I,
    H = E is also a candidate.

    Args:
        E: Nonnegative matrix, muscles x samples.
        k: Number of synergies, 1..min(8, muscles).
        seeds: One random initialization per seed.
        max_iter: Update cap per initialization.
        tol: Relative objective decrease that counts as converged.

    Returns:
        The lowest-objective decomposition, W columns at unit length.
    """
    E = _check_matrix(E)
    if not 1 <= k <= min(MAX_SYNERGIES, E.shape[0]):
        raise AnalysisError(f"synergy count {k} outside 1..{min(MAX_SYNERGIES, E.shape[0])}")
    seeds = list(seeds)
    if not seeds:
        raise AnalysisError("NMF needs at least one seed")

    candidates = [_fit_once(E, k, int(seed), max_iter, tol) for seed in seeds]
    if k == E.shape[0]:
        candidates.append(_identity_candidate(E))
    return min(candidates, key=lambda decomposition: decomposition.objective)


def vaf(E, W, H) -> float:
    E = np.asarray(E, dtype=float)
    total = float(np.sum(E * E))
    if total == 0:
        raise AnalysisError("VAF is undefined for an all-zero matrix")
    return max(0.0, 1.0 - _objective(E, np.asarray(W), np.asarray(H)) / total)


def vaf_per_channel(E, W, H) -> np.ndarray:
    """Per-muscle VAF; NaN for silent channels."""
    E = np.asarray(E, dtype=float)
    residual = np.sum((E - np.asarray(W) @ np.asarray(H)) ** 2, axis=1)
    energy = np.sum(E * E, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        values = 1.0 - residual / energy
    return np.where(energy > 0, np.clip(values, 0.0, None), np.nan)


def optimal_count_from_curve(values: Sequence[float], threshold: float = VAF_THRESHOLD,
                             increment: float = VAF_INCREMENT) -> tuple[int, bool]:
    """Smallest k with VAF above ``threshold`` whose next-rank gain is below ``increment``.

    The last rank needs no gain check. Returns ``(k, saturated)``; when no rank
    qualifies the last rank is returned with ``saturated`` set.
    """
    values = list(values)
    top = len(values)
    for k in range(1, top + 1):
        current = values[k - 1]
        if current > threshold and (k == top or values[k] - current < increment):
            return k, False
    return top, True


def vaf_curve(E, seeds: Sequence[int], max_k: int = MAX_SYNERGIES, max_iter: int = 500,
              tol: float = 1e-6, threshold: float = VAF_THRESHOLD,
              increment: float = VAF_INCREMENT) -> VafCurve:
    E = _check_matrix(E)
    max_k = min(max_k, E.shape[0])
    decompositions = tuple(nmf(E, k, seeds, max_iter, tol) for k in range(1, max_k + 1))
    values = np.array([vaf(E, d.W, d.H) for d in decompositions])
    k_opt, saturated = optimal_count_from_curve(values, threshold, increment)
    return VafCurve(values=values, decompositions=decompositions, optimal_k=k_opt, saturated=saturated)


def optimal_synergy_count(E, seeds: Sequence[int], **kwargs) -> tuple[int, VafCurve]:
    curve = vaf_curve(E, seeds, **kwargs)
    if curve.saturated:
        logger.debug("No rank met the VAF rule; reporting k=%d as saturated", curve.optimal_k)
    return curve.optimal_k, curve


def _canonical_labels(labels: np.ndarray) -> np.ndarray:
    """Renumber clusters in order of first appearance."""
    mapping = {}
    for label in labels:
        mapping.setdefault(int(label), len(mapping))
    return np.array([mapping[int(label)] for label in labels], dtype=int)


def kmeans(points, k: int, seeds: Sequence[int], max_iter: int = 300) -> ClusterAssignment:
    """Lloyd k-means from k-means++ seeding; the lowest-inertia seed wins."""
    points = np.asarray(points, dtype=float)
    if points.ndim == 1:
        points = points[:, None]
    if k < 1:
        raise AnalysisError(f"cluster count must be positive, got {k}")
    if points.shape[0] < k:
        raise AnalysisError(f"{points.shape[0]} points cannot form {k} clusters")
    seeds = list(seeds)
    if not seeds:
        raise AnalysisError("k-means needs at least one seed")

    best = None
    for seed in seeds:
        model = KMeans(
            n_clusters=k, init="k-means++", n_init=1, max_iter=max_iter,
            random_state=int(seed) % 2**32, algorithm="lloyd",
        )
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", ConvergenceWarning)
            model.fit(points)
        if best is None or model.inertia_ < best.inertia_:
            best = model
    return ClusterAssignment(
        procedure=None, k=k, labels=_canonical_labels(best.labels_), inertia=max(0.0, float(best.inertia_))
    )


def _majority(labels: Iterable[int]) -> int:
    counts = Counter(int(label) for label in labels)
    top = max(counts.values())
    return min(label for label, count in counts.items() if count == top)


def _energy_order(decomposition: SynergyDecomposition) -> np.ndarray:
    return np.argsort(-decomposition.energy, kind="stable")


def _owner_slots(group) -> dict[str, SynergyDecomposition]:
    if isinstance(group, SynergyDecomposition):
        return {"0": group}
    if isinstance(group, Mapping):
        return {str(slot): decomposition for slot, decomposition in group.items()}
    return {str(index): decomposition for index, decomposition in enumerate(group)}


def _synergy_points(procedure: int, groups: dict[str, dict[str, SynergyDecomposition]],
                    top_n: Optional[int]) -> tuple[np.ndarray, list[str]]:
    points, owners = [], []
    for owner, slots in groups.items():
        for slot in sorted(slots):
            decomposition = slots[slot]
            order = _energy_order(decomposition)
            if procedure == 2:
                order = order[: top_n or decomposition.k]
            for column in order:
                points.append(decomposition.W[:, column])
                owners.append(owner)
    return np.array(points), owners


def concatenated_points(groups: dict[str, dict[str, SynergyDecomposition]]) -> tuple[np.ndarray, list[str]]:
    """One vector per owner: every slot's synergies in energy order, slot by slot.

    Slots are visited in sorted order over the union of all owners' slots. Each
    slot occupies n_muscles * max_k entries, zero-padded when the slot has fewer
    synergies or is missing for that owner.
    """
    decompositions = [d for slots in groups.values() for d in slots.values()]
    n_muscles = {d.W.shape[0] for d in decompositions}
    if len(n_muscles) > 1:
        raise AnalysisError(f"synergy vectors differ in length: {sorted(n_muscles)}")
    width = n_muscles.pop() * max(d.k for d in decompositions)
    slot_names = sorted({slot for slots in groups.values() for slot in slots})

    points = []
    for slots in groups.values():
        blocks = []
        for slot in slot_names:
            block = np.zeros(width)
            if slot in slots:
                vector = slots[slot].W[:, _energy_order(slots[slot])].T.ravel()
                block[: vector.size] = vector
            blocks.append(block)
        points.append(np.concatenate(blocks))
    return np.array(points), list(groups)


def cluster_procedure(procedure: Literal[1, 2, 3],
                      decompositions: Mapping[str, Mapping[str, SynergyDecomposition]
                                              | Sequence[SynergyDecomposition] | SynergyDecomposition],
                      k_range: Iterable[int], seeds: Sequence[int], top_n: Optional[int] = None,
                      max_iter: int = 300) -> dict[int, ClusterAssignment]:
    """Cluster synergies grouped by owner (usually a participant id).

    Procedures 1 and 2 cluster individual synergy vectors (all of them, or each
    decomposition's ``top_n`` by energy) and label each owner by majority vote.
    Procedure 3 clusters one concatenated vector per owner, so every owner
    belongs to exactly one cluster. Cluster counts larger than the number of
    available points are skipped.

    Args:
        procedure: 1, 2 or 3.
        decompositions: Owner id to that owner's decompositions, keyed by slot
            (e.g. ``"A/XAxis"``) or as a sequence, or a single decomposition.
        k_range: Cluster counts to try.
        seeds: k-means seeds; the lowest-inertia seed wins for every count.
        top_n: Synergies per decomposition used by procedure 2 (all when None).
        max_iter: Lloyd iteration cap.

    Returns:
        Cluster count to assignment. For procedure 3 ``items`` are the owner
        ids and ``labels`` is indexed like them.
    """
    if procedure not in (1, 2, 3):
        raise AnalysisError(f"unknown clustering procedure {procedure}")
    groups = {owner: _owner_slots(decompositions[owner]) for owner in sorted(decompositions)}
    groups = {owner: slots for owner, slots in groups.items() if slots}
    if not groups:
        raise AnalysisError("no decompositions to cluster")

    if procedure == 3:
        points, owners = concatenated_points(groups)
        item_ids = tuple(owners)
    else:
        points, owners = _synergy_points(procedure, groups, top_n)
        item_ids = tuple(f"{owner}:{i}" for i, owner in enumerate(owners))

    results = {}
    for k in sorted(set(k_range)):
        if k > points.shape[0]:
            logger.debug("Procedure %d: skipping k=%d with only %d points", procedure, k, points.shape[0])
            continue
        assignment = kmeans(points, k, seeds, max_iter)
        by_owner = {}
        for owner, label in zip(owners, assignment.labels):
            by_owner.setdefault(owner, []).append(label)
        results[k] = ClusterAssignment(
            procedure=procedure,
            k=k,
            labels=assignment.labels,
            inertia=assignment.inertia,
            items=item_ids,
            owner_labels={owner: _majority(labels) for owner, labels in by_owner.items()},
        )
    return results


def match_synergies(reference_W, W) -> tuple[np.ndarray, np.ndarray]:
    """Order the columns of ``W`` to best match ``reference_W`` by cosine similarity.

    Returns ``(order, similarity)`` where ``W[:, order[i]]`` is paired with
    ``reference_W[:, i]``.
    """
    reference = np.asarray(reference_W, dtype=float)
    W = np.asarray(W, dtype=float)
    ref_norm = np.linalg.norm(reference, axis=0)
    w_norm = np.linalg.norm(W, axis=0)
    denom = np.outer(np.where(ref_norm > 0, ref_norm, 1.0), np.where(w_norm > 0, w_norm, 1.0))
    cosine = (reference.T @ W) / denom
    rows, cols = linear_sum_assignment(cosine, maximize=True)
    return cols[np.argsort(rows)], cosine[rows, cols][np.argsort(rows)]


def segment_by_subtask(E, labels, mode: Literal["direction", "repetition"] = "direction") -> list[SubtaskSegment]:
    """Split E by subtask label.

    ``direction`` concatenates all samples of each direction; ``repetition``
    keeps every contiguous run as its own segment.
    """
    E = np.asarray(E, dtype=float)
    labels = np.asarray(labels)
    if labels.shape != (E.shape[1],):
        raise AnalysisError("one subtask label per EMG sample is required")
    if mode == "direction":
        return [
            SubtaskSegment(label=int(label), index=0, E=E[:, labels == label])
            for label in np.unique(labels)
        ]
    if mode != "repetition":
        raise AnalysisError(f"unknown segmentation mode {mode!r}")

    boundaries = np.flatnonzero(np.diff(labels)) + 1
    starts = np.concatenate([[0], boundaries])
    stops = np.concatenate([boundaries, [labels.size]])
    seen = Counter()
    segments = []
    for start, stop in zip(starts, stops):
        label = int(labels[start])
        segments.append(SubtaskSegment(label=label, index=seen[label], E=E[:, start:stop]))
        seen[label] += 1
    return segments
