"""
Two-sample nonparametric comparison of cohorts.

Small, tie-free samples get an exact Mann-Whitney p-value by enumerating every
assignment of ranks to the two groups; anything else falls back to the
tie-corrected normal approximation with continuity correction.
"""

from __future__ import annotations

import itertools
import logging
import math
from enum import Enum
from functools import lru_cache

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field
from scipy import stats as sps

from neuromotor.core import Cohort, PoseCondition
from neuromotor.errors import AnalysisError
from neuromotor.metrics import AGGREGATED_METRICS, CohortAggregate

logger = logging.getLogger(__name__)

MIN_COHORT_SIZE = 2
RESULT_COLUMNS = (
    "metric", "condition", "U", "p", "method", "r", "n_post_stroke", "n_healthy",
    "post_stroke_mean", "post_stroke_ci_low", "post_stroke_ci_high",
    "healthy_mean", "healthy_ci_low", "healthy_ci_high",
)

EXACT_MAX_TOTAL = 20


class PValueMethod(str, Enum):
    EXACT = "ExactEnumeration"
    NORMAL = "NormalApproxTieCorrected"


class MannWhitneyResult(BaseModel):
    u: float = Field(ge=0, description="min(U1, U2).")
    p_two_sided: float = Field(gt=0, le=1)
    method: PValueMethod
    n1: int
    n2: int
    tie_count: int = Field(ge=0, description="Number of tied value groups.")


class MeanCI(BaseModel):
    mean: float
    lower: float
    upper: float
    n: int


class CohortComparison(BaseModel):
    metric: str
    condition: PoseCondition
    test: MannWhitneyResult
    r: float = Field(ge=-1, le=1, description="Rank-biserial effect size.")
    post_stroke: MeanCI
    healthy: MeanCI


@lru_cache(maxsize=64)
def exact_u_distribution(n1: int, n2: int) -> tuple[int, ...]:
    """Null counts of U1 = 0..n1*n2 over all C(n1+n2, n1) rank assignments."""
    small, n = min(n1, n2), n1 + n2
    counts = [0] * (n1 * n2 + 1)
    offset = small * (small + 1) // 2
    for ranks in itertools.combinations(range(1, n + 1), small):
        counts[sum(ranks) - offset] += 1
    return tuple(counts)


def _tie_groups(values: np.ndarray) -> int:
    _, counts = np.unique(values, return_counts=True)
    return int(np.sum(counts > 1))


def mann_whitney(sample_a, sample_b) -> MannWhitneyResult:
    a = np.asarray(sample_a, dtype=float)
    b = np.asarray(sample_b, dtype=float)
    if a.size == 0 or b.size == 0:
        raise AnalysisError("Mann-Whitney needs two non-empty samples")
    n1, n2 = a.size, b.size
    pooled = np.concatenate([a, b])

    ranks = sps.rankdata(pooled)
    u1 = float(np.sum(ranks[:n1]) - n1 * (n1 + 1) / 2)
    u = min(u1, n1 * n2 - u1)
    ties = _tie_groups(pooled)

    if np.ptp(pooled) == 0:
        # every observation tied: no evidence either way
        p = 1.0
        method = PValueMethod.NORMAL
    elif n1 + n2 <= EXACT_MAX_TOTAL and ties == 0:
        counts = exact_u_distribution(n1, n2)
        tail = sum(counts[: int(round(u)) + 1])
        p = min(1.0, 2.0 * tail / math.comb(n1 + n2, n1))
        method = PValueMethod.EXACT
    else:
        result = sps.mannwhitneyu(a, b, alternative="two-sided", method="asymptotic", use_continuity=True)
        p = float(result.pvalue)
        if not p > 0:
            p = float(np.nextafter(0.0, 1.0))
        method = PValueMethod.NORMAL
    return MannWhitneyResult(u=u, p_two_sided=p, method=method, n1=n1, n2=n2, tie_count=ties)


def rank_biserial(u: float, n1: int, n2: int) -> float:
    if n1 < 1 or n2 < 1:
        raise AnalysisError("rank-biserial needs n1, n2 >= 1")
    return 1.0 - 2.0 * u / (n1 * n2)


def mean_ci95(sample) -> MeanCI:
    """Student-t 95% interval of the mean."""
    x = np.asarray(sample, dtype=float)
    if x.size < 2:
        raise AnalysisError("a confidence interval needs at least two values")
    mean = float(np.mean(x))
    half = float(sps.t.ppf(0.975, x.size - 1) * np.std(x, ddof=1) / math.sqrt(x.size))
    return MeanCI(mean=mean, lower=mean - half, upper=mean + half, n=int(x.size))


def compare_cohorts(aggregate: CohortAggregate, metric: str,
                    condition: PoseCondition | str) -> CohortComparison:
    post_stroke = aggregate.values(metric, condition, Cohort.POST_STROKE)
    healthy = aggregate.values(metric, condition, Cohort.HEALTHY)
    test = mann_whitney(post_stroke, healthy)
    return CohortComparison(
        metric=metric,
        condition=PoseCondition(condition),
        test=test,
        r=rank_biserial(test.u, test.n1, test.n2),
        post_stroke=mean_ci95(post_stroke),
        healthy=mean_ci95(healthy),
    )


def results_table(aggregate: CohortAggregate, metrics=AGGREGATED_METRICS) -> list[CohortComparison]:
    """Every metric and condition with at least two participants in each cohort."""
    comparisons = []
    for condition in aggregate.conditions():
        sizes = {cohort: aggregate.values(metrics[0], condition, cohort).size for cohort in Cohort}
        small = sorted(cohort.value for cohort, n in sizes.items() if n < MIN_COHORT_SIZE)
        if small:
            logger.warning("Skipping condition %s: fewer than %d participants in %s",
                           condition.value, MIN_COHORT_SIZE, ", ".join(small))
            continue
        comparisons.extend(compare_cohorts(aggregate, metric, condition) for metric in metrics)
    return comparisons


def comparisons_to_frame(comparisons: list[CohortComparison]) -> pd.DataFrame:
    return pd.DataFrame([
        {
            "metric": c.metric,
            "condition": c.condition.value,
            "U": c.test.u,
            "p": c.test.p_two_sided,
            "method": c.test.method.value,
            "r": c.r,
            "n_post_stroke": c.test.n1,
            "n_healthy": c.test.n2,
            "post_stroke_mean": c.post_stroke.mean,
            "post_stroke_ci_low": c.post_stroke.lower,
            "post_stroke_ci_high": c.post_stroke.upper,
            "healthy_mean": c.healthy.mean,
            "healthy_ci_low": c.healthy.lower,
            "healthy_ci_high": c.healthy.upper,
        }
        for c in comparisons
    ], columns=list(RESULT_COLUMNS))
