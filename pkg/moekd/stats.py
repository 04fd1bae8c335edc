"""
Paired comparison statistics: Wilcoxon signed-rank test and Cliff's delta.
"""

import math
from dataclasses import dataclass

import numpy as np
from django.core.exceptions import ValidationError
from scipy.stats import norm, rankdata

EXACT_MAX_N = 25
MIN_NONZERO = 5

# |delta| upper bounds for negligible, small and medium effects.
EFFECT_THRESHOLDS = ((0.147, "negligible"), (0.33, "small"), (0.474, "medium"))


def _paired_differences(x, y):
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValidationError(
            f"Paired vectors must have equal length, got {x.shape} and {y.shape}.", code="length_mismatch"
        )
    differences = x - y
    return differences[differences != 0.0]


def _rank_sum_counts(doubled_ranks):
    """counts[s] = number of sign assignments whose doubled positive rank sum is s."""
    total = int(sum(doubled_ranks))
    counts = np.zeros(total + 1, dtype=object)
    counts[0] = 1
    for rank in doubled_ranks:
        shifted = np.zeros_like(counts)
        shifted[rank:] = counts[: total + 1 - rank]
        counts = counts + shifted
    return counts


def wilcoxon_signed_rank(x, y):
    """
    Two-sided Wilcoxon signed-rank p-value for paired samples.

    Zero differences are dropped and tied magnitudes get mid-ranks. Up to 25
    nonzero differences the p-value is exact (full distribution of the positive
    rank sum over all sign assignments, computed on doubled ranks so mid-ranks
    stay integral); above that a normal approximation with continuity and tie
    correction is used.

    Raises:
        ValidationError: unequal lengths, or fewer than 5 nonzero differences
    """
    differences = _paired_differences(x, y)
    n = differences.shape[0]
    if n < MIN_NONZERO:
        raise ValidationError(
            f"Need at least {MIN_NONZERO} nonzero differences, got {n}.", code="too_few_differences"
        )

    ranks = rankdata(np.abs(differences))
    w_plus = float(ranks[differences > 0].sum())

    if n <= EXACT_MAX_N:
        doubled = [int(round(2 * r)) for r in ranks]
        counts = _rank_sum_counts(doubled)
        observed = int(round(2 * w_plus))
        total = 2**n
        lower = sum(counts[: observed + 1]) / total
        upper = sum(counts[observed:]) / total
        return float(min(1.0, 2.0 * min(lower, upper)))

    mean = n * (n + 1) / 4.0
    _, tie_sizes = np.unique(ranks, return_counts=True)
    variance = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_sizes**3 - tie_sizes)) / 48.0
    z = max(abs(w_plus - mean) - 0.5, 0.0) / math.sqrt(variance)
    return float(min(1.0, 2.0 * norm.sf(z)))


def cliffs_delta(x, y):
    """
    (#{x_i > y_j} - #{x_i < y_j}) / (|x| |y|) over all pairs.

    Raises:
        ValidationError: either vector is empty
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.size == 0 or y.size == 0:
        raise ValidationError("Cliff's delta needs two non-empty vectors.", code="empty")
    signs = np.sign(x[:, np.newaxis] - y[np.newaxis, :])
    return float(signs.sum()) / (x.size * y.size)


def effect_size_label(delta):
    magnitude = abs(delta)
    for bound, label in EFFECT_THRESHOLDS:
        if magnitude < bound:
            return label
    return "large"


@dataclass(frozen=True)
class ComparisonReport:
    methods: tuple
    x: tuple
    y: tuple
    p_value: float | None
    delta: float
    effect: str
    note: str = ""

    def to_dict(self):
        return {
            "methods": list(self.methods),
            "x": list(self.x),
            "y": list(self.y),
            "wilcoxon_p": self.p_value,
            "cliffs_delta": self.delta,
            "effect": self.effect,
            "note": self.note,
        }


def compare(method_a, x, method_b, y):
    """
    Wilcoxon p-value and Cliff's delta for two paired metric vectors.

    With fewer than 5 nonzero differences the p-value is None and ``note``
    says so; the effect size is still reported.
    """
    x = tuple(float(v) for v in x)
    y = tuple(float(v) for v in y)
    if len(x) != len(y):
        raise ValidationError(
            f"{method_a} has {len(x)} values, {method_b} has {len(y)}.", code="length_mismatch"
        )
    delta = cliffs_delta(x, y)
    try:
        p_value, note = wilcoxon_signed_rank(x, y), ""
    except ValidationError as exc:
        if exc.code != "too_few_differences":
            raise
        p_value, note = None, "insufficient pairs"
    return ComparisonReport((method_a, method_b), x, y, p_value, delta, effect_size_label(delta), note)
