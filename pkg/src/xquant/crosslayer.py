"""Cross-layer code sharing.

Adjacent layers hold similar quantization codes, so a pair (or larger run)
of layers can store a single merged code array instead of one per layer.
The merge is a weighted vote: with weights gamma summing to one,

    e_merged = round_half_down(sum_l gamma_l * e_l)

clamped to the code range. For two layers the merged result depends on
gamma only through which of six intervals gamma_0 falls in, so the
classifier below is exact, not a heuristic. Interval boundaries are tie
points of the rounding rule and are rejected rather than silently binned.
"""

from dataclasses import dataclass

import numpy as np

__all__ = [
    "GAMMA_BOUNDARIES",
    "GAMMA_INTERVALS",
    "DeltaHistogram",
    "GammaBoundaryError",
    "GammaInterval",
    "MergeWeights",
    "classify_gamma",
    "delta_histogram",
    "dominant_share",
    "merge_codes",
]


class GammaBoundaryError(ValueError):
    """Raised when gamma_0 sits exactly on a merge tie point."""


@dataclass(frozen=True)
class MergeWeights:
    """Per-layer vote weights for a merge. Must be a convex combination."""

    gamma: tuple

    def __post_init__(self):
        gamma = tuple(float(g) for g in self.gamma)
        object.__setattr__(self, "gamma", gamma)
        if len(gamma) < 2:
            raise ValueError("merge needs at least two layers")
        if any(g < 0.0 for g in gamma):
            raise ValueError("merge weights must be nonnegative")
        if abs(sum(gamma) - 1.0) > 1e-9:
            raise ValueError(f"merge weights must sum to 1, got {sum(gamma)}")

    @classmethod
    def one_hot(cls, num_layers: int, hot: int) -> "MergeWeights":
        """Weights that copy layer `hot` verbatim."""
        if not 0 <= hot < num_layers:
            raise ValueError(f"hot index {hot} out of range for {num_layers} layers")
        return cls(tuple(1.0 if i == hot else 0.0 for i in range(num_layers)))


def merge_codes(code_arrays, weights: MergeWeights, bit_width: int) -> np.ndarray:
    """Merge per-layer code arrays into one shared array.

    Ties (weighted sum exactly halfway between levels) round down. The
    result is clamped to [0, 2**bit_width - 1] and returned as uint8.
    """
    if len(code_arrays) != len(weights.gamma):
        raise ValueError(
            f"got {len(code_arrays)} code arrays for {len(weights.gamma)} weights"
        )
    arrays = [np.asarray(a) for a in code_arrays]
    length = arrays[0].shape
    for a in arrays[1:]:
        if a.shape != length:
            raise ValueError("code arrays must share a shape")
    acc = np.zeros(length, dtype=np.float64)
    for g, a in zip(weights.gamma, arrays):
        acc += g * a.astype(np.float64)
    merged = np.ceil(acc - 0.5)
    np.clip(merged, 0, 2**bit_width - 1, out=merged)
    return merged.astype(np.uint8)


def dominant_share(codes: np.ndarray) -> np.ndarray:
    """Codes a dominant layer hands to its subordinate: a defensive copy."""
    return np.array(codes, dtype=np.uint8, copy=True)


@dataclass(frozen=True)
class GammaInterval:
    """One cell of the gamma_0 partition for a two-layer merge."""

    label: str
    lower: float
    upper: float
    lower_closed: bool
    upper_closed: bool
    accelerated: bool
    shared_layer: int | None = None

    def contains(self, gamma0: float) -> bool:
        above = gamma0 > self.lower or (self.lower_closed and gamma0 == self.lower)
        below = gamma0 < self.upper or (self.upper_closed and gamma0 == self.upper)
        return above and below


GAMMA_INTERVALS = (
    GammaInterval("[0,1/6)", 0.0, 1 / 6, True, False, True, 1),
    GammaInterval("(1/6,1/4)", 1 / 6, 1 / 4, False, False, False),
    GammaInterval("(1/4,1/2)", 1 / 4, 1 / 2, False, False, False),
    GammaInterval("(1/2,3/4)", 1 / 2, 3 / 4, False, False, False),
    GammaInterval("(3/4,5/6)", 3 / 4, 5 / 6, False, False, False),
    GammaInterval("(5/6,1]", 5 / 6, 1.0, False, True, True, 0),
)

GAMMA_BOUNDARIES = (1 / 6, 1 / 4, 1 / 2, 3 / 4, 5 / 6)


def classify_gamma(gamma0: float) -> GammaInterval:
    """Map a two-layer merge weight gamma_0 to its behavior interval.

    The extreme intervals admit a shortcut: the merged codes equal one
    layer's codes outright (shared_layer), so the merge can be skipped.
    Exact boundary values have no well-defined interval and raise
    GammaBoundaryError.
    """
    gamma0 = float(gamma0)
    if not 0.0 <= gamma0 <= 1.0:
        raise ValueError(f"gamma_0 must lie in [0, 1], got {gamma0}")
    if gamma0 in GAMMA_BOUNDARIES:
        raise GammaBoundaryError(
            f"gamma_0 = {gamma0} is a tie point between intervals"
        )
    for interval in GAMMA_INTERVALS:
        if interval.contains(gamma0):
            return interval
    raise AssertionError("intervals must cover [0, 1] minus boundaries")


@dataclass(frozen=True)
class DeltaHistogram:
    """Distribution of |e_a - e_b| over aligned code arrays."""

    counts: np.ndarray
    total: int

    @property
    def shares(self) -> np.ndarray:
        if self.total == 0:
            return np.zeros_like(self.counts, dtype=np.float64)
        return self.counts / self.total


def delta_histogram(codes_a, codes_b, bit_width: int) -> DeltaHistogram:
    """Histogram of absolute code differences between two aligned arrays.

    Bin d counts positions where |e_a - e_b| == d, for d in
    [0, 2**bit_width - 1]. Large mass at d == 0 is what makes sharing
    codes across layers cheap.
    """
    a = np.asarray(codes_a)
    b = np.asarray(codes_b)
    if a.shape != b.shape:
        raise ValueError(f"code arrays differ in shape: {a.shape} vs {b.shape}")
    top = 2**bit_width - 1
    if a.size and (a.max() > top or b.max() > top):
        raise ValueError(f"codes exceed {bit_width}-bit range")
    delta = np.abs(a.astype(np.int64) - b.astype(np.int64))
    counts = np.bincount(delta.ravel(), minlength=top + 1)
    return DeltaHistogram(counts=counts, total=int(a.size))
