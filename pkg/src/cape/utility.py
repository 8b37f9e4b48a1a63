"""Per-candidate utility scores combining contextual logits and distances.

For an original token with distance row D_raw and a context logit vector L,
the score of candidate j is

    u[j] = clip(L[j], 0, B) ** logit_weight * exp(-norm(D_raw)[j]) ** distance_weight

where norm() min-max normalizes distances into [0, 1].  Scores are bounded
in [0, B ** logit_weight]; a larger logit never lowers a score and a larger
raw distance never raises one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DataError
from .vocab import DistanceRow


@dataclass(frozen=True)
class UtilityParams:
    """Importance weights for the logit and distance factors."""

    logit_weight: float = 0.5
    distance_weight: float = 1.0

    def __post_init__(self):
        if self.logit_weight < 0 or self.distance_weight < 0:
            raise ConfigError("utility weights must be nonnegative")
        if self.logit_weight == 0 and self.distance_weight == 0:
            raise ConfigError("at least one utility weight must be positive")


@dataclass(frozen=True)
class UtilityVector:
    """Scores for every candidate replacement of one origin token."""

    origin: int
    scores: np.ndarray
    params: UtilityParams
    bound: float

    def __post_init__(self):
        self.scores.setflags(write=False)

    def __len__(self) -> int:
        return len(self.scores)


def normalize_distances(raw) -> np.ndarray:
    """Min-max normalize a distance row and map through exp(-x).

    Output lies in [e^-1, 1]; the minimum-distance token (the origin itself)
    maps to exactly 1.0.  If all distances are equal the normalized value is
    defined as 0 everywhere, i.e. every candidate gets distance factor 1.
    """
    d = raw.distances if isinstance(raw, DistanceRow) else np.asarray(raw, dtype=np.float64)
    if not np.isfinite(d).all():
        raise DataError("distance row contains non-finite values")
    d_min, d_max = d.min(), d.max()
    if d_max == d_min:
        return np.ones_like(d)
    return np.exp(-(d - d_min) / (d_max - d_min))


def clip_logits(raw: np.ndarray, bound: float) -> np.ndarray:
    """Clamp logits into [0, bound].

    The lower edge is 0 because scores raise logits to a fractional power;
    a negative base would be undefined there.
    """
    if bound <= 0:
        raise ConfigError(f"clip bound must be positive, got {bound}")
    return np.clip(np.asarray(raw, dtype=np.float64), 0.0, bound)


def calibrate_bound(samples) -> float:
    """Choose the clip bound as the largest positive logit seen in ``samples``."""
    best = None
    for vec in samples:
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size == 0:
            continue
        m = float(vec.max())
        if best is None or m > best:
            best = m
    if best is None:
        raise ConfigError("cannot calibrate clip bound from an empty sample list")
    if best <= 0:
        raise ConfigError("cannot calibrate clip bound: no positive logit in samples")
    return best


def hybrid_utility(
    logits: np.ndarray,
    distances: DistanceRow,
    params: UtilityParams,
    bound: float,
) -> UtilityVector:
    """Combine clipped logits and normalized distances into utility scores.

    0 ** 0 evaluates to 1, so a zero weight makes the corresponding factor
    exactly inert (scores then do not depend on that input at all).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != distances.distances.shape:
        raise DataError(
            f"logit length {logits.shape} does not match distance row "
            f"{distances.distances.shape}"
        )
    if not np.isfinite(logits).all():
        raise DataError("logit vector contains non-finite values")
    clipped = clip_logits(logits, bound)
    dist_factor = normalize_distances(distances)
    scores = clipped**params.logit_weight * dist_factor**params.distance_weight
    return UtilityVector(distances.origin, scores, params, bound)
