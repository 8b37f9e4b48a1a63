"""Private selection: standard and bucketized exponential mechanisms.

The bucketized mechanism partitions candidates into equal-width utility
buckets, selects a bucket with exponential-mechanism weights on the bucket
mean utilities, then picks a member uniformly.  Restricting low-utility
candidates to shared buckets suppresses the long-tail mass that plain EM
accumulates over large vocabularies, at the cost of an extra budget term
eps' = ln(max_i,j |b_i| / |b_j|) determined by realized bucket cardinalities.

All probability computations run in log space with max subtraction, so large
epsilon never overflows.  Sampling consumes only ``random.Random.random()``
draws; that generator's output stream is guaranteed stable across Python
releases, which keeps seeded runs reproducible.
"""

from __future__ import annotations

import hashlib
import random
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .utility import UtilityVector


def derive_rng(seed: int, *path) -> random.Random:
    """A random stream keyed by (seed, *path), independent of sibling streams.

    Streams are derived by hashing the key material, so results do not depend
    on the order in which streams are created or consumed.
    """
    material = ":".join([str(seed), *map(str, path)]).encode("utf-8")
    return random.Random(int.from_bytes(hashlib.sha256(material).digest()[:16], "big"))


def _scores(utilities) -> np.ndarray:
    if isinstance(utilities, UtilityVector):
        return utilities.scores
    return np.asarray(utilities, dtype=np.float64)


def _check_epsilon(epsilon: float) -> None:
    if not epsilon > 0:
        raise ConfigError(f"epsilon must be positive, got {epsilon}")


@dataclass(frozen=True)
class Bucket:
    """One utility interval: representative mean plus its member token ids."""

    mean_utility: float
    member_ids: np.ndarray

    def __post_init__(self):
        if len(self.member_ids) == 0:
            raise DataError("bucket must have at least one member")
        self.member_ids.setflags(write=False)

    @property
    def size(self) -> int:
        return len(self.member_ids)


@dataclass
class BucketSet:
    """Equal-width partition of one utility vector, ascending by mean.

    ``sensitivity`` is the per-origin spread of bucket means (max - min),
    the sensitivity the online sampler uses.  ``epsilon_prime`` is the log
    of the largest bucket-cardinality ratio among retained buckets.
    """

    buckets: list[Bucket]
    n_requested: int
    width: float
    vocab_size: int
    sensitivity: float = field(init=False)
    epsilon_prime: float = field(init=False)
    _weight_cache: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        means = [b.mean_utility for b in self.buckets]
        sizes = [b.size for b in self.buckets]
        self.sensitivity = max(means) - min(means) if len(means) > 1 else 0.0
        self.epsilon_prime = float(np.log(max(sizes) / min(sizes)))

    @property
    def n_buckets(self) -> int:
        return len(self.buckets)


@dataclass(frozen=True)
class SamplingOutcome:
    bucket_index: int
    token_id: int
    effective_epsilon: float


def standard_em_probabilities(utilities, epsilon: float, sensitivity: float) -> np.ndarray:
    """Plain exponential-mechanism probabilities p[j] ~ exp(eps*u[j]/(2*delta))."""
    u = _scores(utilities)
    _check_epsilon(epsilon)
    if not sensitivity > 0:
        raise ConfigError(f"sensitivity must be positive, got {sensitivity}")
    if not np.isfinite(u).all():
        raise DataError("utility vector contains non-finite values")
    z = epsilon * u / (2.0 * sensitivity)
    z -= z.max()
    w = np.exp(z)
    return w / w.sum()


def bucketize(utilities, n_buckets: int) -> BucketSet:
    """Partition candidates into equal-width utility buckets.

    A token with utility u goes to bucket floor((u - u_min) / width); the
    maximum utility is clamped into the last bucket so the partition is
    total.  Empty buckets are dropped.
    """
    u = _scores(utilities)
    if n_buckets < 1:
        raise ConfigError(f"bucket count must be >= 1, got {n_buckets}")
    if u.size < 1:
        raise DataError("cannot bucketize an empty utility vector")
    u_min, u_max = float(u.min()), float(u.max())
    if n_buckets == 1 or u_max == u_min:
        bucket = Bucket(float(u.mean()), np.arange(u.size, dtype=np.int64))
        return BucketSet([bucket], n_buckets, u_max - u_min, u.size)
    width = (u_max - u_min) / n_buckets
    idx = np.floor((u - u_min) / width).astype(np.int64)
    np.clip(idx, 0, n_buckets - 1, out=idx)
    buckets = []
    order = np.argsort(idx, kind="stable")
    boundaries = np.searchsorted(idx[order], np.arange(n_buckets + 1))
    for b in range(n_buckets):
        members = order[boundaries[b]:boundaries[b + 1]].astype(np.int64)
        if members.size:
            buckets.append(Bucket(float(u[members].mean()), np.sort(members)))
    return BucketSet(buckets, n_buckets, width, u.size)


def bucket_selection_probabilities(bucket_set: BucketSet, epsilon: float) -> np.ndarray:
    """EM selection probabilities over the retained buckets.

    When every bucket mean is identical (only possible with a single
    retained bucket) the exponent scale is undefined and selection falls
    back to uniform over buckets.
    """
    _check_epsilon(epsilon)
    cached = bucket_set._weight_cache.get(epsilon)
    if cached is not None:
        return cached[0]
    means = np.array([b.mean_utility for b in bucket_set.buckets])
    if bucket_set.sensitivity == 0.0:
        probs = np.full(len(means), 1.0 / len(means))
    else:
        z = epsilon * means / (2.0 * bucket_set.sensitivity)
        z -= z.max()
        w = np.exp(z)
        probs = w / w.sum()
    bucket_set._weight_cache[epsilon] = (probs, np.cumsum(probs))
    return probs


def bucket_probabilities(bucket_set: BucketSet, epsilon: float) -> np.ndarray:
    """Per-token probabilities: bucket EM weight split uniformly over members."""
    probs = bucket_selection_probabilities(bucket_set, epsilon)
    p = np.zeros(bucket_set.vocab_size)
    for bucket, q in zip(bucket_set.buckets, probs):
        p[bucket.member_ids] = q / bucket.size
    return p


def sample(bucket_set: BucketSet, epsilon: float, rng: random.Random) -> SamplingOutcome:
    """Draw one replacement token: EM over buckets, then uniform member."""
    bucket_selection_probabilities(bucket_set, epsilon)
    _, cdf = bucket_set._weight_cache[epsilon]
    b = int(np.searchsorted(cdf, rng.random(), side="right"))
    b = min(b, len(bucket_set.buckets) - 1)
    bucket = bucket_set.buckets[b]
    m = min(int(rng.random() * bucket.size), bucket.size - 1)
    return SamplingOutcome(
        bucket_index=b,
        token_id=int(bucket.member_ids[m]),
        effective_epsilon=epsilon + bucket_set.epsilon_prime,
    )


@dataclass(frozen=True)
class DpRatioReport:
    """Result of exact output-distribution enumeration over all origins."""

    max_ratio: float
    bound: float
    epsilon: float
    epsilon_prime: float
    per_origin_epsilon_prime_max: float
    passed: bool
    bucketized: bool

    @property
    def per_origin_undercounts(self) -> bool:
        """True when the cross-origin cardinality ratio exceeds every
        single-origin report (the per-position budget would understate)."""
        return self.epsilon_prime > self.per_origin_epsilon_prime_max + 1e-12


def exact_output_distributions(
    utilities_by_origin, epsilon: float, n_buckets: int, bucketized: bool = True
) -> tuple[np.ndarray, float, float]:
    """Exact P[R(t) = y] for every origin t, as one row per origin.

    Probabilities are computed with the worst-case sensitivity over all
    origins so the whole family forms one mechanism with a single scale.
    Returns (matrix, epsilon_prime, per_origin_epsilon_prime_max); the
    epsilon_prime terms are 0 for the standard (non-bucketized) mechanism.
    """
    rows = [_scores(u) for u in utilities_by_origin]
    size = rows[0].size
    for u in rows:
        if u.size != size:
            raise DataError("utility vectors must all have the same length")
    if bucketized:
        sets = [bucketize(u, n_buckets) for u in rows]
        delta = max(bs.sensitivity for bs in sets)
        all_sizes = [b.size for bs in sets for b in bs.buckets]
        eps_prime = float(np.log(max(all_sizes) / min(all_sizes)))
        per_origin = max(bs.epsilon_prime for bs in sets)
        matrix = np.empty((len(rows), size))
        for i, bs in enumerate(sets):
            if delta == 0.0:
                matrix[i] = 1.0 / size
                continue
            means = np.array([b.mean_utility for b in bs.buckets])
            z = epsilon * means / (2.0 * delta)
            z -= z.max()
            w = np.exp(z)
            w /= w.sum()
            for bucket, q in zip(bs.buckets, w):
                matrix[i, bucket.member_ids] = q / bucket.size
        return matrix, eps_prime, per_origin
    delta = max(float(u.max() - u.min()) for u in rows)
    if delta == 0.0:
        return np.full((len(rows), size), 1.0 / size), 0.0, 0.0
    matrix = np.vstack([standard_em_probabilities(u, epsilon, delta) for u in rows])
    return matrix, 0.0, 0.0


def dp_ratio_check(
    utilities_by_origin,
    epsilon: float,
    n_buckets: int,
    bucketized: bool = True,
    slack: float = 1e-9,
) -> DpRatioReport:
    """Enumerate all origin pairs and verify the privacy ratio bound.

    For the bucketized mechanism the bound is exp(eps + eps') with eps'
    taken over the bucket cardinalities of *all* origins (neighboring
    inputs induce different partitions, so a single origin's ratio can
    understate the pairwise one).  With ``bucketized=False`` the classic
    exp(eps) bound applies.

    Only intended for small fixture vocabularies; cost grows as |V|^2.
    """
    _check_epsilon(epsilon)
    matrix, eps_prime, per_origin = exact_output_distributions(
        utilities_by_origin, epsilon, n_buckets, bucketized
    )
    if (matrix <= 0).any():
        raise DataError("zero output probability encountered; support must be full")
    ratio = float((matrix.max(axis=0) / matrix.min(axis=0)).max())
    bound = float(np.exp(epsilon + eps_prime))
    return DpRatioReport(
        max_ratio=ratio,
        bound=bound,
        epsilon=epsilon,
        epsilon_prime=eps_prime,
        per_origin_epsilon_prime_max=per_origin,
        passed=ratio <= bound * (1.0 + slack),
        bucketized=bucketized,
    )
