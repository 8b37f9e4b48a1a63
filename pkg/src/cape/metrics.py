"""Utility and empirical-privacy metrics.

Rouge-L here operates on token-id sequences, so absolute values are only
comparable within one tokenizer.  Mapping statistics quantify how spread
out a single token's replacement distribution is: the number of distinct
outputs observed over repeated trials, and how often the token survives
unchanged.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .providers import ContextWindow
from .sampler import (
    bucket_probabilities,
    bucketize,
    derive_rng,
    sample,
    standard_em_probabilities,
)
from .utility import calibrate_bound, hybrid_utility

DEFAULT_TRIALS = 1000


def rouge_l_f1(reference, candidate) -> float:
    """Longest-common-subsequence F1 between two token sequences.

    P = LCS/|candidate|, R = LCS/|reference|, F1 = 2PR/(P+R); 0.0 whenever
    the LCS is empty.  Symmetric in its arguments.
    """
    ref = list(reference)
    cand = list(candidate)
    if not ref or not cand:
        return 0.0
    # rolling single-row LCS table
    prev = [0] * (len(cand) + 1)
    for r in ref:
        cur = [0] * (len(cand) + 1)
        for j, c in enumerate(cand, start=1):
            if r == c:
                cur[j] = prev[j - 1] + 1
            else:
                cur[j] = max(prev[j], cur[j - 1])
        prev = cur
    lcs = prev[-1]
    if lcs == 0:
        return 0.0
    precision = lcs / len(cand)
    recall = lcs / len(ref)
    return 2.0 * precision * recall / (precision + recall)


@dataclass(frozen=True)
class MappingStats:
    token_id: int
    trials: int
    distinct_outputs: int
    retention_count: int

    @property
    def retention_ratio(self) -> float:
        return self.retention_count / self.trials

    def to_json_obj(self) -> dict:
        return {
            "token_id": self.token_id,
            "trials": self.trials,
            "distinct_outputs": self.distinct_outputs,
            "retention_count": self.retention_count,
            "retention_ratio": self.retention_ratio,
        }


def mapping_stats(
    token_id: int,
    config,
    provider,
    distances,
    context: ContextWindow | None = None,
    trials: int = DEFAULT_TRIALS,
) -> MappingStats:
    """Replacement-distribution statistics for one token in one fixed context.

    The utility vector (and hence the bucket partition) is deterministic
    given the context, so it is computed once and then sampled ``trials``
    times with independent derived streams.  Results depend on the supplied
    context; there is no context-free mapping size under a contextual
    utility.
    """
    if trials < 1:
        raise ConfigError(f"trials must be >= 1, got {trials}")
    if context is None:
        context = ContextWindow((int(token_id),), 0, config.mode)
    logits = provider.context_logits(context)
    bound = config.clip_bound if config.clip_bound is not None else calibrate_bound([logits])
    utilities = hybrid_utility(logits, distances.row(token_id), config.params, bound)
    buckets = bucketize(utilities, config.n_buckets)
    seen = set()
    retained = 0
    for trial in range(trials):
        rng = derive_rng(config.seed, "mapping", token_id, trial)
        outcome = sample(buckets, config.epsilon, rng)
        seen.add(outcome.token_id)
        if outcome.token_id == token_id:
            retained += 1
    return MappingStats(token_id, trials, len(seen), retained)


def long_tail_bound(k: int, epsilon: float, vocab_size: int) -> float:
    """Analytic ceiling on top-k to remaining probability mass, k*e^eps/(N-k)."""
    if not 0 < k < vocab_size:
        raise ConfigError(f"k must be in (0, {vocab_size}), got {k}")
    return k * float(np.exp(epsilon)) / (vocab_size - k)


@dataclass(frozen=True)
class CdfDiagnostic:
    """Sorted per-token probabilities and cumulative mass, both mechanisms."""

    standard_probs: np.ndarray
    standard_cumulative: np.ndarray
    bucketized_probs: np.ndarray
    bucketized_cumulative: np.ndarray
    analytic_bound: float
    top_k_mass_standard: float
    top_k_mass_bucketized: float
    k: int

    def tail_mass(self, threshold: float = 1e-4) -> tuple[float, float]:
        """Total mass of candidates with individual probability < threshold,
        as (standard, bucketized)."""
        std = float(self.standard_probs[self.standard_probs < threshold].sum())
        bkt = float(self.bucketized_probs[self.bucketized_probs < threshold].sum())
        return std, bkt

    def write_csv(self, standard_path, bucketized_path) -> None:
        for path, probs, cum in (
            (standard_path, self.standard_probs, self.standard_cumulative),
            (bucketized_path, self.bucketized_probs, self.bucketized_cumulative),
        ):
            with open(path, "w", newline="", encoding="utf-8") as f:
                writer = csv.writer(f)
                writer.writerow(["probability", "cumulative_mass"])
                for p, c in zip(probs, cum):
                    writer.writerow([repr(float(p)), repr(float(c))])


def cdf_diagnostic(utilities, epsilon: float, n_buckets: int, k: int = 10) -> CdfDiagnostic:
    """Compare standard-EM and bucketized sampling distributions at equal eps.

    The standard mechanism uses the utility range as its sensitivity; the
    bucketized one uses its bucket-mean spread.  Probabilities come out
    ascending, paired with their cumulative mass, ready for CDF plotting.
    """
    scores = utilities.scores if hasattr(utilities, "scores") else np.asarray(utilities)
    spread = float(scores.max() - scores.min())
    if spread == 0.0:
        p_std = np.full(scores.size, 1.0 / scores.size)
    else:
        p_std = standard_em_probabilities(scores, epsilon, spread)
    buckets = bucketize(scores, n_buckets)
    p_bkt = bucket_probabilities(buckets, epsilon)
    p_std = np.sort(p_std)
    p_bkt = np.sort(p_bkt)
    return CdfDiagnostic(
        standard_probs=p_std,
        standard_cumulative=np.cumsum(p_std),
        bucketized_probs=p_bkt,
        bucketized_cumulative=np.cumsum(p_bkt),
        analytic_bound=long_tail_bound(k, epsilon, scores.size),
        top_k_mass_standard=float(p_std[-k:].sum()),
        top_k_mass_bucketized=float(p_bkt[-k:].sum()),
        k=k,
    )
