"""Differentially private token perturbation for LLM prompts.

Replaces each sensitive token of a prompt with a random vocabulary token
drawn by a bucketized exponential mechanism over a context-aware utility
(clipped model logits combined with embedding distance), and ships the
attacks and metrics needed to measure the resulting privacy-utility
trade-off.
"""

__version__ = "0.1.0"

from .errors import CapeError, ConfigError, DataError, ProviderError
from .mechanism import (
    MechanismConfig,
    PerturbationRecord,
    PerturbedPrompt,
    Perturber,
    load_artifact,
    perturb_corpus,
    perturb_prompt,
    read_prompts,
)
from .providers import ContextWindow, FileProvider, HttpProvider, RecordingProvider
from .sampler import (
    Bucket,
    BucketSet,
    SamplingOutcome,
    bucket_probabilities,
    bucketize,
    derive_rng,
    dp_ratio_check,
    sample,
    standard_em_probabilities,
)
from .utility import (
    UtilityParams,
    UtilityVector,
    calibrate_bound,
    clip_logits,
    hybrid_utility,
    normalize_distances,
)
from .vocab import (
    DistanceCache,
    DistanceRow,
    EmbeddingTable,
    NonSensitiveSet,
    Vocabulary,
    default_nonsensitive,
    distance_row,
    load_embeddings,
    load_nonsensitive,
    load_vocabulary,
)

__all__ = [
    "Bucket",
    "BucketSet",
    "CapeError",
    "ConfigError",
    "ContextWindow",
    "DataError",
    "DistanceCache",
    "DistanceRow",
    "EmbeddingTable",
    "FileProvider",
    "HttpProvider",
    "MechanismConfig",
    "NonSensitiveSet",
    "PerturbationRecord",
    "PerturbedPrompt",
    "Perturber",
    "ProviderError",
    "RecordingProvider",
    "SamplingOutcome",
    "UtilityParams",
    "UtilityVector",
    "Vocabulary",
    "bucket_probabilities",
    "bucketize",
    "calibrate_bound",
    "clip_logits",
    "default_nonsensitive",
    "derive_rng",
    "distance_row",
    "dp_ratio_check",
    "hybrid_utility",
    "load_artifact",
    "load_embeddings",
    "load_nonsensitive",
    "load_vocabulary",
    "normalize_distances",
    "perturb_corpus",
    "perturb_prompt",
    "read_prompts",
    "sample",
    "standard_em_probabilities",
]
