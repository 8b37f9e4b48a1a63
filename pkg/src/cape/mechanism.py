"""End-to-end prompt perturbation: utility -> buckets -> sample, per token.

Every sensitive position is scored against the ORIGINAL prompt context (not
previously perturbed tokens), so positions are independent given the seed
scheme and corpus runs parallelize freely.  Non-sensitive tokens (stopwords
and punctuation by default) are copied through verbatim under the ``skip``
policy.

Randomness is derived per (seed, prompt content hash, position), which makes
corpus outputs independent of prompt ordering and worker count.  Identical
prompts in one corpus therefore perturb identically; vary the seed to get
fresh draws.
"""

from __future__ import annotations

import json
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

from .errors import ConfigError, DataError, ProviderError
from .providers import MODES, ContextWindow, prompt_key
from .sampler import bucketize, derive_rng, sample
from .utility import UtilityParams, calibrate_bound, hybrid_utility
from .vocab import DistanceCache, NonSensitiveSet, Vocabulary, default_nonsensitive

NONSENSITIVE_POLICIES = ("skip", "perturb-all")


class PartialFailureError(ProviderError):
    """A corpus run failed part-way through (run with --skip-errors to
    continue past failing prompts)."""


@dataclass(frozen=True)
class MechanismConfig:
    """Full parameterization of one perturbation run."""

    epsilon: float
    params: UtilityParams = field(default_factory=UtilityParams)
    n_buckets: int = 50
    clip_bound: float | None = None  # None: calibrate per prompt from its own logits
    nonsensitive_policy: str = "skip"
    seed: int = 0
    mode: str = "bidirectional"

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ConfigError(f"epsilon must be positive, got {self.epsilon}")
        if self.n_buckets < 1:
            raise ConfigError(f"bucket count must be >= 1, got {self.n_buckets}")
        if self.clip_bound is not None and self.clip_bound <= 0:
            raise ConfigError(f"clip bound must be positive, got {self.clip_bound}")
        if self.nonsensitive_policy not in NONSENSITIVE_POLICIES:
            raise ConfigError(f"unknown non-sensitive policy {self.nonsensitive_policy!r}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown context mode {self.mode!r}")

    def to_json_obj(self) -> dict:
        return {
            "epsilon": self.epsilon,
            "lambda_logit": self.params.logit_weight,
            "lambda_distance": self.params.distance_weight,
            "n_buckets": self.n_buckets,
            "clip_bound": self.clip_bound,
            "nonsensitive_policy": self.nonsensitive_policy,
            "seed": self.seed,
            "mode": self.mode,
        }

    @classmethod
    def from_json_obj(cls, obj: dict) -> "MechanismConfig":
        return cls(
            epsilon=obj["epsilon"],
            params=UtilityParams(obj["lambda_logit"], obj["lambda_distance"]),
            n_buckets=obj["n_buckets"],
            clip_bound=obj.get("clip_bound"),
            nonsensitive_policy=obj.get("nonsensitive_policy", "skip"),
            seed=obj.get("seed", 0),
            mode=obj.get("mode", "bidirectional"),
        )


@dataclass(frozen=True)
class PerturbationRecord:
    position: int
    original_id: int
    replacement_id: int
    skipped: bool
    bucket_index: int | None
    effective_epsilon: float | None

    def __post_init__(self):
        if self.skipped and (
            self.replacement_id != self.original_id or self.effective_epsilon is not None
        ):
            raise DataError("skipped positions must copy the token and carry no budget")

    def to_json_obj(self) -> dict:
        return {
            "pos": self.position,
            "orig": self.original_id,
            "repl": self.replacement_id,
            "skipped": self.skipped,
            "bucket": self.bucket_index,
            "eps_effective": self.effective_epsilon,
        }


@dataclass(frozen=True)
class PerturbedPrompt:
    prompt_id: int
    records: tuple[PerturbationRecord, ...]
    config: MechanismConfig

    @property
    def original_ids(self) -> list[int]:
        return [r.original_id for r in self.records]

    @property
    def perturbed_ids(self) -> list[int]:
        return [r.replacement_id for r in self.records]

    @property
    def per_position_epsilon(self) -> list[float | None]:
        return [r.effective_epsilon for r in self.records]

    @property
    def max_effective_epsilon(self) -> float | None:
        spent = [e for e in self.per_position_epsilon if e is not None]
        return max(spent) if spent else None

    def to_json_obj(self) -> dict:
        return {
            "prompt_id": self.prompt_id,
            "original_ids": self.original_ids,
            "perturbed_ids": self.perturbed_ids,
            "records": [r.to_json_obj() for r in self.records],
            "config": self.config.to_json_obj(),
        }


class Perturber:
    """Binds a config to a provider plus vocabulary context and perturbs."""

    def __init__(
        self,
        config: MechanismConfig,
        provider,
        distances: DistanceCache | None = None,
        nonsensitive: NonSensitiveSet | None = None,
    ):
        self.config = config
        self.provider = provider
        if provider.mode != config.mode:
            raise ProviderError(
                f"config mode {config.mode!r} does not match provider mode {provider.mode!r}"
            )
        self.vocab: Vocabulary = provider.vocabulary()
        self.distances = distances or DistanceCache(provider.embedding_table())
        if nonsensitive is None:
            nonsensitive = default_nonsensitive(self.vocab)
        self.nonsensitive = nonsensitive

    def _is_sensitive(self, token_id: int) -> bool:
        if self.config.nonsensitive_policy == "perturb-all":
            return True
        return token_id not in self.nonsensitive

    def perturb_prompt(self, token_ids, prompt_id: int = 0) -> PerturbedPrompt:
        ids = tuple(int(i) for i in token_ids)
        for i in ids:
            if not 0 <= i < self.vocab.size:
                raise DataError(f"token id {i} out of range for vocabulary of {self.vocab.size}")
        sensitive = [pos for pos, t in enumerate(ids) if self._is_sensitive(t)]
        logits = {
            pos: self.provider.context_logits(ContextWindow(ids, pos, self.config.mode))
            for pos in sensitive
        }
        bound = self.config.clip_bound
        if bound is None and sensitive:
            # Calibrated from this prompt's own contexts, keeping prompts
            # independent of each other and of corpus order.
            bound = calibrate_bound(logits.values())
        # Streams are keyed by prompt CONTENT, not corpus index, so output
        # is invariant to prompt ordering and worker scheduling.
        stream_key = prompt_key(ids)
        records = []
        for pos, orig in enumerate(ids):
            if pos not in logits:
                records.append(PerturbationRecord(pos, orig, orig, True, None, None))
                continue
            utilities = hybrid_utility(
                logits[pos], self.distances.row(orig), self.config.params, bound
            )
            buckets = bucketize(utilities, self.config.n_buckets)
            rng = derive_rng(self.config.seed, stream_key, pos)
            outcome = sample(buckets, self.config.epsilon, rng)
            records.append(
                PerturbationRecord(
                    pos, orig, outcome.token_id, False,
                    outcome.bucket_index, outcome.effective_epsilon,
                )
            )
        return PerturbedPrompt(prompt_id, tuple(records), self.config)


def perturb_prompt(token_ids, config: MechanismConfig, provider, **kwargs) -> PerturbedPrompt:
    """One-shot convenience wrapper around :class:`Perturber`."""
    prompt_id = kwargs.pop("prompt_id", 0)
    return Perturber(config, provider, **kwargs).perturb_prompt(token_ids, prompt_id)


def read_prompts(path, provider) -> list[list[int]]:
    """Read a corpus file: plain text lines or JSON lines with token_ids."""
    prompts = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                try:
                    prompts.append([int(i) for i in json.loads(line)["token_ids"]])
                except (ValueError, KeyError) as exc:
                    raise DataError(f"{path}: bad JSON prompt line: {exc}") from None
            else:
                prompts.append(provider.tokenize(line))
    return prompts


def perturb_corpus(
    prompts,
    config: MechanismConfig,
    provider,
    output_path,
    jobs: int = 1,
    skip_errors: bool = False,
    distances: DistanceCache | None = None,
    nonsensitive: NonSensitiveSet | None = None,
) -> dict:
    """Perturb a list of prompts to a JSON-lines artifact; returns a summary.

    Output order always matches input order regardless of worker count.
    With ``skip_errors`` a failing prompt becomes an error record instead of
    aborting the run.
    """
    engine = Perturber(config, provider, distances=distances, nonsensitive=nonsensitive)
    started = time.monotonic()

    def run_one(item):
        idx, ids = item
        try:
            return engine.perturb_prompt(ids, prompt_id=idx).to_json_obj()
        except Exception as exc:  # noqa: BLE001 - converted to error records
            if not skip_errors:
                raise PartialFailureError(f"prompt {idx}: {exc}") from exc
            return {"prompt_id": idx, "error": f"{type(exc).__name__}: {exc}"}

    items = list(enumerate(prompts))
    if jobs > 1 and len(items) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run_one, items))
    else:
        results = [run_one(it) for it in items]

    elapsed = time.monotonic() - started
    n_perturbed = n_skipped = n_retained = n_errors = 0
    spent = []
    with open(output_path, "w", encoding="utf-8") as f:
        for obj in results:
            f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")
            if "error" in obj:
                n_errors += 1
                continue
            for rec in obj["records"]:
                if rec["skipped"]:
                    n_skipped += 1
                else:
                    n_perturbed += 1
                    spent.append(rec["eps_effective"])
                    if rec["repl"] == rec["orig"]:
                        n_retained += 1
    return {
        "prompts": len(items),
        "errors": n_errors,
        "positions_perturbed": n_perturbed,
        "positions_skipped": n_skipped,
        "retained": n_retained,
        "mean_effective_epsilon": sum(spent) / len(spent) if spent else None,
        "max_effective_epsilon": max(spent) if spent else None,
        "runtime_seconds": elapsed,
        "seconds_per_prompt": elapsed / len(items) if items else 0.0,
    }


def load_artifact(path) -> list[dict]:
    """Load a perturbation artifact written by :func:`perturb_corpus`."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f):
            line = line.strip()
            if not line:
                continue
            try:
                out.append(json.loads(line))
            except ValueError as exc:
                raise DataError(f"{path}:{lineno + 1}: bad artifact line: {exc}") from None
    return out
