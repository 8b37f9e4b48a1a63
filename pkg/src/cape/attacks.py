"""Empirical privacy attacks against perturbation artifacts.

Both attacks model an adversary who sees only the perturbed prompt; the
original tokens are consulted solely to score whether a guess succeeded.
Attack success rate (asr) is computed over sensitive (actually perturbed)
positions, and the privacy score is 1 - asr.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ProviderError
from .metrics import rouge_l_f1
from .providers import ContextWindow
from .vocab import DistanceCache, EmbeddingTable


@dataclass(frozen=True)
class AttackReport:
    attack_kind: str
    n_sensitive: int
    successes: int
    k: int | None = None
    per_prompt: tuple = ()
    rouge_f1: float | None = None
    extra: dict = field(default_factory=dict)

    @property
    def asr(self) -> float:
        return self.successes / self.n_sensitive if self.n_sensitive else 0.0

    @property
    def privacy_score(self) -> float:
        return 1.0 - self.asr

    def to_json_obj(self) -> dict:
        obj = {
            "attack": self.attack_kind,
            "k": self.k,
            "n_sensitive": self.n_sensitive,
            "successes": self.successes,
            "asr": self.asr,
            "privacy_score": self.privacy_score,
            "per_prompt": list(self.per_prompt),
        }
        if self.rouge_f1 is not None:
            obj["rouge_f1"] = self.rouge_f1
        obj.update(self.extra)
        return obj

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_json_obj(), f, indent=2, sort_keys=True)
            f.write("\n")


def _sensitive_records(prompt_obj: dict):
    for rec in prompt_obj.get("records", []):
        if not rec["skipped"]:
            yield rec


def knn_attack(artifact, table: EmbeddingTable, k: int = 10) -> AttackReport:
    """Embedding-neighbor attack: guess originals from the replacement's
    k nearest vocabulary tokens.

    Success iff the original token is within the k smallest Euclidean
    distances of the replacement; ties at the k-th distance are all
    included, which favors the adversary and keeps the estimate
    conservative.
    """
    if k < 1:
        raise DataError(f"k must be >= 1, got {k}")
    if k > table.size:
        raise DataError(f"k={k} exceeds vocabulary size {table.size}")
    cache = DistanceCache(table)
    successes = n = 0
    per_prompt = []
    for prompt_obj in artifact:
        if "error" in prompt_obj:
            continue
        p_succ = p_n = 0
        for rec in _sensitive_records(prompt_obj):
            if not 0 <= rec["repl"] < table.size or not 0 <= rec["orig"] < table.size:
                raise DataError("artifact token id outside the embedding table")
            dist = cache.row(rec["repl"]).distances
            kth = np.partition(dist, k - 1)[k - 1]
            p_n += 1
            if dist[rec["orig"]] <= kth:
                p_succ += 1
        successes += p_succ
        n += p_n
        per_prompt.append(
            {"prompt_id": prompt_obj["prompt_id"], "n_sensitive": p_n, "successes": p_succ}
        )
    return AttackReport("knn", n, successes, k=k, per_prompt=tuple(per_prompt))


def mti_attack(artifact, attacker_provider) -> AttackReport:
    """Masked-token-inference attack.

    Each sensitive position of the *perturbed* prompt is masked one at a
    time (all other positions stay perturbed) and the attacker's argmax
    token over the full vocabulary is the guess.  Also reports the Rouge-L
    F1 between the attacker's reconstruction and the original prompt,
    averaged over prompts.
    """
    if attacker_provider.mode != "bidirectional":
        raise ProviderError("the masked-token attack requires a bidirectional provider")
    successes = n = 0
    per_prompt = []
    rouges = []
    for prompt_obj in artifact:
        if "error" in prompt_obj:
            continue
        perturbed = tuple(int(i) for i in prompt_obj["perturbed_ids"])
        predicted = list(perturbed)
        p_succ = p_n = 0
        for rec in _sensitive_records(prompt_obj):
            pos = rec["pos"]
            logits = attacker_provider.context_logits(
                ContextWindow(perturbed, pos, "bidirectional")
            )
            guess = int(np.argmax(logits))
            predicted[pos] = guess
            p_n += 1
            if guess == rec["orig"]:
                p_succ += 1
        successes += p_succ
        n += p_n
        rouge = rouge_l_f1(prompt_obj["original_ids"], predicted)
        rouges.append(rouge)
        per_prompt.append(
            {
                "prompt_id": prompt_obj["prompt_id"],
                "n_sensitive": p_n,
                "successes": p_succ,
                "rouge_f1": rouge,
            }
        )
    mean_rouge = float(np.mean(rouges)) if rouges else None
    return AttackReport("mti", n, successes, per_prompt=tuple(per_prompt), rouge_f1=mean_rouge)
