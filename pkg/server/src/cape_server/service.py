"""Model loading and inference behind the sidecar endpoints.

A service binds one checkpoint in one mode: masked-LM checkpoints serve
bidirectional context (the target position is mask-filled), causal-LM
checkpoints serve next-token logits from the preceding tokens only.  All
inference runs in eval mode under no_grad, so repeated requests return
identical vectors.
"""

from __future__ import annotations

import hashlib
import json
import threading
from dataclasses import dataclass

import numpy as np
import torch
from transformers import AutoModelForCausalLM, AutoModelForMaskedLM, AutoTokenizer

MODES = ("bidirectional", "causal")


class ServiceError(ValueError):
    """Request-level failure; surfaces as HTTP 400 {"error": ...}."""


@dataclass(frozen=True)
class ServerConfig:
    model_name: str
    mode: str = "bidirectional"
    host: str = "127.0.0.1"
    port: int = 8731
    device: str = "cpu"
    workers: int = 1

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")


class ModelService:
    def __init__(self, config: ServerConfig):
        self.config = config
        self.tokenizer = AutoTokenizer.from_pretrained(config.model_name)
        if config.mode == "bidirectional":
            if self.tokenizer.mask_token_id is None:
                raise ValueError(
                    f"{config.model_name} has no mask token; bidirectional mode "
                    "requires a masked-LM checkpoint"
                )
            self.model = AutoModelForMaskedLM.from_pretrained(config.model_name)
        else:
            self.model = AutoModelForCausalLM.from_pretrained(config.model_name)
        self.model.to(config.device)
        self.model.eval()

        self.vocab_size = int(self.model.get_input_embeddings().weight.shape[0])
        self.dim = int(self.model.get_input_embeddings().weight.shape[1])
        vocab_map = self.tokenizer.get_vocab()
        if len(vocab_map) != self.vocab_size:
            raise ValueError(
                f"tokenizer vocabulary ({len(vocab_map)}) does not cover the "
                f"model's embedding rows ({self.vocab_size})"
            )
        self.tokens = [None] * self.vocab_size
        for tok, idx in vocab_map.items():
            self.tokens[idx] = tok
        if any(t is None for t in self.tokens):
            raise ValueError("tokenizer ids do not form a contiguous range")
        self.vocab_sha256 = hashlib.sha256(
            "\n".join(self.tokens).encode("utf-8")
        ).hexdigest()

        self._max_positions = int(
            getattr(
                self.model.config,
                "max_position_embeddings",
                getattr(self.model.config, "n_positions", 1 << 30),
            )
        )
        self._embeddings_payload: bytes | None = None
        # single-file inference queue by default; a dev/test sidecar favors
        # simplicity over throughput
        self._gate = threading.Semaphore(config.workers)

    # -------------------------------------------------------------- info

    def info(self) -> dict:
        return {
            "model": self.config.model_name,
            "vocab_size": self.vocab_size,
            "dim": self.dim,
            "mode": self.config.mode,
            "vocab_sha256": self.vocab_sha256,
        }

    # ---------------------------------------------------------- tokenize

    def tokenize(self, text: str) -> list[int]:
        if not isinstance(text, str):
            raise ServiceError("text must be a string")
        return [int(i) for i in self.tokenizer.encode(text, add_special_tokens=False)]

    # ------------------------------------------------------------ logits

    def _validate_request(self, token_ids, target_position: int) -> list[int]:
        if not isinstance(token_ids, (list, tuple)) or not token_ids:
            raise ServiceError("token_ids must be a nonempty list of integers")
        ids = []
        for i in token_ids:
            if not isinstance(i, int) or isinstance(i, bool):
                raise ServiceError(f"token id {i!r} is not an integer")
            if not 0 <= i < self.vocab_size:
                raise ServiceError(
                    f"token id {i} out of range [0, {self.vocab_size})"
                )
            ids.append(i)
        if not isinstance(target_position, int) or not 0 <= target_position < len(ids):
            raise ServiceError(
                f"target_position {target_position} outside prompt of length {len(ids)}"
            )
        return ids

    def logits(self, token_ids, target_position: int) -> np.ndarray:
        ids = self._validate_request(token_ids, target_position)
        if self.config.mode == "bidirectional":
            vec = self._masked_logits(ids, target_position)
        else:
            vec = self._causal_logits(ids, target_position)
        return vec.detach().to("cpu", torch.float32).numpy()

    def _masked_logits(self, ids: list[int], position: int) -> torch.Tensor:
        filled = list(ids)
        filled[position] = self.tokenizer.mask_token_id
        offset = 0
        if self.tokenizer.cls_token_id is not None and self.tokenizer.sep_token_id is not None:
            filled = [self.tokenizer.cls_token_id] + filled + [self.tokenizer.sep_token_id]
            offset = 1
        self._check_length(len(filled))
        batch = torch.tensor([filled], dtype=torch.long, device=self.config.device)
        with self._gate, torch.no_grad():
            out = self.model(input_ids=batch).logits
        return out[0, position + offset, :]

    def _causal_logits(self, ids: list[int], position: int) -> torch.Tensor:
        prefix = ids[:position]
        if not prefix:
            # empty prefix: condition on BOS/EOS to get the unconditional
            # next-token distribution
            start = self.tokenizer.bos_token_id
            if start is None:
                start = self.tokenizer.eos_token_id
            if start is None:
                raise ServiceError(
                    "cannot score the first token: tokenizer has no BOS/EOS"
                )
            prefix = [int(start)]
        self._check_length(len(prefix))
        batch = torch.tensor([prefix], dtype=torch.long, device=self.config.device)
        with self._gate, torch.no_grad():
            out = self.model(input_ids=batch).logits
        return out[0, -1, :]

    def _check_length(self, n: int) -> None:
        if n > self._max_positions:
            raise ServiceError(
                f"prompt of {n} tokens exceeds the model's {self._max_positions} positions"
            )

    # -------------------------------------------------------- embeddings

    def embeddings_payload(self) -> bytes:
        """Input-embedding table in the binary wire format: one JSON header
        line {"dim": d, "vocab_size": n} then n*d little-endian float32."""
        if self._embeddings_payload is None:
            matrix = (
                self.model.get_input_embeddings().weight.detach().to("cpu", torch.float32).numpy()
            )
            header = json.dumps(
                {"dim": self.dim, "vocab_size": self.vocab_size},
                sort_keys=True,
                separators=(",", ":"),
            )
            self._embeddings_payload = header.encode("utf-8") + b"\n" + matrix.astype("<f4").tobytes()
        return self._embeddings_payload
