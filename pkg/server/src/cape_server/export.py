"""Offline fixture export: the file-provider directory format.

Writes the same bytes a client would capture by recording this server over
HTTP, so exported directories are drop-in replacements for live runs::

    meta.json        {"dim", "mode", "model", "vocab_sha256", "vocab_size"}
    vocab.txt        one token per line, id order
    embeddings.bin   binary embedding table
    manifest.json    {"records": {"<prompt_sha256>:<position>": "records/..."}}
    records/*.bin    float32 logits per (prompt, position)

Record files are named records/<first 16 hash chars>_<position>.bin where
the hash is sha256 over the comma-joined token ids, so directory contents
do not depend on prompt order.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .service import ModelService


def prompt_key(token_ids) -> str:
    return hashlib.sha256(",".join(str(i) for i in token_ids).encode("ascii")).hexdigest()


def _dump_canonical(obj, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n")


def read_prompt_lines(path) -> list[str]:
    with open(path, encoding="utf-8") as f:
        return [line.strip() for line in f if line.strip()]


def export_fixtures(service: ModelService, prompts_path, out_dir) -> str:
    """Record logits for every position of every prompt line into ``out_dir``."""
    out_dir = str(out_dir)
    os.makedirs(os.path.join(out_dir, "records"), exist_ok=True)
    records: dict[str, str] = {}
    for line in read_prompt_lines(prompts_path):
        ids = service.tokenize(line)
        key_base = prompt_key(ids)
        for pos in range(len(ids)):
            key = f"{key_base}:{pos}"
            if key in records:
                continue
            rel = f"records/{key_base[:16]}_{pos:04d}.bin"
            vec = service.logits(ids, pos)
            np.asarray(vec, dtype="<f4").tofile(os.path.join(out_dir, rel))
            records[key] = rel

    with open(os.path.join(out_dir, "vocab.txt"), "w", encoding="utf-8") as f:
        for tok in service.tokens:
            f.write(tok + "\n")
    with open(os.path.join(out_dir, "embeddings.bin"), "wb") as f:
        f.write(service.embeddings_payload())
    info = service.info()
    _dump_canonical(
        {
            "dim": info["dim"],
            "mode": info["mode"],
            "model": info["model"],
            "vocab_sha256": info["vocab_sha256"],
            "vocab_size": info["vocab_size"],
        },
        os.path.join(out_dir, "meta.json"),
    )
    _dump_canonical({"records": records}, os.path.join(out_dir, "manifest.json"))
    return out_dir
