import threading
import time

import pytest
import torch
import uvicorn
from transformers import (
    BertConfig,
    BertForMaskedLM,
    BertTokenizer,
    GPT2Config,
    GPT2LMHeadModel,
)

WORDS = [
    "the", "a", "an", "and", "is", "was", "it", "very", "not",
    "film", "movie", "story", "plot", "acting", "scene", "music",
    "good", "bad", "great", "awful", "fine", "slow", "fast", "sharp",
    "hero", "villain", "ending", "journey", "ride", "drama", "turns",
    ",", ".", "!", "?",
]
SPECIALS = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]"]


def _vocab_dict(tokens):
    return {t: i for i, t in enumerate(tokens)}


@pytest.fixture(scope="session")
def tiny_bert_dir(tmp_path_factory) -> str:
    out = tmp_path_factory.mktemp("tiny_bert")
    tok = BertTokenizer(vocab=_vocab_dict(SPECIALS + WORDS), do_lower_case=True)
    torch.manual_seed(1)
    config = BertConfig(
        vocab_size=len(SPECIALS + WORDS),
        hidden_size=32,
        num_hidden_layers=2,
        num_attention_heads=4,
        intermediate_size=64,
        max_position_embeddings=64,
    )
    BertForMaskedLM(config).save_pretrained(out)
    tok.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def tiny_gpt2_dir(tmp_path_factory) -> str:
    out = tmp_path_factory.mktemp("tiny_gpt2")
    tok = BertTokenizer(
        vocab=_vocab_dict(SPECIALS + WORDS),
        do_lower_case=True,
        bos_token="[CLS]",
        eos_token="[SEP]",
    )
    torch.manual_seed(2)
    config = GPT2Config(
        vocab_size=len(SPECIALS + WORDS),
        n_embd=32,
        n_layer=2,
        n_head=4,
        n_positions=64,
        bos_token_id=2,
        eos_token_id=3,
    )
    GPT2LMHeadModel(config).save_pretrained(out)
    tok.save_pretrained(out)
    return str(out)


@pytest.fixture(scope="session")
def bert_base_shaped_dir(tmp_path_factory) -> str:
    """A checkpoint with BERT-base's interface dimensions (30,522 tokens,
    768-dim embeddings) but a single small layer, so /info reporting can be
    verified without downloading the real weights."""
    out = tmp_path_factory.mktemp("bert_base_shaped")
    tokens = SPECIALS + WORDS
    tokens = tokens + [f"tok{i:05d}" for i in range(30_522 - len(tokens))]
    tok = BertTokenizer(vocab=_vocab_dict(tokens), do_lower_case=True)
    torch.manual_seed(3)
    config = BertConfig(
        vocab_size=30_522,
        hidden_size=768,
        num_hidden_layers=1,
        num_attention_heads=12,
        intermediate_size=128,
        max_position_embeddings=512,
    )
    BertForMaskedLM(config).save_pretrained(out)
    tok.save_pretrained(out)
    return str(out)


class LiveServer:
    """uvicorn in a daemon thread on an ephemeral port."""

    def __init__(self, app):
        config = uvicorn.Config(app, host="127.0.0.1", port=0, log_level="warning")
        self.server = uvicorn.Server(config)
        self.thread = threading.Thread(target=self.server.run, daemon=True)
        self.thread.start()
        deadline = time.monotonic() + 15
        while not self.server.started:
            if time.monotonic() > deadline:
                raise RuntimeError("server did not start")
            time.sleep(0.02)
        port = self.server.servers[0].sockets[0].getsockname()[1]
        self.url = f"http://127.0.0.1:{port}"

    def close(self):
        self.server.should_exit = True
        self.thread.join(timeout=10)


@pytest.fixture()
def live_server():
    servers = []

    def start(app) -> LiveServer:
        server = LiveServer(app)
        servers.append(server)
        return server

    yield start
    for server in servers:
        server.close()
