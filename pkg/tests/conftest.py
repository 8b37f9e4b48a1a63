import os

import numpy as np
import pytest

from cape.providers import FileProvider, write_fixture_directory
from cape.vocab import EmbeddingTable, Vocabulary

FIXTURES = os.path.join(os.path.dirname(__file__), "fixtures")


@pytest.fixture(scope="session")
def review_fixture_dir() -> str:
    return os.path.join(FIXTURES, "review_prompt")


@pytest.fixture(scope="session")
def review_provider(review_fixture_dir) -> FileProvider:
    return FileProvider(review_fixture_dir)


@pytest.fixture(scope="session")
def review_prompt_ids(review_provider, review_fixture_dir):
    with open(os.path.join(review_fixture_dir, "prompt.txt"), encoding="utf-8") as f:
        return review_provider.tokenize(f.read().strip())


def _corpus_vocabulary() -> Vocabulary:
    words = [
        "film", "movie", "story", "plot", "acting", "scene", "script",
        "good", "bad", "great", "awful", "fine", "sharp", "weak",
        "hero", "villain", "ending", "music", "light", "dark",
        "runs", "feels", "looks", "seems", "turns", "fades",
    ]
    stop = ["the", "a", "is", "was", "and", "it", "very", "not"]
    punct = [",", ".", "!", "?"]
    return Vocabulary(tuple(words + stop + punct))


CORPUS_PROMPTS = [
    "the film is good .",
    "a bad ending , very weak !",
    "it runs dark and sharp .",
    "the villain feels great ?",
    "acting was awful . the music is fine .",
    "plot turns weak and the hero fades .",
]


@pytest.fixture(scope="session")
def corpus_provider_dir(tmp_path_factory) -> str:
    """Synthetic multi-prompt fixture: deterministic logits for every
    position of every corpus prompt."""
    vocab = _corpus_vocabulary()
    rng = np.random.default_rng(99)
    table = EmbeddingTable(rng.normal(0.0, 1.0, size=(vocab.size, 8)))
    records = {}
    gen = np.random.default_rng(100)
    for text in CORPUS_PROMPTS:
        ids = tuple(vocab.id_of(t) for t in text.split())
        for pos in range(len(ids)):
            logits = gen.normal(0.0, 1.0, size=vocab.size)
            logits[ids[pos]] += 3.5
            records[(ids, pos)] = logits
    out = tmp_path_factory.mktemp("corpus_fixture")
    write_fixture_directory(
        str(out), vocab, table,
        mode="bidirectional", model_name="corpus-fixture", logit_records=records,
    )
    (out / "prompts.txt").write_text("\n".join(CORPUS_PROMPTS) + "\n", encoding="utf-8")
    return str(out)


@pytest.fixture(scope="session")
def corpus_provider(corpus_provider_dir) -> FileProvider:
    return FileProvider(corpus_provider_dir)
