import itertools
import json

import pytest
import torch

from skelmotion.motion_io import generate_synthetic_corpus
from skelmotion.text import (
    NULL_TOKEN,
    EmbeddingFileEncoder,
    StubTextEncoder,
    TextEncodingError,
    make_text_encoder,
    pad_batch,
    tokenize,
)


def test_tokenize():
    assert tokenize("A person Walks, forward!") == ["a", "person", "walks", "forward"]


def test_stub_deterministic_and_unit_norm():
    a = StubTextEncoder(16).encode("a person jumps")
    b = StubTextEncoder(16).encode("a person jumps")
    assert a.tokens == ("a", "person", "jumps")
    assert torch.equal(a.vectors, b.vectors)
    assert torch.allclose(a.vectors.norm(dim=-1), torch.ones(3))
    assert torch.equal(a.pooled, a.vectors.mean(0))


def test_null_prompt():
    e = StubTextEncoder(16).encode("")
    assert e.tokens == (NULL_TOKEN,) and e.n_tokens == 1 and e.is_null


def test_corpus_vocabulary_distinct(topo):
    enc = StubTextEncoder(128)
    vocab = sorted({t for c in generate_synthetic_corpus(0, 64, topo) for t in c.caption} | {NULL_TOKEN})
    vecs = torch.stack([torch.from_numpy(enc.token_vector(t)) for t in vocab])
    for i, j in itertools.combinations(range(len(vocab)), 2):
        assert not torch.allclose(vecs[i], vecs[j])


def test_over_length():
    with pytest.raises(TextEncodingError, match="limit"):
        StubTextEncoder(8, max_tokens=3).encode("one two three four")


def test_seed_changes_vectors():
    assert not torch.equal(StubTextEncoder(8, seed=0).encode("walk").vectors, StubTextEncoder(8, seed=1).encode("walk").vectors)


def test_embedding_file(tmp_path):
    doc = {"dim": 2, "prompts": {"hi there": {"tokens": ["hi", "there"], "vectors": [[1, 0], [0, 1]]},
                                 "": {"tokens": [NULL_TOKEN], "vectors": [[0, 0]]}}}
    path = tmp_path / "emb.json"
    path.write_text(json.dumps(doc))
    enc = make_text_encoder(f"file:{path}")
    assert isinstance(enc, EmbeddingFileEncoder)
    e = enc.encode("hi there")
    assert e.tokens == ("hi", "there") and e.vectors.tolist() == [[1, 0], [0, 1]]
    with pytest.raises(TextEncodingError, match="missing"):
        enc.encode("unknown")


def test_unknown_encoder():
    with pytest.raises(TextEncodingError):
        make_text_encoder("clip")


def test_pad_batch():
    enc = StubTextEncoder(4)
    out, mask = pad_batch([enc.encode("a b c"), enc.encode("d")])
    assert out.shape == (2, 3, 4)
    assert mask.tolist() == [[False, False, False], [False, True, True]]
    assert torch.equal(out[1, 1:], torch.zeros(2, 4))
