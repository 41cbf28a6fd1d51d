import numpy as np
import pytest

from promptscope.data.synth import build_vocabulary, generate_split
from promptscope.errors import EmptyInputError, SchemaViolationError, UnknownTokenError
from promptscope.store.dataset import read_split, sample_id, write_split
from promptscope.utils.text import Vocabulary

from conftest import tiny_config


def test_split_round_trip(tmp_path):
    cfg = tiny_config()
    samples = generate_split(cfg.scene, "val")
    assert write_split(tmp_path, "val", samples) == len(samples)
    restored = read_split(tmp_path, "val")
    assert [s.index for s in restored] == [s.index for s in samples]
    for a, b in zip(samples, restored):
        assert a.findings == b.findings
        assert a.sentences == b.sentences and a.labels == b.labels
        assert [r.name for r in a.regions] == [r.name for r in b.regions]
        # images are stored at 8 bits
        assert np.abs(a.image - b.image).max() <= 0.5 / 255 + 1e-12


def test_missing_or_corrupt_split(tmp_path):
    with pytest.raises(SchemaViolationError):
        read_split(tmp_path, "test")
    (tmp_path / "test.jsonl").write_bytes(b'{"sample_id": 3}\n')
    with pytest.raises(SchemaViolationError):
        read_split(tmp_path, "test")


def test_sample_id_format():
    assert sample_id("train", 42) == "train-000042"


def test_vocabulary_encode_decode(tmp_path):
    vocab = build_vocabulary(tiny_config().scene)
    ids = vocab.encode_joined(["there is a circle", "no square in the upper left zone"])
    assert vocab.decode(ids + [vocab.eos_id, vocab.bos_id]) == "there is a circle. no square in the upper left zone"
    vocab.save(tmp_path / "vocab.txt")
    assert Vocabulary.load(tmp_path / "vocab.txt").tokens == vocab.tokens
    with pytest.raises(UnknownTokenError):
        vocab.encode("there is a hexagon")
    with pytest.raises(EmptyInputError):
        vocab.encode(" . ")
    with pytest.raises(ValueError):
        Vocabulary(["circle"])
