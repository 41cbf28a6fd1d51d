import pytest
import torch

from promptscope.config.schema import ModelConfig
from promptscope.core.model import PromptScopeModel
from promptscope.errors import CheckpointIncompatibleError
from promptscope.infra.wiring import build_model
from promptscope.store.checkpoint import decode_state, encode_state, load_checkpoint, save_checkpoint

from conftest import tiny_config


def test_checkpoint_restores_parameters_and_meta(tmp_path):
    cfg = tiny_config()
    source, vocab = build_model(cfg)
    with torch.no_grad():
        source.generator.post_decoder.gate.fill_(0.5)
    path = save_checkpoint(source, tmp_path / "ckpt" / "stage2.ckpt", meta={"stage": 2})

    target, _ = build_model(cfg.model_copy(update={"seed": 99}))
    meta = load_checkpoint(target, path)
    assert meta == {"stage": 2}
    for (name, a), (_, b) in zip(source.state_dict().items(), target.state_dict().items()):
        assert torch.equal(a, b), name


def test_checkpoint_bytes_are_deterministic(tmp_path):
    model, _ = build_model(tiny_config())
    a = save_checkpoint(model, tmp_path / "a.ckpt", meta={"seed": 7})
    b = save_checkpoint(model, tmp_path / "b.ckpt", meta={"seed": 7})
    assert a.read_bytes() == b.read_bytes()


def test_incompatible_checkpoints_are_rejected(tmp_path):
    cfg = tiny_config()
    model, vocab = build_model(cfg)
    path = save_checkpoint(model, tmp_path / "m.ckpt")

    wider = PromptScopeModel(ModelConfig(**{**cfg.model.model_dump(), "dim": 32}), vocab)
    with pytest.raises(CheckpointIncompatibleError):
        load_checkpoint(wider, path)
    deeper = PromptScopeModel(ModelConfig(**{**cfg.model.model_dump(), "detector_layers": 2}), vocab)
    with pytest.raises(CheckpointIncompatibleError):
        load_checkpoint(deeper, path)
    with pytest.raises(CheckpointIncompatibleError):
        load_checkpoint(model, tmp_path / "absent.ckpt")
    with pytest.raises(CheckpointIncompatibleError):
        decode_state(b"\x01")


def test_encode_state_orders_tensors_by_name():
    state = {"b": torch.ones(2, dtype=torch.float64), "a": torch.zeros(1, 3, dtype=torch.float64)}
    decoded, meta = decode_state(encode_state(state))
    assert list(decoded) == ["a", "b"]
    assert decoded["a"].shape == (1, 3)
    assert meta == {}
