"""
Compose the model and its vocabulary from a RunConfig, and pin every source of
randomness the run uses.
"""
from __future__ import annotations

import random
from typing import Tuple

import numpy as np
import torch

from promptscope.config.schema import RunConfig
from promptscope.core.model import PromptScopeModel
from promptscope.data.synth import build_vocabulary
from promptscope.infra.logging import get_logger
from promptscope.utils.text import Vocabulary

logger = get_logger("infra.wiring")


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % (2 ** 32))
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)


def generator(seed: int, stream: int = 0) -> torch.Generator:
    """Dedicated torch generator per (seed, stream)."""
    g = torch.Generator()
    g.manual_seed(seed * 1_000_003 + stream)
    return g


def build_model(cfg: RunConfig) -> Tuple[PromptScopeModel, Vocabulary]:
    seed_everything(cfg.seed)
    vocab = build_vocabulary(cfg.scene)
    model = PromptScopeModel(cfg.model, vocab)
    n_params = sum(p.numel() for p in model.parameters())
    logger.info("built model name=%s params=%d vocab=%d dim=%d", cfg.name, n_params, len(vocab), cfg.model.dim)
    return model, vocab
