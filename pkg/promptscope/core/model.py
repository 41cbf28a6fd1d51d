"""The full model: encoders, prompt detector and sentence generator under one module."""
from __future__ import annotations

from typing import Dict, Iterable, List, Sequence

import torch
from torch import Tensor, nn

from promptscope.config.schema import ModelConfig
from promptscope.core.detector import PromptDetector
from promptscope.core.encoders import ImageEncoder, PromptEncoder, PromptToken
from promptscope.core.generator import SentenceGenerator
from promptscope.core.losses import ClassPromptPair
from promptscope.core.nn import set_frozen
from promptscope.utils.text import Vocabulary

COMPONENTS = ("image_encoder", "prompt_encoder", "detector", "post_decoder", "prefix", "lm")


class PromptScopeModel(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.image_encoder = ImageEncoder(cfg)
        self.prompt_encoder = PromptEncoder(cfg, vocab)
        self.detector = PromptDetector(cfg)
        self.generator = SentenceGenerator(cfg, vocab)
        self._prompt_cache: Dict[str, Tensor] = {}

    def component(self, name: str) -> nn.Module:
        parts = {
            "image_encoder": self.image_encoder,
            "prompt_encoder": self.prompt_encoder,
            "detector": self.detector,
            "post_decoder": self.generator.post_decoder,
            "prefix": self.generator.prefix,
            "lm": self.generator.lm,
        }
        try:
            return parts[name]
        except KeyError:
            raise ValueError(f"unknown component {name!r}") from None

    def set_trainable(self, components: Iterable[str]) -> List[nn.Parameter]:
        """Unfreeze exactly the named components; encoder stem and prompt encoder stay frozen."""
        set_frozen(self)
        for name in components:
            set_frozen(self.component(name), False)
        self.image_encoder.freeze_stem()
        set_frozen(self.prompt_encoder)
        return [p for p in self.parameters() if p.requires_grad]

    def encode_texts(self, texts: Sequence[str]) -> Tensor:
        """(N, D) prompt embeddings; cached because the prompt encoder never trains."""
        missing = [t for t in dict.fromkeys(texts) if t not in self._prompt_cache]
        if missing:
            for text, emb in zip(missing, self.prompt_encoder.encode(missing)):
                self._prompt_cache[text] = emb
        return torch.stack([self._prompt_cache[t] for t in texts])

    def prompt_tokens(self, texts: Sequence[str]) -> List[PromptToken]:
        return [PromptToken(e, t) for e, t in zip(self.encode_texts(texts), texts)]

    def class_prompts(self, class_names: Sequence[str]) -> List[ClassPromptPair]:
        pos = self.prompt_tokens(list(class_names))
        neg = self.prompt_tokens([f"no {c}" for c in class_names])
        return [ClassPromptPair(i, c, p, n) for i, (c, p, n) in enumerate(zip(class_names, pos, neg))]
