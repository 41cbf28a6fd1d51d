"""
Image and prompt encoders projecting into one shared image-text space.

Both are small stand-ins for a pretrained contrastive pair. The prompt encoder
is frozen right after initialization; the image encoder freezes its patch
embedding and its first `frozen_layers` layers.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence

import torch
from torch import Tensor, nn

from promptscope.config.schema import ModelConfig
from promptscope.core.nn import DTYPE, EncoderLayer, set_frozen, sincos_positions
from promptscope.errors import EmptyInputError, ShapeMismatchError
from promptscope.utils.text import Vocabulary


@dataclass
class PatchGrid:
    """Projected patch tokens (B, H*W, D), positions (H*W, D), global token (B, D)."""

    tokens: Tensor
    positions: Tensor
    cls: Tensor
    grid_h: int
    grid_w: int

    @property
    def batch(self) -> int:
        return self.tokens.shape[0]

    def select(self, index: int) -> "PatchGrid":
        sl = slice(index, index + 1)
        return PatchGrid(self.tokens[sl], self.positions, self.cls[sl], self.grid_h, self.grid_w)

    def pooled(self) -> Tensor:
        return self.tokens.mean(dim=1)


@dataclass
class PromptToken:
    embedding: Tensor
    source_text: str


class ImageEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.patch = cfg.patch_size
        d = cfg.dim
        self.embed = nn.Linear(cfg.patch_size * cfg.patch_size, d, dtype=DTYPE)
        self.cls_token = nn.Parameter(torch.randn(d, dtype=DTYPE) * 0.02)
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.heads, cfg.ff_mult * d, layer_scale_init=cfg.layer_scale_init)
            for _ in range(cfg.encoder_layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.patch_proj = nn.Linear(d, d, dtype=DTYPE)
        self.cls_proj = nn.Linear(d, d, dtype=DTYPE)
        self.frozen_layers = cfg.resolved_frozen_layers
        self.freeze_stem()

    def freeze_stem(self) -> None:
        set_frozen(self.embed)
        self.cls_token.requires_grad_(False)
        for layer in self.layers[: self.frozen_layers]:
            set_frozen(layer)

    def trainable_parameters(self) -> List[nn.Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def forward(self, images: Tensor) -> PatchGrid:
        if images.ndim == 2:
            images = images.unsqueeze(0)
        if images.ndim != 3:
            raise ShapeMismatchError(f"expected (B, H, W) images, got {tuple(images.shape)}")
        b, h, w = images.shape
        if h % self.patch or w % self.patch:
            raise ShapeMismatchError(f"image {h}x{w} not divisible by patch size {self.patch}")
        gh, gw = h // self.patch, w // self.patch
        patches = images.to(DTYPE).unfold(1, self.patch, self.patch).unfold(2, self.patch, self.patch)
        patches = patches.reshape(b, gh * gw, self.patch * self.patch)
        pos = sincos_positions(gh, gw, self.embed.out_features)
        x = self.embed(patches) + pos
        x = torch.cat([self.cls_token.expand(b, 1, -1), x], dim=1)
        for layer in self.layers:
            x = layer(x)
        x = self.norm(x)
        return PatchGrid(self.patch_proj(x[:, 1:]), pos, self.cls_proj(x[:, 0]), gh, gw)


class PromptEncoder(nn.Module):
    """Word embedding + small transformer + mean pooling + projection. Always frozen."""

    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.vocab = vocab
        self.max_len = cfg.max_text_len
        d = cfg.dim
        self.tok = nn.Embedding(len(vocab), d, dtype=DTYPE)
        self.pos = nn.Parameter(torch.randn(cfg.max_text_len, d, dtype=DTYPE) * 0.1)
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.heads, cfg.ff_mult * d, layer_scale_init=1.0) for _ in range(cfg.text_layers)
        )
        self.proj = nn.Linear(d, d, dtype=DTYPE)
        set_frozen(self)

    @torch.no_grad()
    def encode(self, texts: Sequence[str]) -> Tensor:
        """(len(texts), D) embeddings; raises on empty text or unknown words."""
        if not texts:
            raise EmptyInputError("no prompts to encode")
        ids = [self.vocab.encode(t)[: self.max_len] for t in texts]
        n, length = len(ids), max(len(x) for x in ids)
        batch = torch.full((n, length), self.vocab.pad_id, dtype=torch.long)
        valid = torch.zeros(n, length, dtype=torch.bool)
        for i, seq in enumerate(ids):
            batch[i, : len(seq)] = torch.tensor(seq)
            valid[i, : len(seq)] = True
        x = self.tok(batch) + self.pos[:length]
        mask = valid.unsqueeze(1).expand(n, length, length) | torch.eye(length, dtype=torch.bool)
        for layer in self.layers:
            x = layer(x, mask=mask)
        w = valid.to(DTYPE).unsqueeze(-1)
        pooled = (x * w).sum(dim=1) / w.sum(dim=1)
        return self.proj(pooled)

    def encode_prompt(self, text: str) -> PromptToken:
        return PromptToken(self.encode([text])[0], text)
