"""
Prompt detector: M learned box tokens are added to every prompt token and decoded
against the patch grid with self-attention restricted to tokens of the same prompt.
Each decoded token predicts a box; Gaussian ROI pooling over projected patches
gives box features, a score head rates them, and the score-weighted mean is the
prompt's ROI token.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import List, Optional, Sequence

import torch
from torch import Tensor, nn

from promptscope.config.schema import ModelConfig
from promptscope.core.boxops import Box, ScoredBox, boxes_from_tensor, gaussian_weight_maps
from promptscope.core.encoders import PatchGrid
from promptscope.core.nn import DTYPE, DecoderLayer, Mlp, dropout, group_mask
from promptscope.errors import EmptyInputError, ShapeMismatchError


@dataclass
class DetectionOutput:
    """One prompt's result: M boxes, scores, box features and the aggregated ROI token."""

    boxes: List[Box]
    scores: Tensor
    box_features: Tensor
    roi_token: Tensor
    preliminary_tokens: Optional[Tensor] = None

    def scored_boxes(self, class_id: Optional[int] = None) -> List[ScoredBox]:
        return [ScoredBox(b, float(s), class_id) for b, s in zip(self.boxes, self.scores.detach().clamp(0, 1).tolist())]


@dataclass
class Detections:
    """Batched detector output: boxes (B, Q, M, 4), scores (B, Q, M), features (B, Q, M, D), roi (B, Q, D)."""

    boxes: Tensor
    scores: Tensor
    box_features: Tensor
    roi_tokens: Tensor
    preliminary: Optional[Tensor] = None

    @property
    def num_prompts(self) -> int:
        return self.boxes.shape[1]

    def output(self, b: int, k: int) -> DetectionOutput:
        return DetectionOutput(
            boxes=boxes_from_tensor(self.boxes[b, k]),
            scores=self.scores[b, k],
            box_features=self.box_features[b, k],
            roi_token=self.roi_tokens[b, k],
            preliminary_tokens=None if self.preliminary is None else self.preliminary[b, k],
        )

    def outputs(self, b: int = 0) -> List[DetectionOutput]:
        return [self.output(b, k) for k in range(self.num_prompts)]


def aggregate_roi(box_features: Tensor, scores: Tensor) -> Tensor:
    """Score-weighted mean over the M axis; unweighted mean when all scores are zero."""
    denom = scores.sum(dim=-1, keepdim=True)
    m = scores.shape[-1]
    safe = torch.where(denom > 0, denom, torch.ones_like(denom))
    weights = torch.where(denom > 0, scores / safe, torch.full_like(scores, 1.0 / m))
    return (weights.unsqueeze(-1) * box_features).sum(dim=-2)


class PromptDetector(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, hidden = cfg.dim, cfg.ff_mult * cfg.dim
        self.cfg = cfg
        self.num_box_tokens = cfg.num_box_tokens
        self.box_tokens = nn.Parameter(torch.randn(cfg.num_box_tokens, d, dtype=DTYPE) * 0.5)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.heads, hidden, cfg.dropout, cfg.attn_dropout, cfg.drop_path, cfg.layer_scale_init)
            for _ in range(cfg.detector_layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.box_head = Mlp(d, d, 4, hidden_layers=2)
        self.patch_mlp = Mlp(d, hidden, d)
        self.roi_mlp = Mlp(d, hidden, d, hidden_layers=2)
        self.score_head = Mlp(d, d, 1)

    def predict_boxes(self, tokens: Tensor) -> Tensor:
        raw = torch.sigmoid(self.box_head(tokens))
        centers, sizes = raw[..., :2], raw[..., 2:].clamp(min=self.cfg.box_min_size)
        return torch.cat([centers, sizes], dim=-1)

    def roi_pool(self, boxes: Tensor, patches: PatchGrid) -> Tensor:
        """Gaussian-weighted sums of projected patches. boxes: (B, ..., 4) -> (B, ..., D)."""
        if boxes.shape[0] != patches.batch or boxes.shape[-1] != 4:
            raise ShapeMismatchError("boxes must be (B, ..., 4) with B matching the patch grid")
        weights = gaussian_weight_maps(boxes, patches.grid_h, patches.grid_w)
        projected = self.patch_mlp(patches.tokens)  # (B, HW, D)
        lead = weights.shape[1:-1]
        flat = weights.reshape(weights.shape[0], -1, weights.shape[-1])
        return (flat @ projected).reshape(weights.shape[0], *lead, projected.shape[-1])

    def _skip(self, pooled: Tensor, prelim: Tensor, rng: Optional[torch.Generator]) -> Tensor:
        p = self.cfg.skip_prob
        if p <= 0.0:
            return pooled
        if not self.training:
            return pooled + p * prelim if self.cfg.skip_in_eval else pooled
        if rng is None:
            raise ValueError("training-mode detection needs an explicit generator")
        if self.cfg.skip_granularity == "batch":
            gate = torch.bernoulli(torch.tensor(p, dtype=DTYPE), generator=rng)
        else:
            gate = torch.bernoulli(torch.full(prelim.shape[:-1] + (1,), p, dtype=DTYPE), generator=rng)
        return pooled + gate * dropout(prelim, self.cfg.dropout, True, rng)

    def forward(self, prompts: Tensor, patches: PatchGrid, rng: Optional[torch.Generator] = None) -> Detections:
        """prompts: (Q, D) shared by the batch, or (B, Q, D)."""
        if prompts.ndim == 2:
            prompts = prompts.unsqueeze(0).expand(patches.batch, -1, -1)
        if prompts.ndim != 3 or prompts.shape[1] == 0:
            raise EmptyInputError("detect needs at least one prompt")
        b, q, d = prompts.shape
        m = self.num_box_tokens
        x = (prompts.unsqueeze(2) + self.box_tokens).reshape(b, q * m, d)
        mask = group_mask(torch.arange(q).repeat_interleave(m))
        memory = patches.tokens + patches.positions
        for layer in self.layers:
            x = layer(x, memory, self_mask=mask, rng=rng)
        prelim = self.norm(x).reshape(b, q, m, d)
        boxes = self.predict_boxes(prelim)
        pooled = self._skip(self.roi_pool(boxes, patches), prelim, rng)
        feats = self.roi_mlp(pooled)
        scores = torch.sigmoid(self.score_head(feats)).squeeze(-1)
        return Detections(boxes, scores, feats, aggregate_roi(feats, scores), prelim)

    def detect(self, prompts: Sequence, patches: PatchGrid, rng: Optional[torch.Generator] = None) -> List[DetectionOutput]:
        """Single-image convenience over PromptToken-like objects (with `.embedding`) or a tensor."""
        if isinstance(prompts, Tensor):
            emb = prompts
        else:
            if not prompts:
                raise EmptyInputError("detect needs at least one prompt")
            emb = torch.stack([p.embedding for p in prompts])
        return self.forward(emb, patches.select(0), rng).outputs(0)

    def encode_boxes(self, boxes: Tensor, patches: PatchGrid) -> Detections:
        """Box-query bypass: ROI pooling on given (B, K, 4) boxes; no decoder layers run."""
        feats = self.roi_mlp(self.roi_pool(boxes, patches)).unsqueeze(2)
        scores = torch.sigmoid(self.score_head(feats)).squeeze(-1)
        return Detections(boxes.unsqueeze(2), scores, feats, feats[:, :, 0], None)
