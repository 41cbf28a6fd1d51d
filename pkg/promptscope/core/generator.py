"""
Sentence generator: a gated post decoder refines ROI tokens against the image,
a prefix projector turns each refined token into per-layer key/value prefixes,
and a small word-level decoder LM writes the description greedily.
"""
from __future__ import annotations

from typing import List, Optional, Sequence, Tuple, Union

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from promptscope.config.schema import ModelConfig
from promptscope.core.detector import DetectionOutput, Detections
from promptscope.core.encoders import PatchGrid
from promptscope.core.nn import DTYPE, DecoderLayer, EncoderLayer, Mlp, causal_mask, group_mask
from promptscope.errors import EmptyInputError, ShapeMismatchError, UnknownTokenError
from promptscope.utils.text import Vocabulary

Prefix = List[Tuple[Tensor, Tensor]]


class PostDecoder(nn.Module):
    """
    Queries are the M per-box tokens plus the aggregated token of every ROI;
    self-attention stays inside one ROI. Only the aggregated token is emitted,
    as input + gate * decoded, with the gate initialized to exactly zero.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.dim
        self.cls_proj = nn.Linear(d, d, dtype=DTYPE)
        self.layers = nn.ModuleList(
            DecoderLayer(d, cfg.heads, cfg.ff_mult * d, cfg.dropout, cfg.attn_dropout, cfg.drop_path, cfg.layer_scale_init)
            for _ in range(cfg.post_layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.gate = nn.Parameter(torch.zeros(d, dtype=DTYPE))

    def forward(self, box_features: Tensor, roi_tokens: Tensor, patches: PatchGrid,
                drop_prob: float = 0.0, rng: Optional[torch.Generator] = None) -> Tensor:
        """box_features (B, K, M, D), roi_tokens (B, K, D) -> (B, K, D)."""
        if box_features.ndim != 4 or roi_tokens.shape != box_features.shape[:2] + box_features.shape[3:]:
            raise ShapeMismatchError("post decoder expects (B, K, M, D) box features and (B, K, D) ROI tokens")
        b, k, m, d = box_features.shape
        if k == 0:
            raise EmptyInputError("post decoder needs at least one ROI")
        x = torch.cat([box_features, roi_tokens.unsqueeze(2)], dim=2).reshape(b, k * (m + 1), d)
        groups = torch.arange(k).repeat_interleave(m + 1)
        keep = None
        if self.training and drop_prob > 0.0:
            if rng is None:
                raise ValueError("training-mode box token drop needs an explicit generator")
            per_box = torch.bernoulli(torch.full((b, k, m), 1.0 - drop_prob, dtype=DTYPE), generator=rng).bool()
            keep = torch.cat([per_box, torch.ones(b, k, 1, dtype=torch.bool)], dim=2).reshape(b, k * (m + 1))
        mask = group_mask(groups, keep)
        memory = torch.cat([patches.tokens + patches.positions, self.cls_proj(patches.cls).unsqueeze(1)], dim=1)
        for layer in self.layers:
            x = layer(x, memory, self_mask=mask, rng=rng)
        decoded = self.norm(x).reshape(b, k, m + 1, d)[:, :, m]
        return roi_tokens + self.gate * decoded


class PrefixProjector(nn.Module):
    """Maps a D-dim ROI feature to `prefix_length` key/value tokens for every LM layer."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.layers, self.length, self.lm_dim = cfg.lm_layers, cfg.prefix_length, cfg.lm_dim
        self.mlp = Mlp(cfg.dim, cfg.ff_mult * cfg.dim, cfg.lm_layers * 2 * cfg.prefix_length * cfg.lm_dim)

    def forward(self, features: Tensor) -> Prefix:
        n = features.shape[0]
        kv = self.mlp(features).reshape(n, self.layers, 2, self.length, self.lm_dim)
        return [(kv[:, i, 0], kv[:, i, 1]) for i in range(self.layers)]


class ToyDecoderLM(nn.Module):
    """Causal word-level transformer; each layer attends to its own prefix keys/values first."""

    def __init__(self, cfg: ModelConfig, vocab_size: int):
        super().__init__()
        d = cfg.lm_dim
        self.max_len = cfg.max_gen_len
        self.tok = nn.Embedding(vocab_size, d, dtype=DTYPE)
        self.pos = nn.Parameter(torch.randn(cfg.max_gen_len + 1, d, dtype=DTYPE) * 0.02)
        self.layers = nn.ModuleList(
            EncoderLayer(d, cfg.lm_heads, 4 * d, dropout_p=0.1, layer_scale_init=1.0) for _ in range(cfg.lm_layers)
        )
        self.norm = nn.LayerNorm(d, dtype=DTYPE)
        self.head = nn.Linear(d, vocab_size, dtype=DTYPE)

    def forward(self, ids: Tensor, prefix: Prefix, rng: Optional[torch.Generator] = None) -> Tensor:
        n, t = ids.shape
        if t > self.max_len + 1:
            raise ShapeMismatchError(f"sequence length {t} exceeds {self.max_len + 1}")
        if len(prefix) != len(self.layers):
            raise ShapeMismatchError("one key/value prefix per LM layer is required")
        x = self.tok(ids) + self.pos[:t]
        mask = causal_mask(t, prefix[0][0].shape[1])
        for layer, kv in zip(self.layers, prefix):
            x = layer(x, mask=mask, prefix=kv, rng=rng)
        return self.head(self.norm(x))


class SentenceGenerator(nn.Module):
    def __init__(self, cfg: ModelConfig, vocab: Vocabulary):
        super().__init__()
        self.cfg = cfg
        self.vocab = vocab
        self.post_decoder = PostDecoder(cfg)
        self.prefix = PrefixProjector(cfg)
        self.lm = ToyDecoderLM(cfg, len(vocab))

    def post_decode(self, detections: Union[Detections, Sequence[DetectionOutput]], patches: PatchGrid,
                    drop_prob: float = 0.0, rng: Optional[torch.Generator] = None) -> Tensor:
        """Refined ROI features: (B, K, D) for Detections, (K, D) for a list of one image's outputs."""
        if isinstance(detections, Detections):
            return self.post_decoder(detections.box_features, detections.roi_tokens, patches, drop_prob, rng)
        if not detections:
            raise EmptyInputError("post_decode needs at least one ROI")
        feats = torch.stack([o.box_features for o in detections]).unsqueeze(0)
        rois = torch.stack([o.roi_token for o in detections]).unsqueeze(0)
        return self.post_decoder(feats, rois, patches.select(0), drop_prob, rng)[0]

    def _check_ids(self, target: Sequence[int]) -> None:
        if not target:
            raise EmptyInputError("target sentence is empty")
        if any(not 0 <= i < len(self.vocab) for i in target):
            raise UnknownTokenError("target contains ids outside the vocabulary")

    def sentence_nll(self, features: Tensor, targets: Sequence[Sequence[int]],
                     rng: Optional[torch.Generator] = None) -> Tensor:
        """Mean per-token cross-entropy of targets (+ end token) given prefix-conditioned features (N, D)."""
        if features.ndim == 1:
            features, targets = features.unsqueeze(0), [targets]  # type: ignore[list-item]
        if features.shape[0] != len(targets) or not targets:
            raise ShapeMismatchError("one target per feature is required")
        v = self.vocab
        seqs = []
        for tgt in targets:
            self._check_ids(tgt)
            seqs.append(list(tgt)[: self.cfg.max_gen_len])
        t = max(len(s) for s in seqs) + 1
        inputs = torch.full((len(seqs), t), v.pad_id, dtype=torch.long)
        labels = torch.full((len(seqs), t), -100, dtype=torch.long)
        for i, s in enumerate(seqs):
            inputs[i, : len(s) + 1] = torch.tensor([v.bos_id] + s)
            labels[i, : len(s) + 1] = torch.tensor(s + [v.eos_id])
        logits = self.lm(inputs, self.prefix(features), rng)
        return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), labels.reshape(-1), ignore_index=-100)

    @torch.no_grad()
    def generate_batch(self, features: Tensor) -> List[List[int]]:
        """Greedy decoding from the begin token; stops at the end token or max_gen_len tokens."""
        was_training = self.training
        self.eval()
        try:
            n = features.shape[0]
            prefix = self.prefix(features)
            ids = torch.full((n, 1), self.vocab.bos_id, dtype=torch.long)
            done = torch.zeros(n, dtype=torch.bool)
            out: List[List[int]] = [[] for _ in range(n)]
            for _ in range(self.cfg.max_gen_len):
                nxt = self.lm(ids, prefix)[:, -1].argmax(dim=-1)
                for i in range(n):
                    if not done[i]:
                        if nxt[i].item() == self.vocab.eos_id:
                            done[i] = True
                        else:
                            out[i].append(int(nxt[i]))
                if bool(done.all()):
                    break
                ids = torch.cat([ids, nxt.unsqueeze(1)], dim=1)
            return out
        finally:
            self.train(was_training)

    def generate(self, feature: Tensor) -> List[int]:
        return self.generate_batch(feature.reshape(1, -1))[0]

    def describe(self, features: Tensor) -> List[str]:
        return [self.vocab.decode(ids) for ids in self.generate_batch(features)]
