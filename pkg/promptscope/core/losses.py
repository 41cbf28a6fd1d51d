"""
Training objectives: box regression, batch-adaptive focal loss, detection losses
with iterative matching, the contrastive families, embedding MSE and the
per-stage weighted sums.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Dict, List, Mapping, Optional, Sequence, Union

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from promptscope.config.schema import LossConfig
from promptscope.core.boxops import Box, elementwise_giou, iterative_assignment
from promptscope.core.detector import Detections
from promptscope.core.encoders import PromptToken
from promptscope.errors import EmptyInputError, MissingLossTermError, ShapeMismatchError

_LOG_EPS = 1e-12
_DEFAULT = LossConfig()


@dataclass
class ClassPromptPair:
    """Positive ("circle") and negative ("no circle") prompt tokens of one class."""

    class_id: int
    name: str
    positive: PromptToken
    negative: PromptToken

    def __post_init__(self) -> None:
        if torch.equal(self.positive.embedding, self.negative.embedding):
            raise ValueError(f"positive and negative prompts of {self.name!r} embed identically")


@dataclass(frozen=True)
class StageWeights:
    weights: Mapping[str, float]

    def __post_init__(self) -> None:
        if any(w < 0 for w in self.weights.values()):
            raise ValueError("stage weights must be non-negative")

    @classmethod
    def for_stage(cls, stage: int) -> "StageWeights":
        try:
            return cls(STAGE_WEIGHTS[stage])
        except KeyError:
            raise ValueError(f"no loss weights for stage {stage}") from None


STAGE_WEIGHTS: Mapping[int, Mapping[str, float]] = MappingProxyType({
    0: {"sent_gen": 1.0},
    1: {"patho_detect": 10.0, "patho_cls": 1.0, "anat_detect": 0.1, "anat_cls": 0.005,
        "sent_contr": 0.005, "global_contr": 1.0},
    2: {"anat_cls": 0.01, "anat_mse": 0.04, "sent_contr": 0.005, "sent_mse": 0.02},
    3: {"anat_gen": 1.0, "anat_mse": 0.04, "sent_gen": 0.5, "sent_mse": 0.02},
})


def _as_tensor(box: Union[Box, Tensor]) -> Tensor:
    if isinstance(box, Box):
        return torch.tensor(box.as_list(), dtype=torch.float64)
    return box


def box_loss(pred: Union[Box, Tensor], target: Union[Box, Tensor], cfg: LossConfig = _DEFAULT) -> Tensor:
    """Weighted L1 over (cx, cy, w, h) plus weighted (1 - gIoU); elementwise over leading dims."""
    p, t = _as_tensor(pred), _as_tensor(target)
    if p.shape[-1] != 4 or t.shape[-1] != 4:
        raise ShapeMismatchError("boxes must have 4 coordinates")
    l1 = (p - t).abs().sum(dim=-1)
    g = elementwise_giou(p, t)
    overlap = 1.0 - g if cfg.giou_complement else -g
    return cfg.box_l1_weight * l1 + cfg.box_giou_weight * overlap


def class_alphas(targets: Tensor, class_ids: Tensor, lo: float = 0.05, hi: float = 0.95) -> Dict[int, float]:
    """alpha_c = 1 - positives_c / boxes_c over the current batch, clamped to [lo, hi]."""
    out: Dict[int, float] = {}
    for c in torch.unique(class_ids).tolist():
        sel = class_ids == c
        total = int(sel.sum())
        if total == 0:
            continue
        out[int(c)] = min(max(1.0 - float(targets[sel].sum()) / total, lo), hi)
    return out


def focal_loss(scores: Tensor, targets: Tensor, class_ids: Tensor, cfg: LossConfig = _DEFAULT,
               alpha: Optional[float] = None) -> Tensor:
    """
    Mean sigmoid-focal loss over boxes. Positives weigh alpha_c * (1 - s)^gamma,
    negatives (1 - alpha_c) * s^gamma; alpha_c comes from the batch unless given.
    """
    if scores.numel() == 0:
        return scores.new_zeros(())
    if scores.shape != targets.shape or scores.shape != class_ids.shape:
        raise ShapeMismatchError("scores, targets and class ids must align")
    if alpha is None:
        alphas = class_alphas(targets, class_ids, cfg.focal_alpha_min, cfg.focal_alpha_max)
        a = torch.tensor([alphas[int(c)] for c in class_ids.tolist()], dtype=scores.dtype)
    else:
        a = torch.full_like(scores, float(alpha))
    t = targets.to(scores.dtype)
    g = cfg.focal_gamma
    pos = -a * (1 - scores) ** g * torch.log(scores.clamp(min=_LOG_EPS))
    neg = -(1 - a) * scores ** g * torch.log((1 - scores).clamp(min=_LOG_EPS))
    return (t * pos + (1 - t) * neg).mean()


@dataclass
class DetectionTarget:
    """Targets of one prompt in one sample: detector output index (sample, prompt) and its boxes."""

    sample: int
    prompt: int
    class_id: int
    boxes: Tensor
    positive: Optional[Tensor] = None
    negative: Optional[Tensor] = None

    @property
    def has_boxes(self) -> bool:
        return self.boxes.numel() > 0


def prompt_probability(tokens: Tensor, positive: Tensor, negative: Tensor, kind: str = "dot",
                       tau: float = 1.0) -> Tensor:
    """Softmax probability of the positive prompt against its negative, by dot product or cosine."""
    if kind == "cos":
        sp = F.cosine_similarity(tokens, positive.expand_as(tokens), dim=-1)
        sn = F.cosine_similarity(tokens, negative.expand_as(tokens), dim=-1)
    else:
        sp, sn = tokens @ positive, tokens @ negative
    return torch.softmax(torch.stack([sp, sn], dim=-1) / tau, dim=-1)[..., 0]


def matching_cost(boxes: Tensor, scores: Tensor, prelim: Optional[Tensor], targets: Tensor,
                  positive: Optional[Tensor], negative: Optional[Tensor], cfg: LossConfig = _DEFAULT) -> np.ndarray:
    """(M, T) pathology matching cost: box loss +/- (class probability + 3 * box score)."""
    with torch.no_grad():
        cost = box_loss(boxes.unsqueeze(1), targets.unsqueeze(0), cfg)
        if prelim is not None and positive is not None and negative is not None:
            sign = 1.0 if cfg.match_sign == "additive" else -1.0
            p = prompt_probability(prelim, positive, negative)
            cost = cost + sign * (cfg.match_class_weight * p + cfg.match_score_weight * scores).unsqueeze(1)
    return cost.numpy()


def _select(det: Union[Detections, Sequence[Detections]], tgt: DetectionTarget):
    """(boxes, scores, preliminary) of one prompt; a sequence holds one single-image Detections per sample."""
    if isinstance(det, Detections):
        d, b = det, tgt.sample
    else:
        d, b = det[tgt.sample], 0
    prelim = None if d.preliminary is None else d.preliminary[b, tgt.prompt]
    return d.boxes[b, tgt.prompt], d.scores[b, tgt.prompt], prelim


def detection_loss(det: Union[Detections, Sequence[Detections]], targets: Sequence[DetectionTarget], mode: str,
                   cfg: LossConfig = _DEFAULT) -> Tensor:
    """
    Pathology mode: iterative matching on the full cost, summed box loss per
    positive class plus focal_weight * focal over all boxes (round-1 matches
    positive). Anatomy mode: box loss only; a single target takes all M boxes.
    Box terms are summed over prompts that have targets.
    """
    if mode not in ("pathology", "anatomy"):
        raise ValueError(f"unknown detection loss mode {mode!r}")
    zero = torch.zeros((), dtype=torch.float64)
    box_terms: List[Tensor] = []
    focal_scores: List[Tensor] = []
    focal_targets: List[Tensor] = []
    focal_classes: List[Tensor] = []
    for tgt in targets:
        boxes, scores, prelim = _select(det, tgt)
        m = boxes.shape[0]
        positive = torch.zeros(m, dtype=boxes.dtype)
        if tgt.has_boxes:
            if mode == "anatomy" and tgt.boxes.shape[0] == 1:
                pairs = [(i, 0, 1) for i in range(m)]
            else:
                prelim = prelim if mode == "pathology" else None
                cost = matching_cost(boxes, scores, prelim, tgt.boxes,
                                     tgt.positive if mode == "pathology" else None,
                                     tgt.negative if mode == "pathology" else None, cfg)
                pairs = iterative_assignment(cost).pairs
            pi = torch.tensor([p for p, _, _ in pairs])
            ti = torch.tensor([t for _, t, _ in pairs])
            box_terms.append(box_loss(boxes[pi], tgt.boxes[ti], cfg).sum())
            for p, _, rnd in pairs:
                if rnd == 1:
                    positive[p] = 1.0
        if mode == "pathology":
            focal_scores.append(scores)
            focal_targets.append(positive)
            focal_classes.append(torch.full((m,), tgt.class_id, dtype=torch.long))
    box_term = torch.stack(box_terms).sum() if box_terms else zero
    if mode == "anatomy":
        return box_term
    if not focal_scores:
        return box_term
    focal = focal_loss(torch.cat(focal_scores), torch.cat(focal_targets), torch.cat(focal_classes), cfg)
    return box_term + cfg.focal_weight * focal


def _cos_matrix(a: Tensor, b: Tensor) -> Tensor:
    if (a.norm(dim=-1) == 0).any() or (b.norm(dim=-1) == 0).any():
        raise ValueError("cosine similarity of a zero-norm vector")
    return F.normalize(a, dim=-1) @ F.normalize(b, dim=-1).T


def pathology_contrastive_loss(roi: Tensor, class_index: Tensor, labels: Tensor, positives: Tensor,
                               negatives: Tensor, tau: float = 0.2) -> Tensor:
    """
    roi (N, D) with class_index (N,) into the (C, D) prompt banks and labels (N,) in {0, 1}.
    Each ROI's target is its class's positive or negative prompt against every prompt of every class.
    """
    if roi.shape[0] == 0:
        raise EmptyInputError("no ROI tokens for the pathology contrastive loss")
    c = positives.shape[0]
    logits = torch.cat([_cos_matrix(roi, positives), _cos_matrix(roi, negatives)], dim=1) / tau
    target = torch.where(labels.bool(), class_index, class_index + c)
    return F.cross_entropy(logits, target)


def anatomy_contrastive_loss(roi: Tensor, labels: Tensor, positives: Tensor, negatives: Tensor,
                             tau: float = 0.25, max_negative_classes: int = 10,
                             rng: Optional[torch.Generator] = None) -> Tensor:
    """
    roi (A, D), labels (A, C). Classes present in any region are retained, plus at
    most max_negative_classes absent ones. The numerator averages each retained
    class's matched cosine (positive where present, negative where absent).
    """
    if roi.shape[0] == 0:
        raise EmptyInputError("no ROI tokens for the anatomy contrastive loss")
    present = labels.bool().any(dim=0)
    absent = torch.nonzero(~present).flatten()
    if absent.numel() > max_negative_classes:
        order = torch.randperm(absent.numel(), generator=rng) if rng is not None else torch.arange(absent.numel())
        absent = absent[order[:max_negative_classes]].sort().values
    keep = torch.cat([torch.nonzero(present).flatten(), absent]).sort().values
    if keep.numel() == 0:
        raise EmptyInputError("no classes retained for the anatomy contrastive loss")
    y = labels[:, keep].to(roi.dtype)
    cp, cn = _cos_matrix(roi, positives[keep]) / tau, _cos_matrix(roi, negatives[keep]) / tau
    numerator = (y * cp + (1 - y) * cn).mean(dim=1)
    denominator = torch.logsumexp(torch.cat([cp, cn], dim=1), dim=1)
    return (denominator - numerator).mean()


def region_contrastive_loss(roi: Tensor, class_prompts: Sequence[ClassPromptPair], labels: Tensor, mode: str,
                            class_index: Optional[Tensor] = None, cfg: LossConfig = _DEFAULT,
                            rng: Optional[torch.Generator] = None) -> Tensor:
    if not class_prompts:
        raise EmptyInputError("no class prompts")
    pos = torch.stack([p.positive.embedding for p in class_prompts])
    neg = torch.stack([p.negative.embedding for p in class_prompts])
    if mode == "pathology":
        if class_index is None:
            class_index = torch.arange(roi.shape[0])
        return pathology_contrastive_loss(roi, class_index, labels, pos, neg, cfg.tau_pathology)
    if mode == "anatomy":
        return anatomy_contrastive_loss(roi, labels, pos, neg, cfg.tau_anatomy, cfg.max_negative_classes, rng)
    raise ValueError(f"unknown contrastive mode {mode!r}")


def sentence_contrastive_loss(roi: Tensor, prompts: Tensor, sample_ids: Tensor, tau: float = 0.25) -> Tensor:
    """InfoNCE of each sentence ROI token against every sentence prompt in the batch; mean per sample, then over samples."""
    if roi.shape[0] == 0:
        raise EmptyInputError("batch has no sentences")
    if roi.shape != prompts.shape or sample_ids.shape[0] != roi.shape[0]:
        raise ShapeMismatchError("each ROI token needs exactly one sentence prompt")
    logits = _cos_matrix(roi, prompts) / tau
    per = F.cross_entropy(logits, torch.arange(roi.shape[0]), reduction="none")
    samples = torch.unique(sample_ids)
    return torch.stack([per[sample_ids == s].mean() for s in samples]).mean()


def global_contrastive_loss(image: Tensor, text: Tensor, tau: float = 0.2) -> Tensor:
    """Symmetric CLIP loss between pooled patch features and pooled sentence prompts."""
    if image.shape[0] == 0:
        raise EmptyInputError("empty batch")
    if image.shape != text.shape:
        raise ShapeMismatchError("image and text batches must align")
    logits = _cos_matrix(image, text) / tau
    target = torch.arange(image.shape[0])
    return 0.5 * (F.cross_entropy(logits, target) + F.cross_entropy(logits.T, target))


def embed_mse_loss(outputs: Tensor, targets: Tensor) -> Tensor:
    if outputs.shape != targets.shape:
        raise ShapeMismatchError(f"{tuple(outputs.shape)} vs {tuple(targets.shape)}")
    return F.mse_loss(outputs, targets)


def stage_loss(stage: int, parts: Mapping[str, Tensor], weights: Optional[StageWeights] = None) -> Tensor:
    w = weights or StageWeights.for_stage(stage)
    missing = [k for k in w.weights if k not in parts]
    if missing:
        raise MissingLossTermError(f"stage {stage} is missing loss terms {missing}")
    return sum((w.weights[k] * parts[k] for k in w.weights), torch.zeros((), dtype=torch.float64))


@dataclass
class LossParts:
    """Named loss terms collected during one step, with their float values for logging."""

    terms: Dict[str, Tensor] = field(default_factory=dict)

    def add(self, name: str, value: Tensor) -> None:
        self.terms[name] = value

    def scalars(self) -> Dict[str, float]:
        return {k: float(v.detach()) for k, v in self.terms.items()}
