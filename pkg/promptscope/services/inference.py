"""
Zero-shot task pipelines on a trained model: sentence grounding (sg), pathology
detection (od), region classification (rc), region explanation (re) and
prompt-set report generation (rg), plus prediction-file writers and the
validation grid search for box scale factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Sequence

import numpy as np
import orjson
import torch
import torch.nn.functional as F
from torch import Tensor

from promptscope.api.models import PredictionItem, PredictionRecord
from promptscope.config.schema import RunConfig
from promptscope.core.boxops import Box, ScoredBox, boxes_from_tensor, nms, super_box
from promptscope.core.detector import Detections
from promptscope.core.encoders import PatchGrid
from promptscope.core.losses import ClassPromptPair, prompt_probability
from promptscope.core.model import PromptScopeModel
from promptscope.data.synth import SceneSample
from promptscope.errors import EmptyInputError, UnknownTokenError
from promptscope.infra.logging import get_logger
from promptscope.services.evaluation import (
    class_average_precision,
    grounding_miou,
    grounding_sentences,
    sentence_target,
)
from promptscope.store.dataset import sample_id

logger = get_logger("services.inference")

Task = Literal["sg", "od", "rc", "re", "rg"]
TASKS: Sequence[str] = ("sg", "od", "rc", "re", "rg")


@dataclass(frozen=True)
class TaskQuery:
    text: Optional[str] = None
    box: Optional[Box] = None

    def __post_init__(self) -> None:
        if (self.text is None) == (self.box is None):
            raise ValueError("a query is either a text or a box")


@dataclass
class GroundedDescription:
    text: str
    boxes: List[ScoredBox]
    prompt_source: str
    positive: bool
    score: float
    class_probs: List[float] = field(default_factory=list)


def dedup_descriptions(embeddings: Tensor, scores: Sequence[float], sim_threshold: float) -> List[int]:
    """
    Greedy by descending score (lower index first on ties): a candidate is dropped
    when its cosine with any kept item reaches the threshold. Returns kept indices ascending.
    """
    if not 0.0 < sim_threshold <= 1.0:
        raise ValueError("sim_threshold must lie in (0, 1]")
    if len(scores) == 0:
        return []
    unit = F.normalize(embeddings, dim=-1)
    kept: List[int] = []
    for i in sorted(range(len(scores)), key=lambda j: (-scores[j], j)):
        if all(float(unit[i] @ unit[k]) < sim_threshold for k in kept):
            kept.append(i)
    return sorted(kept)


def scale_boxes(boxes: Iterable[ScoredBox], factor: float) -> List[ScoredBox]:
    if factor == 1.0:
        return list(boxes)
    return [ScoredBox(b.box.scaled(factor), b.score, b.class_id) for b in boxes]


class Pipeline:
    """All task pipelines over one model; every call runs in eval mode without gradients."""

    def __init__(self, model: PromptScopeModel, cfg: RunConfig):
        self.model = model
        self.cfg = cfg
        self.task = cfg.task
        self.classes = list(cfg.scene.shape_classes)
        model.eval()

    # ---------- shared pieces ----------

    def class_prompts(self) -> List[ClassPromptPair]:
        return self.model.class_prompts(self.classes)

    @torch.no_grad()
    def patches(self, image: np.ndarray) -> PatchGrid:
        return self.model.image_encoder(torch.as_tensor(np.asarray(image), dtype=torch.float64))

    @torch.no_grad()
    def _detect(self, texts: Sequence[str], patches: PatchGrid) -> Detections:
        if not texts:
            raise EmptyInputError("no prompts")
        return self.model.detector(self.model.encode_texts(texts), patches)

    @torch.no_grad()
    def _encode_boxes(self, boxes: Sequence[Box], patches: PatchGrid) -> Detections:
        if not boxes:
            raise EmptyInputError("no query boxes")
        t = torch.tensor([b.as_list() for b in boxes], dtype=torch.float64).unsqueeze(0)
        return self.model.detector.encode_boxes(t, patches)

    @torch.no_grad()
    def _condition(self, det: Detections, patches: PatchGrid) -> Tensor:
        return self.model.generator.post_decode(det, patches)[0]

    def _pos_neg(self, prompts: Optional[Sequence[ClassPromptPair]]) -> tuple[Tensor, Tensor]:
        prompts = prompts or self.class_prompts()
        return (torch.stack([p.positive.embedding for p in prompts]),
                torch.stack([p.negative.embedding for p in prompts]))

    def _probabilities(self, feats: Tensor, prompts: Optional[Sequence[ClassPromptPair]], mode: str) -> Tensor:
        pos, neg = self._pos_neg(prompts)
        tau = self.cfg.loss.tau_anatomy
        cp = F.normalize(feats, dim=-1) @ F.normalize(pos, dim=-1).T
        if mode == "multiclass":
            return torch.softmax(cp / tau, dim=-1)
        if mode == "multilabel":
            cn = F.normalize(feats, dim=-1) @ F.normalize(neg, dim=-1).T
            return torch.softmax(torch.stack([cp, cn], dim=-1) / tau, dim=-1)[..., 0]
        raise ValueError(f"unknown classification mode {mode!r}")

    def _scored(self, det: Detections, k: int) -> List[ScoredBox]:
        boxes = boxes_from_tensor(det.boxes[0, k], self.cfg.model.box_min_size)
        scores = det.scores[0, k].clamp(0.0, 1.0).tolist()
        return [ScoredBox(b, float(s)) for b, s in zip(boxes, scores)]

    # ---------- tasks ----------

    def ground_sentences(self, image: np.ndarray, sentences: Sequence[str], scale: Optional[float] = None) -> List[List[ScoredBox]]:
        """Per sentence: detected boxes scaled by the grounding factor and suppressed at nms_iou."""
        if not sentences:
            raise EmptyInputError("no sentences to ground")
        if any(not s.strip() for s in sentences):
            raise EmptyInputError("empty sentence")
        factor = self.task.sg_scale if scale is None else scale
        det = self._detect(sentences, self.patches(image))
        return [nms(scale_boxes(self._scored(det, k), factor), self.task.nms_iou) for k in range(len(sentences))]

    def score_class_boxes(self, image: np.ndarray,
                          class_prompts: Optional[Sequence[ClassPromptPair]] = None) -> Dict[str, List[ScoredBox]]:
        """Per class: unscaled, unmerged boxes scored by class probability times box score."""
        prompts = list(class_prompts or self.class_prompts())
        if not prompts:
            raise EmptyInputError("no classes")
        patches = self.patches(image)
        with torch.no_grad():
            det = self.model.detector(torch.stack([p.positive.embedding for p in prompts]), patches)
        out: Dict[str, List[ScoredBox]] = {}
        for k, pair in enumerate(prompts):
            probs = prompt_probability(det.box_features[0, k], pair.positive.embedding, pair.negative.embedding,
                                       kind="cos", tau=self.cfg.loss.tau_pathology)
            out[pair.name] = [
                ScoredBox(sb.box, min(max(float(p) * sb.score, 0.0), 1.0), pair.class_id)
                for sb, p in zip(self._scored(det, k), probs.tolist())
            ]
        return out

    def merge_class_boxes(self, boxes: Sequence[ScoredBox], factor: float, merge: Optional[str] = None) -> List[ScoredBox]:
        """Scale first, then NMS or super-box merge; suppression sees the scaled boxes."""
        boxes = scale_boxes(boxes, factor)
        if (merge or self.task.od_merge) == "superbox":
            return [super_box(boxes)]
        return nms(boxes, self.task.nms_iou)

    def detect_pathologies(self, image: np.ndarray, class_prompts: Optional[Sequence[ClassPromptPair]] = None,
                           scales: Optional[Dict[str, float]] = None, merge: Optional[str] = None) -> Dict[str, List[ScoredBox]]:
        """Per class: boxes scored by class probability times box score, scaled, then NMS or super-box merge."""
        scales = self.task.od_class_scales if scales is None else scales
        scored = self.score_class_boxes(image, class_prompts)
        return {name: self.merge_class_boxes(boxes, scales.get(name, 1.0), merge) for name, boxes in scored.items()}

    def classify_regions(self, image: np.ndarray, boxes: Sequence[Box], mode: str = "multiclass",
                         class_prompts: Optional[Sequence[ClassPromptPair]] = None) -> Tensor:
        """(K, C) probabilities of box-pooled, post-decoded ROI features against class prompts."""
        patches = self.patches(image)
        feats = self._condition(self._encode_boxes(boxes, patches), patches)
        return self._probabilities(feats, class_prompts, mode)

    def _describe(self, det: Detections, patches: PatchGrid, sources: Sequence[str],
                  with_boxes: Sequence[bool]) -> List[GroundedDescription]:
        feats = self._condition(det, patches)
        texts = self.model.generator.describe(feats)
        probs = self._probabilities(feats, None, "multilabel")
        out = []
        for k, (text, src) in enumerate(zip(texts, sources)):
            scored = self._scored(det, k)
            boxes = nms(scored, self.task.nms_iou) if with_boxes[k] else scored
            p = probs[k].tolist()
            out.append(GroundedDescription(
                text=text, boxes=boxes, prompt_source=src,
                positive=any(x > self.task.multilabel_threshold for x in p),
                score=max(b.score for b in scored), class_probs=p,
            ))
        return out

    def explain_regions(self, image: np.ndarray, queries: Sequence[TaskQuery]) -> List[GroundedDescription]:
        """Box queries are pooled directly; text queries run full detection. Output follows query order."""
        if not queries:
            raise EmptyInputError("no queries")
        patches = self.patches(image)
        results: List[Optional[GroundedDescription]] = [None] * len(queries)
        box_idx = [i for i, q in enumerate(queries) if q.box is not None]
        text_idx = [i for i, q in enumerate(queries) if q.text is not None]
        if box_idx:
            det = self._encode_boxes([queries[i].box for i in box_idx], patches)
            for i, d in zip(box_idx, self._describe(det, patches, ["box"] * len(box_idx), [False] * len(box_idx))):
                results[i] = d
        if text_idx:
            texts = [queries[i].text for i in text_idx]
            det = self._detect(texts, patches)
            for i, d in zip(text_idx, self._describe(det, patches, texts, [True] * len(texts))):
                results[i] = d
        return [r for r in results if r is not None]

    def generate_report(self, image: np.ndarray, pathology_prompts: Optional[Sequence[str]] = None,
                        anatomy_prompts: Optional[Sequence[str]] = None) -> List[GroundedDescription]:
        """Describe every prompt, apply the positivity filters, drop near-duplicates; pathology prompts first."""
        if pathology_prompts is None:
            pathology_prompts = self.classes if self.task.pathology_prompts is None else self.task.pathology_prompts
        if anatomy_prompts is None:
            anatomy_prompts = self.cfg.scene.zone_names if self.task.anatomy_prompts is None else self.task.anatomy_prompts
        patho, anat = list(pathology_prompts), list(anatomy_prompts)
        if self.task.anatomy_filter == "none":
            anat = []
        if not patho and not anat:
            raise EmptyInputError("empty prompt sets")
        patches = self.patches(image)
        prompts = patho + anat
        items = self._describe(self._detect(prompts, patches), patches, prompts, [True] * len(prompts))
        kept: List[GroundedDescription] = []
        for k, item in enumerate(items):
            is_patho = k < len(patho)
            keep_all = self.task.pathology_filter == "keep_all" if is_patho else self.task.anatomy_filter == "keep_all"
            if item.text and (keep_all or item.positive):
                kept.append(item)
        if len(kept) < 2:
            return kept
        emb = self.model.encode_texts([d.text for d in kept])
        survivors = dedup_descriptions(emb, [d.score for d in kept], self.task.dedup_threshold)
        return [kept[i] for i in survivors]

    @staticmethod
    def report_text(items: Sequence[GroundedDescription]) -> str:
        return ". ".join(d.text for d in items if d.text)


# ---------- prediction files ----------

def _boxes_json(boxes: Sequence[ScoredBox]) -> List[List[float]]:
    return [b.box.as_list() + [b.score] for b in boxes]


def predict_sample(pipe: Pipeline, sample: SceneSample, task: str, split: str = "test") -> PredictionRecord:
    sid = sample_id(split, sample.index)
    items: List[PredictionItem] = []
    if task == "sg":
        sentences = grounding_sentences(sample)
        if sentences:
            for text, boxes in zip(sentences, pipe.ground_sentences(sample.image, sentences)):
                items.append(PredictionItem(text=text, boxes=_boxes_json(boxes)))
    elif task == "od":
        for name, boxes in pipe.detect_pathologies(sample.image).items():
            items.append(PredictionItem(class_name=name, boxes=_boxes_json(boxes)))
    elif task == "rc":
        finding_boxes = [f.box for f in sample.findings]
        zone_regions = sample.zone_regions
        boxes = finding_boxes + [r.boxes[0] for r in zone_regions]
        if boxes:
            multiclass = pipe.classify_regions(sample.image, finding_boxes, "multiclass") if finding_boxes else None
            multilabel = pipe.classify_regions(sample.image, boxes, "multilabel")
            for i, f in enumerate(finding_boxes):
                probs = multiclass[i].tolist()
                best = int(np.argmax(probs))
                items.append(PredictionItem(prompt="finding", boxes=[f.as_list() + [1.0]], class_name=pipe.classes[best],
                                            prob=probs[best], probs=probs))
            for j, region in enumerate(zone_regions):
                probs = multilabel[len(finding_boxes) + j].tolist()
                items.append(PredictionItem(prompt=region.name, boxes=[region.boxes[0].as_list() + [1.0]], probs=probs))
    elif task == "re":
        queries = [TaskQuery(box=f.box) for f in sample.findings]
        if queries:
            for f, d in zip(sample.findings, pipe.explain_regions(sample.image, queries)):
                items.append(PredictionItem(text=d.text, prompt="box", boxes=[f.box.as_list() + [d.score]],
                                            positive=d.positive))
    elif task == "rg":
        for d in pipe.generate_report(sample.image):
            items.append(PredictionItem(text=d.text, prompt=d.prompt_source, positive=d.positive,
                                        boxes=_boxes_json(d.boxes)))
    else:
        raise UnknownTokenError(f"unknown task {task!r}")
    return PredictionRecord(sample_id=sid, task=task, items=items)


def write_predictions(pipe: Pipeline, samples: Sequence[SceneSample], task: str, path: str | Path,
                      split: str = "test") -> Path:
    """One JSON object per sample, in sample order."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        for sample in samples:
            record = predict_sample(pipe, sample, task, split)
            fh.write(orjson.dumps(record.model_dump(mode="json", by_alias=True, exclude_none=True)) + b"\n")
    logger.info("wrote predictions task=%s samples=%d path=%s", task, len(samples), path)
    return path


# ---------- box-scale tuning ----------

def tune_scales(pipe: Pipeline, samples: Sequence[SceneSample], grid: Optional[Sequence[float]] = None) -> Dict[str, object]:
    """
    Grid search on a validation split: one factor for sentence grounding (mean
    mIoU) and one per class for detection (per-class mAP). Detection boxes are
    scaled before suppression, as in detect_pathologies.
    """
    grid = list(grid or pipe.task.scale_grid)
    if not grid or not samples:
        raise EmptyInputError("scale tuning needs a grid and samples")
    best_sg, best_sg_value = 1.0, -1.0
    for factor in grid:
        preds, targets = [], []
        for s in samples:
            sentences = grounding_sentences(s)
            if not sentences:
                continue
            preds += pipe.ground_sentences(s.image, sentences, scale=factor)
            targets += [[sentence_target(s, t)] for t in sentences]
        value = grounding_miou(preds, targets, pipe.task.miou_score_thresholds, pipe.task.raster_size) if preds else 0.0
        if value > best_sg_value:
            best_sg, best_sg_value = factor, value

    scored = [pipe.score_class_boxes(s.image) for s in samples]
    class_scales: Dict[str, float] = {}
    for name in pipe.classes:
        targets = [s.boxes_of(name) for s in samples]
        if not any(targets):
            continue
        best, best_value = 1.0, -1.0
        for factor in grid:
            preds = [pipe.merge_class_boxes(r[name], factor) for r in scored]
            value = class_average_precision(preds, targets, pipe.task.map_iou_thresholds)
            if value > best_value:
                best, best_value = factor, value
        class_scales[name] = best
    logger.info("tuned scales sg=%.2f sg_miou=%.4f od=%s", best_sg, best_sg_value, class_scales)
    return {"sg_scale": best_sg, "od_class_scales": class_scales}
