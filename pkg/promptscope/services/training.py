"""
Staged training.

Stage 0 warm-starts the prefix projector and LM on sentence reconstruction from
frozen prompt embeddings. Stage 1 trains the image encoder tail and the prompt
detector on pathology, anatomy and sentence prompts. Stage 2 freezes both and
trains the post decoder against contrastive and embedding targets, with some
batches querying regions by box. Stage 3 adds the prefix projector and LM with
generation losses.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import orjson
import torch
from torch import Tensor

from promptscope.config.schema import RunConfig, StageConfig
from promptscope.core.boxops import Box, ScoredBox, super_box
from promptscope.core.detector import Detections
from promptscope.core.encoders import PatchGrid
from promptscope.core.losses import (
    DetectionTarget,
    LossParts,
    anatomy_contrastive_loss,
    detection_loss,
    embed_mse_loss,
    global_contrastive_loss,
    pathology_contrastive_loss,
    sentence_contrastive_loss,
    stage_loss,
)
from promptscope.core.model import PromptScopeModel
from promptscope.data.synth import SceneSample, hflip_sample, negative_prompt, parity_schedule, random_crop
from promptscope.errors import EmptyInputError, NonFiniteError, SchemaViolationError
from promptscope.infra.logging import get_logger
from promptscope.infra.wiring import generator
from promptscope.store.checkpoint import save_checkpoint

logger = get_logger("services.training")

T = TypeVar("T")


@dataclass
class StageResult:
    stage: int
    checkpoint: Path
    losses: List[float] = field(default_factory=list)
    metrics_log: Optional[Path] = None


def lr_at(step: int, stage: StageConfig) -> float:
    """Linear warmup from 0 to lr, then cosine decay to min_lr at the final step."""
    if step < 0:
        raise ValueError("step must be >= 0")
    if stage.warmup_steps and step < stage.warmup_steps:
        return stage.lr * step / stage.warmup_steps
    decay = stage.steps - stage.warmup_steps
    if decay <= 0 or step >= stage.steps:
        return stage.min_lr if step >= stage.steps else stage.lr
    progress = (step - stage.warmup_steps) / decay
    return stage.min_lr + 0.5 * (stage.lr - stage.min_lr) * (1.0 + math.cos(math.pi * progress))


def subsample(items: Sequence[T], budget: int, rng: np.random.Generator) -> List[T]:
    """At most `budget` items, original order kept; everything when the budget suffices."""
    if len(items) <= budget:
        return list(items)
    keep = np.sort(rng.choice(len(items), size=budget, replace=False))
    return [items[int(i)] for i in keep]


def _box_tensor(boxes: Sequence[Box]) -> Tensor:
    return torch.tensor([b.as_list() for b in boxes], dtype=torch.float64).reshape(-1, 4)


def _hull(boxes: Sequence[Box]) -> Box:
    return super_box([ScoredBox(b, 1.0) for b in boxes]).box


class StageRunner:
    """Builds the per-stage loss terms for a batch of samples."""

    def __init__(self, model: PromptScopeModel, cfg: RunConfig, stage: StageConfig):
        self.model, self.cfg, self.stage = model, cfg, stage
        self.classes = list(cfg.scene.shape_classes)
        self.pos = model.encode_texts(self.classes)
        self.neg = model.encode_texts([negative_prompt(c) for c in self.classes])

    # ---------- batch preparation ----------

    def augment(self, sample: SceneSample, rng: np.random.Generator) -> SceneSample:
        if rng.random() < self.stage.flip_prob:
            sample = hflip_sample(sample)
        if rng.random() < self.stage.crop_prob:
            sample = random_crop(sample, self.stage.crop_scale, rng)
        return sample

    def encode_images(self, batch: Sequence[SceneSample]) -> PatchGrid:
        images = torch.from_numpy(np.stack([s.image for s in batch])).to(torch.float64)
        return self.model.image_encoder(images)

    def zero(self) -> Tensor:
        return torch.zeros((), dtype=torch.float64)

    # ---------- stage 0 ----------

    def warmup_parts(self, sentences: Sequence[str], rng: torch.Generator) -> LossParts:
        parts = LossParts()
        feats = self.model.encode_texts(sentences)
        targets = [self.model.vocab.encode(s) for s in sentences]
        parts.add("sent_gen", self.model.generator.sentence_nll(feats, targets, rng))
        return parts

    # ---------- stage 1 ----------

    def detection_parts(self, batch: Sequence[SceneSample], nrng: np.random.Generator,
                        rng: torch.Generator) -> LossParts:
        st, loss_cfg = self.stage, self.cfg.loss
        patches = self.encode_images(batch)
        det_list: List[Detections] = []
        patho_targets: List[DetectionTarget] = []
        anat_targets: List[DetectionTarget] = []
        cls_roi, cls_index, cls_label = [], [], []
        anat_roi, anat_labels = [], []
        sent_roi, sent_prompt, sent_sample = [], [], []
        global_img, global_txt = [], []

        for i, sample in enumerate(batch):
            prompts: List[str] = []
            patho: List[int] = []
            if st.use_pathology_tokens:
                patho = subsample(range(len(self.classes)), max(st.pathology_box_budget, st.pathology_cls_budget), nrng)
                prompts += [self.classes[c] for c in patho]
            regions = subsample(sample.regions, st.anatomy_budget, nrng) if st.use_anatomy_tokens else []
            prompts += [r.name for r in regions]
            sentences = subsample(sample.sentences, st.sentence_budget, nrng) if st.use_sentence_tokens else []
            prompts += sentences
            if not prompts:
                continue
            det = self.model.detector(self.model.encode_texts(prompts), patches.select(i), rng)
            det_list.append(det)
            d = len(det_list) - 1

            if sample.source == "pathology" and st.train_boxes:
                findings = sample.training_findings(self.cfg.task.wbf_iou)
                box_set = set(subsample(patho, st.pathology_box_budget, nrng))
                for k, c in enumerate(patho):
                    if c in box_set:
                        boxes = [f.box for f in findings if f.class_name == self.classes[c]]
                        patho_targets.append(DetectionTarget(d, k, c, _box_tensor(boxes), self.pos[c], self.neg[c]))
            cls_set = set(subsample(patho, st.pathology_cls_budget, nrng))
            for k, c in enumerate(patho):
                if c in cls_set:
                    cls_roi.append(det.roi_tokens[0, k])
                    cls_index.append(c)
                    cls_label.append(sample.labels[c])

            offset = len(patho)
            for j, region in enumerate(regions):
                k = offset + j
                anat_targets.append(DetectionTarget(d, k, -1, _box_tensor(region.boxes)))
                anat_roi.append(det.roi_tokens[0, k])
                anat_labels.append([int(c in region.labels) for c in self.classes])

            offset += len(regions)
            if sentences:
                for j, text in enumerate(sentences):
                    sent_roi.append(det.roi_tokens[0, offset + j])
                    sent_sample.append(i)
                sent_prompt.append(self.model.encode_texts(sentences))
                global_img.append(patches.tokens[i].mean(dim=0))
                global_txt.append(sent_prompt[-1].mean(dim=0))

        parts = LossParts()
        zero = self.zero()
        parts.add("patho_detect", detection_loss(det_list, patho_targets, "pathology", loss_cfg) if patho_targets else zero)
        parts.add("anat_detect", detection_loss(det_list, anat_targets, "anatomy", loss_cfg)
                  if (anat_targets and st.train_boxes) else zero)
        if st.train_classes and cls_roi:
            parts.add("patho_cls", pathology_contrastive_loss(
                torch.stack(cls_roi), torch.tensor(cls_index), torch.tensor(cls_label), self.pos, self.neg,
                loss_cfg.tau_pathology))
        else:
            parts.add("patho_cls", zero)
        parts.add("anat_cls", self._anatomy_cls(anat_roi, anat_labels, rng) if st.train_classes else zero)
        if st.train_sentences and sent_roi:
            parts.add("sent_contr", sentence_contrastive_loss(
                torch.stack(sent_roi), torch.cat(sent_prompt), torch.tensor(sent_sample), loss_cfg.tau_sentence))
            parts.add("global_contr", global_contrastive_loss(
                torch.stack(global_img), torch.stack(global_txt), loss_cfg.tau_global))
        else:
            parts.add("sent_contr", zero)
            parts.add("global_contr", zero)
        return parts

    def _anatomy_cls(self, roi: List[Tensor], labels: List[List[int]], rng: torch.Generator) -> Tensor:
        if not roi:
            return self.zero()
        return anatomy_contrastive_loss(torch.stack(roi), torch.tensor(labels), self.pos, self.neg,
                                        self.cfg.loss.tau_anatomy, self.cfg.loss.max_negative_classes, rng)

    # ---------- stages 2 and 3 ----------

    def conditioned_parts(self, batch: Sequence[SceneSample], nrng: np.random.Generator,
                          rng: torch.Generator) -> LossParts:
        st, model = self.stage, self.model
        box_queries = bool(nrng.random() < st.box_query_prob)
        with torch.no_grad():
            patches = self.encode_images(batch)
        feats_a, labels_a, texts_a = [], [], []
        feats_s, prompts_s, sample_s, texts_s = [], [], [], []
        for i, sample in enumerate(batch):
            single = patches.select(i)
            regions = subsample(sample.regions, st.anatomy_budget, nrng) if st.use_anatomy_tokens else []
            regions = [r for r in regions if r.sentences]
            if regions:
                with torch.no_grad():
                    if box_queries:
                        query = _box_tensor([_hull(r.boxes) for r in regions]).unsqueeze(0)
                        det = model.detector.encode_boxes(query, single)
                    else:
                        det = model.detector(model.encode_texts([r.name for r in regions]), single)
                z = model.generator.post_decode(det, single, st.box_token_drop_prob, rng)[0]
                feats_a.append(z)
                labels_a += [[int(c in r.labels) for c in self.classes] for r in regions]
                texts_a += [r.sentences for r in regions]
            sentences = subsample(sample.sentences, st.sentence_budget, nrng) if st.use_sentence_tokens else []
            if sentences:
                q = model.encode_texts(sentences)
                with torch.no_grad():
                    det = model.detector(q, single)
                feats_s.append(model.generator.post_decode(det, single, st.box_token_drop_prob, rng)[0])
                prompts_s.append(q)
                sample_s += [i] * len(sentences)
                texts_s += sentences

        parts = LossParts()
        zero = self.zero()
        za = torch.cat(feats_a) if feats_a else None
        zs = torch.cat(feats_s) if feats_s else None
        qs = torch.cat(prompts_s) if prompts_s else None
        if za is not None:
            targets = torch.stack([model.encode_texts(t).mean(dim=0) for t in texts_a])
            parts.add("anat_mse", embed_mse_loss(za, targets) if st.train_sentences else zero)
        else:
            parts.add("anat_mse", zero)
        if zs is not None and st.train_sentences:
            parts.add("sent_mse", embed_mse_loss(zs, qs))
        else:
            parts.add("sent_mse", zero)

        if st.stage == 2:
            parts.add("anat_cls", self._anatomy_cls(list(za), labels_a, rng)
                      if (za is not None and st.train_classes) else zero)
            parts.add("sent_contr", sentence_contrastive_loss(zs, qs, torch.tensor(sample_s), self.cfg.loss.tau_sentence)
                      if (zs is not None and st.train_sentences) else zero)
        else:
            vocab = model.vocab
            parts.add("anat_gen", model.generator.sentence_nll(za, [vocab.encode_joined(t) for t in texts_a], rng)
                      if (za is not None and st.train_sentences) else zero)
            parts.add("sent_gen", model.generator.sentence_nll(zs, [vocab.encode(t) for t in texts_s], rng)
                      if (zs is not None and st.train_sentences) else zero)
        return parts


def _collect_sentences(samples: Sequence[SceneSample]) -> List[str]:
    seen: Dict[str, None] = {}
    for s in samples:
        for text in s.sentences:
            seen.setdefault(text, None)
        for r in s.regions:
            for text in r.sentences:
                seen.setdefault(text, None)
    return list(seen)


def _set_modes(model: PromptScopeModel, trained: Sequence[str]) -> None:
    model.train()
    for name in ("image_encoder", "prompt_encoder", "detector", "post_decoder", "prefix", "lm"):
        if name not in trained:
            model.component(name).eval()


def run_stage(model: PromptScopeModel, cfg: RunConfig, stage_id: int, samples: Sequence[SceneSample],
              out_dir: str | Path) -> StageResult:
    """
    Train one stage in place and write its checkpoint and metrics log.

    Args:
        model: Model holding the previous stage's parameters
        cfg: Resolved run configuration
        stage_id: 0, 1, 2 or 3
        samples: Training split
        out_dir: Run directory; writes checkpoints/stage<k>.ckpt and metrics/stage<k>.jsonl

    Returns:
        StageResult with the per-step losses
    """
    stage = cfg.stage(stage_id)
    if not samples:
        raise EmptyInputError("no training samples")
    out = Path(out_dir)
    metrics_path = out / "metrics" / f"stage{stage_id}.jsonl"
    metrics_path.parent.mkdir(parents=True, exist_ok=True)

    params = model.set_trainable(stage.trained)
    if not params:
        raise SchemaViolationError(f"stage {stage_id} has nothing to train")
    optimizer = torch.optim.AdamW(params, lr=stage.lr, betas=stage.betas, weight_decay=stage.weight_decay)
    runner = StageRunner(model, cfg, stage)
    rng = generator(cfg.seed, stream=stage_id + 1)
    if stage_id == 0:
        pool: Sequence = _collect_sentences(samples)
        schedule = list(range(len(pool)))
    else:
        pool = [s for s in samples if stage_id == 1 or s.source == "region"]
        schedule = parity_schedule(pool, np.random.default_rng([cfg.seed, stage_id])) if stage_id == 1 else list(range(len(pool)))
    if not schedule:
        raise EmptyInputError(f"stage {stage_id} has no usable samples")

    logger.info("stage=%d start steps=%d batch=%d trainable=%d pool=%d", stage_id, stage.steps, stage.batch_size,
                sum(p.numel() for p in params), len(schedule))
    losses: List[float] = []
    with open(metrics_path, "wb") as log_fh:
        for step in range(stage.steps):
            lr = lr_at(step + 1, stage)
            for group in optimizer.param_groups:
                group["lr"] = lr
            nrng = np.random.default_rng([cfg.seed, stage_id, step])
            picks = [schedule[int(j)] for j in nrng.integers(len(schedule), size=stage.batch_size)]
            _set_modes(model, stage.trained)
            if stage_id == 0:
                parts = runner.warmup_parts([pool[j] for j in picks], rng)
            else:
                batch = [runner.augment(pool[j], nrng) for j in picks]
                parts = runner.detection_parts(batch, nrng, rng) if stage_id == 1 else runner.conditioned_parts(batch, nrng, rng)
            loss = stage_loss(stage_id, parts.terms)
            if not torch.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at stage={stage_id} step={step}: {parts.scalars()}")
            if not loss.requires_grad:
                logger.warning("stage=%d step=%d has no trainable loss terms; skipped", stage_id, step)
                losses.append(float(loss))
                continue
            optimizer.zero_grad(set_to_none=True)
            loss.backward()
            grad_norm = float(torch.nn.utils.clip_grad_norm_(params, stage.clip_norm))
            if not math.isfinite(grad_norm):
                raise NonFiniteError(f"non-finite gradient at stage={stage_id} step={step}")
            optimizer.step()
            value = float(loss.detach())
            losses.append(value)
            if step % stage.log_every == 0 or step == stage.steps - 1:
                record = {"stage": stage_id, "step": step, "lr": lr, "loss": value, "grad_norm": grad_norm, **parts.scalars()}
                log_fh.write(orjson.dumps(record, option=orjson.OPT_SORT_KEYS) + b"\n")
                logger.info("stage=%d step=%d lr=%.3g loss=%.4f grad_norm=%.3f", stage_id, step, lr, value, grad_norm)

    model.eval()
    ckpt = save_checkpoint(model, out / "checkpoints" / f"stage{stage_id}.ckpt",
                           meta={"stage": stage_id, "steps": stage.steps, "seed": cfg.seed, "name": cfg.name})
    return StageResult(stage_id, ckpt, losses, metrics_path)


def train(model: PromptScopeModel, cfg: RunConfig, samples: Sequence[SceneSample], out_dir: str | Path,
          stages: Optional[Sequence[int]] = None) -> List[StageResult]:
    """Run the configured stages in order (or the given subset)."""
    order = sorted(s.stage for s in cfg.stages) if stages is None else list(stages)
    return [run_stage(model, cfg, sid, samples, out_dir) for sid in order]


def parameter_digest(model: PromptScopeModel, component: str) -> Tuple[float, ...]:
    """Cheap fingerprint of a component's parameters (sum and squared sum per tensor)."""
    out: List[float] = []
    for p in model.component(component).parameters():
        d = p.detach()
        out += [float(d.sum()), float((d * d).sum())]
    return tuple(out)
