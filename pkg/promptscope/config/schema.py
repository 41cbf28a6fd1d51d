from __future__ import annotations

from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import orjson
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from promptscope.errors import SchemaViolationError

DEFAULT_SHAPES = ["circle", "square", "cross", "triangle", "ring", "diamond", "bar", "stripe"]
ROW_NAMES = {1: ["middle"], 2: ["upper", "lower"], 3: ["upper", "middle", "lower"]}
COL_NAMES = {1: ["center"], 2: ["left", "right"], 3: ["left", "center", "right"]}


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SceneSpec(_Strict):
    """Procedural scene corpus: shapes stand in for findings, zones for anatomy."""

    image_size: int = Field(default=48, ge=8, description="Square image side in pixels.")
    zone_rows: int = Field(default=3, ge=1, le=3)
    zone_cols: int = Field(default=3, ge=1, le=3)
    zone_overlap: float = Field(default=0.1, ge=0.0, lt=0.5, description="Margin per side, fraction of a cell.")
    shape_classes: List[str] = Field(default_factory=lambda: list(DEFAULT_SHAPES))
    shape_count_probs: List[float] = Field(
        default_factory=lambda: [0.15, 0.35, 0.3, 0.2],
        description="Probability of 0, 1, 2, ... shapes per image.",
    )
    noise: float = Field(default=0.05, ge=0.0, le=0.5)
    negative_sentences: int = Field(default=2, ge=0, description="Negative report sentences per image.")
    max_raters: int = Field(default=3, ge=1, description="Raters per pathology-only image before fusion.")
    rater_jitter: float = Field(default=0.03, ge=0.0)
    pathology_fraction: float = Field(default=0.25, gt=0.0, lt=1.0, description="Share of pathology-only sources.")
    seed: int = 0
    n_train: int = Field(default=4000, ge=1)
    n_val: int = Field(default=250, ge=1)
    n_test: int = Field(default=500, ge=1)

    @field_validator("shape_classes")
    @classmethod
    def _unique_shapes(cls, v: List[str]) -> List[str]:
        if len(set(v)) != len(v) or not v:
            raise ValueError("shape classes must be unique and non-empty")
        if any(" " in s for s in v):
            raise ValueError("shape class names must be single words")
        return v

    @field_validator("shape_count_probs")
    @classmethod
    def _probs(cls, v: List[float]) -> List[float]:
        if not v or any(p < 0 for p in v) or abs(sum(v) - 1.0) > 1e-6:
            raise ValueError("shape_count_probs must be a probability vector")
        return v

    @property
    def zone_names(self) -> List[str]:
        rows, cols = ROW_NAMES[self.zone_rows], COL_NAMES[self.zone_cols]
        return [f"{r} {c} zone" for r in rows for c in cols]

    @property
    def row_names(self) -> List[str]:
        return list(ROW_NAMES[self.zone_rows])


class ModelConfig(_Strict):
    dim: int = Field(default=64, ge=8, description="Shared image-text model dimension.")
    heads: int = Field(default=4, ge=1)
    ff_mult: int = Field(default=4, ge=1, description="Feed-forward hidden = ff_mult * dim.")
    patch_size: int = Field(default=8, ge=1)
    encoder_layers: int = Field(default=4, ge=1)
    frozen_layers: Optional[int] = Field(default=None, description="Frozen image-encoder layers; None = half.")
    text_layers: int = Field(default=1, ge=1)
    max_text_len: int = Field(default=32, ge=4)
    detector_layers: int = Field(default=3, ge=1, description="Full preset: 6.")
    num_box_tokens: int = Field(default=3, ge=1, description="M boxes per prompt.")
    post_layers: int = Field(default=3, ge=1)
    lm_layers: int = Field(default=2, ge=1)
    lm_dim: int = Field(default=64, ge=8)
    lm_heads: int = Field(default=4, ge=1)
    prefix_length: int = Field(default=5, ge=1)
    max_gen_len: int = Field(default=128, ge=1)
    dropout: float = Field(default=0.3, ge=0.0, lt=1.0)
    attn_dropout: float = Field(default=0.1, ge=0.0, lt=1.0)
    drop_path: float = Field(default=0.2, ge=0.0, lt=1.0)
    layer_scale_init: float = 0.1
    skip_prob: float = Field(default=0.25, ge=0.0, le=1.0, description="Random skip of preliminary ROI tokens.")
    skip_granularity: Literal["batch", "roi"] = "batch"
    skip_in_eval: bool = False
    box_min_size: float = Field(default=1e-3, gt=0.0, lt=1.0)

    @model_validator(mode="after")
    def _check_dims(self) -> "ModelConfig":
        if self.dim % self.heads or self.lm_dim % self.lm_heads:
            raise ValueError("model dims must be divisible by head counts")
        if self.frozen_layers is not None and not 0 <= self.frozen_layers <= self.encoder_layers:
            raise ValueError("frozen_layers must lie in [0, encoder_layers]")
        return self

    @property
    def resolved_frozen_layers(self) -> int:
        return self.encoder_layers // 2 if self.frozen_layers is None else self.frozen_layers


class LossConfig(_Strict):
    box_l1_weight: float = 5.0
    box_giou_weight: float = 2.0
    giou_complement: bool = Field(default=True, description="Use (1 - gIoU) as in DETR.")
    match_sign: Literal["additive", "subtractive"] = Field(
        default="additive", description="Sign of class-probability and box-score terms in the matching cost."
    )
    match_class_weight: float = 1.0
    match_score_weight: float = 3.0
    focal_weight: float = 3.0
    focal_gamma: float = 2.0
    focal_alpha_min: float = 0.05
    focal_alpha_max: float = 0.95
    tau_pathology: float = 0.2
    tau_anatomy: float = 0.25
    tau_sentence: float = 0.25
    tau_global: float = 0.2
    max_negative_classes: int = Field(default=10, ge=0)


Component = Literal["image_encoder", "prompt_encoder", "detector", "post_decoder", "prefix", "lm"]


class StageConfig(_Strict):
    stage: Literal[0, 1, 2, 3]
    steps: int = Field(ge=1)
    batch_size: int = Field(default=16, ge=1)
    lr: float = Field(default=1e-4, gt=0.0)
    min_lr: float = Field(default=1e-7, ge=0.0)
    warmup_steps: int = Field(default=50, ge=0)
    weight_decay: float = Field(default=1e-5, ge=0.0)
    clip_norm: float = Field(default=1.0, gt=0.0)
    betas: Tuple[float, float] = (0.9, 0.999)
    trained: List[Component] = Field(default_factory=list, description="Components updated in this stage.")
    pathology_box_budget: int = Field(default=10, ge=1)
    pathology_cls_budget: int = Field(default=10, ge=1)
    anatomy_budget: int = Field(default=20, ge=1)
    sentence_budget: int = Field(default=32, ge=1)
    box_query_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    box_token_drop_prob: float = Field(default=0.3, ge=0.0, lt=1.0)
    use_pathology_tokens: bool = True
    use_anatomy_tokens: bool = True
    use_sentence_tokens: bool = True
    train_boxes: bool = True
    train_classes: bool = True
    train_sentences: bool = True
    flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    crop_scale: Tuple[float, float] = (0.5, 1.0)
    crop_prob: float = Field(default=0.0, ge=0.0, le=1.0)
    log_every: int = Field(default=10, ge=1)

    @model_validator(mode="after")
    def _check(self) -> "StageConfig":
        if self.warmup_steps > self.steps:
            raise ValueError("warmup_steps must not exceed steps")
        if self.min_lr > self.lr:
            raise ValueError("min_lr must not exceed lr")
        lo, hi = self.crop_scale
        if not 0.0 < lo <= hi <= 1.0:
            raise ValueError("crop_scale must satisfy 0 < lo <= hi <= 1")
        return self


class TaskConfig(_Strict):
    nms_iou: float = Field(default=0.25, gt=0.0, le=1.0)
    wbf_iou: float = Field(default=0.1, gt=0.0, le=1.0)
    sg_scale: float = Field(default=1.0, gt=0.0)
    od_class_scales: Dict[str, float] = Field(default_factory=dict)
    od_merge: Literal["nms", "superbox"] = "nms"
    scale_grid: List[float] = Field(default_factory=lambda: [0.8, 0.9, 1.0, 1.1, 1.2])
    dedup_threshold: float = Field(default=0.9, gt=0.0, le=1.0)
    pathology_filter: Literal["keep_all", "positive_only"] = "keep_all"
    anatomy_filter: Literal["positive_only", "keep_all", "none"] = "positive_only"
    pathology_prompts: Optional[List[str]] = Field(default=None, description="Report prompt set; None = all shapes.")
    anatomy_prompts: Optional[List[str]] = Field(default=None, description="Report prompt set; None = all zones.")
    multilabel_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)
    map_iou_thresholds: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7])
    miou_score_thresholds: List[float] = Field(default_factory=lambda: [0.1, 0.2, 0.3, 0.4, 0.5])
    raster_size: int = Field(default=224, ge=8)
    bootstrap_n: int = Field(default=250, ge=2)
    bootstrap_n_generation: int = Field(default=10, ge=2)
    bootstrap_seed: int = 0

    @field_validator("map_iou_thresholds", "miou_score_thresholds")
    @classmethod
    def _sorted(cls, v: List[float]) -> List[float]:
        if not v or sorted(v) != v:
            raise ValueError("thresholds must be non-empty and sorted")
        return v


class RunConfig(_Strict):
    name: str = "toy"
    seed: int = 0
    scene: SceneSpec = Field(default_factory=SceneSpec)
    model: ModelConfig = Field(default_factory=ModelConfig)
    loss: LossConfig = Field(default_factory=LossConfig)
    stages: List[StageConfig] = Field(default_factory=lambda: toy_stages())
    task: TaskConfig = Field(default_factory=TaskConfig)
    out_dir: str = "./runs/toy"

    def stage(self, stage_id: int) -> StageConfig:
        for s in self.stages:
            if s.stage == stage_id:
                return s
        raise SchemaViolationError(f"no configuration for stage {stage_id}")


def toy_stages() -> List[StageConfig]:
    return [
        StageConfig(stage=0, steps=150, batch_size=16, lr=3e-4, warmup_steps=20, trained=["prefix", "lm"]),
        StageConfig(stage=1, steps=500, batch_size=16, lr=1e-3, warmup_steps=50, trained=["image_encoder", "detector"]),
        StageConfig(
            stage=2, steps=200, batch_size=16, lr=1e-3, warmup_steps=20, trained=["post_decoder"],
            box_query_prob=0.25, box_token_drop_prob=0.3, use_pathology_tokens=False, train_boxes=False,
        ),
        StageConfig(
            stage=3, steps=300, batch_size=16, lr=3e-4, warmup_steps=30, trained=["post_decoder", "prefix", "lm"],
            box_query_prob=0.25, box_token_drop_prob=0.1, use_pathology_tokens=False, train_boxes=False,
            train_classes=False,
        ),
    ]


def full_stages() -> List[StageConfig]:
    return [
        StageConfig(stage=0, steps=20000, batch_size=32, lr=3e-4, warmup_steps=10000, trained=["prefix", "lm"]),
        StageConfig(stage=1, steps=44000, batch_size=256, lr=1e-4, warmup_steps=1000, trained=["image_encoder", "detector"]),
        StageConfig(
            stage=2, steps=176000, batch_size=256, lr=1e-3, warmup_steps=1000, trained=["post_decoder"],
            box_query_prob=0.25, box_token_drop_prob=0.3, use_pathology_tokens=False, train_boxes=False,
        ),
        StageConfig(
            stage=3, steps=142000, batch_size=256, lr=3e-4, warmup_steps=10000, trained=["post_decoder", "prefix", "lm"],
            box_query_prob=0.25, box_token_drop_prob=0.1, use_pathology_tokens=False, train_boxes=False,
            train_classes=False,
        ),
    ]


def toy_config() -> RunConfig:
    return RunConfig()


def full_config() -> RunConfig:
    """Full-scale architecture and schedule; not meant to train on a laptop."""
    return RunConfig(
        name="full",
        model=ModelConfig(dim=512, heads=8, ff_mult=4, encoder_layers=12, frozen_layers=8,
                          detector_layers=6, lm_dim=512, lm_heads=8),
        stages=full_stages(),
        scene=SceneSpec(image_size=224, n_train=227382),
        out_dir="./runs/full",
    )


PRESETS = {"toy": toy_config, "full": full_config}


def _parse_value(raw: str) -> Any:
    try:
        return orjson.loads(raw)
    except orjson.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: List[str]) -> Dict[str, Any]:
    """Apply `a.b.c=value` overrides in place; list items are addressed by index."""
    for item in overrides:
        if "=" not in item:
            raise SchemaViolationError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        node: Any = data
        parts = key.strip().split(".")
        for part in parts[:-1]:
            if isinstance(node, list):
                node = node[int(part)]
            else:
                node = node.setdefault(part, {})
        last = parts[-1]
        if isinstance(node, list):
            node[int(last)] = _parse_value(raw)
        else:
            node[last] = _parse_value(raw)
    return data


def load_run_config(path: str | Path | None = None, overrides: Optional[List[str]] = None,
                    preset: str = "toy") -> RunConfig:
    """Load a RunConfig from JSON (or a preset) and apply dotted overrides."""
    if preset not in PRESETS:
        raise SchemaViolationError(f"unknown preset {preset!r}")
    if path is None:
        data: Dict[str, Any] = PRESETS[preset]().model_dump(mode="json")
    else:
        try:
            data = orjson.loads(Path(path).read_bytes())
        except (OSError, orjson.JSONDecodeError) as e:
            raise SchemaViolationError(f"cannot read config {path}: {e}") from e
    apply_overrides(data, overrides or [])
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise SchemaViolationError(str(e)) from e


def dump_run_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(orjson.dumps(cfg.model_dump(mode="json"), option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))
