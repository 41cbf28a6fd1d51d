from __future__ import annotations

from typing import List, Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, field_validator

TaskName = Literal["sg", "od", "rc", "re", "rg"]


def _check_box(v: List[float], n: int) -> List[float]:
    if len(v) != n:
        raise ValueError(f"expected {n} numbers, got {len(v)}")
    cx, cy, w, h = v[:4]
    if not (0 <= cx <= 1 and 0 <= cy <= 1 and 0 < w <= 1 and 0 < h <= 1):
        raise ValueError(f"box outside the relative (cx, cy, w, h) range: {v[:4]}")
    if n == 5 and not 0 <= v[4] <= 1:
        raise ValueError(f"score {v[4]} outside [0, 1]")
    return v


class FindingRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    class_name: str = Field(..., description="Shape class.")
    box: List[float] = Field(..., description="Relative [cx, cy, w, h].")
    zone: str = Field(default="", description="Zone containing the finding.")

    @field_validator("box")
    @classmethod
    def _box(cls, v: List[float]) -> List[float]:
        return _check_box(v, 4)


class RegionRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    boxes: List[List[float]] = Field(..., min_length=1)
    labels: List[str] = Field(default_factory=list)
    sentences: List[str] = Field(default_factory=list)

    @field_validator("boxes")
    @classmethod
    def _boxes(cls, v: List[List[float]]) -> List[List[float]]:
        return [_check_box(b, 4) for b in v]


class SampleRecord(BaseModel):
    """One annotation line of a dataset split."""

    model_config = ConfigDict(extra="forbid", json_schema_extra={
        "example": {
            "sample_id": "test-004750",
            "index": 4750,
            "source": "region",
            "image_path": "images/test-004750.pgm",
            "regions": [{"name": "upper left zone", "boxes": [[0.167, 0.167, 0.4, 0.4]],
                         "labels": ["circle"], "sentences": ["there is a circle in the upper left zone"]}],
            "pathologies": [{"class_name": "circle", "box": [0.15, 0.2, 0.12, 0.12], "zone": "upper left zone"}],
            "raters": [],
            "labels": [1, 0, 0, 0, 0, 0, 0, 0],
            "sentences": ["there is a circle in the upper left zone", "no cross in the lower right zone"],
        }
    })

    sample_id: str
    index: int = Field(..., ge=0)
    source: Literal["region", "pathology"] = "region"
    image_path: str
    regions: List[RegionRecord] = Field(default_factory=list)
    pathologies: List[FindingRecord] = Field(default_factory=list)
    raters: List[List[FindingRecord]] = Field(default_factory=list)
    labels: List[int] = Field(default_factory=list)
    sentences: List[str] = Field(default_factory=list)

    @field_validator("labels")
    @classmethod
    def _binary(cls, v: List[int]) -> List[int]:
        if any(x not in (0, 1) for x in v):
            raise ValueError("labels must be binary")
        return v


class PredictionItem(BaseModel):
    text: Optional[str] = Field(default=None, description="Prompt (sg/od) or generated description (re/rg).")
    boxes: List[List[float]] = Field(default_factory=list, description="[[cx, cy, w, h, score], ...]")
    class_name: Optional[str] = Field(default=None, alias="class")
    prob: Optional[float] = Field(default=None, ge=0.0, le=1.0)
    probs: Optional[List[float]] = Field(default=None, description="Per-class probabilities (rc).")
    prompt: Optional[str] = Field(default=None, description="Originating prompt (rg).")
    positive: Optional[bool] = None

    @field_validator("boxes")
    @classmethod
    def _boxes(cls, v: List[List[float]]) -> List[List[float]]:
        return [_check_box(b, 5) for b in v]

    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class PredictionRecord(BaseModel):
    """One line of a prediction file."""

    model_config = ConfigDict(extra="forbid")

    sample_id: str
    task: TaskName
    items: List[PredictionItem] = Field(default_factory=list)


class MetricReport(BaseModel):
    model_config = ConfigDict(extra="forbid")

    name: str
    value: float
    std: float = Field(default=0.0, ge=0.0)
    n_resamples: int = Field(default=0, ge=0)
    seed: int = 0
    excluded: List[str] = Field(default_factory=list, description="Classes left out as degenerate.")
