"""
Dataset persistence for promptscope.

Images are written as binary 8-bit PGM (P5) through Pillow; annotations are one
JSON object per line, validated with the record models in promptscope.api.models.
"""
from __future__ import annotations

from pathlib import Path
from typing import Iterable, Iterator, List

import numpy as np
import orjson
from PIL import Image
from pydantic import ValidationError

from promptscope.api.models import FindingRecord, RegionRecord, SampleRecord
from promptscope.core.boxops import Box
from promptscope.data.synth import Finding, Region, SceneSample
from promptscope.errors import SchemaViolationError
from promptscope.infra.logging import get_logger

logger = get_logger("store.dataset")

ANNOTATIONS = "{split}.jsonl"
IMAGE_DIR = "images"


def sample_id(split: str, index: int) -> str:
    return f"{split}-{index:06d}"


def write_pgm(path: Path, image: np.ndarray) -> None:
    """
    Save a [0, 1] float image as 8-bit binary PGM.

    Args:
        path: Destination file
        image: (H, W) array in [0, 1]
    """
    pixels = np.round(np.clip(image, 0.0, 1.0) * 255.0).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(pixels).save(path, format="PPM")


def read_pgm(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as img:
            if img.mode != "L":
                raise SchemaViolationError(f"{path} is not an 8-bit grayscale image")
            return np.asarray(img, dtype=np.float64) / 255.0
    except OSError as e:
        raise SchemaViolationError(f"cannot read image {path}: {e}") from e


def _finding_record(f: Finding) -> FindingRecord:
    return FindingRecord(class_name=f.class_name, box=f.box.as_list(), zone=f.zone)


def _finding(r: FindingRecord) -> Finding:
    return Finding(r.class_name, Box(*r.box), r.zone)


def to_record(sample: SceneSample, split: str) -> SampleRecord:
    sid = sample_id(split, sample.index)
    return SampleRecord(
        sample_id=sid,
        index=sample.index,
        source=sample.source,
        image_path=f"{IMAGE_DIR}/{sid}.pgm",
        regions=[RegionRecord(name=r.name, boxes=[b.as_list() for b in r.boxes], labels=r.labels, sentences=r.sentences)
                 for r in sample.regions],
        pathologies=[_finding_record(f) for f in sample.findings],
        raters=[[_finding_record(f) for f in rater] for rater in sample.raters],
        labels=sample.labels,
        sentences=sample.sentences,
    )


def from_record(record: SampleRecord, image: np.ndarray) -> SceneSample:
    return SceneSample(
        index=record.index,
        image=image,
        regions=[Region(r.name, [Box(*b) for b in r.boxes], list(r.labels), list(r.sentences)) for r in record.regions],
        findings=[_finding(f) for f in record.pathologies],
        labels=list(record.labels),
        sentences=list(record.sentences),
        source=record.source,
        raters=[[_finding(f) for f in rater] for rater in record.raters],
    )


def write_split(root: str | Path, split: str, samples: Iterable[SceneSample]) -> int:
    """
    Write one split: images under root/images, annotations to root/<split>.jsonl.

    Returns:
        Number of samples written
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    count = 0
    with open(root / ANNOTATIONS.format(split=split), "wb") as fh:
        for sample in samples:
            record = to_record(sample, split)
            write_pgm(root / record.image_path, sample.image)
            fh.write(orjson.dumps(record.model_dump(mode="json")) + b"\n")
            count += 1
    logger.info("wrote split=%s samples=%d root=%s", split, count, root)
    return count


def iter_records(root: str | Path, split: str) -> Iterator[SampleRecord]:
    path = Path(root) / ANNOTATIONS.format(split=split)
    if not path.exists():
        raise SchemaViolationError(f"missing annotation file {path}")
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                yield SampleRecord.model_validate(orjson.loads(line))
            except (orjson.JSONDecodeError, ValidationError) as e:
                raise SchemaViolationError(f"{path}:{lineno}: {e}") from e


def read_split(root: str | Path, split: str) -> List[SceneSample]:
    root = Path(root)
    samples = [from_record(r, read_pgm(root / r.image_path)) for r in iter_records(root, split)]
    logger.debug("read split=%s samples=%d", split, len(samples))
    return samples
