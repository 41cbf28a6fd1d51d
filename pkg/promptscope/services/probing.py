"""
Prompt-modification probes on a trained model: do regional hints in a textual
prompt steer the top-scoring box?

- disambiguation: the same shape sits in a zone and its opposite zone; a hinted
  prompt should pick the hinted instance, an unhinted one neither systematically.
- redirection: the shape sits in one zone only; hinting the empty opposite zone
  should move the top box into that zone.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from promptscope.core.boxops import ScoredBox, iou
from promptscope.data.synth import Hint, compose_prompt, opposite_zone, probe_scene, zone_boxes
from promptscope.errors import EmptyInputError
from promptscope.infra.logging import get_logger
from promptscope.services.inference import Pipeline

logger = get_logger("services.probing")


@dataclass(frozen=True)
class ProbeResult:
    name: str
    rate: float
    n: int


def top_box(pipe: Pipeline, image: np.ndarray, prompt: str) -> ScoredBox:
    boxes = pipe.ground_sentences(image, [prompt], scale=1.0)[0]
    if not boxes:
        raise EmptyInputError(f"no box for prompt {prompt!r}")
    return max(boxes, key=lambda b: b.score)


def disambiguation_rate(pipe: Pipeline, n: int, hint: Hint, offset: int = 0) -> ProbeResult:
    """
    Share of two-instance scenes in which the top box overlaps the designated
    instance more than the other one. The designated instance alternates between
    the two so an unhinted prompt should land near one half.
    """
    spec = pipe.cfg.scene
    hits = 0
    for i in range(n):
        scene = probe_scene(spec, offset + i, "pair")
        target, other = scene.findings[i % 2], scene.findings[1 - i % 2]
        prompt = compose_prompt(target.class_name, hint, target.zone, spec)
        top = top_box(pipe, scene.image, prompt)
        hits += iou(top.box, target.box) > iou(top.box, other.box)
    return ProbeResult(f"disambiguation_{hint}", hits / n if n else 0.0, n)


def redirection_rate(pipe: Pipeline, n: int, offset: int = 0) -> ProbeResult:
    """Share of one-instance scenes in which a fine hint to the empty opposite zone moves the top box centre there."""
    spec = pipe.cfg.scene
    zones = zone_boxes(spec)
    hits = 0
    for i in range(n):
        scene = probe_scene(spec, offset + i, "single")
        finding = scene.findings[0]
        hinted = opposite_zone(finding.zone, spec)
        top = top_box(pipe, scene.image, compose_prompt(finding.class_name, "fine", hinted, spec))
        x1, y1, x2, y2 = zones[hinted].corners()
        hits += x1 <= top.box.cx <= x2 and y1 <= top.box.cy <= y2
    return ProbeResult("negative_hint_redirection", hits / n if n else 0.0, n)


def run_probes(pipe: Pipeline, n: int = 100, offset: int = 0) -> Dict[str, float]:
    results: List[ProbeResult] = [disambiguation_rate(pipe, n, hint, offset) for hint in ("fine", "coarse", "none")]
    results.append(redirection_rate(pipe, n, offset))
    for r in results:
        logger.info("probe name=%s rate=%.3f n=%d", r.name, r.rate, r.n)
    return {r.name: r.rate for r in results}
