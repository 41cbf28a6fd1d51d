"""
Box geometry, suppression and fusion, Gaussian weight maps, and Hungarian matching.

Boxes are relative (cx, cy, w, h). Scalar helpers work on Box values; the
tensor helpers below work on (..., 4) torch tensors and stay differentiable.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Tuple, TypeVar

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from promptscope.errors import InvalidBoxError, MatchingError

T = TypeVar("T")
_EPS = 1e-12


@dataclass(frozen=True)
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def __post_init__(self) -> None:
        vals = (self.cx, self.cy, self.w, self.h)
        if not all(math.isfinite(v) for v in vals):
            raise InvalidBoxError(f"non-finite box {vals}")
        if not (0.0 <= self.cx <= 1.0 and 0.0 <= self.cy <= 1.0):
            raise InvalidBoxError(f"box center out of range: {vals}")
        if not (0.0 < self.w <= 1.0 and 0.0 < self.h <= 1.0):
            raise InvalidBoxError(f"box size out of range: {vals}")

    @classmethod
    def from_corners(cls, x1: float, y1: float, x2: float, y2: float) -> "Box":
        x1, x2 = max(0.0, min(x1, x2)), min(1.0, max(x1, x2))
        y1, y2 = max(0.0, min(y1, y2)), min(1.0, max(y1, y2))
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @classmethod
    def clipped(cls, cx: float, cy: float, w: float, h: float, min_size: float = 1e-3) -> "Box":
        """Box from unconstrained values: corners clamped to the image, sizes floored."""
        x1, y1 = max(0.0, cx - w / 2), max(0.0, cy - h / 2)
        x2, y2 = min(1.0, cx + w / 2), min(1.0, cy + h / 2)
        w, h = max(x2 - x1, min_size), max(y2 - y1, min_size)
        cx = min(max((x1 + x2) / 2, 0.0), 1.0)
        cy = min(max((y1 + y2) / 2, 0.0), 1.0)
        return cls(cx, cy, min(w, 1.0), min(h, 1.0))

    def corners(self) -> Tuple[float, float, float, float]:
        """(x1, y1, x2, y2), clamped to [0, 1]."""
        return (
            max(0.0, self.cx - self.w / 2),
            max(0.0, self.cy - self.h / 2),
            min(1.0, self.cx + self.w / 2),
            min(1.0, self.cy + self.h / 2),
        )

    def area(self) -> float:
        x1, y1, x2, y2 = self.corners()
        return max(0.0, x2 - x1) * max(0.0, y2 - y1)

    def scaled(self, factor: float) -> "Box":
        """Same center, sides multiplied by factor, clipped to the image."""
        return Box.clipped(self.cx, self.cy, self.w * factor, self.h * factor)

    def hflip(self) -> "Box":
        return Box(1.0 - self.cx, self.cy, self.w, self.h)

    def as_list(self) -> List[float]:
        return [self.cx, self.cy, self.w, self.h]


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    score: float
    class_id: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise InvalidBoxError(f"box score {self.score} outside [0, 1]")


@dataclass(frozen=True)
class Assignment:
    """(pred_index, target_index, round) triples; round 1 is the initial bijective match."""

    pairs: List[Tuple[int, int, int]] = field(default_factory=list)
    total_cost: float = 0.0


def _inter_union(a: Box, b: Box) -> Tuple[float, float]:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    return inter, a.area() + b.area() - inter


def iou(a: Box, b: Box) -> float:
    inter, union = _inter_union(a, b)
    if union <= 0.0:
        return 0.0
    return inter / union


def giou(a: Box, b: Box) -> float:
    inter, union = _inter_union(a, b)
    if union <= 0.0:
        return 0.0
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    enclosing = (max(ax2, bx2) - min(ax1, bx1)) * (max(ay2, by2) - min(ay1, by1))
    if enclosing <= 0.0:
        return inter / union
    return inter / union - (enclosing - union) / enclosing


def nms(boxes: Sequence[ScoredBox], iou_threshold: float) -> List[ScoredBox]:
    """Greedy NMS: sort by score desc (lower index wins ties), suppress if IoU > threshold."""
    if not 0.0 < iou_threshold <= 1.0:
        raise ValueError("iou_threshold must lie in (0, 1]")
    order = sorted(range(len(boxes)), key=lambda i: (-boxes[i].score, i))
    kept: List[ScoredBox] = []
    for i in order:
        cand = boxes[i]
        if all(iou(cand.box, k.box) <= iou_threshold for k in kept):
            kept.append(cand)
    return kept


def _weighted_mean_box(members: Sequence[ScoredBox]) -> Box:
    weights = np.array([m.score for m in members], dtype=np.float64)
    coords = np.array([m.box.as_list() for m in members], dtype=np.float64)
    if weights.sum() <= 0.0:
        weights = np.ones_like(weights)
    cx, cy, w, h = (weights[:, None] * coords).sum(axis=0) / weights.sum()
    return Box(float(cx), float(cy), float(w), float(h))


def weighted_box_fusion(annotations: Sequence[Tuple[int, ScoredBox]], iou_threshold: float) -> List[ScoredBox]:
    """
    Fuse multi-rater boxes of one class. Boxes are visited by descending score
    (rater id, then position, break ties) and join the cluster whose current fused
    box overlaps them most, if that IoU reaches the threshold. Fused coordinates are
    the score-weighted mean of the members; the fused score is their mean score.
    """
    order = sorted(range(len(annotations)), key=lambda i: (-annotations[i][1].score, annotations[i][0], i))
    clusters: List[List[ScoredBox]] = []
    fused: List[Box] = []
    for i in order:
        sb = annotations[i][1]
        best, best_iou = -1, -1.0
        for c, fb in enumerate(fused):
            v = iou(sb.box, fb)
            if v >= iou_threshold and v > best_iou:
                best, best_iou = c, v
        if best < 0:
            clusters.append([sb])
            fused.append(sb.box)
        else:
            clusters[best].append(sb)
            fused[best] = _weighted_mean_box(clusters[best])
    out = []
    for members, fb in zip(clusters, fused):
        score = float(np.mean([m.score for m in members]))
        out.append(ScoredBox(fb, min(max(score, 0.0), 1.0), members[0].class_id))
    return out


def super_box(boxes: Sequence[ScoredBox]) -> ScoredBox:
    """Corner hull of all boxes, scored by the maximum member score."""
    if not boxes:
        raise ValueError("super_box needs at least one box")
    corners = np.array([b.box.corners() for b in boxes])
    hull = Box.from_corners(corners[:, 0].min(), corners[:, 1].min(), corners[:, 2].max(), corners[:, 3].max())
    return ScoredBox(hull, max(b.score for b in boxes), boxes[0].class_id)


# ---------- Gaussian weight maps ----------

def patch_centers(grid_h: int, grid_w: int, dtype: torch.dtype = torch.float64) -> Tuple[torch.Tensor, torch.Tensor]:
    ys = (torch.arange(grid_h, dtype=dtype) + 0.5) / grid_h
    xs = (torch.arange(grid_w, dtype=dtype) + 0.5) / grid_w
    return ys, xs


def gaussian_weight_maps(boxes: torch.Tensor, grid_h: int, grid_w: int) -> torch.Tensor:
    """
    Separable Gaussian pdf at patch centers for (..., 4) boxes, normalized to sum 1
    over the grid. Returns (..., grid_h * grid_w). Std per axis is the box size,
    floored at half a patch.
    """
    if grid_h < 1 or grid_w < 1:
        raise ValueError("grid dims must be >= 1")
    ys, xs = patch_centers(grid_h, grid_w, boxes.dtype)
    cx, cy, w, h = boxes.unbind(-1)
    sx = w.clamp(min=1.0 / (2 * grid_w))
    sy = h.clamp(min=1.0 / (2 * grid_h))
    lx = -0.5 * ((xs - cx.unsqueeze(-1)) / sx.unsqueeze(-1)) ** 2  # (..., W)
    ly = -0.5 * ((ys - cy.unsqueeze(-1)) / sy.unsqueeze(-1)) ** 2  # (..., H)
    logits = ly.unsqueeze(-1) + lx.unsqueeze(-2)  # (..., H, W)
    flat = logits.flatten(-2)
    return torch.softmax(flat, dim=-1)


def gaussian_weights(box: Box, grid_h: int, grid_w: int) -> np.ndarray:
    t = torch.tensor(box.as_list(), dtype=torch.float64)
    return gaussian_weight_maps(t, grid_h, grid_w).reshape(grid_h, grid_w).numpy()


# ---------- tensor box ops ----------

def box_cxcywh_to_xyxy(boxes: torch.Tensor) -> torch.Tensor:
    cx, cy, w, h = boxes.unbind(-1)
    return torch.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=-1).clamp(0.0, 1.0)


def elementwise_giou(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """gIoU of aligned (..., 4) cxcywh boxes."""
    a, b = box_cxcywh_to_xyxy(a), box_cxcywh_to_xyxy(b)
    area_a = (a[..., 2] - a[..., 0]).clamp(min=0) * (a[..., 3] - a[..., 1]).clamp(min=0)
    area_b = (b[..., 2] - b[..., 0]).clamp(min=0) * (b[..., 3] - b[..., 1]).clamp(min=0)
    lt = torch.maximum(a[..., :2], b[..., :2])
    rb = torch.minimum(a[..., 2:], b[..., 2:])
    wh = (rb - lt).clamp(min=0)
    inter = wh[..., 0] * wh[..., 1]
    union = area_a + area_b - inter
    lt_c = torch.minimum(a[..., :2], b[..., :2])
    rb_c = torch.maximum(a[..., 2:], b[..., 2:])
    wh_c = (rb_c - lt_c).clamp(min=0)
    area_c = wh_c[..., 0] * wh_c[..., 1]
    return inter / union.clamp(min=_EPS) - (area_c - union) / area_c.clamp(min=_EPS)


def boxes_from_tensor(t: torch.Tensor, min_size: float = 1e-3) -> List[Box]:
    return [Box.clipped(*map(float, row), min_size=min_size) for row in t.detach().reshape(-1, 4).tolist()]


# ---------- matching ----------

def hungarian(cost: np.ndarray) -> Tuple[List[Tuple[int, int]], float]:
    """Minimum-cost one-to-one assignment of min(n, m) pairs, ordered by row."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.size == 0:
        return [], 0.0
    if not np.all(np.isfinite(cost)):
        raise MatchingError("cost matrix must be finite")
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    return pairs, float(sum(cost[r, c] for r, c in pairs))


def iterative_assignment(cost: np.ndarray) -> Assignment:
    """
    Round 1 is a Hungarian match on the full matrix; unmatched predictions are
    rematched against all targets in later rounds until every prediction has one.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[1] == 0:
        raise MatchingError("iterative matching needs at least one target")
    remaining = list(range(cost.shape[0]))
    pairs: List[Tuple[int, int, int]] = []
    total = 0.0
    rnd = 1
    while remaining:
        sub_pairs, sub_cost = hungarian(cost[remaining, :])
        for r, c in sub_pairs:
            pairs.append((remaining[r], c, rnd))
        total += sub_cost
        matched = {remaining[r] for r, _ in sub_pairs}
        remaining = [p for p in remaining if p not in matched]
        rnd += 1
    pairs.sort()
    return Assignment(pairs=pairs, total_cost=total)


def match_iteratively(preds: Sequence[T], targets: Sequence[Box], cost_fn: Callable[[T, Box], float]) -> Assignment:
    if not targets:
        raise MatchingError("iterative matching needs at least one target")
    cost = np.array([[cost_fn(p, t) for t in targets] for p in preds], dtype=np.float64).reshape(len(preds), len(targets))
    if not preds:
        return Assignment()
    return iterative_assignment(cost)
