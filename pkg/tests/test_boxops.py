import itertools
import math

import numpy as np
import pytest
import torch

from promptscope.core.boxops import (
    Box,
    ScoredBox,
    elementwise_giou,
    gaussian_weights,
    giou,
    hungarian,
    iou,
    match_iteratively,
    nms,
    super_box,
    weighted_box_fusion,
)
from promptscope.errors import InvalidBoxError, MatchingError

FULL = Box(0.5, 0.5, 1.0, 1.0)
LEFT = Box(0.25, 0.5, 0.5, 1.0)
RIGHT = Box(0.75, 0.5, 0.5, 1.0)
QUARTER = Box(0.25, 0.25, 0.5, 0.5)


def test_box_rejects_out_of_range_values():
    with pytest.raises(InvalidBoxError):
        Box(0.5, 0.5, 0.0, 0.2)
    with pytest.raises(InvalidBoxError):
        Box(1.2, 0.5, 0.1, 0.1)
    with pytest.raises(InvalidBoxError):
        Box(float("nan"), 0.5, 0.1, 0.1)
    with pytest.raises(InvalidBoxError):
        ScoredBox(FULL, 1.5)


def test_iou_examples():
    assert iou(FULL, FULL) == pytest.approx(1.0)
    assert iou(LEFT, RIGHT) == pytest.approx(0.0)
    assert iou(FULL, QUARTER) == pytest.approx(0.25)


def test_giou_examples():
    assert giou(FULL, FULL) == pytest.approx(1.0)
    assert giou(LEFT, RIGHT) == pytest.approx(0.0)
    assert giou(Box(0.2, 0.5, 0.4, 1.0), Box(0.8, 0.5, 0.4, 1.0)) == pytest.approx(-0.2)


def test_iou_giou_properties_on_random_boxes():
    rng = np.random.default_rng(3)
    for _ in range(200):
        a = Box.clipped(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.6, 2))
        b = Box.clipped(*rng.uniform(0.1, 0.9, 2), *rng.uniform(0.05, 0.6, 2))
        assert iou(a, b) == pytest.approx(iou(b, a))
        assert giou(a, b) == pytest.approx(giou(b, a))
        assert giou(a, b) <= iou(a, b) + 1e-12
        assert -1.0 <= giou(a, b) <= 1.0
    assert giou(FULL, QUARTER) == pytest.approx(iou(FULL, QUARTER))


def test_tensor_giou_matches_scalar():
    a = torch.tensor([0.2, 0.5, 0.4, 1.0], dtype=torch.float64)
    b = torch.tensor([0.8, 0.5, 0.4, 1.0], dtype=torch.float64)
    assert float(elementwise_giou(a, b)) == pytest.approx(-0.2)


def test_nms_examples():
    assert nms([], 0.25) == []
    kept = nms([ScoredBox(FULL, 0.8), ScoredBox(FULL, 0.9)], 0.25)
    assert [b.score for b in kept] == [0.9]
    assert len(nms([ScoredBox(LEFT, 0.9), ScoredBox(RIGHT, 0.8)], 0.25)) == 2


def test_nms_threshold_boundary():
    a = Box.from_corners(0.0, 0.0, 1.0, 0.65)
    b = Box.from_corners(0.0, 0.35, 1.0, 1.0)
    assert iou(a, b) == pytest.approx(0.3)
    overlap = iou(a, b)
    boxes = [ScoredBox(a, 0.9), ScoredBox(b, 0.5)]
    assert overlap > 0.25
    assert len(nms(boxes, 0.25)) == 1
    assert len(nms(boxes, 0.5)) == 2


def test_nms_is_idempotent_and_sorted():
    rng = np.random.default_rng(0)
    boxes = [
        ScoredBox(Box.clipped(*rng.uniform(0.2, 0.8, 2), *rng.uniform(0.1, 0.5, 2)), float(rng.uniform()))
        for _ in range(30)
    ]
    once = nms(boxes, 0.25)
    assert nms(once, 0.25) == once
    assert [b.score for b in once] == sorted((b.score for b in once), reverse=True)


def test_weighted_box_fusion_examples():
    fused = weighted_box_fusion([(0, ScoredBox(QUARTER, 0.6)), (1, ScoredBox(QUARTER, 0.4))], 0.1)
    assert len(fused) == 1
    assert fused[0].score == pytest.approx(0.5)
    assert fused[0].box.as_list() == pytest.approx(QUARTER.as_list())

    single = weighted_box_fusion([(0, ScoredBox(QUARTER, 0.7))], 0.1)
    assert single == [ScoredBox(QUARTER, 0.7)]

    apart = weighted_box_fusion([(0, ScoredBox(LEFT, 0.7)), (1, ScoredBox(RIGHT, 0.2))], 0.1)
    assert len(apart) == 2


def test_super_box_is_corner_hull_with_max_score():
    merged = super_box([
        ScoredBox(Box.from_corners(0.0, 0.0, 0.2, 0.2), 0.4),
        ScoredBox(Box.from_corners(0.3, 0.3, 0.5, 0.5), 0.9),
    ])
    assert merged.box.corners() == pytest.approx((0.0, 0.0, 0.5, 0.5))
    assert merged.score == pytest.approx(0.9)


def test_gaussian_weights():
    assert gaussian_weights(Box(0.3, 0.6, 0.2, 0.2), 1, 1) == pytest.approx(np.array([[1.0]]))

    w = gaussian_weights(Box(0.5, 0.5, 0.2, 0.4), 5, 5)
    assert w.sum() == pytest.approx(1.0, abs=1e-12)
    assert (w > 0).all()
    assert np.allclose(w, w[:, ::-1])
    assert np.allclose(w, w[::-1, :])

    w = gaussian_weights(Box(0.5, 0.5, 0.33, 0.33), 3, 3)
    centers = (np.arange(3) + 0.5) / 3
    pdf = np.exp(-0.5 * ((centers - 0.5) / 0.33) ** 2)
    expected = np.outer(pdf, pdf)
    assert w == pytest.approx(expected / expected.sum())
    assert w[1, 1] > w[0, 1] > w[0, 0]


def test_hungarian_examples():
    pairs, cost = hungarian(np.array([[1.0, 2.0], [3.0, 1.0]]))
    assert pairs == [(0, 0), (1, 1)]
    assert cost == pytest.approx(2.0)

    pairs, cost = hungarian(1.0 - np.eye(4))
    assert pairs == [(i, i) for i in range(4)]
    assert cost == 0.0

    assert hungarian(np.zeros((0, 0))) == ([], 0.0)
    with pytest.raises(MatchingError):
        hungarian(np.array([[np.inf, 1.0]]))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(11)
    for _ in range(1000):
        n = int(rng.integers(1, 7))
        cost = rng.uniform(0, 10, size=(n, n))
        best = min(sum(cost[i, p[i]] for i in range(n)) for p in itertools.permutations(range(n)))
        _, total = hungarian(cost)
        assert total == pytest.approx(best)


def test_match_iteratively_rounds():
    target = Box(0.5, 0.5, 0.2, 0.2)
    preds = [Box(0.5, 0.5, 0.2, 0.2), Box(0.4, 0.5, 0.2, 0.2), Box(0.6, 0.5, 0.2, 0.2)]
    l1 = lambda p, t: sum(abs(x - y) for x, y in zip(p.as_list(), t.as_list()))  # noqa: E731

    one = match_iteratively(preds, [target], l1)
    assert sorted(p for p, _, _ in one.pairs) == [0, 1, 2]
    assert {t for _, t, _ in one.pairs} == {0}
    assert sum(1 for _, _, r in one.pairs if r == 1) == 1

    three = match_iteratively(preds, preds, l1)
    assert all(r == 1 for _, _, r in three.pairs)
    assert sorted(t for _, t, _ in three.pairs) == [0, 1, 2]

    two = match_iteratively(preds, preds[:2], l1)
    rounds = [r for _, _, r in two.pairs]
    assert rounds.count(1) == 2 and rounds.count(2) == 1
    leftover = next((p, t) for p, t, r in two.pairs if r == 2)
    assert leftover[0] == 2
    assert leftover[1] == min(range(2), key=lambda t: l1(preds[2], preds[t]))

    with pytest.raises(MatchingError):
        match_iteratively(preds, [], l1)
    assert not math.isnan(two.total_cost)
