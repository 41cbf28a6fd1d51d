import math

import pytest
import torch

from promptscope.config.schema import LossConfig
from promptscope.core.boxops import Box
from promptscope.core.detector import Detections
from promptscope.core.encoders import PromptToken
from promptscope.core.losses import (
    STAGE_WEIGHTS,
    ClassPromptPair,
    DetectionTarget,
    StageWeights,
    anatomy_contrastive_loss,
    box_loss,
    class_alphas,
    detection_loss,
    embed_mse_loss,
    focal_loss,
    global_contrastive_loss,
    pathology_contrastive_loss,
    region_contrastive_loss,
    sentence_contrastive_loss,
    stage_loss,
)
from promptscope.core.nn import grad_check
from promptscope.errors import EmptyInputError, MissingLossTermError, ShapeMismatchError


def t(*rows):
    return torch.tensor(rows, dtype=torch.float64)


def test_box_loss_example():
    loss = box_loss(Box(0.5, 0.5, 1.0, 1.0), Box(0.25, 0.25, 0.5, 0.5))
    assert float(loss) == pytest.approx(9.0)


def test_box_loss_is_zero_on_identical_boxes_and_signed_without_complement():
    b = Box(0.4, 0.6, 0.2, 0.3)
    assert float(box_loss(b, b)) == pytest.approx(0.0)
    assert float(box_loss(b, b, LossConfig(giou_complement=False))) == pytest.approx(-2.0)
    with pytest.raises(ShapeMismatchError):
        box_loss(torch.zeros(3, dtype=torch.float64), torch.zeros(4, dtype=torch.float64))


def test_focal_loss_example():
    loss = focal_loss(t(0.5), t(1.0), torch.tensor([0]), alpha=0.5)
    assert float(loss) == pytest.approx(-0.5 * 0.25 * math.log(0.5), abs=1e-6)
    assert float(loss) == pytest.approx(0.0866, abs=1e-4)


def test_class_alphas_clamp():
    ids = torch.tensor([0, 0, 1, 1, 1, 1])
    targets = t(1.0, 1.0, 1.0, 0.0, 0.0, 0.0)
    alphas = class_alphas(targets, ids)
    assert alphas[0] == pytest.approx(0.05)
    assert alphas[1] == pytest.approx(0.75)
    assert class_alphas(t(0.0, 0.0), torch.tensor([2, 2])) == {2: pytest.approx(0.95)}


def test_focal_loss_empty_and_misaligned():
    assert float(focal_loss(t(), t(), torch.tensor([], dtype=torch.long))) == 0.0
    with pytest.raises(ShapeMismatchError):
        focal_loss(t(0.5, 0.5), t(1.0), torch.tensor([0, 0]))


def _detections(boxes, scores):
    boxes = torch.tensor(boxes, dtype=torch.float64).reshape(1, 1, -1, 4)
    m = boxes.shape[2]
    return Detections(
        boxes=boxes,
        scores=torch.tensor(scores, dtype=torch.float64).reshape(1, 1, m),
        box_features=torch.zeros(1, 1, m, 4, dtype=torch.float64),
        roi_tokens=torch.zeros(1, 1, 4, dtype=torch.float64),
    )


def test_pathology_detection_loss_with_perfect_boxes_is_pure_focal():
    coords = [[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]]
    det = _detections(coords, [0.8, 0.6])
    target = DetectionTarget(sample=0, prompt=0, class_id=0, boxes=torch.tensor(coords, dtype=torch.float64))
    loss = detection_loss(det, [target], "pathology")
    focal = focal_loss(t(0.8, 0.6), t(1.0, 1.0), torch.tensor([0, 0]))
    assert float(loss) == pytest.approx(3.0 * float(focal))


def test_pathology_detection_loss_without_positives_is_focal_over_negatives():
    det = _detections([[0.3, 0.3, 0.2, 0.2], [0.7, 0.7, 0.2, 0.2]], [0.8, 0.6])
    target = DetectionTarget(sample=0, prompt=0, class_id=1, boxes=torch.zeros(0, 4, dtype=torch.float64))
    loss = detection_loss(det, [target], "pathology")
    focal = focal_loss(t(0.8, 0.6), t(0.0, 0.0), torch.tensor([1, 1]))
    assert float(loss) == pytest.approx(3.0 * float(focal))
    assert float(loss) > 0


def test_anatomy_detection_loss_single_target_takes_all_boxes():
    region = [0.5, 0.5, 0.3, 0.3]
    det = _detections([region, region, region], [0.1, 0.2, 0.3])
    target = DetectionTarget(sample=0, prompt=0, class_id=0, boxes=torch.tensor([region], dtype=torch.float64))
    assert float(detection_loss(det, [target], "anatomy")) == pytest.approx(0.0)

    moved = _detections([region, region, [0.4, 0.5, 0.3, 0.3]], [0.1, 0.2, 0.3])
    expected = box_loss(Box(0.4, 0.5, 0.3, 0.3), Box(*region))
    assert float(detection_loss(moved, [target], "anatomy")) == pytest.approx(float(expected))
    with pytest.raises(ValueError):
        detection_loss(det, [target], "sentence")


def test_anatomy_detection_loss_sums_over_prompts():
    region = [0.5, 0.5, 0.3, 0.3]
    moved = [0.4, 0.5, 0.3, 0.3]
    boxes = torch.tensor([[region, region, moved], [moved, region, region]], dtype=torch.float64)
    det = Detections(
        boxes=boxes.reshape(1, 2, 3, 4),
        scores=torch.full((1, 2, 3), 0.5, dtype=torch.float64),
        box_features=torch.zeros(1, 2, 3, 4, dtype=torch.float64),
        roi_tokens=torch.zeros(1, 2, 4, dtype=torch.float64),
    )
    targets = [DetectionTarget(sample=0, prompt=q, class_id=q, boxes=torch.tensor([region], dtype=torch.float64))
               for q in range(2)]
    per_prompt = float(box_loss(Box(*moved), Box(*region)))
    assert per_prompt > 0
    assert float(detection_loss(det, targets, "anatomy")) == pytest.approx(2.0 * per_prompt)
    assert float(detection_loss(det, targets[:1], "anatomy")) == pytest.approx(per_prompt)
    # prompts without boxes add nothing
    empty = DetectionTarget(sample=0, prompt=1, class_id=1, boxes=torch.zeros(0, 4, dtype=torch.float64))
    assert float(detection_loss(det, [targets[0], empty], "anatomy")) == pytest.approx(per_prompt)


def test_pathology_contrastive_examples():
    roi = t([1.0, 0.0])
    tied = pathology_contrastive_loss(roi, torch.tensor([0]), torch.tensor([1]), t([0.0, 1.0]), t([0.0, -1.0]))
    assert float(tied) == pytest.approx(math.log(2.0))

    sharp = pathology_contrastive_loss(roi, torch.tensor([0]), torch.tensor([1]), t([1.0, 0.0]), t([-1.0, 0.0]), tau=0.2)
    assert float(sharp) == pytest.approx(math.log1p(math.exp(-10.0)), rel=1e-6)
    assert float(sharp) == pytest.approx(4.54e-5, rel=1e-2)

    with pytest.raises(EmptyInputError):
        pathology_contrastive_loss(torch.zeros(0, 2, dtype=torch.float64), torch.tensor([], dtype=torch.long),
                                   torch.tensor([], dtype=torch.long), t([1.0, 0.0]), t([-1.0, 0.0]))


def test_anatomy_contrastive_with_identical_prompts_is_ln2():
    prompt = t([0.3, 0.4])
    loss = anatomy_contrastive_loss(t([1.0, 2.0]), torch.tensor([[1]]), prompt, prompt.clone())
    assert float(loss) == pytest.approx(math.log(2.0))


def _pairs(pos, neg):
    return [ClassPromptPair(i, f"c{i}", PromptToken(p, f"c{i}"), PromptToken(n, f"no c{i}"))
            for i, (p, n) in enumerate(zip(pos, neg))]


def test_region_contrastive_dispatches_by_mode():
    gen = torch.Generator().manual_seed(1)
    roi = torch.randn(2, 4, dtype=torch.float64, generator=gen)
    pos = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    neg = torch.randn(3, 4, dtype=torch.float64, generator=gen)
    cfg = LossConfig()
    pairs = _pairs(pos, neg)

    labels = torch.tensor([1, 0])
    got = region_contrastive_loss(roi, pairs, labels, "pathology", class_index=torch.tensor([2, 0]), cfg=cfg)
    want = pathology_contrastive_loss(roi, torch.tensor([2, 0]), labels, pos, neg, cfg.tau_pathology)
    assert float(got) == pytest.approx(float(want))

    zones = torch.tensor([[1, 0, 1], [0, 0, 1]])
    got = region_contrastive_loss(roi, pairs, zones, "anatomy", cfg=cfg)
    want = anatomy_contrastive_loss(roi, zones, pos, neg, cfg.tau_anatomy, cfg.max_negative_classes)
    assert float(got) == pytest.approx(float(want))

    with pytest.raises(ValueError):
        region_contrastive_loss(roi, pairs, labels, "sentence")
    with pytest.raises(EmptyInputError):
        region_contrastive_loss(roi, [], labels, "pathology")


def test_anatomy_contrastive_caps_absent_classes():
    gen = torch.Generator().manual_seed(0)
    roi = torch.randn(3, 8, dtype=torch.float64, generator=gen)
    pos = torch.randn(20, 8, dtype=torch.float64, generator=gen)
    neg = torch.randn(20, 8, dtype=torch.float64, generator=gen)
    labels = torch.zeros(3, 20, dtype=torch.long)
    labels[0, 4] = 1
    capped = anatomy_contrastive_loss(roi, labels, pos, neg, max_negative_classes=0)
    only = anatomy_contrastive_loss(roi, labels[:, 4:5], pos[4:5], neg[4:5])
    assert float(capped) == pytest.approx(float(only))


def test_contrastive_losses_are_scale_invariant():
    gen = torch.Generator().manual_seed(1)
    roi = torch.randn(4, 6, dtype=torch.float64, generator=gen)
    prompts = torch.randn(4, 6, dtype=torch.float64, generator=gen)
    ids = torch.tensor([0, 0, 1, 1])
    base = sentence_contrastive_loss(roi, prompts, ids)
    assert float(sentence_contrastive_loss(3.0 * roi, 0.5 * prompts, ids)) == pytest.approx(float(base))
    base = global_contrastive_loss(roi, prompts)
    assert float(global_contrastive_loss(7.0 * roi, 2.0 * prompts)) == pytest.approx(float(base))


def test_sentence_contrastive_example():
    eye = t([1.0, 0.0], [0.0, 1.0])
    loss = sentence_contrastive_loss(eye, eye.clone(), torch.tensor([0, 1]), tau=0.25)
    assert float(loss) == pytest.approx(math.log1p(math.exp(-4.0)))
    assert float(loss) == pytest.approx(0.0181, abs=1e-4)
    with pytest.raises(ShapeMismatchError):
        sentence_contrastive_loss(eye, eye[:1], torch.tensor([0, 1]))
    with pytest.raises(EmptyInputError):
        sentence_contrastive_loss(eye[:0], eye[:0], torch.tensor([], dtype=torch.long))


def test_global_contrastive_example():
    eye = t([1.0, 0.0], [0.0, 1.0])
    loss = global_contrastive_loss(eye, eye.clone(), tau=0.2)
    assert float(loss) == pytest.approx(math.log1p(math.exp(-5.0)))
    assert float(loss) == pytest.approx(0.0067, abs=1e-4)


def test_embed_mse_loss():
    assert float(embed_mse_loss(t(1.0, 3.0), t(0.0, 0.0))) == pytest.approx(5.0)
    with pytest.raises(ShapeMismatchError):
        embed_mse_loss(t(1.0), t(1.0, 2.0))


def test_stage_loss_weights():
    ones = lambda stage: {k: torch.ones((), dtype=torch.float64) for k in STAGE_WEIGHTS[stage]}  # noqa: E731
    assert float(stage_loss(1, ones(1))) == pytest.approx(12.11)
    assert float(stage_loss(2, ones(2))) == pytest.approx(0.075)
    assert float(stage_loss(0, ones(0))) == pytest.approx(1.0)
    assert float(stage_loss(3, ones(3))) == pytest.approx(1.56)

    parts = ones(1)
    del parts["global_contr"]
    with pytest.raises(MissingLossTermError):
        stage_loss(1, parts)
    with pytest.raises(ValueError):
        StageWeights({"x": -1.0})
    with pytest.raises(ValueError):
        StageWeights.for_stage(7)


def test_losses_are_non_negative_on_random_inputs():
    gen = torch.Generator().manual_seed(2)
    roi = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    pos = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    neg = torch.randn(5, 8, dtype=torch.float64, generator=gen)
    labels = torch.tensor([1, 0, 1, 0, 1])
    assert float(pathology_contrastive_loss(roi, torch.arange(5), labels, pos, neg)) >= 0
    assert float(anatomy_contrastive_loss(roi, torch.eye(5, dtype=torch.long), pos, neg)) >= 0
    scores = torch.rand(10, dtype=torch.float64, generator=gen)
    targets = (torch.rand(10, generator=gen) > 0.5).to(torch.float64)
    assert float(focal_loss(scores, targets, torch.zeros(10, dtype=torch.long))) >= 0


def _leaf(gen, *shape):
    return torch.randn(*shape, dtype=torch.float64, generator=gen).requires_grad_()


def _fixed(gen, *shape):
    return torch.randn(*shape, dtype=torch.float64, generator=gen)


def _box_case(gen):
    pred = torch.tensor([[0.4, 0.45, 0.3, 0.2], [0.6, 0.55, 0.25, 0.35]], dtype=torch.float64, requires_grad=True)
    target = t([0.47, 0.52, 0.2, 0.3], [0.58, 0.6, 0.3, 0.3])
    return lambda: box_loss(pred, target).sum(), [pred]


def _focal_case(gen):
    scores = torch.tensor([0.3, 0.7, 0.45, 0.6], dtype=torch.float64, requires_grad=True)
    return lambda: focal_loss(scores, t(1.0, 0.0, 1.0, 0.0), torch.tensor([0, 0, 1, 1])), [scores]


def _pathology_case(gen):
    roi, pos, neg = _leaf(gen, 3, 6), _fixed(gen, 2, 6), _fixed(gen, 2, 6)
    return lambda: pathology_contrastive_loss(roi, torch.tensor([0, 1, 1]), torch.tensor([1, 0, 1]), pos, neg), [roi]


def _anatomy_case(gen):
    roi, pos, neg = _leaf(gen, 3, 6), _fixed(gen, 2, 6), _fixed(gen, 2, 6)
    labels = torch.tensor([[1, 0], [0, 0], [1, 1]])
    return lambda: anatomy_contrastive_loss(roi, labels, pos, neg), [roi]


def _sentence_case(gen):
    roi, prompts = _leaf(gen, 4, 6), _fixed(gen, 4, 6)
    return lambda: sentence_contrastive_loss(roi, prompts, torch.tensor([0, 0, 1, 1])), [roi]


def _global_case(gen):
    image, text = _leaf(gen, 3, 6), _fixed(gen, 3, 6)
    return lambda: global_contrastive_loss(image, text), [image]


def _stage_case(gen):
    roi, pos, neg, prompts = _leaf(gen, 4, 6), _fixed(gen, 2, 6), _fixed(gen, 2, 6), _fixed(gen, 4, 6)
    labels = torch.tensor([[1, 0], [0, 1], [0, 0], [1, 1]])

    def f():
        return stage_loss(2, {
            "anat_cls": anatomy_contrastive_loss(roi, labels, pos, neg),
            "anat_mse": embed_mse_loss(roi, prompts),
            "sent_contr": sentence_contrastive_loss(roi, prompts, torch.tensor([0, 0, 1, 1])),
            "sent_mse": embed_mse_loss(roi[:2], prompts[:2]),
        })

    return f, [roi]


@pytest.mark.parametrize("case", [_box_case, _focal_case, _pathology_case, _anatomy_case, _sentence_case,
                                  _global_case, _stage_case],
                         ids=["box", "focal", "pathology", "anatomy", "sentence", "global", "stage"])
def test_loss_gradients_match_finite_differences(case):
    f, params = case(torch.Generator().manual_seed(11))
    assert grad_check(f, params) < 1e-5
