import orjson
import pytest
import torch

import promptscope.services.inference as inference
from promptscope.core.boxops import Box, ScoredBox
from promptscope.data.synth import generate_split
from promptscope.errors import EmptyInputError, UnknownTokenError
from promptscope.services.evaluation import grounding_sentences, read_predictions
from promptscope.services.inference import (
    GroundedDescription,
    Pipeline,
    TaskQuery,
    dedup_descriptions,
    predict_sample,
    scale_boxes,
    tune_scales,
    write_predictions,
)


def test_dedup_keeps_highest_scoring_of_similar_pairs():
    emb = torch.tensor([[1.0, 0.0], [2.0, 0.0], [0.0, 1.0]], dtype=torch.float64)
    assert dedup_descriptions(emb, [0.5, 0.9, 0.1], 0.9) == [1, 2]
    # ties keep the lower index
    assert dedup_descriptions(emb[:2], [0.5, 0.5], 0.9) == [0]
    assert dedup_descriptions(emb[:0], [], 0.9) == []


def test_dedup_threshold_is_inclusive():
    emb = torch.tensor([[1.0, 0.0], [1.0, 1.0]], dtype=torch.float64)  # cosine ~0.7071
    assert dedup_descriptions(emb, [0.9, 0.8], 0.7) == [0]
    assert dedup_descriptions(emb, [0.9, 0.8], 0.75) == [0, 1]
    assert dedup_descriptions(emb[:1].repeat(2, 1), [0.9, 0.8], 1.0) == [0]
    with pytest.raises(ValueError):
        dedup_descriptions(emb, [0.9, 0.8], 0.0)


def test_scale_boxes_keeps_centre_and_score():
    boxes = [ScoredBox(Box(0.5, 0.5, 0.2, 0.4), 0.7, 1)]
    assert scale_boxes(boxes, 1.0) == boxes
    (scaled,) = scale_boxes(boxes, 1.5)
    assert scaled.box.w == pytest.approx(0.3) and scaled.box.h == pytest.approx(0.6)
    assert (scaled.box.cx, scaled.box.cy, scaled.score, scaled.class_id) == (0.5, 0.5, 0.7, 1)
    (clipped,) = scale_boxes(boxes, 4.0)
    assert clipped.box.h == pytest.approx(1.0)


def test_task_query_is_text_xor_box():
    TaskQuery(text="circle")
    TaskQuery(box=Box(0.5, 0.5, 0.1, 0.1))
    with pytest.raises(ValueError):
        TaskQuery()
    with pytest.raises(ValueError):
        TaskQuery(text="circle", box=Box(0.5, 0.5, 0.1, 0.1))


@pytest.fixture
def pipe(model, cfg):
    return Pipeline(model, cfg)


@pytest.fixture
def sample(cfg):
    return generate_split(cfg.scene, "test")[0]


def test_ground_sentences(pipe, sample):
    sentences = ["there is a circle", "square"]
    out = pipe.ground_sentences(sample.image, sentences)
    assert len(out) == 2
    for boxes in out:
        assert 1 <= len(boxes) <= pipe.cfg.model.num_box_tokens
        assert [b.score for b in boxes] == sorted((b.score for b in boxes), reverse=True)
    with pytest.raises(EmptyInputError):
        pipe.ground_sentences(sample.image, [])
    with pytest.raises(EmptyInputError):
        pipe.ground_sentences(sample.image, ["  "])


def test_detect_pathologies_merges(pipe, sample):
    nms_out = pipe.detect_pathologies(sample.image)
    assert list(nms_out) == pipe.classes
    assert all(b.class_id == pipe.classes.index(name) for name, boxes in nms_out.items() for b in boxes)
    merged = pipe.detect_pathologies(sample.image, merge="superbox")
    for name, boxes in merged.items():
        assert len(boxes) == 1
        x1, y1, x2, y2 = boxes[0].box.corners()
        for b in nms_out[name]:
            bx1, by1, bx2, by2 = b.box.corners()
            assert x1 <= bx1 + 1e-9 and y1 <= by1 + 1e-9 and x2 >= bx2 - 1e-9 and y2 >= by2 - 1e-9


def test_classify_regions(pipe, sample):
    boxes = [f.box for f in sample.findings] or [Box(0.5, 0.5, 0.3, 0.3)]
    multiclass = pipe.classify_regions(sample.image, boxes, "multiclass")
    assert multiclass.shape == (len(boxes), len(pipe.classes))
    assert torch.allclose(multiclass.sum(dim=-1), torch.ones(len(boxes), dtype=torch.float64))
    multilabel = pipe.classify_regions(sample.image, boxes, "multilabel")
    assert ((multilabel > 0) & (multilabel < 1)).all()
    with pytest.raises(ValueError):
        pipe.classify_regions(sample.image, boxes, "ranking")
    with pytest.raises(EmptyInputError):
        pipe.classify_regions(sample.image, [])


def test_explain_regions_follows_query_order(pipe, sample):
    box = Box(0.3, 0.3, 0.2, 0.2)
    queries = [TaskQuery(text="circle"), TaskQuery(box=box), TaskQuery(text="square")]
    out = pipe.explain_regions(sample.image, queries)
    assert [d.prompt_source for d in out] == ["circle", "box", "square"]
    # box queries echo the query box
    assert out[1].boxes[0].box.as_list() == pytest.approx(box.as_list())
    assert all(len(d.class_probs) == len(pipe.classes) for d in out)
    with pytest.raises(EmptyInputError):
        pipe.explain_regions(sample.image, [])


def test_generate_report_orders_pathology_first(pipe, sample, cfg):
    items = pipe.generate_report(sample.image)
    sources = [d.prompt_source for d in items]
    patho = [s for s in sources if s in pipe.classes]
    assert sources[: len(patho)] == patho
    assert all(d.text for d in items)

    no_anatomy = cfg.task.model_copy(update={"anatomy_filter": "none"})
    only_patho = Pipeline(pipe.model, cfg.model_copy(update={"task": no_anatomy}))
    assert all(d.prompt_source in pipe.classes for d in only_patho.generate_report(sample.image))
    with pytest.raises(EmptyInputError):
        only_patho.generate_report(sample.image, pathology_prompts=[])


@pytest.mark.parametrize("task", ["sg", "od", "rc", "re", "rg"])
def test_prediction_files_validate(pipe, cfg, task, tmp_path):
    samples = generate_split(cfg.scene, "test")[:2]
    path = write_predictions(pipe, samples, task, tmp_path / f"{task}.jsonl")
    records = read_predictions(path)
    assert [r.sample_id for r in records] == [f"test-{s.index:06d}" for s in samples]
    assert all(r.task == task for r in records)
    first = orjson.loads(path.read_bytes().splitlines()[0])
    assert set(first) == {"sample_id", "task", "items"}
    if task == "sg":
        assert len(records[0].items) == len(grounding_sentences(samples[0]))
    if task == "re":
        assert len(records[0].items) == len(samples[0].findings)


def test_predict_sample_rejects_unknown_task(pipe, sample):
    with pytest.raises(UnknownTokenError):
        predict_sample(pipe, sample, "xx")


def test_tune_scales(pipe, cfg):
    samples = generate_split(cfg.scene, "val")
    tuned = tune_scales(pipe, samples, grid=[0.9, 1.1])
    assert tuned["sg_scale"] in (0.9, 1.1, 1.0)
    assert set(tuned["od_class_scales"]) <= set(pipe.classes)
    assert all(v in (0.9, 1.1) for v in tuned["od_class_scales"].values())
    with pytest.raises(EmptyInputError):
        tune_scales(pipe, [], grid=[1.0])


def test_report_text_joins_non_empty_descriptions():
    items = [GroundedDescription("there is a circle", [], "circle", True, 0.9),
             GroundedDescription("", [], "square", False, 0.1),
             GroundedDescription("no cross", [], "cross", False, 0.2)]
    assert Pipeline.report_text(items) == "there is a circle. no cross"


def test_merge_class_boxes_scales_before_suppression(pipe):
    # centres 0.14 apart, width 0.2: IoU 0.176 unscaled, 0.364 at factor 1.5
    pair = [ScoredBox(Box(0.43, 0.5, 0.2, 0.2), 0.9, 0), ScoredBox(Box(0.57, 0.5, 0.2, 0.2), 0.8, 0)]
    assert pipe.task.nms_iou == pytest.approx(0.25)
    assert len(pipe.merge_class_boxes(pair, 1.0, "nms")) == 2
    (kept,) = pipe.merge_class_boxes(pair, 1.5, "nms")
    assert kept.score == 0.9 and kept.box.w == pytest.approx(0.3)
    (merged,) = pipe.merge_class_boxes(pair, 1.0, "superbox")
    assert merged.box.corners() == pytest.approx((0.33, 0.4, 0.67, 0.6))


def test_tune_scales_scores_the_boxes_detection_would_emit(pipe, cfg, monkeypatch):
    samples = [s for s in generate_split(cfg.scene, "train") if s.findings][:3]
    assert samples
    seen = []

    def recording_ap(preds, targets, thresholds):
        seen.append(preds)
        return 0.0

    monkeypatch.setattr(inference, "class_average_precision", recording_ap)
    grid = [1.0, 1.6]
    tuned = tune_scales(pipe, samples, grid=grid)
    names = list(tuned["od_class_scales"])
    assert names and len(seen) == len(names) * len(grid)
    for i, (name, factor) in enumerate((n, f) for n in names for f in grid):
        expected = [pipe.detect_pathologies(s.image, scales={name: factor})[name] for s in samples]
        assert seen[i] == expected
