import os

import pytest

from promptscope.api.models import PredictionItem, PredictionRecord
from promptscope.config.schema import ModelConfig, RunConfig, SceneSpec, StageConfig
from promptscope.data.synth import positive_sentence
from promptscope.infra.wiring import build_model
from promptscope.services.evaluation import grounding_sentences, sentence_target
from promptscope.store.dataset import sample_id


def pytest_collection_modifyitems(config, items):
    if os.getenv("PROMPTSCOPE_SLOW") == "1":
        return
    skip = pytest.mark.skip(reason="set PROMPTSCOPE_SLOW=1 to run training calibrations")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip)


def tiny_stages(steps: int = 2):
    return [
        StageConfig(stage=0, steps=steps, batch_size=2, lr=1e-3, warmup_steps=1, trained=["prefix", "lm"]),
        StageConfig(stage=1, steps=steps, batch_size=2, lr=1e-3, warmup_steps=1, trained=["image_encoder", "detector"]),
        StageConfig(stage=2, steps=steps, batch_size=2, lr=1e-3, warmup_steps=1, trained=["post_decoder"],
                    box_query_prob=0.25, use_pathology_tokens=False, train_boxes=False),
        StageConfig(stage=3, steps=steps, batch_size=2, lr=1e-3, warmup_steps=1,
                    trained=["post_decoder", "prefix", "lm"], box_query_prob=0.25,
                    use_pathology_tokens=False, train_boxes=False, train_classes=False),
    ]


def tiny_config(**updates) -> RunConfig:
    cfg = RunConfig(
        name="tiny",
        seed=7,
        scene=SceneSpec(image_size=24, shape_classes=["circle", "square", "cross"], n_train=12, n_val=4, n_test=6,
                        max_raters=2),
        model=ModelConfig(dim=16, heads=2, ff_mult=2, patch_size=8, encoder_layers=2, detector_layers=1,
                          post_layers=1, lm_layers=1, lm_dim=16, lm_heads=2, max_gen_len=12, max_text_len=16),
        stages=tiny_stages(),
    )
    return cfg.model_copy(update=updates) if updates else cfg


@pytest.fixture
def cfg():
    return tiny_config()


@pytest.fixture
def model(cfg):
    m, _ = build_model(cfg)
    m.eval()
    return m


def perfect_record(sample, task: str, classes, split: str = "test"):
    """Prediction record that reproduces the ground truth of one sample."""
    items = []
    if task == "sg":
        for text in grounding_sentences(sample):
            items.append(PredictionItem(text=text, boxes=[sentence_target(sample, text).as_list() + [1.0]]))
    elif task == "od":
        for name in classes:
            items.append(PredictionItem(class_name=name, boxes=[b.as_list() + [1.0] for b in sample.boxes_of(name)]))
    elif task == "rc":
        for f in sample.findings:
            probs = [float(c == f.class_name) for c in classes]
            items.append(PredictionItem(prompt="finding", boxes=[f.box.as_list() + [1.0]], class_name=f.class_name,
                                        prob=1.0, probs=probs))
        for region in sample.zone_regions:
            items.append(PredictionItem(prompt=region.name, boxes=[region.boxes[0].as_list() + [1.0]],
                                        probs=[float(c in region.labels) for c in classes]))
    elif task == "re":
        for f in sample.findings:
            items.append(PredictionItem(text=positive_sentence(f.class_name, f.zone), prompt="box",
                                        boxes=[f.box.as_list() + [1.0]], positive=True))
    elif task == "rg":
        for f in sample.findings:
            items.append(PredictionItem(text=positive_sentence(f.class_name, f.zone), prompt=f.class_name, positive=True))
    return PredictionRecord(sample_id=sample_id(split, sample.index), task=task, items=items)
