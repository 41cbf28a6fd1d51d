"""
Metrics over prediction files: detection mAP (101-point interpolation), merged
mask mIoU for grounding, AUROC and class-weighted AUROC, bootstrap confidence,
and label F1 of generated text parsed by the scene-sentence grammar.
"""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Set, Tuple, TypeVar

import numpy as np
import orjson
from pydantic import ValidationError
from sklearn.metrics import f1_score, roc_auc_score
from sklearn.preprocessing import MultiLabelBinarizer

from promptscope.api.models import MetricReport, PredictionItem, PredictionRecord
from promptscope.config.schema import RunConfig, SceneSpec
from promptscope.core.boxops import Box, ScoredBox, iou
from promptscope.data.synth import SceneSample, positive_sentence, text_to_labels
from promptscope.errors import (
    DegenerateMetricError,
    EmptyInputError,
    SchemaViolationError,
    ShapeMismatchError,
    UnknownTokenError,
)
from promptscope.infra.logging import get_logger
from promptscope.store.dataset import sample_id

logger = get_logger("services.evaluation")

T = TypeVar("T")
Averaging = Literal["micro", "macro", "example"]
Granularity = Literal["class", "finding"]

RECALL_POINTS = np.linspace(0.0, 1.0, 101)
_SKLEARN_AVERAGE = {"micro": "micro", "macro": "macro", "example": "samples"}


# ---------- detection ----------

def interpolated_ap(ranked_hits: Sequence[bool], n_targets: int) -> float:
    """101-point interpolated AP of a ranked list of true/false positives."""
    if n_targets <= 0:
        raise DegenerateMetricError("average precision needs at least one target")
    if not ranked_hits:
        return 0.0
    tp = np.cumsum(np.asarray(ranked_hits, dtype=np.float64))
    fp = np.cumsum(1.0 - np.asarray(ranked_hits, dtype=np.float64))
    recall = tp / n_targets
    precision = tp / (tp + fp)
    # precision envelope: best precision at any recall to the right
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    sampled = np.where(idx < len(envelope), envelope[np.minimum(idx, len(envelope) - 1)], 0.0)
    return float(sampled.mean())


def rank_and_match(preds: Sequence[Sequence[ScoredBox]], targets: Sequence[Sequence[Box]],
                   iou_threshold: float) -> List[bool]:
    """
    Rank all predictions of one class by score (ties keep sample order) and
    greedily match each to the best still-unmatched target of its sample.

    Returns:
        Hit flags in rank order
    """
    if len(preds) != len(targets):
        raise ShapeMismatchError(f"{len(preds)} prediction lists vs {len(targets)} target lists")
    ranked = sorted(
        ((sb.score, s, sb.box) for s, boxes in enumerate(preds) for sb in boxes),
        key=lambda t: -t[0],
    )
    used = [[False] * len(t) for t in targets]
    hits: List[bool] = []
    for _, s, box in ranked:
        best, best_iou = -1, -1.0
        for j, target in enumerate(targets[s]):
            if used[s][j]:
                continue
            overlap = iou(box, target)
            if overlap >= iou_threshold and overlap > best_iou:
                best, best_iou = j, overlap
        if best >= 0:
            used[s][best] = True
        hits.append(best >= 0)
    return hits


def class_average_precision(preds: Sequence[Sequence[ScoredBox]], targets: Sequence[Sequence[Box]],
                            iou_thresholds: Sequence[float]) -> float:
    """AP of one class averaged over IoU thresholds; inputs are per sample."""
    n_targets = sum(len(t) for t in targets)
    values = [interpolated_ap(rank_and_match(preds, targets, t), n_targets) for t in iou_thresholds]
    return float(np.mean(values))


def mean_average_precision(preds: Mapping[str, Sequence[Sequence[ScoredBox]]],
                           targets: Mapping[str, Sequence[Sequence[Box]]],
                           iou_thresholds: Sequence[float]) -> Tuple[float, List[str]]:
    """
    Mean over classes of the threshold-averaged AP.

    Returns:
        (mAP, classes excluded for having no targets)
    """
    if list(iou_thresholds) != sorted(iou_thresholds):
        raise ShapeMismatchError("IoU thresholds must be sorted")
    values: List[float] = []
    excluded: List[str] = []
    for name in sorted(targets):
        if not any(targets[name]):
            excluded.append(name)
            continue
        class_preds = preds.get(name) or [[] for _ in targets[name]]
        values.append(class_average_precision(class_preds, targets[name], iou_thresholds))
    if not values:
        raise DegenerateMetricError("no class has targets")
    return float(np.mean(values)), excluded


# ---------- grounding ----------

def rasterize(boxes: Iterable[Box], size: int) -> np.ndarray:
    """Union mask of boxes on a size x size grid of pixel centres."""
    centers = (np.arange(size) + 0.5) / size
    mask = np.zeros((size, size), dtype=bool)
    for box in boxes:
        x1, y1, x2, y2 = box.corners()
        rows = (centers >= y1) & (centers < y2)
        cols = (centers >= x1) & (centers < x2)
        mask |= np.outer(rows, cols)
    return mask


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    union = int(np.count_nonzero(a | b))
    return float(np.count_nonzero(a & b)) / union if union else 0.0


def grounding_miou(preds: Sequence[Sequence[ScoredBox]], targets: Sequence[Sequence[Box]],
                   score_thresholds: Sequence[float], raster_size: int = 224) -> float:
    """
    Merged-mask IoU per sentence: boxes scoring at least the threshold are
    rasterized into one mask and compared with the union of the target boxes.
    Averaged over sentences, then over thresholds.
    """
    if len(preds) != len(targets):
        raise ShapeMismatchError(f"{len(preds)} prediction lists vs {len(targets)} target lists")
    if not preds:
        return 0.0
    target_masks = [rasterize(t, raster_size) for t in targets]
    per_threshold = []
    for thr in score_thresholds:
        ious = [mask_iou(rasterize((sb.box for sb in p if sb.score >= thr), raster_size), m)
                for p, m in zip(preds, target_masks)]
        per_threshold.append(np.mean(ious))
    return float(np.mean(per_threshold))


def grounding_sentences(sample: SceneSample) -> List[str]:
    """Positive report sentences; each has exactly one target box."""
    truth = {positive_sentence(f.class_name, f.zone) for f in sample.findings}
    return [s for s in sample.sentences if s in truth]


def sentence_target(sample: SceneSample, sentence: str) -> Box:
    for f in sample.findings:
        if sentence == positive_sentence(f.class_name, f.zone):
            return f.box
    raise UnknownTokenError(f"no finding for sentence {sentence!r}")


# ---------- classification ----------

def weighted_auroc(scores: np.ndarray, labels: np.ndarray, mode: Literal["macro", "weighted"] = "macro",
                   class_names: Optional[Sequence[str]] = None) -> Tuple[float, List[str]]:
    """
    Per-class AUROC over columns of (N, C) scores and binary labels. Ties count
    one half. Classes lacking a positive or a negative are left out.

    Returns:
        (mean AUROC, excluded class names); weighted mode weights by positive count
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ShapeMismatchError(f"scores {scores.shape} vs labels {labels.shape}")
    names = list(class_names) if class_names is not None else [str(c) for c in range(scores.shape[1])]
    values, weights, excluded = [], [], []
    for c, name in enumerate(names):
        positives = int(labels[:, c].sum())
        if positives == 0 or positives == len(labels):
            excluded.append(name)
            continue
        values.append(roc_auc_score(labels[:, c], scores[:, c]))
        weights.append(1.0 if mode == "macro" else float(positives))
    if not values:
        raise DegenerateMetricError("every class is degenerate")
    return float(np.average(values, weights=weights)), excluded


def accuracy(predicted: Sequence[str], truth: Sequence[str]) -> float:
    if len(predicted) != len(truth):
        raise ShapeMismatchError(f"{len(predicted)} predictions vs {len(truth)} labels")
    if not truth:
        raise DegenerateMetricError("accuracy of nothing")
    return sum(p == t for p, t in zip(predicted, truth)) / len(truth)


# ---------- generated text ----------

def sentence_labels(sentences: Iterable[str], spec: SceneSpec, granularity: Granularity = "class") -> Set[str]:
    """Positive labels asserted by a set of sentences; unparseable text asserts nothing."""
    out: Set[str] = set()
    for sentence in sentences:
        for parsed in text_to_labels(sentence, spec):
            if not parsed.positive:
                continue
            if granularity == "finding" and parsed.zone:
                out.add(f"{parsed.class_name}@{parsed.zone}")
            else:
                out.add(parsed.class_name)
    return out


def sample_labels(sample: SceneSample, granularity: Granularity = "class") -> Set[str]:
    if granularity == "finding":
        return {f"{f.class_name}@{f.zone}" for f in sample.findings}
    return {f.class_name for f in sample.findings}


def label_f1(pred_sentences: Sequence[Sequence[str]], target_labels: Sequence[Iterable[str]],
             averaging: Averaging, spec: SceneSpec, granularity: Granularity = "class") -> float:
    """
    F1 between labels parsed from generated sentences and reference labels.
    micro pools all decisions, macro averages labels seen in either side,
    example averages per sample; empty-vs-empty samples score 1.
    """
    if len(pred_sentences) != len(target_labels):
        raise ShapeMismatchError(f"{len(pred_sentences)} predictions vs {len(target_labels)} targets")
    predicted = [sentence_labels(s, spec, granularity) for s in pred_sentences]
    truth = [set(t) for t in target_labels]
    universe = sorted(set().union(*predicted, *truth))
    if not universe:
        return 1.0
    binarizer = MultiLabelBinarizer(classes=universe)
    y_true = binarizer.fit_transform(truth)
    y_pred = binarizer.transform(predicted)
    return float(f1_score(y_true, y_pred, average=_SKLEARN_AVERAGE[averaging], zero_division=1))


# ---------- bootstrap ----------

def bootstrap(metric_fn: Callable[[List[T]], float], samples: Sequence[T], n: int, seed: int,
              name: str = "metric", excluded: Sequence[str] = ()) -> MetricReport:
    """
    Resample with replacement n times and report the mean and standard
    deviation of the metric. Resamples on which the metric is degenerate are
    skipped and not counted.
    """
    if not samples:
        raise EmptyInputError(f"bootstrap of {name} over no samples")
    if n < 2:
        raise DegenerateMetricError(f"bootstrap needs n >= 2, got {n}")
    rng = np.random.default_rng(seed)
    values: List[float] = []
    for _ in range(n):
        idx = rng.integers(0, len(samples), size=len(samples))
        try:
            values.append(float(metric_fn([samples[i] for i in idx])))
        except DegenerateMetricError:
            continue
    if not values:
        raise DegenerateMetricError(f"{name} is degenerate on every resample")
    arr = np.asarray(values)
    report = MetricReport(name=name, value=float(arr.mean()), std=float(arr.std()), n_resamples=len(values),
                          seed=seed, excluded=list(excluded))
    logger.debug("bootstrap name=%s value=%.4f std=%.4f n=%d", name, report.value, report.std, report.n_resamples)
    return report


# ---------- prediction files ----------

Unit = Tuple[PredictionRecord, SceneSample]


def read_predictions(path: str | Path) -> List[PredictionRecord]:
    path = Path(path)
    if not path.exists():
        raise SchemaViolationError(f"missing prediction file {path}")
    records: List[PredictionRecord] = []
    with open(path, "rb") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(PredictionRecord.model_validate(orjson.loads(line)))
            except (orjson.JSONDecodeError, ValidationError) as e:
                raise SchemaViolationError(f"{path}:{lineno}: {e}") from e
    return records


def align(records: Sequence[PredictionRecord], samples: Sequence[SceneSample], task: str, split: str) -> List[Unit]:
    """Pair every sample with its prediction record; a sample without one is a schema violation."""
    by_id: Dict[str, PredictionRecord] = {}
    for r in records:
        if r.task != task:
            raise SchemaViolationError(f"record {r.sample_id} is for task {r.task}, expected {task}")
        by_id[r.sample_id] = r
    units: List[Unit] = []
    for s in samples:
        sid = sample_id(split, s.index)
        if sid not in by_id:
            raise SchemaViolationError(f"no prediction for sample {sid}")
        units.append((by_id.pop(sid), s))
    if by_id:
        raise SchemaViolationError(f"predictions for unknown samples: {sorted(by_id)[:5]}")
    return units


def _scored(item: PredictionItem) -> List[ScoredBox]:
    return [ScoredBox(Box(*b[:4]), b[4]) for b in item.boxes]


def _grounding_pairs(units: Sequence[Unit]) -> Tuple[List[List[ScoredBox]], List[List[Box]]]:
    preds, targets = [], []
    for record, sample in units:
        for item in record.items:
            preds.append(_scored(item))
            targets.append([sentence_target(sample, item.text or "")])
    return preds, targets


def _detection_inputs(units: Sequence[Unit], classes: Sequence[str]):
    preds: Dict[str, List[List[ScoredBox]]] = {c: [] for c in classes}
    targets: Dict[str, List[List[Box]]] = {c: [] for c in classes}
    for record, sample in units:
        found = {item.class_name: _scored(item) for item in record.items}
        for c in classes:
            preds[c].append(found.get(c, []))
            targets[c].append(sample.boxes_of(c))
    return preds, targets


def _finding_items(units: Sequence[Unit]) -> List[Tuple[PredictionItem, str]]:
    """(prediction, true class) for every finding-level item, in finding order."""
    out = []
    for record, sample in units:
        items = [i for i in record.items if i.prompt == "finding"]
        if len(items) != len(sample.findings):
            raise SchemaViolationError(f"{record.sample_id}: {len(items)} finding items for {len(sample.findings)} findings")
        out += list(zip(items, [f.class_name for f in sample.findings]))
    return out


def _zone_items(units: Sequence[Unit], classes: Sequence[str]) -> Tuple[np.ndarray, np.ndarray]:
    scores, labels = [], []
    for record, sample in units:
        for item in record.items:
            if item.prompt in (None, "finding"):
                continue
            region = sample.region(item.prompt)
            scores.append(item.probs or [0.0] * len(classes))
            labels.append([int(c in region.labels) for c in classes])
    return np.asarray(scores, dtype=np.float64).reshape(-1, len(classes)), np.asarray(labels).reshape(-1, len(classes))


def _explained(units: Sequence[Unit], spec: SceneSpec) -> List[Tuple[str, str]]:
    """(generated text, 'class@zone' truth) per box query."""
    out = []
    for record, sample in units:
        for item in record.items:
            box = Box(*item.boxes[0][:4])
            finding = max(sample.findings, key=lambda f: iou(f.box, box))
            out.append((item.text or "", f"{finding.class_name}@{finding.zone}"))
    return out


def evaluate_task(task: str, records: Sequence[PredictionRecord], samples: Sequence[SceneSample], cfg: RunConfig,
                  split: str = "test") -> List[MetricReport]:
    """Bootstrapped metric reports for one task's predictions."""
    units = align(records, samples, task, split)
    tc, spec, classes = cfg.task, cfg.scene, list(cfg.scene.shape_classes)
    seed = tc.bootstrap_seed

    def boot(name: str, fn: Callable[[List[Unit]], float], n: int = tc.bootstrap_n, excluded: Sequence[str] = ()):
        return bootstrap(fn, units, n, seed, name=f"{task}_{name}", excluded=excluded)

    reports: List[MetricReport] = []
    if task == "sg":
        def miou(us: List[Unit]) -> float:
            p, t = _grounding_pairs(us)
            if not p:
                raise DegenerateMetricError("no grounding sentences")
            return grounding_miou(p, t, tc.miou_score_thresholds, tc.raster_size)

        def sentence_map(us: List[Unit]) -> float:
            p, t = _grounding_pairs(us)
            if not p:
                raise DegenerateMetricError("no grounding sentences")
            return float(np.mean([class_average_precision([pi], [ti], tc.map_iou_thresholds) for pi, ti in zip(p, t)]))

        reports += [boot("miou", miou), boot("map", sentence_map)]
    elif task == "od":
        _, excluded = mean_average_precision(*_detection_inputs(units, classes), tc.map_iou_thresholds)
        reports.append(boot("map", lambda us: mean_average_precision(*_detection_inputs(us, classes),
                                                                     tc.map_iou_thresholds)[0], excluded=excluded))
    elif task == "rc":
        def rc_accuracy(us: List[Unit]) -> float:
            pairs = _finding_items(us)
            return accuracy([i.class_name or "" for i, _ in pairs], [c for _, c in pairs])

        def rc_auroc(us: List[Unit]) -> float:
            pairs = _finding_items(us)
            if not pairs:
                raise DegenerateMetricError("no findings")
            scores = np.asarray([i.probs for i, _ in pairs], dtype=np.float64)
            onehot = np.asarray([[int(c == truth) for c in classes] for _, truth in pairs])
            return weighted_auroc(scores, onehot, "macro", classes)[0]

        def zone_auroc(us: List[Unit]) -> float:
            scores, labels = _zone_items(us, classes)
            return weighted_auroc(scores, labels, "weighted", classes)[0]

        zone_scores, zone_labels = _zone_items(units, classes)
        _, zone_excluded = weighted_auroc(zone_scores, zone_labels, "weighted", classes)
        reports += [boot("accuracy", rc_accuracy), boot("macro_auroc", rc_auroc),
                    boot("weighted_auroc", zone_auroc, excluded=zone_excluded)]
    elif task == "re":
        n = tc.bootstrap_n_generation

        def re_accuracy(us: List[Unit]) -> float:
            pairs = _explained(us, spec)
            if not pairs:
                raise DegenerateMetricError("no box queries")
            return float(np.mean([truth in sentence_labels([text], spec, "finding") for text, truth in pairs]))

        def re_f1(us: List[Unit]) -> float:
            pairs = _explained(us, spec)
            return label_f1([[text] for text, _ in pairs], [{truth} for _, truth in pairs], "micro", spec, "finding")

        reports += [boot("accuracy", re_accuracy, n), boot("f1_micro", re_f1, n)]
    elif task == "rg":
        n = tc.bootstrap_n_generation

        def rg_f1(averaging: Averaging, granularity: Granularity) -> Callable[[List[Unit]], float]:
            def fn(us: List[Unit]) -> float:
                texts = [[i.text or "" for i in r.items] for r, _ in us]
                return label_f1(texts, [sample_labels(s, granularity) for _, s in us], averaging, spec, granularity)
            return fn

        for averaging in ("micro", "macro", "example"):
            reports.append(boot(f"f1_{averaging}", rg_f1(averaging, "class"), n))
        reports.append(boot("f1_finding_micro", rg_f1("micro", "finding"), n))
    else:
        raise UnknownTokenError(f"unknown task {task!r}")
    for r in reports:
        logger.info("metric name=%s value=%.4f std=%.4f n=%d", r.name, r.value, r.std, r.n_resamples)
    return reports


def write_reports(reports: Sequence[MetricReport], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = [r.model_dump(mode="json") for r in reports]
    path.write_bytes(orjson.dumps(payload, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n")
    return path


def evaluate_file(task: str, predictions: str | Path, samples: Sequence[SceneSample], cfg: RunConfig,
                  out_path: str | Path, split: str = "test") -> List[MetricReport]:
    reports = evaluate_task(task, read_predictions(predictions), samples, cfg, split)
    write_reports(reports, out_path)
    return reports
