"""
Procedural scene corpus.

Grayscale images show shapes ("findings") placed in a grid of named, slightly
overlapping zones ("anatomical regions"). Every sample carries zone and row
regions with label sets and templated sentences, image-level labels and a
report. Sentences parse back to labels exactly through `sentence_to_labels`.

A share of samples form the pathology-only sub-corpus: they carry several
raters' jittered boxes that are fused before training and no region sentences.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field, replace
from typing import Callable, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np

from promptscope.config.schema import SceneSpec
from promptscope.core.boxops import Box, ScoredBox, iou, weighted_box_fusion
from promptscope.errors import UnknownTokenError
from promptscope.utils.text import Vocabulary

Source = Literal["region", "pathology"]
Split = Literal["train", "val", "test"]
Hint = Literal["none", "coarse", "fine"]

_POSITIVE = re.compile(r"^there is a ([a-z]+)(?: in the ([a-z]+ [a-z]+ zone))?$")
_NEGATIVE = re.compile(r"^no ([a-z]+)(?: in the ([a-z]+ [a-z]+ zone))?$")
_MIRROR = {"left": "right", "right": "left"}


@dataclass(frozen=True)
class Finding:
    class_name: str
    box: Box
    zone: str


@dataclass
class Region:
    """A zone (one box) or a row of zones (one box per member zone)."""

    name: str
    boxes: List[Box]
    labels: List[str]
    sentences: List[str]


@dataclass
class SceneSample:
    index: int
    image: np.ndarray
    regions: List[Region]
    findings: List[Finding]
    labels: List[int]
    sentences: List[str]
    source: Source = "region"
    raters: List[List[Finding]] = field(default_factory=list)

    @property
    def zone_regions(self) -> List[Region]:
        return [r for r in self.regions if len(r.boxes) == 1]

    def region(self, name: str) -> Region:
        for r in self.regions:
            if r.name == name:
                return r
        raise UnknownTokenError(f"no region named {name!r}")

    def boxes_of(self, class_name: str) -> List[Box]:
        return [f.box for f in self.findings if f.class_name == class_name]

    def training_findings(self, wbf_iou: float = 0.1) -> List[Finding]:
        """Ground-truth findings, or the rater consensus for pathology-only samples."""
        if not self.raters:
            return list(self.findings)
        fused: List[Finding] = []
        classes = sorted({f.class_name for rater in self.raters for f in rater})
        for name in classes:
            annotations = [
                (rid, ScoredBox(f.box, 1.0)) for rid, rater in enumerate(self.raters) for f in rater if f.class_name == name
            ]
            truth = [f for f in self.findings if f.class_name == name]
            for sb in weighted_box_fusion(annotations, wbf_iou):
                zone = max(truth, key=lambda f: iou(sb.box, f.box)).zone if truth else ""
                fused.append(Finding(name, sb.box, zone))
        return fused


@dataclass(frozen=True)
class ParsedSentence:
    class_name: str
    positive: bool
    zone: Optional[str]


# ---------- zones ----------

def zone_boxes(spec: SceneSpec) -> Dict[str, Box]:
    """Grid cells grown by `zone_overlap` of a cell on every side, clipped to the image."""
    out: Dict[str, Box] = {}
    ch, cw = 1.0 / spec.zone_rows, 1.0 / spec.zone_cols
    names = iter(spec.zone_names)
    for r in range(spec.zone_rows):
        for c in range(spec.zone_cols):
            mx, my = spec.zone_overlap * cw, spec.zone_overlap * ch
            out[next(names)] = Box.from_corners(c * cw - mx, r * ch - my, (c + 1) * cw + mx, (r + 1) * ch + my)
    return out


def zone_cores(spec: SceneSpec) -> Dict[str, Tuple[float, float, float, float]]:
    """Grid cells shrunk by the overlap margin: the part no other zone reaches."""
    out = {}
    ch, cw = 1.0 / spec.zone_rows, 1.0 / spec.zone_cols
    names = iter(spec.zone_names)
    for r in range(spec.zone_rows):
        for c in range(spec.zone_cols):
            mx, my = spec.zone_overlap * cw, spec.zone_overlap * ch
            out[next(names)] = (c * cw + mx, r * ch + my, (c + 1) * cw - mx, (r + 1) * ch - my)
    return out


def row_of(zone: str) -> str:
    return zone.split()[0]


def max_iou_zone(box: Box, spec: SceneSpec) -> str:
    zones = zone_boxes(spec)
    return max(spec.zone_names, key=lambda name: iou(box, zones[name]))


# ---------- rendering ----------

def _mask(kind: str, u: np.ndarray, v: np.ndarray, class_index: int) -> np.ndarray:
    inside = (np.abs(u) <= 1) & (np.abs(v) <= 1)
    r2 = u ** 2 + v ** 2
    masks: Dict[str, Callable[[], np.ndarray]] = {
        "circle": lambda: r2 <= 1,
        "ring": lambda: (r2 <= 1) & (r2 >= 0.3),
        "square": lambda: inside,
        "bar": lambda: inside,
        "stripe": lambda: inside,
        "cross": lambda: inside & ((np.abs(u) <= 0.3) | (np.abs(v) <= 0.3)),
        "triangle": lambda: inside & (np.abs(u) <= (v + 1) / 2),
        "diamond": lambda: np.abs(u) + np.abs(v) <= 1,
    }
    if kind in masks:
        return masks[kind]()
    period = 2 + class_index % 3
    checker = ((np.floor((u + 1) * period) + np.floor((v + 1) * period)) % 2) == 0
    return inside & checker


def _aspect(kind: str) -> Tuple[float, float]:
    return {"bar": (1.0, 1 / 3), "stripe": (1 / 3, 1.0)}.get(kind, (1.0, 1.0))


def render(size: int, findings: Sequence[Finding], classes: Sequence[str], noise: float,
           rng: np.random.Generator) -> np.ndarray:
    """8-bit-quantized float image in [0, 1]."""
    centers = (np.arange(size) + 0.5) / size
    ys, xs = np.meshgrid(centers, centers, indexing="ij")
    img = np.full((size, size), 0.1) + rng.normal(0.0, noise, (size, size))
    for f in findings:
        b = f.box
        u, v = (xs - b.cx) / (b.w / 2), (ys - b.cy) / (b.h / 2)
        img[_mask(f.class_name, u, v, classes.index(f.class_name))] = rng.uniform(0.7, 1.0)
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


# ---------- sentences ----------

def positive_sentence(class_name: str, zone: str) -> str:
    return f"there is a {class_name} in the {zone}"


def negative_sentence(class_name: str, zone: str) -> str:
    return f"no {class_name} in the {zone}"


def sentence_to_labels(sentence: str, spec: SceneSpec) -> Optional[ParsedSentence]:
    """Exact parse of a template sentence; None when the sentence is not in the grammar."""
    text = " ".join(sentence.lower().replace(".", " ").split())
    for pattern, positive in ((_POSITIVE, True), (_NEGATIVE, False)):
        m = pattern.match(text)
        if m is None:
            continue
        name, zone = m.group(1), m.group(2)
        if name not in spec.shape_classes or (zone is not None and zone not in spec.zone_names):
            return None
        return ParsedSentence(name, positive, zone)
    return None


def text_to_labels(text: str, spec: SceneSpec) -> List[ParsedSentence]:
    """Parse every sentence of a generated text; unparseable sentences yield nothing."""
    parsed = (sentence_to_labels(s, spec) for s in text.split("."))
    return [p for p in parsed if p is not None]


def compose_prompt(class_name: str, hint: Hint, zone: Optional[str], spec: SceneSpec) -> str:
    if class_name not in spec.shape_classes:
        raise UnknownTokenError(f"unknown class {class_name!r}")
    if hint == "none":
        return class_name
    if zone not in spec.zone_names:
        raise UnknownTokenError(f"unknown zone {zone!r}")
    if hint == "coarse":
        return f"{class_name} in the {row_of(zone)} zones"
    return f"{class_name} in the {zone}"


def negative_prompt(class_name: str) -> str:
    return f"no {class_name}"


def row_region_name(row: str) -> str:
    return f"{row} zones"


def build_vocabulary(spec: SceneSpec) -> Vocabulary:
    return Vocabulary.build(list(spec.shape_classes) + spec.zone_names + [row_region_name(r) for r in spec.row_names])


# ---------- samples ----------

def _rng(spec: SceneSpec, index: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([spec.seed, index, stream])


def _place(kind: str, core: Tuple[float, float, float, float], rng: np.random.Generator, min_size: float) -> Box:
    x1, y1, x2, y2 = core
    side = min(x2 - x1, y2 - y1) * rng.uniform(0.5, 0.9)
    ax, ay = _aspect(kind)
    w, h = max(side * ax, min_size), max(side * ay, min_size)
    cx = rng.uniform(x1 + w / 2, x2 - w / 2)
    cy = rng.uniform(y1 + h / 2, y2 - h / 2)
    return Box(cx, cy, w, h)


def _rater_view(findings: Sequence[Finding], jitter: float, rng: np.random.Generator) -> List[Finding]:
    out = []
    for f in findings:
        d = rng.normal(0.0, jitter, 4)
        b = f.box
        box = Box.clipped(b.cx + d[0], b.cy + d[1], b.w * (1 + d[2]), b.h * (1 + d[3]))
        out.append(Finding(f.class_name, box, f.zone))
    return out


def generate_sample(spec: SceneSpec, index: int, source: Optional[Source] = None) -> SceneSample:
    """Deterministic in (spec, index). The sub-corpus is drawn per index unless `source` forces it."""
    rng = _rng(spec, index)
    if source is None:
        source = "pathology" if rng.random() < spec.pathology_fraction else "region"
    else:
        rng.random()
    classes = list(spec.shape_classes)
    zones, cores = zone_boxes(spec), zone_cores(spec)
    names = spec.zone_names
    count = min(int(rng.choice(len(spec.shape_count_probs), p=spec.shape_count_probs)), len(names))
    chosen = sorted(rng.choice(len(names), size=count, replace=False).tolist())
    min_size = 2.0 / spec.image_size
    findings = []
    for zi in chosen:
        kind = classes[int(rng.integers(len(classes)))]
        findings.append(Finding(kind, _place(kind, cores[names[zi]], rng, min_size), names[zi]))
    image = render(spec.image_size, findings, classes, spec.noise, rng)

    regions: List[Region] = []
    for zone in names:
        present = [f.class_name for f in findings if f.zone == zone]
        if present:
            sentences = [positive_sentence(c, zone) for c in present]
        else:
            sentences = [negative_sentence(classes[int(rng.integers(len(classes)))], zone)]
        regions.append(Region(zone, [zones[zone]], sorted(set(present)), sentences))
    for row in spec.row_names:
        members = [r for r in regions[: len(names)] if row_of(r.name) == row]
        regions.append(Region(
            row_region_name(row),
            [m.boxes[0] for m in members],
            sorted({c for m in members for c in m.labels}),
            [s for m in members for s in m.sentences],
        ))

    labels = [int(any(f.class_name == c for f in findings)) for c in classes]
    report = [positive_sentence(f.class_name, f.zone) for f in findings]
    absent = [(c, z) for z in names for c in classes if not any(f.class_name == c and f.zone == z for f in findings)]
    for i in rng.permutation(len(absent))[: spec.negative_sentences]:
        report.append(negative_sentence(*absent[int(i)]))

    raters: List[List[Finding]] = []
    if source == "pathology":
        n_raters = int(rng.integers(1, spec.max_raters + 1))
        raters = [_rater_view(findings, spec.rater_jitter, rng) for _ in range(n_raters)]
        regions = []
        report = []
    return SceneSample(index, image, regions, findings, labels, report, source, raters)


def split_range(spec: SceneSpec, split: Split) -> range:
    """Disjoint index ranges: train, then val, then test."""
    if split == "train":
        return range(0, spec.n_train)
    if split == "val":
        return range(spec.n_train, spec.n_train + spec.n_val)
    if split == "test":
        start = spec.n_train + spec.n_val
        return range(start, start + spec.n_test)
    raise ValueError(f"unknown split {split!r}")


def generate_split(spec: SceneSpec, split: Split) -> List[SceneSample]:
    """Evaluation splits are all region samples; train mixes both sub-corpora."""
    forced: Optional[Source] = None if split == "train" else "region"
    return [generate_sample(spec, i, forced) for i in split_range(spec, split)]


def parity_schedule(samples: Sequence[SceneSample], rng: np.random.Generator) -> List[int]:
    """Indices into samples with the smaller sub-corpus oversampled to the size of the larger."""
    pools = {
        "region": [i for i, s in enumerate(samples) if s.source == "region"],
        "pathology": [i for i, s in enumerate(samples) if s.source == "pathology"],
    }
    if not pools["region"] or not pools["pathology"]:
        return list(range(len(samples)))
    size = max(len(p) for p in pools.values())
    out: List[int] = []
    for pool in pools.values():
        reps = [pool[int(j)] for j in rng.integers(len(pool), size=size - len(pool))]
        out.extend(pool + reps)
    return out


# ---------- augmentation ----------

def _mirror_words(text: str) -> str:
    return " ".join(_MIRROR.get(w, w) for w in text.split(" "))


def hflip_sample(sample: SceneSample) -> SceneSample:
    """Mirror the image horizontally; boxes, zone names and sentences follow."""
    def flip_finding(f: Finding) -> Finding:
        return Finding(f.class_name, f.box.hflip(), _mirror_words(f.zone))

    regions = [
        Region(_mirror_words(r.name), [b.hflip() for b in r.boxes], list(r.labels), [_mirror_words(s) for s in r.sentences])
        for r in sample.regions
    ]
    return replace(
        sample,
        image=sample.image[:, ::-1].copy(),
        regions=regions,
        findings=[flip_finding(f) for f in sample.findings],
        sentences=[_mirror_words(s) for s in sample.sentences],
        raters=[[flip_finding(f) for f in rater] for rater in sample.raters],
    )


def random_crop(sample: SceneSample, scale: Tuple[float, float], rng: np.random.Generator) -> SceneSample:
    """
    Square crop of relative side in `scale`, resized back to the image size. The
    window always contains every finding so labels and sentences stay valid;
    when no such window exists the sample is returned unchanged.
    """
    side = float(rng.uniform(*scale))
    hull = [f.box.corners() for f in sample.findings + [f for r in sample.raters for f in r]]
    lo_x = max(0.0, max((c[2] for c in hull), default=0.0) - side)
    hi_x = min(1.0 - side, min((c[0] for c in hull), default=1.0))
    lo_y = max(0.0, max((c[3] for c in hull), default=0.0) - side)
    hi_y = min(1.0 - side, min((c[1] for c in hull), default=1.0))
    if side >= 1.0 or lo_x > hi_x or lo_y > hi_y:
        return sample
    x0, y0 = float(rng.uniform(lo_x, hi_x)), float(rng.uniform(lo_y, hi_y))

    def move(b: Box) -> Box:
        x1, y1, x2, y2 = b.corners()
        return Box.from_corners((x1 - x0) / side, (y1 - y0) / side, (x2 - x0) / side, (y2 - y0) / side)

    def move_finding(f: Finding) -> Finding:
        return Finding(f.class_name, move(f.box), f.zone)

    size = sample.image.shape[0]
    px0, py0 = int(round(x0 * size)), int(round(y0 * size))
    pside = max(1, int(round(side * size)))
    patch = sample.image[py0: py0 + pside, px0: px0 + pside]
    rows = np.minimum((np.arange(size) * patch.shape[0]) // size, patch.shape[0] - 1)
    cols = np.minimum((np.arange(size) * patch.shape[1]) // size, patch.shape[1] - 1)
    regions = []
    for r in sample.regions:
        moved = []
        for b in r.boxes:
            x1, y1, x2, y2 = b.corners()
            if min(x2, x0 + side) > max(x1, x0) and min(y2, y0 + side) > max(y1, y0):
                moved.append(move(b))
        if moved:
            regions.append(Region(r.name, moved, list(r.labels), list(r.sentences)))
    return replace(
        sample,
        image=patch[rows][:, cols],
        regions=regions,
        findings=[move_finding(f) for f in sample.findings],
        raters=[[move_finding(f) for f in rater] for rater in sample.raters],
    )


# ---------- prompting probes ----------

ProbeKind = Literal["pair", "single"]


def opposite_zone(zone: str, spec: SceneSpec) -> str:
    """The zone in the same column and the farthest row."""
    rows = spec.row_names
    if len(rows) < 2:
        raise UnknownTokenError("opposite zones need at least two zone rows")
    row = row_of(zone)
    far = rows[-1] if rows.index(row) < len(rows) / 2 else rows[0]
    return f"{far} {zone.split(' ', 1)[1]}"


def probe_scene(spec: SceneSpec, index: int, kind: ProbeKind) -> SceneSample:
    """
    Scene for prompting probes: "pair" shows one shape class in a zone and in its
    opposite zone, "single" shows it once. Drawn from its own random stream.
    """
    rng = _rng(spec, index, stream=7)
    classes = list(spec.shape_classes)
    cores = zone_cores(spec)
    shape = classes[int(rng.integers(len(classes)))]
    first = spec.zone_names[int(rng.integers(len(spec.zone_names)))]
    zones = [first, opposite_zone(first, spec)] if kind == "pair" else [first]
    findings = [Finding(shape, _place(shape, cores[z], rng, 2.0 / spec.image_size), z) for z in zones]
    image = render(spec.image_size, findings, classes, spec.noise, rng)
    labels = [int(c == shape) for c in classes]
    return SceneSample(index, image, [], findings, labels, [positive_sentence(shape, z) for z in zones])
