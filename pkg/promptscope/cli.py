"""
Command-line harness: generate the corpus, train the stages, write per-task
predictions, evaluate them, and run the prompting probes. Every command writes
the resolved configuration and the seeds it used into the run directory.

    promptscope all --out runs/toy --set task.bootstrap_n=50
    promptscope train --stages 1 && promptscope infer --task od
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

import orjson

from promptscope.config.schema import PRESETS, RunConfig, dump_run_config, load_run_config
from promptscope.core.model import PromptScopeModel
from promptscope.data.synth import build_vocabulary, generate_split
from promptscope.errors import (
    CheckpointIncompatibleError,
    DegenerateMetricError,
    EmptyInputError,
    NonFiniteError,
    PromptScopeError,
    SchemaViolationError,
)
from promptscope.infra.logging import get_logger, setup_logging
from promptscope.infra.wiring import build_model
from promptscope.services.evaluation import evaluate_file
from promptscope.services.inference import Pipeline, tune_scales, write_predictions
from promptscope.services.probing import run_probes
from promptscope.services.training import train
from promptscope.store.checkpoint import load_checkpoint
from promptscope.store.dataset import read_split, write_split
from promptscope.utils.text import Vocabulary

logger = get_logger("cli")

TASKS = ("sg", "od", "rc", "re", "rg")
SPLITS = ("train", "val", "test")

_ERROR_CODES = {
    SchemaViolationError: "SCHEMA_VIOLATION",
    CheckpointIncompatibleError: "CHECKPOINT_INCOMPATIBLE",
    NonFiniteError: "NON_FINITE",
    EmptyInputError: "EMPTY_INPUT",
    DegenerateMetricError: "DEGENERATE_METRIC",
}


def error_code(exc: PromptScopeError) -> str:
    for cls, code in _ERROR_CODES.items():
        if isinstance(exc, cls):
            return code
    return "PROMPTSCOPE_ERROR"


# ---------- run directory ----------

class RunDir:
    """Artifact layout of one run."""

    def __init__(self, root: str | Path, data: Optional[str | Path] = None):
        self.root = Path(root)
        self.data = Path(data) if data else self.root / "data"

    @property
    def vocabulary(self) -> Path:
        return self.data / "vocab.txt"

    @property
    def checkpoints(self) -> Path:
        return self.root / "checkpoints"

    def predictions(self, task: str) -> Path:
        return self.root / "predictions" / f"{task}.jsonl"

    def report(self, task: str) -> Path:
        return self.root / "reports" / f"{task}.json"

    def latest_checkpoint(self, before: Optional[int] = None) -> Optional[Path]:
        found = sorted(self.checkpoints.glob("stage*.ckpt"), key=lambda p: int(p.stem[len("stage"):]))
        if before is not None:
            found = [p for p in found if int(p.stem[len("stage"):]) < before]
        return found[-1] if found else None

    def write_resolved(self, cfg: RunConfig) -> None:
        dump_run_config(cfg, self.root / "resolved_config.json")
        seeds = {"seed": cfg.seed, "scene_seed": cfg.scene.seed, "bootstrap_seed": cfg.task.bootstrap_seed}
        (self.root / "seeds.json").write_bytes(orjson.dumps(seeds, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS))


def _build_model(cfg: RunConfig, run: RunDir) -> PromptScopeModel:
    """Fresh model; the vocabulary written by gen-data, when present, must match the configured one."""
    model, vocab = build_model(cfg)
    if run.vocabulary.exists():
        try:
            saved = Vocabulary.load(run.vocabulary).tokens
        except ValueError as e:
            raise CheckpointIncompatibleError(f"unreadable vocabulary {run.vocabulary}: {e}") from e
        if saved != vocab.tokens:
            raise CheckpointIncompatibleError(
                f"vocabulary {run.vocabulary} has {len(saved)} tokens, the configuration builds {len(vocab)}")
    return model


def _load_model(cfg: RunConfig, run: RunDir, checkpoint: Optional[str]) -> PromptScopeModel:
    model = _build_model(cfg, run)
    path = Path(checkpoint) if checkpoint else run.latest_checkpoint()
    if path is None:
        raise CheckpointIncompatibleError(f"no checkpoint under {run.checkpoints}; run `train` first")
    meta = load_checkpoint(model, path)
    logger.info("model ready checkpoint=%s stage=%s", path, meta.get("stage"))
    return model


# ---------- commands ----------

def cmd_gen_data(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> None:
    for split in SPLITS:
        write_split(run.data, split, generate_split(cfg.scene, split))
    build_vocabulary(cfg.scene).save(run.vocabulary)
    logger.info("wrote vocabulary path=%s", run.vocabulary)


def cmd_train(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> None:
    stages = _parse_stages(args.stages) if getattr(args, "stages", None) else None
    model = _build_model(cfg, run)
    if stages:
        previous = run.latest_checkpoint(before=min(stages))
        if previous is not None:
            load_checkpoint(model, previous)
    samples = read_split(run.data, "train")
    for result in train(model, cfg, samples, run.root, stages):
        logger.info("stage=%d done final_loss=%.4f checkpoint=%s", result.stage,
                    result.losses[-1] if result.losses else float("nan"), result.checkpoint)


def cmd_infer(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> RunConfig:
    model = _load_model(cfg, run, getattr(args, "checkpoint", None))
    if getattr(args, "tune", False):
        tuned = tune_scales(Pipeline(model, cfg), read_split(run.data, "val"))
        cfg = cfg.model_copy(update={"task": cfg.task.model_copy(update={
            "sg_scale": tuned["sg_scale"], "od_class_scales": tuned["od_class_scales"]})})
        run.write_resolved(cfg)
    pipe = Pipeline(model, cfg)
    samples = read_split(run.data, "test")
    for task in _tasks(args):
        write_predictions(pipe, samples, task, run.predictions(task))
    return cfg


def cmd_eval(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> None:
    samples = read_split(run.data, "test")
    for task in _tasks(args):
        evaluate_file(task, run.predictions(task), samples, cfg, run.report(task))


def cmd_probe(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> None:
    model = _load_model(cfg, run, getattr(args, "checkpoint", None))
    rates = run_probes(Pipeline(model, cfg), n=args.n)
    path = run.root / "reports" / "probes.json"
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(orjson.dumps(rates, option=orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS) + b"\n")


def cmd_all(cfg: RunConfig, run: RunDir, args: argparse.Namespace) -> None:
    cmd_gen_data(cfg, run, args)
    cmd_train(cfg, run, args)
    cfg = cmd_infer(cfg, run, args)
    cmd_eval(cfg, run, args)


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "probe": cmd_probe,
    "all": cmd_all,
}


def _parse_stages(raw: str) -> List[int]:
    try:
        stages = sorted({int(s) for s in raw.split(",") if s.strip()})
    except ValueError as e:
        raise SchemaViolationError(f"bad --stages {raw!r}") from e
    if not stages or any(s not in (0, 1, 2, 3) for s in stages):
        raise SchemaViolationError(f"--stages must list stages 0-3, got {raw!r}")
    return stages


def _tasks(args: argparse.Namespace) -> Sequence[str]:
    return args.task or TASKS


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="RunConfig JSON file (default: the preset)")
    common.add_argument("--preset", default="toy", choices=sorted(PRESETS), help="Preset used when --config is absent")
    common.add_argument("--seed", type=int, help="Run seed override")
    common.add_argument("--out", help="Run directory (default: out_dir of the config)")
    common.add_argument("--data", help="Dataset directory (default: <out>/data)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="Dotted config override, e.g. task.nms_iou=0.3 (repeatable)")
    common.add_argument("--task", action="append", choices=TASKS, help="Task to infer/evaluate (repeatable; default all)")

    parser = argparse.ArgumentParser(prog="promptscope", description="Prompt-conditioned detection and region description")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="Write train/val/test splits")
    p_train = sub.add_parser("train", parents=[common], help="Run training stages")
    p_train.add_argument("--stages", help="Comma-separated stage ids (default: all configured)")
    p_infer = sub.add_parser("infer", parents=[common], help="Write prediction files")
    p_infer.add_argument("--checkpoint", help="Checkpoint file (default: latest stage in the run)")
    p_infer.add_argument("--tune", action="store_true", help="Grid-search box scales on the val split first")
    sub.add_parser("eval", parents=[common], help="Write metric reports")
    p_probe = sub.add_parser("probe", parents=[common], help="Regional-hint prompting probes")
    p_probe.add_argument("--checkpoint", help="Checkpoint file (default: latest stage in the run)")
    p_probe.add_argument("--n", type=int, default=100, help="Scenes per probe")
    p_all = sub.add_parser("all", parents=[common], help="gen-data, train, infer and eval in sequence")
    p_all.add_argument("--stages", help="Comma-separated stage ids (default: all configured)")
    p_all.add_argument("--tune", action="store_true", help="Grid-search box scales on the val split first")
    return parser


def resolve_config(args: argparse.Namespace) -> RunConfig:
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.out:
        overrides.append(f"out_dir={orjson.dumps(args.out).decode()}")
    return load_run_config(args.config, overrides, preset=args.preset)


def run(argv: Optional[Sequence[str]] = None) -> int:
    """Entry point; returns the process exit status."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    setup_logging()
    try:
        cfg = resolve_config(args)
        run_dir = RunDir(cfg.out_dir, args.data)
        run_dir.root.mkdir(parents=True, exist_ok=True)
        run_dir.write_resolved(cfg)
        logger.info("command=%s name=%s seed=%d out=%s", args.command, cfg.name, cfg.seed, run_dir.root)
        COMMANDS[args.command](cfg, run_dir, args)
    except PromptScopeError as e:
        logger.error("error_code=%s %s", error_code(e), e)
        return 1
    return 0


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
