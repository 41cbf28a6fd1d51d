import orjson
import pytest

from promptscope.cli import RunDir, build_parser, error_code, run
from promptscope.config.schema import load_run_config
from promptscope.config.settings import settings
from promptscope.data.synth import build_vocabulary
from promptscope.errors import CheckpointIncompatibleError, PromptScopeError, SchemaViolationError
from promptscope.store.dataset import read_split
from promptscope.utils.text import Vocabulary

from conftest import perfect_record

SMALL = ["--set", "scene.n_train=8", "--set", "scene.n_val=2", "--set", "scene.n_test=5",
         "--set", "task.bootstrap_n=10", "--set", "task.bootstrap_n_generation=4"]


@pytest.fixture(autouse=True)
def _log_to_tmp(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, "LOG_FILE", str(tmp_path / "logs" / "cli.log"))


def test_parser_defaults():
    args = build_parser().parse_args(["infer", "--task", "od", "--task", "sg", "--set", "seed=3"])
    assert args.command == "infer"
    assert args.task == ["od", "sg"]
    assert args.overrides == ["seed=3"]
    assert args.preset == "toy" and not args.tune


def test_bad_arguments_exit_with_two():
    assert run([]) == 2
    assert run(["fly"]) == 2
    assert run(["eval", "--task", "xx"]) == 2


def test_error_codes():
    assert error_code(SchemaViolationError("x")) == "SCHEMA_VIOLATION"
    assert error_code(CheckpointIncompatibleError("x")) == "CHECKPOINT_INCOMPATIBLE"
    assert error_code(PromptScopeError("x")) == "PROMPTSCOPE_ERROR"


def test_library_errors_exit_with_one(tmp_path):
    out = str(tmp_path / "run")
    assert run(["infer", "--out", out]) == 1
    assert run(["eval", "--out", out, "--task", "od"]) == 1
    assert run(["train", "--out", out, "--stages", "1,9"]) == 1
    assert run(["gen-data", "--out", out, "--set", "task.nms_iou=5"]) == 1


def test_gen_data_then_eval_perfect_predictions(tmp_path):
    out = tmp_path / "run"
    assert run(["gen-data", "--out", str(out), *SMALL]) == 0
    assert (out / "resolved_config.json").exists()
    seeds = orjson.loads((out / "seeds.json").read_bytes())
    assert set(seeds) == {"seed", "scene_seed", "bootstrap_seed"}

    cfg = load_run_config(out / "resolved_config.json")
    run_dir = RunDir(out)
    samples = read_split(run_dir.data, "test")
    assert len(samples) == 5 and len(read_split(run_dir.data, "train")) == 8

    path = run_dir.predictions("od")
    path.parent.mkdir(parents=True)
    with open(path, "wb") as fh:
        for s in samples:
            record = perfect_record(s, "od", cfg.scene.shape_classes)
            fh.write(orjson.dumps(record.model_dump(mode="json", by_alias=True, exclude_none=True)) + b"\n")

    assert run(["eval", "--out", str(out), "--task", "od", *SMALL]) == 0
    (report,) = orjson.loads(run_dir.report("od").read_bytes())
    assert report["name"] == "od_map"
    assert report["value"] == pytest.approx(1.0)
    assert report["n_resamples"] <= 10


def test_latest_checkpoint_ordering(tmp_path):
    run_dir = RunDir(tmp_path)
    assert run_dir.latest_checkpoint() is None
    run_dir.checkpoints.mkdir()
    for k in (0, 2, 10):
        (run_dir.checkpoints / f"stage{k}.ckpt").write_bytes(b"")
    assert run_dir.latest_checkpoint().name == "stage10.ckpt"
    assert run_dir.latest_checkpoint(before=2).name == "stage0.ckpt"


@pytest.mark.slow
def test_all_commands_end_to_end(tmp_path):
    out = str(tmp_path / "run")
    stages = []
    for k in range(4):
        stages += ["--set", f"stages.{k}.steps=3", "--set", f"stages.{k}.warmup_steps=1",
                   "--set", f"stages.{k}.batch_size=4"]
    assert run(["all", "--out", out, *SMALL, *stages]) == 0
    for task in ("sg", "od", "rc", "re", "rg"):
        reports = orjson.loads((tmp_path / "run" / "reports" / f"{task}.json").read_bytes())
        assert all(0.0 <= r["value"] <= 1.0 for r in reports)
    assert run(["probe", "--out", out, "--n", "4", *SMALL]) == 0
    assert (tmp_path / "run" / "reports" / "probes.json").exists()


def test_gen_data_writes_the_vocabulary_and_train_checks_it(tmp_path):
    out = tmp_path / "run"
    assert run(["gen-data", "--out", str(out), *SMALL]) == 0
    run_dir = RunDir(out)
    cfg = load_run_config(out / "resolved_config.json")
    assert Vocabulary.load(run_dir.vocabulary).tokens == build_vocabulary(cfg.scene).tokens

    run_dir.vocabulary.write_text("<pad>\n<bos>\n<eos>\n<sep>\ncircle\n", encoding="utf-8")
    assert run(["train", "--out", str(out), "--stages", "1", *SMALL]) == 1
