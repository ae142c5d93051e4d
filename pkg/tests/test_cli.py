"""
Integration tests for the maskcls command line.
"""

import json

import pytest

from maskcls import schemas
from maskcls.cli import SegmentationManager, build_parser, run, toy_config
from maskcls.data import load_dataset

TINY_CONFIG = """\
# tiny maskformer for CLI tests
model.num_classes = 4
model.num_queries = 5
model.decoder_layers = 1
model.heads = 2
model.hidden_dim = 8
model.mask_dim = 8
model.backbone_channels = [4, 8]
model.image_size = [32, 32]
augment.enabled = false
base_lr = 0.001
total_iters = 2
batch_size = 1
log_every = 0
"""


def _stdout_json(capsys):
    return json.loads(capsys.readouterr().out)


def _stderr_error(capsys):
    lines = [line for line in capsys.readouterr().err.splitlines() if line.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture
def gt_dir(tmp_path, capsys):
    out = tmp_path / "gt"
    assert run(["gen-data", "--classes", "4", "--count", "5", "--size", "32", "32",
                "--seed", "3", "--out", str(out)]) == 0
    capsys.readouterr()
    return out


@pytest.fixture
def config_file(tmp_path):
    path = tmp_path / "tiny.cfg"
    path.write_text(TINY_CONFIG)
    return path


@pytest.fixture
def checkpoint(tmp_path, gt_dir, config_file, capsys):
    out = tmp_path / "run"
    assert run(["train", "--config", str(config_file), "--data", str(gt_dir),
                "--out", str(out)]) == 0
    capsys.readouterr()
    return out / "checkpoint_final.ckpt"


@pytest.mark.integration
class TestDataAndTraining:

    def test_gen_data_writes_dataset_and_result(self, tmp_path, capsys):
        out = tmp_path / "data"
        assert run(["gen-data", "--classes", "4", "--count", "3", "--size", "32", "32",
                    "--out", str(out)]) == 0
        result = _stdout_json(capsys)
        assert result["status"] == "success"
        assert result["count"] == 3
        assert json.loads((out / "result.json").read_text()) == result
        assert len(load_dataset(out)) == 3

    def test_train_reports_checkpoint(self, tmp_path, gt_dir, config_file, capsys):
        out = tmp_path / "run"
        assert run(["train", "--config", str(config_file), "--data", str(gt_dir),
                    "--iters", "1", "--out", str(out)]) == 0
        result = _stdout_json(capsys)
        assert result["iterations"] == 1
        assert (out / "checkpoint_final.ckpt").exists()
        assert (out / "train_log.jsonl").exists()
        schemas.validate(result, "train")

    def test_train_rejects_class_mismatch(self, tmp_path, gt_dir, capsys):
        path = tmp_path / "wrong.cfg"
        path.write_text(TINY_CONFIG.replace("model.num_classes = 4", "model.num_classes = 6")
                        .replace("model.num_queries = 5", "model.num_queries = 7"))
        assert run(["train", "--config", str(path), "--data", str(gt_dir),
                    "--out", str(tmp_path / "run")]) == 1
        error = _stderr_error(capsys)
        assert error["error_type"] == "ConfigError"
        assert error["command"] == "train"


@pytest.mark.integration
class TestEvaluation:

    def test_ground_truth_against_itself(self, tmp_path, gt_dir, capsys):
        out = tmp_path / "eval"
        assert run(["eval-semantic", "--gt", str(gt_dir), "--pred", str(gt_dir),
                    "--out", str(out)]) == 0
        report = _stdout_json(capsys)["report"]
        assert report["miou"] == pytest.approx(1.0)
        assert report["pq"] == pytest.approx(1.0)
        assert (out / "metrics.json").exists()

    def test_panoptic_against_itself(self, tmp_path, gt_dir, capsys):
        assert run(["eval-panoptic", "--gt", str(gt_dir), "--pred", str(gt_dir),
                    "--out", str(tmp_path / "pq")]) == 0
        report = _stdout_json(capsys)["report"]
        assert report["pq"] == pytest.approx(1.0)
        assert report["miou"] == pytest.approx(1.0)

    def test_checkpoint_evaluation(self, tmp_path, gt_dir, checkpoint, capsys):
        for strategy in ("semantic", "general"):
            assert run(["eval-semantic", "--gt", str(gt_dir), "--checkpoint", str(checkpoint),
                        "--strategy", strategy, "--out", str(tmp_path / strategy)]) == 0
            report = _stdout_json(capsys)["report"]
            assert 0.0 <= report["pixel_accuracy"] <= 1.0

    def test_pred_and_checkpoint_are_exclusive(self, tmp_path, gt_dir, capsys):
        assert run(["eval-semantic", "--gt", str(gt_dir), "--out", str(tmp_path / "e")]) == 1
        assert _stderr_error(capsys)["error_type"] == "ConfigError"

    def test_missing_dataset_is_a_dataset_error(self, tmp_path, capsys):
        assert run(["eval-semantic", "--gt", str(tmp_path / "nowhere"), "--pred",
                    str(tmp_path / "nowhere"), "--out", str(tmp_path / "e")]) == 1
        error = _stderr_error(capsys)
        assert error["error_type"] == "DatasetError"
        schemas.validate(error, "error")


@pytest.mark.integration
class TestInferenceDumps:

    def test_infer_dataset_writes_predictions(self, tmp_path, gt_dir, checkpoint, capsys):
        out = tmp_path / "infer"
        assert run(["infer", "--checkpoint", str(checkpoint), "--data", str(gt_dir),
                    "--conf-threshold", "0.3", "--out", str(out)]) == 0
        result = _stdout_json(capsys)
        assert len(result["images"]) == 5
        first = out / "000000"
        assert (first / "label_map.png").exists()
        assert len(list(first.glob("query_*.png"))) == 5
        predictions = load_dataset(out / "predictions")
        assert predictions.kind == "prediction"
        assert len(predictions) == 5

    def test_predictions_evaluate_like_the_checkpoint(self, tmp_path, gt_dir, checkpoint,
                                                     capsys):
        run(["infer", "--checkpoint", str(checkpoint), "--data", str(gt_dir), "--task",
             "semantic", "--out", str(tmp_path / "infer")])
        capsys.readouterr()
        run(["eval-semantic", "--gt", str(gt_dir), "--pred",
             str(tmp_path / "infer" / "predictions"), "--out", str(tmp_path / "a")])
        from_pred = _stdout_json(capsys)["report"]
        run(["eval-semantic", "--gt", str(gt_dir), "--checkpoint", str(checkpoint),
             "--out", str(tmp_path / "b")])
        from_ckpt = _stdout_json(capsys)["report"]
        assert from_pred["miou"] == pytest.approx(from_ckpt["miou"])

    def test_infer_needs_one_source(self, tmp_path, checkpoint, capsys):
        assert run(["infer", "--checkpoint", str(checkpoint), "--out", str(tmp_path / "i")]) == 1
        assert _stderr_error(capsys)["error_type"] == "ConfigError"

    def test_query_stats(self, tmp_path, gt_dir, checkpoint, capsys):
        out = tmp_path / "stats"
        assert run(["query-stats", "--checkpoint", str(checkpoint), "--data", str(gt_dir),
                    "--conf-threshold", "0.0", "--out", str(out)]) == 0
        stats = _stdout_json(capsys)["stats"]
        assert len(stats["counts"]) == 5
        assert (out / "query_stats.json").exists()


@pytest.mark.unit
class TestArgumentErrors:

    def test_missing_required_argument_exits_2(self, capsys):
        assert run(["gen-data", "--classes", "4", "--out", "x"]) == 2
        error = _stderr_error(capsys)
        assert error["status"] == "error"
        assert error["error_type"] == "ArgumentError"

    def test_unknown_command_exits_2(self, capsys):
        assert run(["segment-everything"]) == 2
        assert _stderr_error(capsys)["error_type"] == "ArgumentError"

    def test_every_command_takes_seed_and_out(self):
        parser = build_parser()
        args = parser.parse_args(["grad-check", "--out", "o"])
        assert args.seed == 0 and args.coords == 32
        args = parser.parse_args(["ablate-queries", "--data", "d", "--out", "o"])
        assert args.values == [20, 50, 100, 150]

    def test_toy_config_defaults(self):
        config = toy_config(16, (32, 32))
        assert config.model.num_queries == 20
        assert config.model.decoder_layers == 2
        assert config.eval_fraction == pytest.approx(0.2)


@pytest.mark.slow
class TestSlowCommands:

    def test_grad_check_passes(self, tmp_path, capsys):
        assert run(["grad-check", "--coords", "2", "--out", str(tmp_path)]) == 0
        result = _stdout_json(capsys)
        assert result["passed"]
        assert result["max_error"] < 1e-4
        assert set(result["suites"]) == {"primitives", "losses", "model"}

    def test_ablate_matching_writes_table(self, tmp_path, gt_dir, config_file, capsys):
        out = tmp_path / "ablate"
        assert run(["ablate-matching", "--data", str(gt_dir), "--config", str(config_file),
                    "--iters", "1", "--out", str(out)]) == 0
        result = _stdout_json(capsys)
        assert [row["label"] for row in result["rows"]] == ["fixed", "bipartite"]
        assert (out / "ablation.txt").read_text().startswith("label")
        schemas.validate(result, "ablation")


@pytest.mark.integration
class TestResultSchemas:

    def _check(self, argv, capsys):
        assert run(argv) == 0
        result = _stdout_json(capsys)
        schemas.validate(result, schemas.result_schema(argv[0]))
        return result

    def test_every_command_result_validates(self, tmp_path, gt_dir, checkpoint, capsys):
        self._check(["gen-data", "--classes", "4", "--count", "2", "--size", "32", "32",
                     "--out", str(tmp_path / "g")], capsys)
        for command in ("eval-semantic", "eval-panoptic"):
            self._check([command, "--gt", str(gt_dir), "--checkpoint", str(checkpoint),
                         "--out", str(tmp_path / command)], capsys)
        self._check(["infer", "--checkpoint", str(checkpoint), "--data", str(gt_dir),
                     "--out", str(tmp_path / "i")], capsys)
        self._check(["query-stats", "--checkpoint", str(checkpoint), "--data", str(gt_dir),
                     "--out", str(tmp_path / "q")], capsys)

    def test_train_log_lines_validate(self, checkpoint):
        log = checkpoint.parent / "train_log.jsonl"
        for line in log.read_text().splitlines():
            schemas.validate(json.loads(line), "train_log_record")

    def test_ablation_commands_share_one_schema(self):
        assert schemas.result_schema("ablate-queries") == "ablation"
        assert schemas.result_schema("ablate-classes") == "ablation"
        assert schemas.result_schema("train") == "train"

    def test_malformed_result_is_an_error(self, tmp_path, monkeypatch, capsys):
        monkeypatch.setattr(SegmentationManager, "gen_data",
                            lambda self, *args, **kwargs: {"status": "success",
                                                           "command": "gen-data"})
        assert run(["gen-data", "--classes", "4", "--count", "1",
                    "--out", str(tmp_path / "g")]) == 1
        assert _stderr_error(capsys)["error_type"] == "MaskClsError"
        assert not (tmp_path / "g" / "result.json").exists()


@pytest.mark.integration
class TestBackgroundClass:

    def test_train_takes_background_class_from_dataset(self, tmp_path, config_file, capsys):
        data = tmp_path / "bg3"
        assert run(["gen-data", "--classes", "4", "--count", "3", "--size", "32", "32",
                    "--background-class", "3", "--out", str(data)]) == 0
        capsys.readouterr()
        out = tmp_path / "run"
        assert run(["train", "--config", str(config_file), "--data", str(data),
                    "--iters", "1", "--out", str(out)]) == 0
        result = _stdout_json(capsys)
        assert result["config"]["augment"]["background_class"] == 3
        saved = json.loads((out / "config.json").read_text())
        assert saved["augment"]["background_class"] == 3


@pytest.mark.slow
def test_ablate_classes_reports_trend(tmp_path, config_file, capsys):
    out = tmp_path / "classes"
    assert run(["ablate-classes", "--config", str(config_file), "--count", "10", "--iters", "1",
                "--out", str(out)]) == 0
    result = _stdout_json(capsys)
    schemas.validate(result, "ablation")
    rows = {row["label"]: row["miou"] or 0.0 for row in result["rows"]}
    gaps = {k: rows[f"maskformer_{k}"] - rows[f"per_pixel_plus_{k}"] for k in ("16", "64")}
    assert result["gaps"] == pytest.approx(gaps)
    assert result["trend_holds"] == (gaps["64"] >= gaps["16"] - result["slack"])
    assert (out / "ablation.txt").exists()
    assert (out / "ablation.json").exists()
