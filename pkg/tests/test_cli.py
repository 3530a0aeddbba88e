import json
import os

import numpy as np
import pytest
import torch

from ns3d import cli
from ns3d.checkpoint import load_tokens
from ns3d.data import load_dataset
from ns3d.tokenizer import codebook_usage

TINY_TOKENIZER_SETS = [
    "latent_len=8", "dim=8", "num_heads=2", "scale_lengths=[1,4]",
    "vocab_size=16", "num_freqs=2", "encoder_self_layers=1",
    "decoder_self_layers=1",
]


def run_cli(*argv):
    return cli.run(list(argv))


def sets(*items):
    out = []
    for item in items:
        out.extend(["--set", item])
    return out


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    """One tiny end-to-end run shared by the CLI tests."""
    root = tmp_path_factory.mktemp("pipe")
    data = str(root / "data")
    assert run_cli(
        "gen-data", "--out", data, "--seed", "3",
        *sets("count=12", "classes=[0,1]", "n_points=64", "n_uniform=48", "n_near=48"),
    ) == 0
    tok_dir = str(root / "tok")
    assert run_cli(
        "train-tokenizer", "--out", tok_dir, "--seed", "0",
        *sets(f"dataset={json.dumps(data)}", "phase1_steps=20", "phase2_steps=20",
              "eval_interval=10", "points_per_shape=48", "queries_per_shape=32",
              "batch_size=4", *TINY_TOKENIZER_SETS),
    ) == 0
    tokens_dir = str(root / "tokens")
    assert run_cli(
        "tokenize", "--out", tokens_dir,
        *sets(f"dataset={json.dumps(data)}",
              f"tokenizer={json.dumps(tok_dir + '/tokenizer.ns3d')}"),
    ) == 0
    car_dir = str(root / "car")
    assert run_cli(
        "train-car", "--out", car_dir, "--seed", "0",
        *sets(f"tokens={json.dumps(tokens_dir + '/tokens.nstk')}",
              f"tokenizer={json.dumps(tok_dir + '/tokenizer.ns3d')}",
              "steps=20", "eval_interval=10", "dim=16", "depth=1",
              "num_heads=2", "batch_size=4"),
    ) == 0
    return {
        "data": data,
        "tokenizer": tok_dir + "/tokenizer.ns3d",
        "tokens": tokens_dir + "/tokens.nstk",
        "tokens_dir": tokens_dir,
        "tok_dir": tok_dir,
        "car": car_dir + "/car.ns3d",
        "car_dir": car_dir,
    }


class TestGenData:
    def test_outputs_and_determinism(self, tmp_path):
        a, b = str(tmp_path / "a"), str(tmp_path / "b")
        for out in (a, b):
            assert run_cli(
                "gen-data", "--out", out, "--seed", "7",
                *sets("count=4", "n_points=32", "n_uniform=16", "n_near=16"),
            ) == 0
        da, db = load_dataset(a), load_dataset(b)
        for i in range(4):
            assert np.array_equal(da.points(i), db.points(i))
        assert os.path.exists(os.path.join(a, "gen_data_config.json"))

    def test_count_zero_gives_empty_manifest(self, tmp_path):
        out = str(tmp_path / "empty")
        assert run_cli("gen-data", "--out", out, *sets("count=0")) == 0
        assert load_dataset(out).count == 0

    def test_unknown_key_rejected(self, tmp_path):
        with pytest.raises(Exception):
            run_cli("gen-data", "--out", str(tmp_path), *sets("n_shapes=4"))


class TestResolveConfig:
    def test_config_file_then_set_overrides(self, tmp_path):
        cfg_path = tmp_path / "c.json"
        cfg_path.write_text(json.dumps({"count": 5, "sigma": 0.01}))
        parser = cli.build_parser()
        args = parser.parse_args(
            ["gen-data", "--config", str(cfg_path), "--set", "count=9"]
        )
        cfg = cli.resolve_config(args, cli.GEN_DATA_DEFAULTS)
        assert cfg["count"] == 9
        assert cfg["sigma"] == 0.01

    def test_non_json_value_kept_as_string(self):
        parser = cli.build_parser()
        args = parser.parse_args(["tokenize", "--set", "dataset=/some/path"])
        cfg = cli.resolve_config(args, cli.TOKENIZE_DEFAULTS)
        assert cfg["dataset"] == "/some/path"

    def test_resolved_config_written_before_work(self, tmp_path):
        # even a failing run leaves its resolved config on disk
        out = str(tmp_path / "run")
        rc = None
        try:
            rc = run_cli("tokenize", "--out", out,
                         *sets("dataset=/nope", "tokenizer=/nope"))
        except Exception:
            pass
        assert rc != 0
        assert os.path.exists(os.path.join(out, "tokenize_config.json"))


class TestPipelineArtifacts:
    def test_tokenizer_artifacts(self, pipeline):
        d = pipeline["tok_dir"]
        assert os.path.exists(os.path.join(d, "tokenizer.ns3d"))
        assert os.path.exists(os.path.join(d, "tokenizer_loss.png"))
        records = [
            json.loads(line)
            for line in open(os.path.join(d, "tokenizer_metrics.jsonl"))
        ]
        events = [r.get("event") for r in records if "event" in r]
        assert "phase1_complete" in events and "phase2_start" in events
        h1 = next(r["weight_hash"] for r in records if r.get("event") == "phase1_complete")
        h2 = next(r["weight_hash"] for r in records if r.get("event") == "phase2_start")
        assert h1 == h2  # phase 2 starts from the phase 1 weights

    def test_tokenize_usage_matches_recount(self, pipeline):
        tokens = load_tokens(pipeline["tokens"])
        rep = json.load(open(os.path.join(pipeline["tokens_dir"], "tokenize_report.json")))
        stream = [torch.as_tensor(a) for a in tokens.indices]
        assert rep["usage"] == pytest.approx(codebook_usage(stream, tokens.vocab_size))
        assert rep["count"] == tokens.count

    def test_tokenize_deterministic(self, pipeline, tmp_path):
        out2 = str(tmp_path / "tokens2")
        assert run_cli(
            "tokenize", "--out", out2,
            *sets(f"dataset={json.dumps(pipeline['data'])}",
                  f"tokenizer={json.dumps(pipeline['tokenizer'])}"),
        ) == 0
        a = load_tokens(pipeline["tokens"])
        b = load_tokens(os.path.join(out2, "tokens.nstk"))
        for x, y in zip(a.indices, b.indices):
            assert np.array_equal(x, y)

    def test_tokenize_truncated_schedule(self, pipeline, tmp_path):
        out2 = str(tmp_path / "trunc")
        assert run_cli(
            "tokenize", "--out", out2,
            *sets(f"dataset={json.dumps(pipeline['data'])}",
                  f"tokenizer={json.dumps(pipeline['tokenizer'])}", "num_scales=1"),
        ) == 0
        t = load_tokens(os.path.join(out2, "tokens.nstk"))
        assert t.scale_lengths == (1,)

    def test_car_artifacts(self, pipeline):
        d = pipeline["car_dir"]
        assert os.path.exists(os.path.join(d, "car.ns3d"))
        assert os.path.exists(os.path.join(d, "car_loss.png"))
        records = [
            json.loads(line) for line in open(os.path.join(d, "car_metrics.jsonl"))
        ]
        assert all("train_loss" in r for r in records)
        assert any("test_loss" in r for r in records)

    def test_generate_writes_sidecar_and_optionally_obj(self, pipeline, tmp_path):
        out = str(tmp_path / "gen")
        assert run_cli(
            "generate", "--out", out, "--seed", "1",
            *sets(f"tokenizer={json.dumps(pipeline['tokenizer'])}",
                  f"car={json.dumps(pipeline['car'])}",
                  "count=2", "resolution=8", "class_id=0"),
        ) == 0
        for i in range(2):
            side = json.load(open(os.path.join(out, f"sample_{i:03d}.json")))
            assert side["class_id"] == 0
            assert "scale_0" in side["tokens"]
            if not side["empty_mesh"]:
                assert os.path.exists(os.path.join(out, f"sample_{i:03d}.obj"))
            else:
                assert not os.path.exists(os.path.join(out, f"sample_{i:03d}.obj"))

    def test_eval_gt_mode_perfect_scores(self, pipeline, tmp_path):
        out = str(tmp_path / "ev")
        assert run_cli(
            "eval", "--out", out,
            *sets(f"dataset={json.dumps(pipeline['data'])}", "mode=\"gt\"",
                  "split=\"train\"", "resolution=16", "max_shapes=2",
                  "n_surface=256"),
        ) == 0
        rep = json.load(open(os.path.join(out, "eval_report.json")))
        assert rep["mean_iou"] == 1.0
        assert rep["mean_chamfer"] == 0.0
        assert rep["mean_fscore"] == 1.0
        assert rep["mean_accuracy"] == 100.0
        assert os.path.exists(os.path.join(out, "eval_per_shape.csv"))
        assert os.path.exists(os.path.join(out, "eval_summary.png"))

    def test_eval_tokenizer_mode_runs(self, pipeline, tmp_path):
        out = str(tmp_path / "ev2")
        assert run_cli(
            "eval", "--out", out,
            *sets(f"dataset={json.dumps(pipeline['data'])}",
                  f"tokenizer={json.dumps(pipeline['tokenizer'])}",
                  "split=\"train\"", "resolution=8", "max_shapes=2",
                  "n_surface=128"),
        ) == 0
        rep = json.load(open(os.path.join(out, "eval_report.json")))
        assert 0.0 <= rep["mean_iou"] <= 1.0
        assert rep["usage"] is not None

    def test_inspect_checkpoint_and_tokens(self, pipeline, capsys):
        assert run_cli("inspect", pipeline["tokenizer"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["kind"] == "checkpoint"
        assert doc["parameters"] > 0
        assert run_cli("inspect", pipeline["tokens"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["kind"] == "tokens"
        assert doc["scale_lengths"] == [1, 4]


class TestExitCodes:
    def test_config_error_is_2(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            cli.main(["train-tokenizer", "--out", str(tmp_path)])
        assert e.value.code == 2

    def test_checkpoint_error_is_5(self, tmp_path):
        data = str(tmp_path / "d")
        assert run_cli("gen-data", "--out", data, *sets("count=0")) == 0
        with pytest.raises(SystemExit) as e:
            cli.main([
                "tokenize", "--out", str(tmp_path / "t"),
                "--set", "dataset=" + data,
                "--set", "tokenizer=/does/not/exist.ns3d",
            ])
        assert e.value.code == 5

    def test_data_error_is_3(self, tmp_path):
        out = str(tmp_path / "d")
        assert run_cli("gen-data", "--out", out, *sets("count=0")) == 0
        with pytest.raises(SystemExit) as e:
            cli.main(["eval", "--out", str(tmp_path / "e"),
                      "--set", "dataset=" + out, "--set", 'mode="gt"'])
        assert e.value.code == 3

    def test_success_exit_zero(self, tmp_path):
        with pytest.raises(SystemExit) as e:
            cli.main(["gen-data", "--out", str(tmp_path / "ok"), "--set", "count=1",
                      "--set", "n_points=16", "--set", "n_uniform=8",
                      "--set", "n_near=8"])
        assert e.value.code == 0
