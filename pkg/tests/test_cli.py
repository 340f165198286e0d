import json
import os

import pytest

from flatfed.cli import main

CONFIG = """
[experiment]
name = "cli-run"
seed = 0
rounds = 3
checkpoint_every = 2

[dataset]
kind = "synthetic"
num_classes = 3
per_class = 15
test_per_class = 5
input_dim = 3
seed = 2

[partition]
clients = 3
alpha = 1.0
seed = 2

[federation]
clients_per_round = 2

[model]
kind = "mlp"
hidden = [5]

[optimizer]
kind = "sgd"
lr = 0.1
batch_size = 8
epochs = 1
"""


@pytest.fixture
def run_dir(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(CONFIG)
    out = tmp_path / "run"
    assert main(["run", str(cfg), "--out", str(out)]) == 0
    return out


class TestRunVerb:
    def test_ok_exit_zero(self, run_dir):
        assert (run_dir / "metrics.csv").exists()

    def test_config_error_exit_one(self, tmp_path, capsys):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text(CONFIG.replace("rounds = 3", "rounds = -1"))
        assert main(["run", str(cfg)]) == 1
        assert "rounds" in capsys.readouterr().err

    def test_missing_config_exit_one(self, tmp_path):
        assert main(["run", str(tmp_path / "none.cfg")]) == 1

    def test_runtime_error_exit_two(self, tmp_path):
        cfg = tmp_path / "cifar.cfg"
        cfg.write_text(
            CONFIG.replace('kind = "synthetic"', 'kind = "cifar10"\ntrain_paths = ["missing.bin"]\ntest_path = "missing.bin"')
        )
        assert main(["run", str(cfg), "--out", str(tmp_path / "x")]) == 2

    def test_env_var_output_root(self, tmp_path, monkeypatch):
        cfg = tmp_path / "exp.cfg"
        cfg.write_text(CONFIG)
        monkeypatch.setenv("FLATFED_OUT", str(tmp_path / "root"))
        assert main(["run", str(cfg)]) == 0
        assert (tmp_path / "root" / "cli-run" / "metrics.csv").exists()


class TestAnalyzeVerbs:
    def test_spectrum(self, run_dir):
        assert main(["analyze", "spectrum", str(run_dir), "--k", "2", "--batch", "32"]) == 0
        export = json.loads((run_dir / "exports" / "spectrum.json").read_text())
        assert export["kind"] == "spectrum"
        assert len(export["values"]) == 2

    def test_plane_from_three_checkpoints(self, run_dir, tmp_path):
        ckpts = sorted(str(p) for p in (run_dir / "checkpoints").iterdir())
        # need three distinct anchors; synthesize a third by rerunning with
        # another seed
        cfg = tmp_path / "exp2.cfg"
        cfg.write_text(CONFIG.replace("seed = 0", "seed = 9", 1).replace('name = "cli-run"', 'name = "cli-run2"'))
        out2 = tmp_path / "run2"
        assert main(["run", str(cfg), "--out", str(out2)]) == 0
        third = sorted(str(p) for p in (out2 / "checkpoints").iterdir())[-1]
        assert (
            main(
                [
                    "analyze",
                    "plane",
                    str(run_dir),
                    "--checkpoints",
                    ckpts[0],
                    ckpts[-1],
                    third,
                    "--n",
                    "5",
                ]
            )
            == 0
        )
        export = json.loads((run_dir / "exports" / "plane.json").read_text())
        assert export["kind"] == "plane"
        assert export["meta"]["N"] == 5
        assert len(export["values"]) == 25

    def test_surface(self, run_dir):
        assert main(["analyze", "surface", str(run_dir), "--resolution", "3"]) == 0
        export = json.loads((run_dir / "exports" / "surface.json").read_text())
        assert export["kind"] == "surface"
        assert len(export["values"]) == 9

    def test_analyze_without_run_dir_fails_cleanly(self, tmp_path):
        assert main(["analyze", "spectrum", str(tmp_path / "ghost")]) == 1


class TestCompareVerb:
    def test_table_and_exit(self, tmp_path, capsys):
        a = tmp_path / "a.json"
        b = tmp_path / "b.json"
        a.write_text(json.dumps({"name": "sam", "headline_accuracy": 44.73}))
        b.write_text(json.dumps({"name": "base", "headline_accuracy": 40.43}))
        assert main(["compare", str(a), str(b)]) == 0
        out = capsys.readouterr().out
        assert "+10.64%" in out
        assert "+4.30" in out
