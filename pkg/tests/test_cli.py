import csv
import json
import subprocess
import sys

import pytest

from kwslab.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, main, parse_grid

TINY = ["--set", "train.arch=tiny", "--set", "train.epochs=1", "--set", "train.batch_size=4"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli") / "data"
    assert main(["synth", "--set", "corpus.n_pos=20", "--set", "corpus.n_neg=20", "--out", str(root)]) == EXIT_OK
    return root


def train_eval(dataset, run, *extra):
    assert main(["train", "--data", str(dataset), "--out", str(run), *TINY, *extra]) == EXIT_OK
    assert main(["eval", "--checkpoint", str(run), "--data", str(dataset), "--frr", "0.5"]) == EXIT_OK


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


class TestUsage:
    def test_no_subcommand(self, capsys):
        assert main([]) == EXIT_USAGE

    def test_subcommand_typo_suggests(self, capsys):
        assert main(["trian"]) == EXIT_USAGE
        assert "did you mean train" in capsys.readouterr().err

    def test_flag_typo_suggests(self, capsys, tmp_path):
        assert main(["synth", "--outt", str(tmp_path)]) == EXIT_USAGE
        assert "--out" in capsys.readouterr().err

    def test_unknown_config_key(self, capsys, dataset, tmp_path):
        code = main(["train", "--data", str(dataset), "--out", str(tmp_path / "r"), "--set", "train.epoch=1"])
        assert code == EXIT_USAGE
        assert "did you mean 'epochs'" in capsys.readouterr().err

    def test_missing_dataset(self, capsys, tmp_path):
        assert main(["train", "--data", str(tmp_path / "none"), "--out", str(tmp_path / "r")]) == EXIT_DATA

    def test_missing_checkpoint(self, capsys, dataset, tmp_path):
        assert main(["eval", "--checkpoint", str(tmp_path), "--data", str(dataset)]) == EXIT_DATA

    def test_bad_grid_key(self):
        with pytest.raises(Exception, match="did you mean 'b'"):
            parse_grid(["bb=0.1"])

    def test_grid_product(self):
        assert parse_grid(["b=0,1", "f=5"]) == [{"b": "0", "f": "5"}, {"b": "1", "f": "5"}]

    def test_module_entry_point(self):
        out = subprocess.run([sys.executable, "-m", "kwslab", "--version"], capture_output=True, text=True)
        assert out.returncode == 0 and out.stdout.startswith("kwslab ")


class TestPipeline:
    def test_train_writes_run(self, dataset, tmp_path):
        run = tmp_path / "run"
        train_eval(dataset, run)
        manifest = json.loads((run / "run_manifest.json").read_text())
        assert manifest["run_id"] == "run"
        assert manifest["config"]["train"]["arch"] == "tiny"
        assert len(manifest["dataset_checksum"]) == 64
        for name in ("metrics.csv", "timing.csv", "checkpoint.ckpt", "eval/det_curve.csv", "eval/latency.csv"):
            assert (run / name).exists()
        assert len(rows(run / "eval" / "operating_points.csv")) == 1

    def test_refuses_to_overwrite(self, capsys, dataset, tmp_path):
        run = tmp_path / "run"
        assert main(["train", "--data", str(dataset), "--out", str(run), *TINY]) == EXIT_OK
        assert main(["train", "--data", str(dataset), "--out", str(run), *TINY]) == EXIT_USAGE
        assert main(["train", "--data", str(dataset), "--out", str(run), *TINY, "--overwrite"]) == EXIT_OK

    def test_eval_reruns_are_byte_identical(self, dataset, tmp_path):
        run = tmp_path / "run"
        train_eval(dataset, run)
        first = (run / "eval" / "det_curve.csv").read_bytes()
        assert main(["eval", "--checkpoint", str(run), "--data", str(dataset), "--frr", "0.5"]) == EXIT_OK
        assert (run / "eval" / "det_curve.csv").read_bytes() == first

    def test_seed_from_environment(self, monkeypatch, dataset, tmp_path):
        monkeypatch.setenv("KWSLAB_SEED", "9")
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "a"), *TINY]) == EXIT_OK
        assert json.loads((tmp_path / "a" / "run_manifest.json").read_text())["config"]["train"]["seed"] == 9
        # an explicit override still wins over the environment
        args = ["train", "--data", str(dataset), "--out", str(tmp_path / "b"), *TINY, "--set", "train.seed=4"]
        assert main(args) == EXIT_OK
        assert json.loads((tmp_path / "b" / "run_manifest.json").read_text())["config"]["train"]["seed"] == 4

    def test_bad_seed_environment(self, monkeypatch, dataset, tmp_path):
        monkeypatch.setenv("KWSLAB_SEED", "x")
        assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "a"), *TINY]) == EXIT_USAGE

    def test_manifest_reproduces_run(self, dataset, tmp_path):
        first = tmp_path / "first"
        assert main(["train", "--data", str(dataset), "--out", str(first), *TINY]) == EXIT_OK
        again = tmp_path / "again"
        assert main(["train", "--manifest", str(first / "run_manifest.json"), "--out", str(again)]) == EXIT_OK
        for name in ("metrics.csv", "checkpoint.ckpt"):
            assert (first / name).read_bytes() == (again / name).read_bytes()

    def test_manifest_checksum_mismatch(self, capsys, dataset, tmp_path):
        first = tmp_path / "first"
        assert main(["train", "--data", str(dataset), "--out", str(first), *TINY]) == EXIT_OK
        other = tmp_path / "other"
        assert main(["synth", "--set", "corpus.n_pos=4", "--set", "corpus.n_neg=4", "--out", str(other)]) == EXIT_OK
        args = ["train", "--manifest", str(first), "--data", str(other), "--out", str(tmp_path / "x")]
        assert main(args) == EXIT_DATA
        assert "checksum" in capsys.readouterr().err

    def test_config_file(self, dataset, tmp_path):
        cfg = tmp_path / "run.cfg"
        cfg.write_text("[train]\narch = tiny\nepochs = 1\nbatch_size = 4\nloss = max_latency\nf = 40\n")
        assert main(["train", "--config", str(cfg), "--data", str(dataset), "--out", str(tmp_path / "r")]) == EXIT_OK
        loss = json.loads((tmp_path / "r" / "run_manifest.json").read_text())["config"]["train"]["loss"]
        assert loss == {"kind": "max_latency", "dist": None, "f": 40}


class TestSweep:
    def test_single_point_matches_direct_run(self, dataset, tmp_path):
        sweep = tmp_path / "sweep"
        args = ["sweep", "--data", str(dataset), "--out", str(sweep), "--grid", "b=0.5", *TINY]
        assert main(args) == EXIT_OK
        direct = tmp_path / "direct"
        train_eval(dataset, direct, "--set", "train.loss=latency_mp", "--set", "train.dist=bernoulli(0.5)")
        # the sweep evaluates at the configured 5% FRR, so compare checkpoints and DET curves
        assert (sweep / "b-0.5" / "checkpoint.ckpt").read_bytes() == (direct / "checkpoint.ckpt").read_bytes()
        assert (sweep / "b-0.5" / "eval" / "det_curve.csv").read_bytes() == (
            direct / "eval" / "det_curve.csv"
        ).read_bytes()

    def test_tradeoff_table_and_report(self, dataset, tmp_path):
        sweep = tmp_path / "sweep"
        args = ["sweep", "--data", str(dataset), "--out", str(sweep), "--grid", "b=0.0,1.0", *TINY]
        args += ["--set", "eval.target_frr=0.5"]
        assert main(args) == EXIT_OK
        table = rows(sweep / "tradeoff.csv")
        assert [r["run"] for r in table] == ["b-0.0", "b-1.0"]
        assert float(table[0]["latency_reduction_ms"]) == 0.0
        assert (sweep / "sweep.cfg").exists()
        assert main(["report", "--run", str(sweep)]) == EXIT_OK
        for name in ("tradeoff.svg", "det.svg"):
            assert (sweep / name).read_text().startswith("<svg")

    def test_unknown_baseline(self, capsys, dataset, tmp_path):
        args = ["sweep", "--data", str(dataset), "--out", str(tmp_path / "s"), "--grid", "b=0.5", *TINY]
        assert main([*args, "--baseline", "b-9"]) == EXIT_USAGE

    def test_report_single_run(self, dataset, tmp_path):
        run = tmp_path / "run"
        train_eval(dataset, run)
        assert main(["report", "--run", str(run)]) == EXIT_OK
        assert (run / "det.svg").exists()

    def test_report_without_results(self, capsys, tmp_path):
        assert main(["report", "--run", str(tmp_path)]) == EXIT_DATA
