import json

import pytest

from sebra import cli


@pytest.fixture
def small_config(tmp_path):
    cfg = {
        "sebra": {"beta": 2.0, "p_critical": 0.65, "max_rank": 4, "lr": 0.2, "batch_size": 16},
        "contrastive": {"epochs": 1},
        "erm": {"epochs": 3},
        "seeds": [0, 1],
    }
    p = tmp_path / "config.json"
    p.write_text(json.dumps(cfg), encoding="utf-8")
    return str(p)


def run(*argv):
    return cli.main([str(a) for a in argv])


class TestGen:
    def test_creates_missing_dir(self, tmp_path, small_config):
        out = tmp_path / "a" / "b"
        assert run("gen", "--config", small_config, "--out", out) == 0
        for s in (0, 1):
            assert (out / f"seed_{s}" / "dataset.csv").exists()
            assert (out / f"seed_{s}" / "dataset.spec.json").exists()

    def test_invalid_spec(self, tmp_path, capsys):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"dataset": {"num_classes": 1}}), encoding="utf-8")
        assert run("gen", "--config", p, "--out", tmp_path) == 2
        assert "error" in capsys.readouterr().err

    def test_unreadable_config(self, tmp_path):
        assert run("gen", "--config", tmp_path / "none.json") == 2

    def test_usage_error(self):
        assert run("frobnicate") == 2
        assert run("rank", "--method", "jtt") == 2


class TestPipeline:
    def test_rank_debias_eval_ablate(self, tmp_path, small_config, capsys):
        out = tmp_path / "run"
        assert run("gen", "--config", small_config, "--out", out) == 0
        assert run("rank", "--config", small_config, "--out", out) == 0
        summary = json.loads((out / "rank_summary_sebra.json").read_text())
        assert set(summary["tau_b"]) == {"values", "mean", "std"}
        assert len(summary["tau_b"]["values"]) == 2
        assert summary["per_seed"]["0"]["seeds"]["dataset"] >= 0

        first = (out / "seed_0" / "ranked.csv").read_bytes()
        assert run("rank", "--config", small_config, "--out", out, "--seed", 0) == 0
        assert (out / "seed_0" / "ranked.csv").read_bytes() == first

        assert run("debias", "--config", small_config, "--out", out) == 0
        rep = json.loads((out / "debias_summary.json").read_text())
        assert set(rep["summary"]) == {"sebra", "erm"}
        for s in (0, 1):
            assert (out / f"seed_{s}" / "model_sebra.json").exists()
            assert (out / f"seed_{s}" / "model_erm.json").exists()

        capsys.readouterr()
        d = out / "seed_0"
        assert run("eval", "--config", small_config, "--ranked", d / "ranked.csv", "--dataset", d / "dataset.csv", "--k", 50) == 0
        ev = json.loads(capsys.readouterr().out)
        assert ev["k"] == 50 and -100 <= ev["pd"] <= 100 and -1 <= ev["tau_b"] <= 1

        assert run("ablate", "--config", small_config, "--out", out) == 0
        rows = (out / "ablation.csv").read_text().splitlines()
        assert len(rows) == 1 + 3

    def test_erm_method(self, tmp_path, small_config):
        out = tmp_path / "run"
        run("gen", "--config", small_config, "--out", out, "--seed", 1)
        assert run("rank", "--config", small_config, "--out", out, "--seed", 1, "--method", "erm") == 0
        assert json.loads((out / "rank_summary_erm.json").read_text())["method"] == "erm"

    def test_rank_without_dataset(self, tmp_path, small_config):
        assert run("rank", "--config", small_config, "--out", tmp_path) == 2

    def test_debias_without_ranking(self, tmp_path, small_config):
        run("gen", "--config", small_config, "--out", tmp_path, "--seed", 0)
        assert run("debias", "--config", small_config, "--out", tmp_path, "--seed", 0) == 2

    def test_eval_malformed_csv(self, tmp_path, small_config):
        run("gen", "--config", small_config, "--out", tmp_path, "--seed", 0)
        bad = tmp_path / "bad.csv"
        bad.write_text("not,a,ranking\n", encoding="utf-8")
        d = tmp_path / "seed_0" / "dataset.csv"
        assert run("eval", "--ranked", bad, "--dataset", d) == 2
        assert run("eval", "--dataset", d) == 2

    def test_numeric_failure_exit_code(self, tmp_path, monkeypatch):
        from sebra.errors import NumericalError

        def boom(args, config):
            raise NumericalError("diverged")

        monkeypatch.setitem(cli.COMMANDS, "gen", boom)
        assert run("gen", "--out", tmp_path) == 3
