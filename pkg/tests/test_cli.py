"""
Tests for the command-line entry point

Tests cover:
- Exit codes and the one-line stderr error format
- Feature cache reuse across prepare runs
- Backtest outputs, reproducibility and evaluate agreement
- Train, forecast and quantile outputs and their reproducibility
"""

import json
import shutil
from pathlib import Path

import pandas as pd
import pytest
import yaml

from cli import main
from hierarchy import build_hierarchy


def run_dir_of(config_dict):
    runs = sorted(Path(config_dict["output_dir"]).glob("run-*"))
    assert len(runs) == 1
    return runs[0]


@pytest.mark.unit
class TestErrors:
    """Test exit codes for bad input"""

    def test_invalid_config(self, tmp_path, capsys):
        path = tmp_path / "bad.yaml"
        path.write_text(yaml.safe_dump({"groups": {"x": {"kind": "random_forest"}}}), encoding="utf-8")
        assert main(["prepare", "--config", str(path)]) == 1
        assert capsys.readouterr().err.startswith("ERROR config ")

    def test_missing_config_file(self, tmp_path, capsys):
        assert main(["prepare", "--config", str(tmp_path / "absent.yaml")]) == 1
        assert "config file not found" in capsys.readouterr().err

    def test_malformed_override(self, fast_config_file, capsys):
        assert main(["prepare", "--config", str(fast_config_file), "--set", "seed"]) == 1
        assert "ERROR config" in capsys.readouterr().err

    def test_invalid_sales_file(self, fast_config_file, m5_files, capsys):
        """A negative sale is rejected with the file named in the message"""
        sales = pd.read_csv(m5_files["sales"])
        sales.loc[2, "d_5"] = -1
        sales.to_csv(m5_files["sales"], index=False)
        assert main(["prepare", "--config", str(fast_config_file)]) == 1
        err = capsys.readouterr().err
        assert err.startswith("ERROR validation negative sale")
        assert "sales_train.csv" in err

    def test_empty_evaluation_file(self, fast_config_file, tmp_path, capsys):
        empty = tmp_path / "empty.csv"
        empty.write_text("", encoding="utf-8")
        assert main(["evaluate", "--config", str(fast_config_file), "--file", str(empty)]) == 1
        assert "ERROR validation" in capsys.readouterr().err


@pytest.mark.unit
def test_gen_synthetic(fast_config_file, tmp_path):
    out = tmp_path / "generated"
    code = main(["gen-synthetic", "--config", str(fast_config_file), "--out", str(out),
                 "--set", "synthetic.n_days=120"])
    assert code == 0
    sales = pd.read_csv(out / "sales_train.csv")
    assert sales["id"].str.endswith("_evaluation").all()
    assert sales.columns[-1] == "d_120"
    assert len(pd.read_csv(out / "calendar.csv")) == 148
    assert (out / "sell_prices.csv").exists()


@pytest.mark.integration
class TestPipelineCommands:
    """Test the commands end to end on the small synthetic panel"""

    def test_prepare_reuses_cache(self, fast_config_file, capsys):
        """A second prepare run reads every feature matrix from the cache"""
        assert main(["prepare", "--config", str(fast_config_file)]) == 0
        assert "0 hit(s), 3 miss(es)" in capsys.readouterr().out
        assert main(["prepare", "--config", str(fast_config_file)]) == 0
        assert "3 hit(s), 0 miss(es)" in capsys.readouterr().out

    def test_backtest_outputs_and_evaluate(self, fast_config_file, fast_config_dict):
        """Backtest files are reproducible and evaluate rescoring agrees with them"""
        args = ["backtest", "--config", str(fast_config_file)]
        assert main(args) == 0
        run_dir = run_dir_of(fast_config_dict)
        names = ["backtest-scores.csv", "backtest-levels.csv", "forecast-split_1.csv",
                 "forecast-split_2.csv", "backtest-report.md", "manifest-backtest.json"]
        first = {name: (run_dir / name).read_bytes() for name in names}

        shutil.rmtree(Path(fast_config_dict["output_dir"]) / "cache")
        assert main(args) == 0
        assert {name: (run_dir / name).read_bytes() for name in names} == first

        manifest = json.loads(first["manifest-backtest.json"])
        assert manifest["command"] == "backtest"
        assert set(manifest["outputs"]) == {"scores", "levels", "forecast-split_1",
                                            "forecast-split_2", "report"}

        scores = pd.read_csv(run_dir / "backtest-scores.csv", index_col=0)
        assert main(["evaluate", "--config", str(fast_config_file),
                     "--file", str(run_dir / "forecast-split_1.csv"), "--start-day", "373"]) == 0
        rescored = pd.read_csv(run_dir / "evaluate-forecast-split_1.csv")
        total = rescored.loc[rescored["series_id"] == "TOTAL", "value"].item()
        assert total == pytest.approx(scores.loc["split_1", "ensemble"], rel=1e-12)
        assert (run_dir / "evaluate-forecast-split_1-report.md").exists()

    def test_train_forecast_quantiles(self, fast_config_file, fast_config_dict, synthetic_panel, capsys):
        config = ["--config", str(fast_config_file)]
        assert main(["train"] + config) == 0
        assert main(["forecast"] + config) == 0
        run_dir = run_dir_of(fast_config_dict)
        assert (run_dir / "pipeline.joblib").exists()

        forecast = pd.read_csv(run_dir / "forecast.csv")
        assert forecast.shape == (16, 29)
        assert list(forecast["id"]) == synthetic_panel.series_keys
        assert (forecast.drop(columns="id").to_numpy() >= 0).all()
        for group in ("lgb_cos", "lgb_nas", "keras_nas", "fastai_cos"):
            assert (run_dir / f"forecast-{group}.csv").exists()

        assert main(["quantiles"] + config) == 0
        quantiles = pd.read_csv(run_dir / "quantiles.csv")
        index = build_hierarchy(synthetic_panel)
        assert len(quantiles) == index.total_series * 9
        assert quantiles["id"].iloc[0] == "Total_X_0.005"

        capsys.readouterr()
        assert main(["evaluate"] + config + ["--file", str(run_dir / "quantiles.csv")]) == 0
        assert "WSPL" in capsys.readouterr().out

        assert main(["evaluate"] + config + ["--file", str(run_dir / "quantiles.csv"),
                                            "--start-day", "401"]) == 2
        assert capsys.readouterr().err.startswith("ERROR missing-series")

    def test_forecast_and_quantiles_reproducible(self, fast_config_dict, tmp_path):
        """Two full runs into separate output directories write identical forecast files"""
        names = ["weights.csv", "forecast.csv", "median.csv", "quantiles.csv"] + [
            f"forecast-{group}.csv" for group in ("lgb_cos", "lgb_nas", "keras_nas", "fastai_cos")]
        files, digests = [], []
        for attempt in ("first", "second"):
            raw = dict(fast_config_dict, output_dir=str(tmp_path / attempt))
            path = tmp_path / f"{attempt}.yaml"
            path.write_text(yaml.safe_dump(raw), encoding="utf-8")
            config = ["--config", str(path), "--deterministic"]
            for command in ("prepare", "train", "forecast", "quantiles"):
                assert main([command] + config) == 0
            run_dir = run_dir_of(raw)
            files.append({name: (run_dir / name).read_bytes() for name in names})
            digests.append({command: json.loads((run_dir / f"manifest-{command}.json").read_text())["outputs"]
                            for command in ("forecast", "quantiles")})
        assert files[0] == files[1]
        assert digests[0] == digests[1]
