import csv
import json

import pytest

from spatialbench.cli import main
from spatialbench.config import DEFAULT_SIGMA_EPS_SQ, METHOD_TAGS
from spatialbench.data_model import load_csv
from spatialbench.evaluation import CSV_HEADER


@pytest.fixture(autouse=True)
def _no_thread_env(monkeypatch):
    monkeypatch.delenv("SPB_THREADS", raising=False)


def sim_config(tmp_path, name="sim.json", **over):
    doc = dict(lon_min=0.0, lon_max=10.0, lat_min=0.0, lat_max=10.0,
               n_points=60, beta=[5.0, 0.3], sigma0_sq=2.0, theta=2.0,
               sigma_xi_sq=0.3, sigma_eps_sq=0.2, seed=7)
    doc.update(over)
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return str(path)


class TestShowDefaults:
    def test_emits_json_with_all_method_sections(self, capsys):
        assert main(["show-defaults"]) == 0
        doc = json.loads(capsys.readouterr().out)
        for tag in METHOD_TAGS:
            assert tag in doc
        assert doc["sigma_eps_sq"] == DEFAULT_SIGMA_EPS_SQ
        assert doc["methods"] == list(METHOD_TAGS)
        assert doc["pmcc_sign"] == "paper"


class TestSimulate:
    def test_writes_data_csv(self, tmp_path, capsys):
        cfg = sim_config(tmp_path)
        rc = main(["simulate", "--config", cfg, "--out", str(tmp_path / "o")])
        assert rc == 0
        data = load_csv(tmp_path / "o" / "data.csv")
        assert data.n == 60
        assert "data.csv" in capsys.readouterr().out

    def test_deterministic_for_same_config(self, tmp_path):
        cfg = sim_config(tmp_path)
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "data.csv").read_bytes() == \
            (tmp_path / "b" / "data.csv").read_bytes()

    def test_seed_flag_overrides_config(self, tmp_path):
        cfg = sim_config(tmp_path)
        main(["simulate", "--config", cfg, "--out", str(tmp_path / "a")])
        main(["simulate", "--config", cfg, "--seed", "99",
              "--out", str(tmp_path / "b")])
        assert (tmp_path / "a" / "data.csv").read_bytes() != \
            (tmp_path / "b" / "data.csv").read_bytes()

    def test_split_fraction_writes_partition(self, tmp_path):
        cfg = sim_config(tmp_path)
        out = tmp_path / "o"
        main(["simulate", "--config", cfg, "--split-fraction", "0.2",
              "--out", str(out)])
        train = load_csv(out / "train.csv")
        val = load_csv(out / "validation.csv")
        assert val.n == 12 and train.n == 48  # rint(0.2 * 60)

    def test_incomplete_config_exits_2(self, tmp_path, capsys):
        doc = {"n_points": 10}
        path = tmp_path / "bad.json"
        path.write_text(json.dumps(doc))
        assert main(["simulate", "--config", str(path),
                     "--out", str(tmp_path)]) == 2
        assert "error:" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Simulated data plus fitted EDW and TSK models."""
    root = tmp_path_factory.mktemp("cli")
    doc = dict(lon_min=0.0, lon_max=10.0, lat_min=0.0, lat_max=10.0,
               n_points=50, beta=[5.0, 0.3], sigma0_sq=2.0, theta=2.0,
               sigma_xi_sq=0.3, sigma_eps_sq=0.2, seed=11)
    cfg = root / "sim.json"
    cfg.write_text(json.dumps(doc))
    assert main(["simulate", "--config", str(cfg), "--out", str(root)]) == 0
    assert main(["fit", str(root / "data.csv"), "--method", "EDW,TSK",
                 "--out", str(root)]) == 0
    return root


class TestFitPredict:
    def test_fit_writes_model_files(self, workdir):
        assert (workdir / "model_EDW.json").exists()
        assert (workdir / "model_TSK.json").exists()

    def test_fit_reports_params_as_json(self, tmp_path, capsys):
        src = tmp_path / "d.csv"
        src.write_text("lon,lat,value\n0,0,1.0\n1,0,2.0\n0,1,3.0\n1,1,2.5\n")
        assert main(["fit", str(src), "--method", "EDW",
                     "--out", str(tmp_path)]) == 0
        out = capsys.readouterr().out
        line = next(l for l in out.splitlines() if "params:" in l)
        parsed = json.loads(line.split("params:", 1)[1])
        assert parsed["theta"] == 1.0

    def test_predict_points_file(self, workdir, tmp_path):
        pts = tmp_path / "pts.csv"
        pts.write_text("lon,lat\n1.0,1.0\n2.5,3.5\n9.0,9.0\n")
        out = tmp_path / "o"
        rc = main(["predict", str(workdir / "model_TSK.json"), str(pts),
                   "--out", str(out)])
        assert rc == 0
        with open(out / "predictions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 3
        assert set(rows[0]) == {"lon", "lat", "mean", "variance"}
        assert all(float(r["variance"]) >= 0 for r in rows)

    def test_predict_without_variance_omits_column(self, workdir, tmp_path):
        pts = tmp_path / "pts.csv"
        pts.write_text("lon,lat\n1.0,1.0\n")
        rc = main(["predict", str(workdir / "model_EDW.json"), str(pts),
                   "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "predictions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert set(rows[0]) == {"lon", "lat", "mean"}

    def test_predict_raster(self, workdir, tmp_path):
        rc = main(["predict", str(workdir / "model_EDW.json"),
                   "--raster", "0,0,2,1,1", "--out", str(tmp_path)])
        assert rc == 0
        with open(tmp_path / "predictions.csv", newline="") as fh:
            rows = list(csv.DictReader(fh))
        assert len(rows) == 6

    def test_predict_needs_points_or_raster(self, workdir, tmp_path):
        with pytest.raises(SystemExit):
            main(["predict", str(workdir / "model_EDW.json"),
                  "--out", str(tmp_path)])

    def test_unknown_method_tag_exits_2(self, workdir, tmp_path, capsys):
        rc = main(["fit", str(workdir / "data.csv"), "--method", "BOGUS",
                   "--out", str(tmp_path)])
        assert rc == 2
        assert "BOGUS" in capsys.readouterr().err

    def test_malformed_data_exits_2(self, tmp_path, capsys):
        bad = tmp_path / "bad.csv"
        bad.write_text("lon,lat,value\n1.0,2.0,huh\n")
        rc = main(["fit", str(bad), "--method", "EDW", "--out", str(tmp_path)])
        assert rc == 2
        assert "row 2" in capsys.readouterr().err


class TestCompare:
    def test_stdout_table_schema(self, workdir, capsys):
        rc = main(["compare", str(workdir / "data.csv"),
                   "--method", "EDW,SSP", "--split-fraction", "0.2",
                   "--raster", "0,0,10,10,1"])
        assert rc == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert lines[0].rstrip("\r") == ",".join(CSV_HEADER)
        tags = [l.split(",", 1)[0] for l in lines[1:]]
        assert tags == ["EDW", "SSP"]
        for line in lines[1:]:
            assert line.split(",")[2] == "N/A"  # neither reports variance

    def test_out_dir_gets_csv_and_json(self, workdir, tmp_path, capsys):
        out = tmp_path / "cmp"
        rc = main(["compare", str(workdir / "data.csv"), "--method", "EDW",
                   "--split-fraction", "0.2", "--raster", "0,0,10,10,1",
                   "--seed", "3", "--out", str(out)])
        assert rc == 0
        table = (out / "compare.csv").read_text()
        assert table.splitlines()[0].rstrip("\r") == ",".join(CSV_HEADER)
        doc = json.loads((out / "compare.json").read_text())
        assert doc["rows"][0]["tag"] == "EDW"
        assert doc["rows"][0]["pmcc"] is None
        assert doc["seed"] == 3

    def test_deterministic_metrics(self, workdir, capsys):
        argv = ["compare", str(workdir / "data.csv"), "--method", "EDW",
                "--split-fraction", "0.2", "--seed", "5",
                "--raster", "0,0,10,10,1"]
        main(argv)
        first = capsys.readouterr().out.splitlines()[1].split(",")[:4]
        main(argv)
        second = capsys.readouterr().out.splitlines()[1].split(",")[:4]
        assert first == second  # metric columns; timing columns may differ


class TestThreadLimit:
    def test_accepts_positive_integer(self, monkeypatch, capsys):
        import spatialbench.cli as cli_mod
        monkeypatch.setenv("SPB_THREADS", "1")
        try:
            assert main(["show-defaults"]) == 0
        finally:
            # the limiter is process-lifetime by design; undo it here so the
            # BLAS thread cap does not leak into other tests
            if cli_mod._THREAD_LIMITER is not None:
                cli_mod._THREAD_LIMITER.unregister()
                cli_mod._THREAD_LIMITER = None

    def test_rejects_garbage(self, monkeypatch):
        monkeypatch.setenv("SPB_THREADS", "banana")
        with pytest.raises(SystemExit):
            main(["show-defaults"])

    def test_rejects_zero(self, monkeypatch):
        monkeypatch.setenv("SPB_THREADS", "0")
        with pytest.raises(SystemExit):
            main(["show-defaults"])
