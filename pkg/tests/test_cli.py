import json

import numpy as np
import pytest

from rrst.cli import main
from rrst.io import (read_observations, read_sites, write_observations,
                     write_sites)


def _simulate(tmp_path, name="data", seed=3, n_fixed=10, T=8, extra=()):
    out = tmp_path / name
    rc = main(["simulate", "--out", str(out), "--seed", str(seed),
               "--basis", "none", "--rank", "0",
               "--set", f"sim.n_fixed={n_fixed}", "--set", f"sim.T={T}",
               *extra])
    assert rc == 0
    return out


def test_simulate_outputs_and_determinism(tmp_path):
    a = _simulate(tmp_path, "a")
    b = _simulate(tmp_path, "b")
    for name in ("sites.csv", "obs.csv", "truth.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    c = _simulate(tmp_path, "c", seed=4)
    assert (a / "obs.csv").read_bytes() != (c / "obs.csv").read_bytes()


def test_fit_predict_round_trip(tmp_path, capsys):
    data = _simulate(tmp_path)
    fitdir = tmp_path / "fit"
    rc = main(["fit", "--sites", str(data / "sites.csv"),
               "--obs", str(data / "obs.csv"), "--out", str(fitdir),
               "--basis", "none", "--rank", "0", "--seed", "0"])
    assert rc == 0
    assert (fitdir / "model.json").exists()
    report = (fitdir / "fit_report.txt").read_text()
    assert "log-likelihood:" in report

    preddir = tmp_path / "pred"
    rc = main(["predict", "--model", str(fitdir / "model.json"),
               "--sites", str(data / "sites.csv"),
               "--obs", str(data / "obs.csv"), "--out", str(preddir)])
    assert rc == 0
    lines = (preddir / "predictions.csv").read_text().strip().splitlines()
    assert lines[0].startswith("site_id,")
    assert len(lines) - 1 == 10 * 8  # full grid: sites x periods
    lta_lines = (preddir / "lta.csv").read_text().strip().splitlines()
    assert len(lta_lines) - 1 == 10


def test_fit_report_echoes_data_summary(tmp_path):
    data = _simulate(tmp_path, seed=5)
    fitdir = tmp_path / "fit"
    rc = main(["fit", "--sites", str(data / "sites.csv"),
               "--obs", str(data / "obs.csv"), "--out", str(fitdir),
               "--basis", "none", "--rank", "0"])
    assert rc == 0
    obs = read_observations(data / "obs.csv")
    want_mean = f"log-value mean: {np.mean(obs.values):.2f}"
    want_sd = f"log-value sd: {np.std(obs.values):.2f}"
    report = (fitdir / "fit_report.txt").read_text()
    assert want_mean in report and want_sd in report


def test_fit_outputs_deterministic(tmp_path):
    data = _simulate(tmp_path)
    outs = []
    for name in ("f1", "f2"):
        d = tmp_path / name
        rc = main(["fit", "--sites", str(data / "sites.csv"),
                   "--obs", str(data / "obs.csv"), "--out", str(d),
                   "--basis", "none", "--rank", "0", "--seed", "0"])
        assert rc == 0
        outs.append(d)
    assert ((outs[0] / "model.json").read_bytes()
            == (outs[1] / "model.json").read_bytes())
    assert ((outs[0] / "fit_report.txt").read_bytes()
            == (outs[1] / "fit_report.txt").read_bytes())


def test_cv_table_ranks_descending(tmp_path, capsys):
    data = _simulate(tmp_path, n_fixed=9, T=8)
    cvdir = tmp_path / "cv"
    rc = main(["cv", "--sites", str(data / "sites.csv"),
               "--obs", str(data / "obs.csv"), "--out", str(cvdir),
               "--basis", "lrk", "--range-mode", "fixed:max/4",
               "--set", "cv.ranks=[0,4]", "--set", "cv.folds=3",
               "--seed", "0"])
    assert rc == 0
    lines = (cvdir / "cv_table.csv").read_text().strip().splitlines()
    assert lines[0] == "basis_range,4,0"
    cells = lines[1].split(",")
    assert cells[0] == "lrk/fixed:max/4".split(",")[0]
    assert len(cells) == 3
    report = json.loads((cvdir / "cv_report.json").read_text())
    assert set(report["results"]) == {"0", "4"}
    for res in report["results"].values():
        assert "r2_2wk" in res["metrics"]
        assert all("train_fingerprint" in fi for fi in res["fold_info"])


def test_missing_input_file_fails_with_path(tmp_path, capsys):
    rc = main(["fit", "--sites", str(tmp_path / "nope.csv"),
               "--obs", str(tmp_path / "also_nope.csv"),
               "--out", str(tmp_path / "o")])
    assert rc == 1
    err = capsys.readouterr().err
    assert "nope.csv" in err


def test_unknown_config_key_is_a_usage_error(tmp_path, capsys):
    rc = main(["simulate", "--out", str(tmp_path / "o"),
               "--set", "model.bogus=1"])
    assert rc == 2
    assert "model.bogus" in capsys.readouterr().err


def test_config_file_and_set_overrides(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"sim": {"n_fixed": 6, "T": 8},
                               "model": {"basis": "none", "rank": 0}}))
    out = tmp_path / "o"
    rc = main(["simulate", "--config", str(cfg), "--out", str(out),
               "--set", "sim.n_fixed=4"])
    assert rc == 0
    sites = read_sites(out / "sites.csv")
    assert sites.n == 4  # --set wins over the config file


def test_bad_config_key_in_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"nonsense": 1}))
    rc = main(["simulate", "--config", str(cfg), "--out", str(tmp_path / "o")])
    assert rc == 2
    assert "nonsense" in capsys.readouterr().err


def test_predict_period_outside_grid_cleans_outputs(tmp_path, capsys):
    data = _simulate(tmp_path)
    fitdir = tmp_path / "fit"
    assert main(["fit", "--sites", str(data / "sites.csv"),
                 "--obs", str(data / "obs.csv"), "--out", str(fitdir),
                 "--basis", "none", "--rank", "0"]) == 0
    preddir = tmp_path / "pred"
    rc = main(["predict", "--model", str(fitdir / "model.json"),
               "--sites", str(data / "sites.csv"),
               "--obs", str(data / "obs.csv"), "--out", str(preddir),
               "--set", "predict.periods=999"])
    assert rc == 1
    assert "999" in capsys.readouterr().err
    assert not (preddir / "predictions.csv").exists()
    assert not (preddir / "lta.csv").exists()


def test_io_round_trip_byte_identical(tmp_path):
    data = _simulate(tmp_path, seed=9)
    sites = read_sites(data / "sites.csv")
    obs = read_observations(data / "obs.csv")
    write_sites(sites, tmp_path / "sites2.csv")
    write_observations(obs, tmp_path / "obs2.csv")
    assert (tmp_path / "sites2.csv").read_bytes() == (data / "sites.csv").read_bytes()
    assert (tmp_path / "obs2.csv").read_bytes() == (data / "obs.csv").read_bytes()


def test_bench_writes_table_and_slopes(tmp_path, capsys):
    out = tmp_path / "bench"
    rc = main(["bench", "--out", str(out), "--seed", "0",
               "--set", "bench.sizes=[12,24]", "--set", "bench.reps=1",
               "--set", "bench.T=4", "--set", "bench.rank=5"])
    assert rc == 0
    text = (out / "bench.csv").read_text()
    lines = text.strip().splitlines()
    assert lines[0] == "n,cell,K,nugget,median_seconds,error"
    cells = {(l.split(",")[1], l.split(",")[3])
             for l in lines[1:] if l and not l.startswith("slopes")
             and "," in l and l.split(",")[0].isdigit()}
    assert cells == {("full", "on"), ("full", "off"),
                     ("lowrank", "on"), ("lowrank", "off")}
    assert "slopes (log-log growth exponents):" in text
    for key in ("full_nugget_on", "full_nugget_off",
                "lowrank_nugget_on", "lowrank_nugget_off"):
        assert key in text


def test_tprs_fit_with_basis_dump(tmp_path):
    out = tmp_path / "d"
    rc = main(["simulate", "--out", str(out), "--seed", "1",
               "--basis", "tprs", "--rank", "5",
               "--set", "sim.n_fixed=10", "--set", "sim.T=8"])
    assert rc == 0
    fitdir = tmp_path / "fit"
    rc = main(["fit", "--sites", str(out / "sites.csv"),
               "--obs", str(out / "obs.csv"), "--out", str(fitdir),
               "--basis", "tprs", "--rank", "5", "--dump-basis"])
    assert rc == 0
    basis_lines = (fitdir / "basis.csv").read_text().strip().splitlines()
    assert len(basis_lines) - 1 == 10
