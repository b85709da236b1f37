import json
from collections import Counter

import pytest

from tramsched.cli import main


@pytest.fixture(scope="module")
def sim_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("sim")
    assert main(["simulate", "--seed", "3", "--riders", "200", "--runs", "40", "--out", str(out)]) == 0
    return out


@pytest.fixture(scope="module")
def fitted(sim_dir, tmp_path_factory):
    work = tmp_path_factory.mktemp("fit")
    db, store = work / "stations.json", work / "dists.json"
    assert main(["detect-stations", "--traces", str(sim_dir / "traces.csv"), "--db", str(db)]) == 0
    assert main(["fit-delays", "--traces", str(sim_dir / "traces.csv"), "--db", str(db),
                 "--network", str(sim_dir / "network.json"), "--store", str(store)]) == 0
    return work


def test_simulate_writes_artifacts(sim_dir):
    assert {p.name for p in sim_dir.iterdir()} >= {"traces.csv", "truth.json", "network.json"}
    truth = json.loads((sim_dir / "truth.json").read_text())
    assert len(truth["riders"]) == 200


def test_preprocess_report(sim_dir, tmp_path, capsys):
    rep = tmp_path / "rep.json"
    code = main(["preprocess", "--traces", str(sim_dir / "traces.csv"), "--out", str(tmp_path / "c.csv"),
                 "--report", str(rep)])
    assert code == 0
    d = json.loads(rep.read_text())
    assert 0.97 <= d["retention_ratio"] <= 0.995
    assert "retention" in capsys.readouterr().out


def test_preprocess_empty_input(tmp_path, capsys):
    src = tmp_path / "empty.csv"
    src.write_text("")
    rep = tmp_path / "rep.json"
    assert main(["preprocess", "--traces", str(src), "--out", str(tmp_path / "c.csv"), "--report", str(rep)]) == 0
    assert "undefined" in capsys.readouterr().out
    d = json.loads(rep.read_text())
    assert d["retention_ratio"] is None and d["warnings"]


def test_sweep(sim_dir, tmp_path):
    out, roc = tmp_path / "sweep.json", tmp_path / "roc.csv"
    assert main(["sweep", "--traces", str(sim_dir / "traces.csv"), "--truth", str(sim_dir / "truth.json"),
                 "--minpts", "10,20", "--eps", "0.0001,0.0002", "--dt", "0.0003",
                 "--out", str(out), "--roc", str(roc)]) == 0
    assert json.loads(out.read_text())["chosen"]
    assert len(roc.read_text().splitlines()) == 1 + 4


def test_detect_stations_scored(sim_dir, tmp_path):
    rep = tmp_path / "r.json"
    assert main(["detect-stations", "--traces", str(sim_dir / "traces.csv"), "--db", str(tmp_path / "db.json"),
                 "--truth", str(sim_dir / "truth.json"), "--report", str(rep)]) == 0
    score = json.loads(rep.read_text())["score"]
    assert score["recall"] >= 0.95


def test_fit_delays_store(fitted):
    rows = json.loads((fitted / "dists.json").read_text())
    kinds = {r["kind"] for r in rows}
    assert {"station_delay", "segment_time", "leg_time", "traffic_delay"} <= kinds


def test_eta_vehicle_view(sim_dir, fitted, tmp_path, capsys):
    net = json.loads((sim_dir / "network.json").read_text())
    s3 = next(p for p in net["places"] if p["id"] == "S3")
    rep = tmp_path / "eta.json"
    code = main(["eta", "--store", str(fitted / "dists.json"), "--network", str(sim_dir / "network.json"),
                 "--lat", str(s3["lat"]), "--lon", str(s3["lon"]), "--dest", "S4",
                 "--direction", "WestToEast", "--report", str(rep)])
    assert code == 0
    d = json.loads(rep.read_text())
    assert d["interval"][0] <= d["expected_s"] <= d["interval"][1]
    assert "S4" in capsys.readouterr().out


def test_eta_station_view(sim_dir, fitted, tmp_path):
    net = json.loads((sim_dir / "network.json").read_text())
    s3 = next(p for p in net["places"] if p["id"] == "S3")
    trams = tmp_path / "trams.json"
    trams.write_text(json.dumps([{"tram": "t1", "lat": s3["lat"], "lon": s3["lon"], "direction": "WestToEast"}]))
    rep = tmp_path / "sv.json"
    assert main(["eta", "--store", str(fitted / "dists.json"), "--network", str(sim_dir / "network.json"),
                 "--station", "S4", "--trams", str(trams), "--report", str(rep)]) == 0
    assert json.loads(rep.read_text())["tram"] == "t1"
    trams.write_text("[]")
    assert main(["eta", "--store", str(fitted / "dists.json"), "--network", str(sim_dir / "network.json"),
                 "--station", "S4", "--trams", str(trams)]) == 1


def test_eta_missing_store(sim_dir, tmp_path, capsys):
    missing = tmp_path / "nope.json"
    code = main(["eta", "--store", str(missing), "--network", str(sim_dir / "network.json"),
                 "--lat", "31.2", "--lon", "29.9", "--dest", "S5"])
    assert code == 2
    err = capsys.readouterr().err
    assert str(missing) in err and "fit-delays" in err


def test_distributions_csv(fitted, tmp_path):
    out = tmp_path / "grid.csv"
    assert main(["distributions", "--store", str(fitted / "dists.json"), "--points", "11", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "kind,element_ref,x_s,pdf,cdf"
    per = Counter(tuple(r.split(",")[:2]) for r in lines[1:])
    # zero-variance elements collapse to a single step row
    assert set(per.values()) <= {1, 11} and 11 in per.values()


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preprocess": {"windw": 3}}))
    code = main(["preprocess", "--config", str(cfg), "--traces", str(cfg), "--out", str(tmp_path / "o.csv")])
    assert code == 2
    assert "windw" in capsys.readouterr().err


def test_bad_override(tmp_path, capsys):
    code = main(["preprocess", "--set", "fit.alpha=0.5", "--traces", "x", "--out", str(tmp_path / "o.csv")])
    assert code == 2


def test_missing_trace_file(tmp_path, capsys):
    assert main(["preprocess", "--traces", str(tmp_path / "none.csv"), "--out", str(tmp_path / "o.csv")]) == 2
    assert "none.csv" in capsys.readouterr().err


def test_pipeline_rerun_identical(tmp_path):
    outs = []
    out = tmp_path / "run"
    for _ in range(2):
        assert main(["pipeline", "--seed", "2", "--riders", "150", "--out", str(out)]) == 0
        outs.append({p.name: p.read_bytes() for p in out.iterdir() if p.is_file()})
    assert set(outs[0]) >= {"cleaned.csv", "stations.json", "distributions.json", "report.json", "report.txt"}
    assert outs[0] == outs[1]


def test_pipeline_partial_report(tmp_path):
    bad = tmp_path / "net.json"
    bad.write_text("{}")
    traces = tmp_path / "t.csv"
    traces.write_text("")
    out = tmp_path / "o"
    code = main(["pipeline", "--traces", str(traces), "--network", str(bad), "--out", str(out)])
    assert code == 2
    rep = json.loads((out / "report.json").read_text())
    assert rep["status"] == "partial" and rep["failed_stage"] == "ingest"
