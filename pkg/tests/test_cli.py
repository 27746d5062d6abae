import json

import numpy as np
import pytest

from hdpgpc import io
from hdpgpc.cli import EXIT_INPUT, EXIT_NOT_CONVERGED, EXIT_OK, main


@pytest.fixture(scope="module")
def data(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    path = d / "segs.csv"
    assert main(["synth", "--out", str(path), "--N", "12", "--q", "16", "--seed", "4"]) == EXIT_OK
    return d, path


def test_synth_writes_labelled_file(data):
    _, path = data
    segs = io.load_segments(path)
    assert len(segs) == 12 and all(s.label for s in segs)


def test_stream_writes_run_and_reports(data, capsys):
    d, path = data
    out = d / "stream"
    assert main(["stream", str(path), "--out", str(out), "--plot-data"]) == EXIT_OK
    for name in ("model.json", "elbo_trace.csv", "metrics.json", "assignments.csv", "warps.csv", "plot_data.csv"):
        assert (out / name).exists(), name
    rep = json.loads((out / "metrics.json").read_text())
    assert rep["mode"] == "online" and rep["n_segments"] == 12
    assert main(["report", str(out)]) == EXIT_OK
    assert "clusters:" in capsys.readouterr().out
    assert main(["report", str(out), "--json"]) == EXIT_OK
    assert capsys.readouterr().out == (out / "metrics.json").read_text()


def test_fit_with_config_and_iteration_cap(data, tmp_path):
    _, path = data
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max_iter": 1}))
    code = main(["fit", str(path), "--config", str(cfg), "--out", str(tmp_path / "run")])
    assert code == EXIT_NOT_CONVERGED
    assert json.loads((tmp_path / "run" / "metrics.json").read_text())["converged"] is False


def test_bad_inputs_exit_one(tmp_path, capsys):
    bad = tmp_path / "bad.csv"
    bad.write_text("segment_id,t,y\na,1,0\na,0,0\n")
    assert main(["fit", str(bad), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    assert "'a'" in capsys.readouterr().err
    assert main(["fit", str(tmp_path / "missing.csv"), "--out", str(tmp_path / "o")]) == EXIT_INPUT
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"no_such_field": 1}))
    good = tmp_path / "good.csv"
    good.write_text("segment_id,t,y\na,0,0\na,1,1\n")
    assert main(["fit", str(good), "--config", str(cfg), "--out", str(tmp_path / "o")]) == EXIT_INPUT


def test_resp_fit_and_predict(tmp_path):
    rng = np.random.default_rng(0)
    M = rng.normal(size=(3, 5))
    warps = ["segment_id,cluster,t,g"]
    resp = ["segment_id,value"]
    for n in range(12):
        g = np.sort(rng.uniform(0, 4, 5))
        warps += [f"w{n},0,{i},{float(v)!r}" for i, v in enumerate(g)]
        resp += [f"w{n},{float(v)!r}" for v in M @ g]
    (tmp_path / "w.csv").write_text("\n".join(warps) + "\n")
    (tmp_path / "r.csv").write_text("\n".join(resp) + "\n")
    model_path, pred = tmp_path / "m.json", tmp_path / "p.csv"
    assert main(["resp", "fit", "--warps", str(tmp_path / "w.csv"), "--resp", str(tmp_path / "r.csv"),
                 "--out", str(model_path)]) == EXIT_OK
    assert main(["resp", "predict", "--model", str(model_path), "--warps", str(tmp_path / "w.csv"),
                 "--out", str(pred)]) == EXIT_OK
    got = np.loadtxt(pred, delimiter=",", skiprows=1)[:, 1]
    want = np.loadtxt(tmp_path / "r.csv", delimiter=",", skiprows=1, usecols=1)
    np.testing.assert_allclose(got, want, atol=1e-9)


def test_resp_missing_window_is_input_error(tmp_path):
    (tmp_path / "w.csv").write_text("segment_id,g\na,0\na,1\nb,0\nb,1\n")
    (tmp_path / "r.csv").write_text("segment_id,value\na,1\n")
    code = main(["resp", "fit", "--warps", str(tmp_path / "w.csv"), "--resp", str(tmp_path / "r.csv"),
                 "--out", str(tmp_path / "m.json")])
    assert code == EXIT_INPUT
