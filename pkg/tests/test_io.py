import json

import numpy as np
import pytest

from hdpgpc import io
from hdpgpc.inference import InferenceConfig, fit_online, predict_segment
from hdpgpc.io import Segment, SegmentFormatError


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


# ---------------------------------------------------------------- segment files


def test_two_row_csv_is_one_segment(tmp_path):
    p = _write(tmp_path, "a.csv", "segment_id,t,y\nx,0,1.5\nx,1,2.5\n")
    (seg,) = io.load_segments(p)
    assert seg.id == "x" and len(seg) == 2
    np.testing.assert_array_equal(seg.y, [1.5, 2.5])
    assert seg.label is None


def test_non_monotone_time_names_the_segment(tmp_path):
    p = _write(tmp_path, "a.csv", "segment_id,t,y\nok,0,1\nok,1,1\nbad7,0,1\nbad7,2,1\nbad7,1,1\n")
    with pytest.raises(SegmentFormatError, match="bad7"):
        io.load_segments(p)


def test_bad_header_and_fields_report_lines(tmp_path):
    with pytest.raises(SegmentFormatError, match="line 1"):
        io.load_segments(_write(tmp_path, "h.csv", "id,time,value\na,0,1\n"))
    with pytest.raises(SegmentFormatError, match="line 3"):
        io.load_segments(_write(tmp_path, "f.csv", "segment_id,t,y\na,0,1\na,1,oops\n"))


def test_conflicting_labels_rejected(tmp_path):
    p = _write(tmp_path, "l.csv", "segment_id,t,y,label\na,0,1,u\na,1,1,v\n")
    with pytest.raises(SegmentFormatError, match="conflicting"):
        io.load_segments(p)


def test_single_sample_segment_rejected(tmp_path):
    with pytest.raises(SegmentFormatError, match="two samples"):
        io.load_segments(_write(tmp_path, "s.csv", "segment_id,t,y\na,0,1\n"))


def test_jsonl_ragged_and_duplicate(tmp_path):
    with pytest.raises(SegmentFormatError, match="ragged"):
        io.load_segments(_write(tmp_path, "r.jsonl", '{"id": "a", "t": [0, 1], "y": [1]}\n'))
    row = '{"id": "a", "t": [0, 1], "y": [1, 2]}\n'
    with pytest.raises(SegmentFormatError, match="duplicate"):
        io.load_segments(_write(tmp_path, "d.jsonl", row + row))


@pytest.mark.parametrize("fmt", ["csv", "jsonl"])
def test_segment_roundtrip(tmp_path, fmt):
    segs = io.synth_generate(N=9, q=7, seed=3)
    path = tmp_path / f"s.{fmt}"
    io.save_segments(segs, path)
    back = io.load_segments(path)
    assert [s.id for s in back] == [s.id for s in segs]
    assert [s.label for s in back] == [s.label for s in segs]
    for a, b in zip(segs, back):
        np.testing.assert_array_equal(a.t, b.t)
        np.testing.assert_array_equal(a.y, b.y)
    streamed = list(io.iter_segments(path))
    assert [s.id for s in streamed] == [s.id for s in segs]


def test_streaming_reader_needs_contiguous_rows(tmp_path):
    p = _write(tmp_path, "c.csv", "segment_id,t,y\na,0,1\na,1,1\nb,0,1\nb,1,1\na,2,1\n")
    with pytest.raises(SegmentFormatError, match="contiguous"):
        list(io.iter_segments(p))


def test_atomic_write_leaves_no_temporaries(tmp_path):
    io.atomic_write_text(tmp_path / "out.txt", "hello\n")
    assert [p.name for p in tmp_path.iterdir()] == ["out.txt"]


# ---------------------------------------------------------------- synthetic data


def test_synth_is_deterministic_per_seed():
    a = io.synth_generate(N=20, q=16, seed=5)
    b = io.synth_generate(N=20, q=16, seed=5)
    c = io.synth_generate(N=20, q=16, seed=6)
    assert all(np.array_equal(x.y, y.y) and x.label == y.label for x, y in zip(a, b))
    assert not all(np.array_equal(x.y, y.y) for x, y in zip(a, c))


def test_synth_without_noise_drift_or_warp_repeats_each_shape():
    segs = io.synth_generate(N=30, q=20, noise=0.0, warp_strength=0.0, drift=0.0, seed=1)
    by_label = {}
    for s in segs:
        by_label.setdefault(s.label, []).append(s.y)
    assert len(by_label) == 3
    for ys in by_label.values():
        for y in ys[1:]:
            np.testing.assert_array_equal(y, ys[0])
    means = [ys[0] for ys in by_label.values()]
    gaps = [np.linalg.norm(a - b) for i, a in enumerate(means) for b in means[i + 1:]]
    assert min(gaps) > 0.5


# ---------------------------------------------------------------- model files


@pytest.fixture(scope="module")
def fitted():
    segs = io.synth_generate(N=12, q=16, seed=2)
    return segs, fit_online(segs, InferenceConfig(varrho=0.5, p_inducing=16))


def _flat(d):
    if isinstance(d, dict):
        return {k: _flat(v) for k, v in d.items()}
    if isinstance(d, list):
        return [_flat(v) for v in d]
    return d


def test_model_roundtrip(tmp_path, fitted):
    segs, model = fitted
    path = tmp_path / "m.json"
    io.save_model(model, path)
    back = io.load_model(path)
    assert back.K == model.K
    d0, d1 = io.model_to_dict(model), io.model_to_dict(back)
    assert d0.keys() == d1.keys()
    for k in ("clusters", "sticks"):
        assert json.dumps(d0[k], sort_keys=True) == json.dumps(d1[k], sort_keys=True)
    probe = segs[3]
    prev = int(model.assignments()[-1])
    p0 = predict_segment(model, probe, prev=prev)
    p1 = predict_segment(back, probe, prev=prev)
    np.testing.assert_allclose(p1.scores, p0.scores, rtol=0, atol=1e-10)
    np.testing.assert_allclose(p1.r, p0.r, rtol=0, atol=1e-10)


def test_model_with_no_clusters_rejected(fitted):
    doc = io.model_to_dict(fitted[1])
    doc["K"] = 0
    doc["clusters"] = []
    with pytest.raises(io.ModelFormatError, match="K"):
        io.model_from_dict(doc)


def test_model_version_checked(fitted):
    doc = io.model_to_dict(fitted[1])
    doc["version"] = "hdpgpc-model/999"
    with pytest.raises(io.ModelFormatError, match="version"):
        io.model_from_dict(doc)


def test_plot_and_warp_tables(fitted):
    segs, model = fitted
    plot = io.plot_data_csv(model).splitlines()
    assert plot[0] == "cluster,t,mean,lower,upper"
    rows = np.array([[float(x) for x in line.split(",")] for line in plot[1:]])
    assert np.all(rows[:, 3] <= rows[:, 2]) and np.all(rows[:, 2] <= rows[:, 4])
    warps = io.warps_csv(model, segs).splitlines()
    assert warps[0] == "segment_id,cluster,t,g"
    assert len(warps) == 1 + sum(len(s) for s in segs)


# ---------------------------------------------------------------- respiration


def test_exact_linear_map_recovered():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 10))
    W = rng.normal(size=(30, 10))
    model = io.respiration_fit(list(W), list(W @ M.T))
    np.testing.assert_allclose(model.M_w, M, atol=1e-10)
    assert model.window == 4 and model.n_train == 30


def test_single_pair_reproduced():
    w = np.linspace(0, 1, 6)
    r = np.array([0.3, -0.1, 0.7])
    model = io.respiration_fit([w], [r])
    np.testing.assert_allclose(io.respiration_predict(model, [w]), r, atol=1e-12)


def test_identity_warps_predict_a_constant_pattern():
    rng = np.random.default_rng(1)
    model = io.RespirationModel(rng.normal(size=(3, 8)), 5, 3)
    t = np.arange(8.0)
    out = io.respiration_predict(model, [t] * 4).reshape(4, 3)
    np.testing.assert_allclose(out, np.tile(out[0], (4, 1)), atol=0)


def test_respiration_shape_errors():
    model = io.respiration_fit([np.ones(5)], [np.ones(2)])
    with pytest.raises(ValueError, match="expects 5"):
        io.respiration_predict(model, [np.ones(4)])
    with pytest.raises(ValueError, match="warps but"):
        io.respiration_fit([np.ones(5)] * 2, [np.ones(2)])


def test_respiration_model_dict_roundtrip():
    model = io.respiration_fit([np.arange(4.0), np.ones(4)], [np.ones(2), np.zeros(2)])
    back = io.RespirationModel.from_dict(json.loads(json.dumps(model.to_dict())))
    np.testing.assert_array_equal(back.M_w, model.M_w)


def test_smoothing_keeps_constants():
    model = io.RespirationModel(np.ones((2, 3)), 1, 2)
    out = io.respiration_predict(model, [np.ones(3)] * 5, smooth=4)
    np.testing.assert_allclose(out, 3.0)


def test_dominant_period():
    x = np.sin(2 * np.pi * np.arange(480) / 12.0 / 8.0)
    assert io.dominant_period(x, spacing=1 / 8) == pytest.approx(12.0)
