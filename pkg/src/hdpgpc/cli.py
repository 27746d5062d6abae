"""Command-line interface: ``hdpgpc fit|stream|synth|resp|report``.

Exit codes: 0 success (and, for fits, convergence), 1 bad input, 2 a fit
that stopped at its iteration cap.
"""

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import io
from .inference import InferenceConfig, fit_offline, fit_online, stream_online
from .metrics import metrics_report, report_json

log = logging.getLogger("hdpgpc")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2


def _config(path, **defaults):
    d = dict(defaults)
    if path:
        with open(path) as fh:
            d.update(json.load(fh))
    return InferenceConfig.from_dict(d)


def _write_run(out, model, segments, plot_data):
    out = Path(out)
    io.save_model(model, out / "model.json")
    trace = "iteration,elbo\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(model.elbo_trace))
    io.atomic_write_text(out / "elbo_trace.csv", trace)
    labels = [s.label for s in segments]
    report = metrics_report(model, labels if all(lab is not None for lab in labels) else None)
    io.atomic_write_text(out / "metrics.json", report_json(report))
    rows = ["segment_id,cluster," + ",".join(f"r{k}" for k in range(model.K))]
    for seg, k, r in zip(segments, model.assignments(), model.r):
        rows.append(f"{seg.id},{int(k)}," + ",".join(repr(float(x)) for x in r))
    io.atomic_write_text(out / "assignments.csv", "\n".join(rows) + "\n")
    io.atomic_write_text(out / "warps.csv", io.warps_csv(model, segments))
    if plot_data:
        io.atomic_write_text(out / "plot_data.csv", io.plot_data_csv(model))
    return report


def _finish(model, report):
    print(f"K={report['K']} converged={report['converged']} iterations={report['n_iter']}"
          + (f" purity={report['purity']:.4f} ari={report['ari']:.4f}" if "ari" in report else ""))
    return EXIT_OK if model.converged else EXIT_NOT_CONVERGED


def cmd_fit(args):
    segments = io.load_segments(args.segments, args.format)
    if not segments:
        raise io.SegmentFormatError(f"{args.segments}: no segments")
    model = fit_offline(segments, _config(args.config))
    return _finish(model, _write_run(args.out, model, segments, args.plot_data))


def cmd_stream(args):
    config = _config(args.config, varrho=0.5)
    seen, model = [], None
    for seg, model in stream_online(io.iter_segments(args.segments, args.format), config):
        seen.append(seg)
        log.info("segment %s -> cluster %d (K=%d)", seg.id, int(np.argmax(model.r[-1])), model.K)
    if model is None:
        raise io.SegmentFormatError(f"{args.segments}: no segments")
    # same finishing step as fit_online: smoothed chains so the bound is defined
    from .inference import _bound, _finalize

    _finalize(model, seen)
    model.elbo_trace = [_bound(model)["total"]]
    model.converged, model.n_iter = True, 1
    return _finish(model, _write_run(args.out, model, seen, args.plot_data))


def cmd_synth(args):
    segs = io.synth_generate(K_true=args.K, N=args.N, q=args.q, noise=args.noise,
                             warp_strength=args.warp_strength, seed=args.seed)
    io.save_segments(segs, args.out, args.format)
    print(f"wrote {len(segs)} segments to {args.out}")
    return EXIT_OK


def _read_vectors(path, value_col):
    """Group a CSV with a ``segment_id`` column into per-segment vectors of ``value_col``."""
    groups = {}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "segment_id" not in reader.fieldnames or value_col not in reader.fieldnames:
            raise io.SegmentFormatError(f"{path}: need columns segment_id and {value_col}")
        for lineno, row in enumerate(reader, start=2):
            try:
                groups.setdefault(row["segment_id"], []).append(float(row[value_col]))
            except ValueError:
                raise io.SegmentFormatError(f"{path}: line {lineno}: {value_col} must be numeric") from None
    return list(groups), [np.array(v) for v in groups.values()]


def cmd_resp(args):
    ids, warps = _read_vectors(args.warps, "g")
    if args.action == "fit":
        rid, resp = _read_vectors(args.resp, "value")
        lookup = dict(zip(rid, resp))
        missing = [i for i in ids if i not in lookup]
        if missing:
            raise io.SegmentFormatError(f"{args.resp}: no respiration window for segments {missing[:5]}")
        model = io.respiration_fit(warps, [lookup[i] for i in ids])
        io.atomic_write_text(args.out, json.dumps(model.to_dict(), sort_keys=True) + "\n")
        print(f"fitted M_w {model.M_w.shape} on {model.n_train} windows")
    else:
        with open(args.model) as fh:
            model = io.RespirationModel.from_dict(json.load(fh))
        signal = io.respiration_predict(model, warps, smooth=args.smooth)
        io.atomic_write_text(args.out, "index,value\n" + "".join(f"{i},{float(v)!r}\n" for i, v in enumerate(signal)))
        print(f"wrote {len(signal)} samples to {args.out}")
    return EXIT_OK


def cmd_report(args):
    with open(Path(args.run) / "metrics.json") as fh:
        report = json.load(fh)
    if args.json:
        sys.stdout.write(report_json(report))
        return EXIT_OK
    print(f"mode: {report['mode']}  segments: {report['n_segments']}  clusters: {report['K']}"
          f" (truncation {report['K_truncation']})")
    print("sizes: " + ", ".join(f"{s:.2f}" for s in report["cluster_sizes"]))
    if "purity" in report:
        print(f"purity: {report['purity']:.4f}  ARI: {report['ari']:.4f}")
    trace = report["elbo_trace"]
    if trace:
        print(f"ELBO: {trace[0]:.4f} -> {trace[-1]:.4f} over {len(trace)} entries; converged: {report['converged']}")
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="hdpgpc", description="Dynamical clustering of time-series segments.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def fit_args(sp):
        sp.add_argument("segments", help="CSV (segment_id,t,y[,label]) or JSONL segment file")
        sp.add_argument("--config", help="JSON file with InferenceConfig fields")
        sp.add_argument("--format", choices=["csv", "jsonl"])
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--plot-data", action="store_true", help="also write per-cluster mean and 95%% bands")

    fit_args(sub.add_parser("fit", help="off-line variational inference"))
    fit_args(sub.add_parser("stream", help="on-line single-pass inference"))

    sp = sub.add_parser("synth", help="write a labelled synthetic data set")
    sp.add_argument("--out", required=True)
    sp.add_argument("--format", choices=["csv", "jsonl"])
    sp.add_argument("--K", type=int, default=3)
    sp.add_argument("--N", type=int, default=60)
    sp.add_argument("--q", type=int, default=40)
    sp.add_argument("--noise", type=float, default=0.02)
    sp.add_argument("--warp-strength", type=float, default=0.1)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("resp", help="respiration reconstruction from warps")
    rs = sp.add_subparsers(dest="action", required=True)
    f = rs.add_parser("fit")
    f.add_argument("--warps", required=True, help="CSV with segment_id and g columns (e.g. warps.csv of a run)")
    f.add_argument("--resp", required=True, help="CSV with segment_id and value columns")
    f.add_argument("--out", required=True)
    pr = rs.add_parser("predict")
    pr.add_argument("--model", required=True)
    pr.add_argument("--warps", required=True)
    pr.add_argument("--smooth", type=int, default=1)
    pr.add_argument("--out", required=True)

    sp = sub.add_parser("report", help="summarise a run directory")
    sp.add_argument("run")
    sp.add_argument("--json", action="store_true")
    return p


COMMANDS = {"fit": cmd_fit, "stream": cmd_stream, "synth": cmd_synth, "resp": cmd_resp, "report": cmd_report}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except (io.SegmentFormatError, io.ModelFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
