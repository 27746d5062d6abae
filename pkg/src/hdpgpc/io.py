"""Segments, file formats, model persistence, synthetic data and respiration reconstruction."""

import csv
import json
import math
import os
import tempfile
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .gp import gp_condition
from .kernel import KernelParams, fit_hyperparams
from .warp import map_warp, segment_warp

__all__ = [
    "Segment",
    "SegmentFormatError",
    "ModelFormatError",
    "load_segments",
    "iter_segments",
    "save_segments",
    "save_model",
    "load_model",
    "model_to_dict",
    "model_from_dict",
    "SynthSpec",
    "synth_generate",
    "RespirationModel",
    "respiration_fit",
    "respiration_predict",
    "align_to_template",
    "synth_respiration",
    "dominant_period",
    "plot_data_csv",
    "warps_csv",
    "atomic_write_text",
]

MODEL_VERSION = "hdpgpc-model/1"


class SegmentFormatError(ValueError):
    """Malformed segment input; the message names the line or segment."""


class ModelFormatError(ValueError):
    """Model file with the wrong version tag or a broken schema."""


@dataclass(frozen=True)
class Segment:
    id: str
    t: np.ndarray
    y: np.ndarray
    label: str = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=float)
        y = np.asarray(self.y, dtype=float)
        if t.ndim != 1 or t.shape != y.shape:
            raise SegmentFormatError(f"segment {self.id!r}: t and y must be vectors of equal length")
        if len(t) < 2:
            raise SegmentFormatError(f"segment {self.id!r}: needs at least two samples")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(y))):
            raise SegmentFormatError(f"segment {self.id!r}: non-finite values")
        if np.any(np.diff(t) <= 0):
            raise SegmentFormatError(f"segment {self.id!r}: t is not strictly increasing")
        object.__setattr__(self, "id", str(self.id))
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return len(self.t)


def atomic_write_text(path, text):
    """Write ``text`` to ``path`` through a temporary file and a rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x):
    return repr(float(x))


def _load_csv(path):
    groups, order, labels = {}, [], {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            return []
        header = [h.strip() for h in header]
        if header[:3] != ["segment_id", "t", "y"] or len(header) > 4 or (len(header) == 4 and header[3] != "label"):
            raise SegmentFormatError(f"{path}: line 1: expected header segment_id,t,y[,label]")
        has_label = len(header) == 4
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SegmentFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            try:
                t, y = float(row[1]), float(row[2])
            except ValueError:
                raise SegmentFormatError(f"{path}: line {lineno}: t and y must be numeric") from None
            if sid not in groups:
                groups[sid] = []
                order.append(sid)
            groups[sid].append((t, y))
            if has_label:
                lab = row[3] or None
                if sid in labels and labels[sid] != lab:
                    raise SegmentFormatError(f"{path}: line {lineno}: segment {sid!r} has conflicting labels")
                labels[sid] = lab
    segs = []
    for sid in order:
        arr = np.array(groups[sid])
        segs.append(Segment(sid, arr[:, 0], arr[:, 1], labels.get(sid)))
    return segs


def _load_jsonl(path):
    segs = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                sid, t, y = obj["id"], obj["t"], obj["y"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise SegmentFormatError(f"{path}: line {lineno}: {exc}") from None
            if len(t) != len(y):
                raise SegmentFormatError(f"{path}: line {lineno}: segment {sid!r} is ragged "
                                         f"({len(t)} times, {len(y)} values)")
            if sid in seen:
                raise SegmentFormatError(f"{path}: line {lineno}: duplicate segment id {sid!r}")
            seen.add(sid)
            segs.append(Segment(sid, t, y, obj.get("label")))
    return segs


def load_segments(path, format=None):
    """Read segments from CSV (``segment_id,t,y[,label]``) or JSONL."""
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "jsonl":
        return _load_jsonl(path)
    raise ValueError(f"unknown format {fmt!r}")


def _iter_csv(path):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if not header:
            return
        if header[:3] != ["segment_id", "t", "y"] or len(header) > 4:
            raise SegmentFormatError(f"{path}: line 1: expected header segment_id,t,y[,label]")
        seen, sid, rows, lab = set(), None, [], None
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SegmentFormatError(f"{path}: line {lineno}: expected {len(header)} fields, got {len(row)}")
            if row[0] != sid:
                if sid is not None:
                    arr = np.array(rows)
                    yield Segment(sid, arr[:, 0], arr[:, 1], lab)
                if row[0] in seen:
                    raise SegmentFormatError(f"{path}: line {lineno}: rows of segment {row[0]!r} are not contiguous")
                sid, rows = row[0], []
                seen.add(sid)
                lab = (row[3] or None) if len(header) == 4 else None
            try:
                rows.append((float(row[1]), float(row[2])))
            except ValueError:
                raise SegmentFormatError(f"{path}: line {lineno}: t and y must be numeric") from None
        if sid is not None:
            arr = np.array(rows)
            yield Segment(sid, arr[:, 0], arr[:, 1], lab)


def iter_segments(path, format=None):
    """Yield segments one at a time; CSV rows of a segment must be contiguous."""
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt == "csv":
        yield from _iter_csv(path)
    elif fmt == "jsonl":
        seen = set()
        with open(path) as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                    sid, t, y = obj["id"], obj["t"], obj["y"]
                except (json.JSONDecodeError, KeyError, TypeError) as exc:
                    raise SegmentFormatError(f"{path}: line {lineno}: {exc}") from None
                if len(t) != len(y):
                    raise SegmentFormatError(f"{path}: line {lineno}: segment {sid!r} is ragged")
                if sid in seen:
                    raise SegmentFormatError(f"{path}: line {lineno}: duplicate segment id {sid!r}")
                seen.add(sid)
                yield Segment(sid, t, y, obj.get("label"))
    else:
        raise ValueError(f"unknown format {fmt!r}")


def save_segments(segments, path, format=None):
    path = Path(path)
    fmt = format or ("jsonl" if path.suffix in (".jsonl", ".json") else "csv")
    if fmt == "csv":
        has_label = any(s.label is not None for s in segments)
        lines = ["segment_id,t,y,label" if has_label else "segment_id,t,y"]
        for s in segments:
            for t, y in zip(s.t, s.y):
                row = [s.id, _fmt(t), _fmt(y)] + ([s.label or ""] if has_label else [])
                lines.append(",".join(row))
        atomic_write_text(path, "\n".join(lines) + "\n")
    elif fmt == "jsonl":
        lines = []
        for s in segments:
            obj = {"id": s.id, "t": s.t.tolist(), "y": s.y.tolist()}
            if s.label is not None:
                obj["label"] = s.label
            lines.append(json.dumps(obj))
        atomic_write_text(path, "\n".join(lines) + "\n")
    else:
        raise ValueError(f"unknown format {fmt!r}")


@dataclass(frozen=True)
class SynthSpec:
    """Forward simulation of switching, drifting, warped morphologies."""

    K_true: int = 3
    N: int = 60
    q: int = 40
    noise: float = 0.02
    warp_strength: float = 0.1
    drift: float = 0.005
    alpha: float = 5.0
    seed: int = 0


def _smooth_field(rng, n, length, size=None):
    x = np.arange(n, dtype=float)
    K = np.exp(-0.5 * ((x[:, None] - x[None, :]) / length) ** 2) + 1e-8 * np.eye(n)
    L = np.linalg.cholesky(K)
    z = rng.standard_normal((n,) if size is None else (size, n))
    return z @ L.T


def _morphology(k, K, q, rng):
    t = np.arange(q, dtype=float)
    width = q / 14.0
    centre = q * (k + 1) / (K + 1)
    f = np.exp(-0.5 * ((t - centre) / width) ** 2)
    # a secondary feature of random sign and place keeps shapes non-trivial
    c2 = rng.uniform(0.15, 0.85) * q
    f += rng.choice([-0.4, 0.4]) * np.exp(-0.5 * ((t - c2) / (1.5 * width)) ** 2)
    return f


def _label_sequence(spec, rng):
    K, N = spec.K_true, spec.N
    need = max(1, min(N // (2 * K), N // K))
    for _ in range(1000):
        pi = rng.dirichlet(np.full(K, spec.alpha / K), size=K + 1)
        s = np.empty(N, dtype=int)
        s[0] = rng.choice(K, p=pi[0])
        for n in range(1, N):
            s[n] = rng.choice(K, p=pi[s[n - 1] + 1])
        if np.all(np.bincount(s, minlength=K) >= need):
            return s
    raise RuntimeError("could not draw a balanced label sequence")


def synth_generate(spec=None, **overrides):
    """Labelled segments drawn from a switching, drifting, warped generative story.

    Cluster ``k`` has a latent morphology on ``q`` samples that evolves as a
    random walk (``A = I``) with smooth increments of size ``drift``.  Each
    segment picks its cluster by Markov switching, is read off the latent
    mean at a smooth random warp of strength ``warp_strength`` and gets
    white noise of standard deviation ``noise``.
    """
    spec = SynthSpec(**overrides) if spec is None else spec
    rng = np.random.default_rng(spec.seed)
    q, K = spec.q, spec.K_true
    t = np.arange(q, dtype=float)
    latent = np.array([_morphology(k, K, q, rng) for k in range(K)])
    labels = _label_sequence(spec, rng)
    segments = []
    for n, k in enumerate(labels):
        if spec.drift > 0:
            latent += spec.drift * _smooth_field(rng, q, q / 8.0, size=K)
        if spec.warp_strength > 0:
            a = spec.warp_strength * _smooth_field(rng, q, q / 4.0)
            g = segment_warp(a, t).g
        else:
            g = t
        y = np.interp(g, t, latent[k])
        if spec.noise > 0:
            y = y + spec.noise * rng.standard_normal(q)
        segments.append(Segment(f"s{n:04d}", t.copy(), y, f"c{k}"))
    return segments


# ---------------------------------------------------------------- model files


def _arr(x):
    return np.asarray(x, dtype=float).tolist()


def _mniw_dict(post):
    return {"M": _arr(post.M), "V": _arr(post.V), "S": _arr(post.S), "dof": float(post.dof)}


def _mniw_from(d):
    from .lds import MNIWPosterior

    return MNIWPosterior(np.array(d["M"], dtype=float), np.array(d["V"], dtype=float),
                         np.array(d["S"], dtype=float), float(d["dof"]))


def _theta_dict(th):
    return {"sigma_f": th.sigma_f, "length_scale": th.length_scale, "sigma_n": th.sigma_n}


def model_to_dict(model):
    """JSON-ready description of a fitted model (no per-segment state)."""
    from .inference import latest_belief

    clusters = []
    for c in model.clusters:
        mean, cov = latest_belief(c)
        clusters.append({
            "theta": _theta_dict(c.theta),
            "inducing": _arr(c.inducing.locations),
            "nugget": c.inducing.nugget,
            "K0": _arr(c.K0),
            "dyn": _mniw_dict(c.dyn),
            "emis": _mniw_dict(c.emis),
            "belief_mean": _arr(mean),
            "belief_cov": _arr(cov),
            "N_k": float(c.N_k),
            "born": int(c.born),
        })
    return {
        "version": MODEL_VERSION,
        "mode": model.mode,
        "config": model.config.to_dict(),
        "priors": {"dyn": _mniw_dict(model.priors.dyn), "emis": _mniw_dict(model.priors.emis),
                   "theta_init": _theta_dict(model.priors.theta_init)},
        "K": model.K,
        "clusters": clusters,
        "sticks": {"lam": _arr(model.sticks.lam), "eta": _arr(model.sticks.eta)},
        "kappa": _arr(model.trans.kappa),
        "elbo_trace": [float(v) for v in model.elbo_trace],
        "converged": bool(model.converged),
        "n_iter": int(model.n_iter),
    }


def model_from_dict(doc):
    """Inverse of ``model_to_dict``; the result can score new segments."""
    from .gp import InducingSet
    from .hdp import StickPosterior, TransitionPosterior
    from .inference import ClusterState, InferenceConfig, LDSPriors, ModelState, Responsibilities
    from .kernel import KernelParams

    if not isinstance(doc, dict) or doc.get("version") != MODEL_VERSION:
        found = doc.get("version") if isinstance(doc, dict) else None
        raise ModelFormatError(f"unsupported model version {found!r} (expected {MODEL_VERSION!r})")
    try:
        K = int(doc["K"])
        if K < 1 or len(doc["clusters"]) != K:
            raise ModelFormatError(f"model must hold K >= 1 clusters matching its list (K={K})")
        config = InferenceConfig.from_dict(doc["config"])
        pr = doc["priors"]
        priors = LDSPriors(_mniw_from(pr["dyn"]), _mniw_from(pr["emis"]), KernelParams(**pr["theta_init"]))
        clusters = []
        for cd in doc["clusters"]:
            theta = KernelParams(**cd["theta"])
            ind = InducingSet(np.array(cd["inducing"], dtype=float), theta, nugget=float(cd["nugget"]))
            c = ClusterState(theta, ind, None, None, None, None, None, None, np.array(cd["K0"], dtype=float),
                             N_k=float(cd["N_k"]), born=int(cd["born"]))
            c.set_posteriors(_mniw_from(cd["dyn"]), _mniw_from(cd["emis"]), config.noise_convention)
            c.filt_mean = np.array(cd["belief_mean"], dtype=float)
            c.filt_cov = np.array(cd["belief_cov"], dtype=float)
            clusters.append(c)
        sticks = StickPosterior(np.array(doc["sticks"]["lam"]), np.array(doc["sticks"]["eta"]))
        trans = TransitionPosterior(np.array(doc["kappa"], dtype=float))
        if sticks.K != K or trans.K != K:
            raise ModelFormatError("HDP posteriors do not match K")
        resp = Responsibilities(np.zeros((0, K)), np.zeros((0, K + 1, K)))
        return ModelState(config, priors, clusters, sticks, trans, resp, [],
                          elbo_trace=list(doc.get("elbo_trace", [])), converged=bool(doc.get("converged")),
                          n_iter=int(doc.get("n_iter", 0)), mode=doc.get("mode", "offline"))
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ModelFormatError(f"malformed model file: {exc}") from None


def save_model(model, path):
    atomic_write_text(path, json.dumps(model_to_dict(model), sort_keys=True) + "\n")


def load_model(path):
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ModelFormatError(f"{path}: not JSON ({exc})") from None
    return model_from_dict(doc)


# ---------------------------------------------------------------- exports


def plot_data_csv(model):
    """Per-cluster latest mean with a 95% band on the inducing grid, as CSV text."""
    from .inference import latest_belief

    lines = ["cluster,t,mean,lower,upper"]
    for k, c in enumerate(model.clusters):
        mean, cov = latest_belief(c)
        x = c.C @ mean
        sd = np.sqrt(np.maximum(np.diag(c.C @ cov @ c.C.T + c.E), 0.0))
        for t, m, s in zip(c.inducing.locations, x, sd):
            lines.append(",".join([str(k), _fmt(t), _fmt(m), _fmt(m - 1.96 * s), _fmt(m + 1.96 * s)]))
    return "\n".join(lines) + "\n"


def warps_csv(model, segments):
    """Warped times of each segment under its most responsible cluster (relative frame)."""
    from .inference import _warp_g

    lines = ["segment_id,cluster,t,g"]
    for n, (seg, k) in enumerate(zip(segments, model.assignments())):
        g = _warp_g(model, n, int(k), seg)
        for t, gv in zip(seg.t - seg.t[0], g):
            lines.append(",".join([seg.id, str(int(k)), _fmt(t), _fmt(gv)]))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- respiration


@dataclass(frozen=True)
class RespirationModel:
    """Linear map from a warped-time vector to the respiration window of the same segment."""

    M_w: np.ndarray
    n_train: int
    window: int

    def to_dict(self):
        return {"M_w": _arr(self.M_w), "n_train": self.n_train, "window": self.window}

    @classmethod
    def from_dict(cls, d):
        M = np.array(d["M_w"], dtype=float)
        return cls(M, int(d["n_train"]), int(d["window"]))


def _stack(vectors, what):
    vs = [np.asarray(v, dtype=float) for v in vectors]
    if not vs:
        raise ValueError(f"need at least one {what}")
    if len({v.shape for v in vs}) != 1 or vs[0].ndim != 1:
        raise ValueError(f"all {what} must be vectors of one length")
    return np.vstack(vs)


def respiration_fit(warps, resp_segments):
    """Least-squares ``M_w`` with ``r_n = M_w t^w_n``; minimum norm when underdetermined."""
    W = _stack(warps, "warps")
    Rr = _stack(resp_segments, "respiration windows")
    if len(W) != len(Rr):
        raise ValueError(f"{len(W)} warps but {len(Rr)} respiration windows")
    sol, *_ = np.linalg.lstsq(W, Rr, rcond=None)
    return RespirationModel(sol.T, len(W), Rr.shape[1])


def respiration_predict(model, warps, smooth=1):
    """Per-window predictions stitched end to end, then a centred moving average of width ``smooth``."""
    W = _stack(warps, "warps")
    if W.shape[1] != model.M_w.shape[1]:
        raise ValueError(f"warps have {W.shape[1]} samples, model expects {model.M_w.shape[1]}")
    signal = (W @ model.M_w.T).ravel()
    if smooth <= 1:
        return signal
    kernel = np.ones(int(smooth))
    # normalise by the in-range count so the ends are not pulled toward zero
    return np.convolve(signal, kernel, mode="same") / np.convolve(np.ones_like(signal), kernel, mode="same")


def align_to_template(segments, p_inducing=32, max_iter=40, vartheta=(1.0, 4.0, 1.0), nugget=1e-6):
    """MAP warps of equal-length segments against their pointwise mean.

    The template is a GP fitted to the mean segment and read off at
    ``p_inducing`` evenly spaced support points.  Returns one warped-time
    vector per segment, ready for :func:`respiration_fit`.
    """
    if not segments:
        raise ValueError("need at least one segment")
    t = segments[0].t - segments[0].t[0]
    if any(len(s) != len(t) for s in segments):
        raise ValueError("segments must share one length")
    ybar = np.mean([s.y for s in segments], axis=0)
    init = KernelParams(float(ybar.std()) or 1.0, 3.0 * float(np.mean(np.diff(t))), 0.05)
    theta = fit_hyperparams(t, segments[0].y - segments[0].y.mean(), init)
    belief = gp_condition(theta, t, ybar, np.linspace(0.0, t[-1], p_inducing))
    vt = KernelParams(*vartheta)
    return [map_warp(s.t - s.t[0], s.y, belief, theta, vt, max_iter=max_iter, nugget=nugget).warp.g
            for s in segments]


def synth_respiration(n_segments=240, q=40, window=8, period=12.0, depth=0.35, noise=0.01, seed=0):
    """Segments whose warps are driven by a sinusoidal respiration signal.

    Segment ``n`` spans one unit of slow time; the respiration level at its
    start stretches one half of the segment and compresses the other.
    Returns ``(segments, resp_windows, template)`` where ``resp_windows[n]``
    holds ``window`` respiration samples across segment ``n``.
    """
    rng = np.random.default_rng(seed)
    t = np.arange(q, dtype=float)
    template = _morphology(0, 1, q, rng)
    ramp = np.linspace(-0.5, 0.5, q)
    segments, windows = [], []
    for n in range(n_segments):
        level = math.sin(2.0 * math.pi * n / period)
        g = segment_warp(depth * level * ramp, t).g
        y = np.interp(g, t, template) + noise * rng.standard_normal(q)
        segments.append(Segment(f"r{n:04d}", t + n * q, y))
        tau = n + np.arange(window) / window
        windows.append(np.sin(2.0 * math.pi * tau / period))
    return segments, windows, template


def dominant_period(signal, spacing=1.0):
    """Period of the strongest non-zero frequency in ``signal`` (FFT peak)."""
    x = np.asarray(signal, dtype=float)
    x = x - x.mean()
    power = np.abs(np.fft.rfft(x)) ** 2
    freqs = np.fft.rfftfreq(len(x), d=spacing)
    k = 1 + int(np.argmax(power[1:]))
    return 1.0 / freqs[k]
