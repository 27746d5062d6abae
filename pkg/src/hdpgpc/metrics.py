"""Clustering evaluation: purity, adjusted Rand index, occupied-cluster counts and the JSON report."""

import json
from collections import Counter

import numpy as np

__all__ = ["purity", "adjusted_rand_index", "cluster_count", "cluster_sizes", "metrics_report",
           "report_json"]

OCCUPANCY = 0.5
REPORT_DIGITS = 10


def _contingency(a, b):
    a = list(a)
    b = list(b)
    if len(a) != len(b):
        raise ValueError(f"length mismatch: {len(a)} vs {len(b)}")
    if not a:
        raise ValueError("empty assignment")
    ia = {v: i for i, v in enumerate(sorted(set(a), key=repr))}
    ib = {v: i for i, v in enumerate(sorted(set(b), key=repr))}
    table = np.zeros((len(ia), len(ib)), dtype=np.int64)
    for x, y in zip(a, b):
        table[ia[x], ib[y]] += 1
    return table


def purity(pred, truth):
    """Size-weighted majority-label fraction of the predicted clusters.

    Every segment needs a label; ``None`` entries are rejected.
    """
    truth = list(truth)
    if any(lab is None for lab in truth):
        raise ValueError("purity needs a label for every segment")
    table = _contingency(pred, truth)
    return float(table.max(axis=1).sum() / table.sum())


def _pairs(x):
    return x * (x - 1) // 2


def adjusted_rand_index(pred, truth):
    """Hubert-Arabie adjusted Rand index computed from the contingency table."""
    table = _contingency(pred, truth)
    n = int(table.sum())
    sum_ij = int(_pairs(table).sum())
    sum_a = int(_pairs(table.sum(axis=1)).sum())
    sum_b = int(_pairs(table.sum(axis=0)).sum())
    total = _pairs(n)
    expected = sum_a * sum_b / total if total else 0.0
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        # both partitions trivial (all singletons or one block): identical by construction
        return 1.0
    return float((sum_ij - expected) / (top - expected))


def cluster_sizes(model):
    """Expected number of segments per cluster, ``N_k = sum_n r_nk``."""
    return model.resp.r.sum(axis=0) if model.N else np.zeros(model.K)


def cluster_count(model, threshold=OCCUPANCY):
    """Clusters holding at least ``threshold`` expected segments (at least one if any exist)."""
    if model.K == 0:
        return 0
    return max(1, int(np.sum(cluster_sizes(model) >= threshold)))


def _r(x):
    return float(f"{float(x):.{REPORT_DIGITS}g}")


def metrics_report(model, labels=None, threshold=OCCUPANCY):
    """Dictionary of clustering metrics; labels enable purity and ARI."""
    assign = [int(k) for k in model.assignments()]
    sizes = cluster_sizes(model)
    rep = {
        "mode": model.mode,
        "n_segments": model.N,
        "K": cluster_count(model, threshold),
        "K_truncation": model.K,
        "cluster_sizes": [_r(s) for s in sizes],
        "hard_counts": {str(k): v for k, v in sorted(Counter(assign).items())},
        "elbo_trace": [_r(v) for v in model.elbo_trace],
        "converged": bool(model.converged),
        "n_iter": int(model.n_iter),
        "rejections": dict(sorted(model.rejections.items())),
    }
    if labels is not None and all(lab is not None for lab in labels):
        rep["purity"] = _r(purity(assign, labels))
        rep["ari"] = _r(adjusted_rand_index(assign, labels))
    return rep


def report_json(report):
    """Canonical JSON text: sorted keys, fixed separators, trailing newline."""
    return json.dumps(report, sort_keys=True, indent=2) + "\n"
