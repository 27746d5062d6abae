"""Off-line and on-line clustering of a labelled synthetic data set.

Three drifting morphologies switch by a Markov chain; each segment is
warped and noisy.  We fit both inference modes and compare them to the
ground truth.

    python demos/01_synthetic_clustering.py [seed]
"""

import sys
import time
import warnings

import numpy as np

from hdpgpc import InferenceConfig, adjusted_rand_index, cluster_count, fit_offline, fit_online, purity
from hdpgpc.io import synth_generate

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 0
segments = synth_generate(K_true=3, N=60, q=40, seed=seed)
labels = [s.label for s in segments]
print(f"{len(segments)} segments of {len(segments[0])} samples, true labels {sorted(set(labels))}")

warnings.simplefilter("ignore")  # iteration-cap and warp warnings are summarised below

t0 = time.perf_counter()
online = fit_online(segments, InferenceConfig(varrho=0.5))
print(f"\non-line single pass ({time.perf_counter() - t0:.1f}s)")
print(f"  clusters {cluster_count(online)}  purity {purity(online.assignments(), labels):.3f}"
      f"  ARI {adjusted_rand_index(online.assignments(), labels):.3f}")

t0 = time.perf_counter()
offline = fit_offline(segments, InferenceConfig())
print(f"\noff-line variational fit ({time.perf_counter() - t0:.1f}s, {offline.n_iter} iterations,"
      f" converged {offline.converged})")
print(f"  clusters {cluster_count(offline)}  purity {purity(offline.assignments(), labels):.3f}"
      f"  ARI {adjusted_rand_index(offline.assignments(), labels):.3f}")

trace = np.array(offline.elbo_trace)
print("  ELBO trace: " + " ".join(f"{v:.1f}" for v in trace))
print(f"  smallest step {np.diff(trace).min():.2e}")

# the learned transition structure: expected counts between consecutive clusters
# (row 0 of xi is the initial-state row, so it is dropped)
xi = offline.resp.xi[1:].sum(axis=0)[1:]
print("\nexpected transitions (row = from, column = to):")
for k, row in enumerate(xi):
    print(f"  {k}: " + " ".join(f"{v:5.1f}" for v in row))
