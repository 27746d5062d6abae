"""Streaming use: segments arrive one at a time and clusters are born on demand.

The first segments of a new morphology cannot be explained by existing
clusters, so a fresh one is spawned.  Past assignments never change.

    python demos/02_streaming.py
"""

import warnings

import numpy as np

from hdpgpc import InferenceConfig, predict_segment, stream_online
from hdpgpc.io import synth_generate

warnings.simplefilter("ignore")

segments = synth_generate(K_true=3, N=40, q=30, seed=3)
config = InferenceConfig(varrho=0.5)

K_seen = 0
for seg, model in stream_online(segments, config):
    k = int(np.argmax(model.r[-1]))
    note = ""
    if model.K > K_seen:
        note = f"  <- cluster {model.K - 1} born"
        K_seen = model.K
    print(f"{seg.id} (true {seg.label}) -> cluster {k}  r={model.r[-1, k]:.3f}{note}")

# score a fresh segment without touching the model
probe = synth_generate(K_true=3, N=40, q=30, seed=3, noise=0.05)[-1]
pred = predict_segment(model, probe, prev=int(model.assignments()[-1]))
print(f"\nheld-out {probe.id} (true {probe.label}): responsibilities "
      + " ".join(f"{r:.3f}" for r in pred.r))
