"""Respiration from warps: a slow signal modulates beat timing, and we read it back.

A sinusoid stretches one half of every segment and compresses the other.
Aligning each segment to a common template recovers those warps, and a
linear map from warped time to the respiration window, trained on the
first half of the recording, predicts the second half.

    python demos/03_respiration.py
"""

import warnings

import numpy as np

from hdpgpc.io import align_to_template, dominant_period, respiration_fit, respiration_predict, synth_respiration

warnings.simplefilter("ignore")

period = 12.0
segments, windows, _ = synth_respiration(period=period)
warps = align_to_template(segments)
print(f"aligned {len(segments)} segments; warp deviation range "
      f"{min((g - s.t + s.t[0]).min() for g, s in zip(warps, segments)):.2f} to "
      f"{max((g - s.t + s.t[0]).max() for g, s in zip(warps, segments)):.2f} samples")

half = len(segments) // 2
model = respiration_fit(warps[:half], windows[:half])
width = len(windows[0])
pred = respiration_predict(model, warps[half:], smooth=width)
truth = np.concatenate(windows[half:])

print(f"held-out correlation {np.corrcoef(pred, truth)[0, 1]:.3f}")
print(f"dominant period {dominant_period(pred, spacing=1 / width):.2f} segments (true {period:.2f})")

# a coarse text trace of the first two periods
for i in range(0, int(2 * period * width), width // 2):
    bar = int(round(20 * (pred[i] + 1)))
    print(f"{i / width:5.1f} " + " " * max(bar, 0) + "*")
