"""Feature frontends on a synthetic vowel: fixed log-mel vs learnable Gabor.

Run: python3 demos/01_frontend.py [out_dir]
"""

import sys
from pathlib import Path

import numpy as np

from spice.audio import AudioClip
from spice.data import Voice, synth_utterance
from spice.frontend import (
    gabor_backward,
    gabor_energies,
    gabor_forward,
    init_gabor_mel,
    logmel_forward,
    write_featuremap,
)

out_dir = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("demo_out")
out_dir.mkdir(exist_ok=True)

# a clean synthetic voice (degradation level 0)
voice = Voice(f0=130.0, formants=(520.0, 1400.0, 2600.0), bandwidths=(80.0, 90.0, 100.0))
x = synth_utterance(voice, 0, 1.5, np.random.default_rng(0))
clip = AudioClip(x, 16000, "demo")
print(f"clip: {clip.duration:.2f} s at {clip.sample_rate} Hz")

# fixed baseline
logmel = logmel_forward(clip, n_mels=40)
print(f"log-mel: {logmel.values.shape[0]} bands x {logmel.values.shape[1]} frames")

# learnable frontend at its mel initialization
params = init_gabor_mel(40, clip.sample_rate)
fm = gabor_forward(clip, params)
print(f"gabor/PCEN: {fm.values.shape[0]} channels x {fm.values.shape[1]} frames "
      f"at {fm.frame_rate:.0f} frames/s")

# the channel with the most energy should sit near the first formant
energies = gabor_energies(clip, params)
peak = int(np.argmax(energies.mean(axis=1)))
print(f"most energetic channel: {peak} (center {params.center_freqs[peak]:.0f} Hz, "
      f"F1 = {voice.formants[0]:.0f} Hz)")

# gradients for every learnable group, ready for an optimizer step
upstream = np.ones_like(fm.values)
grads = gabor_backward(clip, params, upstream)
for name, g in grads.items():
    print(f"  d/d {name}: |g| max {np.abs(g).max():.3e}")

write_featuremap(fm, out_dir / "frontend_demo.spfm")
print(f"wrote {out_dir / 'frontend_demo.spfm'}")

try:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
    axes[0].imshow(logmel.values, origin="lower", aspect="auto", cmap="magma")
    axes[0].set_title("log-mel baseline")
    axes[1].imshow(fm.values, origin="lower", aspect="auto", cmap="magma")
    axes[1].set_title("learnable Gabor + PCEN (at initialization)")
    axes[1].set_xlabel("frame")
    fig.tight_layout()
    fig.savefig(out_dir / "frontend_demo.png", dpi=120)
    print(f"wrote {out_dir / 'frontend_demo.png'}")
except ImportError:
    pass
