"""
Log-mel features and characters
===============================

Load the bundled clip, look at its log-mel spectrogram, and turn a sentence
into the token ids the synthesizer reads. Run from anywhere::

    python3 demos/01_features.py

A PNG of the spectrogram lands in ``demo_out/``.
"""
from pathlib import Path

import numpy as np

from prosody_vc.assets import clip_path
from prosody_vc.config import FeatureConfig
from prosody_vc.features import VOCAB, load_waveform, mel_spectrogram, tokenize
from prosody_vc.plotting import plot_mel

out = Path("demo_out")
out.mkdir(exist_ok=True)
cfg = FeatureConfig()

wav = load_waveform(clip_path(), cfg.sample_rate)
print(f"{len(wav)} samples at {wav.sample_rate} Hz = {len(wav) / wav.sample_rate:.2f} s")

# 300-sample hop at 24 kHz is 12.5 ms per frame; center padding adds one frame.
mel = mel_spectrogram(wav, cfg)
print("mel frames:", mel.frames.shape, "expected", 1 + len(wav) // cfg.hop_length)
print("log floor:", np.log(cfg.log_floor), " min in clip:", mel.frames.min().round(3))

loudest = mel.frames.mean(axis=0).argmax()
print("band with most energy on average:", loudest)

plot_mel(mel.frames, out / "clip_mel.png", "bundled clip", cfg.hop_length / cfg.sample_rate)

# Text side: lowercase, collapse spaces, append end-of-sequence.
seq = tokenize("The red cat.")
print(seq.tokens)
print("".join(VOCAB[i] if len(VOCAB[i]) == 1 else "|" for i in seq.tokens))
