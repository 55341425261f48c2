"""Bundled audio.

``clip.wav`` is 24 kHz 16-bit PCM produced by
``synthesize_speech("the red cat sat on the warm mat", pseudo_speakers(1)[0], pitch_range=0.3)``.
"""
from importlib.resources import files
from pathlib import Path


def clip_path() -> Path:
    return Path(str(files(__name__) / "clip.wav"))
