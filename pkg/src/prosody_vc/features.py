"""Audio and text front-end.

Framing convention: the STFT is center-padded by ``n_fft // 2`` samples of
reflection on both sides, so a waveform of ``n`` samples yields
``1 + n // hop_length`` frames regardless of the window size.
"""
from __future__ import annotations

import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import signal
from scipy.io import wavfile

from .config import FeatureConfig


class AudioError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be positive, got {self.sample_rate}")
        if not np.all(np.isfinite(self.samples)):
            raise AudioError("waveform contains non-finite samples")

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass(frozen=True)
class MelSpectrogram:
    """Log-mel matrix of shape ``(T, n_mels)`` plus the framing it came from."""

    frames: np.ndarray
    hop_length: int
    win_length: int
    sample_rate: int

    def __post_init__(self):
        if self.frames.ndim != 2 or self.frames.shape[0] < 1:
            raise ValueError(f"mel frames must be a nonempty (T, n_mels) matrix, got {self.frames.shape}")
        if not np.all(np.isfinite(self.frames)):
            raise ValueError("mel spectrogram contains non-finite values")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


# ---------------------------------------------------------------------------
# waveform I/O

def load_waveform(path: str | Path, sample_rate: int | None = 24000) -> Waveform:
    """Read a linear-PCM WAV file as floats in [-1, 1].

    Integer PCM is mapped by dividing by ``2**(bits-1)``, so full-scale
    positive 16-bit audio becomes 32767/32768. Multichannel audio is averaged
    to mono. With ``sample_rate`` set, the audio is resampled to that rate.
    """
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise AudioError(f"{path}: no such file") from None
    except (ValueError, OSError) as exc:
        raise AudioError(f"{path}: unreadable or unsupported audio ({exc})") from None

    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        x = np.clip(data.astype(np.float64), -1.0, 1.0)
    else:
        raise AudioError(f"{path}: unsupported sample encoding {data.dtype}")
    if x.ndim == 2:
        x = x.mean(axis=1)
    if not np.all(np.isfinite(x)):
        raise AudioError(f"{path}: non-finite samples")

    if sample_rate is not None and rate != sample_rate:
        g = math.gcd(int(rate), int(sample_rate))
        x = signal.resample_poly(x, sample_rate // g, rate // g)
        x = np.clip(x, -1.0, 1.0)
        rate = sample_rate
    return Waveform(x, int(rate))


def save_waveform(path: str | Path, wav: Waveform) -> None:
    """Write 16-bit PCM. Samples are clipped to [-1, 1) first."""
    pcm = np.clip(np.round(wav.samples * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(Path(path), wav.sample_rate, pcm)


# ---------------------------------------------------------------------------
# spectral analysis

def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_band_centers(cfg: FeatureConfig) -> np.ndarray:
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    return pts[1:-1]


def mel_filterbank(cfg: FeatureConfig) -> np.ndarray:
    """Triangular filters of unit peak, shape ``(n_mels, n_fft // 2 + 1)``.

    Band edges are equally spaced on the HTK mel scale between ``f_min`` and
    ``f_max``.
    """
    freqs = np.linspace(0.0, cfg.sample_rate / 2, cfg.n_fft // 2 + 1)
    pts = mel_to_hz(np.linspace(hz_to_mel(cfg.f_min), hz_to_mel(cfg.f_max), cfg.n_mels + 2))
    lo, mid, hi = pts[:-2, None], pts[1:-1, None], pts[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(up, down))


def analysis_window(cfg: FeatureConfig) -> np.ndarray:
    """Periodic Hann window of ``win_length`` zero-padded to ``n_fft``, centered."""
    win = signal.get_window("hann", cfg.win_length, fftbins=True)
    left = (cfg.n_fft - cfg.win_length) // 2
    return np.pad(win, (left, cfg.n_fft - cfg.win_length - left))


def num_frames(n_samples: int, hop_length: int) -> int:
    return 1 + n_samples // hop_length


def stft(x: np.ndarray, cfg: FeatureConfig) -> np.ndarray:
    """Complex STFT with shape ``(T, n_fft // 2 + 1)``; center-padded by reflection."""
    pad = cfg.n_fft // 2
    n = num_frames(len(x), cfg.hop_length)
    if len(x) <= pad:
        # reflection needs more samples than the pad width
        x = np.pad(x, (0, pad + 1 - len(x)))
    padded = np.pad(x, pad, mode="reflect")
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.n_fft)[:: cfg.hop_length][:n]
    return np.fft.rfft(frames * analysis_window(cfg), axis=1)


def istft(spec: np.ndarray, cfg: FeatureConfig, length: int | None = None) -> np.ndarray:
    """Weighted overlap-add inverse of :func:`stft`."""
    win = analysis_window(cfg)
    frames = np.fft.irfft(spec, n=cfg.n_fft, axis=1) * win
    n_frames = spec.shape[0]
    total = cfg.n_fft + cfg.hop_length * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    for t in range(n_frames):
        s = t * cfg.hop_length
        out[s:s + cfg.n_fft] += frames[t]
        norm[s:s + cfg.n_fft] += win ** 2
    out /= np.where(norm > 1e-8, norm, 1.0)
    pad = cfg.n_fft // 2
    out = out[pad:]
    if length is None:
        length = cfg.hop_length * (n_frames - 1)
    out = out[:length]
    return np.pad(out, (0, max(0, length - len(out))))


def mel_spectrogram(w: Waveform, cfg: FeatureConfig | None = None) -> MelSpectrogram:
    """Natural-log mel magnitudes floored at ``cfg.log_floor``."""
    cfg = cfg or FeatureConfig()
    if w.sample_rate != cfg.sample_rate:
        raise AudioError(f"waveform rate {w.sample_rate} Hz does not match feature rate {cfg.sample_rate} Hz")
    if len(w) < cfg.win_length:
        raise AudioError(f"waveform has {len(w)} samples; at least win_length={cfg.win_length} are required")
    mag = np.abs(stft(np.asarray(w.samples, dtype=np.float64), cfg))
    mel = mag @ mel_filterbank(cfg).T
    frames = np.log(np.maximum(mel, cfg.log_floor))
    return MelSpectrogram(frames, cfg.hop_length, cfg.win_length, cfg.sample_rate)


# ---------------------------------------------------------------------------
# mel container
#
# layout (little-endian):
#   8 bytes  magic  b"PVCMEL\x00\x01"
#   6 x u32  version, n_frames, n_mels, sample_rate, hop_length, win_length
#   n_frames * n_mels float32, row-major

MEL_MAGIC = b"PVCMEL\x00\x01"
MEL_VERSION = 1
_MEL_HEADER = struct.Struct("<8s6I")


def save_mel(path: str | Path, mel: MelSpectrogram) -> None:
    t, d = mel.frames.shape
    with open(path, "wb") as fh:
        fh.write(_MEL_HEADER.pack(MEL_MAGIC, MEL_VERSION, t, d, mel.sample_rate, mel.hop_length, mel.win_length))
        fh.write(np.ascontiguousarray(mel.frames, dtype="<f4").tobytes())


def load_mel(path: str | Path) -> MelSpectrogram:
    raw = Path(path).read_bytes()
    if len(raw) < _MEL_HEADER.size:
        raise ValueError(f"{path}: truncated mel file")
    magic, version, t, d, sr, hop, win = _MEL_HEADER.unpack_from(raw)
    if magic != MEL_MAGIC:
        raise ValueError(f"{path}: not a mel container")
    if version > MEL_VERSION:
        raise ValueError(f"{path}: mel container version {version} is newer than supported {MEL_VERSION}")
    body = np.frombuffer(raw, dtype="<f4", offset=_MEL_HEADER.size)
    if body.size != t * d:
        raise ValueError(f"{path}: expected {t * d} values, found {body.size}")
    return MelSpectrogram(body.reshape(t, d).astype(np.float32), hop, win, sr)


# ---------------------------------------------------------------------------
# text

PAD, BOS, EOS = "<pad>", "<bos>", "<eos>"
SPECIALS = (PAD, BOS, EOS)
CHARACTERS = " '.,?!-;:" + "0123456789" + "abcdefghijklmnopqrstuvwxyz"
VOCAB: tuple[str, ...] = SPECIALS + tuple(CHARACTERS)
PAD_ID, BOS_ID, EOS_ID = 0, 1, 2
_CHAR_TO_ID = {c: i for i, c in enumerate(VOCAB)}


@dataclass(frozen=True)
class TextSequence:
    tokens: tuple[int, ...]

    def __post_init__(self):
        if not self.tokens or self.tokens[-1] != EOS_ID:
            raise ValueError("token sequence must end with EOS")
        bad = [t for t in self.tokens if not 0 <= t < len(VOCAB)]
        if bad:
            raise ValueError(f"token ids outside vocabulary: {bad}")

    @property
    def length(self) -> int:
        return len(self.tokens)

    def __len__(self):
        return len(self.tokens)


def normalize_text(text: str) -> str:
    return " ".join(text.lower().split())


def tokenize(text: str, add_bos: bool = False) -> TextSequence:
    norm = normalize_text(text)
    if not norm:
        raise VocabularyError("text is empty after normalization")
    missing = sorted({c for c in norm if c not in _CHAR_TO_ID})
    if missing:
        raise VocabularyError(f"characters outside vocabulary: {missing!r}")
    ids = [_CHAR_TO_ID[c] for c in norm] + [EOS_ID]
    if add_bos:
        ids.insert(0, BOS_ID)
    return TextSequence(tuple(ids))


def detokenize(seq: TextSequence) -> str:
    return "".join(VOCAB[t] for t in seq.tokens if t >= len(SPECIALS))
