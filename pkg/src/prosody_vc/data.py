"""Corpora, batching, and a synthetic multi-speaker corpus.

The synthetic corpus stands in for a real multi-speaker recording set. Each
pseudo-speaker has its own pitch, vocal-tract scale and tempo; each
utterance draws its own pitch range and rate, which gives the prosody
encoder something utterance-level to capture.
"""
from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import FeatureConfig
from .features import (PAD_ID, Waveform, load_waveform, mel_spectrogram, normalize_text, save_waveform,
                       tokenize)


@dataclass
class Utterance:
    utt_id: str
    speaker: str
    text: str
    mel: np.ndarray  # (T, n_mels) float32
    tokens: tuple[int, ...] = ()
    audio_path: str | None = None

    def __post_init__(self):
        if not self.tokens:
            self.tokens = tokenize(self.text).tokens


@dataclass
class Corpus:
    utterances: list[Utterance]
    speakers: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.speakers:
            self.speakers = sorted({u.speaker for u in self.utterances})

    def __len__(self):
        return len(self.utterances)

    def by_speaker(self, speaker: str) -> "Corpus":
        return Corpus([u for u in self.utterances if u.speaker == speaker], [speaker])

    def __getitem__(self, i):
        return self.utterances[i]


@dataclass
class Batch:
    tokens: torch.Tensor       # (B, L) long
    token_mask: torch.Tensor   # (B, L) bool
    mels: torch.Tensor         # (B, T, D)
    mel_lengths: torch.Tensor  # (B,) long
    mel_mask: torch.Tensor     # (B, T) bool
    stop_targets: torch.Tensor  # (B, T), 1.0 on each utterance's final frame
    speakers: torch.Tensor     # (B,) long

    def to(self, dtype) -> "Batch":
        return Batch(self.tokens, self.token_mask, self.mels.to(dtype), self.mel_lengths, self.mel_mask,
                     self.stop_targets.to(dtype), self.speakers)


def collate(utts: list[Utterance], speaker_index: dict[str, int], pad_frames: int = 0,
            dtype=torch.float32) -> Batch:
    """Pad a list of utterances into one batch. ``pad_frames`` adds extra padding at the end."""
    b = len(utts)
    max_l = max(len(u.tokens) for u in utts)
    max_t = max(u.mel.shape[0] for u in utts) + pad_frames
    dim = utts[0].mel.shape[1]
    tokens = torch.full((b, max_l), PAD_ID, dtype=torch.long)
    mels = torch.zeros(b, max_t, dim, dtype=dtype)
    lengths = torch.zeros(b, dtype=torch.long)
    for i, u in enumerate(utts):
        tokens[i, : len(u.tokens)] = torch.tensor(u.tokens)
        mels[i, : u.mel.shape[0]] = torch.as_tensor(u.mel, dtype=dtype)
        lengths[i] = u.mel.shape[0]
    mel_mask = torch.arange(max_t)[None, :] < lengths[:, None]
    stop = torch.zeros(b, max_t, dtype=dtype)
    stop[torch.arange(b), lengths - 1] = 1.0
    speakers = torch.tensor([speaker_index[u.speaker] for u in utts], dtype=torch.long)
    return Batch(tokens, tokens != PAD_ID, mels, lengths, mel_mask, stop, speakers)


class BatchSampler:
    """Endless shuffled batches; reshuffles after each pass over the corpus."""

    def __init__(self, corpus: Corpus, batch_size: int, speaker_index: dict[str, int], seed: int = 0,
                 dtype=torch.float32):
        if len(corpus) == 0:
            raise ValueError("corpus is empty")
        self.corpus = corpus
        self.batch_size = min(batch_size, len(corpus))
        self.speaker_index = speaker_index
        self.rng = np.random.default_rng(seed)
        self.dtype = dtype
        self._order: list[int] = []

    def next(self) -> Batch:
        if len(self._order) < self.batch_size:
            self._order = list(self.rng.permutation(len(self.corpus)))
        idx, self._order = self._order[: self.batch_size], self._order[self.batch_size:]
        return collate([self.corpus[i] for i in idx], self.speaker_index, dtype=self.dtype)


# ---------------------------------------------------------------------------
# manifests

MANIFEST_FIELDS = ("utterance_id", "audio_path", "transcript", "speaker_id")


def load_manifest(path: str | Path, feature_cfg: FeatureConfig | None = None) -> Corpus:
    """Read a CSV of ``utterance_id, audio_path, transcript, speaker_id``.

    Relative audio paths resolve against the manifest's directory.
    """
    feature_cfg = feature_cfg or FeatureConfig()
    path = Path(path)
    utts = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_FIELDS) - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: manifest lacks columns {sorted(missing)}")
        for row in reader:
            audio = Path(row["audio_path"])
            if not audio.is_absolute():
                audio = path.parent / audio
            wav = load_waveform(audio, feature_cfg.sample_rate)
            mel = mel_spectrogram(wav, feature_cfg).frames.astype(np.float32)
            utts.append(Utterance(row["utterance_id"], row["speaker_id"], normalize_text(row["transcript"]),
                                  mel, audio_path=str(audio)))
    if not utts:
        raise ValueError(f"{path}: manifest has no rows")
    return Corpus(utts)


def write_manifest(path: str | Path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_FIELDS)
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# synthetic speech

WORDS = ("the", "a", "red", "cat", "sat", "on", "mat", "blue", "dog", "ran", "home", "sun", "is",
         "warm", "we", "go", "now", "big", "tree", "sea")


def _char_formants(c: str) -> tuple[float, float]:
    h = hashlib.sha256(c.encode()).digest()
    f1 = 300.0 + 500.0 * h[0] / 255.0
    f2 = 900.0 + 1600.0 * h[1] / 255.0
    return f1, f2


@dataclass(frozen=True)
class PseudoSpeaker:
    name: str
    f0: float
    formant_scale: float
    tempo: float


def pseudo_speakers(n: int, seed: int = 0) -> list[PseudoSpeaker]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        out.append(PseudoSpeaker(f"spk{i}", f0=float(rng.uniform(90, 240)),
                                 formant_scale=float(rng.uniform(0.85, 1.2)),
                                 tempo=float(rng.uniform(0.85, 1.15))))
    return out


def synthesize_speech(text: str, speaker: PseudoSpeaker, sample_rate: int = 24000,
                      pitch_range: float = 0.15, rate: float = 1.0, char_dur: float = 0.055) -> np.ndarray:
    """Deterministic harmonic "speech": one formant-shaped segment per character.

    Spaces are short near-silences, the pitch glides downward over the
    utterance by ``pitch_range`` (a fraction of f0), and ``rate`` scales the
    tempo on top of the speaker's own.
    """
    seg_dur = char_dur / (speaker.tempo * rate)
    chars = list(normalize_text(text))
    total = int(round(seg_dur * sample_rate)) * len(chars) + sample_rate // 10
    n_seg = int(round(seg_dur * sample_rate))
    out = np.zeros(total)
    t_all = np.arange(total) / sample_rate
    f0_curve = speaker.f0 * (1.0 + pitch_range * (0.5 - t_all / max(t_all[-1], 1e-9)))
    phase = 2 * np.pi * np.cumsum(f0_curve) / sample_rate
    env = np.hanning(n_seg)
    for i, c in enumerate(chars):
        if c == " " or not c.isalnum():
            continue
        f1, f2 = (f * speaker.formant_scale for f in _char_formants(c))
        s = i * n_seg
        seg_phase = phase[s:s + n_seg]
        f0_here = f0_curve[s:s + n_seg].mean()
        seg = np.zeros(n_seg)
        for k in range(1, int(7600 // f0_here) + 1):
            fk = k * f0_here
            gain = 1.0 / (1.0 + ((fk - f1) / 90.0) ** 2) + 0.6 / (1.0 + ((fk - f2) / 120.0) ** 2)
            seg += gain * np.sin(k * seg_phase)
        out[s:s + n_seg] += env * seg
    peak = np.max(np.abs(out))
    if peak > 0:
        out *= 0.5 / peak
    return out


def synthetic_corpus(n_speakers: int = 2, utts_per_speaker: int = 5, seed: int = 0,
                     feature_cfg: FeatureConfig | None = None, words: tuple[int, int] = (2, 3),
                     keep_audio: bool = False) -> Corpus:
    """Build a reproducible multi-speaker corpus with templated transcripts."""
    feature_cfg = feature_cfg or FeatureConfig()
    rng = np.random.default_rng(seed + 7919)
    utts = []
    audio = {}
    for spk in pseudo_speakers(n_speakers, seed):
        for j in range(utts_per_speaker):
            n_words = int(rng.integers(words[0], words[1] + 1))
            text = " ".join(rng.choice(WORDS, size=n_words))
            x = synthesize_speech(text, spk, feature_cfg.sample_rate,
                                  pitch_range=float(rng.uniform(0.0, 0.4)), rate=float(rng.uniform(0.8, 1.25)))
            wav = Waveform(x, feature_cfg.sample_rate)
            uid = f"{spk.name}_{j:03d}"
            mel = mel_spectrogram(wav, feature_cfg).frames.astype(np.float32)
            utts.append(Utterance(uid, spk.name, text, mel))
            if keep_audio:
                audio[uid] = wav
    corpus = Corpus(utts)
    if keep_audio:
        corpus.audio = audio
    return corpus


def write_synthetic_corpus(out_dir: str | Path, n_speakers: int = 2, utts_per_speaker: int = 5,
                           seed: int = 0, feature_cfg: FeatureConfig | None = None) -> Path:
    """Write WAVs, a manifest and a transcript file for the synthetic corpus; returns the manifest."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = synthetic_corpus(n_speakers, utts_per_speaker, seed, feature_cfg, keep_audio=True)
    rows = []
    for u in corpus.utterances:
        rel = f"{u.utt_id}.wav"
        save_waveform(out_dir / rel, corpus.audio[u.utt_id])
        rows.append((u.utt_id, rel, u.text, u.speaker))
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, rows)
    with open(out_dir / "transcripts.txt", "w") as fh:
        for u in corpus.utterances:
            fh.write(f"{u.utt_id}\t{u.text}\n")
    return manifest
