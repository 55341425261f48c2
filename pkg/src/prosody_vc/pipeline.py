"""Conversion path: transcript, optional prosody transfer, synthesis, waveform.

Speech recognition is an interface here. Anything with a
``transcribe(audio_path) -> str`` method can stand in for the recognizer.
"""
from __future__ import annotations

import shlex
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import FeatureConfig
from .features import (MelSpectrogram, Waveform, load_waveform, mel_filterbank, mel_spectrogram, normalize_text,
                       stft, istft, tokenize)
from .model import TransformerTTS
from .training import model_from_checkpoint


class ProviderError(RuntimeError):
    pass


class UnknownSpeakerError(KeyError):
    pass


class TranscriptProvider(Protocol):
    def transcribe(self, audio_path: str | Path) -> str: ...


class FileTranscriptProvider:
    """Looks transcripts up by utterance id (the audio file's stem).

    The file holds one ``<utterance id><TAB><text>`` pair per line.
    """

    def __init__(self, path: str | Path):
        self.table = {}
        for line in Path(path).read_text().splitlines():
            if not line.strip():
                continue
            uid, _, text = line.partition("\t")
            self.table[uid.strip()] = text.strip()

    def transcribe(self, audio_path):
        uid = Path(audio_path).stem
        if uid not in self.table:
            raise ProviderError(f"no transcript for utterance {uid!r}")
        return self.table[uid]


class CommandTranscriptProvider:
    """Runs an external recognizer and reads the transcript from its stdout.

    ``command`` is a shell-style template; ``{audio}`` is replaced by the path.
    """

    def __init__(self, command: str, timeout: float = 300.0):
        self.command = command
        self.timeout = timeout

    def transcribe(self, audio_path):
        argv = [a.replace("{audio}", str(audio_path)) for a in shlex.split(self.command)]
        try:
            proc = subprocess.run(argv, capture_output=True, text=True, timeout=self.timeout)
        except (OSError, subprocess.TimeoutExpired) as exc:
            raise ProviderError(f"recognizer command failed: {exc}") from None
        if proc.returncode != 0:
            raise ProviderError(f"recognizer exited with status {proc.returncode}: {proc.stderr.strip()[:200]}")
        return proc.stdout.strip()


@dataclass
class ConversionRequest:
    source: str | Path
    target_speaker: str
    transcript: str | None = None
    prosody_mode: str = "off"
    prosody_scale: float = 1.5
    max_decode_frames: int = 1000
    griffin_lim_iters: int = 60
    seed: int = 0

    def __post_init__(self):
        if self.prosody_mode not in ("off", "transfer"):
            raise ValueError("prosody_mode must be 'off' or 'transfer'")
        if not np.isfinite(self.prosody_scale):
            raise ValueError("prosody scale must be finite")


@dataclass
class ConversionResult:
    mel: MelSpectrogram
    waveform: Waveform
    metadata: dict = field(default_factory=dict)


def scale_code(code: torch.Tensor, s: float) -> torch.Tensor:
    if not np.isfinite(s):
        raise ValueError("scale must be finite")
    return code * s


@torch.no_grad()
def encode_prosody(model: TransformerTTS, mel: MelSpectrogram) -> torch.Tensor:
    """Prosody code of one utterance, computed in eval mode."""
    was = model.training
    model.eval()
    dtype = next(model.parameters()).dtype
    code = model.prosody_encoder(torch.as_tensor(mel.frames, dtype=dtype)[None])[0]
    model.train(was)
    return code


def griffin_lim(mel: MelSpectrogram | np.ndarray, iters: int = 60, cfg: FeatureConfig | None = None,
                seed: int = 0, normalize: bool = True) -> Waveform:
    """Waveform from a log-mel spectrogram by iterative phase reconstruction.

    The linear magnitude comes from the filterbank pseudo-inverse clamped at
    zero. With ``normalize`` the result is scaled to a peak of 0.95.
    """
    cfg = cfg or FeatureConfig()
    if iters < 1:
        raise ValueError("griffin_lim needs at least one iteration")
    frames = mel.frames if isinstance(mel, MelSpectrogram) else np.asarray(mel)
    fb = mel_filterbank(cfg)
    if frames.shape[1] != fb.shape[0]:
        raise ValueError(f"mel has {frames.shape[1]} bands, filterbank has {fb.shape[0]}")
    mag = np.maximum(np.exp(frames.astype(np.float64)) @ np.linalg.pinv(fb).T, 0.0)
    length = cfg.hop_length * (mag.shape[0] - 1)
    rng = np.random.default_rng(seed)
    phase = np.exp(2j * np.pi * rng.random(mag.shape))
    x = istft(mag * phase, cfg, length)
    for _ in range(iters):
        spec = stft(x, cfg)
        phase = spec / np.maximum(np.abs(spec), 1e-12)
        x = istft(mag * phase, cfg, length)
    peak = np.max(np.abs(x)) if len(x) else 0.0
    if normalize and peak > 0:
        x = x * (0.95 / peak)
    return Waveform(np.clip(x, -1.0, 1.0), cfg.sample_rate)


class Converter:
    """Holds a model loaded from a checkpoint; the checkpoint itself is never touched."""

    def __init__(self, ckpt: Checkpoint, feature_cfg: FeatureConfig | None = None,
                 provider: TranscriptProvider | None = None):
        self.speakers = list(ckpt.speakers)
        self.model = model_from_checkpoint(ckpt)
        self.model.eval()
        self.feature_cfg = feature_cfg or FeatureConfig(**ckpt.config.get("features", {}))
        self.provider = provider

    def speaker_id(self, name: str) -> torch.Tensor:
        if name not in self.speakers:
            raise UnknownSpeakerError(f"speaker {name!r} not in checkpoint (known: {', '.join(self.speakers)})")
        return torch.tensor(self.speakers.index(name))

    def transcript(self, req: ConversionRequest) -> str:
        if req.transcript is not None:
            text = req.transcript
        elif self.provider is None:
            raise ProviderError("no transcript given and no transcript provider configured")
        else:
            text = self.provider.transcribe(req.source)
        text = normalize_text(text)
        if not text:
            raise ProviderError("transcript provider returned empty text")
        return text

    def synthesize(self, text: str, speaker: str, code: torch.Tensor | None, max_frames: int = 1000,
                   seed: int = 0):
        tokens = torch.tensor(tokenize(text).tokens)
        return self.model.infer(tokens, self.speaker_id(speaker), code, max_frames=max_frames, seed=seed)

    def convert(self, req: ConversionRequest) -> ConversionResult:
        text = self.transcript(req)
        spk = self.speaker_id(req.target_speaker)
        code = None
        if req.prosody_mode == "transfer":
            source = load_waveform(req.source, self.feature_cfg.sample_rate)
            code = scale_code(encode_prosody(self.model, mel_spectrogram(source, self.feature_cfg)), req.prosody_scale)
        result = self.synthesize(text, req.target_speaker, code, req.max_decode_frames, req.seed)
        frames = result.mel.numpy()
        mel = MelSpectrogram(frames, self.feature_cfg.hop_length, self.feature_cfg.win_length,
                             self.feature_cfg.sample_rate)
        wav = griffin_lim(mel, req.griffin_lim_iters, self.feature_cfg, seed=req.seed)
        meta = {"transcript": text, "target_speaker": req.target_speaker, "speaker_index": int(spk),
                "prosody_mode": req.prosody_mode, "prosody_scale": req.prosody_scale if code is not None else None,
                "code_norm": float(code.norm()) if code is not None else None,
                "decode_frames": result.n_frames, "truncated": result.truncated}
        return ConversionResult(mel, wav, meta)


def convert(req: ConversionRequest, ckpt: Checkpoint, provider: TranscriptProvider | None = None,
            feature_cfg: FeatureConfig | None = None) -> ConversionResult:
    return Converter(ckpt, feature_cfg, provider).convert(req)


def sweep_scales(converter: Converter, text: str, speaker: str, code: torch.Tensor,
                 scales=(3.0, 1.5, 1.0, 0.0, -1.5, -3.0), max_frames: int = 1000, seed: int = 0) -> dict:
    """Synthesize one utterance with the prosody code multiplied by each scale.

    Returns ``{scale: InferenceResult}`` plus the prosody-off result under key ``None``.
    """
    out = {s: converter.synthesize(text, speaker, scale_code(code, s), max_frames, seed) for s in scales}
    out[None] = converter.synthesize(text, speaker, None, max_frames, seed)
    return out
