"""Finite-difference verification of the full training objective.

The gradient reversal layer makes the backward pass differ from the
gradient of the forward scalar on the encoder side. The reference is
therefore a pair of surrogate scalars: encoder parameters are checked
against ``tts - lam * w * ce`` and every other tensor against
``tts + w * ce``.
"""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .config import ModelConfig, TrainingConfig
from .data import Batch
from .model import TransformerTTS
from .prosody import gradient_reverse
from .training import tts_loss


@dataclass
class TensorCheck:
    name: str
    analytic: float
    numeric: float

    @property
    def rel_error(self) -> float:
        diff = abs(self.analytic - self.numeric)
        if diff < 1e-9:
            return 0.0
        return diff / max(abs(self.analytic), abs(self.numeric))


def random_batch(cfg: ModelConfig, lengths=(6, 4), text_lengths=(5, 3), seed: int = 0,
                 dtype=torch.float64) -> Batch:
    gen = torch.Generator().manual_seed(seed)
    b = len(lengths)
    t, l = max(lengths), max(text_lengths)
    tokens = torch.zeros(b, l, dtype=torch.long)
    for i, n in enumerate(text_lengths):
        tokens[i, :n] = torch.randint(3, 40, (n,), generator=gen)
        tokens[i, n - 1] = 2
    mel_lengths = torch.tensor(lengths)
    mask = torch.arange(t)[None] < mel_lengths[:, None]
    mels = torch.randn(b, t, cfg.mel_dim, generator=gen, dtype=dtype) * mask[..., None]
    stop = torch.zeros(b, t, dtype=dtype)
    stop[torch.arange(b), mel_lengths - 1] = 1.0
    speakers = torch.arange(b) % cfg.n_speakers
    return Batch(tokens, tokens != 0, mels, mel_lengths, mask, stop, speakers)


def objective_parts(model: TransformerTTS, batch: Batch, cfg: TrainingConfig, lam: float):
    codes = model.prosody_encoder(batch.mels, batch.mel_lengths)
    out = model.forward_teacher_forced(batch.tokens, batch.speakers, codes, batch.mels, batch.token_mask)
    tts, _ = tts_loss(out, batch.mels, batch.stop_targets, batch.mel_mask, cfg)
    ce = F.cross_entropy(model.speaker_classifier(gradient_reverse(codes, lam)), batch.speakers)
    return tts, ce


def check_gradients(model: TransformerTTS, batch: Batch, cfg: TrainingConfig, lam: float = 1.0,
                    h: float = 1e-4, directions: int = 2, seed: int = 0) -> list[TensorCheck]:
    """Compare backprop against central differences along random directions, per tensor."""
    model.train()
    w = cfg.w_adversarial
    model.zero_grad(set_to_none=True)
    tts, ce = objective_parts(model, batch, cfg, lam)
    (tts + w * ce).backward()
    grads = {n: (p.grad.clone() if p.grad is not None else torch.zeros_like(p)) for n, p in model.named_parameters()}

    def surrogate(encoder_side: bool) -> float:
        with torch.no_grad():
            tts, ce = objective_parts(model, batch, cfg, lam)
        sign = -lam if encoder_side else 1.0
        return float(tts + sign * w * ce)

    gen = torch.Generator().manual_seed(seed)
    results = []
    for name, p in model.named_parameters():
        encoder_side = name.startswith("prosody_encoder.")
        for k in range(directions):
            v = torch.randn(p.shape, generator=gen, dtype=p.dtype)
            v /= v.norm()
            with torch.no_grad():
                p.add_(h * v)
                up = surrogate(encoder_side)
                p.sub_(2 * h * v)
                down = surrogate(encoder_side)
                p.add_(h * v)
            results.append(TensorCheck(f"{name}[{k}]", float((grads[name] * v).sum()), (up - down) / (2 * h)))
    return results


def gradient_check_model(seed: int = 0) -> tuple[TransformerTTS, TrainingConfig]:
    """Miniature float64 model with dropout disabled, ready for :func:`check_gradients`."""
    torch.manual_seed(seed)
    cfg = ModelConfig.mini(dropout=0.0, prenet_dropout=0.0)
    model = TransformerTTS(cfg).double()
    return model, TrainingConfig(w_adversarial=1.0)
