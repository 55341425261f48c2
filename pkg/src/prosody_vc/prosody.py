"""Utterance-level prosody code and its speaker-adversarial training.

The reference encoder squeezes a mel spectrogram into one vector. A speaker
classifier reads that vector through a gradient reversal layer, so
minimising the classifier loss pushes the encoder to drop speaker identity.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn.functional as F
from torch import nn


class FrozenModuleError(RuntimeError):
    pass


def _conv_out(n: int) -> int:
    # kernel 3, stride 2, padding 1
    return (n - 1) // 2 + 1


class ReferenceEncoder(nn.Module):
    """Six stride-2 3x3 convolutions over (time, mel), a GRU over time, and a linear head.

    Frames past each utterance's length are zeroed after every convolution,
    so padding a batch does not leak into the code.
    """

    def __init__(self, mel_dim: int, filters=(32, 32, 64, 64, 128, 128), gru_width: int = 128, code_dim: int = 128):
        super().__init__()
        chans = (1,) + tuple(filters)
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, stride=2, padding=1) for a, b in zip(chans[:-1], chans[1:]))
        freq = mel_dim
        for _ in filters:
            freq = _conv_out(freq)
        self.gru = nn.GRU(filters[-1] * freq, gru_width, batch_first=True)
        self.proj = nn.Linear(gru_width, code_dim)
        self.code_dim = code_dim
        self.frozen = False

    @staticmethod
    def parameter_count(mel_dim, filters, gru_width, code_dim) -> int:
        chans = (1,) + tuple(filters)
        n = sum(a * b * 9 + b for a, b in zip(chans[:-1], chans[1:]))
        freq = mel_dim
        for _ in filters:
            freq = _conv_out(freq)
        gru_in = filters[-1] * freq
        n += 3 * (gru_in * gru_width + gru_width * gru_width + 2 * gru_width)
        return n + gru_width * code_dim + code_dim

    def forward(self, mel: torch.Tensor, lengths: torch.Tensor | None = None) -> torch.Tensor:
        """``(B, T, mel_dim)`` mels to ``(B, code_dim)`` codes."""
        if mel.dim() == 2:
            mel = mel[None]
        if mel.shape[1] == 0:
            raise ValueError("cannot encode prosody of an empty mel spectrogram")
        b, t, _ = mel.shape
        if lengths is None:
            lengths = torch.full((b,), t, dtype=torch.long)
        valid = torch.arange(t)[None, :] < lengths[:, None]
        x = (mel * valid[..., None].to(mel.dtype))[:, None]
        for conv in self.convs:
            x = F.relu(conv(x))
            lengths = (lengths - 1) // 2 + 1
            valid = torch.arange(x.shape[2])[None, :] < lengths[:, None]
            x = x * valid[:, None, :, None].to(x.dtype)
        x = x.permute(0, 2, 1, 3).reshape(b, x.shape[2], -1)
        out, _ = self.gru(x)
        last = out[torch.arange(b), lengths - 1]
        return self.proj(last)

    def requires_grad_(self, requires_grad: bool = True):
        if self.frozen and requires_grad:
            raise FrozenModuleError("the prosody encoder is frozen for fine-tuning and cannot be unfrozen")
        return super().requires_grad_(requires_grad)


class SpeakerClassifier(nn.Module):
    """ReLU MLP from a prosody code to speaker logits."""

    def __init__(self, code_dim: int, n_speakers: int, n_layers: int = 3, width: int = 512):
        super().__init__()
        if n_speakers < 2:
            raise ValueError("speaker classifier needs at least 2 speakers")
        dims = [code_dim] + [width] * n_layers
        self.hidden = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))
        self.output = nn.Linear(width, n_speakers)
        self.code_dim = code_dim

    @staticmethod
    def parameter_count(code_dim, n_speakers, n_layers, width) -> int:
        return code_dim * width + width + (n_layers - 1) * (width * width + width) + width * n_speakers + n_speakers

    def forward(self, code: torch.Tensor) -> torch.Tensor:
        if code.shape[-1] != self.code_dim:
            raise ValueError(f"classifier expects {self.code_dim}-dim codes, got {code.shape[-1]}")
        x = code
        for layer in self.hidden:
            x = F.relu(layer(x))
        return self.output(x)


def classify_speaker(code: torch.Tensor, classifier: SpeakerClassifier) -> torch.Tensor:
    return torch.softmax(classifier(code), dim=-1)


class _GradientReversal(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, lam):
        ctx.lam = lam
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad):
        return grad * -ctx.lam, None


def gradient_reverse(x: torch.Tensor, lam: float = 1.0) -> torch.Tensor:
    """Identity forward; multiplies the incoming gradient by ``-lam`` on the way back."""
    if lam < 0:
        raise ValueError(f"gradient reversal strength must be nonnegative, got {lam}")
    return _GradientReversal.apply(x, float(lam))


@dataclass
class AdversarialSchedule:
    """Call counter: the classifier updates every call, the encoder every ``ratio``-th."""

    ratio: int = 4
    calls: int = 0
    classifier_updates: int = 0
    encoder_updates: int = 0

    def encoder_turn(self) -> bool:
        return (self.calls + 1) % self.ratio == 0

    def state_dict(self) -> dict:
        return dict(ratio=self.ratio, calls=self.calls, classifier_updates=self.classifier_updates,
                    encoder_updates=self.encoder_updates)


def adversarial_step(
    encoder: Callable,
    classifier: SpeakerClassifier,
    inputs,
    labels: torch.Tensor,
    schedule: AdversarialSchedule,
    encoder_opt: torch.optim.Optimizer,
    classifier_opt: torch.optim.Optimizer,
    lam: float = 1.0,
    weight: float = 1.0,
    joint_loss: Callable | None = None,
    clip_norm: float | None = None,
) -> dict:
    """One call of the adversarial schedule.

    ``encoder(inputs)`` must return ``(B, code_dim)`` codes. On classifier-only
    calls the codes are computed without gradient and only the classifier
    moves. On the encoder's turn the loss is ``weight * CE`` read through the
    reversal layer, plus ``joint_loss(codes)`` when given (which returns a
    scalar and a dict of logged components); both optimizers then step.
    """
    encoder_turn = schedule.encoder_turn()
    if encoder_turn:
        codes = encoder(inputs)
    else:
        with torch.no_grad():
            codes = encoder(inputs)
    if labels.shape[0] != codes.shape[0]:
        raise ValueError(f"{labels.shape[0]} speaker labels for a batch of {codes.shape[0]}")
    if int(labels.max()) >= classifier.output.out_features or int(labels.min()) < 0:
        raise ValueError("speaker label outside the classifier's range")

    classifier_opt.zero_grad(set_to_none=True)
    if encoder_turn:
        encoder_opt.zero_grad(set_to_none=True)
        logits = classifier(gradient_reverse(codes, lam))
    else:
        logits = classifier(codes.detach())
    ce = F.cross_entropy(logits, labels)
    total = weight * ce
    metrics = {}
    if encoder_turn and joint_loss is not None:
        extra, parts = joint_loss(codes)
        total = total + extra
        metrics.update(parts)
    total.backward()
    if encoder_turn and clip_norm:
        params = [p for g in encoder_opt.param_groups for p in g["params"] if p.grad is not None]
        torch.nn.utils.clip_grad_norm_(params, clip_norm)
    classifier_opt.step()
    schedule.calls += 1
    schedule.classifier_updates += 1
    if encoder_turn:
        encoder_opt.step()
        schedule.encoder_updates += 1
    metrics.update(
        classifier_ce=float(ce.detach()),
        classifier_accuracy=float((logits.detach().argmax(-1) == labels).double().mean()),
        encoder_update=encoder_turn,
    )
    return metrics


def freeze_prosody_encoder(encoder: ReferenceEncoder) -> ReferenceEncoder:
    """Mark the encoder non-trainable for the rest of its life."""
    encoder.requires_grad_(False)
    encoder.frozen = True
    for p in encoder.parameters():
        p.grad = None
    return encoder


# ---------------------------------------------------------------------------
# controlled experiment: codes that start out carrying the speaker

@dataclass
class DisentanglementResult:
    accuracy_before: float
    accuracy_after: float
    chance: float
    schedule: AdversarialSchedule
    history: list[tuple[int, float]]


def speaker_code_batch(n: int, n_speakers: int, dim: int, gen: torch.Generator, noise: float = 0.1):
    """Inputs are the speaker one-hot padded to ``dim`` plus isotropic Gaussian noise."""
    labels = torch.randint(0, n_speakers, (n,), generator=gen)
    x = torch.zeros(n, dim)
    x[torch.arange(n), labels] = 1.0
    return x + noise * torch.randn(n, dim, generator=gen), labels


def disentanglement_experiment(lam: float = 1.0, n_speakers: int = 4, dim: int = 128, steps: int = 5000,
                               warm_steps: int = 300, batch: int = 64, hidden: int = 512, seed: int = 0,
                               encoder_lr: float = 1e-3, classifier_lr: float = 1e-3,
                               eval_every: int = 500) -> DisentanglementResult:
    """Train an encoder between speaker-bearing inputs and the classifier, through the GRL.

    The classifier is first fitted alone so it starts near-optimal; then
    ``steps`` adversarial calls run on the usual 4:1 schedule. Accuracy is
    measured on a held-out sample drawn from the same distribution.
    """
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    encoder = nn.Sequential(nn.Linear(dim, dim), nn.Tanh(), nn.Linear(dim, dim))
    classifier = SpeakerClassifier(dim, n_speakers, 3, hidden)
    enc_opt = torch.optim.Adam(encoder.parameters(), lr=encoder_lr)
    cls_opt = torch.optim.Adam(classifier.parameters(), lr=classifier_lr)
    held_x, held_y = speaker_code_batch(2000, n_speakers, dim, gen)

    def accuracy():
        with torch.no_grad():
            return float((classifier(encoder(held_x)).argmax(-1) == held_y).double().mean())

    warm = AdversarialSchedule(ratio=warm_steps + 1)
    for _ in range(warm_steps):
        x, y = speaker_code_batch(batch, n_speakers, dim, gen)
        adversarial_step(encoder, classifier, x, y, warm, enc_opt, cls_opt, lam=lam)
    before = accuracy()
    schedule = AdversarialSchedule(ratio=4)
    history = []
    for i in range(steps):
        x, y = speaker_code_batch(batch, n_speakers, dim, gen)
        adversarial_step(encoder, classifier, x, y, schedule, enc_opt, cls_opt, lam=lam)
        if eval_every and (i + 1) % eval_every == 0:
            history.append((i + 1, accuracy()))
    return DisentanglementResult(before, accuracy(), 1.0 / n_speakers, schedule, history)
