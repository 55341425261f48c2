"""Multi-speaker Transformer text-to-mel network.

Shapes follow the batch-first convention: tokens ``(B, L)``, mels
``(B, T, mel_dim)``, encoder states ``(B, L, width)``. Masks are boolean
with ``True`` marking valid positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .config import ModelConfig
from .features import PAD_ID, VOCAB
from .prosody import ReferenceEncoder, SpeakerClassifier


def positional_encoding(length: int, dim: int, dtype=torch.float32) -> torch.Tensor:
    """Sinusoidal table: ``pe[p, 2i] = sin(p / 10000**(2i/dim))``, cosine at ``2i+1``."""
    if length <= 0 or dim <= 0:
        raise ValueError("length and dim must be positive")
    if dim % 2:
        raise ValueError(f"positional encoding needs an even dim, got {dim}")
    pos = torch.arange(length, dtype=torch.float64)[:, None]
    inv = 10000.0 ** (-torch.arange(0, dim, 2, dtype=torch.float64) / dim)
    pe = torch.zeros(length, dim, dtype=torch.float64)
    pe[:, 0::2] = torch.sin(pos * inv)
    pe[:, 1::2] = torch.cos(pos * inv)
    return pe.to(dtype)


def causal_mask(t: int, device=None) -> torch.Tensor:
    return torch.ones(t, t, dtype=torch.bool, device=device).tril()


def lengths_to_mask(lengths: torch.Tensor, max_len: int | None = None) -> torch.Tensor:
    max_len = int(lengths.max()) if max_len is None else max_len
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


class MultiHeadAttention(nn.Module):
    def __init__(self, width: int, n_heads: int, dropout: float = 0.0):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = width // n_heads
        self.query = nn.Linear(width, width)
        self.key = nn.Linear(width, width)
        self.value = nn.Linear(width, width)
        self.out = nn.Linear(width, width)
        self.dropout = nn.Dropout(dropout)

    def _split(self, x):
        b, t, _ = x.shape
        return x.view(b, t, self.n_heads, self.head_dim).transpose(1, 2)

    def forward(self, query, memory, mask=None):
        """Returns the attended values and the ``(B, H, Tq, Tk)`` weights.

        ``mask`` broadcasts against ``(B, 1, Tq, Tk)``; False entries get zero weight.
        """
        q, k, v = self._split(self.query(query)), self._split(self.key(memory)), self._split(self.value(memory))
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if mask is not None:
            scores = scores.masked_fill(~mask, float("-inf"))
        weights = torch.softmax(scores, dim=-1)
        ctx = self.dropout(weights) @ v
        b, _, t, _ = ctx.shape
        return self.out(ctx.transpose(1, 2).reshape(b, t, -1)), weights


class FeedForward(nn.Module):
    def __init__(self, width: int, inner: int, dropout: float = 0.0):
        super().__init__()
        self.fc1 = nn.Linear(width, inner)
        self.fc2 = nn.Linear(inner, width)
        self.dropout = nn.Dropout(dropout)

    def forward(self, x):
        return self.fc2(self.dropout(F.relu(self.fc1(x))))


class EncoderBlock(nn.Module):
    # post-norm: each sub-layer is followed by residual add then layer norm
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.layer_width
        self.self_attn = MultiHeadAttention(w, cfg.n_heads, cfg.dropout)
        self.norm1 = nn.LayerNorm(w)
        self.ffn = FeedForward(w, cfg.ffn_mult * w, cfg.dropout)
        self.norm2 = nn.LayerNorm(w)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, mask):
        h, attn = self.self_attn(x, x, mask)
        x = self.norm1(x + self.dropout(h))
        x = self.norm2(x + self.dropout(self.ffn(x)))
        return x, attn


class DecoderBlock(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        w = cfg.layer_width
        self.self_attn = MultiHeadAttention(w, cfg.n_heads, cfg.dropout)
        self.norm1 = nn.LayerNorm(w)
        self.cross_attn = MultiHeadAttention(w, cfg.n_heads, cfg.dropout)
        self.norm2 = nn.LayerNorm(w)
        self.ffn = FeedForward(w, cfg.ffn_mult * w, cfg.dropout)
        self.norm3 = nn.LayerNorm(w)
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, x, self_mask, memory, memory_mask):
        h, self_w = self.self_attn(x, x, self_mask)
        x = self.norm1(x + self.dropout(h))
        h, cross_w = self.cross_attn(x, memory, memory_mask)
        x = self.norm2(x + self.dropout(h))
        x = self.norm3(x + self.dropout(self.ffn(x)))
        return x, self_w, cross_w


class DecoderPrenet(nn.Module):
    """Two ReLU layers with dropout that stays on at inference, then a projection.

    In eval mode the dropout masks are drawn per time step from a generator
    seeded by ``(seed, layer, step)``, so greedy decoding is reproducible and
    a frame's mask does not depend on how long the sequence is.
    """

    def __init__(self, mel_dim: int, hidden: int, width: int, p: float):
        super().__init__()
        self.fc1 = nn.Linear(mel_dim, hidden)
        self.fc2 = nn.Linear(hidden, hidden)
        self.proj = nn.Linear(hidden, width)
        self.p = p
        self.seed = 0
        self._masks: dict[tuple[int, int], torch.Tensor] = {}

    def _eval_mask(self, layer: int, t: int, ref: torch.Tensor) -> torch.Tensor:
        key = (self.seed, layer)
        cached = self._masks.get(key)
        if cached is None or cached.shape[0] < t:
            start = 0 if cached is None else cached.shape[0]
            rows = []
            for step in range(start, t):
                gen = torch.Generator().manual_seed(self.seed * 1_000_003 + layer * 100_003 + step)
                rows.append((torch.rand(ref.shape[-1], generator=gen, dtype=torch.float64) >= self.p))
            new = torch.stack(rows)
            cached = new if cached is None else torch.cat([cached, new])
            self._masks[key] = cached
        return cached[:t].to(device=ref.device, dtype=ref.dtype) / (1.0 - self.p)

    def _drop(self, x, layer):
        if self.p <= 0:
            return x
        if self.training:
            return F.dropout(x, self.p, training=True)
        return x * self._eval_mask(layer, x.shape[1], x)

    def forward(self, mels):
        x = self._drop(F.relu(self.fc1(mels)), 0)
        x = self._drop(F.relu(self.fc2(x)), 1)
        return self.proj(x)


class CausalConv1d(nn.Conv1d):
    """Conv over time padded on the left only, so frame t sees frames <= t."""

    def forward(self, x):
        return super().forward(F.pad(x, (self.kernel_size[0] - 1, 0)))


class Postnet(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c, k = cfg.postnet_channels, cfg.postnet_kernel
        chans = [cfg.mel_dim] + [c] * (cfg.postnet_layers - 1) + [cfg.mel_dim]
        self.convs = nn.ModuleList(CausalConv1d(a, b, k) for a, b in zip(chans[:-1], chans[1:]))
        self.dropout = nn.Dropout(cfg.dropout)

    def forward(self, mel):
        x = mel.transpose(1, 2)
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = self.dropout(torch.tanh(x))
        return x.transpose(1, 2)


@dataclass
class EncoderOutput:
    states: torch.Tensor
    mask: torch.Tensor
    attention: list[torch.Tensor] = field(default_factory=list)


@dataclass
class DecoderOutput:
    mel_before: torch.Tensor
    mel_after: torch.Tensor
    stop_logits: torch.Tensor
    postnet_residual: torch.Tensor
    self_attention: list[torch.Tensor] = field(default_factory=list)
    cross_attention: list[torch.Tensor] = field(default_factory=list)


@dataclass
class InferenceResult:
    mel: torch.Tensor  # (T, mel_dim), post-net output
    mel_before: torch.Tensor
    stop_probs: torch.Tensor
    truncated: bool

    @property
    def n_frames(self) -> int:
        return self.mel.shape[0]


class TransformerTTS(nn.Module):
    """Text encoder, conditioning, autoregressive mel decoder, plus the prosody branch.

    Token embeddings go straight into the encoder blocks; there is no
    encoder prenet. Speaker and prosody vectors are projected to the layer
    width and added to every encoder frame.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        w = cfg.layer_width
        vocab = cfg.vocab_size or len(VOCAB)
        self.token_embedding = nn.Embedding(vocab, w, padding_idx=PAD_ID)
        self.enc_pos_gain = nn.Parameter(torch.ones(1))
        self.dec_pos_gain = nn.Parameter(torch.ones(1))
        self.encoder = nn.ModuleList(EncoderBlock(cfg) for _ in range(cfg.n_blocks))
        self.speaker_table = nn.Embedding(cfg.n_speakers, cfg.speaker_dim)
        self.speaker_proj = nn.Linear(cfg.speaker_dim, w)
        # no bias: a zero code must leave the encoder states untouched
        self.prosody_proj = nn.Linear(cfg.prosody_dim, w, bias=False)
        self.prenet = DecoderPrenet(cfg.mel_dim, cfg.prenet_width, w, cfg.prenet_dropout)
        self.decoder = nn.ModuleList(DecoderBlock(cfg) for _ in range(cfg.n_blocks))
        self.mel_head = nn.Linear(w, cfg.mel_dim)
        self.stop_head = nn.Linear(w, 1)
        self.postnet = Postnet(cfg)
        self.prosody_encoder = ReferenceEncoder(cfg.mel_dim, cfg.ref_filters, cfg.ref_gru_width, cfg.prosody_dim)
        self.speaker_classifier = SpeakerClassifier(cfg.prosody_dim, cfg.n_speakers,
                                                    cfg.classifier_layers, cfg.classifier_width)
        self.register_buffer("pe", positional_encoding(cfg.max_positions, w), persistent=False)

    # -- encoder side ---------------------------------------------------------

    def encode(self, tokens: torch.Tensor, token_mask: torch.Tensor | None = None) -> EncoderOutput:
        if tokens.dim() == 1:
            tokens = tokens[None]
        if tokens.shape[1] > self.cfg.max_positions:
            raise ValueError(f"text of {tokens.shape[1]} tokens exceeds max_positions={self.cfg.max_positions}")
        if token_mask is None:
            token_mask = tokens != PAD_ID
        x = self.token_embedding(tokens) + self.enc_pos_gain * self.pe[: tokens.shape[1]].to(self.token_embedding.weight.dtype)
        attn_mask = token_mask[:, None, None, :]
        maps = []
        for block in self.encoder:
            x, a = block(x, attn_mask)
            maps.append(a)
        return EncoderOutput(x, token_mask, maps)

    def speaker_vector(self, speaker_ids: torch.Tensor) -> torch.Tensor:
        return self.speaker_table(speaker_ids)

    def condition(self, enc: EncoderOutput, speaker: torch.Tensor, prosody: torch.Tensor | None = None) -> EncoderOutput:
        """Add projected speaker (and optionally prosody) vectors to every encoder frame."""
        if speaker.dim() == 1:
            speaker = speaker[None]
        if speaker.shape[-1] != self.cfg.speaker_dim:
            raise ValueError(f"speaker vector has dim {speaker.shape[-1]}, expected {self.cfg.speaker_dim}")
        offset = self.speaker_proj(speaker)
        if prosody is not None:
            if prosody.dim() == 1:
                prosody = prosody[None]
            if prosody.shape[-1] != self.cfg.prosody_dim:
                raise ValueError(f"prosody code has dim {prosody.shape[-1]}, expected {self.cfg.prosody_dim}")
            offset = offset + self.prosody_proj(prosody)
        return EncoderOutput(enc.states + offset[:, None, :], enc.mask, enc.attention)

    # -- decoder side ---------------------------------------------------------

    def decode(self, prev_mels: torch.Tensor, enc: EncoderOutput):
        """Parallel causal decode of a history ``(B, T, mel_dim)``.

        Row t of the result predicts frame t from history rows ``0..t``.
        """
        if enc.states.shape[1] == 0:
            raise ValueError("empty encoder output")
        t = prev_mels.shape[1]
        if t > self.cfg.max_positions:
            raise ValueError(f"{t} decoder steps exceed max_positions={self.cfg.max_positions}")
        x = self.prenet(prev_mels) + self.dec_pos_gain * self.pe[:t].to(prev_mels.dtype)
        self_mask = causal_mask(t, x.device)[None, None]
        mem_mask = enc.mask[:, None, None, :]
        self_maps, cross_maps = [], []
        for block in self.decoder:
            x, sw, cw = block(x, self_mask, enc.states, mem_mask)
            self_maps.append(sw)
            cross_maps.append(cw)
        return self.mel_head(x), self.stop_head(x).squeeze(-1), self_maps, cross_maps

    def decode_step(self, prev_mels: torch.Tensor, enc: EncoderOutput):
        """Next frame and stop logit given the history (first row is the zero go frame)."""
        mel, stop, _, _ = self.decode(prev_mels, enc)
        return mel[:, -1], stop[:, -1]

    @staticmethod
    def shift_right(mels: torch.Tensor) -> torch.Tensor:
        go = torch.zeros_like(mels[:, :1])
        return torch.cat([go, mels[:, :-1]], dim=1)

    def forward_teacher_forced(self, tokens, speaker, prosody, target_mels, token_mask=None) -> DecoderOutput:
        """Training-time decode on ground-truth history.

        ``speaker`` is either a ``(B,)`` integer id tensor or a ``(B, speaker_dim)`` vector.
        """
        if target_mels.shape[1] == 0:
            raise ValueError("target mels are empty")
        enc = self.encode(tokens, token_mask)
        spk = self.speaker_vector(speaker) if not torch.is_floating_point(speaker) else speaker
        enc = self.condition(enc, spk, prosody)
        mel_before, stop, sw, cw = self.decode(self.shift_right(target_mels), enc)
        residual = self.postnet(mel_before)
        return DecoderOutput(mel_before, mel_before + residual, stop, residual, sw, cw)

    @torch.no_grad()
    def infer(self, tokens, speaker, prosody=None, max_frames: int = 1000, seed: int = 0) -> InferenceResult:
        """Greedy autoregressive synthesis for a single utterance.

        Stops after the first frame whose stop probability exceeds 0.5, or at
        ``max_frames`` (then ``truncated`` is set).
        """
        was_training = self.training
        self.eval()
        self.prenet.seed = seed
        try:
            if tokens.dim() == 1:
                tokens = tokens[None]
            enc = self.encode(tokens)
            spk = self.speaker_vector(speaker.reshape(1)) if not torch.is_floating_point(speaker) else speaker
            enc = self.condition(enc, spk, prosody)
            dtype = enc.states.dtype
            history = torch.zeros(1, 1, self.cfg.mel_dim, dtype=dtype)
            frames, stops = [], []
            truncated = True
            for _ in range(max_frames):
                frame, stop = self.decode_step(history, enc)
                frames.append(frame)
                stops.append(torch.sigmoid(stop))
                if stops[-1].item() > 0.5:
                    truncated = False
                    break
                history = torch.cat([history, frame[:, None]], dim=1)
            before = torch.stack(frames, dim=1)
            after = before + self.postnet(before)
            return InferenceResult(after[0], before[0], torch.cat(stops), truncated)
        finally:
            self.prenet.seed = 0
            self.train(was_training)

    def tts_parameters(self):
        """Everything except the speaker classifier, which has its own optimizer."""
        return [p for n, p in self.named_parameters() if not n.startswith("speaker_classifier.")]


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form trainable parameter count for :class:`TransformerTTS`."""
    w, f, m, p = cfg.layer_width, cfg.ffn_mult * cfg.layer_width, cfg.mel_dim, cfg.prenet_width
    vocab = cfg.vocab_size or len(VOCAB)
    attn = 4 * (w * w + w)
    ffn = w * f + f + f * w + w
    norm = 2 * w
    total = vocab * w + 2
    total += cfg.n_blocks * (attn + ffn + 2 * norm)
    total += cfg.n_blocks * (2 * attn + ffn + 3 * norm)
    total += m * p + p + p * p + p + p * w + w
    total += w * m + m + w + 1
    c, k = cfg.postnet_channels, cfg.postnet_kernel
    total += (m * c * k + c) + (cfg.postnet_layers - 2) * (c * c * k + c) + (c * m * k + m)
    total += cfg.n_speakers * cfg.speaker_dim + cfg.speaker_dim * w + w + cfg.prosody_dim * w
    total += ReferenceEncoder.parameter_count(m, cfg.ref_filters, cfg.ref_gru_width, cfg.prosody_dim)
    total += SpeakerClassifier.parameter_count(cfg.prosody_dim, cfg.n_speakers, cfg.classifier_layers, cfg.classifier_width)
    return total
