"""Configuration records for every stage of the system.

All sections are plain dataclasses so they serialize to a YAML tree and
back without custom code. ``ExperimentConfig`` groups them into the single
file consumed by the command line.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml


@dataclass
class FeatureConfig:
    """Waveform and mel front-end settings.

    Attributes:
        sample_rate: Canonical rate in Hz; input audio is resampled to it.
        n_fft: FFT size. Must be at least ``win_length``.
        hop_length: Frame shift in samples (12.5 ms at 24 kHz).
        win_length: Hann window length in samples.
        n_mels: Number of mel bands.
        f_min: Lowest filter edge in Hz.
        f_max: Highest filter edge in Hz.
        log_floor: Mel energies are clamped to this before the natural log.
    """

    sample_rate: int = 24000
    n_fft: int = 2048
    hop_length: int = 300
    win_length: int = 1200
    n_mels: int = 80
    f_min: float = 80.0
    f_max: float = 7600.0
    log_floor: float = 1e-5

    def __post_init__(self):
        if self.win_length > self.n_fft:
            raise ValueError(f"win_length {self.win_length} exceeds n_fft {self.n_fft}")
        if not 0 <= self.f_min < self.f_max <= self.sample_rate / 2:
            raise ValueError("mel band edges must satisfy 0 <= f_min < f_max <= sample_rate/2")


@dataclass
class ModelConfig:
    """Hyperparameters of the text-to-mel network and its prosody branch.

    The defaults are the full-size model. ``desk()`` and ``mini()`` give the
    reduced variants used for training on a laptop and for gradient checks.
    """

    vocab_size: int = 0  # 0 means "use the tokenizer vocabulary"
    n_blocks: int = 6
    n_heads: int = 4
    layer_width: int = 1536
    ffn_mult: int = 4
    mel_dim: int = 80
    speaker_dim: int = 512
    n_speakers: int = 8
    prosody_dim: int = 128
    prenet_width: int = 256
    postnet_channels: int = 512
    postnet_layers: int = 5
    postnet_kernel: int = 5
    dropout: float = 0.1
    prenet_dropout: float = 0.5
    max_positions: int = 2048
    # reference encoder
    ref_filters: tuple[int, ...] = (32, 32, 64, 64, 128, 128)
    ref_gru_width: int = 128
    # speaker classifier
    classifier_layers: int = 3
    classifier_width: int = 512

    def __post_init__(self):
        self.ref_filters = tuple(self.ref_filters)
        if self.layer_width % self.n_heads:
            raise ValueError(f"layer_width {self.layer_width} not divisible by n_heads {self.n_heads}")
        if self.layer_width % 2:
            raise ValueError("layer_width must be even for sinusoidal positions")
        dims = [self.n_blocks, self.n_heads, self.layer_width, self.mel_dim, self.speaker_dim,
                self.prosody_dim, self.prenet_width, self.postnet_channels, self.postnet_layers,
                self.max_positions, self.ref_gru_width, self.classifier_layers, self.classifier_width]
        if min(dims) <= 0 or min(self.ref_filters) <= 0:
            raise ValueError("all model dimensions must be positive")
        if self.postnet_layers < 2:
            raise ValueError("postnet needs at least 2 layers")

    @property
    def head_dim(self) -> int:
        return self.layer_width // self.n_heads

    @classmethod
    def full(cls, **kw) -> "ModelConfig":
        return cls(**kw)

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        base = dict(n_blocks=2, n_heads=2, layer_width=128, prenet_width=128,
                    postnet_channels=128, speaker_dim=64, prosody_dim=32,
                    ref_filters=(16, 16, 32, 32, 64, 64), ref_gru_width=64,
                    classifier_width=128, max_positions=1024)
        base.update(kw)
        return cls(**base)

    @classmethod
    def mini(cls, **kw) -> "ModelConfig":
        base = dict(n_blocks=2, n_heads=1, layer_width=32, mel_dim=8, prenet_width=16,
                    postnet_channels=16, postnet_kernel=3, speaker_dim=16, n_speakers=3,
                    prosody_dim=8, ref_filters=(4, 4, 8, 8, 8, 8), ref_gru_width=8,
                    classifier_width=16, max_positions=256)
        base.update(kw)
        return cls(**base)


@dataclass
class TrainingConfig:
    """Optimisation settings for one training stage."""

    stage: str = "pretrain"
    batch_size: int = 120
    warmup_steps: int = 4000
    lr_scale: float = 1.0
    max_steps: int = 100000
    w_mel_before: float = 1.0
    w_mel_after: float = 1.0
    w_stop: float = 1.0
    w_adversarial: float = 0.1
    stop_pos_weight: float = 5.0
    mel_loss: str = "l1"
    grl_lambda: float = 1.0
    grl_ramp: bool = False
    classifier_updates_per_encoder_update: int = 4
    classifier_lr: float = 1e-3
    adam_betas: tuple[float, float] = (0.9, 0.98)
    adam_eps: float = 1e-9
    grad_clip: float = 1.0
    checkpoint_every: int = 0
    log_every: int = 1
    seed: int = 0
    deterministic: bool = True

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        if self.stage not in ("pretrain", "finetune"):
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.batch_size < 1 or self.warmup_steps < 1 or self.max_steps < 0:
            raise ValueError("batch_size and warmup_steps must be >= 1, max_steps >= 0")
        if min(self.w_mel_before, self.w_mel_after, self.w_stop, self.w_adversarial) < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.mel_loss not in ("l1", "l2"):
            raise ValueError("mel_loss must be 'l1' or 'l2'")
        if self.grl_lambda < 0:
            raise ValueError("grl_lambda must be nonnegative")

    @classmethod
    def finetune_default(cls, **kw) -> "TrainingConfig":
        base = dict(stage="finetune", batch_size=16, w_adversarial=0.0)
        base.update(kw)
        return cls(**base)


@dataclass
class PipelineConfig:
    prosody_mode: str = "off"
    prosody_scale: float = 1.5
    max_decode_frames: int = 1000
    griffin_lim_iters: int = 60
    sweep_scales: tuple[float, ...] = (3.0, 1.5, 1.0, 0.0, -1.5, -3.0)
    inference_seed: int = 0

    def __post_init__(self):
        self.sweep_scales = tuple(self.sweep_scales)
        if self.prosody_mode not in ("off", "transfer"):
            raise ValueError("prosody_mode must be 'off' or 'transfer'")


@dataclass
class ExperimentConfig:
    features: FeatureConfig = field(default_factory=FeatureConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: TrainingConfig = field(default_factory=TrainingConfig)
    finetune: TrainingConfig = field(default_factory=TrainingConfig.finetune_default)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)

    def to_dict(self) -> dict[str, Any]:
        return _plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict[str, Any] | None) -> "ExperimentConfig":
        data = data or {}
        unknown = set(data) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        kinds = {"features": FeatureConfig, "model": ModelConfig, "pretrain": TrainingConfig,
                 "finetune": TrainingConfig, "pipeline": PipelineConfig}
        out = cls()
        for name, kind in kinds.items():
            if name in data:
                base = dataclasses.asdict(getattr(out, name))
                base.update(data[name] or {})
                setattr(out, name, section_from_dict(kind, base))
        return out

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(yaml.safe_load(fh))


def section_from_dict(kind, data: dict[str, Any]):
    names = {f.name for f in dataclasses.fields(kind)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {kind.__name__} keys: {sorted(unknown)}")
    return kind(**data)


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj
