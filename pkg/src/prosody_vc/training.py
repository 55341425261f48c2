"""Losses, learning-rate schedule, and the two-stage training recipe.

Pretraining runs on a multi-speaker corpus with the speaker-adversarial
prosody branch active. Fine-tuning adapts to one target speaker with the
prosody encoder frozen and the adversarial loss off.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .checkpoint import Checkpoint, check_transition
from .config import FeatureConfig, ModelConfig, TrainingConfig
from .data import Batch, BatchSampler, Corpus
from .model import DecoderOutput, TransformerTTS
from .prosody import AdversarialSchedule, adversarial_step, freeze_prosody_encoder

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# loss

def tts_loss(out: DecoderOutput, target: torch.Tensor, stop_targets: torch.Tensor, mel_mask: torch.Tensor,
             cfg: TrainingConfig) -> tuple[torch.Tensor, dict[str, torch.Tensor]]:
    """Weighted sum of masked mel reconstruction (before and after the postnet) and stop BCE.

    Mel terms are means over valid frames and mel bins; the stop term is a
    mean over valid frames with positive frames up-weighted by
    ``cfg.stop_pos_weight``.
    """
    if out.mel_before.shape != target.shape or out.stop_logits.shape != stop_targets.shape:
        raise ValueError(f"shape mismatch: output {tuple(out.mel_before.shape)}/{tuple(out.stop_logits.shape)} "
                         f"vs target {tuple(target.shape)}/{tuple(stop_targets.shape)}")
    m = mel_mask.to(target.dtype)
    n_valid = m.sum()
    dist = (lambda a, b: (a - b).abs()) if cfg.mel_loss == "l1" else (lambda a, b: (a - b) ** 2)
    before = (dist(out.mel_before, target) * m[..., None]).sum() / (n_valid * target.shape[-1])
    after = (dist(out.mel_after, target) * m[..., None]).sum() / (n_valid * target.shape[-1])
    pos_weight = torch.tensor(cfg.stop_pos_weight, dtype=target.dtype)
    bce = F.binary_cross_entropy_with_logits(out.stop_logits, stop_targets, pos_weight=pos_weight, reduction="none")
    stop = (bce * m).sum() / n_valid
    total = cfg.w_mel_before * before + cfg.w_mel_after * after + cfg.w_stop * stop
    return total, {"mel_before": before, "mel_after": after, "stop": stop}


def masked_mel_l1(out: DecoderOutput, batch: Batch) -> float:
    m = batch.mel_mask.to(out.mel_after.dtype)[..., None]
    return float(((out.mel_after.detach() - batch.mels).abs() * m).sum() / (m.sum() * batch.mels.shape[-1]))


def noam_lr(step: int, model_dim: int, warmup: int, scale: float = 1.0) -> float:
    """``scale * model_dim**-0.5 * min(step**-0.5, step * warmup**-1.5)``; peaks at ``step == warmup``."""
    if step < 1:
        raise ValueError(f"noam schedule is defined for step >= 1, got {step}")
    return scale * model_dim ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


# ---------------------------------------------------------------------------
# helpers

def set_determinism(seed: int, deterministic: bool = True) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed)
    torch.use_deterministic_algorithms(deterministic)


def build_model(cfg: ModelConfig, dtype=torch.float32) -> TransformerTTS:
    return TransformerTTS(cfg).to(dtype)


def model_from_checkpoint(ckpt: Checkpoint) -> TransformerTTS:
    cfg = ModelConfig(**ckpt.config["model"])
    dtype = next(iter(ckpt.params.values())).dtype
    model = TransformerTTS(cfg).to(dtype)
    model.load_state_dict(ckpt.params)
    if ckpt.extra.get("prosody_frozen"):
        freeze_prosody_encoder(model.prosody_encoder)
    return model


def prosody_checksum(model: TransformerTTS) -> str:
    import hashlib
    h = hashlib.sha256()
    for name, t in model.prosody_encoder.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().numpy().tobytes())
    return h.hexdigest()


class TrainingLog:
    """Append-only JSON-lines training log."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path else None
        self.records: list[dict] = []

    def write(self, record: dict) -> None:
        self.records.append(record)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def _adam(params, cfg: TrainingConfig, lr: float = 0.0):
    return torch.optim.Adam(params, lr=lr, betas=cfg.adam_betas, eps=cfg.adam_eps)


# ---------------------------------------------------------------------------
# trainer

class Trainer:
    """Owns a model, its optimizers and the adversarial call schedule."""

    def __init__(self, model: TransformerTTS, cfg: TrainingConfig, speakers: list[str],
                 feature_cfg: FeatureConfig | None = None, log_path=None, global_step: int = 0):
        self.model = model
        self.cfg = cfg
        self.speakers = list(speakers)
        self.speaker_index = {s: i for i, s in enumerate(self.speakers)}
        self.feature_cfg = feature_cfg or FeatureConfig()
        self.dtype = next(model.parameters()).dtype
        self.tts_opt = _adam([p for p in model.tts_parameters() if p.requires_grad], cfg)
        self.cls_opt = _adam(model.speaker_classifier.parameters(), cfg, lr=cfg.classifier_lr)
        self.schedule = AdversarialSchedule(cfg.classifier_updates_per_encoder_update)
        self.global_step = global_step
        self.stage_step = 0
        self.log = TrainingLog(log_path)

    # -- pieces ---------------------------------------------------------------

    def prosody_codes(self, batch: Batch) -> torch.Tensor:
        return self.model.prosody_encoder(batch.mels, batch.mel_lengths)

    def batch_loss(self, batch: Batch, codes: torch.Tensor):
        out = self.model.forward_teacher_forced(batch.tokens, batch.speakers, codes, batch.mels, batch.token_mask)
        total, parts = tts_loss(out, batch.mels, batch.stop_targets, batch.mel_mask, self.cfg)
        return total, out, parts

    def grl_lambda(self) -> float:
        if not self.cfg.grl_ramp:
            return self.cfg.grl_lambda
        ramp = max(1, int(0.1 * self.cfg.max_steps))
        return self.cfg.grl_lambda * min(1.0, self.stage_step / ramp)

    def adversarial_enabled(self) -> bool:
        return self.cfg.stage == "pretrain" and self.cfg.w_adversarial > 0

    def _set_lr(self):
        lr = noam_lr(self.stage_step + 1, self.model.cfg.layer_width, self.cfg.warmup_steps, self.cfg.lr_scale)
        for g in self.tts_opt.param_groups:
            g["lr"] = lr
        return lr

    def train_step(self, sampler: BatchSampler) -> dict:
        """One synthesis-model update (plus the classifier-only calls preceding it)."""
        self.model.train()
        lr = self._set_lr()
        record = {"step": self.global_step + 1, "stage": self.cfg.stage, "lr": lr}
        if self.adversarial_enabled():
            holder = {}

            def joint(codes):
                total, out, parts = self.batch_loss(holder["batch"], codes)
                holder["out"] = out
                return total, {k: float(v.detach()) for k, v in parts.items()}

            while True:
                batch = sampler.next()
                holder["batch"] = batch
                m = adversarial_step(lambda b: self.prosody_codes(b), self.model.speaker_classifier, batch,
                                     batch.speakers, self.schedule, self.tts_opt, self.cls_opt,
                                     lam=self.grl_lambda(), weight=self.cfg.w_adversarial,
                                     joint_loss=joint, clip_norm=self.cfg.grad_clip)
                if m["encoder_update"]:
                    break
            record.update({k: v for k, v in m.items() if k != "encoder_update"})
            record["mel_l1"] = masked_mel_l1(holder["out"], batch)
        else:
            batch = sampler.next()
            self.tts_opt.zero_grad(set_to_none=True)
            if self.model.prosody_encoder.frozen:
                with torch.no_grad():
                    codes = self.prosody_codes(batch)
            else:
                codes = self.prosody_codes(batch)
            total, out, parts = self.batch_loss(batch, codes)
            total.backward()
            if self.cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_([p for g in self.tts_opt.param_groups for p in g["params"]],
                                               self.cfg.grad_clip)
            self.tts_opt.step()
            record.update({k: float(v.detach()) for k, v in parts.items()})
            record["mel_l1"] = masked_mel_l1(out, batch)
        record["total"] = (self.cfg.w_mel_before * record["mel_before"] + self.cfg.w_mel_after * record["mel_after"]
                           + self.cfg.w_stop * record["stop"])
        self.global_step += 1
        self.stage_step += 1
        if self.cfg.log_every and self.stage_step % self.cfg.log_every == 0:
            self.log.write(record)
        return record

    @torch.no_grad()
    def evaluate(self, corpus: Corpus) -> float:
        """Masked mel L1 (post-net) of teacher-forced decoding on ``corpus`` in eval mode."""
        from .data import collate
        self.model.eval()
        batch = collate(corpus.utterances, self.speaker_index, dtype=self.dtype)
        codes = self.prosody_codes(batch)
        _, out, _ = self.batch_loss(batch, codes)
        self.model.train()
        return masked_mel_l1(out, batch)

    def checkpoint(self, config: dict) -> Checkpoint:
        params = {k: v.detach().clone() for k, v in self.model.state_dict().items()}
        return Checkpoint(self.cfg.stage, self.global_step, config, params, self.speakers,
                          {"tts": self.tts_opt.state_dict(), "classifier": self.cls_opt.state_dict()},
                          {"prosody_frozen": bool(self.model.prosody_encoder.frozen),
                           "adversarial_schedule": self.schedule.state_dict()})


def _config_snapshot(model_cfg: ModelConfig, train_cfg: TrainingConfig, feature_cfg: FeatureConfig,
                     previous: dict | None = None) -> dict:
    snap = dict(previous or {})
    snap["model"] = _plain(dataclasses.asdict(model_cfg))
    snap["features"] = _plain(dataclasses.asdict(feature_cfg))
    snap[train_cfg.stage] = _plain(dataclasses.asdict(train_cfg))
    return snap


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def pretrain(corpus: Corpus, model_cfg: ModelConfig, cfg: TrainingConfig, feature_cfg: FeatureConfig | None = None,
             log_path=None, checkpoint_dir=None, dtype=torch.float32, callback=None) -> Checkpoint:
    """Multi-speaker pretraining from scratch; returns the final checkpoint.

    ``callback(trainer, record)`` runs after each step, e.g. for progress
    reporting.
    """
    if len(corpus) == 0:
        raise ValueError("pretraining corpus is empty")
    if cfg.stage != "pretrain":
        raise ValueError("pretrain() needs a TrainingConfig with stage='pretrain'")
    if cfg.w_adversarial > 0 and len(corpus.speakers) < 2:
        raise ValueError("adversarial prosody training needs at least 2 speakers; set w_adversarial=0 otherwise")
    feature_cfg = feature_cfg or FeatureConfig()
    if model_cfg.n_speakers < len(corpus.speakers):
        model_cfg = dataclasses.replace(model_cfg, n_speakers=len(corpus.speakers))
    set_determinism(cfg.seed, cfg.deterministic)
    model = build_model(model_cfg, dtype)
    trainer = Trainer(model, cfg, corpus.speakers, feature_cfg, log_path)
    sampler = BatchSampler(corpus, cfg.batch_size, trainer.speaker_index, seed=cfg.seed, dtype=dtype)
    snapshot = _config_snapshot(model_cfg, cfg, feature_cfg)
    for _ in range(cfg.max_steps):
        record = trainer.train_step(sampler)
        if callback:
            callback(trainer, record)
        if checkpoint_dir and cfg.checkpoint_every and trainer.stage_step % cfg.checkpoint_every == 0:
            trainer.checkpoint(snapshot).save(Path(checkpoint_dir) / f"pretrain_{trainer.global_step:07d}.ckpt")
    return trainer.checkpoint(snapshot)


def finetune(ckpt: Checkpoint, corpus: Corpus, cfg: TrainingConfig, target_speaker: str | None = None,
             speaker_vector: np.ndarray | None = None, log_path=None, checkpoint_dir=None, callback=None) -> Checkpoint:
    """Adapt a pretrained checkpoint to a single target speaker.

    The prosody encoder is frozen and the adversarial loss is off. A speaker
    missing from the checkpoint gets a new embedding row, initialised from
    ``speaker_vector`` when given and from the mean of existing rows
    otherwise. With ``max_steps == 0`` the input checkpoint is returned
    unchanged except for its stage tag.
    """
    check_transition(ckpt.stage, cfg.stage)
    speakers_in_data = corpus.speakers
    if len(speakers_in_data) != 1:
        raise ValueError(f"fine-tuning expects one target speaker, corpus has {len(speakers_in_data)}")
    target = target_speaker or speakers_in_data[0]
    if speakers_in_data[0] != target:
        raise ValueError(f"corpus speaker {speakers_in_data[0]!r} differs from target {target!r}")

    if cfg.max_steps == 0 and target in ckpt.speakers:
        out = ckpt.copy()
        out.stage = "finetune"
        return out

    set_determinism(cfg.seed, cfg.deterministic)
    model = model_from_checkpoint(ckpt)
    speakers = list(ckpt.speakers)
    model_cfg = model.cfg
    if target not in speakers:
        model, model_cfg = _add_speaker(model, speaker_vector, len(speakers))
        speakers.append(target)
    elif speaker_vector is not None:
        with torch.no_grad():
            model.speaker_table.weight[speakers.index(target)] = torch.as_tensor(speaker_vector)
    freeze_prosody_encoder(model.prosody_encoder)
    cfg = dataclasses.replace(cfg, w_adversarial=0.0)
    feature_cfg = FeatureConfig(**ckpt.config.get("features", {}))
    trainer = Trainer(model, cfg, speakers, feature_cfg, log_path, global_step=ckpt.global_step)
    dtype = next(model.parameters()).dtype
    sampler = BatchSampler(corpus, cfg.batch_size, trainer.speaker_index, seed=cfg.seed, dtype=dtype)
    snapshot = _config_snapshot(model_cfg, cfg, feature_cfg, ckpt.config)
    for _ in range(cfg.max_steps):
        record = trainer.train_step(sampler)
        if callback:
            callback(trainer, record)
        if checkpoint_dir and cfg.checkpoint_every and trainer.stage_step % cfg.checkpoint_every == 0:
            trainer.checkpoint(snapshot).save(Path(checkpoint_dir) / f"finetune_{trainer.global_step:07d}.ckpt")
    return trainer.checkpoint(snapshot)


def _add_speaker(model: TransformerTTS, vector, n_used: int):
    """Give a new speaker row ``n_used``, growing the table only when no spare row exists."""
    old = model.cfg
    table = model.speaker_table.weight.detach()
    row = torch.as_tensor(vector, dtype=table.dtype) if vector is not None else table[:n_used].mean(0)
    if row.shape != (old.speaker_dim,):
        raise ValueError(f"speaker vector must have shape ({old.speaker_dim},), got {tuple(row.shape)}")
    if n_used < old.n_speakers:
        with torch.no_grad():
            model.speaker_table.weight[n_used] = row
        return model, old
    # the classifier is idle during fine-tuning; it just gains a zero output row
    cfg = dataclasses.replace(old, n_speakers=old.n_speakers + 1)
    new = TransformerTTS(cfg).to(table.dtype)
    state = model.state_dict()
    state["speaker_table.weight"] = torch.cat([state["speaker_table.weight"], row[None]])
    new_cls = new.speaker_classifier.state_dict()
    for k in [k for k in state if k.startswith("speaker_classifier.")]:
        shape = new_cls[k[len("speaker_classifier."):]].shape
        if state[k].shape != shape:
            state[k] = _pad_rows(state[k], shape)
    new.load_state_dict(state)
    return new, cfg


def _pad_rows(t: torch.Tensor, shape) -> torch.Tensor:
    out = torch.zeros(shape, dtype=t.dtype)
    out[: t.shape[0]] = t
    return out
