"""
Pretraining and fine-tuning a miniature model
=============================================

The synthetic corpus renders each character as a short harmonic burst whose
pitch and formants depend on a pseudo speaker. That is enough structure for a
tiny Transformer to memorize in a couple of minutes on one CPU core.

    python3 demos/02_train_tiny.py [steps]

Writes ``demo_out/pretrain.ckpt`` and ``demo_out/finetune.ckpt``, which the
next demo reuses.
"""
import sys
from pathlib import Path

from prosody_vc.config import ModelConfig, TrainingConfig
from prosody_vc.data import synthetic_corpus
from prosody_vc.training import Trainer, finetune, model_from_checkpoint, pretrain, prosody_checksum

steps = int(sys.argv[1]) if len(sys.argv) > 1 else 600
out = Path("demo_out")
out.mkdir(exist_ok=True)

corpus = synthetic_corpus(n_speakers=2, utts_per_speaker=5, seed=0)
for u in corpus.utterances[:3]:
    print(u.utt_id, u.speaker, repr(u.text), u.mel.shape)

model_cfg = ModelConfig.mini(mel_dim=80)
cfg = TrainingConfig(batch_size=10, warmup_steps=200, max_steps=steps)


def loss_on(ckpt, data):
    return Trainer(model_from_checkpoint(ckpt), TrainingConfig(), ckpt.speakers).evaluate(data)


def report(trainer, record):
    if trainer.stage_step % 100 == 0:
        print(f"step {record['step']:5d}  mel L1 {record['mel_l1']:.3f}  "
              f"speaker CE {record.get('classifier_ce', float('nan')):.3f}")


start = pretrain(corpus, model_cfg, TrainingConfig(max_steps=0))
ckpt = pretrain(corpus, model_cfg, cfg, callback=report)
ckpt.save(out / "pretrain.ckpt")
print(f"masked mel L1: {loss_on(start, corpus):.3f} at init, {loss_on(ckpt, corpus):.3f} after {steps} steps")
print("adversarial calls:", ckpt.extra["adversarial_schedule"])

# Fine-tuning keeps the prosody encoder exactly as it was.
target = corpus.by_speaker("spk0")
tuned = finetune(ckpt, target, TrainingConfig.finetune_default(max_steps=100, warmup_steps=200, lr_scale=0.1))
tuned.save(out / "finetune.ckpt")
same = prosody_checksum(model_from_checkpoint(ckpt)) == prosody_checksum(model_from_checkpoint(tuned))
print(f"spk0 L1 {loss_on(ckpt, target):.3f} -> {loss_on(tuned, target):.3f}; prosody encoder unchanged: {same}")
