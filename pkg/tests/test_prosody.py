import dataclasses

import pytest
import torch
from hypothesis import given, settings, strategies as st
from torch import nn

from prosody_vc.config import ModelConfig, TrainingConfig
from prosody_vc.data import synthetic_corpus
from prosody_vc.prosody import (AdversarialSchedule, FrozenModuleError, ReferenceEncoder, SpeakerClassifier,
                                adversarial_step, classify_speaker, freeze_prosody_encoder, gradient_reverse)
from prosody_vc.training import finetune, model_from_checkpoint, pretrain, prosody_checksum


def small_encoder(seed=0):
    torch.manual_seed(seed)
    return ReferenceEncoder(16, (4, 4, 8, 8, 8, 8), 8, 12).double().eval()


# -- reference encoder -------------------------------------------------------

def test_code_dimension_independent_of_length():
    enc = small_encoder()
    a = enc(torch.randn(1, 13, 16, dtype=torch.float64))
    b = enc(torch.randn(1, 71, 16, dtype=torch.float64))
    assert a.shape == b.shape == (1, 12)


def test_full_size_code_is_128():
    enc = ReferenceEncoder(80).eval()
    assert enc(torch.randn(2, 40, 80)).shape == (2, 128)
    assert sum(p.numel() for p in enc.parameters()) == ReferenceEncoder.parameter_count(80, (32, 32, 64, 64, 128, 128),
                                                                                        128, 128)


def test_identical_mels_identical_codes():
    enc = small_encoder()
    mel = torch.randn(1, 20, 16, dtype=torch.float64)
    assert torch.equal(enc(mel), enc(mel.clone()))


def test_code_is_sensitive_to_last_frame():
    enc = small_encoder(3)
    mel = torch.randn(1, 20, 16, dtype=torch.float64)
    h = 1e-4
    bump = torch.zeros_like(mel)
    bump[0, -1] = torch.randn(16, dtype=torch.float64)
    deriv = (enc(mel + h * bump) - enc(mel - h * bump)) / (2 * h)
    assert deriv.abs().max() > 1e-8


def test_padding_does_not_change_code():
    enc = small_encoder(1)
    mel = torch.randn(1, 17, 16, dtype=torch.float64)
    padded = torch.cat([mel, torch.full((1, 9, 16), 3.0, dtype=torch.float64)], dim=1)
    solo = enc(mel)
    batched = enc(padded, torch.tensor([17]))
    assert torch.allclose(solo, batched, atol=1e-12)


def test_empty_mel_rejected():
    with pytest.raises(ValueError):
        small_encoder()(torch.zeros(1, 0, 16, dtype=torch.float64))


# -- gradient reversal -------------------------------------------------------

@pytest.mark.parametrize("lam", [0.0, 0.5, 1.0])
def test_gradient_reversal_exact(lam):
    g = torch.Generator().manual_seed(int(lam * 10))
    x = torch.randn(5, 7, generator=g, dtype=torch.float64, requires_grad=True)
    upstream = torch.randn(5, 7, generator=g, dtype=torch.float64)
    y = gradient_reverse(x, lam)
    assert torch.equal(y, x)
    y.backward(upstream)
    assert (x.grad - (-lam * upstream)).abs().max().item() <= 1e-12


def test_gradient_reversal_rejects_negative_strength():
    with pytest.raises(ValueError):
        gradient_reverse(torch.zeros(2), -0.1)


# -- speaker classifier ------------------------------------------------------

@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_classifier_outputs_distribution(seed, scale):
    torch.manual_seed(seed % 1000)
    clf = SpeakerClassifier(6, 4, 3, 16).double()
    code = scale * torch.randn(3, 6, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)
    p = classify_speaker(code, clf)
    assert torch.allclose(p.sum(-1), torch.ones(3, dtype=torch.float64), atol=1e-6)


def test_zero_final_layer_gives_uniform():
    clf = SpeakerClassifier(6, 5, 3, 16)
    with torch.no_grad():
        clf.output.weight.zero_()
        clf.output.bias.zero_()
    p = classify_speaker(torch.randn(4, 6), clf)
    assert torch.allclose(p, torch.full_like(p, 0.2))


def test_classifier_dimension_mismatch():
    with pytest.raises(ValueError):
        SpeakerClassifier(6, 3, 3, 16)(torch.zeros(1, 7))
    with pytest.raises(ValueError):
        SpeakerClassifier(6, 1)


def test_classifier_learns_separable_speakers():
    gen = torch.Generator().manual_seed(0)

    def sample(n):
        y = torch.randint(0, 2, (n,), generator=gen)
        centers = torch.zeros(2, 16)
        centers[0, 0], centers[1, 0] = -2.0, 2.0
        return centers[y] + 0.7 * torch.randn(n, 16, generator=gen), y

    torch.manual_seed(0)
    clf = SpeakerClassifier(16, 2, 3, 64)
    opt = torch.optim.Adam(clf.parameters(), lr=1e-3)
    for _ in range(300):
        x, y = sample(64)
        opt.zero_grad()
        nn.functional.cross_entropy(clf(x), y).backward()
        opt.step()
    x, y = sample(2000)
    acc = (clf(x).argmax(-1) == y).double().mean().item()
    assert acc > 0.95


# -- schedule ----------------------------------------------------------------

def _adversarial_setup(seed=0):
    torch.manual_seed(seed)
    enc = nn.Linear(8, 8)
    clf = SpeakerClassifier(8, 3, 2, 16)
    return enc, clf, torch.optim.Adam(enc.parameters(), 1e-2), torch.optim.Adam(clf.parameters(), 1e-2)


def test_eight_calls_update_encoder_twice():
    enc, clf, eo, co = _adversarial_setup()
    sched = AdversarialSchedule(4)
    turns = []
    for i in range(8):
        x, y = torch.randn(6, 8), torch.tensor([0, 1, 2, 0, 1, 2])
        turns.append(adversarial_step(enc, clf, x, y, sched, eo, co)["encoder_update"])
    assert (sched.calls, sched.classifier_updates, sched.encoder_updates) == (8, 8, 2)
    assert turns == [False, False, False, True] * 2


def test_encoder_only_moves_on_its_turn():
    enc, clf, eo, co = _adversarial_setup(1)
    sched = AdversarialSchedule(4)
    for i in range(4):
        before = [p.clone() for p in enc.parameters()]
        cls_before = [p.clone() for p in clf.parameters()]
        adversarial_step(enc, clf, torch.randn(6, 8), torch.tensor([0, 1, 2, 0, 1, 2]), sched, eo, co)
        moved = any(not torch.equal(a, b) for a, b in zip(before, enc.parameters()))
        assert moved == (i == 3)
        assert any(not torch.equal(a, b) for a, b in zip(cls_before, clf.parameters()))


def test_zero_lambda_leaves_encoder_unchanged():
    enc, clf, eo, co = _adversarial_setup(2)
    before = [p.clone() for p in enc.parameters()]
    sched = AdversarialSchedule(4)
    for _ in range(12):
        adversarial_step(enc, clf, torch.randn(6, 8), torch.tensor([0, 1, 2, 0, 1, 2]), sched, eo, co, lam=0.0)
    assert sched.encoder_updates == 3
    assert all(torch.equal(a, b) for a, b in zip(before, enc.parameters()))


def test_mismatched_labels_rejected():
    enc, clf, eo, co = _adversarial_setup()
    with pytest.raises(ValueError):
        adversarial_step(enc, clf, torch.randn(6, 8), torch.tensor([0, 1]), AdversarialSchedule(), eo, co)
    with pytest.raises(ValueError):
        adversarial_step(enc, clf, torch.randn(2, 8), torch.tensor([0, 5]), AdversarialSchedule(), eo, co)


def test_metrics_reported():
    enc, clf, eo, co = _adversarial_setup()
    m = adversarial_step(enc, clf, torch.randn(6, 8), torch.tensor([0, 1, 2, 0, 1, 2]), AdversarialSchedule(), eo, co)
    assert {"classifier_ce", "classifier_accuracy", "encoder_update"} <= m.keys()
    assert 0.0 <= m["classifier_accuracy"] <= 1.0


# -- freezing ----------------------------------------------------------------

def test_unfreezing_is_an_error():
    enc = freeze_prosody_encoder(small_encoder())
    assert not any(p.requires_grad for p in enc.parameters())
    with pytest.raises(FrozenModuleError):
        enc.requires_grad_(True)


def test_hundred_finetune_steps_leave_encoder_untouched():
    corpus = synthetic_corpus(2, 2, seed=4)
    cfg = ModelConfig.mini(mel_dim=80)
    base = pretrain(corpus, cfg, TrainingConfig(batch_size=2, warmup_steps=10, max_steps=4))
    before = prosody_checksum(model_from_checkpoint(base))
    spk = corpus.speakers[0]
    tuned = finetune(base, corpus.by_speaker(spk), TrainingConfig.finetune_default(batch_size=2, warmup_steps=10,
                                                                                   max_steps=100))
    model = model_from_checkpoint(tuned)
    assert prosody_checksum(model) == before
    assert model.prosody_encoder.frozen
    assert tuned.extra["prosody_frozen"] is True
    # everything else did move
    changed = [k for k in base.params if not k.startswith(("prosody_encoder.", "speaker_classifier."))
               and not torch.equal(base.params[k], tuned.params[k])]
    assert changed
