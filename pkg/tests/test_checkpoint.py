import struct

import pytest
import torch

from prosody_vc.checkpoint import (FORMAT_VERSION, MAGIC, Checkpoint, StageError, check_transition, load_checkpoint,
                                   save_checkpoint)
from prosody_vc.config import ModelConfig, TrainingConfig
from prosody_vc.data import synthetic_corpus
from prosody_vc.training import model_from_checkpoint, pretrain


@pytest.fixture(scope="module")
def trained():
    corpus = synthetic_corpus(2, 2, seed=1)
    return pretrain(corpus, ModelConfig.mini(mel_dim=80), TrainingConfig(batch_size=2, warmup_steps=5, max_steps=2))


def test_save_load_save_is_byte_identical(trained, tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(trained, a)
    loaded = load_checkpoint(a)
    save_checkpoint(loaded, b)
    assert a.read_bytes() == b.read_bytes()
    assert loaded.stage == "pretrain" and loaded.global_step == 2
    assert loaded.parameter_bytes() == trained.parameter_bytes()


def test_loaded_model_and_optimizer_restore(trained, tmp_path):
    trained.save(tmp_path / "x.ckpt")
    back = Checkpoint.load(tmp_path / "x.ckpt")
    model = model_from_checkpoint(back)
    opt = torch.optim.Adam(model.tts_parameters())
    opt.load_state_dict(back.optimizers["tts"])
    assert opt.state_dict()["param_groups"][0]["betas"] == (0.9, 0.98)
    ref = trained.optimizers["tts"]["state"][0]["exp_avg"]
    assert torch.equal(back.optimizers["tts"]["state"][0]["exp_avg"], ref)


def test_header_layout(trained, tmp_path):
    trained.save(tmp_path / "x.ckpt")
    raw = (tmp_path / "x.ckpt").read_bytes()
    magic, version, head_len = struct.unpack_from("<8sIQ", raw)
    assert magic == MAGIC and version == FORMAT_VERSION
    assert raw[20:20 + head_len].startswith(b"{")


@pytest.mark.parametrize("cur,req,ok", [("pretrain", "finetune", True), ("pretrain", "pretrain", False),
                                        ("finetune", "finetune", False), ("finetune", "pretrain", False)])
def test_stage_transitions(cur, req, ok):
    if ok:
        check_transition(cur, req)
    else:
        with pytest.raises(StageError):
            check_transition(cur, req)


def test_unknown_stage_rejected():
    with pytest.raises(StageError):
        Checkpoint("warmup", 0, {}, {}, [])


def test_newer_version_rejected(trained, tmp_path):
    p = tmp_path / "x.ckpt"
    trained.save(p)
    raw = bytearray(p.read_bytes())
    struct.pack_into("<I", raw, 8, FORMAT_VERSION + 1)
    p.write_bytes(bytes(raw))
    with pytest.raises(ValueError, match="newer"):
        load_checkpoint(p)


def test_missing_and_foreign_files(tmp_path):
    with pytest.raises(FileNotFoundError, match="nope.ckpt"):
        load_checkpoint(tmp_path / "nope.ckpt")
    (tmp_path / "junk.ckpt").write_bytes(b"x" * 64)
    with pytest.raises(ValueError, match="not a checkpoint"):
        load_checkpoint(tmp_path / "junk.ckpt")


def test_failed_write_leaves_no_partial_file(tmp_path):
    bad = Checkpoint("pretrain", 0, {"x": object()}, {}, [])  # header not serializable
    with pytest.raises(TypeError):
        save_checkpoint(bad, tmp_path / "bad.ckpt")
    assert list(tmp_path.iterdir()) == []
