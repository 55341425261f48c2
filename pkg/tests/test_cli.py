import csv
import json

import numpy as np
import pytest

from prosody_vc.assets import clip_path
from prosody_vc.checkpoint import load_checkpoint
from prosody_vc.cli import main
from prosody_vc.data import write_synthetic_corpus
from prosody_vc.features import load_mel, load_waveform


def test_help_exits_zero(capsys):
    assert main(["convert", "--help"]) == 0
    assert "--source" in capsys.readouterr().out


def test_missing_checkpoint_names_path(tmp_path, capsys):
    missing = tmp_path / "absent.ckpt"
    code = main(["convert", "--checkpoint", str(missing), "--source", str(clip_path()), "--target", "x",
                 "--transcript", "hi", "--out-wav", str(tmp_path / "o.wav")])
    err = capsys.readouterr().err
    assert code == 1
    assert str(missing) in err and len(err.strip().splitlines()) == 1


def test_unknown_subcommand_and_flag(capsys):
    assert main(["transmogrify"]) == 2
    assert main(["eval-mos", "--ratings", "x.csv", "--bogus"]) == 2
    assert "usage" in capsys.readouterr().err


def test_no_command_is_usage_error(capsys):
    assert main([]) == 2


def test_dump_config_roundtrip(tmp_path, capsys):
    assert main(["--dump-config"]) == 0
    text = capsys.readouterr().out
    assert "hop_length: 300" in text and "warmup_steps: 4000" in text
    cfg = tmp_path / "exp.yaml"
    cfg.write_text(text.replace("hop_length: 300", "hop_length: 240"))
    assert main(["--config", str(cfg), "--dump-config"]) == 0
    assert "hop_length: 240" in capsys.readouterr().out


def test_bad_config_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "bad.yaml"
    cfg.write_text("features:\n  hop_lenght: 240\n")
    assert main(["--config", str(cfg), "--dump-config"]) == 1
    assert "hop_lenght" in capsys.readouterr().err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    manifest = write_synthetic_corpus(root / "data", n_speakers=2, utts_per_speaker=2, seed=5)
    solo = root / "solo.csv"
    with open(manifest) as fh, open(solo, "w", newline="") as out:
        rows = list(csv.DictReader(fh))
        w = csv.DictWriter(out, fieldnames=list(rows[0]))
        w.writeheader()
        for r in rows:
            if r["speaker_id"] == "spk1":
                w.writerow({**r, "audio_path": str(manifest.parent / r["audio_path"])})
    ckpt = root / "pre.ckpt"
    assert main(["pretrain", "--manifest", str(manifest), "--model-size", "mini", "--steps", "2",
                 "--batch-size", "2", "--out", str(ckpt), "--log", str(root / "log.jsonl")]) == 0
    return root, manifest, solo, ckpt


def test_pretrain_writes_checkpoint_and_log(workspace):
    root, _, _, ckpt = workspace
    c = load_checkpoint(ckpt)
    assert c.stage == "pretrain" and c.global_step == 2 and c.speakers == ["spk0", "spk1"]
    assert c.config["model"]["mel_dim"] == 80
    assert len((root / "log.jsonl").read_text().splitlines()) == 2


def test_pretrain_synthetic(tmp_path):
    out = tmp_path / "s.ckpt"
    assert main(["pretrain", "--synthetic", "2,1", "--model-size", "mini", "--steps", "1", "--out", str(out)]) == 0
    assert load_checkpoint(out).global_step == 1


def test_finetune_then_refuse_second_finetune(workspace, tmp_path, capsys):
    _, _, solo, ckpt = workspace
    out = tmp_path / "ft.ckpt"
    assert main(["finetune", "--checkpoint", str(ckpt), "--manifest", str(solo), "--steps", "1", "--out", str(out)]) == 0
    assert load_checkpoint(out).stage == "finetune"
    again = ["finetune", "--checkpoint", str(out), "--manifest", str(solo), "--steps", "1", "--out", str(tmp_path / "x")]
    assert main(again) == 1
    assert "finetune -> finetune" in capsys.readouterr().err.replace("'", "")


def test_convert_writes_outputs(workspace, tmp_path):
    _, _, _, ckpt = workspace
    wav, mel, meta = tmp_path / "o.wav", tmp_path / "o.mel", tmp_path / "o.json"
    assert main(["convert", "--checkpoint", str(ckpt), "--source", str(clip_path()), "--target", "spk0",
                 "--transcript", "a cat", "--prosody", "transfer", "--max-frames", "8", "--gl-iters", "2",
                 "--out-wav", str(wav), "--out-mel", str(mel), "--out-meta", str(meta)]) == 0
    info = json.loads(meta.read_text())
    assert info["prosody_mode"] == "transfer" and info["transcript"] == "a cat"
    assert load_mel(mel).frames.shape == (info["decode_frames"], 80)
    assert load_waveform(wav).sample_rate == 24000


def test_convert_with_transcript_file(workspace, tmp_path):
    root, manifest, _, ckpt = workspace
    source = next((manifest.parent).glob("*.wav"))
    meta = tmp_path / "m.json"
    assert main(["convert", "--checkpoint", str(ckpt), "--source", str(source), "--target", "spk1",
                 "--transcripts", str(manifest.parent / "transcripts.txt"), "--max-frames", "4", "--gl-iters", "1",
                 "--out-wav", str(tmp_path / "o.wav"), "--out-meta", str(meta)]) == 0
    assert json.loads(meta.read_text())["transcript"]


def test_codes_and_plots(workspace, tmp_path):
    _, manifest, _, ckpt = workspace
    codes = tmp_path / "codes.csv"
    assert main(["extract-codes", "--checkpoint", str(ckpt), "--manifest", str(manifest), "--out", str(codes)]) == 0
    coords = tmp_path / "xy.csv"
    assert main(["plot-codes", "--codes", str(codes), "--out", str(tmp_path / "codes.png"),
                 "--coords-out", str(coords)]) == 0
    assert (tmp_path / "codes.png").stat().st_size > 0
    assert len(coords.read_text().splitlines()) == 1 + 4
    assert main(["plot-mel", "--mel", str(clip_path()), "--out", str(tmp_path / "clip.png")]) == 0
    assert (tmp_path / "clip.png").read_bytes()[:4] == b"\x89PNG"


def test_eval_cer(tmp_path, capsys):
    (tmp_path / "ref.txt").write_text("u1\tthe cat sat\nu2\ta dog\n")
    (tmp_path / "hyp.txt").write_text("u1\tthe cat sat\nu2\ta frog\n")
    assert main(["eval-cer", "--ref", str(tmp_path / "ref.txt"), "--hyp", str(tmp_path / "hyp.txt"),
                 "--out", str(tmp_path / "per.csv")]) == 0
    assert "WER 20.000%" in capsys.readouterr().out
    (tmp_path / "short.txt").write_text("u1\tthe cat sat\n")
    assert main(["eval-cer", "--ref", str(tmp_path / "ref.txt"), "--hyp", str(tmp_path / "short.txt")]) == 1


def test_eval_mos(tmp_path, capsys):
    rows = ["listener_id,utterance_id,system_id,target_speaker,axis,score"]
    rows += [f"l{i},u1,w pc,TEF1,naturalness,{s}" for i, s in enumerate((3, 5))]
    rows += [f"l{i},u1,w pc,TEF1,similarity,{s}" for i, s in enumerate((4, 4))]
    (tmp_path / "r.csv").write_text("\n".join(rows) + "\n")
    assert main(["eval-mos", "--ratings", str(tmp_path / "r.csv"), "--out", str(tmp_path / "t.csv")]) == 0
    out = capsys.readouterr().out
    assert "4.000±1.960" in out and "4.000±0.000" in out and "Average" in out


def test_sweep_scale_outputs(workspace, tmp_path):
    _, _, _, ckpt = workspace
    out = tmp_path / "sweep"
    assert main(["sweep-scale", "--checkpoint", str(ckpt), "--source", str(clip_path()), "--target", "spk0",
                 "--transcript", "a cat", "--max-frames", "6", "--gl-iters", "1", "--out-dir", str(out)]) == 0
    tags = ["+3.0", "+1.5", "+1.0", "+0.0", "-1.5", "-3.0"]
    assert sorted(p.name for p in out.glob("mel_scale_*.png")) == sorted(f"mel_scale_{t}.png" for t in tags)
    assert sorted(p.name for p in out.glob("wav_scale_*.wav")) == sorted(f"wav_scale_{t}.wav" for t in tags)
    assert json.loads((out / "sweep.json").read_text())["scale0_equals_prosody_off"] is True
    assert np.isfinite(load_mel(out / "mel_scale_+1.5.mel").frames).all()
