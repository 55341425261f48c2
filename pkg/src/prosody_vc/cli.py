"""Command-line entry point: ``prosody-vc <subcommand> ...``."""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint
from .config import ExperimentConfig, ModelConfig
from .features import AudioError, VocabularyError, load_mel, load_waveform, mel_spectrogram, save_mel, save_waveform

log = logging.getLogger("prosody_vc")

SIZES = {"full": ModelConfig.full, "desk": ModelConfig.desk, "mini": ModelConfig.mini}


class CLIError(Exception):
    pass


def _common() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("global options")
    g.add_argument("--config", default=argparse.SUPPRESS, help="experiment config (YAML)")
    g.add_argument("--checkpoint", default=argparse.SUPPRESS, help="checkpoint to read")
    g.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    g.add_argument("--deterministic", action="store_true", default=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _common()
    parser = argparse.ArgumentParser(prog="prosody-vc", parents=[common],
                                     description="Recognition-synthesis voice conversion with prosody transfer.")
    parser.add_argument("--dump-config", action="store_true", help="print the full default config and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, help_):
        return sub.add_parser(name, parents=[common], help=help_, description=help_)

    p = add("pretrain", "multi-speaker pretraining")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest", help="CSV: utterance_id, audio_path, transcript, speaker_id")
    src.add_argument("--synthetic", metavar="SPEAKERS,UTTS", help="use the built-in synthetic corpus")
    p.add_argument("--out", required=True, help="output checkpoint")
    p.add_argument("--steps", type=int, help="override max_steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--model-size", choices=sorted(SIZES), help="override the config's model section")
    p.add_argument("--log", help="JSON-lines training log")
    p.add_argument("--checkpoint-dir")

    p = add("finetune", "adapt a pretrained checkpoint to one target speaker")
    p.add_argument("--manifest", required=True)
    p.add_argument("--speaker", help="target speaker id (default: the manifest's only speaker)")
    p.add_argument("--speaker-vector", help=".npy file with an external speaker embedding")
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--log")
    p.add_argument("--checkpoint-dir")

    def transcript_args(p):
        g = p.add_mutually_exclusive_group()
        g.add_argument("--transcript", help="text to synthesize (bypasses recognition)")
        g.add_argument("--transcripts", help="file of '<utterance id>\\t<text>' lines")
        g.add_argument("--asr-command", help="recognizer command; '{audio}' is replaced by the source path")

    p = add("convert", "convert one source utterance to a target speaker")
    p.add_argument("--source", required=True, help="source WAV")
    p.add_argument("--target", required=True, help="target speaker id")
    transcript_args(p)
    p.add_argument("--prosody", choices=("off", "transfer"))
    p.add_argument("--scale", type=float, help="prosody code scale (transfer mode)")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--gl-iters", type=int)
    p.add_argument("--out-wav", required=True)
    p.add_argument("--out-mel")
    p.add_argument("--out-meta")

    p = add("extract-codes", "export prosody codes for every utterance in a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="CSV: utterance_id, speaker_id, code columns")

    p = add("eval-cer", "character and word error rates")
    p.add_argument("--ref", required=True, help="reference '<id>\\t<text>' file")
    p.add_argument("--hyp", required=True, help="hypothesis '<id>\\t<text>' file")
    p.add_argument("--out", help="per-utterance CSV")

    p = add("eval-mos", "mean opinion scores with 95%% confidence intervals")
    p.add_argument("--ratings", required=True,
                   help="CSV: listener_id, utterance_id, system_id, target_speaker, axis, score")
    p.add_argument("--pooled", action="store_true", help="one row per system instead of per target speaker")
    p.add_argument("--out", help="CSV copy of the table")

    p = add("plot-codes", "2-D projection of exported prosody codes")
    p.add_argument("--codes", required=True)
    p.add_argument("--out", required=True, help="PNG")
    p.add_argument("--method", choices=("pca", "tsne"), default="pca")
    p.add_argument("--coords-out", help="CSV of projected coordinates")

    p = add("plot-mel", "render a mel spectrogram (mel container or WAV) to PNG")
    p.add_argument("--mel", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--title", default="")

    p = add("sweep-scale", "synthesize one utterance at several prosody scales")
    p.add_argument("--source", required=True, help="WAV whose prosody code is scaled")
    p.add_argument("--target", required=True)
    transcript_args(p)
    p.add_argument("--scales", type=float, nargs="+")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--gl-iters", type=int)
    p.add_argument("--out-dir", required=True)
    return parser


# ---------------------------------------------------------------------------

def _config(args) -> ExperimentConfig:
    path = getattr(args, "config", None)
    if path is None:
        return ExperimentConfig()
    if not Path(path).exists():
        raise CLIError(f"config file not found: {path}")
    return ExperimentConfig.load(path)


def _checkpoint(args) -> Checkpoint:
    path = getattr(args, "checkpoint", None)
    if path is None:
        raise CLIError("--checkpoint is required")
    if not Path(path).exists():
        raise CLIError(f"checkpoint not found: {path}")
    return Checkpoint.load(path)


def _seeded(args, train_cfg):
    changes = {}
    if hasattr(args, "seed"):
        changes["seed"] = args.seed
    if getattr(args, "deterministic", False):
        changes["deterministic"] = True
    if getattr(args, "steps", None) is not None:
        changes["max_steps"] = args.steps
    if getattr(args, "batch_size", None) is not None:
        changes["batch_size"] = args.batch_size
    return dataclasses.replace(train_cfg, **changes)


def _progress(trainer, record):
    if trainer.stage_step % 50 == 0:
        log.info("step %d  mel_l1 %.4f  stop %.4f", record["step"], record["mel_l1"], record["stop"])


def cmd_pretrain(args) -> None:
    from .data import load_manifest, synthetic_corpus
    from .training import pretrain
    cfg = _config(args)
    model_cfg = SIZES[args.model_size]() if args.model_size else cfg.model
    if args.synthetic:
        try:
            n_spk, n_utt = (int(v) for v in args.synthetic.split(","))
        except ValueError:
            raise CLIError("--synthetic expects SPEAKERS,UTTS") from None
        corpus = synthetic_corpus(n_spk, n_utt, seed=getattr(args, "seed", 0), feature_cfg=cfg.features)
    else:
        corpus = load_manifest(args.manifest, cfg.features)
    if model_cfg.mel_dim != cfg.features.n_mels:
        model_cfg = dataclasses.replace(model_cfg, mel_dim=cfg.features.n_mels)
    ckpt = pretrain(corpus, model_cfg, _seeded(args, cfg.pretrain), cfg.features, log_path=args.log,
                    checkpoint_dir=args.checkpoint_dir, callback=_progress)
    ckpt.save(args.out)
    print(f"wrote {args.out} (stage={ckpt.stage}, step={ckpt.global_step}, speakers={len(ckpt.speakers)})")


def cmd_finetune(args) -> None:
    from .data import load_manifest
    from .training import finetune
    cfg = _config(args)
    ckpt = _checkpoint(args)
    corpus = load_manifest(args.manifest, cfg.features)
    vec = np.load(args.speaker_vector) if args.speaker_vector else None
    out = finetune(ckpt, corpus, _seeded(args, cfg.finetune), target_speaker=args.speaker, speaker_vector=vec,
                   log_path=args.log, checkpoint_dir=args.checkpoint_dir, callback=_progress)
    out.save(args.out)
    print(f"wrote {args.out} (stage={out.stage}, step={out.global_step})")


def _provider(args):
    from .pipeline import CommandTranscriptProvider, FileTranscriptProvider
    if getattr(args, "transcripts", None):
        return FileTranscriptProvider(args.transcripts)
    if getattr(args, "asr_command", None):
        return CommandTranscriptProvider(args.asr_command)
    return None


def cmd_convert(args) -> None:
    from .pipeline import ConversionRequest, Converter
    cfg = _config(args)
    ckpt = _checkpoint(args)
    pc = cfg.pipeline
    req = ConversionRequest(args.source, args.target, args.transcript, args.prosody or pc.prosody_mode,
                            pc.prosody_scale if args.scale is None else args.scale,
                            args.max_frames or pc.max_decode_frames, args.gl_iters or pc.griffin_lim_iters,
                            getattr(args, "seed", pc.inference_seed))
    result = Converter(ckpt, provider=_provider(args)).convert(req)
    save_waveform(args.out_wav, result.waveform)
    if args.out_mel:
        save_mel(args.out_mel, result.mel)
    if args.out_meta:
        Path(args.out_meta).write_text(json.dumps(result.metadata, indent=2))
    flag = " (truncated at max frames)" if result.metadata["truncated"] else ""
    print(f"wrote {args.out_wav}: {result.metadata['decode_frames']} frames{flag}")


def cmd_extract_codes(args) -> None:
    from .data import load_manifest
    from .evaluation import write_codes_csv
    from .features import MelSpectrogram
    from .pipeline import encode_prosody
    from .training import model_from_checkpoint
    ckpt = _checkpoint(args)
    cfg = _config(args)
    corpus = load_manifest(args.manifest, cfg.features)
    model = model_from_checkpoint(ckpt)
    codes = [encode_prosody(model, MelSpectrogram(u.mel, cfg.features.hop_length, cfg.features.win_length,
                                                  cfg.features.sample_rate)).numpy() for u in corpus.utterances]
    write_codes_csv(args.out, [u.utt_id for u in corpus.utterances], [u.speaker for u in corpus.utterances],
                    np.stack(codes))
    print(f"wrote {len(codes)} codes to {args.out}")


def cmd_eval_cer(args) -> None:
    from .evaluation import error_rates, read_transcript_table, write_rows_csv
    ref, hyp = read_transcript_table(args.ref), read_transcript_table(args.hyp)
    missing = sorted(set(ref) - set(hyp))
    if missing:
        raise CLIError(f"hypotheses missing for {len(missing)} utterances, e.g. {missing[0]}")
    ids = sorted(ref)
    report = error_rates([ref[i] for i in ids], [hyp[i] for i in ids])
    print(report.format())
    if args.out:
        rows = []
        for i in ids:
            r = error_rates([ref[i]], [hyp[i]])
            rows.append([i, f"{r.cer:.6f}", f"{r.wer:.6f}"])
        write_rows_csv(args.out, rows, ("utterance_id", "cer", "wer"))


def cmd_eval_mos(args) -> None:
    from .evaluation import format_table, mos_table, read_ratings, write_rows_csv
    ratings = read_ratings(args.ratings)
    rows = mos_table(ratings, by_target=not args.pooled)
    header = ("Target", "System", "Naturalness", "Similarity")
    print(format_table(rows, header))
    if args.out:
        write_rows_csv(args.out, rows, header)


def cmd_plot_codes(args) -> None:
    from .evaluation import mixing_score, project_codes, read_codes_csv, write_rows_csv
    from .plotting import plot_codes
    ids, spk, codes = read_codes_csv(args.codes)
    pts = project_codes(codes, args.method, seed=getattr(args, "seed", 0))
    plot_codes(pts, spk, args.out)
    if args.coords_out:
        write_rows_csv(args.coords_out, [[i, s, repr(float(x)), repr(float(y))] for i, s, (x, y) in zip(ids, spk, pts)],
                       ("utterance_id", "speaker_id", "x", "y"))
    msg = f"wrote {args.out}"
    try:
        msg += f"; mixing score {mixing_score(codes, spk):.3f}"
    except ValueError:
        pass
    print(msg)


def cmd_plot_mel(args) -> None:
    from .plotting import plot_mel
    path = Path(args.mel)
    if not path.exists():
        raise CLIError(f"mel file not found: {path}")
    if path.suffix.lower() == ".wav":
        cfg = _config(args)
        mel = mel_spectrogram(load_waveform(path, cfg.features.sample_rate), cfg.features)
    else:
        mel = load_mel(path)
    plot_mel(mel.frames, args.out, args.title, mel.hop_length / mel.sample_rate)
    print(f"wrote {args.out}")


def cmd_sweep_scale(args) -> None:
    from .pipeline import Converter, ConversionRequest, encode_prosody, griffin_lim, sweep_scales
    from .plotting import plot_mel
    from .features import MelSpectrogram
    cfg = _config(args)
    ckpt = _checkpoint(args)
    conv = Converter(ckpt, provider=_provider(args))
    seed = getattr(args, "seed", cfg.pipeline.inference_seed)
    text = conv.transcript(ConversionRequest(args.source, args.target, args.transcript))
    fc = conv.feature_cfg
    code = encode_prosody(conv.model, mel_spectrogram(load_waveform(args.source, fc.sample_rate), fc))
    scales = tuple(args.scales) if args.scales else cfg.pipeline.sweep_scales
    results = sweep_scales(conv, text, args.target, code, scales, args.max_frames or cfg.pipeline.max_decode_frames,
                           seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    summary = {"transcript": text, "scales": {}}
    for s in scales:
        r = results[s]
        frames = r.mel.numpy()
        tag = f"{s:+.1f}"
        plot_mel(frames, out_dir / f"mel_scale_{tag}.png", f"prosody scale {tag}", fc.hop_length / fc.sample_rate)
        mel = MelSpectrogram(frames, fc.hop_length, fc.win_length, fc.sample_rate)
        save_mel(out_dir / f"mel_scale_{tag}.mel", mel)
        save_waveform(out_dir / f"wav_scale_{tag}.wav",
                      griffin_lim(mel, args.gl_iters or cfg.pipeline.griffin_lim_iters, fc, seed=seed))
        summary["scales"][tag] = {"frames": r.n_frames, "truncated": r.truncated}
    if 0.0 in results:
        summary["scale0_equals_prosody_off"] = bool(torch.equal(results[0.0].mel, results[None].mel))
    (out_dir / "sweep.json").write_text(json.dumps(summary, indent=2))
    print(f"wrote {len(scales)} mel plots and waveforms to {out_dir}")


COMMANDS = {"pretrain": cmd_pretrain, "finetune": cmd_finetune, "convert": cmd_convert,
            "extract-codes": cmd_extract_codes, "eval-cer": cmd_eval_cer, "eval-mos": cmd_eval_mos,
            "plot-codes": cmd_plot_codes, "plot-mel": cmd_plot_mel, "sweep-scale": cmd_sweep_scale}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        if args.dump_config:
            print(_config(args).dump(), end="")
            return 0
        if not args.command:
            parser.print_usage(sys.stderr)
            return 2
        if getattr(args, "deterministic", False):
            torch.use_deterministic_algorithms(True)
        COMMANDS[args.command](args)
    except (CLIError, AudioError, VocabularyError, FileNotFoundError, ValueError, KeyError, RuntimeError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"prosody-vc: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main_entry():
    sys.exit(main())
