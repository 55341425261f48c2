import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.io import wavfile

from prosody_vc.config import FeatureConfig
from prosody_vc.features import (CHARACTERS, EOS_ID, VOCAB, AudioError, MelSpectrogram, VocabularyError, Waveform,
                                 detokenize, load_mel, load_waveform, mel_band_centers, mel_spectrogram,
                                 normalize_text, save_mel, save_waveform, tokenize)

CFG = FeatureConfig()


def test_one_second_file_has_24000_samples(tmp_path):
    path = tmp_path / "one.wav"
    wavfile.write(path, 24000, np.zeros(24000, dtype=np.int16))
    w = load_waveform(path)
    assert len(w) == 24000 and w.sample_rate == 24000
    assert np.all(w.samples == 0.0)


def test_full_scale_int16_maps_to_32767_over_32768(tmp_path):
    path = tmp_path / "fs.wav"
    wavfile.write(path, 24000, np.array([32767, -32768, 0], dtype=np.int16))
    w = load_waveform(path)
    assert w.samples[0] == 32767 / 32768
    assert w.samples[1] == -1.0


def test_resampling_to_configured_rate(tmp_path):
    path = tmp_path / "16k.wav"
    wavfile.write(path, 16000, (0.3 * np.sin(np.arange(16000) * 0.05)).astype(np.float32))
    w = load_waveform(path, 24000)
    assert w.sample_rate == 24000 and len(w) == 24000
    assert np.max(np.abs(w.samples)) <= 1.0


def test_load_errors_name_the_path(tmp_path):
    with pytest.raises(AudioError, match="missing.wav"):
        load_waveform(tmp_path / "missing.wav")
    bad = tmp_path / "garbage.wav"
    bad.write_bytes(b"not a wav file at all")
    with pytest.raises(AudioError, match="garbage.wav"):
        load_waveform(bad)


def test_save_load_roundtrip(tmp_path):
    x = np.linspace(-0.5, 0.5, 4800)
    save_waveform(tmp_path / "x.wav", Waveform(x, 24000))
    y = load_waveform(tmp_path / "x.wav")
    assert np.max(np.abs(x - y.samples)) <= 1 / 32768


def test_silence_is_log_floor_everywhere():
    mel = mel_spectrogram(Waveform(np.zeros(4800), 24000), CFG)
    assert np.all(mel.frames == np.log(CFG.log_floor))


def test_frame_count_center_padding():
    # center padding: T = 1 + n // hop = 1 + 2400 // 300
    mel = mel_spectrogram(Waveform(np.random.default_rng(0).normal(0, 0.1, 2400), 24000), CFG)
    assert mel.frames.shape == (9, 80)


def test_too_short_waveform_names_minimum():
    with pytest.raises(AudioError, match="1200"):
        mel_spectrogram(Waveform(np.zeros(1000), 24000), CFG)


def test_pure_tone_peaks_at_nearest_band():
    # oracle: band centers from the mel formula directly, nearest to 1 kHz
    lo, hi = 2595 * np.log10(1 + 80 / 700), 2595 * np.log10(1 + 7600 / 700)
    pts = 700 * (10 ** (np.linspace(lo, hi, 82) / 2595) - 1)
    expected = int(np.argmin(np.abs(pts[1:-1] - 1000.0)))
    assert np.allclose(mel_band_centers(CFG), pts[1:-1])
    t = np.arange(24000) / 24000
    mel = mel_spectrogram(Waveform(0.5 * np.sin(2 * np.pi * 1000 * t), 24000), CFG)
    interior = mel.frames[2:-2]
    assert np.all(interior.argmax(axis=1) == expected)


def test_mel_is_deterministic_and_80_wide():
    x = np.random.default_rng(1).normal(0, 0.2, 5000)
    a, b = mel_spectrogram(Waveform(x, 24000), CFG), mel_spectrogram(Waveform(x, 24000), CFG)
    assert a.frames.shape[1] == 80
    assert a.frames.tobytes() == b.frames.tobytes()


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(1200, 6000))
def test_doubling_amplitude_never_decreases_mel(seed, n):
    x = np.random.default_rng(seed).uniform(-0.4, 0.4, n)
    a = mel_spectrogram(Waveform(x, 24000), CFG).frames
    b = mel_spectrogram(Waveform(2 * x, 24000), CFG).frames
    assert a.shape[1] == 80
    assert np.all(b >= a)


def test_mel_container_roundtrip(tmp_path):
    frames = np.random.default_rng(2).normal(size=(7, 80)).astype(np.float32)
    mel = MelSpectrogram(frames, 300, 1200, 24000)
    save_mel(tmp_path / "a.mel", mel)
    back = load_mel(tmp_path / "a.mel")
    assert np.array_equal(back.frames, frames)
    assert (back.hop_length, back.win_length, back.sample_rate) == (300, 1200, 24000)
    raw = (tmp_path / "a.mel").read_bytes()
    assert len(raw) == 8 + 6 * 4 + 7 * 80 * 4


def test_win_length_longer_than_fft_rejected():
    with pytest.raises(ValueError):
        FeatureConfig(n_fft=1024, win_length=1200)


# -- text -------------------------------------------------------------------

def test_single_char():
    seq = tokenize("a")
    assert seq.tokens == (VOCAB.index("a"), EOS_ID)
    assert seq.length == 2


def test_normalization_collapses_case_and_space():
    assert tokenize("Hello  WORLD") == tokenize("hello world")


def test_apostrophe_counts_as_content():
    seq = tokenize("ab'c")
    assert seq.length == 5 and seq.tokens[2] == VOCAB.index("'")


def test_out_of_vocabulary_lists_characters():
    with pytest.raises(VocabularyError, match=r"\['#', '@'\]"):
        tokenize("a@b#")


def test_empty_text_rejected():
    with pytest.raises(VocabularyError):
        tokenize("   ")


@given(st.text(alphabet=CHARACTERS + "ABCXYZ \t\n", min_size=1, max_size=40))
def test_detokenize_inverts_tokenize(text):
    if not normalize_text(text):
        return
    assert detokenize(tokenize(text)) == normalize_text(text)


def test_stft_frame_count_for_very_short_signals():
    from prosody_vc.features import stft
    for n in (0, 1, 299, 600, 1024, 1025, 3000):
        assert stft(np.zeros(n), CFG).shape == (1 + n // 300, 1025)
