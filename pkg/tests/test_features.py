import numpy as np
import pytest

from sedscene.features import (AudioClip, FeatureStandardizer, extract_log_mel,
                               hz_to_mel, load_features, log_mel,
                               mel_filterbank, read_wav, save_features,
                               stft_power, write_wav)


def test_read_wav_silence(tmp_path):
    write_wav(tmp_path / "s.wav", np.zeros(44100), 44100)
    clip = read_wav(tmp_path / "s.wav")
    assert clip.sample_rate == 44100
    assert len(clip.samples) == 44100
    assert np.all(clip.samples == 0)


def test_read_wav_16bit_scaling(tmp_path):
    import wave
    with wave.open(str(tmp_path / "h.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(np.array([16384], dtype="<i2").tobytes())
    clip = read_wav(tmp_path / "h.wav")
    assert abs(clip.samples[0] - 0.5) <= 1.0 / 32768


def test_read_wav_stereo_downmix(tmp_path):
    import wave
    left = np.full(100, 0.5)
    right = np.full(100, -0.5)
    inter = np.empty(200)
    inter[0::2] = left
    inter[1::2] = right
    q = np.round(inter * 32767).astype("<i2")
    with wave.open(str(tmp_path / "st.wav"), "wb") as w:
        w.setnchannels(2)
        w.setsampwidth(2)
        w.setframerate(8000)
        w.writeframes(q.tobytes())
    clip = read_wav(tmp_path / "st.wav")
    assert np.max(np.abs(clip.samples)) < 1e-4


def test_read_wav_24bit(tmp_path):
    import wave
    val = 1 << 22  # half of full scale
    b = val.to_bytes(3, "little", signed=True)
    with wave.open(str(tmp_path / "w24.wav"), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(3)
        w.setframerate(8000)
        w.writeframes(b * 10)
    clip = read_wav(tmp_path / "w24.wav")
    assert abs(clip.samples[0] - 0.5) < 1e-6


def test_stft_dc_concentration():
    clip = AudioClip(samples=np.ones(8000), sample_rate=8000)
    p = stft_power(clip, 40, 20)
    assert np.all(p[0] > 0)
    assert np.all(np.argmax(p, axis=0) == 0)
    # Hann mainlobe (plus zero padding) spreads DC over the lowest few bins
    assert p[:4].sum() > 0.99 * p.sum()


def test_stft_frame_count_10s():
    clip = AudioClip(samples=np.zeros(441000), sample_rate=44100)
    p = stft_power(clip, 40, 20)
    assert p.shape[1] == 499


def test_stft_bin_center_sinusoid():
    # 40 ms at 25.6 kHz is exactly 1024 samples, so bins align with the frame.
    # The Hann window spreads a bin-centered tone over the peak and its two
    # neighbours (amplitude ratios 0.25/0.5/0.25), so the peak bin alone
    # carries 2/3 of the energy and the 3-bin neighbourhood nearly all of it.
    sr = 25600
    bin_hz = sr / 1024
    freq = 100 * bin_hz
    t = np.arange(sr) / sr
    clip = AudioClip(samples=np.sin(2 * np.pi * freq * t), sample_rate=sr)
    p = stft_power(clip, 40, 20)
    frame_energy = p[:, 5]
    assert np.argmax(frame_energy) == 100
    total = frame_energy.sum()
    assert frame_energy[100] / total > 0.6
    assert frame_energy[99:102].sum() / total > 0.99


def test_stft_too_short():
    with pytest.raises(ValueError):
        stft_power(AudioClip(samples=np.zeros(10), sample_rate=8000), 40, 20)


def test_mel_formula_value():
    assert abs(hz_to_mel(700.0) - 2595 * np.log10(2)) < 1e-9


def test_mel_filterbank_shape_and_properties():
    fb = mel_filterbank(1025, 44100, 64)
    assert fb.shape == (64, 1025)
    assert np.all(fb >= 0)
    assert np.all(fb.sum(axis=1) > 0)
    from sedscene.features import hz_to_mel, mel_to_hz
    centers = mel_to_hz(np.linspace(0, hz_to_mel(22050), 66))[1:-1]
    assert np.all(np.diff(centers) > 0)
    peak_bins = [np.argmax(fb[m]) for m in range(64)]
    assert all(a <= b for a, b in zip(peak_bins, peak_bins[1:]))


def test_log_mel_zero_power_floor():
    fb = mel_filterbank(9, 8000, 4)
    spec = log_mel(np.zeros((9, 5)), fb)
    np.testing.assert_allclose(spec.values, np.log(1e-10))


def test_log_mel_doubling_law():
    rng = np.random.default_rng(0)
    p = rng.uniform(0.5, 2.0, size=(9, 5))
    fb = mel_filterbank(9, 8000, 4)
    a = log_mel(p, fb).values
    b = log_mel(2 * p, fb).values
    np.testing.assert_allclose(b - a, np.log(2), rtol=1e-6)


def test_log_mel_shapes():
    fb = np.ones((64, 1025))
    assert log_mel(np.ones((1025, 500)), fb).values.shape == (64, 500)
    with pytest.raises(ValueError):
        log_mel(np.ones((100, 5)), fb)


def test_extract_10s_clip_is_64x500():
    rng = np.random.default_rng(0)
    clip = AudioClip(samples=rng.normal(0, 0.1, size=441000), sample_rate=44100)
    spec = extract_log_mel(clip)
    assert spec.values.shape == (64, 500)


def test_extraction_deterministic(tmp_path):
    rng = np.random.default_rng(1)
    samples = rng.normal(0, 0.1, size=44100)
    write_wav(tmp_path / "a.wav", samples, 44100)
    a = extract_log_mel(read_wav(tmp_path / "a.wav")).values
    b = extract_log_mel(read_wav(tmp_path / "a.wav")).values
    np.testing.assert_array_equal(a, b)


def test_standardizer_train_stats():
    rng = np.random.default_rng(2)
    specs = [rng.normal(3.0, 2.0, size=(8, 50)) for _ in range(6)]
    std = FeatureStandardizer.fit(specs)
    stacked = np.concatenate([std.apply(s) for s in specs], axis=1)
    assert np.max(np.abs(stacked.mean(axis=1))) < 1e-6
    assert np.max(np.abs(stacked.std(axis=1) - 1.0)) < 1e-6


def test_feature_file_roundtrip(tmp_path):
    rng = np.random.default_rng(3)
    values = rng.normal(size=(64, 500)).astype(np.float32)
    save_features(tmp_path / "x.feat", values)
    back = load_features(tmp_path / "x.feat")
    np.testing.assert_array_equal(back, values)


def test_feature_file_bad_magic(tmp_path):
    (tmp_path / "bad.feat").write_bytes(b"NOTIT" + b"\x00" * 16)
    with pytest.raises(ValueError):
        load_features(tmp_path / "bad.feat")
