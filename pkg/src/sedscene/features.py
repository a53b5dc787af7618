"""Audio front end: WAV reading, STFT power spectra, mel filterbank,
64-dim log-mel maps, and the on-disk feature file format.

Defaults follow the working configuration: 40 ms Hann frames with 20 ms hop,
next-power-of-two FFT, HTK mel scale, log floor 1e-10.  A 10 s clip maps to
exactly 500 frames (the raw 499 frames are padded by repeating the last one).
"""

import struct
import wave
from dataclasses import dataclass

import numpy as np

LOG_FLOOR = 1e-10
FEATURE_MAGIC = b"JSFM1"


@dataclass
class AudioClip:
    samples: np.ndarray  # mono, float64 in [-1, 1]
    sample_rate: int

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class LogMelSpec:
    values: np.ndarray  # (n_mels, T)
    frame_len_ms: float
    hop_ms: float

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def read_wav(path) -> AudioClip:
    """Read a 16- or 24-bit PCM WAV; stereo is downmixed by channel mean."""
    with wave.open(str(path), "rb") as w:
        n_ch = w.getnchannels()
        width = w.getsampwidth()
        rate = w.getframerate()
        n = w.getnframes()
        raw = w.readframes(n)
    if n_ch not in (1, 2):
        raise ValueError(f"unsupported channel count {n_ch}")
    if width == 2:
        data = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    elif width == 3:
        if len(raw) % 3:
            raise ValueError("truncated 24-bit wav data")
        b = np.frombuffer(raw, dtype=np.uint8).reshape(-1, 3)
        vals = (b[:, 0].astype(np.int32)
                | (b[:, 1].astype(np.int32) << 8)
                | (b[:, 2].astype(np.int32) << 16))
        vals -= (vals & 0x800000) << 1  # sign extend
        data = vals.astype(np.float64) / 8388608.0
    else:
        raise ValueError(f"unsupported sample width {width * 8} bit")
    if len(data) != n * n_ch:
        raise ValueError("truncated wav file")
    if n_ch == 2:
        data = data.reshape(-1, 2).mean(axis=1)
    return AudioClip(samples=data, sample_rate=rate)


def write_wav(path, samples: np.ndarray, sample_rate: int) -> None:
    """16-bit mono PCM writer (used by the synthetic corpus renderer)."""
    q = np.clip(np.round(samples * 32767.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(q.tobytes())


def _next_pow2(n: int) -> int:
    p = 1
    while p < n:
        p *= 2
    return p


def stft_power(clip: AudioClip, frame_ms: float = 40.0, hop_ms: float = 20.0) -> np.ndarray:
    """Hann-windowed magnitude-squared DFT, (fft_size/2 + 1, T_raw)."""
    if frame_ms < hop_ms:
        raise ValueError("frame must be at least as long as hop")
    frame = int(round(clip.sample_rate * frame_ms / 1000.0))
    hop = int(round(clip.sample_rate * hop_ms / 1000.0))
    x = clip.samples
    if len(x) < frame:
        raise ValueError("clip shorter than one frame")
    n_frames = (len(x) - frame) // hop + 1
    fft_size = _next_pow2(frame)
    window = np.hanning(frame)
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = x[idx] * window
    spec = np.fft.rfft(frames, n=fft_size, axis=1)
    return (spec.real ** 2 + spec.imag ** 2).T


def mel_filterbank(n_fft_bins: int, sample_rate: int, n_mels: int = 64) -> np.ndarray:
    """Triangular filters on the HTK mel scale, spanning 0 Hz to Nyquist."""
    if n_mels >= n_fft_bins:
        raise ValueError("need fewer mel bands than FFT bins")
    fft_size = (n_fft_bins - 1) * 2
    mel_max = hz_to_mel(sample_rate / 2.0)
    mel_pts = np.linspace(0.0, mel_max, n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(n_fft_bins) * sample_rate / fft_size
    fb = np.zeros((n_mels, n_fft_bins))
    for m in range(n_mels):
        lo, mid, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (bin_hz - lo) / (mid - lo)
        down = (hi - bin_hz) / (hi - mid)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
    return fb


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def log_mel(power: np.ndarray, fb: np.ndarray, frame_ms: float = 40.0,
            hop_ms: float = 20.0) -> LogMelSpec:
    """ln(fb @ power + floor); no standardization (see FeatureStandardizer)."""
    if fb.shape[1] != power.shape[0]:
        raise ValueError(f"filterbank {fb.shape} does not match power {power.shape}")
    return LogMelSpec(values=np.log(fb @ power + LOG_FLOOR),
                      frame_len_ms=frame_ms, hop_ms=hop_ms)


def extract_log_mel(clip: AudioClip, frame_ms: float = 40.0, hop_ms: float = 20.0,
                    n_mels: int = 64) -> LogMelSpec:
    """Full pipeline with hop-aligned frame count.

    The raw frame count floor((n - frame)/hop) + 1 is padded up to
    floor(n / hop) by repeating the last frame, so a 10 s clip at the
    40/20 ms setting yields exactly 500 frames and label rolls align 1:1.
    """
    power = stft_power(clip, frame_ms, hop_ms)
    fb = mel_filterbank(power.shape[0], clip.sample_rate, n_mels)
    spec = log_mel(power, fb, frame_ms, hop_ms)
    hop = int(round(clip.sample_rate * hop_ms / 1000.0))
    target = len(clip.samples) // hop
    if spec.n_frames < target:
        pad = np.repeat(spec.values[:, -1:], target - spec.n_frames, axis=1)
        spec = LogMelSpec(np.concatenate([spec.values, pad], axis=1), frame_ms, hop_ms)
    return spec


class FeatureStandardizer:
    """Per-mel-bin mean/std computed on the training split only."""

    def __init__(self, mean: np.ndarray, std: np.ndarray):
        self.mean = np.asarray(mean, dtype=np.float64)
        self.std = np.asarray(std, dtype=np.float64)

    @classmethod
    def fit(cls, specs) -> "FeatureStandardizer":
        stacked = np.concatenate([np.asarray(s.values if isinstance(s, LogMelSpec) else s)
                                  for s in specs], axis=1)
        return cls(stacked.mean(axis=1), stacked.std(axis=1) + 1e-12)

    def apply(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean[:, None]) / self.std[:, None]


def save_features(path, values: np.ndarray) -> None:
    """Feature file: magic 'JSFM1', D, T, dtype code, row-major float data."""
    values = np.ascontiguousarray(values)
    code = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}.get(values.dtype)
    if code is None:
        values = values.astype(np.float32)
        code = 0
    with open(path, "wb") as f:
        f.write(FEATURE_MAGIC)
        f.write(struct.pack("<IIB", values.shape[0], values.shape[1], code))
        f.write(values.tobytes())


def load_features(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(5)
        if magic != FEATURE_MAGIC:
            raise ValueError(f"{path}: not a feature file (magic {magic!r})")
        d, t, code = struct.unpack("<IIB", f.read(9))
        dtype = {0: np.float32, 1: np.float64}[code]
        data = np.frombuffer(f.read(), dtype=dtype)
    if data.size != d * t:
        raise ValueError(f"{path}: truncated feature payload")
    return data.reshape(d, t).copy()
