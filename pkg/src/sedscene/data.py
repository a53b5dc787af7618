"""Corpus handling: TUT-style manifests and annotations, frame-aligned
target rolls, deterministic splits, and a synthetic scene/event corpus
generator for desk-scale experiments.

Annotation files are tab-separated, one event per line: onset seconds,
offset seconds, label.  Manifests are tab-separated: clip id, audio or
feature path, scene label, annotation path, optional split tag.
"""

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import features as feat
from .tensorops import derive_rng


@dataclass
class EventSpan:
    onset: float
    offset: float
    label: str

    def __post_init__(self):
        if not (0 <= self.onset < self.offset):
            raise ValueError(f"bad span [{self.onset}, {self.offset})")


@dataclass
class ClipRecord:
    clip_id: str
    path: str              # audio (.wav) or feature (.feat) file
    scene: str
    spans: list = field(default_factory=list)
    split: str = ""        # train / dev / eval, may be empty


def parse_annotations(path) -> list:
    spans = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) < 3:
                raise ValueError(f"{path}:{ln}: expected onset<TAB>offset<TAB>label")
            spans.append(EventSpan(float(parts[0]), float(parts[1]), parts[2]))
    return spans


def write_annotations(path, spans):
    with open(path, "w") as f:
        for s in spans:
            f.write(f"{s.onset:.6f}\t{s.offset:.6f}\t{s.label}\n")


def load_manifest(path, scene_vocab=None, event_vocab=None) -> list:
    """Parse a manifest and its annotation files; deterministic order by clip id.

    When a fixed vocabulary is supplied, unknown labels raise."""
    path = Path(path)
    base = path.parent
    records = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.rstrip("\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) < 4:
                raise ValueError(f"{path}:{ln}: expected clip<TAB>path<TAB>scene<TAB>annotations[<TAB>split]")
            clip_id, data_path, scene, ann_path = parts[:4]
            split = parts[4] if len(parts) > 4 else ""
            if scene_vocab is not None and scene not in scene_vocab:
                raise ValueError(f"{path}:{ln}: unknown scene {scene!r}")
            spans = parse_annotations(base / ann_path) if ann_path and ann_path != "-" else []
            if event_vocab is not None:
                for s in spans:
                    if s.label not in event_vocab:
                        raise ValueError(f"unknown event label {s.label!r} in {ann_path}")
            records.append(ClipRecord(clip_id, str(base / data_path), scene, spans, split))
    records.sort(key=lambda r: r.clip_id)
    return records


def save_manifest(path, records):
    path = Path(path)
    with open(path, "w") as f:
        for r in sorted(records, key=lambda r: r.clip_id):
            ann = f"{r.clip_id}.ann"
            f.write(f"{r.clip_id}\t{Path(r.path).name}\t{r.scene}\t{ann}\t{r.split}\n")
            write_annotations(path.parent / ann, r.spans)


def collect_vocab(records):
    scenes = sorted({r.scene for r in records})
    events = sorted({s.label for r in records for s in r.spans})
    return scenes, events


def make_target_roll(spans, event_index: dict, n_events: int, n_frames: int,
                     hop_s: float) -> np.ndarray:
    """roll[m, t] = 1 iff frame [t*hop, (t+1)*hop) overlaps the span with
    positive length.  Spans past the clip end are clamped with a warning."""
    roll = np.zeros((n_events, n_frames), dtype=np.int8)
    clip_len = n_frames * hop_s
    for span in spans:
        m = event_index[span.label]
        if m >= n_events:
            raise ValueError(f"event index {m} out of range")
        onset, offset = span.onset, span.offset
        if offset > clip_len + 1e-9:
            warnings.warn(f"span [{onset}, {offset}) beyond clip end {clip_len}; clamped")
            offset = clip_len
        if onset >= offset:
            continue
        t0 = int(np.floor(onset / hop_s + 1e-9))
        t1 = int(np.ceil(offset / hop_s - 1e-9))
        roll[m, max(0, t0):min(n_frames, t1)] = 1
    return roll


def roll_to_spans(roll, event_names, hop_s: float) -> list:
    """Inverse of make_target_roll: active runs become spans."""
    spans = []
    roll = np.asarray(roll)
    for m, name in enumerate(event_names):
        row = np.concatenate([[0], roll[m], [0]])
        starts = np.where(np.diff(row) == 1)[0]
        ends = np.where(np.diff(row) == -1)[0]
        for a, b in zip(starts, ends):
            spans.append(EventSpan(a * hop_s, b * hop_s, name))
    return spans


def split_corpus(records, ratios=(0.7, 0.15, 0.15), seed: int = 0) -> list:
    """Deterministic stratified-by-scene shuffle into train/dev/eval tags."""
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("ratios must sum to 1")
    tags = ("train", "dev", "eval")
    by_scene: dict[str, list] = {}
    for r in sorted(records, key=lambda r: r.clip_id):
        by_scene.setdefault(r.scene, []).append(r)
    for scene, group in sorted(by_scene.items()):
        rng = derive_rng(seed, f"split/{scene}")
        order = rng.permutation(len(group))
        n = len(group)
        n_train = int(round(ratios[0] * n))
        n_dev = int(round(ratios[1] * n))
        for rank, idx in enumerate(order):
            if rank < n_train:
                group[idx].split = tags[0]
            elif rank < n_train + n_dev:
                group[idx].split = tags[1]
            else:
                group[idx].split = tags[2]
    return records


@dataclass
class SynthConfig:
    """Synthetic corpus: per-scene ambience (spectral tilt) plus per-event
    band-limited activity, with scene-conditioned event priors.

    prior[scene][event]: target fraction of frames the event is active in
    clips of that scene.  Events occupy disjoint mel bands so a small model
    can separate them; event acoustics are emitted directly as log-mel
    feature maps unless render_audio is set.
    """
    scenes: tuple = ("square", "workshop", "arcade", "greenhouse")
    events: tuple = tuple(f"event{i}" for i in range(10))
    prior: dict | None = None       # scene -> event -> activity fraction
    clip_seconds: float = 10.0
    hop_s: float = 0.02
    n_mels: int = 64
    burst_seconds: tuple = (0.4, 2.0)
    event_gain: float = 3.0
    noise_std: float = 0.35
    ambience_gain: float = 1.5
    render_audio: bool = False
    sample_rate: int = 16000
    seed: int = 0

    def n_frames(self) -> int:
        return int(round(self.clip_seconds / self.hop_s))

    def default_prior(self) -> dict:
        """Strong scene<->event coupling: each scene owns a disjoint subset
        of frequent events; the rest are rare everywhere."""
        prior = {}
        n_s, n_e = len(self.scenes), len(self.events)
        for si, scene in enumerate(self.scenes):
            row = {}
            for ei, event in enumerate(self.events):
                row[event] = 0.45 if ei % n_s == si else 0.02
            prior[scene] = row
        return prior

    def event_band(self, event_idx: int):
        """Disjoint mel band for each event, upper half of the axis left for
        ambience tilt contrast."""
        width = self.n_mels // len(self.events)
        lo = event_idx * width
        return lo, lo + max(2, width - 1)


def _draw_spans(cfg: SynthConfig, rng, p_active: float) -> list:
    """Alternating active/gap runs whose expected coverage is p_active."""
    if p_active <= 0:
        return []
    spans = []
    lo, hi = cfg.burst_seconds
    mean_burst = (lo + hi) / 2
    mean_gap = max(1e-3, mean_burst * (1 - p_active) / max(p_active, 1e-6))
    t = float(rng.exponential(mean_gap)) if p_active < 1 else 0.0
    while t < cfg.clip_seconds:
        dur = float(rng.uniform(lo, hi))
        end = min(t + dur, cfg.clip_seconds)
        if end - t > 1e-6:
            spans.append((t, end))
        t = end + float(rng.exponential(mean_gap))
    return spans


def scene_profile(cfg: SynthConfig, scene_idx: int) -> np.ndarray:
    """Per-scene ambience: a distinct spectral tilt over the mel axis."""
    x = np.linspace(-1, 1, cfg.n_mels)
    n = len(cfg.scenes)
    phase = 2 * np.pi * scene_idx / n
    return cfg.ambience_gain * np.cos(np.pi * x * (1 + scene_idx) / 2 + phase)


def render_feature_map(cfg: SynthConfig, scene_idx: int, roll: np.ndarray,
                       rng) -> np.ndarray:
    """Log-mel-domain rendering: ambience profile + noise + event band boosts."""
    T = roll.shape[1]
    base = scene_profile(cfg, scene_idx)[:, None] + rng.normal(
        0.0, cfg.noise_std, size=(cfg.n_mels, T))
    for m in range(roll.shape[0]):
        lo, hi = cfg.event_band(m)
        base[lo:hi] += cfg.event_gain * roll[m][None, :]
    return base.astype(np.float32)


def render_audio_clip(cfg: SynthConfig, scene_idx: int, roll: np.ndarray,
                      rng) -> np.ndarray:
    """Time-domain rendering: FFT-shaped ambience noise plus band-limited
    noise bursts per active event frame."""
    sr = cfg.sample_rate
    n = int(cfg.clip_seconds * sr)
    spectrum_shape = np.interp(
        np.linspace(0, 1, n // 2 + 1),
        np.linspace(0, 1, cfg.n_mels),
        np.exp(scene_profile(cfg, scene_idx) * 0.5))
    white = rng.normal(size=n)
    amb = np.fft.irfft(np.fft.rfft(white) * spectrum_shape, n=n)
    amb *= 0.05 / (np.std(amb) + 1e-12)
    sig = amb
    hop = int(cfg.hop_s * sr)
    freqs = np.fft.rfftfreq(n, 1 / sr)
    mel_edges = feat.mel_to_hz(np.linspace(0, feat.hz_to_mel(sr / 2), cfg.n_mels + 1))
    for m in range(roll.shape[0]):
        if not roll[m].any():
            continue
        lo_bin, hi_bin = cfg.event_band(m)
        f_lo, f_hi = mel_edges[lo_bin], mel_edges[min(hi_bin, cfg.n_mels)]
        band = rng.normal(size=n)
        mask = (freqs >= f_lo) & (freqs < f_hi)
        band = np.fft.irfft(np.fft.rfft(band) * mask, n=n)
        band *= 0.15 / (np.std(band) + 1e-12)
        gate = np.repeat(roll[m].astype(np.float64), hop)[:n]
        sig = sig + band * gate
    peak = np.max(np.abs(sig))
    if peak > 0.99:
        sig = sig * (0.99 / peak)
    return sig


def synth_corpus(cfg: SynthConfig, out_dir, n_clips: int) -> list:
    """Generate clips, annotations, and a manifest under out_dir.

    Scenes are drawn uniformly; spans per the scene prior; the annotation
    and the rendered activity come from the same draw, so they agree
    exactly.  The RNG is split per clip id."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    prior = cfg.prior if cfg.prior is not None else cfg.default_prior()
    event_index = {e: i for i, e in enumerate(cfg.events)}
    T = cfg.n_frames()
    records = []
    for i in range(n_clips):
        clip_id = f"clip{i:04d}"
        rng = derive_rng(cfg.seed, f"synth/{clip_id}")
        scene_idx = int(rng.integers(len(cfg.scenes)))
        scene = cfg.scenes[scene_idx]
        spans = []
        for event in cfg.events:
            for onset, offset in _draw_spans(cfg, rng, prior[scene].get(event, 0.0)):
                spans.append(EventSpan(onset, offset, event))
        spans.sort(key=lambda s: (s.onset, s.label))
        roll = make_target_roll(spans, event_index, len(cfg.events), T, cfg.hop_s)
        if cfg.render_audio:
            path = out_dir / f"{clip_id}.wav"
            feat.write_wav(path, render_audio_clip(cfg, scene_idx, roll, rng), cfg.sample_rate)
        else:
            path = out_dir / f"{clip_id}.feat"
            feat.save_features(path, render_feature_map(cfg, scene_idx, roll, rng))
        records.append(ClipRecord(clip_id, str(path), scene, spans))
    save_manifest(out_dir / "manifest.tsv", records)
    return records


def load_clip_features(record: ClipRecord, frame_ms=40.0, hop_ms=20.0, n_mels=64) -> np.ndarray:
    """Features for a clip: read the feature file directly or extract from audio."""
    if record.path.endswith(".feat"):
        return feat.load_features(record.path)
    clip = feat.read_wav(record.path)
    return feat.extract_log_mel(clip, frame_ms, hop_ms, n_mels).values.astype(np.float32)


def build_dataset(records, event_vocab, scene_vocab, n_frames, hop_s,
                  standardizer=None):
    """Materialize (features, roll, scene index) triples for the trainer."""
    event_index = {e: i for i, e in enumerate(event_vocab)}
    scene_index = {s: i for i, s in enumerate(scene_vocab)}
    out = []
    for r in records:
        x = load_clip_features(r)
        if standardizer is not None:
            x = standardizer.apply(x).astype(np.float32)
        roll = make_target_roll(r.spans, event_index, len(event_vocab), n_frames, hop_s)
        out.append((x, roll, scene_index[r.scene]))
    return out
