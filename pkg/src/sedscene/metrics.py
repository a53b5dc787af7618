"""Segment-based evaluation: per-event threshold tuning, precision/recall/F,
the substitution/deletion/insertion error rate, per-scene false-positive
rates, and clip-level scene scoring with a confusion matrix.

A segment is one label frame.  Event rolls are (M, T) binary arrays; lists of
rolls aggregate across clips.  All counts are plain integers so the brute
force oracle in the tests can match them exactly.
"""

import json
from dataclasses import dataclass, field

import numpy as np

THRESHOLD_GRID = np.round(np.arange(0.01, 1.00, 0.01), 2)


def prf(tp: int, fp: int, fn: int):
    """Precision, recall, F; each is 0 when its denominator is 0."""
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def frame_counts(pred, target):
    """(TP, FP, FN) summed over all cells of aligned binary arrays."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    if pred.shape != target.shape:
        raise ValueError(f"roll shapes differ: {pred.shape} vs {target.shape}")
    tp = int(np.sum(pred & target))
    fp = int(np.sum(pred & ~target))
    fn = int(np.sum(~pred & target))
    return tp, fp, fn


def error_rate(fn_k, fp_k, n_k):
    """Per-frame S/D/I decomposition and the error rate.

    fn_k, fp_k, n_k: per-frame false-negative, false-positive, and reference
    event counts (summed over events).  Returns (ER, S, D, I); ER is NaN
    when the reference is empty (no active frames anywhere).
    """
    fn_k = np.asarray(fn_k, dtype=np.int64)
    fp_k = np.asarray(fp_k, dtype=np.int64)
    n_k = np.asarray(n_k, dtype=np.int64)
    s = int(np.minimum(fn_k, fp_k).sum())
    d = int(np.maximum(0, fn_k - fp_k).sum())
    i = int(np.maximum(0, fp_k - fn_k).sum())
    n = int(n_k.sum())
    er = (s + d + i) / n if n else float("nan")
    return er, s, d, i


def roll_frame_stats(pred, target):
    """Per-frame FN(k), FP(k), N(k) from one clip's rolls (events summed)."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    fn_k = np.sum(~pred & target, axis=0)
    fp_k = np.sum(pred & ~target, axis=0)
    n_k = np.sum(target, axis=0)
    return fn_k, fp_k, n_k


def fpr(preds, targets) -> np.ndarray:
    """Per-event false-positive frame rate: sum FP(k) / total frames.

    preds/targets: lists of aligned (M, T) rolls (e.g. all clips of one
    scene).  Returns an (M,) array."""
    total_frames = 0
    fp = None
    for p, t in zip(preds, targets, strict=True):
        p = np.asarray(p, dtype=bool)
        t = np.asarray(t, dtype=bool)
        counts = np.sum(p & ~t, axis=1)
        fp = counts if fp is None else fp + counts
        total_frames += p.shape[1]
    if not total_frames:
        raise ValueError("no frames")
    return fp / total_frames


def binarize_roll(scores, thresholds) -> np.ndarray:
    """pred[m, t] = 1 iff scores[m, t] > threshold[m] (strict)."""
    scores = np.asarray(scores)
    th = np.asarray(thresholds).reshape(-1, 1)
    return (scores > th).astype(np.int8)


def tune_thresholds(dev_scores, dev_targets) -> np.ndarray:
    """Per-event grid search over {0.01, ..., 0.99} maximizing frame-level F
    on the development data.

    Ties break to the threshold nearest 0.5, then to the smaller value.
    Events with no active dev frames fall back to 0.5.
    """
    if not dev_scores:
        raise ValueError("empty development set")
    scores = np.concatenate([np.asarray(s) for s in dev_scores], axis=1)
    targets = np.concatenate([np.asarray(t) for t in dev_targets], axis=1).astype(bool)
    m_events = scores.shape[0]
    out = np.full(m_events, 0.5)
    for m in range(m_events):
        t = targets[m]
        if not t.any():
            continue
        s = scores[m]
        pred = s[None, :] > THRESHOLD_GRID[:, None]  # (99, frames)
        tp = (pred & t).sum(axis=1)
        fp = (pred & ~t).sum(axis=1)
        fn = (~pred & t).sum(axis=1)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(2 * tp + fp + fn > 0, 2 * tp / (2 * tp + fp + fn), 0.0)
        best = f.max()
        cand = THRESHOLD_GRID[f >= best]
        out[m] = min(cand, key=lambda th: (abs(th - 0.5), th))
    return out


def scene_eval(preds, targets, n_scenes: int):
    """Clip-level scene scoring: micro F over clip counts, confusion matrix,
    per-scene recall.  confusion[i, j] = clips of true scene i predicted j."""
    preds = list(preds)
    targets = list(targets)
    if not preds or len(preds) != len(targets):
        raise ValueError("empty or misaligned scene prediction lists")
    conf = np.zeros((n_scenes, n_scenes), dtype=np.int64)
    for p, t in zip(preds, targets):
        conf[t, p] += 1
    tp = int(np.trace(conf))
    fp = len(preds) - tp  # every wrong clip is one FP and one FN
    fn = fp
    _, _, f = prf(tp, fp, fn)
    row_sums = conf.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        recall = np.where(row_sums > 0, np.diag(conf) / row_sums, 0.0)
    return f, conf, recall


def scene_f_score(preds, targets) -> float:
    n = int(max(max(preds), max(targets))) + 1
    f, _, _ = scene_eval(preds, targets, n)
    return f


def micro_event_f(pred_rolls, target_rolls) -> float:
    tp = fp = fn = 0
    for p, t in zip(pred_rolls, target_rolls, strict=True):
        a, b, c = frame_counts(p, t)
        tp, fp, fn = tp + a, fp + b, fn + c
    return prf(tp, fp, fn)[2]


@dataclass
class EvalReport:
    """Aggregated evaluation results for one model on one split."""
    event_f: float = 0.0
    event_er: float = float("nan")
    event_precision: float = 0.0
    event_recall: float = 0.0
    per_event: dict = field(default_factory=dict)    # name -> {f, er, tp, fp, fn}
    fpr_by_scene: dict = field(default_factory=dict)  # scene -> {event -> fpr}
    scene_f: float = 0.0
    confusion: list = field(default_factory=list)
    scene_recall: dict = field(default_factory=dict)
    scene_names: list = field(default_factory=list)
    event_names: list = field(default_factory=list)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["confusion"] = [list(map(int, row)) for row in self.confusion]
        return json.dumps(d, indent=2, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        lines = ["== overall =="]
        lines.append(f"event F {self.event_f * 100:6.2f}%   ER {self.event_er:.3f}   "
                     f"scene F {self.scene_f * 100:6.2f}%")
        if self.per_event:
            lines.append("")
            lines.append("== per event ==")
            lines.append(f"{'event':<20} {'F':>8} {'ER':>8}")
            for name, row in self.per_event.items():
                lines.append(f"{name:<20} {row['f'] * 100:7.2f}% {row['er']:8.3f}")
        if self.fpr_by_scene:
            lines.append("")
            lines.append("== FPR per scene and event ==")
            header = f"{'scene':<18}" + "".join(f"{e:>14}" for e in self.event_names)
            lines.append(header)
            for scene, row in self.fpr_by_scene.items():
                lines.append(f"{scene:<18}"
                             + "".join(f"{row[e]:14.4f}" for e in self.event_names))
        if len(self.confusion):
            lines.append("")
            lines.append("== scene confusion (rows: reference) ==")
            header = f"{'':<18}" + "".join(f"{s:>14}" for s in self.scene_names)
            lines.append(header)
            for name, row in zip(self.scene_names, self.confusion):
                lines.append(f"{name:<18}" + "".join(f"{int(v):14d}" for v in row)
                             + f"   recall {self.scene_recall.get(name, 0.0) * 100:6.2f}%")
        return "\n".join(lines) + "\n"


def evaluate_sed(pred_rolls, target_rolls, scene_labels, scene_preds, scene_targets,
                 event_names, scene_names) -> EvalReport:
    """Full evaluation over aligned per-clip lists.

    pred_rolls/target_rolls: (M, T) arrays per clip; scene_labels: the true
    scene name per clip (for the FPR breakdown); scene_preds/scene_targets:
    clip-level scene indices (may be empty for event-only models).
    """
    report = EvalReport(event_names=list(event_names), scene_names=list(scene_names))
    tp = fp = fn = 0
    fn_k_all, fp_k_all, n_k_all = [], [], []
    per_event_counts = {name: [0, 0, 0] for name in event_names}
    per_event_frames = {name: [[], [], []] for name in event_names}
    for p, t in zip(pred_rolls, target_rolls, strict=True):
        a, b, c = frame_counts(p, t)
        tp, fp, fn = tp + a, fp + b, fn + c
        fnk, fpk, nk = roll_frame_stats(p, t)
        fn_k_all.append(fnk)
        fp_k_all.append(fpk)
        n_k_all.append(nk)
        for m, name in enumerate(event_names):
            a, b, c = frame_counts(p[m], t[m])
            row = per_event_counts[name]
            row[0] += a
            row[1] += b
            row[2] += c
            pe = per_event_frames[name]
            pe[0].append((~p.astype(bool))[m] & t.astype(bool)[m])
            pe[1].append(p.astype(bool)[m] & (~t.astype(bool))[m])
            pe[2].append(t.astype(bool)[m])

    report.event_precision, report.event_recall, report.event_f = prf(tp, fp, fn)
    report.event_er, *_ = error_rate(np.concatenate(fn_k_all),
                                     np.concatenate(fp_k_all),
                                     np.concatenate(n_k_all))
    for name in event_names:
        a, b, c = per_event_counts[name]
        _, _, f = prf(a, b, c)
        er, *_ = error_rate(np.concatenate(per_event_frames[name][0]).astype(np.int64),
                            np.concatenate(per_event_frames[name][1]).astype(np.int64),
                            np.concatenate(per_event_frames[name][2]).astype(np.int64))
        report.per_event[name] = {"f": f, "er": er, "tp": a, "fp": b, "fn": c}

    for s_idx, scene in enumerate(scene_names):
        sel = [i for i, lbl in enumerate(scene_labels) if lbl == scene]
        if not sel:
            continue
        rates = fpr([pred_rolls[i] for i in sel], [target_rolls[i] for i in sel])
        report.fpr_by_scene[scene] = {e: float(r) for e, r in zip(event_names, rates)}

    if scene_preds:
        f, conf, recall = scene_eval(scene_preds, scene_targets, len(scene_names))
        report.scene_f = f
        report.confusion = conf.tolist()
        report.scene_recall = {s: float(r) for s, r in zip(scene_names, recall)}
    return report


# -- roll file format ------------------------------------------------------

def save_rolls(path, rolls: dict):
    """Line-delimited text: clip id, frame index, M space-separated bits."""
    with open(path, "w") as f:
        for clip_id in sorted(rolls):
            roll = np.asarray(rolls[clip_id], dtype=np.int8)
            for t in range(roll.shape[1]):
                bits = " ".join(str(int(b)) for b in roll[:, t])
                f.write(f"{clip_id} {t} {bits}\n")


def load_rolls(path) -> dict:
    frames: dict[str, dict[int, np.ndarray]] = {}
    with open(path) as f:
        for line in f:
            parts = line.split()
            if not parts:
                continue
            clip_id, t = parts[0], int(parts[1])
            frames.setdefault(clip_id, {})[t] = np.array(parts[2:], dtype=np.int8)
    out = {}
    for clip_id, cols in frames.items():
        T = max(cols) + 1
        roll = np.zeros((len(next(iter(cols.values()))), T), dtype=np.int8)
        for t, col in cols.items():
            roll[:, t] = col
        out[clip_id] = roll
    return out
