"""Batch command line: feature extraction, synthetic data, training grids,
threshold tuning, evaluation, parameter counting, and report aggregation.

Run configs are plain-text `key = value` documents with dotted section
prefixes; unknown keys are rejected and the fully resolved config is echoed
into every output directory.
"""

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as ds
from . import features as feat
from . import metrics as mx
from . import model as mdl
from . import training as tr

METHODS = ("proposed", "crnn_event", "cnn_scene", "cnn_event")

CONFIG_SCHEMA = {
    "seed_list": ([0], lambda s: [int(x) for x in s.split()]),
    "methods": (["proposed"], lambda s: s.split()),
    "betas": ([0.01], lambda s: [float(x) for x in s.split()]),
    "model.preset": ("desk", str),            # full | desk | tiny
    "model.n_events": (None, int),
    "model.n_scenes": (None, int),
    "train.learning_rate": (1e-3, float),
    "train.batch_size": (8, int),
    "train.epochs": (10, int),
    "features.frame_ms": (40.0, float),
    "features.hop_ms": (20.0, float),
    "features.n_mels": (64, int),
    "features.standardize": (False, lambda s: s.lower() in ("1", "true", "yes")),
    "data.manifest": (None, str),
    "data.split_seed": (0, int),
    "data.split_ratios": ([0.7, 0.15, 0.15], lambda s: [float(x) for x in s.split()]),
    "synth.n_clips": (200, int),
    "synth.n_events": (10, int),
    "synth.n_scenes": (4, int),
    "synth.seed": (0, int),
    "synth.clip_seconds": (10.0, float),
    "synth.render_audio": (False, lambda s: s.lower() in ("1", "true", "yes")),
}


class CliError(Exception):
    pass


def load_config(path) -> dict:
    cfg = {k: v for k, (v, _) in CONFIG_SCHEMA.items()}
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliError(f"{path}:{ln}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            if key not in CONFIG_SCHEMA:
                raise CliError(f"{path}:{ln}: unknown key {key!r}")
            cfg[key] = CONFIG_SCHEMA[key][1](val)
    return cfg


def dump_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        if v is None:
            continue  # unset optional key; omitting keeps the echo parseable
        if isinstance(v, list):
            v = " ".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def echo_config(cfg: dict, out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "run_config.txt").write_text(dump_config(cfg))


def model_config(cfg: dict, n_events: int, n_scenes: int) -> mdl.ModelConfig:
    preset = cfg["model.preset"]
    n_events = cfg["model.n_events"] or n_events
    n_scenes = cfg["model.n_scenes"] or n_scenes
    if preset == "full":
        return mdl.full_config(n_events, n_scenes)
    if preset == "desk":
        return mdl.desk_config(n_events, n_scenes)
    if preset == "tiny":
        return mdl.tiny_config(n_events, n_scenes)
    raise CliError(f"unknown model preset {preset!r}")


def _load_records(cfg: dict):
    manifest = cfg["data.manifest"]
    if not manifest:
        raise CliError("data.manifest is required")
    records = ds.load_manifest(manifest)
    if not all(r.split for r in records):
        ds.split_corpus(records, tuple(cfg["data.split_ratios"]), cfg["data.split_seed"])
    scenes, events = ds.collect_vocab(records)
    return records, scenes, events


def _datasets(cfg: dict, records, scenes, events):
    hop_s = cfg["features.hop_ms"] / 1000.0
    any_feats = ds.load_clip_features(records[0])
    n_frames = any_feats.shape[1]
    std = None
    if cfg["features.standardize"]:
        train_recs = [r for r in records if r.split == "train"]
        std = feat.FeatureStandardizer.fit(
            [ds.load_clip_features(r) for r in train_recs])
    out = {}
    for split in ("train", "dev", "eval"):
        recs = [r for r in records if r.split == split]
        out[split] = ds.build_dataset(recs, events, scenes, n_frames, hop_s, std)
        out[f"{split}_records"] = recs
    return out, n_frames


def run_dir_name(method: str, beta: float, seed: int) -> str:
    if method == "proposed":
        return f"{method}_beta{beta:g}_seed{seed}"
    return f"{method}_seed{seed}"


# -- subcommands -----------------------------------------------------------

def cmd_count_params(cfg, out, args):
    mc = model_config(cfg, 25, 4)
    rows = []
    for kind in ("cnn_event", "crnn_event", "cnn_scene", "proposed"):
        m = mdl.build(mc, seed=0, kind=kind)
        rows.append((kind, m.count_params()))
    width = max(len(k) for k, _ in rows)
    for kind, count in rows:
        print(f"{kind:<{width}}  {count:>12,}")
    if out:
        out.mkdir(parents=True, exist_ok=True)
        (out / "param_counts.json").write_text(json.dumps(dict(rows), indent=2))
        echo_config(cfg, out)
    return 0


def cmd_synth_data(cfg, out, args):
    cs = cfg["synth.clip_seconds"]
    scfg = ds.SynthConfig(
        scenes=tuple(f"scene{i}" for i in range(cfg["synth.n_scenes"])),
        events=tuple(f"event{i}" for i in range(cfg["synth.n_events"])),
        clip_seconds=cs,
        # keep bursts shorter than the clip so short debug corpora still
        # contain events
        burst_seconds=(min(0.4, cs / 5), min(2.0, cs / 2)),
        n_mels=cfg["features.n_mels"],
        render_audio=cfg["synth.render_audio"],
        seed=cfg["synth.seed"] if args.seed is None else args.seed,
    )
    records = ds.synth_corpus(scfg, out, cfg["synth.n_clips"])
    ds.split_corpus(records, tuple(cfg["data.split_ratios"]), cfg["data.split_seed"])
    ds.save_manifest(out / "manifest.tsv", records)
    echo_config(cfg, out)
    print(f"wrote {len(records)} clips to {out}")
    return 0


def cmd_extract_features(cfg, out, args):
    if not cfg["data.manifest"]:
        raise CliError("data.manifest is required")
    records = ds.load_manifest(cfg["data.manifest"])
    out.mkdir(parents=True, exist_ok=True)
    params_tag = (f"{cfg['features.frame_ms']}:{cfg['features.hop_ms']}"
                  f":{cfg['features.n_mels']}")
    done = skipped = 0

    def one(rec):
        nonlocal done, skipped
        if not rec.path.endswith(".wav"):
            return
        digest = hashlib.sha256(
            Path(rec.path).read_bytes() + params_tag.encode()).hexdigest()
        target = out / f"{rec.clip_id}.feat"
        marker = out / f"{rec.clip_id}.feat.digest"
        if target.exists() and marker.exists() and marker.read_text() == digest:
            skipped += 1
            return
        clip = feat.read_wav(rec.path)
        spec = feat.extract_log_mel(clip, cfg["features.frame_ms"],
                                    cfg["features.hop_ms"], cfg["features.n_mels"])
        feat.save_features(target, spec.values.astype(np.float32))
        marker.write_text(digest)
        done += 1

    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        list(pool.map(one, records))
    echo_config(cfg, out)
    print(f"extracted {done}, skipped {skipped} (digest hit)")
    return 0


def _train_one(cfg, run_dir: Path, method: str, beta: float, seed: int,
               sets, mc: mdl.ModelConfig):
    run_dir.mkdir(parents=True, exist_ok=True)
    echo_config(cfg, run_dir)
    model = mdl.build(mc, seed=seed, kind=method)
    tcfg = tr.TrainConfig(beta=beta, learning_rate=cfg["train.learning_rate"],
                          batch_size=cfg["train.batch_size"],
                          epochs=cfg["train.epochs"], seed=seed)
    best_params, best_extras, history = tr.train(
        model, sets["train"], sets["dev"], tcfg,
        state_path=run_dir / "last_state.npz")
    model.set_params(best_params)
    model.set_extras(best_extras)
    mdl.save_checkpoint(run_dir / "best.ckpt", model)
    (run_dir / "history.jsonl").write_text(history.to_jsonl() + "\n")
    (run_dir / "run_meta.json").write_text(json.dumps(
        {"method": method, "beta": beta, "seed": seed}))


def cmd_train(cfg, out, args):
    records, scenes, events = _load_records(cfg)
    sets, n_frames = _datasets(cfg, records, scenes, events)
    mc = model_config(cfg, len(events), len(scenes))
    if mc.frames != n_frames:
        raise CliError(f"model expects {mc.frames} frames, features have {n_frames}")
    seeds = [args.seed] if args.seed is not None else cfg["seed_list"]
    for method in cfg["methods"]:
        if method not in METHODS:
            raise CliError(f"unknown method {method!r}")
        betas = cfg["betas"] if method == "proposed" else [0.0]
        for beta in betas:
            for seed in seeds:
                run_dir = out / run_dir_name(method, beta, seed)
                _train_one(cfg, run_dir, method, beta, seed, sets, mc)
                print(f"trained {run_dir.name}")
    return 0


def _scored_split(model, dataset):
    scores, rolls, sc_preds, sc_targets = [], [], [], []
    for x, roll, scene in dataset:
        ev, sc = model.forward(x[None], train=False)
        if ev is not None:
            scores.append(ev[0])
            rolls.append(roll)
        if sc is not None:
            sc_preds.append(int(np.argmax(sc[0])))
            sc_targets.append(scene)
    return scores, rolls, sc_preds, sc_targets


def _restore_run(run_dir: Path, cfg, scenes, events):
    meta = json.loads((run_dir / "run_meta.json").read_text())
    mc = model_config(cfg, len(events), len(scenes))
    model = mdl.restore_model(run_dir / "best.ckpt", mc, meta["method"])
    return model, meta


def cmd_tune_thresholds(cfg, out, args):
    records, scenes, events = _load_records(cfg)
    sets, _ = _datasets(cfg, records, scenes, events)
    for run_dir in sorted(p for p in out.iterdir() if (p / "best.ckpt").exists()):
        model, _ = _restore_run(run_dir, cfg, scenes, events)
        if not model.has_event:
            continue
        scores, rolls, _, _ = _scored_split(model, sets["dev"])
        th = mx.tune_thresholds(scores, rolls)
        (run_dir / "thresholds.json").write_text(json.dumps(
            {e: float(t) for e, t in zip(events, th)}, indent=2))
        print(f"tuned {run_dir.name}")
    return 0


def cmd_evaluate(cfg, out, args):
    records, scenes, events = _load_records(cfg)
    sets, _ = _datasets(cfg, records, scenes, events)
    eval_scene_labels = [r.scene for r in sets["eval_records"]]
    for run_dir in sorted(p for p in out.iterdir() if (p / "best.ckpt").exists()):
        model, meta = _restore_run(run_dir, cfg, scenes, events)
        scores, rolls, sc_preds, sc_targets = _scored_split(model, sets["eval"])
        preds = []
        if model.has_event:
            th_path = run_dir / "thresholds.json"
            if th_path.exists():
                th = np.array([json.loads(th_path.read_text())[e] for e in events])
            else:
                th = np.full(len(events), 0.5)
            preds = [mx.binarize_roll(s, th) for s in scores]
        report = mx.evaluate_sed(preds, rolls, eval_scene_labels,
                                 sc_preds, sc_targets, events, scenes) \
            if preds else mx.EvalReport(event_names=list(events), scene_names=list(scenes))
        if not preds and sc_preds:
            f, conf, recall = mx.scene_eval(sc_preds, sc_targets, len(scenes))
            report.scene_f = f
            report.confusion = conf.tolist()
            report.scene_recall = {s: float(r) for s, r in zip(scenes, recall)}
        (run_dir / "report.json").write_text(report.to_json())
        (run_dir / "report.txt").write_text(report.to_text())
        print(f"evaluated {run_dir.name}: event F {report.event_f:.3f} "
              f"scene F {report.scene_f:.3f}")
    return 0


def cmd_report(cfg, out, args):
    rows = {}
    for run_dir in sorted(p for p in out.iterdir() if (p / "report.json").exists()):
        meta = json.loads((run_dir / "run_meta.json").read_text())
        report = json.loads((run_dir / "report.json").read_text())
        key = (meta["method"], meta["beta"])
        rows.setdefault(key, []).append(
            {"seed": meta["seed"], "event_f": report["event_f"],
             "event_er": report["event_er"], "scene_f": report["scene_f"]})
    if not rows:
        raise CliError(f"no completed evaluations under {out}")
    table = []
    for (method, beta), runs in sorted(rows.items()):
        ev = [r["event_f"] for r in runs]
        er = [r["event_er"] for r in runs
              if r["event_er"] is not None and not np.isnan(r["event_er"])]
        sc = [r["scene_f"] for r in runs]
        std = (lambda xs: float(np.std(xs, ddof=1)) if len(xs) > 1 else 0.0)
        table.append({
            "method": method, "beta": beta, "n_seeds": len(runs),
            "event_f_mean": float(np.mean(ev)), "event_f_std": std(ev),
            "event_er_mean": float(np.mean(er)) if er else float("nan"),
            "scene_f_mean": float(np.mean(sc)), "scene_f_std": std(sc),
        })
    sweep = [
        {"beta": row["beta"], "event_f": row["event_f_mean"], "scene_f": row["scene_f_mean"]}
        for row in table if row["method"] == "proposed"
    ]
    sweep.sort(key=lambda r: r["beta"])
    (out / "results.json").write_text(json.dumps(table, indent=2))
    (out / "beta_sweep.json").write_text(json.dumps(sweep, indent=2))
    lines = [f"{'method':<12} {'beta':>8} {'event F':>9} {'ER':>7} {'scene F':>9}"]
    for row in table:
        lines.append(f"{row['method']:<12} {row['beta']:>8g} "
                     f"{row['event_f_mean'] * 100:8.2f}% {row['event_er_mean']:7.3f} "
                     f"{row['scene_f_mean'] * 100:8.2f}%")
    text = "\n".join(lines) + "\n"
    (out / "results.txt").write_text(text)
    print(text, end="")
    return 0


COMMANDS = {
    "count-params": cmd_count_params,
    "synth-data": cmd_synth_data,
    "extract-features": cmd_extract_features,
    "train": cmd_train,
    "tune-thresholds": cmd_tune_thresholds,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="sedscene",
        description="Joint sound event detection and scene classification harness")
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", type=Path, help="run config file")
    parser.add_argument("--out", type=Path, help="output directory")
    parser.add_argument("--seed", type=int, default=None, help="override seed")
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args(argv)

    needs_out = args.command not in ("count-params",)
    if needs_out and args.out is None:
        print(json.dumps({"error": "--out is required"}), file=sys.stderr)
        return 2
    try:
        cfg = load_config(args.config) if args.config else \
            {k: v for k, (v, _) in CONFIG_SCHEMA.items()}
        return COMMANDS[args.command](cfg, args.out, args)
    except (CliError, OSError, ValueError) as e:
        print(json.dumps({"error": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
