"""Objectives and training: summed sigmoid cross-entropy for events,
softmax cross-entropy for scenes, the weighted joint loss
alpha * L_event + beta * L_scene (alpha fixed at 1.0), Adam, the epoch loop
with best-dev checkpointing, and a finite-difference gradient checker.
"""

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .metrics import binarize_roll, micro_event_f, scene_f_score
from .model import MultitaskModel
from .tensorops import make_rng

PROB_CLAMP = 1e-7


def event_loss(y: np.ndarray, z: np.ndarray) -> float:
    """Summed binary cross-entropy over every (event, frame) cell (and any
    leading batch axis); probabilities clamped to [1e-7, 1 - 1e-7]."""
    if y.shape != z.shape:
        raise ValueError(f"shape mismatch {y.shape} vs {z.shape}")
    yc = np.clip(np.asarray(y, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    z = np.asarray(z, dtype=np.float64)
    return float(-np.sum(z * np.log(yc) + (1.0 - z) * np.log(1.0 - yc)))


def scene_loss(probs: np.ndarray, scene_idx) -> float:
    """-log p[target]; accepts one distribution or a batch of them."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim == 1:
        p = p[None]
        scene_idx = [scene_idx]
    picked = np.clip(p[np.arange(len(p)), np.asarray(scene_idx)], PROB_CLAMP, 1.0)
    return float(-np.sum(np.log(picked)))


def mtl_loss(event_l: float, scene_l: float, alpha: float = 1.0, beta: float = 1.0) -> float:
    return alpha * event_l + beta * scene_l


@dataclass
class TrainConfig:
    beta: float = 0.01
    alpha: float = 1.0
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 10
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8


class Adam:
    """Standard Adam with bias correction; one moment pair per tensor."""

    def __init__(self, params: dict, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    def step(self, grads: dict):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for k, p in self.params.items():
            g = grads[k]
            m = self.m[k]
            v = self.v[k]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out[f"m/{k}"] = self.m[k]
            out[f"v/{k}"] = self.v[k]
        return out

    def load_state(self, state: dict):
        self.t = int(state["t"][0])
        for k in self.params:
            self.m[k][...] = state[f"m/{k}"]
            self.v[k][...] = state[f"v/{k}"]


@dataclass
class EpochRecord:
    epoch: int
    total_loss: float
    event_loss: float
    scene_loss: float
    dev_event_f: float
    dev_scene_f: float
    is_best: bool


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec: EpochRecord):
        self.records.append(rec)

    def to_jsonl(self) -> str:
        return "\n".join(json.dumps(asdict(r)) for r in self.records)


def _batch_losses_and_grads(model: MultitaskModel, feats, rolls, scene_idx,
                            alpha, beta, train=True):
    """One forward/backward over a batch; returns (event_l, scene_l)."""
    ev_probs, sc_probs = model.forward(feats, train=train)
    ev_l = sc_l = 0.0
    dev = dsc = None
    if ev_probs is not None and rolls is not None:
        z = np.asarray(rolls)
        ev_l = event_loss(ev_probs, z)
        dev = alpha * (ev_probs - z)
    if sc_probs is not None and scene_idx is not None:
        sc_l = scene_loss(sc_probs, scene_idx)
        onehot = np.zeros_like(sc_probs)
        onehot[np.arange(len(scene_idx)), np.asarray(scene_idx)] = 1.0
        if beta != 0.0:
            dsc = beta * (sc_probs - onehot)
    if not np.isfinite(ev_l) or not np.isfinite(sc_l):
        raise FloatingPointError(f"non-finite loss (event {ev_l}, scene {sc_l})")
    model.backward(devent_logits=dev, dscene_logits=dsc)
    return ev_l, sc_l


def _dev_metrics(model: MultitaskModel, dev):
    """Dev-set selection metrics at a fixed 0.5 threshold (micro event F)
    and scene accuracy-style F; eval-mode forward."""
    if not dev:
        return 0.0, 0.0
    ev_f = sc_f = 0.0
    preds, targets, sc_preds, sc_targets = [], [], [], []
    for feats, roll, scene in dev:
        ev, sc = model.forward(feats[None], train=False)
        if ev is not None and roll is not None:
            preds.append(binarize_roll(ev[0], np.full(ev.shape[1], 0.5)))
            targets.append(roll)
        if sc is not None and scene is not None:
            sc_preds.append(int(np.argmax(sc[0])))
            sc_targets.append(scene)
    if preds:
        ev_f = micro_event_f(preds, targets)
    if sc_preds:
        sc_f = scene_f_score(sc_preds, sc_targets)
    return ev_f, sc_f


def selection_metric(cfg: TrainConfig, kind: str) -> str:
    """Event F drives checkpoint selection unless beta >= 1 (or the model is
    scene-only), mirroring per-task beta tuning."""
    if kind == "cnn_scene":
        return "scene"
    if kind in ("crnn_event", "cnn_event"):
        return "event"
    return "scene" if cfg.beta >= 1.0 else "event"


def train(model: MultitaskModel, train_set, dev_set, cfg: TrainConfig,
          state_path=None, on_epoch=None):
    """Mini-batch training with per-epoch dev evaluation.

    train_set / dev_set: sequences of (features (D, T), roll (M, T) or None,
    scene index or None).  Returns (best_params, best_extras, history).
    If state_path is
    given, progress is written there each epoch and training resumes from it
    when the file already exists.
    """
    params = model.params()
    opt = Adam(params, lr=cfg.learning_rate, beta1=cfg.adam_beta1,
               beta2=cfg.adam_beta2, eps=cfg.adam_eps)
    history = TrainHistory()
    metric = selection_metric(cfg, model.kind)
    best = {"score": -1.0, "params": model.copy_params(),
            "extras": model.copy_extras()}
    start_epoch = 0

    if state_path is not None and state_path.exists():
        state = dict(np.load(state_path, allow_pickle=False))
        start_epoch = int(state["epoch"][0])
        best["score"] = float(state["best_score"][0])
        model.set_params({k[len("param/"):]: v for k, v in state.items()
                          if k.startswith("param/")})
        model.set_extras({k[len("extra/"):]: v for k, v in state.items()
                          if k.startswith("extra/")})
        best["params"] = {k[len("best/param/"):]: v.copy() for k, v in state.items()
                         if k.startswith("best/param/")}
        best["extras"] = {k[len("best/extra/"):]: v.copy() for k, v in state.items()
                          if k.startswith("best/extra/")}
        opt.load_state({k[len("adam/"):]: v for k, v in state.items()
                        if k.startswith("adam/")})

    n = len(train_set)
    for epoch in range(start_epoch, cfg.epochs):
        order = make_rng(hash((cfg.seed, epoch)) & 0x7FFFFFFF).permutation(n)
        tot_ev = tot_sc = 0.0
        for lo in range(0, n, cfg.batch_size):
            batch = [train_set[i] for i in order[lo:lo + cfg.batch_size]]
            feats = np.stack([b[0] for b in batch])[:, None]
            rolls = (np.stack([b[1] for b in batch])
                     if model.has_event and batch[0][1] is not None else None)
            scenes = ([b[2] for b in batch]
                      if model.has_scene and batch[0][2] is not None else None)
            model.zero_grads()
            ev_l, sc_l = _batch_losses_and_grads(
                model, feats, rolls, scenes, cfg.alpha, cfg.beta)
            opt.step(model.grads())
            tot_ev += ev_l
            tot_sc += sc_l

        dev_ev_f, dev_sc_f = _dev_metrics(model, dev_set)
        score = dev_ev_f if metric == "event" else dev_sc_f
        is_best = score > best["score"]  # first best wins ties
        if is_best:
            best = {"score": score, "params": model.copy_params(),
                    "extras": model.copy_extras()}
        rec = EpochRecord(epoch=epoch,
                          total_loss=cfg.alpha * tot_ev + cfg.beta * tot_sc,
                          event_loss=tot_ev, scene_loss=tot_sc,
                          dev_event_f=dev_ev_f, dev_scene_f=dev_sc_f,
                          is_best=is_best)
        history.append(rec)
        if state_path is not None:
            state = {"epoch": np.array([epoch + 1]),
                     "best_score": np.array([best["score"]])}
            state.update({f"param/{k}": v for k, v in model.params().items()})
            state.update({f"extra/{k}": v for k, v in model.extras().items()})
            state.update({f"best/param/{k}": v for k, v in best["params"].items()})
            state.update({f"best/extra/{k}": v for k, v in best["extras"].items()})
            state.update({f"adam/{k}": v for k, v in opt.state().items()})
            tmp = state_path.with_suffix(".tmp.npz")
            np.savez(tmp, **state)
            tmp.replace(state_path)
        if on_epoch is not None:
            on_epoch(rec)

    if cfg.epochs == 0 or best["score"] < 0:
        best = {"score": 0.0, "params": model.copy_params(),
                "extras": model.copy_extras()}
    return best["params"], best["extras"], history


def grad_check_full(model: MultitaskModel, feats, rolls, scene_idx,
                    alpha=1.0, beta=1.0, step=1e-5, probes_per_tensor=20,
                    rng_seed=0) -> float:
    """Max relative error of analytic vs central-difference gradients.

    Probes a random subset of entries in every parameter tensor; the model
    should be built with dtype float64 so the differences are not
    noise-limited.  Running BN stats are frozen during probing.
    """
    feats = np.asarray(feats, dtype=np.float64)

    def loss_fn():
        ev, sc = model.forward(feats, train=True, update_running=False)
        l = 0.0
        if ev is not None and rolls is not None:
            l += alpha * event_loss(ev, np.asarray(rolls))
        if sc is not None and scene_idx is not None:
            l += beta * scene_loss(sc, scene_idx)
        return l

    model.zero_grads()
    ev, sc = model.forward(feats, train=True, update_running=False)
    dev = alpha * (ev - np.asarray(rolls)) if ev is not None and rolls is not None else None
    dsc = None
    if sc is not None and scene_idx is not None:
        onehot = np.zeros_like(sc)
        onehot[np.arange(len(scene_idx)), np.asarray(scene_idx)] = 1.0
        dsc = beta * (sc - onehot)
    model.backward(devent_logits=dev, dscene_logits=dsc)

    analytic = {k: v.copy() for k, v in model.grads().items()}
    rng = make_rng(rng_seed)
    max_err = 0.0
    eps = np.finfo(np.float64).eps
    for name, p in model.params().items():
        flat = p.reshape(-1)
        k = min(probes_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + step
            lp = loss_fn()
            flat[i] = orig - step
            lm = loss_fn()
            flat[i] = orig
            num = (lp - lm) / (2 * step)
            ana = analytic[name].reshape(-1)[i]
            # central differences cannot resolve anything below the roundoff
            # of the loss evaluation (lp - lm loses ~eps * |loss| absolutely),
            # so disagreements under that floor are meaningless -- e.g. conv
            # biases whose shift batch norm removes exactly, or scene tensors
            # whose contribution beta scales far below the event loss
            noise = 8.0 * eps * max(1.0, abs(lp), abs(lm)) / (2.0 * step)
            if abs(ana - num) < noise:
                continue
            err = abs(ana - num) / max(abs(ana), abs(num), 1e-8)
            max_err = max(max_err, err)
    return max_err
