"""Multitask model: shared conv trunk, recurrent event branch, conv scene
branch, plus the three single-task baselines, parameter accounting, and the
checkpoint file format.

Full-size configuration: 64 mel bins x 500 frames in; shared trunk of three
3x3 conv blocks (128 ch, batch norm, freq pools 8/2/2); event branch BiGRU(32)
+ FC 32 + per-frame sigmoid over M events; scene branch two conv blocks
(256 ch, time pools 25/20) + FC 32 + clip-level softmax over N scenes.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, asdict

import numpy as np

from .layers import BatchNorm2D, BiGru, Conv2D, Dense, MaxPool2D
from .tensorops import sigmoid, softmax

CHECKPOINT_MAGIC = b"JSCK1"

KINDS = ("proposed", "crnn_event", "cnn_scene", "cnn_event")


@dataclass
class ModelConfig:
    n_events: int = 25
    n_scenes: int = 4
    mel_bins: int = 64
    frames: int = 500
    shared_channels: tuple = (128, 128, 128)
    shared_pools: tuple = ((8, 1), (2, 1), (2, 1))
    scene_channels: tuple = (256, 256)
    scene_pools: tuple = ((1, 25), (1, 20))
    scene_fc: int = 32
    gru_hidden: int = 32
    event_fc: int = 32

    def validate(self):
        f = self.mel_bins
        for pf, pt in self.shared_pools:
            if f % pf:
                raise ValueError(f"freq {f} not divisible by pool {pf}")
            f //= pf
        t = self.frames
        for pf, pt in self.shared_pools:
            if t % pt:
                raise ValueError("shared time pool does not divide frame count")
            t //= pt
        for pf, pt in self.scene_pools:
            if f % pf or t % pt:
                raise ValueError("scene pools do not divide trunk output shape")
            f //= pf
            t //= pt
        if t != 1 or f < 1:
            raise ValueError("scene branch must collapse time to a single step")

    @property
    def trunk_freq(self) -> int:
        f = self.mel_bins
        for pf, _ in self.shared_pools:
            f //= pf
        return f

    @property
    def trunk_time(self) -> int:
        t = self.frames
        for _, pt in self.shared_pools:
            t //= pt
        return t

    @property
    def frame_dim(self) -> int:
        """Per-frame vector width at the trunk output (channels x freq rows)."""
        return self.shared_channels[-1] * self.trunk_freq

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


def full_config(n_events=25, n_scenes=4) -> ModelConfig:
    return ModelConfig(n_events=n_events, n_scenes=n_scenes)


def desk_config(n_events=10, n_scenes=4) -> ModelConfig:
    """Narrow variant for synthetic desk-scale experiments: same topology,
    16-channel trunk and 32-channel scene branch."""
    return ModelConfig(n_events=n_events, n_scenes=n_scenes,
                       shared_channels=(16, 16, 16),
                       scene_channels=(32, 32))


def tiny_config(n_events=2, n_scenes=2, mel_bins=8, frames=10) -> ModelConfig:
    """Small enough for finite-difference gradient checks."""
    return ModelConfig(n_events=n_events, n_scenes=n_scenes,
                       mel_bins=mel_bins, frames=frames,
                       shared_channels=(2, 2, 2),
                       shared_pools=((2, 1), (2, 1), (2, 1)),
                       scene_channels=(3, 3),
                       scene_pools=((1, 2), (1, 5)),
                       scene_fc=4, gru_hidden=3, event_fc=4)


class MultitaskModel:
    """Shared trunk + optional event/scene branches.

    kind: proposed (both branches), crnn_event (shared+event), cnn_scene
    (shared+scene), cnn_event (shared trunk with a per-frame FC head).
    Parameter names are prefixed with their group tag: shared/, event/, scene/.
    """

    def __init__(self, config: ModelConfig, seed: int = 0, kind: str = "proposed",
                 dtype=np.float32):
        if kind not in KINDS:
            raise ValueError(f"unknown model kind {kind!r}")
        config.validate()
        self.config = config
        self.kind = kind
        self.dtype = dtype
        self.seed = seed
        c = config

        self.shared = []
        in_ch = 1
        for i, ch in enumerate(c.shared_channels):
            self.shared.append((
                Conv2D(f"shared/conv{i}", in_ch, ch, seed, dtype=dtype),
                BatchNorm2D(f"shared/bn{i}", ch, dtype=dtype),
                MaxPool2D(f"shared/pool{i}", c.shared_pools[i]),
            ))
            in_ch = ch

        self.has_event = kind in ("proposed", "crnn_event", "cnn_event")
        self.has_scene = kind in ("proposed", "cnn_scene")

        if kind == "cnn_event":
            self.event_head = Dense("event/head", c.frame_dim, c.n_events, seed, dtype=dtype)
        elif self.has_event:
            self.bigru = BiGru("event/bigru", c.frame_dim, c.gru_hidden, seed, dtype=dtype)
            self.event_fc = Dense("event/fc", 2 * c.gru_hidden, c.event_fc, seed, dtype=dtype)
            self.event_out = Dense("event/out", c.event_fc, c.n_events, seed, dtype=dtype)

        if self.has_scene:
            self.scene_blocks = []
            ch_in = c.shared_channels[-1]
            for i, ch in enumerate(c.scene_channels):
                self.scene_blocks.append((
                    Conv2D(f"scene/conv{i}", ch_in, ch, seed, dtype=dtype),
                    BatchNorm2D(f"scene/bn{i}", ch, dtype=dtype),
                    MaxPool2D(f"scene/pool{i}", c.scene_pools[i]),
                ))
                ch_in = ch
            scene_flat = c.scene_channels[-1] * self.scene_flat_freq()
            self.scene_fc = Dense("scene/fc", scene_flat, c.scene_fc, seed, dtype=dtype)
            self.scene_out = Dense("scene/out", c.scene_fc, c.n_scenes, seed, dtype=dtype)

    def scene_flat_freq(self) -> int:
        f = self.config.trunk_freq
        for pf, _ in self.config.scene_pools:
            f //= pf
        return f

    # -- parameter plumbing ------------------------------------------------

    def _layers(self):
        for block in self.shared:
            yield from block[:2]  # pools have no params but keep order stable
            yield block[2]
        if self.kind == "cnn_event":
            yield self.event_head
        elif self.has_event:
            yield self.bigru
            yield self.event_fc
            yield self.event_out
        if self.has_scene:
            for block in self.scene_blocks:
                yield from block
            yield self.scene_fc
            yield self.scene_out

    def params(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            out.update(layer.params())
        return out

    def grads(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            out.update(layer.grads())
        return out

    def extras(self) -> dict[str, np.ndarray]:
        out = {}
        for layer in self._layers():
            out.update(layer.extras())
        return out

    def zero_grads(self):
        for layer in self._layers():
            layer.zero_grads()

    def count_params(self, groups=("shared", "event", "scene")) -> int:
        """Learnable scalars (running stats excluded) in the selected groups."""
        return sum(v.size for k, v in self.params().items()
                   if k.split("/")[0] in groups)

    def set_params(self, values: dict):
        own = self.params()
        for k, v in values.items():
            if k in own:
                own[k][...] = v

    def copy_params(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.params().items()}

    def copy_extras(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.extras().items()}

    def set_extras(self, values: dict):
        own = self.extras()
        for k, v in values.items():
            if k in own:
                own[k][...] = v

    # -- forward / backward ------------------------------------------------

    def forward(self, x, train=False, update_running=None):
        """x: (batch, 1, mel_bins, frames) -> (event_probs, scene_probs).

        event_probs is (batch, M, frames) or None; scene_probs (batch, N) or
        None.  Caches are retained for a subsequent backward() call.
        """
        c = self.config
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[:, None]
        if x.shape[2] != c.mel_bins or x.shape[3] != c.frames:
            raise ValueError(f"expected input {c.mel_bins}x{c.frames}, got {x.shape[2:]}")
        if update_running is None:
            update_running = train
        h = x
        for conv, bn, pool in self.shared:
            h = pool.forward(bn.forward(conv.forward(h), train=train,
                                        update_running=update_running))
        self._trunk_out = h  # (B, C, F', T)
        B = h.shape[0]

        event_probs = scene_probs = None
        if self.kind == "cnn_event":
            seq = h.transpose(0, 3, 2, 1).reshape(B, c.frames, c.frame_dim)
            logits = self.event_head.forward(seq)
            event_probs = sigmoid(logits).transpose(0, 2, 1)
        elif self.has_event:
            # (T, B, freq*ch) with channel varying fastest inside each freq row
            seq = h.transpose(3, 0, 2, 1).reshape(c.frames, B, c.frame_dim)
            hs = self.bigru.forward(seq, train=train)
            mid = self.event_fc.forward(hs)
            logits = self.event_out.forward(mid)  # (T, B, M)
            event_probs = sigmoid(logits).transpose(1, 2, 0)

        if self.has_scene:
            s = h
            for conv, bn, pool in self.scene_blocks:
                s = pool.forward(bn.forward(conv.forward(s), train=train,
                                            update_running=update_running))
            flat = s.transpose(0, 3, 2, 1).reshape(B, -1)
            self._scene_flat_shape = s.shape
            logits = self.scene_out.forward(self.scene_fc.forward(flat))
            scene_probs = softmax(logits, axis=-1)

        return event_probs, scene_probs

    def backward(self, devent_logits=None, dscene_logits=None):
        """Backprop from head-logit gradients; fills parameter grad buffers.

        devent_logits: (batch, M, frames); dscene_logits: (batch, N).  For
        sigmoid/softmax cross-entropy these are (probs - targets), already
        scaled by the loss weights.  A None head contributes nothing.
        """
        c = self.config
        h = self._trunk_out
        B = h.shape[0]
        dtrunk = np.zeros_like(h)

        if devent_logits is not None:
            if self.kind == "cnn_event":
                dlog = np.asarray(devent_logits, dtype=self.dtype).transpose(0, 2, 1)
                dseq = self.event_head.backward(dlog)
                dtrunk += dseq.reshape(B, c.frames, c.trunk_freq,
                                       c.shared_channels[-1]).transpose(0, 3, 2, 1)
            else:
                dlog = np.asarray(devent_logits, dtype=self.dtype).transpose(2, 0, 1)
                dmid = self.event_out.backward(dlog)
                dhs = self.event_fc.backward(dmid)
                dseq = self.bigru.backward(dhs)
                dtrunk += dseq.reshape(c.frames, B, c.trunk_freq,
                                       c.shared_channels[-1]).transpose(1, 3, 2, 0)

        if dscene_logits is not None and self.has_scene:
            dflat = self.scene_out.backward(np.asarray(dscene_logits, dtype=self.dtype))
            dflat = self.scene_fc.backward(dflat)
            Bs, Cs, Fs, Ts = self._scene_flat_shape
            ds = dflat.reshape(Bs, Ts, Fs, Cs).transpose(0, 3, 2, 1)
            for conv, bn, pool in reversed(self.scene_blocks):
                ds = conv.backward(bn.backward(pool.backward(ds)))
            dtrunk += ds

        dx = dtrunk
        for conv, bn, pool in reversed(self.shared):
            dx = conv.backward(bn.backward(pool.backward(dx)))
        return dx


def build(config: ModelConfig, seed: int = 0, kind: str = "proposed",
          dtype=np.float32) -> MultitaskModel:
    return MultitaskModel(config, seed=seed, kind=kind, dtype=dtype)


# -- checkpoint format -----------------------------------------------------

_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPES = {0: np.float32, 1: np.float64}


def save_checkpoint(path, model: MultitaskModel, extra: dict | None = None):
    """Binary checkpoint: magic 'JSCK1', config digest, named tensor table.

    Running BN statistics travel alongside learnable tensors; `extra` may add
    more named arrays (optimizer state, counters)."""
    tensors = {**model.params(), **model.extras()}
    if extra:
        tensors.update({f"extra/{k}": np.asarray(v) for k, v in extra.items()})
    digest = model.config.digest().encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<B", len(digest)))
        f.write(digest)
        f.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            arr = np.ascontiguousarray(arr)
            code = _DTYPE_CODES.get(arr.dtype)
            if code is None:
                arr = arr.astype(np.float64)
                code = 1
            nb = name.encode()
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<BB", code, arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path, expected_digest: str | None = None) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(5) != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint")
        (dlen,) = struct.unpack("<B", f.read(1))
        digest = f.read(dlen).decode()
        if expected_digest is not None and digest != expected_digest:
            raise ValueError(f"{path}: config digest mismatch "
                             f"({digest} != {expected_digest})")
        (count,) = struct.unpack("<I", f.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode()
            code, ndim = struct.unpack("<BB", f.read(2))
            shape = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            dtype = np.dtype(_CODE_DTYPES[code])
            size = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(f.read(size * dtype.itemsize), dtype=dtype)
            tensors[name] = data.reshape(shape).copy()
    return tensors


def restore_model(path, config: ModelConfig, kind: str, dtype=np.float32) -> MultitaskModel:
    tensors = load_checkpoint(path, expected_digest=config.digest())
    model = MultitaskModel(config, seed=0, kind=kind, dtype=dtype)
    model.set_params(tensors)
    model.set_extras(tensors)
    return model
