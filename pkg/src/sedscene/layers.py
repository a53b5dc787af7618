"""Network layers with hand-written forward/backward passes.

Feature maps are (batch, channels, freq, time) arrays; sequences handed to
the recurrent layers are (time, batch, features).  Each layer caches what
its backward pass needs during forward; backward fills per-parameter
gradient buffers and returns the gradient w.r.t. its input.  Layers are
single-use per step: forward then backward on the same batch.
"""

import numpy as np

from .tensorops import derive_rng, glorot_uniform, sigmoid


class Layer:
    """Base: parameter registry keyed by name, gradient buffers to match."""

    def __init__(self, name: str):
        self.name = name
        self._params: dict[str, np.ndarray] = {}
        self._grads: dict[str, np.ndarray] = {}
        self._extras: dict[str, np.ndarray] = {}  # non-learnable state

    def _add_param(self, key: str, value: np.ndarray):
        self._params[key] = value
        self._grads[key] = np.zeros_like(value)

    def params(self) -> dict[str, np.ndarray]:
        return {f"{self.name}/{k}": v for k, v in self._params.items()}

    def grads(self) -> dict[str, np.ndarray]:
        return {f"{self.name}/{k}": v for k, v in self._grads.items()}

    def extras(self) -> dict[str, np.ndarray]:
        return {f"{self.name}/{k}": v for k, v in self._extras.items()}

    def zero_grads(self):
        for g in self._grads.values():
            g[...] = 0

    def set_param(self, key: str, value: np.ndarray):
        self._params[key][...] = value


class Conv2D(Layer):
    """3x3 (or kxk) convolution, stride 1, zero padding (k-1)/2: shape preserving."""

    def __init__(self, name, in_ch, out_ch, seed, kernel=3, dtype=np.float32):
        super().__init__(name)
        self.in_ch, self.out_ch, self.k = in_ch, out_ch, kernel
        rng = derive_rng(seed, f"{name}/w")
        self._add_param("w", glorot_uniform((out_ch, in_ch, kernel, kernel), rng, dtype=dtype))
        self._add_param("b", np.zeros(out_ch, dtype=dtype))

    def forward(self, x, train=True):
        if x.shape[1] != self.in_ch:
            raise ValueError(f"{self.name}: expected {self.in_ch} channels, got {x.shape[1]}")
        B, C, H, W = x.shape
        k, p = self.k, self.k // 2
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        cols = np.empty((B, C * k * k, H * W), dtype=x.dtype)
        for di in range(k):
            for dj in range(k):
                patch = xp[:, :, di:di + H, dj:dj + W]
                cols[:, (di * k + dj)::k * k, :] = patch.reshape(B, C, H * W)
        # cols rows are ordered (channel, di, dj) with offset fastest
        wmat = self._params["w"].transpose(0, 1, 2, 3).reshape(self.out_ch, -1)
        out = np.matmul(wmat, cols) + self._params["b"][None, :, None]
        self._cache = (x.shape, cols)
        return out.reshape(B, self.out_ch, H, W)

    def backward(self, dout):
        (B, C, H, W), cols = self._cache
        k, p = self.k, self.k // 2
        dmat = dout.reshape(B, self.out_ch, H * W)
        self._grads["w"] += np.einsum("boh,bch->oc", dmat, cols).reshape(self._params["w"].shape)
        self._grads["b"] += dmat.sum(axis=(0, 2))
        wmat = self._params["w"].reshape(self.out_ch, -1)
        dcols = np.matmul(wmat.T, dmat)  # (B, C*k*k, H*W)
        dxp = np.zeros((B, C, H + 2 * p, W + 2 * p), dtype=dout.dtype)
        for di in range(k):
            for dj in range(k):
                dxp[:, :, di:di + H, dj:dj + W] += \
                    dcols[:, (di * k + dj)::k * k, :].reshape(B, C, H, W)
        return dxp[:, :, p:p + H, p:p + W]


class BatchNorm2D(Layer):
    """Per-channel batch norm over (batch, freq, time); eps 1e-5, momentum 0.9."""

    EPS = 1e-5

    def __init__(self, name, ch, dtype=np.float32, momentum=0.9):
        super().__init__(name)
        self.ch = ch
        self.momentum = momentum
        self._add_param("gamma", np.ones(ch, dtype=dtype))
        self._add_param("beta", np.zeros(ch, dtype=dtype))
        self._extras["running_mean"] = np.zeros(ch, dtype=dtype)
        self._extras["running_var"] = np.ones(ch, dtype=dtype)

    def forward(self, x, train=True, update_running=True):
        if x.shape[1] != self.ch:
            raise ValueError(f"{self.name}: channel mismatch")
        g = self._params["gamma"][None, :, None, None]
        b = self._params["beta"][None, :, None, None]
        if train:
            mean = x.mean(axis=(0, 2, 3))
            var = x.var(axis=(0, 2, 3))
            ivar = 1.0 / np.sqrt(var + self.EPS)
            xhat = (x - mean[None, :, None, None]) * ivar[None, :, None, None]
            self._cache = (xhat, ivar)
            if update_running:
                m = self.momentum
                self._extras["running_mean"][...] = m * self._extras["running_mean"] + (1 - m) * mean
                self._extras["running_var"][...] = m * self._extras["running_var"] + (1 - m) * var
            return g * xhat + b
        rm = self._extras["running_mean"][None, :, None, None]
        rv = self._extras["running_var"][None, :, None, None]
        return g * (x - rm) / np.sqrt(rv + self.EPS) + b

    def backward(self, dout):
        xhat, ivar = self._cache
        n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
        dg = (dout * xhat).sum(axis=(0, 2, 3))
        db = dout.sum(axis=(0, 2, 3))
        self._grads["gamma"] += dg
        self._grads["beta"] += db
        g = self._params["gamma"][None, :, None, None]
        dxhat = dout * g
        dx = (ivar[None, :, None, None] / n) * (
            n * dxhat
            - db[None, :, None, None] * g
            - xhat * dg[None, :, None, None] * g)
        return dx


class MaxPool2D(Layer):
    """Non-overlapping max pooling; ties route the gradient to the lowest
    flat index within the block."""

    def __init__(self, name, pool):
        super().__init__(name)
        self.pf, self.pt = pool

    def forward(self, x, train=True):
        B, C, H, W = x.shape
        pf, pt = self.pf, self.pt
        if H % pf or W % pt:
            raise ValueError(f"{self.name}: {H}x{W} not divisible by {pf}x{pt}")
        blocks = x.reshape(B, C, H // pf, pf, W // pt, pt).transpose(0, 1, 2, 4, 3, 5)
        flat = blocks.reshape(B, C, H // pf, W // pt, pf * pt)
        self._argmax = flat.argmax(axis=-1)  # first occurrence = lowest flat index
        self._in_shape = x.shape
        return flat.max(axis=-1)

    def backward(self, dout):
        B, C, H, W = self._in_shape
        pf, pt = self.pf, self.pt
        dblocks = np.zeros((B, C, H // pf, W // pt, pf * pt), dtype=dout.dtype)
        np.put_along_axis(dblocks, self._argmax[..., None], dout[..., None], axis=-1)
        dx = dblocks.reshape(B, C, H // pf, W // pt, pf, pt).transpose(0, 1, 2, 4, 3, 5)
        return dx.reshape(B, C, H, W)


class Dense(Layer):
    """Affine layer y = x W^T + b over the trailing axis."""

    def __init__(self, name, in_dim, out_dim, seed, dtype=np.float32):
        super().__init__(name)
        self.in_dim, self.out_dim = in_dim, out_dim
        rng = derive_rng(seed, f"{name}/w")
        self._add_param("w", glorot_uniform((out_dim, in_dim), rng, dtype=dtype))
        self._add_param("b", np.zeros(out_dim, dtype=dtype))

    def forward(self, x, train=True):
        if x.shape[-1] != self.in_dim:
            raise ValueError(f"{self.name}: expected {self.in_dim} inputs, got {x.shape[-1]}")
        self._x = x
        return x @ self._params["w"].T + self._params["b"]

    def backward(self, dout):
        x2 = self._x.reshape(-1, self.in_dim)
        d2 = dout.reshape(-1, self.out_dim)
        self._grads["w"] += d2.T @ x2
        self._grads["b"] += d2.sum(axis=0)
        return (d2 @ self._params["w"]).reshape(self._x.shape)


GATES = ("update", "reset", "cand")


class GruDirection(Layer):
    """One direction of the GRU, update-gate-weighted candidate:

        g = sigmoid(W_g x + U_g h_prev + b_g)
        r = sigmoid(W_r x + U_r h_prev + b_r)
        h = (1 - g) * h_prev + g * tanh(W_h x + U_h (r * h_prev) + b_h)

    The update gate g multiplies the candidate.  Each gate carries separate
    input and recurrent biases.  Sequences run (time, batch, features);
    "backward" direction is implemented by the caller reversing time.
    """

    def __init__(self, name, in_dim, hidden, seed, dtype=np.float32):
        super().__init__(name)
        self.in_dim, self.hidden = in_dim, hidden
        for gate in GATES:
            rng_w = derive_rng(seed, f"{name}/{gate}/w")
            rng_u = derive_rng(seed, f"{name}/{gate}/u")
            self._add_param(f"{gate}/w", glorot_uniform((hidden, in_dim), rng_w, dtype=dtype))
            self._add_param(f"{gate}/u", glorot_uniform((hidden, hidden), rng_u, dtype=dtype))
            self._add_param(f"{gate}/b_in", np.zeros(hidden, dtype=dtype))
            self._add_param(f"{gate}/b_rec", np.zeros(hidden, dtype=dtype))

    def step(self, x_t, h_prev):
        """Single cell evaluation (x_t, h_prev are (batch, dim))."""
        p = self._params
        g = sigmoid(x_t @ p["update/w"].T + p["update/b_in"]
                    + h_prev @ p["update/u"].T + p["update/b_rec"])
        r = sigmoid(x_t @ p["reset/w"].T + p["reset/b_in"]
                    + h_prev @ p["reset/u"].T + p["reset/b_rec"])
        c = np.tanh(x_t @ p["cand/w"].T + p["cand/b_in"]
                    + (r * h_prev) @ p["cand/u"].T + p["cand/b_rec"])
        return (1.0 - g) * h_prev + g * c, (g, r, c)

    def forward(self, seq, train=True):
        T, B, _ = seq.shape
        p = self._params
        # input projections for the whole sequence in one pass per gate
        proj = {gate: seq @ p[f"{gate}/w"].T + p[f"{gate}/b_in"] for gate in GATES}
        h = np.zeros((B, self.hidden), dtype=seq.dtype)
        hs = np.empty((T, B, self.hidden), dtype=seq.dtype)
        cache = []
        for t in range(T):
            g = sigmoid(proj["update"][t] + h @ p["update/u"].T + p["update/b_rec"])
            r = sigmoid(proj["reset"][t] + h @ p["reset/u"].T + p["reset/b_rec"])
            c = np.tanh(proj["cand"][t] + (r * h) @ p["cand/u"].T + p["cand/b_rec"])
            h_new = (1.0 - g) * h + g * c
            cache.append((h, g, r, c))
            hs[t] = h_new
            h = h_new
        self._seq = seq
        self._cache = cache
        return hs

    def backward(self, dhs):
        seq, cache = self._seq, self._cache
        T, B, _ = seq.shape
        p, gr = self._params, self._grads
        dseq = np.zeros_like(seq)
        dh_next = np.zeros((B, self.hidden), dtype=seq.dtype)
        da = {gate: np.empty((T, B, self.hidden), dtype=seq.dtype) for gate in GATES}
        rh = np.empty((T, B, self.hidden), dtype=seq.dtype)
        for t in range(T - 1, -1, -1):
            h_prev, g, r, c = cache[t]
            dh = dhs[t] + dh_next
            dg = dh * (c - h_prev)
            dc = dh * g
            dh_prev = dh * (1.0 - g)
            da_c = dc * (1.0 - c * c)
            drh = da_c @ p["cand/u"]
            dr = drh * h_prev
            dh_prev += drh * r
            da_r = dr * r * (1.0 - r)
            da_g = dg * g * (1.0 - g)
            dh_prev += da_r @ p["reset/u"] + da_g @ p["update/u"]
            da["update"][t], da["reset"][t], da["cand"][t] = da_g, da_r, da_c
            rh[t] = r * h_prev
            dh_next = dh_prev
        seq2 = seq.reshape(T * B, -1)
        for gate in GATES:
            d2 = da[gate].reshape(T * B, self.hidden)
            gr[f"{gate}/w"] += d2.T @ seq2
            gr[f"{gate}/b_in"] += d2.sum(axis=0)
            gr[f"{gate}/b_rec"] += d2.sum(axis=0)
            dseq += (da[gate] @ p[f"{gate}/w"]).reshape(seq.shape)
        hprev_all = np.stack([cache[t][0] for t in range(T)]).reshape(T * B, self.hidden)
        gr["update/u"] += da["update"].reshape(T * B, -1).T @ hprev_all
        gr["reset/u"] += da["reset"].reshape(T * B, -1).T @ hprev_all
        gr["cand/u"] += da["cand"].reshape(T * B, -1).T @ rh.reshape(T * B, -1)
        # dh_prev at t=0 feeds the (fixed, zero) initial state: discard
        return dseq


class BiGru(Layer):
    """Forward + time-reversed GRU directions, outputs concatenated per frame."""

    def __init__(self, name, in_dim, hidden, seed, dtype=np.float32):
        super().__init__(name)
        self.fwd = GruDirection(f"{name}/fwd", in_dim, hidden, seed, dtype)
        self.bwd = GruDirection(f"{name}/bwd", in_dim, hidden, seed, dtype)
        self.hidden = hidden

    def params(self):
        return {**self.fwd.params(), **self.bwd.params()}

    def grads(self):
        return {**self.fwd.grads(), **self.bwd.grads()}

    def extras(self):
        return {}

    def zero_grads(self):
        self.fwd.zero_grads()
        self.bwd.zero_grads()

    def forward(self, seq, train=True):
        if seq.shape[0] < 1:
            raise ValueError("empty sequence")
        hf = self.fwd.forward(seq, train)
        hb = self.bwd.forward(seq[::-1], train)[::-1]
        return np.concatenate([hf, hb], axis=-1)

    def backward(self, dout):
        H = self.hidden
        dseq = self.fwd.backward(np.ascontiguousarray(dout[..., :H]))
        dseq = dseq + self.bwd.backward(np.ascontiguousarray(dout[::-1, :, H:]))[::-1]
        return dseq
