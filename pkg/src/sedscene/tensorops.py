"""Small numerical kernel: deterministic RNG, initializers, activations.

Everything here is a pure function of its inputs.  Arrays are plain numpy
ndarrays in row-major (C) order; float32 is the training precision and
float64 is used for gradient checking.
"""

import hashlib

import numpy as np


def make_rng(seed: int) -> np.random.Generator:
    """Deterministic generator (PCG64): same seed, same stream, any platform."""
    return np.random.Generator(np.random.PCG64(seed))


def derive_rng(seed: int, name: str) -> np.random.Generator:
    """Generator keyed by (seed, name) so each named tensor draws an independent,
    reproducible stream regardless of initialization order."""
    h = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return make_rng(int.from_bytes(h[:8], "little"))


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return a @ b


_UNARY = {
    "sigmoid": lambda a: sigmoid(a),
    "tanh": np.tanh,
    "exp": np.exp,
}
_BINARY = {
    "add": np.add,
    "sub": np.subtract,
    "mul": np.multiply,
}


def ew(op: str, a: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """Elementwise op dispatcher; binary ops require equal shapes."""
    a = np.asarray(a)
    if op in _BINARY:
        if b is None:
            raise ValueError(f"{op} needs two operands")
        b = np.asarray(b)
        if a.shape != b.shape:
            raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
        return _BINARY[op](a, b)
    if op == "log":
        if np.any(a <= 0):
            raise ValueError("log of non-positive value")
        return np.log(a)
    if op in _UNARY:
        return _UNARY[op](a)
    raise ValueError(f"unknown op {op!r}")


def sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign to avoid overflow in exp
    out = np.empty_like(x, dtype=x.dtype if np.issubdtype(x.dtype, np.floating) else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def glorot_uniform(shape, rng: np.random.Generator, fan_in=None, fan_out=None,
                   dtype=np.float32) -> np.ndarray:
    """Uniform [-L, L] with L = sqrt(6 / (fan_in + fan_out)).

    For 2-D weights the fans default to (in, out) = (shape[1], shape[0]);
    for conv weights (O, C, kh, kw) they default to C*kh*kw and O*kh*kw.
    """
    shape = tuple(shape)
    if not shape:
        raise ValueError("empty shape")
    if fan_in is None or fan_out is None:
        if len(shape) == 4:
            rf = shape[2] * shape[3]
            fan_in, fan_out = shape[1] * rf, shape[0] * rf
        elif len(shape) == 2:
            fan_in, fan_out = shape[1], shape[0]
        else:
            fan_in = fan_out = int(np.prod(shape))
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(dtype)


def assert_finite(x: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise FloatingPointError(f"non-finite values in {what}")
    return x
