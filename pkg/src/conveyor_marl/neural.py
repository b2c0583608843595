"""Small dense networks with hand-written gradients and an AdamW optimizer.

Networks are affine -> ReLU -> affine -> ReLU -> affine (no output
activation). Inputs may be a single vector or a batch of row vectors;
weights are stored as ``(fan_in, fan_out)`` so ``y = x @ W + b``.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"CMCK"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class MlpParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def __post_init__(self) -> None:
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need one bias per weight matrix")
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.ndim != 2 or b.shape != (w.shape[1],):
                raise ShapeError(f"layer {k}: weight {w.shape} / bias {b.shape} mismatch")
            if k and self.weights[k - 1].shape[1] != w.shape[0]:
                raise ShapeError(f"layer {k} input {w.shape[0]} != previous output")

    @property
    def sizes(self) -> tuple[int, ...]:
        return (self.weights[0].shape[0],) + tuple(w.shape[1] for w in self.weights)

    def arrays(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def frozen_copy(self) -> "MlpParams":
        p = self.copy()
        for a in p.arrays():
            a.setflags(write=False)
        return p

    def tobytes(self) -> bytes:
        return b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for a in self.arrays())


def init_mlp(sizes, rng: np.random.Generator) -> MlpParams:
    """Uniform fan-in initialisation, U(-1/sqrt(fan_in), 1/sqrt(fan_in))."""
    weights, biases = [], []
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        bound = 1.0 / np.sqrt(n_in)
        weights.append(rng.uniform(-bound, bound, size=(n_in, n_out)))
        biases.append(rng.uniform(-bound, bound, size=n_out))
    return MlpParams(weights, biases)


def _check_input(p: MlpParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p.sizes[0] or x.ndim not in (1, 2):
        raise ShapeError(f"input shape {x.shape} does not match network input {p.sizes[0]}")
    return x


def forward_cache(p: MlpParams, x) -> tuple[np.ndarray, list[np.ndarray]]:
    """Output plus the per-layer inputs needed by :func:`backward`."""
    h = _check_input(p, x)
    inputs = []
    last = len(p.weights) - 1
    for k, (w, b) in enumerate(zip(p.weights, p.biases)):
        inputs.append(h)
        h = h @ w + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h, inputs


def forward(p: MlpParams, x) -> np.ndarray:
    return forward_cache(p, x)[0]


def backward(p: MlpParams, x, upstream, cache: list[np.ndarray] | None = None) -> list[np.ndarray]:
    """Gradients of ``sum(upstream * forward(p, x))`` w.r.t. ``p.arrays()``.

    For a batch, ``upstream`` carries one row per sample and the gradients are
    summed over the batch.
    """
    if cache is None:
        _, cache = forward_cache(p, x)
    g = np.asarray(upstream, dtype=float)
    out_shape = cache[0].shape[:-1] + (p.sizes[-1],)
    if g.shape != out_shape:
        raise ShapeError(f"upstream gradient {g.shape} != output {out_shape}")
    grads = [None] * (2 * len(p.weights))
    for k in range(len(p.weights) - 1, -1, -1):
        h = cache[k]
        if h.ndim == 1:
            grads[2 * k] = np.outer(h, g)
            grads[2 * k + 1] = g.copy()
        else:
            grads[2 * k] = h.T @ g
            grads[2 * k + 1] = g.sum(axis=0)
        if k:
            g = (g @ p.weights[k].T) * (h > 0)
    return grads


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=float)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


policy_dist = softmax


def sample(probs, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a categorical distribution."""
    cdf = np.cumsum(probs)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    return min(k, len(cdf) - 1)


def log_prob(logits, action) -> np.ndarray | float:
    lp = log_softmax(logits)
    if lp.ndim == 1:
        return float(lp[int(action)])
    return lp[np.arange(len(lp)), np.asarray(action, dtype=int)]


@dataclass
class AdamW:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_params(cls, p: MlpParams, **kwargs) -> "AdamW":
        arrays = p.arrays()
        return cls(m=[np.zeros_like(a) for a in arrays], v=[np.zeros_like(a) for a in arrays], **kwargs)

    def copy(self) -> "AdamW":
        return AdamW(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay, self.step,
                     [a.copy() for a in self.m], [a.copy() for a in self.v])


def adamw_step(p: MlpParams, grads: list[np.ndarray], opt: AdamW) -> tuple[MlpParams, AdamW]:
    """One decoupled-weight-decay Adam update, applied in place."""
    arrays = p.arrays()
    if not opt.m:
        opt.m = [np.zeros_like(a) for a in arrays]
        opt.v = [np.zeros_like(a) for a in arrays]
    if len(grads) != len(arrays):
        raise ShapeError("gradient list does not match parameters")
    opt.step += 1
    c1 = 1.0 - opt.beta1**opt.step
    c2 = 1.0 - opt.beta2**opt.step
    for a, g, m, v in zip(arrays, grads, opt.m, opt.v):
        if g.shape != a.shape:
            raise ShapeError(f"gradient {g.shape} != parameter {a.shape}")
        a *= 1.0 - opt.lr * opt.weight_decay
        m *= opt.beta1
        m += (1.0 - opt.beta1) * g
        v *= opt.beta2
        v += (1.0 - opt.beta2) * g * g
        a -= opt.lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
    return p, opt


@dataclass
class Checkpoint:
    params: MlpParams
    meta: dict

    def digest(self) -> str:
        return hashlib.sha256(dumps_checkpoint(self.params, self.meta)).hexdigest()


def dumps_checkpoint(p: MlpParams, meta: dict | None = None) -> bytes:
    """Binary checkpoint: magic, version, JSON header, little-endian f64 arrays, sha256 trailer."""
    header = dict(meta or {})
    header["format_version"] = CHECKPOINT_VERSION
    header["layer_sizes"] = list(p.sizes)
    head = json.dumps(header, sort_keys=True).encode()
    body = CHECKPOINT_MAGIC + struct.pack("<II", CHECKPOINT_VERSION, len(head)) + head + p.tobytes()
    return body + hashlib.sha256(body).digest()


def loads_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 44 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file")
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointError("checkpoint checksum mismatch")
    version, hlen = struct.unpack("<II", body[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    header = json.loads(body[12 : 12 + hlen])
    sizes = header["layer_sizes"]
    data = np.frombuffer(body[12 + hlen :], dtype="<f8")
    weights, biases, pos = [], [], 0
    for n_in, n_out in zip(sizes[:-1], sizes[1:]):
        weights.append(data[pos : pos + n_in * n_out].reshape(n_in, n_out).astype(float))
        pos += n_in * n_out
        biases.append(data[pos : pos + n_out].astype(float))
        pos += n_out
    if pos != len(data):
        raise CheckpointError("checkpoint payload length does not match layer sizes")
    meta = {k: v for k, v in header.items() if k not in ("format_version", "layer_sizes")}
    return Checkpoint(MlpParams(weights, biases), meta)


def save_checkpoint(path, p: MlpParams, meta: dict | None = None) -> str:
    blob = dumps_checkpoint(p, meta)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path) -> Checkpoint:
    return loads_checkpoint(Path(path).read_bytes())
