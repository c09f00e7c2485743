"""Small convolutional similarity networks written directly on numpy.

Two heads share the same building blocks (valid conv -> ReLU -> 2x2 max-pool):

* the 2-channel head stacks both patches as one 2-channel input and ends in a
  single fully connected unit whose output is the match score (> 0: match);
* the Siamese branch takes one patch and returns the flattened features as a
  descriptor; two descriptors are compared by Euclidean distance.

Activations are NHWC.  Parameters train in float32; every routine also runs in
float64, which the gradient checks use.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .errors import (ChecksumMismatch, EmptyDataset, IoFailure, LengthMismatch,
                     ShapeMismatch, UnsupportedFormat, VersionMismatch)
from .imaging import Patch, standardize_array

PATCH_SIZES = (16, 32, 64)


@dataclass(frozen=True)
class NetSpec:
    input_size: int = 32
    in_channels: int = 2
    blocks: tuple = ((32, 5), (64, 5))  # (out_channels, kernel) per conv block

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple((int(c), int(k)) for c, k in self.blocks))
        if self.in_channels not in (1, 2):
            raise ValueError("in_channels is 2 for the 2-channel head, 1 for a Siamese branch")
        if not self.blocks:
            raise ValueError("need at least one conv block")
        if self.sides()[-1] < 1:
            raise ValueError(f"{self.input_size}px input collapses to nothing through {self.blocks}")

    def sides(self):
        """Spatial side after each block: floor((side - k + 1) / 2)."""
        out, side = [], self.input_size
        for _, k in self.blocks:
            side = (side - k + 1) // 2
            out.append(side)
        return out

    @property
    def feature_dim(self) -> int:
        return self.sides()[-1] ** 2 * self.blocks[-1][0]

    def layer_shapes(self):
        shapes, cin = [], self.in_channels
        for i, (cout, k) in enumerate(self.blocks):
            shapes.append((f"conv{i}.w", (cout, cin, k, k)))
            shapes.append((f"conv{i}.b", (cout,)))
            cin = cout
        shapes.append(("fc.w", (self.feature_dim,)))
        shapes.append(("fc.b", (1,)))
        return shapes

    def to_dict(self):
        return {"input_size": self.input_size, "in_channels": self.in_channels,
                "blocks": [list(b) for b in self.blocks]}

    @classmethod
    def from_dict(cls, d):
        return cls(int(d["input_size"]), int(d["in_channels"]), tuple(tuple(b) for b in d["blocks"]))


def default_spec(input_size: int = 32, siamese: bool = False) -> NetSpec:
    if input_size not in PATCH_SIZES:
        raise ValueError(f"input_size must be one of {PATCH_SIZES}")
    return NetSpec(input_size, 1 if siamese else 2, ((32, 5), (64, 5)))


@dataclass
class NetworkParams:
    spec: NetSpec
    tensors: dict = field(default_factory=dict)

    def __post_init__(self):
        want = dict(self.spec.layer_shapes())
        if list(self.tensors) != list(want):
            raise ShapeMismatch(f"expected tensors {list(want)}, got {list(self.tensors)}")
        for name, shape in want.items():
            if self.tensors[name].shape != shape:
                raise ShapeMismatch(f"{name}: expected {shape}, got {self.tensors[name].shape}")

    @property
    def dtype(self):
        return self.tensors["fc.w"].dtype

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.astype(dtype) for k, v in self.tensors.items()})

    def copy(self) -> "NetworkParams":
        return NetworkParams(self.spec, {k: v.copy() for k, v in self.tensors.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.tensors.values()])

    def equal(self, other: "NetworkParams") -> bool:
        return self.spec == other.spec and all(
            np.array_equal(v, other.tensors[k]) for k, v in self.tensors.items())


def init_params(spec: NetSpec, seed: int = 0, dtype=np.float32) -> NetworkParams:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in spec.layer_shapes():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape, dtype=dtype)
            continue
        if len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
            fan_out = shape[0] * shape[2] * shape[3]
        else:
            fan_in, fan_out = shape[0], 1
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        tensors[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
    return NetworkParams(spec, tensors)


def zero_params(spec: NetSpec, dtype=np.float32) -> NetworkParams:
    return NetworkParams(spec, {n: np.zeros(s, dtype=dtype) for n, s in spec.layer_shapes()})


# --------------------------------------------------------------------- forward/backward

def _as_input(params: NetworkParams, x) -> np.ndarray:
    x = np.asarray(x)
    spec = params.spec
    if x.ndim == 3 and spec.in_channels == 1:
        x = x[..., None]
    want = (spec.input_size, spec.input_size, spec.in_channels)
    if x.ndim != 4 or x.shape[1:] != want:
        raise ShapeMismatch(f"expected input (N, {want[0]}, {want[1]}, {want[2]}), got {x.shape}")
    return np.ascontiguousarray(x, dtype=params.dtype)


def _features(params: NetworkParams, x, keep_cache: bool):
    cache = []
    t = params.tensors
    for i, (cout, k) in enumerate(params.spec.blocks):
        n, h, w, c = x.shape
        ho, wo = h - k + 1, w - k + 1
        cols = kernels.im2col(x, k)
        wmat = t[f"conv{i}.w"].reshape(cout, -1)
        z = (cols @ wmat.T + t[f"conv{i}.b"]).reshape(n, ho, wo, cout)
        a = np.maximum(z, 0)
        pooled, arg = kernels.maxpool2_forward(a)
        if keep_cache:
            cache.append((x.shape, cols, z, a.shape, arg))
        x = pooled
    return x.reshape(x.shape[0], -1), cache


def forward_batch(params: NetworkParams, x) -> np.ndarray:
    """Scores for a batch of stacked inputs, shape (N, s, s, in_channels)."""
    feats, _ = _features(params, _as_input(params, x), False)
    return feats @ params.tensors["fc.w"] + params.tensors["fc.b"][0]


def stack_pair(a, b) -> np.ndarray:
    """Two standardized patches (or patch arrays) -> one (s, s, 2) input."""
    pa = a.pixels if isinstance(a, Patch) else np.asarray(a)
    pb = b.pixels if isinstance(b, Patch) else np.asarray(b)
    if pa.shape != pb.shape:
        raise ShapeMismatch(f"patch shapes differ: {pa.shape} vs {pb.shape}")
    return np.stack([pa, pb], axis=-1)


def forward_two_channel(params: NetworkParams, a, b) -> float:
    x = stack_pair(a, b)[None]
    return float(forward_batch(params, x)[0])


def siamese_embed_batch(params: NetworkParams, x) -> np.ndarray:
    if params.spec.in_channels != 1:
        raise ShapeMismatch("Siamese embedding needs a 1-channel branch spec")
    feats, _ = _features(params, _as_input(params, x), False)
    return feats


def siamese_embed(params: NetworkParams, patch) -> np.ndarray:
    px = patch.pixels if isinstance(patch, Patch) else np.asarray(patch)
    return siamese_embed_batch(params, px[None, ..., None])[0]


def siamese_distance(d1, d2) -> float:
    d1 = np.asarray(d1, dtype=np.float64)
    d2 = np.asarray(d2, dtype=np.float64)
    if d1.shape != d2.shape:
        raise LengthMismatch(f"descriptor lengths differ: {d1.shape} vs {d2.shape}")
    return float(np.linalg.norm(d1 - d2))


def loss(score, label, kind: str = "hinge"):
    """Per-sample loss; ``label`` is +1 (match) or -1."""
    margin = np.asarray(label, dtype=np.float64) * np.asarray(score, dtype=np.float64)
    if kind == "hinge":
        out = np.maximum(0.0, 1.0 - margin)
    elif kind == "logistic":
        out = np.logaddexp(0.0, -margin)
    else:
        raise ValueError(f"unknown loss {kind!r}")
    return float(out) if np.ndim(out) == 0 else out


def _dloss(score, label, kind):
    margin = label * score
    if kind == "hinge":
        return np.where(margin < 1.0, -label, 0.0).astype(score.dtype)
    sig = 0.5 * (1.0 + np.tanh(0.5 * margin))  # sigmoid(margin), overflow-free
    return (-label * (1.0 - sig)).astype(score.dtype)


def backward(params: NetworkParams, x, labels, kind: str = "hinge"):
    """Gradients of the mean loss over the batch.

    Returns ``(grads, mean_loss, scores)`` with ``grads`` keyed like
    ``params.tensors``.
    """
    x = _as_input(params, x)
    labels = np.asarray(labels, dtype=params.dtype)
    if x.shape[0] == 0 or labels.shape != (x.shape[0],):
        raise ShapeMismatch("need a non-empty batch with one label per input")
    t = params.tensors
    feats, cache = _features(params, x, True)
    scores = feats @ t["fc.w"] + t["fc.b"][0]
    n = x.shape[0]
    mean_loss = float(np.mean(loss(scores, labels, kind)))

    ds = _dloss(scores, labels, kind) / n
    grads = {"fc.b": np.array([ds.sum()], dtype=params.dtype), "fc.w": feats.T @ ds}
    d = np.outer(ds, t["fc.w"])
    for i in reversed(range(len(params.spec.blocks))):
        in_shape, cols, z, a_shape, arg = cache[i]
        cout = params.spec.blocks[i][0]
        da = kernels.maxpool2_backward(np.ascontiguousarray(d.reshape(-1, *arg.shape[1:])), arg, a_shape)
        dz = (da * (z > 0)).reshape(-1, cout)
        grads[f"conv{i}.w"] = (dz.T @ cols).reshape(t[f"conv{i}.w"].shape)
        grads[f"conv{i}.b"] = dz.sum(axis=0)
        if i > 0:
            wmat = t[f"conv{i}.w"].reshape(cout, -1)
            d = kernels.col2im(np.ascontiguousarray(dz @ wmat), in_shape, params.spec.blocks[i][1])
    ordered = {name: grads[name] for name in t}
    return ordered, mean_loss, scores


def predict(params: NetworkParams, a, b, threshold: float = 0.0) -> bool:
    return forward_two_channel(params, a, b) > threshold


# --------------------------------------------------------------------- training

@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch_size: int = 32
    base_lr: float = 0.01
    lr_decay: float = 0.5
    lr_period: int = 8
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    loss: str = "hinge"
    channel_swap: bool = True

    def __post_init__(self):
        if not self.base_lr > 0:
            raise ValueError("base_lr must be positive")
        if not 0 < self.lr_decay <= 1:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.lr_period < 1 or self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs, batch_size and lr_period must be >= 1")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.loss not in ("hinge", "logistic"):
            raise ValueError(f"unknown loss {self.loss!r}")

    def lr_at(self, epoch: int) -> float:
        """Step decay: base_lr * decay ** (epoch // period), epochs counted from 0."""
        return self.base_lr * self.lr_decay ** (epoch // self.lr_period)


def as_arrays(data, spec: NetSpec):
    """Accept ``(X, y)`` or a list of SampleRecords; return standardized float32 arrays."""
    if isinstance(data, tuple) and len(data) == 2:
        x, y = data
        x = np.asarray(x, dtype=np.float32)
        y = np.asarray(y, dtype=np.float32)
    else:
        records = list(data)
        if not records:
            raise EmptyDataset("no samples")
        x = np.stack([stack_pair(standardize_array(r.patch_a.pixels), standardize_array(r.patch_b.pixels))
                      for r in records]).astype(np.float32)
        y = np.array([r.label for r in records], dtype=np.float32)
    if x.shape[0] == 0:
        raise EmptyDataset("no samples")
    want = (spec.input_size, spec.input_size, spec.in_channels)
    if x.shape[1:] != want:
        raise ShapeMismatch(f"samples are {x.shape[1:]}, network expects {want}")
    return x, y


def evaluate(params: NetworkParams, x, y, kind: str = "hinge", chunk: int = 512):
    scores = np.concatenate([forward_batch(params, x[i:i + chunk]) for i in range(0, len(x), chunk)])
    return float(np.mean(loss(scores, y, kind))), float(np.mean((scores > 0) == (y > 0))), scores


def train(train_set, val_set, spec: NetSpec, config: TrainConfig = TrainConfig(),
          init: NetworkParams | None = None, log=None):
    """Minibatch SGD with momentum and step-decayed learning rate.

    Returns ``(best_params, history)`` where ``best_params`` had the highest
    validation accuracy (earliest epoch on ties) and ``history`` is a list of
    per-epoch dicts.
    """
    xt, yt = as_arrays(train_set, spec)
    xv, yv = as_arrays(val_set, spec)
    if config.channel_swap and spec.in_channels == 2:
        xt = np.concatenate([xt, xt[..., ::-1]])
        yt = np.concatenate([yt, yt])
    rng = np.random.default_rng(config.seed)
    params = init.astype(np.float32) if init is not None else init_params(spec, config.seed)
    velocity = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    best, best_acc, history = params.copy(), -1.0, []

    for epoch in range(config.epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(xt))
        losses, hits = [], 0
        for start in range(0, len(order), config.batch_size):
            idx = order[start:start + config.batch_size]
            grads, batch_loss, scores = backward(params, xt[idx], yt[idx], config.loss)
            losses.append(batch_loss * len(idx))
            hits += int(np.sum((scores > 0) == (yt[idx] > 0)))
            for name, g in grads.items():
                if config.weight_decay and name.endswith(".w"):
                    g = g + config.weight_decay * params.tensors[name]
                v = velocity[name]
                v *= config.momentum
                v -= lr * g
                params.tensors[name] += v
        val_loss, val_acc, _ = evaluate(params, xv, yv, config.loss)
        row = {"epoch": epoch, "train_loss": sum(losses) / len(xt), "train_acc": hits / len(xt),
               "val_loss": val_loss, "val_acc": val_acc, "lr": lr}
        history.append(row)
        if log is not None:
            log(row)
        if val_acc > best_acc:
            best_acc, best = val_acc, params.copy()
    return best, history


# --------------------------------------------------------------------- serialization

MAGIC = b"PMCNN\x00"
FORMAT_VERSION = 1


def save_model(params: NetworkParams, path) -> None:
    """Write magic, version, spec JSON, float32 LE blob (declaration order), SHA-256 of blob."""
    spec_json = json.dumps(params.spec.to_dict(), sort_keys=True).encode()
    blob = b"".join(np.ascontiguousarray(v, dtype="<f4").tobytes() for v in params.tensors.values())
    digest = hashlib.sha256(blob).digest()
    data = (MAGIC + struct.pack("<B", FORMAT_VERSION) + struct.pack("<I", len(spec_json)) + spec_json
            + struct.pack("<Q", len(blob)) + blob + digest)
    try:
        with open(os.fspath(path), "wb") as fh:
            fh.write(data)
    except OSError as exc:
        raise IoFailure(f"cannot write model {path}: {exc}") from exc


def load_model(path) -> NetworkParams:
    path = os.fspath(path)
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < len(MAGIC) + 1:
        raise ChecksumMismatch("model file truncated inside its header")
    if data[:len(MAGIC)] != MAGIC:
        raise UnsupportedFormat(f"{path} is not a phasematch model")
    pos = len(MAGIC)
    version = data[pos]
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, this build reads {FORMAT_VERSION}")
    pos += 1
    try:
        (spec_len,) = struct.unpack_from("<I", data, pos)
        pos += 4
        spec = NetSpec.from_dict(json.loads(data[pos:pos + spec_len].decode()))
        pos += spec_len
        (blob_len,) = struct.unpack_from("<Q", data, pos)
        pos += 8
    except (struct.error, ValueError, KeyError, TypeError) as exc:
        raise ChecksumMismatch(f"model header damaged or truncated: {exc}") from None
    blob = data[pos:pos + blob_len]
    digest = data[pos + blob_len:pos + blob_len + 32]
    if len(blob) != blob_len or len(digest) != 32 or hashlib.sha256(blob).digest() != digest:
        raise ChecksumMismatch("parameter blob does not match its checksum")
    tensors, off = {}, 0
    for name, shape in spec.layer_shapes():
        count = int(np.prod(shape))
        tensors[name] = np.frombuffer(blob, dtype="<f4", count=count, offset=off).astype(np.float32).reshape(shape)
        off += 4 * count
    if off != blob_len:
        raise ChecksumMismatch("blob size disagrees with the stored spec")
    return NetworkParams(spec, tensors)
