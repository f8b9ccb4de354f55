"""Minimal CNN engine: exactly the two fixed architectures, plus Adam.

Layers operate on channels-last batches: grid clips are (B, 9, 9, 128, 1),
waveform clips are (B, 128, 1).  Convolutions are stride-1 with "same" zero
padding (pad (k-1)//2 before, the rest after); pooling runs on the time axis
(the last spatial axis) with stride equal to the pool size.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import StructuralError, ValidationError

CHECKPOINT_MAGIC = b"AFFUSENET1"

Params = list[dict[str, np.ndarray]]


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a fixed architecture.

    ``maps`` doubles as the dense width; ``kernel`` is the conv kernel or the
    pool shape; ``keep_prob`` only applies to dropout.
    """

    kind: str
    kernel: tuple[int, ...] = ()
    maps: int = 0
    stride: int = 1
    padding: str = "same"
    keep_prob: float = 1.0

    def __post_init__(self) -> None:
        if any(k < 1 for k in self.kernel) or self.stride < 1:
            raise ValidationError(f"{self.kind}: kernel/stride must be positive")
        if self.kind == "dropout" and not (0.0 < self.keep_prob <= 1.0):
            raise ValidationError("dropout keep probability must be in (0, 1]")


@dataclass
class ClassScores:
    """Softmax probability vector for one clip of one channel."""

    probs: np.ndarray
    channel: str = ""

    def __post_init__(self) -> None:
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 1:
            raise StructuralError("ClassScores.probs must be a vector")
        if np.any(p < 0.0) or np.any(p > 1.0) or abs(p.sum() - 1.0) > 1e-6:
            raise ValidationError("class scores must lie in [0,1] and sum to 1")
        self.probs = p


@dataclass
class Model:
    arch: str                       # "CNN3D" | "CNN1D"
    n_labels: int
    layers: list[LayerSpec]
    params: Params | None = None
    input_shape: tuple[int, ...] | None = None
    dtype: np.dtype = np.dtype(np.float32)


def build_model_3d(
    n_labels: int,
    maps: tuple[int, int] = (32, 64),
    dense_units: int = 1024,
    keep_prob: float = 0.5,
) -> Model:
    """Two conv3d(3x3x4)+pool(1,1,2) stages, dense head; defaults per Fig. 1."""
    if n_labels < 2:
        raise ValidationError("n_labels must be >= 2")
    layers = [
        LayerSpec("conv3d", kernel=(3, 3, 4), maps=maps[0]),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=(1, 1, 2)),
        LayerSpec("conv3d", kernel=(3, 3, 4), maps=maps[1]),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=(1, 1, 2)),
        LayerSpec("flatten"),
        LayerSpec("dense", maps=dense_units),
        LayerSpec("relu"),
        LayerSpec("dropout", keep_prob=keep_prob),
        LayerSpec("dense", maps=n_labels),
        LayerSpec("softmax"),
    ]
    return Model(arch="CNN3D", n_labels=n_labels, layers=layers)


def build_model_1d(
    n_labels: int,
    maps: tuple[int, int] = (16, 32),
    dense_units: int = 256,
    keep_prob: float = 0.5,
) -> Model:
    """Two conv1d(3)+pool(2) stages, dense head; defaults per Fig. 2."""
    if n_labels < 2:
        raise ValidationError("n_labels must be >= 2")
    layers = [
        LayerSpec("conv1d", kernel=(3,), maps=maps[0]),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=(2,)),
        LayerSpec("conv1d", kernel=(3,), maps=maps[1]),
        LayerSpec("relu"),
        LayerSpec("maxpool", kernel=(2,)),
        LayerSpec("flatten"),
        LayerSpec("dense", maps=dense_units),
        LayerSpec("relu"),
        LayerSpec("dropout", keep_prob=keep_prob),
        LayerSpec("dense", maps=n_labels),
        LayerSpec("softmax"),
    ]
    return Model(arch="CNN1D", n_labels=n_labels, layers=layers)


def infer_shapes(
    layers: Sequence[LayerSpec], input_shape: tuple[int, ...]
) -> list[tuple[int, ...]]:
    """Per-layer output shapes (batch axis excluded), without allocating."""
    shape = tuple(input_shape)
    out = []
    for spec in layers:
        if spec.kind in ("conv3d", "conv1d"):
            ndim = 3 if spec.kind == "conv3d" else 1
            if len(shape) != ndim + 1:
                raise StructuralError(
                    f"{spec.kind} expects {ndim} spatial dims + channels, got {shape}"
                )
            shape = shape[:-1] + (spec.maps,)
        elif spec.kind == "maxpool":
            if any(k != 1 for k in spec.kernel[:-1]):
                raise StructuralError("pooling is only supported on the time axis")
            p = spec.kernel[-1]
            shape = shape[:-2] + (shape[-2] // p, shape[-1])
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            if len(shape) != 1:
                raise StructuralError("dense layer needs a flat input")
            shape = (spec.maps,)
        elif spec.kind in ("relu", "dropout", "softmax"):
            pass
        else:
            raise StructuralError(f"unknown layer kind {spec.kind!r}")
        out.append(shape)
    return out


def init_params(model: Model, input_shape: tuple[int, ...], seed: int = 0) -> Model:
    """He-init conv/dense weights, zero biases; fixes the model's input shape."""
    rng = np.random.default_rng(seed)
    shapes = infer_shapes(model.layers, input_shape)
    params: Params = []
    shape = tuple(input_shape)
    for spec, out_shape in zip(model.layers, shapes):
        if spec.kind in ("conv3d", "conv1d"):
            c_in = shape[-1]
            w_shape = spec.kernel + (c_in, spec.maps)
            fan_in = int(np.prod(spec.kernel)) * c_in
            w = rng.standard_normal(w_shape) * np.sqrt(2.0 / fan_in)
            params.append(
                {"w": w.astype(model.dtype), "b": np.zeros(spec.maps, model.dtype)}
            )
        elif spec.kind == "dense":
            d_in = shape[0]
            w = rng.standard_normal((d_in, spec.maps)) * np.sqrt(2.0 / d_in)
            params.append(
                {"w": w.astype(model.dtype), "b": np.zeros(spec.maps, model.dtype)}
            )
        else:
            params.append({})
        shape = out_shape
    model.params = params
    model.input_shape = tuple(input_shape)
    return model


def _pad_same(x: np.ndarray, kernel: tuple[int, ...]) -> np.ndarray:
    pads = [(0, 0)]
    pads += [((k - 1) // 2, (k - 1) - (k - 1) // 2) for k in kernel]
    pads += [(0, 0)]
    return np.pad(x, pads)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Stride-1 same-padded correlation; x (B,*S,Cin), w (*K,Cin,Cout)."""
    kernel = w.shape[:-2]
    spatial = x.shape[1:-1]
    xp = _pad_same(x, kernel)
    out = np.zeros(x.shape[:-1] + (w.shape[-1],), dtype=x.dtype)
    for off in np.ndindex(*kernel):
        sl = (slice(None),) + tuple(
            slice(o, o + s) for o, s in zip(off, spatial)
        )
        out += np.tensordot(xp[sl], w[off], axes=([x.ndim - 1], [0]))
    return out + b


def conv_backward(
    x: np.ndarray, w: np.ndarray, dy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients (dx, dw, db) of conv_forward."""
    kernel = w.shape[:-2]
    spatial = x.shape[1:-1]
    xp = _pad_same(x, kernel)
    dxp = np.zeros_like(xp)
    dw = np.zeros_like(w)
    reduce_axes = tuple(range(x.ndim - 1))     # batch + spatial
    db = dy.sum(axis=reduce_axes)
    for off in np.ndindex(*kernel):
        sl = (slice(None),) + tuple(
            slice(o, o + s) for o, s in zip(off, spatial)
        )
        dw[off] = np.tensordot(xp[sl], dy, axes=(reduce_axes, reduce_axes))
        dxp[sl] += np.tensordot(dy, w[off], axes=([dy.ndim - 1], [1]))
    crop = (slice(None),) + tuple(
        slice((k - 1) // 2, (k - 1) // 2 + s) for k, s in zip(kernel, spatial)
    )
    return dxp[crop], dw, db


def _pool_forward(x: np.ndarray, p: int) -> tuple[np.ndarray, np.ndarray]:
    t = x.shape[-2]
    if t % p != 0:
        raise StructuralError(f"time axis {t} not divisible by pool {p}")
    xr = x.reshape(x.shape[:-2] + (t // p, p, x.shape[-1]))
    idx = xr.argmax(axis=-2)
    out = np.take_along_axis(xr, idx[..., None, :], axis=-2).squeeze(-2)
    return out, idx


def _pool_backward(dy: np.ndarray, idx: np.ndarray, x_shape: tuple, p: int) -> np.ndarray:
    t = x_shape[-2]
    dxr = np.zeros(x_shape[:-2] + (t // p, p, x_shape[-1]), dtype=dy.dtype)
    np.put_along_axis(dxr, idx[..., None, :], dy[..., None, :], axis=-2)
    return dxr.reshape(x_shape)


def _softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _forward(
    model: Model,
    x: np.ndarray,
    train: bool,
    rng: np.random.Generator | None,
    want_cache: bool,
) -> tuple[np.ndarray, np.ndarray, list]:
    """Returns (probs, logits, caches)."""
    if model.params is None:
        raise StructuralError("model parameters not initialized")
    if tuple(x.shape[1:]) != model.input_shape:
        raise StructuralError(
            f"batch shape {x.shape[1:]} does not match model input "
            f"{model.input_shape}"
        )
    if train and rng is None:
        raise ValidationError("train-mode forward requires a dropout rng/seed")

    out = np.ascontiguousarray(x, dtype=model.dtype)
    caches: list = []
    logits = None
    for spec, p in zip(model.layers, model.params):
        cache = None
        if spec.kind in ("conv3d", "conv1d"):
            cache = (out, p["w"])
            out = conv_forward(out, p["w"], p["b"])
        elif spec.kind == "relu":
            cache = out
            out = np.maximum(out, 0)
        elif spec.kind == "maxpool":
            pool = spec.kernel[-1]
            pooled, idx = _pool_forward(out, pool)
            cache = (out.shape, idx, pool)
            out = pooled
        elif spec.kind == "flatten":
            cache = out.shape
            out = out.reshape(out.shape[0], -1)
        elif spec.kind == "dense":
            cache = out
            out = out @ p["w"] + p["b"]
        elif spec.kind == "dropout":
            if train:
                mask = (rng.random(out.shape) < spec.keep_prob).astype(model.dtype)
                mask /= spec.keep_prob
                cache = mask
                out = out * mask
            else:
                cache = None
        elif spec.kind == "softmax":
            logits = out
            out = _softmax(out)
        caches.append(cache if want_cache else None)
    if logits is None:
        raise StructuralError("architecture must end with a softmax layer")
    return out, logits, caches


def forward(
    model: Model,
    batch: np.ndarray,
    mode: str = "eval",
    rng_seed: int | None = None,
) -> np.ndarray:
    """Probabilities (B, n_labels); train mode applies seeded inverted dropout."""
    if mode not in ("train", "eval"):
        raise ValidationError(f"unknown forward mode {mode!r}")
    rng = np.random.default_rng(rng_seed) if mode == "train" else None
    probs, _, _ = _forward(model, batch, mode == "train", rng, want_cache=False)
    return probs


def predict_proba(model: Model, clip: np.ndarray, channel: str = "") -> ClassScores:
    """Eval-mode forward of a single clip."""
    probs = forward(model, np.asarray(clip)[None, ...], mode="eval")
    return ClassScores(probs=probs[0].astype(np.float64), channel=channel)


def _loss_and_grad_rng(
    model: Model, batch: np.ndarray, labels: np.ndarray, rng: np.random.Generator
) -> tuple[float, Params]:
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= model.n_labels:
        raise ValidationError(
            f"labels must lie in [0, {model.n_labels}), got "
            f"[{labels.min()}, {labels.max()}]"
        )
    probs, logits, caches = _forward(model, batch, True, rng, want_cache=True)
    b = batch.shape[0]
    # mean cross-entropy straight from the logits (log-sum-exp form)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1))
    loss = float(np.mean(log_z - shifted[np.arange(b), labels]))

    onehot = np.zeros_like(probs)
    onehot[np.arange(b), labels] = 1.0
    grad = ((probs - onehot) / b).astype(model.dtype)

    grads: Params = [{} for _ in model.layers]
    for i in range(len(model.layers) - 1, -1, -1):
        spec, p, cache = model.layers[i], model.params[i], caches[i]
        if spec.kind == "softmax":
            continue    # fused with the cross-entropy above
        if spec.kind in ("conv3d", "conv1d"):
            x_in, w = cache
            grad, dw, db = conv_backward(x_in, w, grad)
            grads[i] = {"w": dw, "b": db}
        elif spec.kind == "relu":
            grad = grad * (cache > 0)
        elif spec.kind == "maxpool":
            x_shape, idx, pool = cache
            grad = _pool_backward(grad, idx, x_shape, pool)
        elif spec.kind == "flatten":
            grad = grad.reshape(cache)
        elif spec.kind == "dense":
            x_in = cache
            grads[i] = {"w": x_in.T @ grad, "b": grad.sum(axis=0)}
            grad = grad @ p["w"].T
        elif spec.kind == "dropout":
            if cache is not None:
                grad = grad * cache
    return loss, grads


def loss_and_grad(
    model: Model,
    batch: np.ndarray,
    labels: np.ndarray,
    rng_seed: int | None = None,
) -> tuple[float, Params]:
    """Mean softmax cross-entropy and gradients for every parameter tensor."""
    return _loss_and_grad_rng(model, batch, labels, np.random.default_rng(rng_seed))


@dataclass
class OptimizerState:
    """Adam accumulators mirroring the parameter tree."""

    m: Params
    v: Params
    step: int
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def init_optimizer(model: Model, lr: float = 1e-3) -> OptimizerState:
    if model.params is None:
        raise StructuralError("initialize the model before the optimizer")
    zeros = lambda: [
        {k: np.zeros_like(v) for k, v in p.items()} for p in model.params
    ]
    return OptimizerState(m=zeros(), v=zeros(), step=0, lr=lr)


def adam_update(
    params: Params, grads: Params, state: OptimizerState
) -> tuple[Params, OptimizerState]:
    """One bias-corrected Adam step; updates params in place."""
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.m, state.v):
        for key in p:
            m[key] = b1 * m[key] + (1 - b1) * g[key]
            v[key] = b2 * v[key] + (1 - b2) * np.square(g[key])
            m_hat = m[key] / (1 - b1**t)
            v_hat = v[key] / (1 - b2**t)
            p[key] -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(
                p[key].dtype
            )
    return params, state


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    batch_size: int = 240
    lr: float = 1e-3
    seed: int | tuple[int, ...] = 0


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    train_loss: float
    val_accuracy: float


def evaluate(
    model: Model, x: np.ndarray, y: np.ndarray, batch_size: int = 240
) -> float:
    """Eval-mode accuracy over a labelled set."""
    hits = 0
    for start in range(0, len(x), batch_size):
        probs = forward(model, x[start : start + batch_size], mode="eval")
        hits += int(np.sum(probs.argmax(axis=-1) == y[start : start + batch_size]))
    return hits / len(x)


def train(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    val_x: np.ndarray,
    val_y: np.ndarray,
    config: TrainConfig,
) -> tuple[Model, list[EpochStats]]:
    """Seeded mini-batch Adam training; deterministic for a fixed seed."""
    if len(train_x) == 0:
        raise ValidationError("training set is empty")
    entropy = list(config.seed) if isinstance(config.seed, tuple) else config.seed
    ss = np.random.SeedSequence(entropy)
    seed_init, seed_shuffle, seed_drop = ss.spawn(3)
    if model.params is None:
        init_params(model, tuple(train_x.shape[1:]), seed=seed_init)
    rng_shuffle = np.random.default_rng(seed_shuffle)
    rng_drop = np.random.default_rng(seed_drop)

    state = init_optimizer(model, lr=config.lr)
    history = []
    for epoch in range(config.epochs):
        perm = rng_shuffle.permutation(len(train_x))
        losses = []
        for start in range(0, len(perm), config.batch_size):
            idx = perm[start : start + config.batch_size]
            loss, grads = _loss_and_grad_rng(model, train_x[idx], train_y[idx], rng_drop)
            adam_update(model.params, grads, state)
            losses.append(loss)
        val_acc = evaluate(model, val_x, val_y, config.batch_size) if len(val_x) else 0.0
        history.append(EpochStats(epoch, float(np.mean(losses)), val_acc))
    return model, history


def save_model(model: Model, path: str | os.PathLike) -> None:
    """Checkpoint: JSON header + little-endian float32 parameter blobs."""
    if model.params is None:
        raise StructuralError("cannot save an uninitialized model")
    header = {
        "arch": model.arch,
        "n_labels": model.n_labels,
        "input_shape": list(model.input_shape),
        "layers": [
            {
                "kind": s.kind,
                "kernel": list(s.kernel),
                "maps": s.maps,
                "keep_prob": s.keep_prob,
            }
            for s in model.layers
        ],
        "tensors": [
            {"layer": i, "name": k, "shape": list(v.shape)}
            for i, p in enumerate(model.params)
            for k, v in sorted(p.items())
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in model.params:
            for _, v in sorted(p.items()):
                fh.write(np.ascontiguousarray(v, dtype="<f4").tobytes())


def load_model(path: str | os.PathLike) -> Model:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise StructuralError(f"{path} is not a model checkpoint")
        (header_len,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        layers = [
            LayerSpec(
                kind=entry["kind"],
                kernel=tuple(entry["kernel"]),
                maps=entry["maps"],
                keep_prob=entry["keep_prob"],
            )
            for entry in header["layers"]
        ]
        params: Params = [{} for _ in layers]
        for entry in header["tensors"]:
            shape = tuple(entry["shape"])
            count = int(np.prod(shape))
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(shape)
            params[entry["layer"]][entry["name"]] = data.copy()
    return Model(
        arch=header["arch"],
        n_labels=header["n_labels"],
        layers=layers,
        params=params,
        input_shape=tuple(header["input_shape"]),
        dtype=np.dtype(np.float32),
    )
