"""Small keyword-spotting classifiers trained with mini-batch SGD and cross-entropy.

Three architectures are available, all working on a (frames, n_mels) log-Mel
input:

* ``linear``   - softmax regression on the flattened spectrogram
* ``mlp``      - one or more ReLU hidden layers (default 128 units)
* ``tiny_cnn`` - conv3x3(8) -> ReLU -> maxpool2 -> conv3x3(16) -> ReLU -> maxpool2
                 -> dense(64) -> ReLU -> dense(n_classes)

Parameters live in one flat vector; :func:`param_layout` says how it is cut
into weight tensors. Gradients are analytic (hand-written backprop). Training
runs in float32 by default for speed; checkpoints store float64.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

log = logging.getLogger(__name__)

ARCHS = ("linear", "mlp", "tiny_cnn")
DEFAULT_HIDDEN = {"linear": (), "mlp": (128,), "tiny_cnn": (8, 16, 64)}


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    arch: str
    input_shape: tuple[int, int]
    n_classes: int
    hidden: tuple[int, ...] | None = None

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"unknown arch {self.arch!r}; expected one of {ARCHS}")
        if self.n_classes < 2:
            raise ValueError("n_classes must be >= 2")
        object.__setattr__(self, "input_shape", tuple(int(v) for v in self.input_shape))
        hidden = DEFAULT_HIDDEN[self.arch] if self.hidden is None else tuple(self.hidden)
        if self.arch == "tiny_cnn" and len(hidden) != 3:
            raise ValueError("tiny_cnn hidden must be (conv1_channels, conv2_channels, dense_units)")
        if self.arch == "linear" and hidden:
            raise ValueError("linear model takes no hidden layers")
        object.__setattr__(self, "hidden", hidden)

    def to_json(self) -> dict:
        return {"arch": self.arch, "input_shape": list(self.input_shape),
                "n_classes": self.n_classes, "hidden": list(self.hidden)}

    @classmethod
    def from_json(cls, d: dict) -> "ModelSpec":
        return cls(d["arch"], tuple(d["input_shape"]), d["n_classes"], tuple(d["hidden"]))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 30
    batch_size: int = 32
    seed: int = 0
    weight_decay: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.dtype not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


def param_layout(spec: ModelSpec) -> list[tuple[str, tuple[int, ...]]]:
    frames, mels = spec.input_shape
    c = spec.n_classes
    if spec.arch == "linear":
        return [("W0", (frames * mels, c)), ("b0", (c,))]
    if spec.arch == "mlp":
        widths = [frames * mels, *spec.hidden, c]
        layout = []
        for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
            layout += [(f"W{i}", (a, b)), (f"b{i}", (b,))]
        return layout
    c1, c2, dense = spec.hidden
    h, w = frames // 2 // 2, mels // 2 // 2
    if h < 1 or w < 1:
        raise ValueError(f"input {spec.input_shape} too small for two 2x2 pools")
    return [
        ("K1", (c1, 1, 3, 3)), ("k1", (c1,)),
        ("K2", (c2, c1, 3, 3)), ("k2", (c2,)),
        ("W0", (h * w * c2, dense)), ("b0", (dense,)),
        ("W1", (dense, c)), ("b1", (c,)),
    ]


def param_count(spec: ModelSpec) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_layout(spec))


def unpack(spec: ModelSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    out, offset = {}, 0
    for name, shape in param_layout(spec):
        size = int(np.prod(shape))
        out[name] = params[offset : offset + size].reshape(shape)
        offset += size
    if offset != params.shape[0]:
        raise ValueError(f"parameter vector has {params.shape[0]} entries, layout needs {offset}")
    return out


def _fans(shape: tuple[int, ...]) -> tuple[int, int]:
    if len(shape) == 4:
        out_c, in_c, kh, kw = shape
        return in_c * kh * kw, out_c * kh * kw
    return shape[0], shape[1]


def init_params(spec: ModelSpec, seed: int) -> np.ndarray:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng([seed, 0])
    chunks = []
    for _, shape in param_layout(spec):
        if len(shape) == 1:
            chunks.append(np.zeros(shape[0]))
        else:
            fan_in, fan_out = _fans(shape)
            a = np.sqrt(6.0 / (fan_in + fan_out))
            chunks.append(rng.uniform(-a, a, size=int(np.prod(shape))))
    return np.concatenate(chunks)


# ---------------------------------------------------------------------------
# layers (channels-last for the CNN: B x H x W x C)

def _conv_forward(x, K, b):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    cols = windows.reshape(B * H * W, C * 9)
    out = cols @ K.reshape(K.shape[0], C * 9).T + b
    return out.reshape(B, H, W, K.shape[0]), cols


def _conv_backward(dout, cols, K, x_shape, need_dx):
    B, H, W, C = x_shape
    O = K.shape[0]
    dm = dout.reshape(-1, O)
    dK = (dm.T @ cols).reshape(K.shape)
    db = dm.sum(axis=0)
    if not need_dx:
        return None, dK, db
    dcols = (dm @ K.reshape(O, C * 9)).reshape(B, H, W, C, 3, 3)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    for i in range(3):
        for j in range(3):
            dxp[:, i : i + H, j : j + W, :] += dcols[..., i, j]
    return dxp[:, 1:-1, 1:-1, :], dK, db


def _quads(x):
    h, w = x.shape[1] // 2, x.shape[2] // 2
    return [x[:, di : 2 * h : 2, dj : 2 * w : 2, :] for di in (0, 1) for dj in (0, 1)]


def _pool_forward(x):
    """2x2 max-pool; an odd trailing row/column is dropped."""
    a, b, c, d = _quads(x)
    return np.maximum(np.maximum(a, b), np.maximum(c, d))


def _pool_backward(dout, x, out):
    """Route each pooled gradient to the first maximal element of its window."""
    dx = np.zeros(x.shape, dtype=dout.dtype)
    taken = np.zeros(out.shape, dtype=bool)
    for quad, dquad in zip(_quads(x), _quads(dx)):
        hit = (quad == out) & ~taken
        dquad[...] = np.where(hit, dout, 0.0)
        taken |= hit
    return dx


def _forward(spec: ModelSpec, p: dict, x: np.ndarray):
    """Logits plus whatever the backward pass needs."""
    B = x.shape[0]
    if spec.arch == "linear":
        flat = x.reshape(B, -1)
        return flat @ p["W0"] + p["b0"], {"flat": flat}
    if spec.arch == "mlp":
        n_layers = len(spec.hidden) + 1
        acts = [x.reshape(B, -1)]
        h = acts[0]
        for i in range(n_layers):
            z = h @ p[f"W{i}"] + p[f"b{i}"]
            h = np.maximum(z, 0.0) if i < n_layers - 1 else z
            acts.append(h)
        return h, {"acts": acts}
    # relu(maxpool(z)) == maxpool(relu(z)); pooling first keeps the relu small
    x4 = x[..., None]
    z1, cols1 = _conv_forward(x4, p["K1"], p["k1"])
    m1 = _pool_forward(z1)
    q1 = np.maximum(m1, 0.0)
    z2, cols2 = _conv_forward(q1, p["K2"], p["k2"])
    m2 = _pool_forward(z2)
    q2 = np.maximum(m2, 0.0)
    flat = q2.reshape(B, -1)
    z3 = flat @ p["W0"] + p["b0"]
    a3 = np.maximum(z3, 0.0)
    logits = a3 @ p["W1"] + p["b1"]
    cache = dict(x4=x4, cols1=cols1, z1=z1, m1=m1, q1=q1, cols2=cols2,
                 z2=z2, m2=m2, q2=q2, flat=flat, z3=z3, a3=a3)
    return logits, cache


def _backward(spec: ModelSpec, p: dict, cache: dict, dlogits: np.ndarray) -> dict:
    g = {}
    if spec.arch == "linear":
        g["W0"] = cache["flat"].T @ dlogits
        g["b0"] = dlogits.sum(axis=0)
        return g
    if spec.arch == "mlp":
        acts = cache["acts"]
        n_layers = len(spec.hidden) + 1
        d = dlogits
        for i in reversed(range(n_layers)):
            g[f"W{i}"] = acts[i].T @ d
            g[f"b{i}"] = d.sum(axis=0)
            if i:
                d = (d @ p[f"W{i}"].T) * (acts[i] > 0)
        return g
    c = cache
    g["W1"] = c["a3"].T @ dlogits
    g["b1"] = dlogits.sum(axis=0)
    dz3 = (dlogits @ p["W1"].T) * (c["z3"] > 0)
    g["W0"] = c["flat"].T @ dz3
    g["b0"] = dz3.sum(axis=0)
    dm2 = (dz3 @ p["W0"].T).reshape(c["q2"].shape) * (c["m2"] > 0)
    dz2 = _pool_backward(dm2, c["z2"], c["m2"])
    dq1, g["K2"], g["k2"] = _conv_backward(dz2, c["cols2"], p["K2"], c["q1"].shape, True)
    dz1 = _pool_backward(dq1 * (c["m1"] > 0), c["z1"], c["m1"])
    _, g["K1"], g["k1"] = _conv_backward(dz1, c["cols1"], p["K1"], c["x4"].shape, False)
    return g


def _flatten_grad(spec: ModelSpec, g: dict) -> np.ndarray:
    return np.concatenate([g[name].reshape(-1) for name, _ in param_layout(spec)])


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _check_input(spec: ModelSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    if x.dtype not in (np.float32, np.float64):
        x = x.astype(np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.shape[1:] != spec.input_shape:
        raise ValueError(f"feature shape {x.shape[1:]} does not match model input {spec.input_shape}")
    return x


def logits_of(spec: ModelSpec, params: np.ndarray, x: np.ndarray) -> np.ndarray:
    x = _check_input(spec, x)
    return _forward(spec, unpack(spec, params), x)[0]


def cross_entropy(logits: np.ndarray, y: np.ndarray) -> float:
    z = logits - logits.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    return float(np.mean(lse - z[np.arange(len(y)), y]))


def loss_and_grad(spec: ModelSpec, params: np.ndarray, x: np.ndarray, y: np.ndarray
                  ) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its exact gradient w.r.t. ``params``."""
    loss, grad, _ = _loss_grad_logits(spec, params, x, y)
    return loss, grad


def _loss_grad_logits(spec, params, x, y):
    x = _check_input(spec, x)
    y = np.asarray(y, dtype=np.int64)
    if y.shape[0] != x.shape[0] or y.shape[0] == 0:
        raise ValueError("batch must be non-empty with one label per example")
    if y.min() < 0 or y.max() >= spec.n_classes:
        raise ValueError(f"labels must lie in [0, {spec.n_classes})")
    p = unpack(spec, params)
    logits, cache = _forward(spec, p, x)
    probs = softmax(logits)
    loss = cross_entropy(logits, y)
    dlogits = probs.copy()
    dlogits[np.arange(len(y)), y] -= 1.0
    dlogits /= len(y)
    return loss, _flatten_grad(spec, _backward(spec, p, cache, dlogits)), logits


def sgd_step(params: np.ndarray, grad: np.ndarray, velocity: np.ndarray, cfg: TrainConfig
             ) -> tuple[np.ndarray, np.ndarray]:
    if not params.shape == grad.shape == velocity.shape:
        raise ValueError("params, grad and velocity shapes differ")
    if cfg.weight_decay:
        grad = grad + cfg.weight_decay * params
    v = cfg.momentum * velocity - cfg.lr * grad
    return params + v, v


@dataclass
class TrainedModel:
    spec: ModelSpec
    params: np.ndarray
    label_map: tuple[str, ...]
    feature_mean: float = 0.0
    feature_std: float = 1.0
    train_log: list[tuple[float, float]] = field(default_factory=list)

    def __post_init__(self):
        if self.params.shape[0] != param_count(self.spec):
            raise ValueError("parameter count does not match the model spec")
        if len(self.label_map) != self.spec.n_classes:
            raise ValueError("label_map size differs from n_classes")

    def normalize(self, features: np.ndarray) -> np.ndarray:
        return (np.asarray(features, dtype=np.float64) - self.feature_mean) / self.feature_std

    def forward(self, features: np.ndarray) -> np.ndarray:
        """Class probabilities for one (frames, bins) input or a batch of them."""
        return softmax(logits_of(self.spec, self.params, self.normalize(features)))

    def predict_indices(self, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
        features = _check_input(self.spec, features)
        out = []
        for start in range(0, features.shape[0], batch_size):
            probs = self.forward(features[start : start + batch_size])
            out.append(np.argmax(probs, axis=-1))  # argmax keeps the lowest index on ties
        return np.concatenate(out)

    def predict(self, features: np.ndarray) -> list[str]:
        return [self.label_map[i] for i in self.predict_indices(features)]

    def save(self, path: str | Path, **extra) -> None:
        header = {
            "spec": self.spec.to_json(),
            "label_map": list(self.label_map),
            "param_count": int(self.params.shape[0]),
            "feature_mean": self.feature_mean,
            "feature_std": self.feature_std,
            "train_log": [list(x) for x in self.train_log],
            **extra,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, separators=(",", ":")).encode() + b"\n")
            fh.write(self.params.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "TrainedModel":
        data = Path(path).read_bytes()
        newline = data.index(b"\n")
        header = json.loads(data[:newline])
        params = np.frombuffer(data[newline + 1 :], dtype="<f8").astype(np.float64)
        if params.shape[0] != header["param_count"]:
            raise ValueError(f"{path}: expected {header['param_count']} parameters, found {params.shape[0]}")
        return cls(ModelSpec.from_json(header["spec"]), params, tuple(header["label_map"]),
                   header["feature_mean"], header["feature_std"],
                   [tuple(x) for x in header.get("train_log", [])])


def predict(model: TrainedModel, features: np.ndarray) -> list[str]:
    return model.predict(features)


def fit(spec: ModelSpec, x: np.ndarray, y: np.ndarray, label_map: Sequence[str],
        cfg: TrainConfig = TrainConfig()) -> TrainedModel:
    """Seeded-shuffle mini-batch SGD on pre-computed features ``x`` with label indices ``y``."""
    x = _check_input(spec, x)
    y = np.asarray(y, dtype=np.int64)
    if x.shape[0] == 0:
        raise TrainingError("empty training set")
    if not np.all(np.isfinite(x)):
        raise TrainingError("non-finite values in the training features")
    mean = float(x.mean(dtype=np.float64))
    std = float(x.std(dtype=np.float64)) or 1.0
    xn = ((x - mean) / std).astype(cfg.dtype)
    params = init_params(spec, cfg.seed).astype(cfg.dtype)
    velocity = np.zeros_like(params)
    rng = np.random.default_rng([cfg.seed, 1])
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(x.shape[0])
        total_loss = 0.0
        correct = 0
        for b, start in enumerate(range(0, x.shape[0], cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grad, logits = _loss_grad_logits(spec, params, xn[idx], y[idx])
            if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError(f"non-finite loss at epoch {epoch}, batch {b}")
            params, velocity = sgd_step(params, grad, velocity, cfg)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(logits, axis=-1) == y[idx]))
        history.append((total_loss / x.shape[0], correct / x.shape[0]))
        log.debug("epoch %d loss %.4f acc %.4f", epoch, *history[-1])
    return TrainedModel(spec, params.astype(np.float64), tuple(label_map), mean, std, history)
