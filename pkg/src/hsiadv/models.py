"""Small CNN classifiers with named intermediate feature taps.

Two architectures with different inductive biases:

* ``cnn-a``: conv(16,3x3)-relu-conv(32,3x3)-relu-maxpool-conv(64,3x3)-relu-maxpool-linear
* ``cnn-b``: conv(24,5x5)-relu-avgpool-conv(48,3x3)-relu-avgpool-linear

Each exposes four feature taps (outputs of relu/pool layers, shallow to deep);
``forward_with_tap`` returns logits plus the tapped activation reshaped to
(batch, channels, positions), both connected to the gradient graph.

Model file format HSM1 (little-endian): magic ``HSM1``; u16 version; u8 arch
id length + bytes; u32 bands, patch size, class count; class ids as u16 each;
u64 training seed; f64 clean accuracy (nan when unknown); u32 parameter count;
per parameter: u8 name length + bytes, u8 ndim, u32 dims, float32 data.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import autodiff as ad
from .errors import FormatError, TrainingError
from .seeding import TRAIN, derive_rng
from .validation import check_labels, check_patch_batch

ARCHITECTURES = ("cnn-a", "cnn-b")

_MODEL_MAGIC = b"HSM1"
_MODEL_VERSION = 1


@dataclass(frozen=True)
class ModelSpec:
    """Architecture id plus concrete input/output sizes."""

    architecture: str
    bands: int
    patch_size: int
    classes: int

    def __post_init__(self):
        if self.architecture not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.architecture!r}")
        if self.classes < 2:
            raise ValueError(f"need at least 2 classes, got {self.classes}")
        h = self.patch_size
        if h % 4 or h < 4:
            raise ValueError(f"patch size must be a multiple of 4, got {h}")

    def layers(self) -> tuple[tuple, ...]:
        if self.architecture == "cnn-a":
            return (
                ("conv", 16, 3, 1), ("relu",),
                ("conv", 32, 3, 1), ("relu",), ("maxpool", 2),
                ("conv", 64, 3, 1), ("relu",), ("maxpool", 2),
                ("flatten",), ("linear",),
            )
        return (
            ("conv", 24, 5, 2), ("relu",), ("avgpool", 2),
            ("conv", 48, 3, 1), ("relu",), ("avgpool", 2),
            ("flatten",), ("linear",),
        )

    def tap_table(self) -> dict[int, int]:
        """Tap index 1..4 -> layer position (output of that layer is the feature)."""
        if self.architecture == "cnn-a":
            return {1: 1, 2: 3, 3: 6, 4: 7}
        return {1: 1, 2: 2, 3: 4, 4: 5}

    def activation_shapes(self) -> list[tuple[int, int, int]]:
        """(channels, height, width) after each layer (flatten/linear excluded)."""
        c, h, w = self.bands, self.patch_size, self.patch_size
        shapes = []
        for layer in self.layers():
            kind = layer[0]
            if kind == "conv":
                _, out_ch, k, pad = layer
                c, h, w = out_ch, h + 2 * pad - k + 1, w + 2 * pad - k + 1
            elif kind in ("maxpool", "avgpool"):
                h, w = h // layer[1], w // layer[1]
            elif kind in ("flatten", "linear"):
                shapes.append(None)
                continue
            shapes.append((c, h, w))
        return shapes

    def feature_shape(self, tap: int) -> tuple[int, int]:
        """(C_l, D_l) of the tapped activation."""
        pos = self._tap_position(tap)
        c, h, w = self.activation_shapes()[pos]
        return c, h * w

    def _tap_position(self, tap: int) -> int:
        table = self.tap_table()
        if tap not in table:
            raise ValueError(f"tap must be one of {sorted(table)}, got {tap}")
        return table[tap]

    def parameter_shapes(self) -> dict[str, tuple[int, ...]]:
        shapes: dict[str, tuple[int, ...]] = {}
        c, h, w = self.bands, self.patch_size, self.patch_size
        idx = 0
        for layer in self.layers():
            kind = layer[0]
            if kind == "conv":
                _, out_ch, k, pad = layer
                shapes[f"conv{idx}_w"] = (out_ch, c, k, k)
                shapes[f"conv{idx}_b"] = (out_ch,)
                c, h, w = out_ch, h + 2 * pad - k + 1, w + 2 * pad - k + 1
                idx += 1
            elif kind in ("maxpool", "avgpool"):
                h, w = h // layer[1], w // layer[1]
            elif kind == "linear":
                shapes["linear_w"] = (c * h * w, self.classes)
                shapes["linear_b"] = (self.classes,)
        return shapes


def _init_parameters(spec: ModelSpec, rng: np.random.Generator) -> dict[str, np.ndarray]:
    params: dict[str, np.ndarray] = {}
    for name, shape in spec.parameter_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float32)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            std = np.sqrt(2.0 / fan_in)
            params[name] = (rng.standard_normal(shape) * std).astype(np.float32)
    return params


def _forward(
    params: dict[str, ad.Tensor],
    x: ad.Tensor,
    spec: ModelSpec,
    tap_position: int | None = None,
):
    """Run the network; return (logits, tapped activation or None)."""
    h = ad.sub(x, 0.5)  # fixed centering of [0,1] inputs; not a tappable layer
    feature = None
    idx = 0
    for pos, layer in enumerate(spec.layers()):
        kind = layer[0]
        if kind == "conv":
            h = ad.conv2d(h, params[f"conv{idx}_w"], params[f"conv{idx}_b"], pad=layer[3])
            idx += 1
        elif kind == "relu":
            h = ad.relu(h)
        elif kind == "maxpool":
            h = ad.maxpool2d(h, layer[1])
        elif kind == "avgpool":
            h = ad.avgpool2d(h, layer[1])
        elif kind == "flatten":
            h = ad.flatten(h)
        elif kind == "linear":
            h = ad.linear(h, params["linear_w"], params["linear_b"])
        if tap_position is not None and pos == tap_position:
            b, c = h.shape[0], h.shape[1]
            feature = ad.reshape(h, (b, c, -1))
    return h, feature


class CNNClassifier(BaseEstimator, ClassifierMixin):
    """Patch classifier trained with SGD + momentum on softmax cross-entropy.

    Estimator API: ``fit(X, y)`` on (n, bands, h, h) arrays, ``predict``,
    ``score``; ``forward_with_tap`` exposes the gradient-graph forward pass
    used by the attacks.  Deterministic under ``seed``.
    """

    def __init__(
        self,
        architecture: str = "cnn-a",
        epochs: int = 20,
        lr: float = 0.02,
        momentum: float = 0.9,
        batch_size: int = 32,
        seed: int = 0,
    ):
        self.architecture = architecture
        self.epochs = epochs
        self.lr = lr
        self.momentum = momentum
        self.batch_size = batch_size
        self.seed = seed

    # -- lifecycle -----------------------------------------------------------
    def initialize(self, bands: int, patch_size: int, classes) -> "CNNClassifier":
        """Materialize randomly initialized parameters (the epoch-0 state)."""
        classes = np.asarray(classes, dtype=np.int64)
        self.spec_ = ModelSpec(self.architecture, bands, patch_size, classes.size)
        self.classes_ = classes
        self.params_ = _init_parameters(self.spec_, derive_rng(self.seed, TRAIN))
        self.clean_accuracy_ = None
        return self

    def fit(self, X, y, eval_set=None):
        X = check_patch_batch(X).astype(np.float32, copy=False)
        y = check_labels(y)
        if X.shape[0] != y.shape[0]:
            raise ValueError("X and y misaligned")
        if X.shape[0] == 0:
            raise ValueError("training set is empty")
        classes = np.unique(y)
        self.initialize(X.shape[1], X.shape[2], classes)
        targets = np.searchsorted(classes, y)

        rng = derive_rng(self.seed, TRAIN, 1)
        velocity = {k: np.zeros_like(v) for k, v in self.params_.items()}
        n = X.shape[0]
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                idx = order[start:start + self.batch_size]
                loss, grads = self._loss_and_grads(X[idx], targets[idx])
                if not np.isfinite(loss):
                    raise TrainingError(f"training diverged: loss={loss}")
                for k, g in grads.items():
                    velocity[k] = self.momentum * velocity[k] - self.lr * g
                    self.params_[k] += velocity[k]
        if eval_set is not None:
            self.clean_accuracy_ = float(self.score(*eval_set))
        return self

    def _loss_and_grads(self, xb: np.ndarray, tb: np.ndarray):
        params = {k: ad.Tensor(v, requires_grad=True) for k, v in self.params_.items()}
        logits, _ = _forward(params, ad.Tensor(xb), self.spec_)
        loss = ad.softmax_cross_entropy(logits, tb)
        loss.backward()
        return float(loss.data), {k: t.grad for k, t in params.items()}

    # -- inference -------------------------------------------------------------
    def _check_fitted(self):
        if not hasattr(self, "params_"):
            raise RuntimeError("classifier is not fitted; call fit() or initialize()")

    def _check_input(self, X) -> np.ndarray:
        X = check_patch_batch(X)
        if X.shape[1] != self.spec_.bands or X.shape[2] != self.spec_.patch_size:
            raise ValueError(
                f"input {X.shape[1:]} does not match model input "
                f"({self.spec_.bands}, {self.spec_.patch_size}, {self.spec_.patch_size})"
            )
        return X.astype(np.float32, copy=False)

    def predict_logits(self, X, chunk: int = 64) -> np.ndarray:
        self._check_fitted()
        X = self._check_input(X)
        params = self._param_tensors()
        out = np.empty((X.shape[0], self.spec_.classes), dtype=np.float32)
        for start in range(0, X.shape[0], chunk):
            logits, _ = _forward(params, ad.Tensor(X[start:start + chunk]), self.spec_)
            out[start:start + logits.shape[0]] = logits.data
        return out

    def predict(self, X) -> np.ndarray:
        logits = self.predict_logits(X)
        return self.classes_[logits.argmax(axis=1)]

    def forward_with_tap(self, x: ad.Tensor, tap: int = 3, dtype=None):
        """Graph forward pass: (logits, feature (B, C_l, D_l)) for a batch Tensor."""
        self._check_fitted()
        pos = self.spec_._tap_position(tap)
        params = self._param_tensors(dtype=dtype or x.dtype)
        logits, feature = _forward(params, x, self.spec_, tap_position=pos)
        return logits, feature

    def _param_tensors(self, dtype=np.float32) -> dict[str, ad.Tensor]:
        return {
            k: ad.Tensor(v if v.dtype == dtype else v.astype(dtype))
            for k, v in self.params_.items()
        }

    def astype(self, dtype) -> "CNNClassifier":
        """Copy of this model with parameters cast (float64 for gradient checks)."""
        self._check_fitted()
        out = CNNClassifier(**self.get_params())
        out.spec_ = self.spec_
        out.classes_ = self.classes_
        out.params_ = {k: v.astype(dtype) for k, v in self.params_.items()}
        out.clean_accuracy_ = self.clean_accuracy_
        return out

    def load_parameters(self, path) -> "CNNClassifier":
        """Adopt parameters from an HSM1 file; the architecture must match."""
        loaded = load_model(path)
        if loaded.spec_.architecture != self.architecture:
            raise FormatError(
                f"{path}: architecture {loaded.spec_.architecture!r} does not match "
                f"{self.architecture!r}"
            )
        self.spec_ = loaded.spec_
        self.classes_ = loaded.classes_
        self.params_ = loaded.params_
        self.clean_accuracy_ = loaded.clean_accuracy_
        return self


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_model(model: CNNClassifier, path) -> None:
    model._check_fitted()
    spec = model.spec_
    acc = model.clean_accuracy_ if model.clean_accuracy_ is not None else float("nan")
    arch = spec.architecture.encode()
    parts = [
        _MODEL_MAGIC,
        struct.pack("<H", _MODEL_VERSION),
        struct.pack("<B", len(arch)), arch,
        struct.pack("<III", spec.bands, spec.patch_size, spec.classes),
        np.asarray(model.classes_, dtype="<u2").tobytes(),
        struct.pack("<Q", model.seed if model.seed >= 0 else 0),
        struct.pack("<d", acc),
        struct.pack("<I", len(model.params_)),
    ]
    for name, value in model.params_.items():
        if not np.all(np.isfinite(value)):
            raise ValueError(f"parameter {name} contains non-finite values")
        nm = name.encode()
        parts.append(struct.pack("<B", len(nm)))
        parts.append(nm)
        parts.append(struct.pack("<B", value.ndim))
        parts.append(struct.pack(f"<{value.ndim}I", *value.shape))
        parts.append(np.ascontiguousarray(value, dtype="<f4").tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


class _Reader:
    def __init__(self, raw: bytes, path):
        self.raw = raw
        self.off = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.off + n > len(self.raw):
            raise FormatError(f"{self.path}: truncated model file")
        out = self.raw[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt: str):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))


def load_model(path) -> CNNClassifier:
    with open(path, "rb") as fh:
        rd = _Reader(fh.read(), path)
    if rd.take(4) != _MODEL_MAGIC:
        raise FormatError(f"{path}: bad magic")
    (version,) = rd.unpack("<H")
    if version != _MODEL_VERSION:
        raise FormatError(f"{path}: unsupported model version {version}")
    (arch_len,) = rd.unpack("<B")
    arch = rd.take(arch_len).decode()
    bands, patch, k = rd.unpack("<III")
    classes = np.frombuffer(rd.take(2 * k), dtype="<u2").astype(np.int64)
    (seed,) = rd.unpack("<Q")
    (acc,) = rd.unpack("<d")
    (n_params,) = rd.unpack("<I")

    model = CNNClassifier(architecture=arch, seed=int(seed))
    model.spec_ = ModelSpec(arch, bands, patch, k)
    model.classes_ = classes
    params: dict[str, np.ndarray] = {}
    for _ in range(n_params):
        (nm_len,) = rd.unpack("<B")
        name = rd.take(nm_len).decode()
        (ndim,) = rd.unpack("<B")
        shape = rd.unpack(f"<{ndim}I")
        data = np.frombuffer(rd.take(4 * int(np.prod(shape))), dtype="<f4").reshape(shape)
        params[name] = np.array(data)
    if rd.off != len(rd.raw):
        raise FormatError(f"{path}: trailing bytes after parameters")
    if {n: p.shape for n, p in params.items()} != model.spec_.parameter_shapes():
        raise FormatError(f"{path}: parameters do not match architecture {arch}")
    model.params_ = params
    model.clean_accuracy_ = None if np.isnan(acc) else float(acc)
    return model
