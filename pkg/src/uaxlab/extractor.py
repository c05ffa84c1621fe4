"""Small embedding networks trained as identity classifiers.

Two architectures with different inductive biases share one interface:
``tiny_cnn`` (three strided conv blocks, global average pool, dense head)
and ``mlp`` (flatten, one hidden layer, dense head). The penultimate dense
layer's output is the face feature; the classification layer on top exists
only for training.

Model files use the "UAXM" container: magic, u32 version, a JSON header
describing spec/train_meta/weight layout, then raw little-endian float64
weight data in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .dataset import IdentityDataset

__all__ = [
    "ExtractorSpec",
    "TrainConfig",
    "TrainMeta",
    "ExtractorModel",
    "ModelFormatError",
    "init_model",
    "train_classifier",
    "save_model",
    "load_model",
]

ARCH_IDS = ("tiny_cnn", "mlp")
MAGIC = b"UAXM"
FORMAT_VERSION = 1


class ModelFormatError(ValueError):
    """Model file is malformed, truncated, or from an unknown version."""


@dataclass(frozen=True)
class ExtractorSpec:
    """Architecture hyperparameters; fully determines the weight layout."""

    arch_id: str
    input_shape: tuple
    class_count: int
    embedding_dim: int = 64
    conv_channels: tuple = (8, 16, 32)
    mlp_hidden: int = 256

    def validate(self) -> None:
        if self.arch_id not in ARCH_IDS:
            raise ValueError(f"arch_id must be one of {ARCH_IDS}, got {self.arch_id!r}")
        shape = tuple(self.input_shape)
        if len(shape) != 3:
            raise ValueError(f"input_shape must be (H, W, C), got {shape}")
        h, w, c = shape
        if h < 8 or w < 8:
            raise ValueError(f"input_shape spatial dims must be >= 8, got {h}x{w}")
        if c not in (1, 3):
            raise ValueError(f"input_shape channels must be 1 or 3, got {c}")
        if self.embedding_dim < 2:
            raise ValueError(f"embedding_dim must be >= 2, got {self.embedding_dim}")
        if self.class_count < 2:
            raise ValueError(f"class_count must be >= 2, got {self.class_count}")
        if self.arch_id == "tiny_cnn" and len(self.conv_channels) != 3:
            raise ValueError("tiny_cnn needs exactly 3 conv channel counts")
        if self.arch_id == "mlp" and self.mlp_hidden < 1:
            raise ValueError("mlp_hidden must be positive")


@dataclass
class TrainConfig:
    """Mini-batch SGD settings for classifier training."""

    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    momentum: float = 0.9
    warmup_epochs: int = 0
    rng_seed: int = 0

    def validate(self) -> None:
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.warmup_epochs < 0:
            raise ValueError("warmup_epochs must be >= 0")


@dataclass
class TrainMeta:
    """Provenance of a training run."""

    dataset_fingerprint: str = ""
    epochs: int = 0
    final_train_accuracy: float = 0.0
    rng_seed: int = 0
    epoch_losses: list = field(default_factory=list)


class ExtractorModel:
    """Weights plus spec; ``embed`` maps an image to its feature vector."""

    def __init__(self, spec: ExtractorSpec, weights: dict, train_meta: TrainMeta | None = None):
        spec.validate()
        self.spec = spec
        self.weights = weights
        self.train_meta = train_meta or TrainMeta()
        for name, t in weights.items():
            if not np.all(np.isfinite(t.data)):
                raise nm.NonFiniteError(f"weight {name!r} contains non-finite values")
        # detached twins let attack-side graphs run without recording
        # weight gradients; refreshed whenever training updates weights
        self._frozen = None

    def _frozen_weights(self) -> dict:
        if self._frozen is None:
            self._frozen = {
                name: nm.Tensor._wrap(t.data, False) for name, t in self.weights.items()
            }
        return self._frozen

    def _invalidate_frozen(self) -> None:
        self._frozen = None

    def _check_input(self, data: np.ndarray) -> None:
        if tuple(data.shape) != tuple(self.spec.input_shape):
            raise nm.ShapeError(
                f"input shape {tuple(data.shape)} != model input_shape {tuple(self.spec.input_shape)}"
            )

    def _forward_embedding(self, x: nm.Tensor, weights: dict) -> nm.Tensor:
        spec = self.spec
        # center pixels so conv/dense responses are not dominated by the
        # image's DC level
        h = nm.sub(x, nm.Tensor(np.full(spec.input_shape, 0.5)))
        if spec.arch_id == "tiny_cnn":
            for i in range(3):
                h = nm.conv2d(h, weights[f"conv{i}_k"], weights[f"conv{i}_b"], stride=2, pad=1)
                h = nm.relu(h)
            h = nm.mean(h, axis=(0, 1))  # global average pool over space
            return nm.dense(h, weights["emb_w"], weights["emb_b"])
        # mlp
        h = nm.dense(h, weights["fc0_w"], weights["fc0_b"])
        h = nm.relu(h)
        return nm.dense(h, weights["emb_w"], weights["emb_b"])

    def _forward_logits(self, x: nm.Tensor) -> nm.Tensor:
        emb = self._forward_embedding(x, self.weights)
        return nm.dense(emb, self.weights["head_w"], self.weights["head_b"])

    def embed(self, image: np.ndarray) -> np.ndarray:
        """Feature vector of one image, as a plain array (no graph)."""
        data = np.asarray(image, dtype=np.float64)
        self._check_input(data)
        x = nm.Tensor(data)
        return self._forward_embedding(x, self._frozen_weights()).data

    def embed_t(self, x: nm.Tensor) -> nm.Tensor:
        """Graph-aware embedding of an input Tensor.

        Weight tensors are detached copies, so only gradients w.r.t. ``x``
        flow; use this inside an active ComputeGraph when crafting.
        """
        self._check_input(x.data)
        return self._forward_embedding(x, self._frozen_weights())

    def logits(self, image: np.ndarray) -> np.ndarray:
        data = np.asarray(image, dtype=np.float64)
        self._check_input(data)
        return self._forward_logits(nm.Tensor(data)).data


def _uniform_init(rng: np.random.Generator, shape: tuple, fan_in: int) -> np.ndarray:
    # uniform with variance 2/fan_in, which keeps relu activations from
    # shrinking layer over layer
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(spec: ExtractorSpec, seed: int) -> ExtractorModel:
    """Fresh model with U(-sqrt(6/fan_in), +sqrt(6/fan_in)) weights, zero biases."""
    spec.validate()
    rng = np.random.Generator(np.random.PCG64(seed))
    h, w, c = spec.input_shape
    weights: dict[str, nm.Tensor] = {}

    def put(name: str, arr: np.ndarray) -> None:
        weights[name] = nm.Tensor(arr, requires_grad=True)

    if spec.arch_id == "tiny_cnn":
        cin = c
        for i, cout in enumerate(spec.conv_channels):
            fan = 3 * 3 * cin
            put(f"conv{i}_k", _uniform_init(rng, (3, 3, cin, cout), fan))
            put(f"conv{i}_b", np.zeros(cout))
            cin = cout
        put("emb_w", _uniform_init(rng, (cin, spec.embedding_dim), cin))
        put("emb_b", np.zeros(spec.embedding_dim))
    else:
        n_in = h * w * c
        put("fc0_w", _uniform_init(rng, (n_in, spec.mlp_hidden), n_in))
        put("fc0_b", np.zeros(spec.mlp_hidden))
        put("emb_w", _uniform_init(rng, (spec.mlp_hidden, spec.embedding_dim), spec.mlp_hidden))
        put("emb_b", np.zeros(spec.embedding_dim))
    put("head_w", _uniform_init(rng, (spec.embedding_dim, spec.class_count), spec.embedding_dim))
    put("head_b", np.zeros(spec.class_count))
    return ExtractorModel(spec, weights, TrainMeta(rng_seed=seed))


def dataset_fingerprint(data: IdentityDataset) -> str:
    """Stable sha256 over labels and pixel bytes, for train provenance."""
    digest = hashlib.sha256()
    for label in data.labels:
        digest.update(label.encode())
        for img in data.entries[label]:
            digest.update(img.tobytes())
    return digest.hexdigest()[:16]


def train_classifier(
    model: ExtractorModel, data: IdentityDataset, cfg: TrainConfig
) -> ExtractorModel:
    """Mini-batch SGD on softmax cross-entropy over identity labels.

    Mutates the given model's weights in place and returns it with
    train_meta filled in. Gradients are averaged over each mini-batch;
    weight decay is plain L2 shrinkage applied with the step.
    """
    cfg.validate()
    x_all, y_all, names = data.as_arrays()
    if len(names) != model.spec.class_count:
        raise ValueError(
            f"dataset has {len(names)} identities but model expects {model.spec.class_count} classes"
        )
    if tuple(x_all.shape[1:]) != tuple(model.spec.input_shape):
        raise nm.ShapeError(
            f"dataset images {tuple(x_all.shape[1:])} != model input_shape {tuple(model.spec.input_shape)}"
        )

    rng = np.random.Generator(np.random.PCG64(cfg.rng_seed))
    n = x_all.shape[0]
    name_of = {id(t): name for name, t in model.weights.items()}
    velocity = {name: np.zeros_like(t.data) for name, t in model.weights.items()}
    epoch_losses = []
    for epoch in range(cfg.epochs):
        # linear warmup holds early momentum-amplified steps small enough
        # that no relu layer dies wholesale before features form
        lr = cfg.learning_rate
        if cfg.warmup_epochs > 0 and epoch < cfg.warmup_epochs:
            lr *= (epoch + 1) / (cfg.warmup_epochs + 1)
        order = rng.permutation(n)
        total_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            grads = {name: np.zeros_like(t.data) for name, t in model.weights.items()}
            for i in idx:
                with nm.ComputeGraph() as graph:
                    loss = nm.softmax_xent(model._forward_logits(nm.Tensor(x_all[i])), int(y_all[i]))
                total_loss += loss.item()
                for t, g in nm.backpropagate(graph, loss).items():
                    grads[name_of[id(t)]] += g
            for name, t in model.weights.items():
                g_mean = grads[name] / len(idx)
                if cfg.weight_decay > 0:
                    g_mean = g_mean + cfg.weight_decay * t.data
                velocity[name] = cfg.momentum * velocity[name] + g_mean
                t.data = t.data - lr * velocity[name]
        epoch_losses.append(total_loss / n)
    model._invalidate_frozen()

    correct = sum(
        1 for i in range(n) if int(np.argmax(model.logits(x_all[i]))) == int(y_all[i])
    )
    model.train_meta = TrainMeta(
        dataset_fingerprint=dataset_fingerprint(data),
        epochs=cfg.epochs,
        final_train_accuracy=correct / n,
        rng_seed=cfg.rng_seed,
        epoch_losses=epoch_losses,
    )
    return model


# ---------------------------------------------------------------------------
# serialization: UAXM v1
# ---------------------------------------------------------------------------

def save_model(model: ExtractorModel, path) -> None:
    """Write magic, version, JSON header, then raw '<f8' weight blocks."""
    header = {
        "spec": {
            "arch_id": model.spec.arch_id,
            "input_shape": list(model.spec.input_shape),
            "class_count": model.spec.class_count,
            "embedding_dim": model.spec.embedding_dim,
            "conv_channels": list(model.spec.conv_channels),
            "mlp_hidden": model.spec.mlp_hidden,
        },
        "train_meta": {
            "dataset_fingerprint": model.train_meta.dataset_fingerprint,
            "epochs": model.train_meta.epochs,
            "final_train_accuracy": model.train_meta.final_train_accuracy,
            "rng_seed": model.train_meta.rng_seed,
            "epoch_losses": model.train_meta.epoch_losses,
        },
        "weights": [
            {"name": name, "shape": list(t.data.shape)} for name, t in sorted(model.weights.items())
        ],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", FORMAT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name, t in sorted(model.weights.items()):
            fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())


def load_model(path) -> ExtractorModel:
    """Read a UAXM v1 file back into a model; verifies layout and length."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise ModelFormatError(f"model file truncated at {len(blob)} bytes: {path}")
    if blob[:4] != MAGIC:
        raise ModelFormatError(f"bad magic {blob[:4]!r}; not a model file: {path}")
    (version,) = struct.unpack("<I", blob[4:8])
    if version != FORMAT_VERSION:
        raise ModelFormatError(f"unsupported format version {version} (expected {FORMAT_VERSION})")
    (hlen,) = struct.unpack("<I", blob[8:12])
    if len(blob) < 12 + hlen:
        raise ModelFormatError(f"model file truncated inside header: {path}")
    try:
        header = json.loads(blob[12 : 12 + hlen])
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"corrupt model header: {exc}") from None

    try:
        s = header["spec"]
        spec = ExtractorSpec(
            arch_id=s["arch_id"],
            input_shape=tuple(s["input_shape"]),
            class_count=s["class_count"],
            embedding_dim=s["embedding_dim"],
            conv_channels=tuple(s["conv_channels"]),
            mlp_hidden=s["mlp_hidden"],
        )
        tm = header["train_meta"]
        meta = TrainMeta(
            dataset_fingerprint=tm["dataset_fingerprint"],
            epochs=tm["epochs"],
            final_train_accuracy=tm["final_train_accuracy"],
            rng_seed=tm["rng_seed"],
            epoch_losses=list(tm["epoch_losses"]),
        )
        layout = [(w["name"], tuple(w["shape"])) for w in header["weights"]]
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"model header missing field: {exc}") from None

    pos = 12 + hlen
    weights = {}
    for name, shape in layout:
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        chunk = blob[pos : pos + nbytes]
        if len(chunk) != nbytes:
            raise ModelFormatError(f"model file truncated in weight {name!r}: {path}")
        arr = np.frombuffer(chunk, dtype="<f8").astype(np.float64).reshape(shape)
        weights[name] = nm.Tensor(arr, requires_grad=True)
        pos += nbytes
    if pos != len(blob):
        raise ModelFormatError(f"{len(blob) - pos} trailing bytes after weights: {path}")
    return ExtractorModel(spec, weights, meta)
