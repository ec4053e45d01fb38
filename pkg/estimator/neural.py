"""
Dense Network Stack

A small numpy implementation of fully connected networks with explicit
forward caches and reverse-mode gradients, softmax cross-entropy, Adam,
the seven sub-networks of the dual autoencoder and their checkpoint format.

All batches are row-major: inputs have shape (batch, features).
"""

import hashlib
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import CheckpointFormatError, ConfigurationError, LabelRangeError, MissingFileError, ShapeMismatchError

ACTIVATIONS = ("relu", "tanh", "identity")
NETWORK_NAMES = ("ec_r", "dc_r", "r_ec_v", "v_ec_v", "dc_v", "cl", "cl_adv")

CHECKPOINT_MAGIC = b"SUSPCKV1"
CHECKPOINT_VERSION = 1

PathLike = Union[str, Path]
Params = List[Tuple[np.ndarray, np.ndarray]]


@dataclass(frozen=True)
class LayerSpec:
    input_dim: int
    output_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1:
            raise ConfigurationError(f"layer dims must be >= 1, got {self.input_dim}x{self.output_dim}")
        if self.activation not in ACTIVATIONS:
            raise ConfigurationError(f"unknown activation {self.activation!r}")


def _activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    return z


def _activation_grad(kind: str, z: np.ndarray, a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    if kind == "relu":
        return grad * (z > 0)
    if kind == "tanh":
        return grad * (1.0 - a * a)
    return grad


class DenseNet:
    """Stack of affine layers, each followed by its activation"""

    def __init__(self, name: str, specs: Sequence[LayerSpec], params: Params):
        if len(specs) != len(params):
            raise ConfigurationError(f"{name}: {len(specs)} layer specs but {len(params)} parameter pairs")
        for spec, (w, b) in zip(specs, params):
            if w.shape != (spec.input_dim, spec.output_dim) or b.shape != (spec.output_dim,):
                raise ShapeMismatchError(f"{name}: parameter shapes {w.shape}, {b.shape} do not match {spec}")
        self.name = name
        self.specs = tuple(specs)
        self.params = params

    @classmethod
    def initialise(cls, name: str, specs: Sequence[LayerSpec], rng: np.random.Generator,
                   dtype=np.float32) -> "DenseNet":
        params = []
        for spec in specs:
            if spec.activation == "relu":
                scale = np.sqrt(2.0 / spec.input_dim)
            else:
                scale = np.sqrt(2.0 / (spec.input_dim + spec.output_dim))
            w = (rng.standard_normal((spec.input_dim, spec.output_dim)) * scale).astype(dtype)
            params.append((w, np.zeros(spec.output_dim, dtype=dtype)))
        return cls(name, specs, params)

    @property
    def input_dim(self) -> int:
        return self.specs[0].input_dim

    @property
    def output_dim(self) -> int:
        return self.specs[-1].output_dim

    @property
    def dtype(self):
        return self.params[0][0].dtype

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in self.params)

    def forward(self, x: np.ndarray) -> Tuple[np.ndarray, List[Tuple[np.ndarray, np.ndarray, np.ndarray]]]:
        """
        Args:
            x: (batch, input_dim) or (input_dim,)

        Returns:
            (output, cache) where cache keeps (input, pre-activation, activation) per layer
        """
        x = np.asarray(x)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ShapeMismatchError(f"{self.name}: expected input width {self.input_dim}, got shape {x.shape}")
        cache = []
        a = x
        for spec, (w, b) in zip(self.specs, self.params):
            z = a @ w + b
            out = _activate(spec.activation, z)
            cache.append((a, z, out))
            a = out
        return (a[0] if single else a), cache

    def backward(self, cache, grad_out: np.ndarray) -> Tuple[Params, np.ndarray]:
        """Parameter gradients (dW, db) per layer and the gradient w.r.t. the input"""
        grad = np.asarray(grad_out)
        single = grad.ndim == 1
        if single:
            grad = grad[None, :]
        grads: Params = []
        for spec, (w, _), (a_in, z, a_out) in zip(reversed(self.specs), reversed(self.params), reversed(cache)):
            dz = _activation_grad(spec.activation, z, a_out, grad)
            grads.append((a_in.T @ dz, dz.sum(axis=0)))
            grad = dz @ w.T
        grads.reverse()
        return grads, (grad[0] if single else grad)

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def copy(self) -> "DenseNet":
        return DenseNet(self.name, self.specs, [(w.copy(), b.copy()) for w, b in self.params])

    def checksum(self) -> str:
        digest = hashlib.sha256()
        for w, b in self.params:
            digest.update(np.ascontiguousarray(w).tobytes())
            digest.update(np.ascontiguousarray(b).tobytes())
        return digest.hexdigest()


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits: np.ndarray, labels: Iterable[int]) -> Tuple[float, np.ndarray]:
    """
    Mean softmax cross-entropy over the batch.

    Args:
        logits: (batch, n_classes)
        labels: 0-based class indices

    Returns:
        (loss, gradient w.r.t. logits)
    """
    logits = np.atleast_2d(logits)
    labels = np.asarray(labels, dtype=np.int64)
    n_classes = logits.shape[1]
    if labels.shape != (logits.shape[0],):
        raise ShapeMismatchError(f"{labels.shape[0]} labels for {logits.shape[0]} rows of logits")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise LabelRangeError(f"labels must lie in [0, {n_classes}), got {labels.min()}..{labels.max()}")
    batch = logits.shape[0]
    rows = np.arange(batch)
    loss = float(-log_softmax(logits)[rows, labels].mean())
    grad = softmax(logits)
    grad[rows, labels] -= 1.0
    return loss, grad / batch


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    if len(labels) == 0:
        return float("nan")
    return float(np.mean(np.argmax(logits, axis=-1) == np.asarray(labels)))


@dataclass
class AdamState:
    m: Params
    v: Params
    step: int = 0

    @classmethod
    def zeros_like(cls, net: DenseNet) -> "AdamState":
        return cls(m=[(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params],
                   v=[(np.zeros_like(w), np.zeros_like(b)) for w, b in net.params])

    def copy(self) -> "AdamState":
        return AdamState(m=[(a.copy(), b.copy()) for a, b in self.m],
                         v=[(a.copy(), b.copy()) for a, b in self.v], step=self.step)


def adam_step(net: DenseNet, grads: Params, state: AdamState, lr: float, beta1: float = 0.9,
              beta2: float = 0.999, eps: float = 1e-8) -> DenseNet:
    """Bias-corrected Adam update of `net` in place"""
    if len(grads) != len(net.params):
        raise ShapeMismatchError(f"{net.name}: {len(grads)} gradient pairs for {len(net.params)} layers")
    state.step += 1
    correction1 = 1.0 - beta1 ** state.step
    correction2 = 1.0 - beta2 ** state.step
    for i, ((w, b), (gw, gb)) in enumerate(zip(net.params, grads)):
        for j, (p, g) in enumerate(((w, gw), (b, gb))):
            if p.shape != g.shape:
                raise ShapeMismatchError(f"{net.name}: gradient shape {g.shape} != parameter shape {p.shape}")
            m = state.m[i][j]
            v = state.v[i][j]
            m *= beta1
            m += (1.0 - beta1) * g
            v *= beta2
            v += (1.0 - beta2) * g * g
            p -= (lr * (m / correction1) / (np.sqrt(v / correction2) + eps)).astype(p.dtype)
    return net


@dataclass(frozen=True)
class Architecture:
    """Layer widths of the seven sub-networks"""

    signal_length: int = 1024
    encoder_hidden: Tuple[int, ...] = (512, 128)
    decoder_hidden: Tuple[int, ...] = (128, 512)
    d_r: int = 32
    d_v: int = 16
    classifier_hidden: Tuple[int, ...] = (64,)
    n_classes: int = 5

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Architecture":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown architecture key(s): {sorted(unknown)}")
        data = dict(data)
        for key in ("encoder_hidden", "decoder_hidden", "classifier_hidden"):
            if key in data:
                data[key] = tuple(int(x) for x in data[key])
        return cls(**data)

    def to_dict(self) -> Dict[str, Any]:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    def _mlp(self, widths: Sequence[int]) -> List[LayerSpec]:
        return [
            LayerSpec(a, b, "identity" if i == len(widths) - 2 else "relu")
            for i, (a, b) in enumerate(zip(widths[:-1], widths[1:]))
        ]

    def layer_specs(self, name: str) -> List[LayerSpec]:
        encoder = (self.signal_length, *self.encoder_hidden)
        table = {
            "ec_r": (*encoder, self.d_r),
            "r_ec_v": (*encoder, self.d_r),
            "v_ec_v": (*encoder, self.d_v),
            "dc_r": (self.d_r, *self.decoder_hidden, self.signal_length),
            "dc_v": (self.d_r + self.d_v, *self.decoder_hidden, self.signal_length),
            "cl": (self.d_v, *self.classifier_hidden, self.n_classes),
            "cl_adv": (self.d_r, *self.classifier_hidden, self.n_classes),
        }
        if name not in table:
            raise ConfigurationError(f"unknown network {name!r}")
        return self._mlp(table[name])


@dataclass
class ModelWeights:
    """All seven networks plus their Adam state"""

    architecture: Architecture
    networks: Dict[str, DenseNet]
    optimizer: Dict[str, AdamState] = field(default_factory=dict)

    def __post_init__(self):
        missing = set(NETWORK_NAMES) - set(self.networks)
        if missing:
            raise ConfigurationError(f"model is missing networks: {sorted(missing)}")
        for name in NETWORK_NAMES:
            self.optimizer.setdefault(name, AdamState.zeros_like(self.networks[name]))

    def __getitem__(self, name: str) -> DenseNet:
        return self.networks[name]

    @property
    def dtype(self):
        return self.networks["ec_r"].dtype

    def checksums(self, names: Optional[Iterable[str]] = None) -> Dict[str, str]:
        return {name: self.networks[name].checksum() for name in (names or NETWORK_NAMES)}

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            architecture=self.architecture,
            networks={k: v.copy() for k, v in self.networks.items()},
            optimizer={k: v.copy() for k, v in self.optimizer.items()},
        )


def build_model(arch: Optional[Architecture] = None, seed: int = 0, dtype=np.float32) -> ModelWeights:
    arch = arch or Architecture()
    rng = np.random.default_rng(seed)
    networks = {name: DenseNet.initialise(name, arch.layer_specs(name), rng, dtype) for name in NETWORK_NAMES}
    return ModelWeights(architecture=arch, networks=networks)


def manifest_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".json")


def _write_array(f, array: np.ndarray) -> None:
    f.write(np.ascontiguousarray(array, dtype="<f8").tobytes())


def save_checkpoint(weights: ModelWeights, path: PathLike, manifest: Optional[Dict[str, Any]] = None) -> Path:
    """
    Binary layout (little-endian): magic, version, network count, then per
    network its name, layer shapes and activations, float64 weights and Adam
    moments, and the Adam step counter.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(NETWORK_NAMES)))
        for name in NETWORK_NAMES:
            net = weights.networks[name]
            state = weights.optimizer[name]
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<I", len(net.specs)))
            for spec in net.specs:
                f.write(struct.pack("<IIB", spec.input_dim, spec.output_dim, ACTIVATIONS.index(spec.activation)))
            for (w, b), (mw, mb), (vw, vb) in zip(net.params, state.m, state.v):
                for array in (w, b, mw, mb, vw, vb):
                    _write_array(f, array)
            f.write(struct.pack("<Q", state.step))
    full_manifest = {
        "format_version": CHECKPOINT_VERSION,
        "architecture": weights.architecture.to_dict(),
        "dtype": np.dtype(weights.dtype).name,
    }
    full_manifest.update(manifest or {})
    with open(manifest_path(path), "w", encoding="utf-8") as f:
        json.dump(full_manifest, f, indent=2, sort_keys=True)
    return path


class _Reader:
    def __init__(self, raw: bytes, path: Path):
        self.raw = raw
        self.offset = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.raw):
            raise CheckpointFormatError(f"{self.path} is truncated at byte {self.offset}")
        chunk = self.raw[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(size))

    def array(self, shape: Tuple[int, ...], dtype) -> np.ndarray:
        count = int(np.prod(shape))
        return np.frombuffer(self.take(8 * count), dtype="<f8").reshape(shape).astype(dtype)


def load_checkpoint(path: PathLike) -> Tuple[ModelWeights, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"checkpoint not found: {path}")
    if not manifest_path(path).exists():
        raise MissingFileError(f"checkpoint manifest not found: {manifest_path(path)}")
    try:
        with open(manifest_path(path), encoding="utf-8") as f:
            manifest = json.load(f)
    except json.JSONDecodeError as e:
        raise CheckpointFormatError(f"manifest is not valid JSON: {e}") from e
    if not isinstance(manifest, dict):
        raise CheckpointFormatError("manifest must hold a JSON object")
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    try:
        dtype = np.dtype(manifest.get("dtype", "float32"))
        arch = Architecture.from_dict(manifest["architecture"])
    except (ConfigurationError, KeyError, TypeError, ValueError) as e:
        raise CheckpointFormatError(f"manifest is missing or has a malformed field: {e!r}") from e

    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(CHECKPOINT_MAGIC)) != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path} is not a checkpoint file (bad magic)")
    version, count = reader.unpack("<II")
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version}")
    networks, optimizer = {}, {}
    for _ in range(count):
        (name_len,) = reader.unpack("<H")
        name = reader.take(name_len).decode("utf-8", errors="replace")
        (n_layers,) = reader.unpack("<I")
        specs = []
        for _ in range(n_layers):
            d_in, d_out, act = reader.unpack("<IIB")
            if act >= len(ACTIVATIONS):
                raise CheckpointFormatError(f"{name}: unknown activation code {act}")
            specs.append(LayerSpec(d_in, d_out, ACTIVATIONS[act]))
        params, m, v = [], [], []
        for spec in specs:
            shapes = ((spec.input_dim, spec.output_dim), (spec.output_dim,))
            w, b = (reader.array(s, dtype) for s in shapes)
            mw, mb = (reader.array(s, dtype) for s in shapes)
            vw, vb = (reader.array(s, dtype) for s in shapes)
            params.append((w, b))
            m.append((mw, mb))
            v.append((vw, vb))
        (step,) = reader.unpack("<Q")
        networks[name] = DenseNet(name, specs, params)
        optimizer[name] = AdamState(m=m, v=v, step=step)
    if reader.offset != len(reader.raw):
        raise CheckpointFormatError(f"{path} has {len(reader.raw) - reader.offset} trailing bytes")
    if set(networks) != set(NETWORK_NAMES):
        raise CheckpointFormatError(f"{path} holds networks {sorted(networks)}, expected {sorted(NETWORK_NAMES)}")
    return ModelWeights(architecture=arch, networks=networks, optimizer=optimizer), manifest
