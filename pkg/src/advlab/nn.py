"""
VGG-style classifier and convolutional denoising autoencoder.

Both models are plain parameter containers with an explicit ``forward``; the
layer sequence is written out in code rather than assembled from layer
objects.  Parameters live in ``model.params`` (ordered name -> Tensor) and
batch-norm running statistics in ``model.bn``.
"""

from __future__ import annotations

import contextlib
import copy
import hashlib
import io
import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import tensor as T
from .errors import (
    ConfigError,
    CorruptHeaderError,
    DimensionError,
    SpecMismatchError,
    TruncatedFileError,
    VersionMismatchError,
)
from .tensor import BatchNormState, Tensor

FULL_CHANNELS = (64, 128, 256, 512)
REDUCED_CHANNELS = (16, 32, 64, 128)

MAGIC = b"ADVL"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class VggBlockSpec:
    in_channels: int
    out_channels: int


@dataclass(frozen=True)
class ClassifierSpec:
    input_shape: tuple[int, int, int] = (1, 32, 32)
    block_channels: tuple[int, ...] = FULL_CHANNELS
    hidden_dims: tuple[int, ...] = (512, 512)
    num_classes: int = 10
    dropout_rate: float = 0.5

    kind = "classifier"

    @classmethod
    def profile(cls, name: str, **overrides) -> "ClassifierSpec":
        if name == "full":
            return cls(**overrides)
        if name == "reduced":
            return cls(block_channels=REDUCED_CHANNELS, **overrides)
        raise ConfigError(f"unknown profile {name!r}; expected 'full' or 'reduced'")

    @property
    def blocks(self) -> list[VggBlockSpec]:
        chans = (self.input_shape[0],) + tuple(self.block_channels)
        return [VggBlockSpec(a, b) for a, b in zip(chans[:-1], chans[1:])]

    @property
    def final_spatial(self) -> tuple[int, int]:
        return self.input_shape[1] // 16, self.input_shape[2] // 16

    @property
    def flatten_size(self) -> int:
        h, w = self.final_spatial
        return self.block_channels[-1] * h * w

    def validate(self) -> None:
        c, h, w = self.input_shape
        if len(self.block_channels) != 4:
            raise ConfigError(f"classifier needs exactly 4 VGG blocks, got {len(self.block_channels)}")
        if any(b.out_channels < 1 for b in self.blocks):
            raise ConfigError("block channel counts must be positive")
        if any(b2.out_channels < b1.out_channels for b1, b2 in zip(self.blocks, self.blocks[1:])):
            raise ConfigError(f"block channels must not decrease: {self.block_channels}")
        if c < 1 or h < 16 or w < 16 or h % 16 or w % 16:
            raise ConfigError(f"input spatial size must be a positive multiple of 16, got {self.input_shape}")
        if len(self.hidden_dims) != 2 or min(self.hidden_dims) < 1:
            raise ConfigError(f"classifier head needs 2 positive hidden sizes, got {self.hidden_dims}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be at least 2")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ConfigError(f"dropout rate must lie in [0, 1), got {self.dropout_rate}")


@dataclass(frozen=True)
class AutoencoderSpec:
    input_shape: tuple[int, int, int] = (1, 32, 32)
    conv_channels: tuple[int, ...] = (32, 64, 128)
    latent_dim: int = 128
    hidden_dim: int = 512
    noise_std: float = 0.1

    kind = "autoencoder"

    @property
    def bottleneck_shape(self) -> tuple[int, int, int]:
        return self.conv_channels[-1], self.input_shape[1] // 8, self.input_shape[2] // 8

    def validate(self) -> None:
        c, h, w = self.input_shape
        if len(self.conv_channels) != 3 or min(self.conv_channels) < 1:
            raise ConfigError(f"autoencoder needs 3 positive conv channel counts, got {self.conv_channels}")
        if c < 1 or h < 8 or w < 8 or h % 8 or w % 8:
            raise ConfigError(f"input spatial size must be a positive multiple of 8, got {self.input_shape}")
        if self.latent_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("latent_dim and hidden_dim must be positive")
        if self.noise_std < 0:
            raise ConfigError(f"noise_std must be non-negative, got {self.noise_std}")


Spec = Union[ClassifierSpec, AutoencoderSpec]


class Model:
    """Named parameters, batch-norm state and a train/eval switch.

    ``rng`` drives dropout and latent noise in train mode.
    """

    def __init__(self, spec: Spec):
        spec.validate()
        self.spec = spec
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormState] = {}
        self.mode = "train"
        self.rng = np.random.default_rng(0)

    # -- registration ------------------------------------------------------------

    def _add(self, name: str, data: np.ndarray) -> None:
        if name in self.params:
            raise ConfigError(f"duplicate parameter name {name!r}")
        self.params[name] = Tensor(data, requires_grad=True)

    def _add_conv(self, name: str, cin: int, cout: int, k: int, rng, transposed: bool = False) -> None:
        shape = (cin, cout, k, k) if transposed else (cout, cin, k, k)
        fan_in = shape[1] * k * k
        bound = math.sqrt(6.0 / fan_in)
        self._add(f"{name}.weight", rng.uniform(-bound, bound, size=shape))
        self._add(f"{name}.bias", np.zeros(cout))

    def _add_linear(self, name: str, fin: int, fout: int, rng) -> None:
        bound = math.sqrt(6.0 / fin)
        self._add(f"{name}.weight", rng.uniform(-bound, bound, size=(fout, fin)))
        self._add(f"{name}.bias", np.zeros(fout))

    def _add_bn(self, name: str, channels: int) -> None:
        self._add(f"{name}.gamma", np.ones(channels))
        self._add(f"{name}.beta", np.zeros(channels))
        self.bn[name] = BatchNormState.create(channels, T.default_dtype())

    # -- layer helpers -----------------------------------------------------------

    @property
    def training(self) -> bool:
        return self.mode == "train"

    def _conv(self, x, name, stride=1, padding=1):
        p = self.params
        return T.conv2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)

    def _deconv(self, x, name, stride=2, padding=1):
        p = self.params
        return T.conv_transpose2d(x, p[f"{name}.weight"], p[f"{name}.bias"], stride=stride, padding=padding)

    def _linear(self, x, name):
        return T.linear(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"])

    def _bn(self, x, name):
        p = self.params
        return T.batchnorm2d(x, p[f"{name}.gamma"], p[f"{name}.beta"], self.bn[name], self.training)

    # -- public API --------------------------------------------------------------

    @property
    def kind(self) -> str:
        return self.spec.kind

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype

    def train(self) -> "Model":
        self.mode = "train"
        return self

    def eval(self) -> "Model":
        self.mode = "eval"
        return self

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        expected = tuple(self.spec.input_shape)
        if x.ndim != 4 or tuple(x.shape[1:]) != expected:
            raise DimensionError(f"{self.kind} expects input (N, {', '.join(map(str, expected))}), got {x.shape}")
        if x.dtype != self.dtype:
            x = T.as_tensor(x.data.astype(self.dtype)) if x.is_leaf and not x.requires_grad else x
        return self.forward(x)

    def predict(self, x: np.ndarray) -> np.ndarray:
        """Forward pass without graph recording; returns a plain array."""
        with T.no_grad():
            return self(x).data

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def requires_grad_(self, flag: bool) -> "Model":
        for p in self.params.values():
            p.requires_grad = flag
        return self

    @contextlib.contextmanager
    def frozen(self):
        """Eval mode with parameter gradients switched off, restored on exit."""
        mode = self.mode
        flags = {k: p.requires_grad for k, p in self.params.items()}
        self.eval().requires_grad_(False)
        try:
            yield self
        finally:
            self.mode = mode
            for k, p in self.params.items():
                p.requires_grad = flags[k]

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.params.items()}
        for name, s in self.bn.items():
            state[f"{name}.running_mean"] = s.running_mean
            state[f"{name}.running_var"] = s.running_var
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = self.state_dict()
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise SpecMismatchError(f"state mismatch: missing {sorted(missing)}, unexpected {sorted(extra)}")
        for name, value in state.items():
            if own[name].shape != value.shape:
                raise SpecMismatchError(f"{name}: stored shape {value.shape} != model shape {own[name].shape}")
        for name, p in self.params.items():
            p.data = np.array(state[name], dtype=p.dtype)
        for name, s in self.bn.items():
            s.running_mean = np.array(state[f"{name}.running_mean"], dtype=s.running_mean.dtype)
            s.running_var = np.array(state[f"{name}.running_var"], dtype=s.running_var.dtype)

    def clone(self) -> "Model":
        other = copy.copy(self)
        other.params = {k: Tensor.__new__(Tensor) for k in self.params}
        for k, p in self.params.items():
            q = other.params[k]
            q.data, q.requires_grad, q.grad = p.data.copy(), p.requires_grad, None
            q._parents, q._backward, q.op = (), None, "leaf"
        other.bn = {k: BatchNormState(s.running_mean.copy(), s.running_var.copy()) for k, s in self.bn.items()}
        other.rng = copy.deepcopy(self.rng)
        return other

    def astype(self, dtype) -> "Model":
        """Copy of the model with parameters and running stats cast to ``dtype``."""
        other = self.clone()
        for p in other.params.values():
            p.data = p.data.astype(dtype)
        for s in other.bn.values():
            s.running_mean = s.running_mean.astype(dtype)
            s.running_var = s.running_var.astype(dtype)
        return other

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, arr in self.state_dict().items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()[:16]


class Classifier(Model):
    """Four VGG blocks followed by a three-layer fully connected head."""

    def __init__(self, spec: ClassifierSpec, rng: np.random.Generator):
        super().__init__(spec)
        for i, block in enumerate(spec.blocks, start=1):
            self._add_conv(f"block{i}.conv1", block.in_channels, block.out_channels, 3, rng)
            self._add_bn(f"block{i}.bn1", block.out_channels)
            self._add_conv(f"block{i}.conv2", block.out_channels, block.out_channels, 3, rng)
            self._add_bn(f"block{i}.bn2", block.out_channels)
        h1, h2 = spec.hidden_dims
        self._add_linear("fc1", spec.flatten_size, h1, rng)
        self._add_linear("fc2", h1, h2, rng)
        self._add_linear("out", h2, spec.num_classes, rng)

    def features(self, x: Tensor) -> Tensor:
        for i in range(1, len(self.spec.block_channels) + 1):
            x = T.relu(self._bn(self._conv(x, f"block{i}.conv1"), f"block{i}.bn1"))
            x = T.relu(self._bn(self._conv(x, f"block{i}.conv2"), f"block{i}.bn2"))
            x = T.maxpool2d(x, 2, 2)
        return x

    def forward(self, x: Tensor) -> Tensor:
        rate = self.spec.dropout_rate
        h = T.flatten(self.features(x))
        h = T.dropout(T.relu(self._linear(h, "fc1")), rate, self.training, self.rng)
        h = T.dropout(T.relu(self._linear(h, "fc2")), rate, self.training, self.rng)
        return self._linear(h, "out")


class Autoencoder(Model):
    """Convolutional autoencoder with Gaussian noise injected at the latent code.

    Encoder: three stride-2 3x3 convs (32 -> 16 -> 8 -> 4) with GELU, batch norm
    after the second, then two linear layers down to the latent code.  Decoder:
    two linear layers back to the bottleneck volume and three stride-2 4x4
    transposed convs (4 -> 8 -> 16 -> 32); the first two are followed by GELU
    and batch norm, the last by a sigmoid.
    """

    def __init__(self, spec: AutoencoderSpec, rng: np.random.Generator):
        super().__init__(spec)
        c0 = spec.input_shape[0]
        c1, c2, c3 = spec.conv_channels
        flat = int(np.prod(spec.bottleneck_shape))
        self._add_conv("enc.conv1", c0, c1, 3, rng)
        self._add_conv("enc.conv2", c1, c2, 3, rng)
        self._add_bn("enc.bn2", c2)
        self._add_conv("enc.conv3", c2, c3, 3, rng)
        self._add_linear("enc.fc1", flat, spec.hidden_dim, rng)
        self._add_linear("enc.fc2", spec.hidden_dim, spec.latent_dim, rng)
        self._add_linear("dec.fc1", spec.latent_dim, spec.hidden_dim, rng)
        self._add_linear("dec.fc2", spec.hidden_dim, flat, rng)
        self._add_conv("dec.deconv1", c3, c2, 4, rng, transposed=True)
        self._add_bn("dec.bn1", c2)
        self._add_conv("dec.deconv2", c2, c1, 4, rng, transposed=True)
        self._add_bn("dec.bn2", c1)
        self._add_conv("dec.deconv3", c1, c0, 4, rng, transposed=True)

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        h = T.gelu(self._conv(x, "enc.conv1", stride=2))
        h = T.gelu(self._bn(self._conv(h, "enc.conv2", stride=2), "enc.bn2"))
        h = T.gelu(self._conv(h, "enc.conv3", stride=2))
        h = T.gelu(self._linear(T.flatten(h), "enc.fc1"))
        return self._linear(h, "enc.fc2")

    def decode(self, z: Tensor) -> Tensor:
        h = T.gelu(self._linear(z, "dec.fc1"))
        h = T.gelu(self._linear(h, "dec.fc2"))
        h = T.reshape(h, (h.shape[0],) + self.spec.bottleneck_shape)
        h = self._bn(T.gelu(self._deconv(h, "dec.deconv1")), "dec.bn1")
        h = self._bn(T.gelu(self._deconv(h, "dec.deconv2")), "dec.bn2")
        return T.sigmoid(self._deconv(h, "dec.deconv3"))

    def forward(self, x: Tensor) -> Tensor:
        z = T.add_gaussian_noise(self.encode(x), self.spec.noise_std, self.training, self.rng)
        return self.decode(z)


def build_classifier(spec: Optional[ClassifierSpec] = None, rng: Optional[np.random.Generator] = None) -> Classifier:
    return Classifier(spec or ClassifierSpec(), rng if rng is not None else np.random.default_rng(0))


def build_autoencoder(spec: Optional[AutoencoderSpec] = None, rng: Optional[np.random.Generator] = None) -> Autoencoder:
    return Autoencoder(spec or AutoencoderSpec(), rng if rng is not None else np.random.default_rng(0))


def forward(model: Model, batch) -> Tensor:
    return model(batch)


# -- checkpoints -----------------------------------------------------------------


def _spec_to_text(spec: Spec) -> str:
    lines = [f"kind={spec.kind}"]
    for f in fields(spec):
        value = getattr(spec, f.name)
        if isinstance(value, tuple):
            value = ",".join(str(v) for v in value)
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def _spec_from_text(text: str) -> Spec:
    try:
        items = dict(line.split("=", 1) for line in text.splitlines() if line)
        kind = items.pop("kind")
    except (ValueError, KeyError) as exc:
        raise CorruptHeaderError(f"unreadable spec block: {exc}") from None
    cls = {"classifier": ClassifierSpec, "autoencoder": AutoencoderSpec}.get(kind)
    if cls is None:
        raise CorruptHeaderError(f"unknown model kind {kind!r}")
    defaults = asdict(cls())
    kwargs = {}
    try:
        for name, raw in items.items():
            if name not in defaults:
                raise CorruptHeaderError(f"unknown spec key {name!r}")
            default = defaults[name]
            if isinstance(default, tuple):
                kwargs[name] = tuple(int(v) for v in raw.split(",") if v)
            elif isinstance(default, float):
                kwargs[name] = float(raw)
            else:
                kwargs[name] = int(raw)
    except ValueError as exc:
        raise CorruptHeaderError(f"bad spec value: {exc}") from None
    return cls(**kwargs)


def save_checkpoint(model: Model, path) -> None:
    """Write ``model`` in the ADVL binary format.

    Layout (little-endian): magic ``ADVL``, u32 version, u32 spec length, spec
    as UTF-8 ``key=value`` lines, u32 record count, then per record: u32 name
    length, name bytes, u32 rank, u32 dims, float32 payload.  Only float32
    models can be stored bit-exactly, so other dtypes are rejected.
    """
    if model.dtype != np.float32:
        raise ConfigError(f"checkpoints store float32 payloads; cast the {model.dtype} model first")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", FORMAT_VERSION))
    spec_bytes = _spec_to_text(model.spec).encode("utf-8")
    buf.write(struct.pack("<I", len(spec_bytes)))
    buf.write(spec_bytes)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, arr in state.items():
        name_bytes = name.encode("utf-8")
        buf.write(struct.pack("<I", len(name_bytes)))
        buf.write(name_bytes)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]


def load_checkpoint(path, kind: Optional[str] = None) -> Model:
    """Read a checkpoint written by :func:`save_checkpoint`.

    ``kind`` ("classifier" or "autoencoder"), when given, must match the stored
    model; otherwise :class:`SpecMismatchError` is raised.
    """
    data = Path(path).read_bytes()
    if len(data) < 8:
        if data and not MAGIC.startswith(data[:4]):
            raise CorruptHeaderError("not an ADVL checkpoint (bad magic)")
        raise TruncatedFileError(f"checkpoint too short ({len(data)} bytes)")
    r = _Reader(data)
    if r.take(4) != MAGIC:
        raise CorruptHeaderError("not an ADVL checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"checkpoint format version {version}, this build reads {FORMAT_VERSION}")
    spec_len = r.u32()
    try:
        spec = _spec_from_text(r.take(spec_len).decode("utf-8"))
    except UnicodeDecodeError:
        raise CorruptHeaderError("spec block is not valid UTF-8") from None
    if kind is not None and spec.kind != kind:
        raise SpecMismatchError(f"checkpoint holds a {spec.kind}, expected a {kind}")

    state = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank))
        count = int(np.prod(shape)) if rank else 1
        state[name] = np.frombuffer(r.take(4 * count), dtype="<f4").reshape(shape).astype(np.float32)
    if r.pos != len(data):
        raise CorruptHeaderError(f"{len(data) - r.pos} trailing bytes after the last record")

    with T.precision(np.float32):
        model = Classifier(spec, np.random.default_rng(0)) if spec.kind == "classifier" else Autoencoder(
            spec, np.random.default_rng(0)
        )
    model.load_state_dict(state)
    return model.eval()


def checkpoint_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]
