"""
Vanilla U-Net built from the ops in ``lvnc.tensor``.

Each encoder level applies two padded 3x3 convolutions with ReLU, then 2x2
max pooling. The decoder upsamples by nearest-neighbour duplication,
concatenates the skip connection and applies two 3x3 convolutions. A final
1x1 convolution produces one logit per label.
"""

import io
import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from .errors import DimensionError, FormatError
from .tensor import (Tensor, concat_channels, conv2d, maxpool2, relu,
                     softmax_channels, upsample2)


@dataclass(frozen=True)
class UNetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 1
    num_labels: int = 4
    input_size: int = 64

    def __post_init__(self):
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be positive")
        if self.num_labels < 2:
            raise ValueError("num_labels must be at least 2")
        if self.input_size % (2 ** self.depth):
            raise ValueError(f"input_size {self.input_size} not divisible by 2**{self.depth}")

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** level


FULL_SIZE_CONFIG = UNetConfig(depth=4, base_channels=64, in_channels=1, num_labels=4, input_size=256)


def param_shapes(config: UNetConfig) -> dict:
    """Ordered name -> shape map for every kernel and bias."""
    shapes = {}

    def conv(name, cin, cout, k=3):
        shapes[f"{name}.weight"] = (cout, cin, k, k)
        shapes[f"{name}.bias"] = (cout,)

    cin = config.in_channels
    for level in range(config.depth):
        c = config.channels(level)
        conv(f"enc{level}.conv1", cin, c)
        conv(f"enc{level}.conv2", c, c)
        cin = c
    cb = config.channels(config.depth)
    conv("bottleneck.conv1", cin, cb)
    conv("bottleneck.conv2", cb, cb)
    below = cb
    for level in reversed(range(config.depth)):
        c = config.channels(level)
        conv(f"dec{level}.conv1", below + c, c)
        conv(f"dec{level}.conv2", c, c)
        below = c
    conv("head", config.base_channels, config.num_labels, k=1)
    return shapes


def count_params(config: UNetConfig) -> int:
    return int(sum(np.prod(s) for s in param_shapes(config).values()))


def init_params(config: UNetConfig, seed: int = 0) -> dict:
    """Kaiming-normal kernels (std sqrt(2 / fan_in)) and zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".weight"):
            fan_in = shape[1] * shape[2] * shape[3]
            data = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True)
    return params


class UNet:
    """A U-Net configuration together with its parameters."""

    def __init__(self, config: UNetConfig, params: dict):
        expected = param_shapes(config)
        if list(params) != list(expected):
            raise ValueError("parameter names do not match the configuration")
        for name, shape in expected.items():
            if params[name].shape != shape:
                raise DimensionError(f"{name}: expected shape {shape}, got {params[name].shape}")
        self.config = config
        self.params = params

    @classmethod
    def create(cls, config: UNetConfig = UNetConfig(), seed: int = 0) -> "UNet":
        return cls(config, init_params(config, seed))

    def parameters(self) -> list:
        return list(self.params.values())

    def num_params(self) -> int:
        return int(sum(p.data.size for p in self.params.values()))

    def _conv(self, name, x, padding=1):
        return conv2d(x, self.params[f"{name}.weight"], self.params[f"{name}.bias"], padding)

    def forward(self, batch) -> Tensor:
        """Logits of shape (N, num_labels, S, S) for an input batch (N, in_channels, S, S)."""
        x = batch if isinstance(batch, Tensor) else Tensor(batch)
        cfg = self.config
        s = cfg.input_size
        if x.data.ndim != 4 or x.shape[1:] != (cfg.in_channels, s, s):
            raise DimensionError(f"expected input (N, {cfg.in_channels}, {s}, {s}), got {x.shape}")
        skips = []
        for level in range(cfg.depth):
            x = relu(self._conv(f"enc{level}.conv1", x))
            x = relu(self._conv(f"enc{level}.conv2", x))
            skips.append(x)
            x = maxpool2(x)
        x = relu(self._conv("bottleneck.conv1", x))
        x = relu(self._conv("bottleneck.conv2", x))
        for level in reversed(range(cfg.depth)):
            x = concat_channels(upsample2(x), skips[level])
            x = relu(self._conv(f"dec{level}.conv1", x))
            x = relu(self._conv(f"dec{level}.conv2", x))
        return self._conv("head", x, padding=0)

    def predict_proba(self, batch) -> np.ndarray:
        return softmax_channels(self.forward(batch)).data

    def predict(self, batch) -> np.ndarray:
        """Per-pixel label masks (N, S, S); ties go to the lowest label."""
        return predict_from_probs(self.predict_proba(batch))


def predict_from_probs(probs) -> np.ndarray:
    probs = probs.data if isinstance(probs, Tensor) else np.asarray(probs)
    return probs.argmax(axis=1).astype(np.uint8)


# --------------------------------------------------------------------------
# checkpoint container:
#   magic b"LVNCUNET" | u32 version | u64 header length | JSON header | float64 blobs
# all integers and floats little-endian; blobs follow the header's parameter order

CHECKPOINT_MAGIC = b"LVNCUNET"
CHECKPOINT_VERSION = 1


def dumps_checkpoint(model: UNet, metadata: dict | None = None) -> bytes:
    header = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "params": [[name, list(p.shape)] for name, p in model.params.items()],
        "metadata": metadata or {},
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IQ", CHECKPOINT_VERSION, len(head)))
    buf.write(head)
    for p in model.params.values():
        buf.write(p.data.astype("<f8").tobytes())
    return buf.getvalue()


def loads_checkpoint(raw: bytes) -> tuple[UNet, dict]:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise FormatError("not a U-Net checkpoint")
    try:
        version, hlen = struct.unpack_from("<IQ", raw, 8)
    except struct.error as exc:
        raise FormatError("truncated checkpoint header") from exc
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    try:
        header = json.loads(raw[start:start + hlen].decode("utf-8"))
        specs = [(str(name), [int(s) for s in shape]) for name, shape in header["params"]]
        config = UNetConfig(**header["config"])
    except (ValueError, KeyError, TypeError) as exc:
        raise FormatError(f"unreadable checkpoint header: {exc}") from exc
    offset = start + hlen
    params = {}
    for name, shape in specs:
        size = int(np.prod(shape))
        nbytes = 8 * size
        if offset + nbytes > len(raw):
            raise FormatError("truncated parameter data")
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=offset).reshape(shape)
        params[name] = Tensor(data.astype(np.float64), requires_grad=True)
        offset += nbytes
    if offset != len(raw):
        raise FormatError("trailing bytes after parameter data")
    try:
        model = UNet(config, params)
    except ValueError as exc:
        raise FormatError(str(exc)) from exc
    return model, header.get("metadata", {})


def save_checkpoint(model: UNet, path, metadata: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(dumps_checkpoint(model, metadata))


def load_checkpoint(path) -> tuple[UNet, dict]:
    with open(path, "rb") as f:
        return loads_checkpoint(f.read())
