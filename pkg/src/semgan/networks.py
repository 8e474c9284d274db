"""The U-Net generator and the class-aware patch discriminator.

The discriminator's final layer emits one channel per semantic class;
multiplying by a one-hot class mask and summing over channels yields a
patch score map in which each location is judged by the channel of the
class occupying it. With a single class and an all-ones mask it reduces
to a standard patch discriminator.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import ShapeError, Tensor
from .gradfilters import LabelMap

WEIGHT_STD = 0.02  # zero-mean Gaussian init
LEAKY_SLOPE = 0.2
NORM_EPSILON = 1e-5


class CheckpointError(RuntimeError):
    """Unreadable, corrupt, or wrong-version parameter container."""


@dataclass(frozen=True)
class GeneratorConfig:
    depth: int = 4
    base_width: int = 32
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError(f"generator depth must be >= 2, got {self.depth}")
        if self.base_width < 2:
            raise ValueError(f"generator base_width must be >= 2, got {self.base_width}")
        if self.in_channels < 1:
            raise ValueError(f"generator in_channels must be >= 1, got {self.in_channels}")


@dataclass(frozen=True)
class DiscriminatorConfig:
    num_classes: int = 8
    base_width: int = 32
    num_blocks: int = 4
    in_channels: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 1:
            raise ValueError(f"discriminator num_classes must be >= 1, got {self.num_classes}")
        if self.base_width < 1:
            raise ValueError(f"discriminator base_width must be >= 1, got {self.base_width}")
        if self.num_blocks < 0:
            raise ValueError(f"discriminator num_blocks must be >= 0, got {self.num_blocks}")


class _ParamStore:
    """Named, ordered parameter registry shared by both network types."""

    def __init__(self, seed: int):
        self.params: dict[str, Tensor] = {}
        self._rng = np.random.default_rng(seed)

    def weight(self, name: str, shape: tuple) -> Tensor:
        tensor = Tensor(self._rng.normal(0.0, WEIGHT_STD, size=shape).astype(np.float32),
                        requires_grad=True)
        self.params[name] = tensor
        return tensor

    def constant(self, name: str, shape: tuple, value: float) -> Tensor:
        tensor = Tensor(np.full(shape, value, dtype=np.float32), requires_grad=True)
        self.params[name] = tensor
        return tensor

    def norm_pair(self, prefix: str, channels: int) -> tuple:
        scale = self.constant(f"{prefix}.scale", (1, channels, 1, 1), 1.0)
        shift = self.constant(f"{prefix}.shift", (1, channels, 1, 1), 0.0)
        return scale, shift


class GeneratorNet:
    """Fully convolutional U-Net: stride-2 encoder, skip connections into a
    transposed-conv decoder, tanh output in [-1, 1]."""

    def __init__(self, cfg: GeneratorConfig):
        self.cfg = cfg
        store = _ParamStore(cfg.seed)
        widths = [cfg.base_width * (2 ** i) for i in range(cfg.depth)]
        store.weight("enc1.conv.weight", (widths[0], cfg.in_channels, 4, 4))
        store.constant("enc1.conv.bias", (1, widths[0], 1, 1), 0.0)
        for i in range(2, cfg.depth + 1):
            store.weight(f"enc{i}.conv.weight", (widths[i - 1], widths[i - 2], 4, 4))
            store.norm_pair(f"enc{i}.norm", widths[i - 1])
        for i in range(cfg.depth, 1, -1):
            store.weight(f"dec{i}.up.weight", (widths[i - 1], widths[i - 2], 2, 2))
            store.weight(f"dec{i}.mix.weight", (widths[i - 2], widths[i - 2] * 2, 3, 3))
            store.norm_pair(f"dec{i}.norm", widths[i - 2])
        head_width = max(cfg.base_width // 2, 1)
        store.weight("dec1.up.weight", (widths[0], head_width, 2, 2))
        store.norm_pair("dec1.norm", head_width)
        store.weight("out.conv.weight", (cfg.in_channels, head_width, 3, 3))
        store.constant("out.conv.bias", (1, cfg.in_channels, 1, 1), 0.0)
        self.params = store.params

    def parameters(self) -> dict:
        return self.params

    def forward(self, image: Tensor) -> Tensor:
        p = self.params
        depth = self.cfg.depth
        n, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"generator expects {self.cfg.in_channels} channels, got {c}")
        factor = 2 ** depth
        if h % factor or w % factor:
            raise ShapeError(
                f"generator input {h}x{w} must be divisible by 2^depth = {factor}"
            )
        x = engine.conv2d(image, p["enc1.conv.weight"], stride=2, padding="zero", pad_size=1)
        x = engine.bias_add(x, p["enc1.conv.bias"])
        x = engine.leaky_relu(x, LEAKY_SLOPE)
        skips = [x]
        for i in range(2, depth + 1):
            x = engine.conv2d(x, p[f"enc{i}.conv.weight"], stride=2, padding="zero", pad_size=1)
            x = engine.instance_norm(x, p[f"enc{i}.norm.scale"], p[f"enc{i}.norm.shift"],
                                     NORM_EPSILON)
            x = engine.leaky_relu(x, LEAKY_SLOPE)
            skips.append(x)
        for i in range(depth, 1, -1):
            x = engine.conv_transpose2d(x, p[f"dec{i}.up.weight"], stride=2)
            x = engine.concat_channels([x, skips[i - 2]])
            x = engine.conv2d(x, p[f"dec{i}.mix.weight"], stride=1, padding="zero", pad_size=1)
            x = engine.instance_norm(x, p[f"dec{i}.norm.scale"], p[f"dec{i}.norm.shift"],
                                     NORM_EPSILON)
            x = engine.relu(x)
        x = engine.conv_transpose2d(x, p["dec1.up.weight"], stride=2)
        x = engine.instance_norm(x, p["dec1.norm.scale"], p["dec1.norm.shift"], NORM_EPSILON)
        x = engine.relu(x)
        x = engine.conv2d(x, p["out.conv.weight"], stride=1, padding="zero", pad_size=1)
        x = engine.bias_add(x, p["out.conv.bias"])
        return engine.tanh(x)


def build_generator(cfg: GeneratorConfig) -> GeneratorNet:
    return GeneratorNet(cfg)


def generator_forward(generator: GeneratorNet, image: Tensor) -> Tensor:
    return generator.forward(image)


class SemanticDiscriminatorNet:
    """Patch discriminator trunk (stride-2 conv blocks, instance norm after
    the first, leaky-ReLU) whose final stride-1 conv emits one channel per
    semantic class."""

    WIDTH_CAP = 8  # widths grow base * 2^i up to base * 8

    def __init__(self, cfg: DiscriminatorConfig):
        self.cfg = cfg
        store = _ParamStore(cfg.seed)
        widths = [cfg.base_width * min(2 ** i, self.WIDTH_CAP) for i in range(cfg.num_blocks)]
        in_ch = cfg.in_channels
        for i, width in enumerate(widths, start=1):
            store.weight(f"block{i}.conv.weight", (width, in_ch, 4, 4))
            if i == 1:
                store.constant(f"block{i}.conv.bias", (1, width, 1, 1), 0.0)
            else:
                store.norm_pair(f"block{i}.norm", width)
            in_ch = width
        store.weight("head.conv.weight", (cfg.num_classes, in_ch, 3, 3))
        store.constant("head.conv.bias", (1, cfg.num_classes, 1, 1), 0.0)
        self.params = store.params

    def parameters(self) -> dict:
        return self.params

    def trunk_forward(self, image: Tensor) -> Tensor:
        """Raw per-class feature map of shape (batch, num_classes, h_k, w_k)."""
        p = self.params
        n, c, h, w = image.shape
        if c != self.cfg.in_channels:
            raise ShapeError(f"discriminator expects {self.cfg.in_channels} channels, got {c}")
        x = image
        for i in range(1, self.cfg.num_blocks + 1):
            x = engine.conv2d(x, p[f"block{i}.conv.weight"], stride=2, padding="zero", pad_size=1)
            if i == 1:
                x = engine.bias_add(x, p["block1.conv.bias"])
            else:
                x = engine.instance_norm(x, p[f"block{i}.norm.scale"],
                                         p[f"block{i}.norm.shift"], NORM_EPSILON)
            x = engine.leaky_relu(x, LEAKY_SLOPE)
        x = engine.conv2d(x, p["head.conv.weight"], stride=1, padding="zero", pad_size=1)
        return engine.bias_add(x, p["head.conv.bias"])


def build_discriminator(cfg: DiscriminatorConfig) -> SemanticDiscriminatorNet:
    return SemanticDiscriminatorNet(cfg)


def discriminator_receptive_dims(d: SemanticDiscriminatorNet,
                                 input_h: int, input_w: int) -> tuple:
    """Spatial dims of the score map (pure conv arithmetic; the stride-1
    head preserves dims)."""
    h, w = input_h, input_w
    for _ in range(d.cfg.num_blocks):
        if h < 2 or w < 2:
            raise ShapeError(f"input {input_h}x{input_w} too small for {d.cfg.num_blocks} blocks")
        h = (h + 2 - 4) // 2 + 1
        w = (w + 2 - 4) // 2 + 1
    return h, w


def one_hot_mask(labels: LabelMap, num_classes: int,
                 target_h: int, target_w: int) -> Tensor:
    """One-hot encode then nearest-resize, preserving exact {0,1} values
    and a per-pixel channel sum of 1. Gradient-blocked."""
    if labels.data.size and labels.data.max() >= num_classes:
        raise ValueError(
            f"label value {labels.data.max()} out of range for {num_classes} classes"
        )
    onehot = (labels.data[:, None, :, :] ==
              np.arange(num_classes, dtype=np.int32)[None, :, None, None])
    mask = Tensor(onehot.astype(np.float32))
    return engine.resize_nearest(mask, target_h, target_w)


def sd_forward(d: SemanticDiscriminatorNet, image: Tensor, mask: Tensor) -> Tensor:
    """Patch score map (batch, 1, h_k, w_k); each location's score comes
    from the trunk channel of the class occupying it."""
    scores = d.trunk_forward(image)
    if mask.shape != scores.shape:
        raise ShapeError(
            f"mask shape {mask.shape} does not match trunk output {scores.shape}"
        )
    return engine.sum_channels(engine.mul(scores, mask))


# ---------------------------------------------------------------------------
# parameter container
#
# Layout: header = magic "SGC1" | version u32 | record count u32 | crc32 u32
# (crc of everything after the header); each record = name length u32 |
# name utf-8 | shape 4 x u32 | data float32, all little-endian.

_MAGIC = b"SGC1"
_VERSION = 1
_HEADER = struct.Struct("<4sII I")


def save_records(path, records: dict) -> None:
    """Write named 4-D float32 arrays; bitwise round-trip guaranteed."""
    payload = bytearray()
    for name, array in records.items():
        arr = np.ascontiguousarray(array, dtype="<f4")
        if arr.ndim != 4:
            raise ValueError(f"record {name!r} must be 4-D, got shape {arr.shape}")
        encoded = name.encode("utf-8")
        payload += struct.pack("<I", len(encoded))
        payload += encoded
        payload += struct.pack("<4I", *arr.shape)
        payload += arr.tobytes()
    header = _HEADER.pack(_MAGIC, _VERSION, len(records), zlib.crc32(bytes(payload)))
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(bytes(payload))


def load_records(path) -> dict:
    """Read a container back into an ordered name -> float32 array dict."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, count, crc = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CheckpointError(f"{path}: not a parameter container")
    if version != _VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {_VERSION}")
    payload = blob[_HEADER.size:]
    if zlib.crc32(payload) != crc:
        raise CheckpointError(f"{path}: checksum mismatch (corrupt or truncated)")
    records: dict[str, np.ndarray] = {}
    offset = 0
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<I", payload, offset)
            offset += 4
            name = payload[offset:offset + name_len].decode("utf-8")
            offset += name_len
            shape = struct.unpack_from("<4I", payload, offset)
            offset += 16
            n_bytes = int(np.prod(shape)) * 4
            data = np.frombuffer(payload, dtype="<f4", count=int(np.prod(shape)),
                                 offset=offset).reshape(shape).copy()
            offset += n_bytes
        except (struct.error, ValueError) as exc:
            raise CheckpointError(f"{path}: malformed record: {exc}") from exc
        records[name] = data
    if offset != len(payload):
        raise CheckpointError(f"{path}: trailing bytes after last record")
    return records


def state_dict(net) -> dict:
    return {name: tensor.data for name, tensor in net.parameters().items()}


def load_state_dict(net, arrays: dict) -> None:
    params = net.parameters()
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise CheckpointError(
            f"parameter names do not match net: missing={sorted(missing)}, "
            f"unexpected={sorted(extra)}"
        )
    for name, tensor in params.items():
        arr = np.ascontiguousarray(arrays[name], dtype=np.float32)
        if arr.shape != tensor.shape:
            raise CheckpointError(
                f"parameter {name!r}: shape {arr.shape} != expected {tensor.shape}"
            )
        tensor.data = arr
