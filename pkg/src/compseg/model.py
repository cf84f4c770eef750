"""Small U-Net producing per-pixel class logits, plus a binary checkpoint container.

Checkpoint layout (all integers little-endian)::

    offset  size  field
    0       8     magic b"CSEGCKPT"
    8       4     uint32 format version (currently 1)
    12      4     uint32 length H of the JSON header
    16      H     UTF-8 JSON: {"config": {ModelConfig fields}, "extra": {...}}
    16+H    4     uint32 tensor count T
    then T records, in ``state_dict`` order:
            2     uint16 name length L
            L     UTF-8 parameter name
            1     uint8 dtype code (0 = float32, 1 = float64, 2 = int64)
            1     uint8 ndim D
            4*D   uint32 dims
            ...   raw little-endian tensor data, C order

Tensors are written exactly as stored, so a save/load round trip is bit-exact.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .types import CompsegError

CHECKPOINT_MAGIC = b"CSEGCKPT"
CHECKPOINT_VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.float64, 2: torch.int64}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_NP_DTYPES = {0: "<f4", 1: "<f8", 2: "<i8"}


class IndivisibleSpatialSize(CompsegError):
    pass


class NonFiniteLogits(CompsegError):
    pass


class CheckpointError(CompsegError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 1
    num_classes: int = 3
    depth: int = 2
    base_width: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 4:
            raise ValueError("base_width must be >= 4")
        if self.in_channels < 1 or self.num_classes < 2:
            raise ValueError("need in_channels >= 1 and num_classes >= 2")


def _init_conv(conv: nn.Conv2d, gen: torch.Generator) -> None:
    # fan-in scaled uniform, drawn from the model's own generator
    fan_in = conv.in_channels * conv.kernel_size[0] * conv.kernel_size[1]
    bound = (6.0 / fan_in) ** 0.5
    with torch.no_grad():
        conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
        conv.bias.zero_()


class DoubleConv(nn.Sequential):
    def __init__(self, in_c: int, out_c: int):
        super().__init__(
            nn.Conv2d(in_c, out_c, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_c, out_c, 3, padding=1),
            nn.ReLU(),
        )


class UNet(nn.Module):
    """Encoder-decoder with skip connections.

    Each of the ``depth`` levels halves the resolution with max-pooling; the
    decoder upsamples with nearest neighbour and concatenates the matching
    encoder features. The module works on NCHW tensors and returns NCHW logits;
    use :func:`forward` for the channels-last contract.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        widths = [config.base_width * 2 ** i for i in range(config.depth + 1)]
        self.down = nn.ModuleList()
        in_c = config.in_channels
        for w in widths:
            self.down.append(DoubleConv(in_c, w))
            in_c = w
        self.up = nn.ModuleList(
            DoubleConv(widths[i + 1] + widths[i], widths[i]) for i in reversed(range(config.depth))
        )
        self.head = nn.Conv2d(widths[0], config.num_classes, 1)

        gen = torch.Generator().manual_seed(config.seed)
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                _init_conv(m, gen)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        d = self.config.depth
        if x.shape[-1] % 2 ** d or x.shape[-2] % 2 ** d:
            raise IndivisibleSpatialSize(
                f"spatial size {tuple(x.shape[-2:])} not divisible by 2**{d} = {2 ** d}")
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([skips.pop(), x], dim=1))
        return self.head(x)

    def parameter_count(self) -> int:
        return sum(p.numel() for p in self.parameters())


def build_model(config: ModelConfig, dtype: torch.dtype = torch.float32) -> UNet:
    return UNet(config).to(dtype)


def forward(model: UNet, batch) -> torch.Tensor:
    """Run ``model`` on an ``N x P x P x C`` batch and return ``N x P x P x k`` logits."""
    x = torch.as_tensor(batch)
    dtype = next(model.parameters()).dtype
    x = x.to(dtype).permute(0, 3, 1, 2)
    return model(x).permute(0, 2, 3, 1)


def softmax_map(logits) -> torch.Tensor:
    logits = torch.as_tensor(logits)
    if not torch.isfinite(logits).all():
        raise NonFiniteLogits("logits contain NaN or infinite values")
    return torch.softmax(logits, dim=-1)


@torch.no_grad()
def predict_labels(model: UNet, batch, batch_size: int = 256) -> np.ndarray:
    """Arg-max class map for an ``N x P x P x C`` array."""
    model.eval()
    out = []
    for start in range(0, len(batch), batch_size):
        logits = forward(model, batch[start:start + batch_size])
        out.append(logits.argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros((0,) + tuple(batch.shape[1:3]), dtype=np.int64)


def save_checkpoint(model: UNet, path, extra: dict | None = None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, extra))


def checkpoint_bytes(model: UNet, extra: dict | None = None) -> bytes:
    buf = io.BytesIO()
    header = json.dumps({"config": asdict(model.config), "extra": extra or {}}, sort_keys=True).encode()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
    buf.write(header)
    state = model.state_dict()
    buf.write(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        raw_name = name.encode()
        code = _DTYPE_CODES[tensor.dtype]
        buf.write(struct.pack("<H", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<BB", code, tensor.dim()))
        buf.write(struct.pack(f"<{tensor.dim()}I", *tensor.shape))
        buf.write(tensor.detach().contiguous().numpy().astype(_NP_DTYPES[code], copy=False).tobytes())
    return buf.getvalue()


def load_checkpoint(path) -> tuple[UNet, dict]:
    """Rebuild a model from a checkpoint file; returns ``(model, extra)``."""
    data = Path(path).read_bytes()
    try:
        return _parse_checkpoint(data, path)
    except (struct.error, ValueError, KeyError, RuntimeError, UnicodeDecodeError) as err:
        raise CheckpointError(f"{path}: corrupt checkpoint ({err})") from err


def _parse_checkpoint(data: bytes, path) -> tuple[UNet, dict]:
    if data[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<II", data, 8)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(data[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos:pos + nlen].decode()
        pos += nlen
        code, ndim = struct.unpack_from("<BB", data, pos)
        pos += 2
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        dt = np.dtype(_NP_DTYPES[code])
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype=dt, count=n, offset=pos).reshape(shape)
        pos += n * dt.itemsize
        tensors[name] = torch.from_numpy(arr.copy())
    if pos != len(data):
        raise CheckpointError(f"{path}: {len(data) - pos} trailing bytes")
    model = UNet(ModelConfig(**header["config"]))
    dtypes = {t.dtype for k, t in tensors.items() if t.is_floating_point()}
    if dtypes:
        model = model.to(dtypes.pop())
    model.load_state_dict(tensors)
    return model, header.get("extra", {})
