"""A small encoder-decoder segmentation network with a multi-rate dilated bridge.

Layout for ``depth`` levels with widths ``w_l = base_width * 2**(l-1)``::

    encoder  l=1..depth : conv3x3+relu, conv3x3+relu  (kept as skip l), avgpool2
    bridge              : conv3x3+relu at every dilation rate, concat, conv1x1+relu
    decoder  l=depth..1 : upsample2, merge skip l, conv3x3+relu -> w_{l-1} (w_0 = w_1)
    head                : dropout, conv1x1 -> 1 logit channel
"""

from __future__ import annotations

import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import ndgrad as nd
from .errors import ConfigError, ParseError, ShapeError
from .ndgrad import Tensor

MAGIC = b"HSLB"
FORMAT_VERSION = 1


@dataclass(frozen=True)
class NetConfig:
    input_channels: int = 3
    base_width: int = 8
    depth: int = 3
    dilation_rates: tuple[int, ...] = (1, 2, 4)
    dropout_p: float = 0.5
    skip_mode: str = "concat"

    def __post_init__(self):
        object.__setattr__(self, "dilation_rates", tuple(int(r) for r in self.dilation_rates))
        if self.depth < 1 or self.base_width < 1 or self.input_channels < 1:
            raise ConfigError("depth, base_width and input_channels must all be >= 1")
        if not self.dilation_rates or min(self.dilation_rates) < 1:
            raise ConfigError(f"dilation_rates must be non-empty and >= 1, got {self.dilation_rates}")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError(f"dropout_p must be in [0, 1), got {self.dropout_p}")
        if self.skip_mode not in ("concat", "add"):
            raise ConfigError(f"skip_mode must be 'concat' or 'add', got {self.skip_mode!r}")

    def width(self, level: int) -> int:
        return self.base_width * 2 ** (max(level, 1) - 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dilation_rates"] = list(self.dilation_rates)
        return d


@dataclass
class ModelParams:
    """Named parameter tensors in a fixed order."""

    tensors: dict[str, Tensor] = field(default_factory=dict)

    def names(self) -> list[str]:
        return list(self.tensors)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.items())

    def __len__(self) -> int:
        return len(self.tensors)

    def count(self) -> int:
        return sum(t.values.size for t in self.tensors.values())

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.values for k, t in self.tensors.items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "ModelParams":
        return cls({k: Tensor(v, requires_grad=True) for k, v in arrays.items()})

    def copy(self) -> "ModelParams":
        return ModelParams.from_arrays(self.arrays())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.zero_grad()

    def equal(self, other: "ModelParams") -> bool:
        return self.names() == other.names() and all(
            np.array_equal(self[n].values, other[n].values) for n in self.names()
        )


def layer_specs(cfg: NetConfig) -> list[tuple[str, int, int, int]]:
    """``(name, in_channels, out_channels, kernel_size)`` for every conv layer, in parameter order."""
    specs = []
    cin = cfg.input_channels
    for lvl in range(1, cfg.depth + 1):
        w = cfg.width(lvl)
        specs.append((f"enc{lvl}.conv1", cin, w, 3))
        specs.append((f"enc{lvl}.conv2", w, w, 3))
        cin = w
    wb = cfg.width(cfg.depth)
    for rate in cfg.dilation_rates:
        specs.append((f"bridge.rate{rate}", wb, wb, 3))
    specs.append(("bridge.fuse", wb * len(cfg.dilation_rates), wb, 1))
    cin = wb
    for lvl in range(cfg.depth, 0, -1):
        skip = cfg.width(lvl)
        merged = cin + skip if cfg.skip_mode == "concat" else skip
        out = cfg.width(lvl - 1)
        specs.append((f"dec{lvl}.conv", merged, out, 3))
        cin = out
    specs.append(("head.conv", cin, 1, 1))
    return specs


def parameter_count(cfg: NetConfig) -> int:
    return sum(cout * cin * k * k + cout for _, cin, cout, k in layer_specs(cfg))


def build(cfg: NetConfig, seed: int) -> ModelParams:
    """He-uniform kernels (bound ``sqrt(6 / fan_in)``), zero biases."""
    if len(set(cfg.dilation_rates)) != len(cfg.dilation_rates):
        raise ConfigError(f"dilation rates must be distinct, got {cfg.dilation_rates}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, cin, cout, k in layer_specs(cfg):
        bound = np.sqrt(6.0 / (cin * k * k))
        tensors[f"{name}.weight"] = Tensor(rng.uniform(-bound, bound, (cout, cin, k, k)), requires_grad=True)
        tensors[f"{name}.bias"] = Tensor(np.zeros(cout), requires_grad=True)
    return ModelParams(tensors)


def _conv(params: ModelParams, name: str, x: Tensor, dilation: int = 1) -> Tensor:
    return nd.conv2d(x, params[f"{name}.weight"], params[f"{name}.bias"], dilation=dilation, padding="same")


def forward(
    params: ModelParams,
    cfg: NetConfig,
    image: Tensor,
    training: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Logits ``[N, 1, H, W]`` for an image batch ``[N, C, H, W]`` (no sigmoid applied)."""
    if image.ndim != 4 or image.shape[1] != cfg.input_channels:
        raise ShapeError(f"expected input [N,{cfg.input_channels},H,W], got {image.shape}")
    h, w = image.shape[2:]
    step = 2**cfg.depth
    if h % step or w % step:
        raise ShapeError(f"spatial size {h}x{w} is not divisible by 2**depth = {step}")

    x = image
    skips = []
    for lvl in range(1, cfg.depth + 1):
        x = nd.relu(_conv(params, f"enc{lvl}.conv1", x))
        x = nd.relu(_conv(params, f"enc{lvl}.conv2", x))
        skips.append(x)
        x = nd.avgpool2(x)

    branches = [nd.relu(_conv(params, f"bridge.rate{r}", x, dilation=r)) for r in cfg.dilation_rates]
    merged = branches[0]
    for b in branches[1:]:
        merged = nd.concat_channels(merged, b)
    x = nd.relu(_conv(params, "bridge.fuse", merged))

    for lvl in range(cfg.depth, 0, -1):
        x = nd.upsample_nearest2(x)
        skip = skips[lvl - 1]
        x = nd.concat_channels(x, skip) if cfg.skip_mode == "concat" else x + skip
        x = nd.relu(_conv(params, f"dec{lvl}.conv", x))

    x = nd.dropout(x, cfg.dropout_p, training, rng)
    return _conv(params, "head.conv", x)


# ----------------------------------------------------------------- checkpoint


def save_params(params: ModelParams, path: str | Path) -> None:
    """Binary layout: ``HSLB``, u16 version, u32 count, then per tensor a u16-prefixed
    UTF-8 name, u8 rank, u32 dims and little-endian f32 values."""
    out = bytearray(MAGIC)
    out += struct.pack("<HI", FORMAT_VERSION, len(params))
    for name, t in params:
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", t.ndim)
        out += struct.pack(f"<{t.ndim}I", *t.shape)
        out += np.ascontiguousarray(t.values, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(out))


def load_params(path: str | Path) -> ModelParams:
    data = Path(path).read_bytes()
    pos = 0

    def read(fmt: str):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(data):
            raise ParseError("truncated checkpoint", pos)
        vals = struct.unpack_from(fmt, data, pos)
        pos += size
        return vals

    if data[:4] != MAGIC:
        raise ParseError("bad checkpoint magic", 0)
    pos = 4
    version, count = read("<HI")
    if version != FORMAT_VERSION:
        raise ParseError(f"unsupported checkpoint version {version}", 4)
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = read("<H")
        if pos + nlen > len(data):
            raise ParseError("truncated parameter name", pos)
        name = data[pos : pos + nlen].decode("utf-8")
        pos += nlen
        (rank,) = read("<B")
        dims = read(f"<{rank}I")
        n = int(np.prod(dims)) if rank else 1
        if pos + 4 * n > len(data):
            raise ParseError(f"truncated values for {name}", pos)
        arrays[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(dims).astype(np.float32)
        pos += 4 * n
    if pos != len(data):
        raise ParseError("trailing bytes after last parameter", pos)
    return ModelParams({k: Tensor(v, requires_grad=True, dtype=np.float32) for k, v in arrays.items()})
