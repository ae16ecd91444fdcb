"""Small configurable encoder-decoder segmentation network.

UNet-style: per encoder level (conv3x3 + relu) x2 then 2x2 max pooling;
the decoder mirrors with nearest-neighbor upsampling and skip concats;
a final 1x1 convolution plus sigmoid yields the three output channels
(artery, vein, vessel) at input resolution.  The pre-decoder bottleneck
is returned for the contrastive regularizer.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .losses import PredictionTriple

CHECKPOINT_MAGIC = b"VCKP"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    depth: int = 3
    base_channels: int = 8
    in_channels: int = 3
    out_channels: int = 3

    def __post_init__(self):
        if self.depth < 2:
            raise ValueError("depth must be >= 2")

    def level_channels(self, level: int) -> int:
        return self.base_channels * (2 ** level)


def _kaiming_uniform(rng, shape, fan_in, dtype):
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class VesselNet:
    """Parameter container plus the forward pass."""

    def __init__(self, cfg: NetConfig, seed: int = 0, dtype=np.float64):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        self.params: dict[str, Tensor] = {}
        c_in = cfg.in_channels
        for lvl in range(cfg.depth):
            c_out = cfg.level_channels(lvl)
            self._add_conv(rng, f"enc{lvl}a", c_in, c_out, 3)
            self._add_conv(rng, f"enc{lvl}b", c_out, c_out, 3)
            c_in = c_out
        for lvl in range(cfg.depth - 2, -1, -1):
            c_skip = cfg.level_channels(lvl)
            c_up = cfg.level_channels(lvl + 1)
            self._add_conv(rng, f"dec{lvl}a", c_up + c_skip, c_skip, 3)
            self._add_conv(rng, f"dec{lvl}b", c_skip, c_skip, 3)
        self._add_conv(rng, "head", cfg.base_channels, cfg.out_channels, 1)

    def _add_conv(self, rng, name, c_in, c_out, k):
        fan_in = c_in * k * k
        w = _kaiming_uniform(rng, (c_out, c_in, k, k), fan_in, self.dtype)
        self.params[f"{name}.w"] = Tensor(w, requires_grad=True)
        self.params[f"{name}.b"] = Tensor(np.zeros(c_out, dtype=self.dtype),
                                          requires_grad=True)

    def parameter_count(self) -> int:
        return sum(p.data.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def _conv(self, name, x, padding):
        return ad.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"],
                         stride=1, padding=padding)

    def forward(self, x: Tensor):
        """x[1, C_in, H, W] -> (PredictionTriple of [H, W] maps,
        bottleneck [c_L, h_L, w_L])."""
        h, w = x.data.shape[-2:]
        div = 2 ** (self.cfg.depth - 1)
        if h % div or w % div:
            raise ValueError(f"spatial dims must be divisible by {div}")
        skips = []
        t = x
        for lvl in range(self.cfg.depth):
            t = ad.relu(self._conv(f"enc{lvl}a", t, 1))
            t = ad.relu(self._conv(f"enc{lvl}b", t, 1))
            if lvl < self.cfg.depth - 1:
                skips.append(t)
                t = ad.maxpool2x(t)
        bottleneck = ad.reshape(t, t.data.shape[1:])
        for lvl in range(self.cfg.depth - 2, -1, -1):
            t = ad.upsample2x_nearest(t)
            t = ad.concat_channels(t, skips[lvl])
            t = ad.relu(self._conv(f"dec{lvl}a", t, 1))
            t = ad.relu(self._conv(f"dec{lvl}b", t, 1))
        y = ad.sigmoid(self._conv("head", t, 0))
        pred = PredictionTriple(
            y_a=ad.select_channel(y, 0),
            y_v=ad.select_channel(y, 1),
            y_bv=ad.select_channel(y, 2),
        )
        return pred, bottleneck


def expected_parameter_count(cfg: NetConfig) -> int:
    """Closed-form parameter count for a NetConfig."""
    total = 0

    def conv(c_in, c_out, k):
        return c_out * c_in * k * k + c_out

    c_in = cfg.in_channels
    for lvl in range(cfg.depth):
        c = cfg.level_channels(lvl)
        total += conv(c_in, c, 3) + conv(c, c, 3)
        c_in = c
    for lvl in range(cfg.depth - 2, -1, -1):
        c_skip = cfg.level_channels(lvl)
        total += conv(cfg.level_channels(lvl + 1) + c_skip, c_skip, 3)
        total += conv(c_skip, c_skip, 3)
    total += conv(cfg.base_channels, cfg.out_channels, 1)
    return total


def save_checkpoint(path, net: VesselNet) -> None:
    """Bit-exact parameter dump with embedded config and format version."""
    names = sorted(net.params)
    header = {
        "net_config": asdict(net.cfg),
        "dtype": net.dtype.name,
        "params": [{"name": n, "shape": list(net.params[n].data.shape)}
                   for n in names],
    }
    blob = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        f.write(blob)
        for n in names:
            f.write(np.ascontiguousarray(net.params[n].data).tobytes())


def load_checkpoint(path) -> VesselNet:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        try:
            header = json.loads(f.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise CheckpointError(f"corrupt header: {e}") from e
        cfg = NetConfig(**header["net_config"])
        dtype = np.dtype(header["dtype"])
        net = VesselNet(cfg, dtype=dtype)
        for item in header["params"]:
            shape = tuple(item["shape"])
            n = int(np.prod(shape)) if shape else 1
            raw = f.read(n * dtype.itemsize)
            if len(raw) != n * dtype.itemsize:
                raise CheckpointError("truncated parameter payload")
            net.params[item["name"]] = Tensor(
                np.frombuffer(raw, dtype=dtype).reshape(shape).copy(),
                requires_grad=True)
    return net
