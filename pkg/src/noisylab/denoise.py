"""Denoiser networks: a 9-layer residual CNN and a small U-Net.

Both predict the noise and subtract it from the input, so a zero-weight
network is exactly the identity map and output shape always matches input
shape.  Convolutions are 3x3 with same-padding; weights use orthogonal
initialization, biases start at zero.  No normalization layers: desk-scale
batches are small and plain conv+relu keeps gradient checks exact.
"""

from __future__ import annotations

import numpy as np

from . import engine as eng
from .engine import Tensor, orthogonal_init
from .errors import ShapeError


class ConvLayer:
    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator,
                 kernel: int = 3, stride: int = 1, gain: float = 1.0, dtype=np.float32):
        self.w = orthogonal_init((c_out, c_in, kernel, kernel), rng, dtype)
        if gain != 1.0:
            # relu halves signal energy; the sqrt(2) gain keeps activations
            # from dying through deep narrow stacks
            self.w.data = self.w.data * dtype(gain)
        self.b = Tensor(np.zeros(c_out), requires_grad=True, dtype=dtype)
        self.stride = stride

    def __call__(self, x: Tensor) -> Tensor:
        return eng.conv2d(x, self.w, self.b, stride=self.stride, padding="same")

    def parameters(self):
        return {"w": self.w, "b": self.b}


def _collect(named_layers) -> dict[str, Tensor]:
    out = {}
    for name, layer in named_layers:
        for pname, p in layer.parameters().items():
            out[f"{name}/{pname}"] = p
    return out


class DnCnn9:
    """conv+relu, 7x(conv+relu), conv -> predicted noise, subtracted out."""

    kind = "dncnn9"

    def __init__(self, channels: int = 4, width: int = 64,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.width = width
        relu_gain = float(np.sqrt(2.0))
        self.convs = [ConvLayer(channels, width, rng, gain=relu_gain, dtype=dtype)]
        self.convs += [ConvLayer(width, width, rng, gain=relu_gain, dtype=dtype)
                       for _ in range(7)]
        self.convs.append(ConvLayer(width, channels, rng, dtype=dtype))

    def __call__(self, noisy: Tensor) -> Tensor:
        x = eng.as_tensor(noisy)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N,{self.channels},H,W), got {x.shape}")
        h = self.convs[0](x).relu()
        for conv in self.convs[1:-1]:
            h = conv(h).relu()
        return x - self.convs[-1](h)

    def parameters(self):
        return _collect((f"conv{i}", c) for i, c in enumerate(self.convs))

    def arch_descriptor(self) -> str:
        return f"dncnn9;channels={self.channels};width={self.width}"


class UNetSmall:
    """Two stride-2 stages down, bottleneck, two up stages with skip concat."""

    kind = "unet"

    def __init__(self, channels: int = 4, width: int = 32,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        rng = rng or np.random.default_rng(0)
        self.channels = channels
        self.width = width
        w = width
        g = float(np.sqrt(2.0))
        self.enc0 = ConvLayer(channels, w, rng, gain=g, dtype=dtype)
        self.down1 = ConvLayer(w, 2 * w, rng, stride=2, gain=g, dtype=dtype)
        self.down2 = ConvLayer(2 * w, 4 * w, rng, stride=2, gain=g, dtype=dtype)
        self.mid = ConvLayer(4 * w, 4 * w, rng, gain=g, dtype=dtype)
        self.up1 = ConvLayer(4 * w, 2 * w, rng, gain=g, dtype=dtype)
        self.fuse1 = ConvLayer(4 * w, 2 * w, rng, gain=g, dtype=dtype)
        self.up2 = ConvLayer(2 * w, w, rng, gain=g, dtype=dtype)
        self.fuse2 = ConvLayer(2 * w, w, rng, gain=g, dtype=dtype)
        self.out = ConvLayer(w, channels, rng, dtype=dtype)

    def __call__(self, noisy: Tensor) -> Tensor:
        x = eng.as_tensor(noisy)
        if x.ndim != 4 or x.shape[1] != self.channels:
            raise ShapeError(f"expected (N,{self.channels},H,W), got {x.shape}")
        if x.shape[2] % 4 or x.shape[3] % 4 or x.shape[2] < 8 or x.shape[3] < 8:
            raise ShapeError(f"U-Net needs H,W >= 8 and divisible by 4, got {x.shape}")
        e0 = self.enc0(x).relu()
        e1 = self.down1(e0).relu()
        e2 = self.down2(e1).relu()
        m = self.mid(e2).relu()
        u1 = self.up1(eng.upsample2x(m)).relu()
        f1 = self.fuse1(eng.concat([u1, e1], axis=1)).relu()
        u2 = self.up2(eng.upsample2x(f1)).relu()
        f2 = self.fuse2(eng.concat([u2, e0], axis=1)).relu()
        return x - self.out(f2)

    def parameters(self):
        names = ["enc0", "down1", "down2", "mid", "up1", "fuse1", "up2", "fuse2", "out"]
        return _collect((n, getattr(self, n)) for n in names)

    def arch_descriptor(self) -> str:
        return f"unet;channels={self.channels};width={self.width}"


def build_denoiser(kind: str, channels: int, width: int,
                   rng: np.random.Generator | None = None, dtype=np.float32):
    if kind == "dncnn9":
        return DnCnn9(channels, width, rng, dtype)
    if kind == "unet":
        return UNetSmall(channels, width, rng, dtype)
    raise ValueError(f"unknown denoiser kind {kind!r}")


def denoiser_from_descriptor(desc: str, rng: np.random.Generator | None = None,
                             dtype=np.float32):
    head, _, rest = desc.partition(";")
    fields = dict(kv.split("=", 1) for kv in rest.split(";") if kv)
    return build_denoiser(head, int(fields["channels"]), int(fields["width"]), rng, dtype)
