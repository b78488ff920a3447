"""The two segmentation networks.

GatedResidualUNet3d (lung parenchyma): four stride-2 dilated residual encoder
stages, a residual bottleneck, and four decoder stages that upsample, gate a
skip feature with an additive attention gate, concatenate, and refine with a
residual block. The nominal 23x300x300 geometry is not divisible by 2^4, so
the input is zero-padded to the next multiple of 16 per axis and the head
center-crops back before two final mixing convs and the sigmoid.

WindowAttentionUNet3d (nodule): a plain UNet over 64^3 blocks, double-conv
encoder stages with 2^3 max pooling, windowed self-attention on the
bottleneck, transposed-conv upsampling with skip concatenation, and a 1x1x1
sigmoid head.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Var
from .blocks import (AttentionGate3d, BatchNorm3d, Conv3d, DoubleConvBlock3d,
                     ResidualBlock3d, TConv3d, WindowAttention3d)
from .ops import ConvSpec
from .tensor import Tensor5

DOWN_FACTOR = 16  # four stride-2 stages

# The last logit layer starts with a negative bias so initial predictions sit
# near the background prior instead of 0.5.  Segmentation foregrounds are
# sparse, and with a mean-reduced cross entropy a fresh net otherwise spends
# its first epochs pushing the vast background toward zero.
HEAD_BIAS_INIT = -3.0


@dataclass
class NetworkConfig:
    """Widths and geometry shared by both network builders.

    stage_channels are the four encoder widths; the bottleneck doubles the
    last. attn_window and dropout_rate only affect the nodule net.
    """

    stage_channels: list
    input_geometry: tuple
    attn_window: tuple = (2, 2, 2)
    dropout_rate: float = 0.2
    output_channels: int = 1

    def __post_init__(self):
        self.stage_channels = [int(c) for c in self.stage_channels]
        if len(self.stage_channels) != 4 or min(self.stage_channels) < 1:
            raise ValueError("stage_channels must be 4 positive ints")
        self.input_geometry = tuple(int(v) for v in self.input_geometry)
        if len(self.input_geometry) != 4:
            raise ValueError("input_geometry must be (C, D, H, W)")
        self.attn_window = tuple(int(w) for w in self.attn_window)
        if len(self.attn_window) != 3 or min(self.attn_window) < 1:
            raise ValueError("attn_window must be 3 positive ints")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.output_channels != 1:
            raise ValueError("networks produce a single probability channel")


def lung_default_config() -> NetworkConfig:
    return NetworkConfig(stage_channels=[32, 64, 128, 256],
                         input_geometry=(1, 23, 300, 300))


def nodule_default_config() -> NetworkConfig:
    return NetworkConfig(stage_channels=[16, 32, 64, 128],
                         input_geometry=(1, 64, 64, 64))


@dataclass
class ForwardTrace:
    """Stage activations kept for inspection: encoder outputs shallow to
    deep, the bottleneck, decoder outputs deep to shallow, and the four
    attention gate outputs in the same order as the decoders."""

    encoders: list = field(default_factory=list)
    bottleneck: Var = None
    decoders: list = field(default_factory=list)
    gates: list = field(default_factory=list)


def _pad_plan(spatial, multiple: int):
    """Symmetric zero-pad amounts taking each dim to the next multiple."""
    plan = []
    for x in spatial:
        target = -(-x // multiple) * multiple
        lo = (target - x) // 2
        plan.append((lo, target - x - lo))
    return tuple(plan)


class GatedResidualUNet3d:
    """Residual UNet with attention-gated skip connections."""

    def __init__(self, config: NetworkConfig, rng, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c_in = config.input_geometry[0]
        c1, c2, c3, c4 = config.stage_channels
        cb = 2 * c4

        self.enc1 = ResidualBlock3d("enc1", c_in, c1, 2, rng, dtype)
        self.enc2 = ResidualBlock3d("enc2", c1, c2, 2, rng, dtype)
        self.enc3 = ResidualBlock3d("enc3", c2, c3, 2, rng, dtype)
        self.enc4 = ResidualBlock3d("enc4", c3, c4, 2, rng, dtype)
        self.bottleneck = ResidualBlock3d("bottleneck", c4, cb, 1, rng, dtype)

        def up(name, ci, co):
            return TConv3d(name, ConvSpec(ci, co, kernel=(2, 2, 2),
                                          stride=(2, 2, 2)), rng, dtype)

        def mix(name, c):
            return Conv3d(name, ConvSpec(c, c, kernel=(3, 3, 3),
                                         padding=(1, 1, 1)), rng, dtype)

        # Decoder stage i upsamples to the resolution of tap_i and gates that
        # tap with the pre-upsample state. Taps run e3, e2, e1, padded input.
        tap_ch = (c3, c2, c1, c_in)
        gate_ch = (cb, c4, c3, c2)
        up_io = ((cb, c4), (c4, c3), (c3, c2), (c2, c1))
        self.ups = []
        self.mixes = []
        self.gates = []
        self.decs = []
        for i, ((ui, uo), tc, gc) in enumerate(zip(up_io, tap_ch, gate_ch)):
            stage = 4 - i
            self.ups.append(up(f"up{stage}", ui, uo))
            self.mixes.append(mix(f"mix{stage}", uo))
            self.gates.append(AttentionGate3d(f"gate{stage}", tc, gc, rng, dtype))
            self.decs.append(ResidualBlock3d(f"dec{stage}", tc + uo, uo, 1,
                                             rng, dtype))

        self.head = Conv3d("head", ConvSpec(c1, 1, kernel=(3, 3, 3),
                                            padding=(1, 1, 1)), rng, dtype)
        self.post1 = Conv3d("post1", ConvSpec(1, 1, kernel=(3, 3, 3),
                                              padding=(1, 1, 1)), rng, dtype)
        self.post2 = Conv3d("post2", ConvSpec(1, 1, kernel=(3, 3, 3),
                                              padding=(1, 1, 1)), rng, dtype)
        self.post2.b.data[...] = HEAD_BIAS_INIT

    def forward(self, x: Var, mode: str):
        """Returns (probability volume, ForwardTrace)."""
        c_in = self.config.input_geometry[0]
        if x.data.shape[1] != c_in:
            raise ValueError(f"input has {x.data.shape[1]} channels, "
                             f"network expects {c_in}")
        spatial = x.data.shape[2:]
        pads = _pad_plan(spatial, DOWN_FACTOR)
        padded = any(lo + hi for lo, hi in pads)
        xp = ag.pad(x, pads) if padded else x

        trace = ForwardTrace()
        e1 = self.enc1.forward(xp, mode)
        e2 = self.enc2.forward(e1, mode)
        e3 = self.enc3.forward(e2, mode)
        e4 = self.enc4.forward(e3, mode)
        trace.encoders = [e1, e2, e3, e4]
        b = self.bottleneck.forward(e4, mode)
        trace.bottleneck = b

        taps = [e3, e2, e1, xp]
        state = b
        for upl, mixl, gate, dec, tap in zip(self.ups, self.mixes, self.gates,
                                             self.decs, taps):
            d_i = mixl(upl(state))
            a_i = gate.forward(tap, state)
            trace.gates.append(a_i)
            state = dec.forward(ag.concat(a_i, d_i), mode)
            trace.decoders.append(state)

        h = self.head(state)
        if padded:
            h = ag.center_crop(h, spatial)
        h = self.post2(self.post1(h))
        return ag.sigmoid(h), trace

    def probability(self, x: Var, mode: str, rng=None) -> Var:
        return self.forward(x, mode)[0]

    def params(self):
        for block in (self.enc1, self.enc2, self.enc3, self.enc4,
                      self.bottleneck):
            yield from block.params()
        for upl, mixl, gate, dec in zip(self.ups, self.mixes, self.gates,
                                        self.decs):
            yield from upl.params()
            yield from mixl.params()
            yield from gate.params()
            yield from dec.params()
        yield from self.head.params()
        yield from self.post1.params()
        yield from self.post2.params()

    def batchnorms(self):
        for block in (self.enc1, self.enc2, self.enc3, self.enc4,
                      self.bottleneck):
            yield from block.batchnorms()
        for dec in self.decs:
            yield from dec.batchnorms()


class WindowAttentionUNet3d:
    """Plain UNet with windowed self-attention on the bottleneck."""

    def __init__(self, config: NetworkConfig, rng, dtype=np.float32):
        self.config = config
        self.dtype = dtype
        c_in, d, h, w = config.input_geometry
        if d % DOWN_FACTOR or h % DOWN_FACTOR or w % DOWN_FACTOR:
            raise ValueError(f"input spatial {(d, h, w)} must be divisible "
                             f"by {DOWN_FACTOR}")
        bd, bh, bw = d // DOWN_FACTOR, h // DOWN_FACTOR, w // DOWN_FACTOR
        wd, wh, ww = config.attn_window
        if bd % wd or bh % wh or bw % ww:
            raise ValueError(f"bottleneck spatial {(bd, bh, bw)} not divisible "
                             f"by attention window {config.attn_window}")
        n1, n2, n3, n4 = config.stage_channels
        nb = 2 * n4
        rate = config.dropout_rate

        self.enc1 = DoubleConvBlock3d("enc1", c_in, n1, rate, rng, dtype)
        self.enc2 = DoubleConvBlock3d("enc2", n1, n2, rate, rng, dtype)
        self.enc3 = DoubleConvBlock3d("enc3", n2, n3, rate, rng, dtype)
        self.enc4 = DoubleConvBlock3d("enc4", n3, n4, rate, rng, dtype)
        self.bottleneck = DoubleConvBlock3d("bottleneck", n4, nb, rate, rng,
                                            dtype)
        self.attn = WindowAttention3d("attn", nb, config.attn_window, rng,
                                      dtype)

        def up(name, ci, co):
            return TConv3d(name, ConvSpec(ci, co, kernel=(2, 2, 2),
                                          stride=(2, 2, 2)), rng, dtype)

        self.ups = [up("up4", nb, n4), up("up3", n4, n3),
                    up("up2", n3, n2), up("up1", n2, n1)]
        self.decs = [
            DoubleConvBlock3d("dec4", 2 * n4, n4, rate, rng, dtype),
            DoubleConvBlock3d("dec3", 2 * n3, n3, rate, rng, dtype),
            DoubleConvBlock3d("dec2", 2 * n2, n2, rate, rng, dtype),
            DoubleConvBlock3d("dec1", 2 * n1, n1, rate, rng, dtype),
        ]
        self.head = Conv3d("head", ConvSpec(n1, 1, kernel=(1, 1, 1)), rng,
                           dtype)
        self.head.b.data[...] = HEAD_BIAS_INIT

    def forward(self, x: Var, mode: str, rng=None) -> Var:
        spatial = x.data.shape[2:]
        if any(s % DOWN_FACTOR for s in spatial):
            raise ValueError(f"input spatial {tuple(spatial)} must be "
                             f"divisible by {DOWN_FACTOR}")
        skips = []
        h = x
        for enc in (self.enc1, self.enc2, self.enc3, self.enc4):
            s = enc.forward(h, mode, rng)
            skips.append(s)
            h = ag.maxpool(s, (2, 2, 2))
        h = self.bottleneck.forward(h, mode, rng)
        h = self.attn.forward(h)
        for upl, dec, skip in zip(self.ups, self.decs, reversed(skips)):
            h = dec.forward(ag.concat(skip, upl(h)), mode, rng)
        return ag.sigmoid(self.head(h))

    def probability(self, x: Var, mode: str, rng=None) -> Var:
        return self.forward(x, mode, rng)

    def params(self):
        for block in (self.enc1, self.enc2, self.enc3, self.enc4,
                      self.bottleneck):
            yield from block.params()
        yield from self.attn.params()
        for upl, dec in zip(self.ups, self.decs):
            yield from upl.params()
            yield from dec.params()
        yield from self.head.params()

    def batchnorms(self):
        for block in (self.enc1, self.enc2, self.enc3, self.enc4,
                      self.bottleneck):
            yield from block.batchnorms()
        for dec in self.decs:
            yield from dec.batchnorms()


def build_network(kind: str, config: NetworkConfig, seed: int,
                  dtype=np.float32):
    """Construct a network with deterministic initialization."""
    rng = np.random.default_rng([int(seed), 0xB10C])
    if kind == "lung":
        return GatedResidualUNet3d(config, rng, dtype)
    if kind == "nodule":
        return WindowAttentionUNet3d(config, rng, dtype)
    raise ValueError(f"unknown network kind {kind!r}")


def predict_volume(net, volume, threshold: float = 0.5) -> Tensor5:
    """Threshold the probability forward pass into a binary mask."""
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold {threshold} outside (0, 1)")
    arr = volume.data if isinstance(volume, Tensor5) else np.asarray(volume)
    with ag.no_grad():
        prob = net.probability(Var(arr), "eval")
    mask = (prob.data >= threshold).astype(arr.dtype)
    return Tensor5(mask)
