"""Composite building blocks: dilated residual block, additive attention
gate, windowed self-attention, and the plain double-conv block.

Each block owns its parameters as autograd Vars and exposes forward methods
taking and returning Vars. Parameter names are hierarchical dotted strings so
checkpoints can address every tensor individually.

Initialization: fan-in scaled normal weights (gain 2 for the ReLU paths),
zero biases, unit batchnorm gain, zero batchnorm offset, zero attention
residual scale.
"""
from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Var
from .ops import BatchNormState, ConvSpec


def conv_weight(rng, c_out: int, c_in: int, kernel, dtype) -> np.ndarray:
    """Fan-in scaled normal init for a conv weight (C_out, C_in, kd, kh, kw)."""
    kd, kh, kw = kernel
    fan_in = c_in * kd * kh * kw
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_out, c_in, kd, kh, kw)) * std).astype(dtype)


def tconv_weight(rng, c_in: int, c_out: int, kernel, dtype) -> np.ndarray:
    """Same scheme for a transposed-conv weight (C_in, C_out, kd, kh, kw)."""
    kd, kh, kw = kernel
    fan_in = c_in * kd * kh * kw
    std = math.sqrt(2.0 / fan_in)
    return (rng.standard_normal((c_in, c_out, kd, kh, kw)) * std).astype(dtype)


class Conv3d:
    """A conv3d layer owning weight/bias Vars."""

    def __init__(self, name: str, spec: ConvSpec, rng, dtype=np.float32):
        self.name = name
        self.spec = spec
        self.w = Var(conv_weight(rng, spec.out_channels, spec.in_channels,
                                 spec.kernel, dtype), name=f"{name}.weight")
        self.b = Var(np.zeros(spec.out_channels, dtype=dtype),
                     name=f"{name}.bias")

    def __call__(self, x: Var) -> Var:
        return ag.conv(x, self.w, self.b, self.spec)

    def params(self):
        yield self.w
        yield self.b


class TConv3d:
    """A transposed conv3d layer owning weight/bias Vars."""

    def __init__(self, name: str, spec: ConvSpec, rng, dtype=np.float32):
        self.name = name
        self.spec = spec
        self.w = Var(tconv_weight(rng, spec.in_channels, spec.out_channels,
                                  spec.kernel, dtype), name=f"{name}.weight")
        self.b = Var(np.zeros(spec.out_channels, dtype=dtype),
                     name=f"{name}.bias")

    def __call__(self, x: Var) -> Var:
        return ag.tconv(x, self.w, self.b, self.spec)

    def params(self):
        yield self.w
        yield self.b


class BatchNorm3d:
    """Batchnorm layer: learnable gain/offset Vars plus running stats."""

    def __init__(self, name: str, channels: int, dtype=np.float32,
                 eps: float = 1e-5, momentum: float = 0.1):
        self.name = name
        self.gamma = Var(np.ones(channels, dtype=dtype), name=f"{name}.gamma")
        self.beta = Var(np.zeros(channels, dtype=dtype), name=f"{name}.beta")
        self.state = BatchNormState(
            gamma=self.gamma.data, beta=self.beta.data,
            running_mean=np.zeros(channels, dtype=dtype),
            running_var=np.ones(channels, dtype=dtype),
            eps=eps, momentum=momentum)

    def __call__(self, x: Var, mode: str) -> Var:
        return ag.batchnorm(x, self.gamma, self.beta, self.state, mode)

    def params(self):
        yield self.gamma
        yield self.beta


def _dilated3(c_in, c_out, stride=1):
    return ConvSpec(c_in, c_out, kernel=(3, 3, 3), stride=stride,
                    dilation=(2, 2, 2), padding=(2, 2, 2))


class ResidualBlock3d:
    """Two dilated 3x3x3 conv+BN layers with a ReLU between, added to a skip.

    The skip is the identity when shapes match, otherwise a strided 1x1x1
    projection. Output is ReLU(skip(x) + branch(x)).
    """

    def __init__(self, name: str, c_in: int, c_out: int, stride: int, rng,
                 dtype=np.float32):
        self.name = name
        self.conv1 = Conv3d(f"{name}.conv1", _dilated3(c_in, c_out, stride),
                            rng, dtype)
        self.bn1 = BatchNorm3d(f"{name}.bn1", c_out, dtype)
        self.conv2 = Conv3d(f"{name}.conv2", _dilated3(c_out, c_out, 1),
                            rng, dtype)
        self.bn2 = BatchNorm3d(f"{name}.bn2", c_out, dtype)
        if stride != 1 or c_in != c_out:
            self.skip = Conv3d(
                f"{name}.skip",
                ConvSpec(c_in, c_out, kernel=(1, 1, 1), stride=stride),
                rng, dtype)
        else:
            self.skip = None

    def forward(self, x: Var, mode: str) -> Var:
        f = self.bn1(self.conv1(x), mode)
        f = ag.relu(f)
        f = self.bn2(self.conv2(f), mode)
        s = self.skip(x) if self.skip is not None else x
        return ag.relu(ag.add(s, f))

    def params(self):
        yield from self.conv1.params()
        yield from self.bn1.params()
        yield from self.conv2.params()
        yield from self.bn2.params()
        if self.skip is not None:
            yield from self.skip.params()

    def batchnorms(self):
        yield self.bn1
        yield self.bn2


class AttentionGate3d:
    """Additive attention gate over an encoder feature and a coarser gating
    signal at half its spatial resolution.

    The gating path is projected, upsampled by a stride-2 transposed conv and
    added to the projected encoder feature; after a further mixing conv, a
    1-channel sigmoid mask scales a 1x1x1 transform of the encoder feature.
    """

    def __init__(self, name: str, c_x: int, c_g: int, rng, dtype=np.float32):
        self.name = name
        f = max(1, c_x // 2)
        self.enc_proj = Conv3d(f"{name}.enc_proj", _dilated3(c_x, f), rng, dtype)
        self.gate_proj = Conv3d(f"{name}.gate_proj", _dilated3(c_g, f), rng, dtype)
        self.gate_up = TConv3d(
            f"{name}.gate_up",
            ConvSpec(f, f, kernel=(2, 2, 2), stride=(2, 2, 2)), rng, dtype)
        self.mix = Conv3d(f"{name}.mix", _dilated3(f, f), rng, dtype)
        self.mask_head = Conv3d(f"{name}.mask_head", _dilated3(f, 1), rng, dtype)
        self.input_proj = Conv3d(
            f"{name}.input_proj", ConvSpec(c_x, c_x, kernel=(1, 1, 1)),
            rng, dtype)

    def forward(self, x_enc: Var, g_dec: Var) -> Var:
        xs = x_enc.data.shape[2:]
        gs = g_dec.data.shape[2:]
        if tuple(gs) != tuple(d // 2 for d in xs) or any(d % 2 for d in xs):
            raise ValueError(
                f"gating signal spatial {tuple(gs)} must be half of encoder "
                f"feature spatial {tuple(xs)}")
        a = ag.relu(ag.add(self.enc_proj(x_enc),
                           self.gate_up(self.gate_proj(g_dec))))
        j = ag.relu(self.mix(a))
        z0 = ag.sigmoid(self.mask_head(j))
        return ag.channel_scale(self.input_proj(x_enc), z0)

    def mask(self, x_enc: Var, g_dec: Var) -> np.ndarray:
        """The 1-channel gate mask, for inspection."""
        with ag.no_grad():
            a = ag.relu(ag.add(self.enc_proj(x_enc),
                               self.gate_up(self.gate_proj(g_dec))))
            j = ag.relu(self.mix(a))
            return ag.sigmoid(self.mask_head(j)).data

    def params(self):
        for layer in (self.enc_proj, self.gate_proj, self.gate_up, self.mix,
                      self.mask_head, self.input_proj):
            yield from layer.params()

    def batchnorms(self):
        return iter(())


class WindowAttention3d:
    """Single-head self-attention inside non-overlapping windows, added back
    to the input through a learnable scalar that starts at zero.

    Pipeline: 1x1x1 conv to 3C channels, split into q/k/v, partition into
    windows, per-window softmax(q k^T / sqrt(C)) v, merge windows, 1x1x1
    projection, then out = x + gamma * projected.
    """

    def __init__(self, name: str, channels: int, window, rng, dtype=np.float32):
        self.name = name
        self.channels = channels
        self.window = tuple(int(w) for w in window)
        self.qkv = Conv3d(f"{name}.qkv",
                          ConvSpec(channels, 3 * channels, kernel=(1, 1, 1)),
                          rng, dtype)
        self.proj = Conv3d(f"{name}.proj",
                           ConvSpec(channels, channels, kernel=(1, 1, 1)),
                           rng, dtype)
        self.gamma = Var(np.zeros((), dtype=dtype), name=f"{name}.gamma")

    def _attention(self, x: Var):
        c = self.channels
        spatial = x.data.shape[2:]
        t = self.qkv(x)
        q = ag.unfold(ag.slice_channels(t, 0, c), self.window)
        k = ag.unfold(ag.slice_channels(t, c, 2 * c), self.window)
        v = ag.unfold(ag.slice_channels(t, 2 * c, 3 * c), self.window)
        scores = ag.const_mul(ag.matmul_qk(q, k), 1.0 / math.sqrt(c))
        attn = ag.softmax_lastdim(scores)
        o = ag.fold(ag.matmul_av(attn, v), self.window, spatial)
        return attn, o

    def forward(self, x: Var) -> Var:
        attn, o = self._attention(x)
        return ag.add(x, ag.scale_by(self.proj(o), self.gamma))

    def attention_map(self, x: Var) -> np.ndarray:
        """Per-window attention weights (B, N, T, T), for inspection."""
        with ag.no_grad():
            attn, _ = self._attention(x)
        return attn.data

    def params(self):
        yield from self.qkv.params()
        yield from self.proj.params()
        yield self.gamma

    def batchnorms(self):
        return iter(())


class DoubleConvBlock3d:
    """conv-BN-ReLU-dropout twice, no skip connection."""

    def __init__(self, name: str, c_in: int, c_out: int, dropout_rate: float,
                 rng, dtype=np.float32):
        self.name = name
        self.dropout_rate = float(dropout_rate)
        plain = dict(kernel=(3, 3, 3), stride=(1, 1, 1), padding=(1, 1, 1))
        self.conv1 = Conv3d(f"{name}.conv1", ConvSpec(c_in, c_out, **plain),
                            rng, dtype)
        self.bn1 = BatchNorm3d(f"{name}.bn1", c_out, dtype)
        self.conv2 = Conv3d(f"{name}.conv2", ConvSpec(c_out, c_out, **plain),
                            rng, dtype)
        self.bn2 = BatchNorm3d(f"{name}.bn2", c_out, dtype)

    def forward(self, x: Var, mode: str, rng=None) -> Var:
        h = ag.relu(self.bn1(self.conv1(x), mode))
        h = ag.dropout(h, self.dropout_rate, mode, rng)
        h = ag.relu(self.bn2(self.conv2(h), mode))
        h = ag.dropout(h, self.dropout_rate, mode, rng)
        return h

    def params(self):
        yield from self.conv1.params()
        yield from self.bn1.params()
        yield from self.conv2.params()
        yield from self.bn2.params()

    def batchnorms(self):
        yield self.bn1
        yield self.bn2
