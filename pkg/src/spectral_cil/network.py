"""Backbone assembly for the 1-D spectral classifier.

The reference architecture is eight conv(+batchnorm+ReLU) blocks that take a
single-channel 128-band spectrum down to a flat feature vector, followed by
one fully connected feature layer and a classification head that grows as
classes arrive. `NetworkSpec.reference()` reproduces that layout; a width
factor scales every channel count for desk-sized runs without changing any
sequence length.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .layers import BatchNorm1d, Conv1d, Linear

REFERENCE_CHANNELS = (32, 64, 96, 128, 256, 512, 1024, 2048)
REFERENCE_STRIDES = (1, 1, 1, 2, 2, 2, 2, 2)
REFERENCE_FC_WIDTH = 256


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    padding: int = 0

    def __post_init__(self):
        if self.kind in ("conv1d", "linear") and (
                self.in_channels < 1 or self.out_channels < 1):
            raise ValueError(f"{self.kind} needs positive channel counts")

    def output_length(self, length):
        if self.kind != "conv1d":
            return length
        return ag.conv_output_length(length, self.kernel_size, self.stride,
                                     self.padding)


@dataclass(frozen=True)
class NetworkSpec:
    bands: int
    convs: tuple = ()
    fc_width: int = REFERENCE_FC_WIDTH

    @staticmethod
    def reference(bands=128, width_factor=1.0):
        convs = []
        c_in = 1
        for c_ref, stride in zip(REFERENCE_CHANNELS, REFERENCE_STRIDES):
            c_out = max(1, round(c_ref * width_factor))
            convs.append(LayerSpec("conv1d", c_in, c_out, kernel_size=4,
                                   stride=stride, padding=0))
            c_in = c_out
        fc = max(1, round(REFERENCE_FC_WIDTH * width_factor))
        return NetworkSpec(bands=bands, convs=tuple(convs), fc_width=fc)

    def conv_lengths(self):
        """Sequence length after each conv block; raises if any drops below 1."""
        lengths = []
        length = self.bands
        for spec in self.convs:
            length = spec.output_length(length)
            lengths.append(length)
        return lengths

    @property
    def flat_dim(self):
        return self.convs[-1].out_channels * self.conv_lengths()[-1]


class ConvBlock:
    """conv1d -> batchnorm -> ReLU, treated as one unit group."""

    def __init__(self, spec: LayerSpec, rng, dtype):
        self.spec = spec
        self.conv = Conv1d(spec.in_channels, spec.out_channels,
                           spec.kernel_size, spec.stride, spec.padding,
                           rng=rng, dtype=dtype)
        self.bn = BatchNorm1d(spec.out_channels, dtype=dtype)
        self.last_abs_act = None

    def forward(self, x, training, record_acts=False):
        out = ag.relu(self.bn.forward(self.conv.forward(x), training))
        if record_acts:
            self.last_abs_act = np.abs(out.data).mean(axis=(0, 2))
        return out

    def named_parameters(self, prefix=""):
        return (self.conv.named_parameters(prefix + "conv.")
                + self.bn.named_parameters(prefix + "bn."))

    def buffers(self, prefix=""):
        return self.bn.buffers(prefix + "bn.")

    def reinit_unit(self, unit, rng):
        self.conv.reinit_unit(unit, rng)
        self.bn.reset_unit(unit)


class FeatureLayer:
    """Flatten -> linear -> ReLU producing the backbone feature vector."""

    def __init__(self, flat_dim, width, rng, dtype):
        self.linear = Linear(flat_dim, width, rng=rng, dtype=dtype)
        self.width = width
        self.last_abs_act = None

    def forward(self, x, record_acts=False):
        flat = x.reshape(x.shape[0], -1)
        out = ag.relu(self.linear.forward(flat))
        if record_acts:
            self.last_abs_act = np.abs(out.data).mean(axis=0)
        return out

    def named_parameters(self, prefix=""):
        return self.linear.named_parameters(prefix + "linear.")

    def reinit_unit(self, unit, rng):
        self.linear.reinit_unit(unit, rng)


class Backbone:
    """Feature extractor: conv blocks plus the fully connected feature layer."""

    def __init__(self, spec: NetworkSpec, rng, dtype=np.float32):
        spec.conv_lengths()  # validates every extent up front
        self.spec = spec
        self.dtype = dtype
        self.blocks = [ConvBlock(s, rng, dtype) for s in spec.convs]
        self.fc = FeatureLayer(spec.flat_dim, spec.fc_width, rng, dtype)
        self.feature_dim = spec.fc_width

    def forward(self, x, training, record_acts=False):
        for block in self.blocks:
            x = block.forward(x, training, record_acts)
        return self.fc.forward(x, record_acts)

    def conv_part(self, x, training, upto=None, record_acts=False):
        for block in self.blocks[:upto]:
            x = block.forward(x, training, record_acts)
        return x

    def named_parameters(self, prefix=""):
        params = []
        for i, block in enumerate(self.blocks):
            params.extend(block.named_parameters(f"{prefix}conv{i}."))
        params.extend(self.fc.named_parameters(prefix + "fc."))
        return params

    def buffers(self, prefix=""):
        bufs = []
        for i, block in enumerate(self.blocks):
            bufs.extend(block.buffers(f"{prefix}conv{i}."))
        return bufs

    def set_frozen(self, frozen=True):
        for _, p in self.named_parameters():
            p.frozen = frozen


def build_backbone(spec: NetworkSpec, rng, dtype=np.float32) -> Backbone:
    return Backbone(spec, rng, dtype)


def make_head(feature_dim, n_classes, rng, dtype=np.float32) -> Linear:
    return Linear(feature_dim, n_classes, rng=rng, dtype=dtype)


def extend_head(head: Linear, n_new, rng) -> Linear:
    head.extend(n_new, rng)
    return head


def state_dict(named_params, named_buffers=()):
    """Copy parameter and buffer arrays into a plain name->array dict."""
    state = {name: p.data.copy() for name, p in named_params}
    state.update({name: b.copy() for name, b in named_buffers})
    return state


def load_state(named_params, named_buffers, state):
    """Restore arrays in place so existing Tensor identities survive."""
    for name, p in named_params:
        p.data[...] = state[name]
    for name, b in named_buffers:
        b[...] = state[name]


def parameter_count(named_params):
    return int(sum(p.data.size for _, p in named_params))


def reference_parameter_count(spec: NetworkSpec, n_classes):
    """Closed-form parameter total for a backbone plus head."""
    total = 0
    for conv in spec.convs:
        total += conv.kernel_size * conv.in_channels * conv.out_channels
        total += conv.out_channels            # conv bias
        total += 2 * conv.out_channels        # batchnorm gamma/beta
    total += spec.flat_dim * spec.fc_width + spec.fc_width
    total += spec.fc_width * n_classes + n_classes
    return total
