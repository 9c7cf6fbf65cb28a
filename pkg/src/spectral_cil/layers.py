"""Parameterized layers: 1-D convolution, batchnorm, and linear.

Every weight-bearing layer records the distribution its parameters were
drawn from (`init_bounds`), so a unit can later be redrawn identically in
law by the plasticity machinery.
"""

from __future__ import annotations

import math

import numpy as np

from . import autograd as ag
from .autograd import Tensor

LAYER_KINDS = ("conv1d", "batchnorm1d", "relu", "linear", "softmax")


def kaiming_uniform_bound(fan_in):
    """Half-width of the uniform fan-in initializer (ReLU gain)."""
    return math.sqrt(6.0 / fan_in)


class Conv1d:
    def __init__(self, in_channels, out_channels, kernel_size, stride=1,
                 padding=0, rng=None, dtype=np.float32):
        if in_channels < 1 or out_channels < 1:
            raise ValueError("channel counts must be positive")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.stride = stride
        self.padding = padding
        fan_in = in_channels * kernel_size
        wb = kaiming_uniform_bound(fan_in)
        bb = 1.0 / math.sqrt(fan_in)
        self.init_bounds = {"weight": wb, "bias": bb}
        rng = rng or np.random.default_rng()
        self.weight = Tensor(
            rng.uniform(-wb, wb, (out_channels, in_channels, kernel_size))
            .astype(dtype), requires_grad=True)
        self.bias = Tensor(rng.uniform(-bb, bb, out_channels).astype(dtype),
                           requires_grad=True)

    def forward(self, x):
        return ag.conv1d(x, self.weight, self.bias, self.stride, self.padding)

    def output_length(self, length):
        return ag.conv_output_length(length, self.kernel_size, self.stride,
                                     self.padding)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def reinit_unit(self, unit, rng):
        """Redraw one output channel's incoming weights and bias."""
        dtype = self.weight.data.dtype
        wb, bb = self.init_bounds["weight"], self.init_bounds["bias"]
        self.weight.data[unit] = rng.uniform(
            -wb, wb, self.weight.data.shape[1:]).astype(dtype)
        self.bias.data[unit] = dtype.type(rng.uniform(-bb, bb))

    def zero_input_channel(self, channel):
        self.weight.data[:, channel, :] = 0


class BatchNorm1d:
    def __init__(self, channels, momentum=0.1, eps=1e-5, dtype=np.float32):
        self.channels = channels
        self.momentum = momentum
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)

    def forward(self, x, training):
        return ag.batchnorm1d(x, self.gamma, self.beta, self.running_mean,
                              self.running_var, training, self.momentum,
                              self.eps)

    def named_parameters(self, prefix=""):
        return [(prefix + "gamma", self.gamma), (prefix + "beta", self.beta)]

    def buffers(self, prefix=""):
        return [(prefix + "running_mean", self.running_mean),
                (prefix + "running_var", self.running_var)]

    def reset_unit(self, unit):
        self.gamma.data[unit] = 1
        self.beta.data[unit] = 0
        self.running_mean[unit] = 0
        self.running_var[unit] = 1


class Linear:
    def __init__(self, in_features, out_features, rng=None, dtype=np.float32):
        if in_features < 1 or out_features < 1:
            raise ValueError("feature counts must be positive")
        self.in_features = in_features
        self.out_features = out_features
        wb = kaiming_uniform_bound(in_features)
        bb = 1.0 / math.sqrt(in_features)
        self.init_bounds = {"weight": wb, "bias": bb}
        rng = rng or np.random.default_rng()
        self.weight = Tensor(
            rng.uniform(-wb, wb, (out_features, in_features)).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(rng.uniform(-bb, bb, out_features).astype(dtype),
                           requires_grad=True)

    def forward(self, x):
        return ag.linear(x, self.weight, self.bias)

    def named_parameters(self, prefix=""):
        return [(prefix + "weight", self.weight), (prefix + "bias", self.bias)]

    def extend(self, n_new, rng):
        """Grow the output dimension; old rows are copied verbatim and new
        rows are drawn from the recorded initializer."""
        if n_new <= 0:
            raise ValueError("extend requires n_new > 0")
        dtype = self.weight.data.dtype
        wb, bb = self.init_bounds["weight"], self.init_bounds["bias"]
        new_w = rng.uniform(-wb, wb, (n_new, self.in_features)).astype(dtype)
        new_b = rng.uniform(-bb, bb, n_new).astype(dtype)
        self.weight = Tensor(np.vstack([self.weight.data, new_w]),
                             requires_grad=True)
        self.bias = Tensor(np.concatenate([self.bias.data, new_b]),
                           requires_grad=True)
        self.out_features += n_new

    def reinit_unit(self, unit, rng):
        dtype = self.weight.data.dtype
        wb, bb = self.init_bounds["weight"], self.init_bounds["bias"]
        self.weight.data[unit] = rng.uniform(-wb, wb, self.in_features).astype(dtype)
        self.bias.data[unit] = dtype.type(rng.uniform(-bb, bb))

    def zero_input_columns(self, columns):
        self.weight.data[:, columns] = 0
