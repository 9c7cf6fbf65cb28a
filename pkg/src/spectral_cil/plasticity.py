"""Continual backpropagation: utility tracking and selective reinitialization.

Every tracked unit (a conv output channel or a feature-layer neuron) carries
a decayed running utility |activation| * sum|outgoing weights| and an age in
optimizer updates. Each step, a rate-controlled number of the lowest-utility
mature units is redrawn from the layer's recorded initializer; the unit's
outgoing weights are zeroed so the network function is untouched at the
moment of replacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


@dataclass
class CbConfig:
    enabled: bool = False
    replacement_rate: float = 0.0          # fraction of mature units per update
    maturity_threshold: float = math.inf   # age (updates) before eligibility
    decay_rate: float = 0.99               # utility running-average decay

    def validate(self):
        if not 0.0 <= self.replacement_rate <= 1.0:
            raise ValueError(f"replacement_rate {self.replacement_rate} "
                             "outside [0, 1]")
        if not 0.0 <= self.decay_rate < 1.0:
            raise ValueError(f"decay_rate {self.decay_rate} outside [0, 1)")
        if self.maturity_threshold < 0:
            raise ValueError("maturity_threshold must be >= 0")


class ConvConsumer:
    """Outgoing weights live in a downstream conv kernel's input-channel slice."""

    def __init__(self, conv):
        self.conv = conv

    def outgoing_abs_sum(self):
        return np.abs(self.conv.weight.data).sum(axis=(0, 2))

    def zero_outgoing(self, unit):
        self.conv.zero_input_channel(unit)


class LinearConsumer:
    """Outgoing weights are columns of a downstream linear layer.

    `cols` maps each tracked unit to its column indices, shape
    (n_units, cols_per_unit); a flattened conv channel owns one column per
    surviving spatial position.
    """

    def __init__(self, linear, cols):
        self.linear = linear
        self.cols = np.asarray(cols)

    def outgoing_abs_sum(self):
        col_sums = np.abs(self.linear.weight.data).sum(axis=0)
        return col_sums[self.cols].sum(axis=1)

    def zero_outgoing(self, unit):
        self.linear.zero_input_columns(self.cols[unit])


class UnitGroup:
    """A reinitializable layer plus every consumer of its outputs."""

    def __init__(self, name, owner, n_units, consumers):
        self.name = name
        self.owner = owner
        self.n_units = n_units
        self.consumers = list(consumers)

    def activations(self):
        act = self.owner.last_abs_act
        if act is None:
            raise RuntimeError(
                f"no recorded activations for {self.name}; forward with "
                "record_acts=True before updating utility")
        return act

    def outgoing_abs_sum(self):
        total = np.zeros(self.n_units, dtype=np.float64)
        for consumer in self.consumers:
            total += consumer.outgoing_abs_sum()
        return total

    def zero_outgoing(self, unit):
        for consumer in self.consumers:
            consumer.zero_outgoing(unit)


@dataclass
class _GroupState:
    utility: np.ndarray
    age: np.ndarray
    accumulator: float = 0.0


class ContinualBackprop:
    """Owns utility state for a set of unit groups and applies replacements."""

    def __init__(self, config: CbConfig, rng):
        config.validate()
        self.config = config
        self.rng = rng
        self.groups = []
        self.state = {}

    def attach(self, groups):
        """Adopt a (possibly new) target set; state persists by group name."""
        self.groups = list(groups)
        kept = {}
        for g in self.groups:
            if g.name in self.state and len(self.state[g.name].utility) == g.n_units:
                kept[g.name] = self.state[g.name]
            else:
                kept[g.name] = _GroupState(
                    utility=np.zeros(g.n_units, dtype=np.float64),
                    age=np.zeros(g.n_units, dtype=np.int64))
        self.state = kept

    def update_utility(self):
        """Fold this update's contribution into every unit's running utility."""
        eta = self.config.decay_rate
        for g in self.groups:
            st = self.state[g.name]
            contribution = g.activations() * g.outgoing_abs_sum()
            st.utility *= eta
            st.utility += (1.0 - eta) * contribution
            st.age += 1

    def step(self):
        """Replace low-utility mature units; returns the replacement report.

        Per group: the accumulator grows by rate * (#mature); floor(acc)
        units are reinitialized (incoming weights and batchnorm redrawn /
        reset, outgoing weights zeroed, utility and age cleared) and the
        fractional remainder is carried forward.
        """
        report = []
        rho = self.config.replacement_rate
        m = self.config.maturity_threshold
        for g in self.groups:
            st = self.state[g.name]
            mature = np.flatnonzero(st.age > m)
            if rho == 0.0 or len(mature) == 0:
                continue
            st.accumulator += rho * len(mature)
            n_replace = min(int(math.floor(st.accumulator)), len(mature))
            if n_replace == 0:
                continue
            # lowest utility first, ties to the lowest unit index
            order = np.lexsort((mature, st.utility[mature]))
            selected = mature[order[:n_replace]]
            for unit in selected:
                g.owner.reinit_unit(int(unit), self.rng)
                g.zero_outgoing(int(unit))
            st.utility[selected] = 0.0
            st.age[selected] = 0
            st.accumulator -= n_replace
            report.append({"layer": g.name,
                           "units": [int(u) for u in selected]})
        return report


CB_SCOPES = {
    "finetune": "all", "ewc": "all", "lwf": "all", "replay": "all",
    "icarl": "all", "wa": "all", "retrain": "all",
    "der": "newest-backbone", "foster": "student", "memo": "generalized",
}


def select_cb_target(strategy_name, model):
    """Unit groups a strategy's reinitialization should act on.

    Monolithic strategies track every conv block and the feature layer (the
    classification head is never tracked); the dynamic strategies restrict
    to their newly added backbone, their student network, or their shared
    shallow block respectively.
    """
    try:
        scope = CB_SCOPES[strategy_name]
    except KeyError:
        raise ValueError(f"unknown strategy {strategy_name!r}")
    return model.cb_unit_groups(scope)


def backbone_unit_groups(backbone, head, prefix="", head_col_offset=0):
    """Groups for one backbone whose feature layer feeds `head`.

    The final conv block's consumer is the feature layer (each channel owns
    a contiguous column range after flattening); the feature layer's
    consumer is the head column block starting at `head_col_offset`.
    """
    groups = []
    blocks = backbone.blocks
    last_len = backbone.spec.conv_lengths()[-1]
    for i, block in enumerate(blocks):
        n = block.spec.out_channels
        if i + 1 < len(blocks):
            consumers = [ConvConsumer(blocks[i + 1].conv)]
        else:
            cols = (np.arange(n)[:, None] * last_len
                    + np.arange(last_len)[None, :])
            consumers = [LinearConsumer(backbone.fc.linear, cols)]
        groups.append(UnitGroup(f"{prefix}conv{i}", block, n, consumers))
    fc_cols = head_col_offset + np.arange(backbone.feature_dim)[:, None]
    groups.append(UnitGroup(f"{prefix}fc", backbone.fc,
                            backbone.feature_dim,
                            [LinearConsumer(head, fc_cols)]))
    return groups
