"""Spike-driven energy proxy.

energy = e_synop * synaptic operations + e_neuron * neuron-timestep updates

A spike entering a layer costs one synaptic operation per target neuron
(the layer's width); with recurrence enabled, each emitted spike also reaches
every neuron of its own layer on the next step.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass(frozen=True)
class EnergyModel:
    e_synop: float = 1.0
    e_neuron: float = 0.1

    def __post_init__(self):
        if self.e_synop < 0 or self.e_neuron < 0:
            raise ContractError("energy coefficients must be non-negative")


@dataclass
class OpCounts:
    synops: int = 0
    neuron_updates: int = 0

    def __add__(self, other):
        return OpCounts(self.synops + other.synops, self.neuron_updates + other.neuron_updates)

    def energy(self, model: EnergyModel = EnergyModel()):
        return model.e_synop * self.synops + model.e_neuron * self.neuron_updates


def count_operations(traces, recurrent=None) -> OpCounts:
    """Exact operation counts for a list of :class:`~snncl.core.LayerTrace`.

    ``recurrent`` gives one flag per trace; by default recurrence is counted.
    """
    counts = OpCounts()
    for i, tr in enumerate(traces):
        batch, timesteps, width = tr.spikes.shape
        syn = int(np.count_nonzero(tr.inputs)) * width
        if recurrent is None or recurrent[i]:
            # spikes at the final step have no next step to reach
            syn += int(np.count_nonzero(tr.spikes[:, :-1])) * width
        counts = counts + OpCounts(syn, batch * timesteps * width)
    return counts


def energy_estimate(traces, model: EnergyModel = EnergyModel(), recurrent=None) -> float:
    return count_operations(traces, recurrent).energy(model)
