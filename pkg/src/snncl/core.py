"""Leaky integrate-and-fire layers simulated over discrete timesteps.

Membrane update per step (exponential-decay discretisation)::

    v' = beta * (v - v_rst) + v_rst + z
    spike = v' >= v_thr;  spiking neurons are hard-reset to v_rst

Batched arrays are laid out ``(batch, time, neuron)``. A single sample may be
passed as ``(time, neuron)`` and is returned without the batch axis.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, InjectionError, NumericError


@dataclass(frozen=True)
class LifParams:
    v_thr: float = 1.0
    v_rst: float = 0.0
    beta: float = 0.9
    surrogate_slope: float = 25.0

    def __post_init__(self):
        if not 0.0 < self.beta <= 1.0:
            raise ContractError(f"beta must lie in (0, 1], got {self.beta}")
        if not self.v_thr > self.v_rst:
            raise ContractError("v_thr must exceed v_rst")
        if not self.surrogate_slope > 0:
            raise ContractError("surrogate_slope must be positive")


class SpikeTrain:
    """Binary raster indexed ``[t, n]``."""

    __slots__ = ("data",)

    def __init__(self, data):
        arr = np.asarray(data)
        if arr.ndim != 2:
            raise ContractError(f"spike train must be 2-D (time, neuron), got shape {arr.shape}")
        if arr.size and not np.all((arr == 0) | (arr == 1)):
            raise ContractError("spike train entries must be 0 or 1")
        self.data = arr.astype(np.uint8)

    @classmethod
    def zeros(cls, timesteps, width):
        return cls(np.zeros((timesteps, width), dtype=np.uint8))

    @property
    def timesteps(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    def count(self):
        return int(self.data.sum(dtype=np.int64))

    def __eq__(self, other):
        if not isinstance(other, SpikeTrain):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    def __repr__(self):
        return f"SpikeTrain(T={self.timesteps}, N={self.width}, spikes={self.count()})"


@dataclass
class LayerState:
    v_mem: np.ndarray
    spike_out: np.ndarray

    @classmethod
    def rest(cls, width, params: LifParams, batch: Optional[int] = None):
        shape = (width,) if batch is None else (batch, width)
        return cls(np.full(shape, params.v_rst, dtype=float), np.zeros(shape))


@dataclass
class LifLayer:
    w: np.ndarray  # (in_width, out_width)
    v: np.ndarray  # (out_width, out_width), applied to the previous step's spikes
    params: LifParams = field(default_factory=LifParams)
    frozen: bool = False
    recurrent: bool = True

    def __post_init__(self):
        self.w = np.asarray(self.w, dtype=float)
        self.v = np.asarray(self.v, dtype=float)
        if self.w.ndim != 2 or self.v.shape != (self.w.shape[1], self.w.shape[1]):
            raise ContractError(f"inconsistent weight shapes w={self.w.shape} v={self.v.shape}")
        if not (np.all(np.isfinite(self.w)) and np.all(np.isfinite(self.v))):
            raise NumericError("layer weights must be finite")

    @property
    def in_width(self):
        return self.w.shape[0]

    @property
    def out_width(self):
        return self.w.shape[1]

    def digest(self):
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.w).tobytes())
        h.update(np.ascontiguousarray(self.v).tobytes())
        return h.hexdigest()

    def copy(self):
        return LifLayer(self.w.copy(), self.v.copy(), self.params, self.frozen, self.recurrent)


@dataclass
class Network:
    """Ordered stack of LIF layers. Layer indices are 1-based."""

    layers: list

    def __post_init__(self):
        if len(self.layers) < 1:
            raise ContractError("a network needs at least one layer")
        for i in range(1, len(self.layers)):
            if self.layers[i].in_width != self.layers[i - 1].out_width:
                raise ContractError(
                    f"layer {i + 1} expects width {self.layers[i].in_width}, "
                    f"layer {i} emits {self.layers[i - 1].out_width}"
                )

    @property
    def depth(self):
        return len(self.layers)

    @property
    def input_width(self):
        return self.layers[0].in_width

    @property
    def layer_widths(self):
        return tuple(layer.out_width for layer in self.layers)

    def layer(self, index):
        if not 1 <= index <= self.depth:
            raise ContractError(f"layer index {index} outside 1..{self.depth}")
        return self.layers[index - 1]

    def input_width_of(self, index):
        """Width of the spike train consumed by layer ``index``."""
        return self.layer(index).in_width

    def layer_digests(self):
        return [layer.digest() for layer in self.layers]

    def digest(self):
        return hashlib.sha256("".join(self.layer_digests()).encode()).hexdigest()

    def copy(self):
        return Network([layer.copy() for layer in self.layers])


def init_network(widths: Sequence[int], params: LifParams = LifParams(), *, seed=0,
                 recurrent=True, gain=2.0, recurrent_gain=0.5) -> Network:
    """Random network for ``widths = [input, hidden..., output]``.

    Feedforward weights are Gaussian with std ``gain / sqrt(fan_in)``.
    """
    if len(widths) < 2:
        raise ContractError("widths must list the input width and at least one layer")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    layers = []
    for n_in, n_out in zip(widths[:-1], widths[1:]):
        w = rng.normal(0.0, gain / np.sqrt(n_in), size=(n_in, n_out))
        if recurrent:
            v = rng.normal(0.0, recurrent_gain / np.sqrt(n_out), size=(n_out, n_out))
        else:
            v = np.zeros((n_out, n_out))
        layers.append(LifLayer(w, v, params, recurrent=recurrent))
    return Network(layers)


def surrogate_grad(x, k):
    """Fast-sigmoid derivative ``1 / (1 + k|x|)^2``."""
    if not k > 0:
        raise ContractError("surrogate slope must be positive")
    return 1.0 / (1.0 + k * np.abs(x)) ** 2


def fast_sigmoid(x, k):
    """Smooth stand-in for the spike whose derivative is :func:`surrogate_grad`."""
    return 0.5 + x / (1.0 + k * np.abs(x))


def lif_step(state: LayerState, z, p: LifParams, v_thr_override=None):
    """Advance one timestep; returns ``(new_state, spikes)``."""
    z = np.asarray(z, dtype=float)
    if z.shape != state.v_mem.shape:
        raise ContractError(f"input current shape {z.shape} != state shape {state.v_mem.shape}")
    if not np.all(np.isfinite(z)):
        raise NumericError("non-finite input current")
    thr = p.v_thr if v_thr_override is None else v_thr_override
    u = p.beta * (state.v_mem - p.v_rst) + p.v_rst + z
    spikes = (u >= thr).astype(float)
    v_new = np.where(spikes > 0, p.v_rst, u)
    return LayerState(v_new, spikes), spikes


@dataclass
class LayerTrace:
    """Everything the backward pass needs from one layer's forward run."""

    index: int
    inputs: np.ndarray  # (B, T, in)
    v_mem: np.ndarray  # (B, T, out), pre-reset membrane
    spikes: np.ndarray  # (B, T, out)
    v_thr: np.ndarray  # (B, T), threshold in force at each step

    @property
    def timesteps(self):
        return self.v_mem.shape[1]


def _as_batch(x):
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ContractError(f"expected (T, N) or (B, T, N) spikes, got shape {x.shape}")


class _StaticThresholds:
    def __init__(self, schedule, batch, timesteps):
        sched = np.asarray(schedule, dtype=float)
        if sched.ndim == 1:
            if sched.shape[0] != timesteps:
                raise ContractError(f"threshold schedule has {sched.shape[0]} entries, need {timesteps}")
            sched = np.broadcast_to(sched, (batch, timesteps))
        elif sched.shape != (batch, timesteps):
            raise ContractError(f"threshold schedule shape {sched.shape} != {(batch, timesteps)}")
        if not np.all(np.isfinite(sched)):
            raise NumericError("non-finite threshold schedule")
        self._sched = sched
        self.t = 0

    @property
    def current(self):
        return self._sched[:, self.t]

    def step(self, spiked):
        self.t += 1


def simulate(layers: Sequence[LifLayer], x, *, first_index=1, v_thr_schedule=None, smooth=False):
    """Run a contiguous stack of layers time-major over a batch.

    ``v_thr_schedule`` may be ``None`` (each layer keeps its own threshold), a
    per-timestep array of shape ``(T,)`` or ``(B, T)``, or an adaptive scheduler
    exposing ``start(batch, timesteps)``; the latter is driven online by whether
    any layer in the stack spiked at each step. With ``smooth=True`` the step
    function is replaced by :func:`fast_sigmoid`, giving a differentiable proxy.

    Returns ``(output, traces)`` where ``output`` is ``(B, T, out)``.
    """
    x = np.asarray(x, dtype=float)
    batch, timesteps, _ = x.shape
    if v_thr_schedule is None:
        sched = None
    elif hasattr(v_thr_schedule, "start"):
        sched = v_thr_schedule.start(batch, timesteps)
    else:
        sched = _StaticThresholds(v_thr_schedule, batch, timesteps)

    n = len(layers)
    u_rec = [np.empty((batch, timesteps, l.out_width)) for l in layers]
    # all layers' spikes share one buffer so "any spike in the stack" is one reduction
    offsets = np.cumsum([0] + [l.out_width for l in layers])
    s_all = np.empty((batch, timesteps, offsets[-1]))
    s_rec = [s_all[:, :, offsets[j]:offsets[j + 1]] for j in range(len(layers))]
    no_spikes = np.zeros(batch, dtype=bool)
    # one schedule drives the whole stack, so it is recorded once and shared
    thr_shared = None if sched is None else np.empty((batch, timesteps))
    mem = [np.full((batch, l.out_width), l.params.v_rst) for l in layers]
    prev = [np.zeros((batch, l.out_width)) for l in layers]

    for t in range(timesteps):
        inp = x[:, t]
        if sched is not None:
            current = sched.current
            thr_shared[:, t] = current
            # a scalar compares faster than a broadcast column
            thr_col = float(current[0]) if batch == 1 else current[:, None]
        for j in range(n):
            layer = layers[j]
            p = layer.params
            z = inp @ layer.w
            if layer.recurrent:
                z += prev[j] @ layer.v
            u = p.beta * (mem[j] - p.v_rst) + p.v_rst + z
            thr = p.v_thr if sched is None else thr_col
            if smooth:
                s = fast_sigmoid(u - thr, p.surrogate_slope)
                mem[j] = u * (1.0 - s) + p.v_rst * s
            else:
                fired = u >= thr
                s = fired.astype(float)
                mem[j] = np.where(fired, p.v_rst, u)
            u_rec[j][:, t] = u
            s_rec[j][:, t] = s
            prev[j] = s
            inp = s
        if sched is not None:
            sched.step(no_spikes if smooth else s_all[:, t].any(axis=1))

    if not all(np.all(np.isfinite(u)) for u in u_rec):
        raise NumericError("membrane potential diverged")
    traces = []
    inputs = x
    for j in range(n):
        spikes = np.ascontiguousarray(s_rec[j])
        thr = np.full((batch, timesteps), layers[j].params.v_thr) if sched is None else thr_shared
        traces.append(LayerTrace(first_index + j, inputs, u_rec[j], spikes, thr))
        inputs = spikes
    return traces[-1].spikes, traces


def layer_forward(layer: LifLayer, spikes, v_thr_schedule=None):
    """Simulate one layer; returns ``(output spikes, membrane trace)``.

    The trace holds pre-reset potentials, so it exceeds threshold exactly where
    the layer spiked.
    """
    as_train = isinstance(spikes, SpikeTrain)
    xb, single = _as_batch(spikes.data if as_train else spikes)
    if xb.shape[2] != layer.in_width:
        raise ContractError(f"input width {xb.shape[2]} != layer input width {layer.in_width}")
    out, traces = simulate([layer], xb, v_thr_schedule=v_thr_schedule)
    if single:
        out0 = SpikeTrain(out[0]) if as_train else out[0]
        return out0, traces[0].v_mem[0]
    return out, traces[0].v_mem


def network_forward(net: Network, spikes, start_layer=1, v_thr_schedule=None, *,
                    stop_layer=None, smooth=False):
    """Chain layers ``start_layer..stop_layer`` (inclusive, 1-based).

    Starting past layer 1 lets stored activations re-enter the network at an
    insertion layer. Returns ``(output, traces)``.
    """
    stop = net.depth if stop_layer is None else stop_layer
    if not 1 <= start_layer <= stop <= net.depth:
        raise ContractError(f"invalid layer range {start_layer}..{stop} for depth {net.depth}")
    as_train = isinstance(spikes, SpikeTrain)
    xb, single = _as_batch(spikes.data if as_train else spikes)
    expected = net.input_width_of(start_layer)
    if xb.shape[2] != expected:
        raise InjectionError(
            f"layer {start_layer} expects width {expected}, got activations of width {xb.shape[2]}"
        )
    out, traces = simulate(net.layers[start_layer - 1:stop], xb, first_index=start_layer,
                           v_thr_schedule=v_thr_schedule, smooth=smooth)
    if single:
        out = SpikeTrain(out[0]) if as_train and not smooth else out[0]
    return out, traces
