"""Class-incremental training with latent replay at reduced timesteps.

Flow: pre-train every layer, cut the network at the insertion layer, store
compressed activations of a replay subset, then train only the later layers
on new-class activations mixed with the decoded replay data.

Two online threshold schedules drive the reduced-timestep phases:

* ``prepare`` (frozen layers while generating activations): at multiples of
  ``adjust_interval`` the threshold becomes ``1 + 0.01 * (T - mean spike
  time)`` if the window saw spikes and is otherwise left alone; between those
  steps it follows ``1 / (1 + exp(-0.001 t))``.
* ``ncl`` (learning layers while training): spike-driven value whenever the
  window saw spikes, sigmoid otherwise.

The window holds the last ``adjust_interval`` timesteps. The value computed
after step ``t`` is the threshold for step ``t + 1``.
"""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Callable, Optional

import numpy as np

from .core import LifParams, Network, init_network, network_forward
from .data import EventDataset, rasterize_dataset
from .energy import OpCounts, count_operations
from .errors import ConfigError, ContractError
from .replay import LatentStore, ReplaySplit, capture_activations, generate_latent
from .training import Optimizer, OptimizerConfig, train_epoch


def _sigmoid_threshold(t):
    return 1.0 / (1.0 + math.exp(-0.001 * t))


def _spike_threshold(t_step, mean_time):
    return 1.0 + 0.01 * (t_step - mean_time)


@dataclass(frozen=True)
class ThresholdSchedulerState:
    t_step: int
    adjust_interval: int = 5
    current_v_thr: float = 1.0
    t: int = 0
    spike_timing: tuple = ()


def threshold_step(s: ThresholdSchedulerState, spikes_this_step, mode="ncl") -> ThresholdSchedulerState:
    """Scalar reference for one scheduler tick."""
    if s.t >= s.t_step:
        raise ContractError(f"scheduler already at t={s.t} of {s.t_step}")
    timing = s.spike_timing + ((s.t,) if spikes_this_step else ())
    timing = tuple(x for x in timing if x > s.t - s.adjust_interval)
    if mode == "ncl":
        if timing:
            v_thr = _spike_threshold(s.t_step, sum(timing) / len(timing))
        else:
            v_thr = _sigmoid_threshold(s.t)
    elif mode == "prepare":
        if s.t % s.adjust_interval == 0:
            v_thr = _spike_threshold(s.t_step, sum(timing) / len(timing)) if timing else s.current_v_thr
        else:
            v_thr = _sigmoid_threshold(s.t)
    else:
        raise ContractError(f"unknown scheduler mode {mode!r}")
    return replace(s, current_v_thr=v_thr, t=s.t + 1, spike_timing=timing)


class _AdaptiveRun:
    """Vectorised :func:`threshold_step` over a batch of independent samples."""

    def __init__(self, mode, batch, t_step, interval, initial):
        self.mode = mode
        self.t_step = t_step
        self.interval = interval
        self.t = 0
        self.current = np.full(batch, float(initial))
        self._hist = np.zeros((batch, t_step))  # 1.0 where the stack spiked
        self._times = np.arange(t_step, dtype=float)
        self._recent = [] if batch == 1 else None

    def step(self, spiked):
        t = self.t
        if t >= self._hist.shape[1]:
            raise ContractError(f"scheduler already at t={t} of {self._hist.shape[1]}")
        sig = _sigmoid_threshold(t)
        if self._recent is not None:
            self.current = np.array([self._single(t, bool(spiked[0]), sig)])
            self.t = t + 1
            return
        self._hist[:, t] = spiked
        if self.mode == "ncl" or t % self.interval == 0:
            lo = max(0, t - self.interval + 1)
            window = self._hist[:, lo:t + 1]
            count = np.add.reduce(window, axis=1)
            mean = (window @ self._times[lo:t + 1]) / np.maximum(count, 1.0)
            fallback = sig if self.mode == "ncl" else self.current
            self.current = np.where(count > 0, 1.0 + 0.01 * (self.t_step - mean), fallback)
        else:
            self.current = np.full(len(self.current), sig)
        self.t = t + 1

    def _single(self, t, spiked, sig):
        # scalar path for one sample; same arithmetic as threshold_step
        timing = self._recent
        if spiked:
            timing.append(t)
        while timing and timing[0] <= t - self.interval:
            timing.pop(0)
        if self.mode == "prepare" and t % self.interval:
            return sig
        if timing:
            return _spike_threshold(self.t_step, sum(timing) / len(timing))
        return sig if self.mode == "ncl" else float(self.current[0])


@dataclass(frozen=True)
class AdaptiveThreshold:
    """Online threshold schedule usable as ``v_thr_schedule`` in the simulator."""

    mode: str = "ncl"
    adjust_interval: int = 5
    initial: float = 1.0

    def __post_init__(self):
        if self.mode not in ("ncl", "prepare"):
            raise ContractError(f"unknown scheduler mode {self.mode!r}")
        if self.adjust_interval < 1:
            raise ContractError("adjust_interval must be >= 1")

    def start(self, batch, timesteps):
        return _AdaptiveRun(self.mode, batch, timesteps, self.adjust_interval, self.initial)


def lr_policy(eta_pre):
    if not eta_pre > 0:
        raise ContractError("eta_pre must be positive")
    return eta_pre / 100


@dataclass(frozen=True)
class RunConfig:
    t_step: int = 20
    t_pre: int = 100
    l_ins: int = 3
    e_pre: int = 30
    e_cl: int = 50
    eta_pre: float = 2e-2
    eta_cl: Optional[float] = None  # None: eta_pre / 100
    adaptive_threshold: bool = True
    adjust_interval: int = 5
    codec: str = "ratechunk"
    chunk: Optional[int] = None  # None: t_step // 4
    seed: int = 0
    hidden: tuple = (48, 32, 24)
    batch_size: int = 32
    cl_batch_size: Optional[int] = 1  # None: batch_size
    replay_fraction: float = 0.1
    held_out_class: Optional[int] = None  # None: last class
    test_fraction: float = 0.25
    beta: float = 0.9
    v_thr: float = 1.0
    surrogate_slope: float = 25.0
    logit_gain: float = 10.0
    recurrent: bool = True
    optimizer: str = "adam"
    init_gain: float = 2.0

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.t_step < 1 or self.t_pre < 1:
            raise ConfigError("timestep counts must be >= 1")
        if self.l_ins < 1 or self.l_ins > len(self.hidden) + 1:
            raise ConfigError(f"l_ins={self.l_ins} outside 1..{len(self.hidden) + 1}")
        if self.e_pre < 0 or self.e_cl < 0:
            raise ConfigError("epoch counts must be >= 0")
        if not self.eta_pre > 0:
            raise ConfigError("eta_pre must be positive")
        if self.eta_cl is not None and self.eta_cl < 0:
            raise ConfigError("eta_cl must be non-negative")
        if self.codec not in ("bitpack", "ratechunk"):
            raise ConfigError(f"unknown codec {self.codec!r}")
        if self.chunk is not None and self.chunk < 1:
            raise ConfigError("chunk must be >= 1")
        if not 0 < self.replay_fraction <= 1:
            raise ConfigError("replay_fraction must lie in (0, 1]")
        if not 0 <= self.test_fraction < 1:
            raise ConfigError("test_fraction must lie in [0, 1)")
        if self.batch_size < 1 or (self.cl_batch_size is not None and self.cl_batch_size < 1):
            raise ConfigError("batch sizes must be >= 1")
        if self.adjust_interval < 1:
            raise ConfigError("adjust_interval must be >= 1")
        try:
            self.lif_params
        except ContractError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def depth(self):
        return len(self.hidden) + 1

    @property
    def lif_params(self):
        return LifParams(self.v_thr, 0.0, self.beta, self.surrogate_slope)

    @property
    def effective_eta_cl(self):
        return lr_policy(self.eta_pre) if self.eta_cl is None else self.eta_cl

    @property
    def effective_chunk(self):
        return max(1, self.t_step // 4) if self.chunk is None else self.chunk

    @property
    def effective_cl_batch(self):
        return self.batch_size if self.cl_batch_size is None else self.cl_batch_size

    def frozen_schedule(self):
        if not self.adaptive_threshold:
            return None
        return AdaptiveThreshold("prepare", self.adjust_interval, self.v_thr)

    def learning_schedule(self):
        if not self.adaptive_threshold:
            return None
        return AdaptiveThreshold("ncl", self.adjust_interval, self.v_thr)

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TaskSplit:
    ts_pre: EventDataset
    ts_cl: EventDataset
    ts_replay: EventDataset
    held_out_class: int

    @property
    def old_classes(self):
        return sorted(set(self.ts_pre.labels.tolist()))


def make_task_split(dataset: EventDataset, held_out_class, replay_fraction=0.1, seed=0) -> TaskSplit:
    """Hold one class out for the continual phase; sample the replay subset per class."""
    labels = dataset.labels
    if not np.any(labels == held_out_class):
        raise ContractError(f"class {held_out_class} has no samples")
    if not 0 < replay_fraction <= 1:
        raise ContractError("replay_fraction must lie in (0, 1]")
    pre_idx = np.flatnonzero(labels != held_out_class)
    cl_idx = np.flatnonzero(labels == held_out_class)
    rng = np.random.default_rng([seed, 11])
    replay = []
    for c in sorted(set(labels[pre_idx].tolist())):
        idx = pre_idx[labels[pre_idx] == c]
        k = max(1, int(round(replay_fraction * len(idx))))
        replay.extend(np.sort(rng.choice(idx, size=k, replace=False)).tolist())
    return TaskSplit(dataset.subset(pre_idx), dataset.subset(cl_idx), dataset.subset(replay),
                     int(held_out_class))


def raster(ds: EventDataset, t_step):
    return rasterize_dataset(ds.samples, t_step, ds.channels), ds.labels


def forward_regime(net: Network, x, l_ins, cfg: RunConfig):
    """Full-network inference as deployed after the split.

    Frozen layers run under the prepare-mode schedule, learning layers under
    the ncl-mode schedule (static thresholds when adaptation is off).
    Returns ``(output, traces)``.
    """
    acts = np.asarray(x)
    traces = []
    if l_ins > 1:
        acts, traces = network_forward(net, acts, 1, cfg.frozen_schedule(), stop_layer=l_ins - 1)
    out, tail = network_forward(net, acts, l_ins, cfg.learning_schedule())
    return out, traces + tail


def prepare_replay(net: Network, split: ReplaySplit, tasks: TaskSplit, cfg: RunConfig,
                   epochs=None) -> LatentStore:
    """Generate the replay store; only the last of ``epochs`` passes is kept."""
    if split.l_ins != cfg.l_ins:
        raise ContractError(f"split at layer {split.l_ins} but config says {cfg.l_ins}")
    if len(tasks.ts_replay) == 0:
        raise ContractError("replay set is empty")
    x, y = raster(tasks.ts_replay, cfg.t_step)
    store = None
    for _ in range(max(1, cfg.e_pre if epochs is None else epochs)):
        store = generate_latent(split, x, y, cfg.frozen_schedule(), cfg.codec, cfg.effective_chunk)
    return store


def build_replay_stream(a_new, y_new, a_lr, y_lr, rng):
    """Shuffled union of new-task and replayed activations.

    Returns ``(x, y, source)``; ``source`` is ``(is_replay, index)`` per row.
    """
    x = np.concatenate([a_new, a_lr]) if len(a_lr) else np.asarray(a_new)
    y = np.concatenate([y_new, y_lr]) if len(y_lr) else np.asarray(y_new)
    src = np.concatenate([
        np.stack([np.zeros(len(y_new), np.int64), np.arange(len(y_new))], 1),
        np.stack([np.ones(len(y_lr), np.int64), np.arange(len(y_lr))], 1),
    ])
    order = rng.permutation(len(y))
    return x[order], y[order], src[order]


@dataclass
class ClEpoch:
    epoch: int
    loss: float
    stream_accuracy: float
    wall_latency: float  # seconds spent in this epoch's inference + training
    ops: OpCounts
    layer_steps: int  # sample-timestep-layer updates, a deterministic latency model
    frozen_digests: list
    metrics: dict = field(default_factory=dict)


def ncl_train(net: Network, split: ReplaySplit, store: Optional[LatentStore], tasks: TaskSplit,
              cfg: RunConfig, *, eval_fn: Optional[Callable] = None, rng=None,
              optimizer: Optional[Optimizer] = None):
    """Continual phase: train layers ``>= l_ins`` on new data plus replay.

    ``store=None`` (or an empty store) trains on the new class alone. Returns
    one :class:`ClEpoch` per epoch; ``eval_fn(net)`` may add metrics to each.
    """
    if split.l_ins != cfg.l_ins:
        raise ContractError(f"split at layer {split.l_ins} but config says {cfg.l_ins}")
    if store is not None and len(store):
        if (store.timesteps, store.width) != (cfg.t_step, split.latent_width) or store.codec != cfg.codec:
            raise ContractError(
                f"store holds {store.codec} T={store.timesteps} width={store.width}; run needs "
                f"{cfg.codec} T={cfg.t_step} width={split.latent_width}"
            )
        a_lr, y_lr = store.decode_all(), store.labels
    else:
        a_lr = np.zeros((0, cfg.t_step, split.latent_width), np.uint8)
        y_lr = np.zeros(0, np.int64)
    rng = np.random.default_rng([cfg.seed, 3]) if rng is None else rng
    optimizer = optimizer or Optimizer(OptimizerConfig(cfg.effective_eta_cl, cfg.optimizer))
    x_cl, y_cl = raster(tasks.ts_cl, cfg.t_step)
    frozen_idx = split.frozen_indices
    recurrent = [l.recurrent for l in net.layers]
    scale = cfg.logit_gain / cfg.t_step
    history = []
    for ep in range(cfg.e_cl):
        ops = OpCounts()

        def tally(traces):
            nonlocal ops
            ops = ops + count_operations(traces, [recurrent[tr.index - 1] for tr in traces])

        start = time.perf_counter()
        a_new, f_traces = capture_activations(split, x_cl, cfg.frozen_schedule())
        tally(f_traces)
        xs, ys, _ = build_replay_stream(a_new, y_cl, a_lr, y_lr, rng)
        loss, acc = train_epoch(net, xs, ys, optimizer, rng, batch_size=cfg.effective_cl_batch,
                                logit_scale=scale, first_learning_layer=split.l_ins,
                                start_layer=split.l_ins, v_thr_schedule=cfg.learning_schedule(),
                                on_batch=tally, shuffle=False)
        elapsed = time.perf_counter() - start
        record = ClEpoch(ep + 1, loss, acc, elapsed, ops, ops.neuron_updates,
                         [net.layer(i).digest() for i in frozen_idx])
        if eval_fn is not None:
            record.metrics = eval_fn(net)
        history.append(record)
    return history


def build_network(cfg: RunConfig, input_width, classes, rng=None) -> Network:
    rng = np.random.default_rng([cfg.seed, 1]) if rng is None else rng
    widths = [input_width, *cfg.hidden, classes]
    return init_network(widths, cfg.lif_params, seed=rng, recurrent=cfg.recurrent, gain=cfg.init_gain)
