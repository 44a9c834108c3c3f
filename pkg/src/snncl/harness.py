"""End-to-end experiments, sweeps and report files."""
from __future__ import annotations

import csv
import io
import json
import logging
import platform
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .continual import (RunConfig, TaskSplit, build_network, forward_regime, make_task_split,
                        ncl_train, prepare_replay, raster)
from .core import Network
from .data import EventDataset, stratified_split
from .energy import EnergyModel
from .errors import ContractError, EventFormatError, SnnclError
from .replay import LatentStore, latent_memory_report, split_network
from .training import Optimizer, OptimizerConfig, checkpoint_bytes, pretrain

log = logging.getLogger(__name__)

MODES = ("replay4ncl", "spikinglr", "no-replay")
SPIKINGLR_TIMESTEPS = 100


@dataclass
class EvalResult:
    accuracy: float
    correct: int
    total: int
    confusion: np.ndarray  # [true, predicted]


def evaluate(net: Network, dataset, t_step, class_filter=None, cfg: Optional[RunConfig] = None,
             l_ins=None) -> EvalResult:
    """Top-1 accuracy of the spike-count readout.

    ``dataset`` is an :class:`EventDataset` or an ``(x, y)`` pair already
    rasterised at ``t_step``. Thresholds follow ``cfg`` (static when omitted),
    split at ``l_ins`` (default ``cfg.l_ins``).
    """
    if isinstance(dataset, EventDataset):
        x, y = raster(dataset, t_step)
    else:
        x, y = (np.asarray(a) for a in dataset)
    if class_filter is not None:
        keep = np.isin(y, list(class_filter))
        x, y = x[keep], y[keep]
    if len(y) == 0:
        raise ContractError("nothing to evaluate after class filtering")
    cfg = cfg or RunConfig(adaptive_threshold=False, t_step=t_step)
    split_at = cfg.l_ins if l_ins is None else l_ins
    n_classes = net.layer_widths[-1]
    out, _ = forward_regime(net, x, split_at, cfg)
    pred = np.argmax(out.sum(axis=1), axis=1)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y, pred), 1)
    correct = int(np.sum(pred == y))
    return EvalResult(correct / len(y), correct, len(y), confusion)


REPORT_FIELDS = ("epoch", "old_top1", "new_top1", "combined_top1", "new_train_top1",
                 "wall_latency", "latency_model", "synop_count", "neuron_updates",
                 "energy_proxy", "latent_bytes")


@dataclass
class ReportRow:
    epoch: int
    old_top1: float
    new_top1: float
    combined_top1: float
    new_train_top1: float
    wall_latency: float  # cumulative seconds of continual-phase processing
    latency_model: int  # cumulative neuron-timestep updates
    synop_count: int  # cumulative
    neuron_updates: int  # cumulative
    energy_proxy: float  # cumulative
    latent_bytes: int

    def deterministic(self):
        d = asdict(self)
        d.pop("wall_latency")
        return d


@dataclass
class ExperimentReport:
    mode: str
    config: RunConfig
    rows: list = field(default_factory=list)
    manifest: dict = field(default_factory=dict)
    net: Optional[Network] = None
    store: Optional[LatentStore] = None
    checkpoint: bytes = b""
    pre_cl_old_top1: float = 0.0
    frozen_digests_before: list = field(default_factory=list)
    frozen_digests_after: list = field(default_factory=list)

    @property
    def final(self) -> ReportRow:
        return self.rows[-1]

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)

    def write(self, out_dir, figures=True):
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(self.to_csv())
        (out / "manifest.json").write_text(json.dumps(self.manifest, indent=2, sort_keys=True) + "\n")
        if self.checkpoint:
            (out / "checkpoint.bin").write_bytes(self.checkpoint)
        if self.store is not None:
            self.store.save(out / "latent_store.lrs")
        if figures:
            from .plotting import plot_report
            plot_report(self, out / "report.png")
        return out


def rows_to_csv(rows, extra=None) -> str:
    """CSV with ``repr`` floats so :func:`read_report_csv` is lossless.

    ``extra`` maps leading column names to per-row values.
    """
    extra = extra or {}
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(list(extra) + list(REPORT_FIELDS))
    for i, row in enumerate(rows):
        lead = [vals[i] for vals in extra.values()]
        writer.writerow(lead + [repr(getattr(row, f)) for f in REPORT_FIELDS])
    return buf.getvalue()


def read_report_csv(text):
    """Parse :func:`rows_to_csv` output back into rows (plus any leading columns)."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    n_extra = len(header) - len(REPORT_FIELDS)
    if n_extra < 0 or tuple(header[n_extra:]) != REPORT_FIELDS:
        raise ContractError("not a report CSV")
    types = {f.name: f.type for f in fields(ReportRow)}
    rows, lead = [], []
    for rec in reader:
        lead.append(dict(zip(header[:n_extra], rec[:n_extra])))
        vals = {}
        for name, raw in zip(REPORT_FIELDS, rec[n_extra:]):
            vals[name] = int(raw) if types[name] in (int, "int") else float(raw)
        rows.append(ReportRow(**vals))
    return (rows, lead) if n_extra else rows


def mode_config(cfg: RunConfig, mode) -> RunConfig:
    """Settings actually used by ``mode``.

    ``spikinglr`` runs at 100 timesteps with static thresholds and the
    pre-training learning rate, keeping the chunk length of ``cfg``.
    """
    if mode not in MODES:
        raise ContractError(f"unknown mode {mode!r}; expected one of {MODES}")
    if mode == "spikinglr":
        return replace(cfg, t_step=SPIKINGLR_TIMESTEPS, adaptive_threshold=False,
                       eta_cl=cfg.eta_pre, chunk=cfg.effective_chunk)
    return cfg


@dataclass
class Prepared:
    """Data splits and pre-trained network shared by the modes of one run."""

    train: EventDataset
    test: EventDataset
    tasks: TaskSplit
    net: Network
    history: list = field(default_factory=list)


def split_data(cfg: RunConfig, dataset: EventDataset):
    """Stratified train/test split, then the class-incremental task split."""
    held_out = dataset.classes - 1 if cfg.held_out_class is None else cfg.held_out_class
    if not 0 <= held_out < dataset.classes:
        raise ContractError(f"held-out class {held_out} outside 0..{dataset.classes - 1}")
    rest, held = stratified_split(dataset, cfg.test_fraction, cfg.seed)
    train, test = dataset.subset(rest), dataset.subset(held)
    tasks = make_task_split(train, held_out, cfg.replay_fraction, cfg.seed)
    return train, test, tasks


def prepare_experiment(cfg: RunConfig, dataset: EventDataset, net: Optional[Network] = None) -> Prepared:
    """Split the data and pre-train, unless a pre-trained ``net`` is supplied."""
    train, test, tasks = split_data(cfg, dataset)
    if net is not None:
        return Prepared(train, test, tasks, net)
    net = build_network(cfg, dataset.channels, dataset.classes)
    x, y = raster(tasks.ts_pre, cfg.t_pre)
    log.info("pre-training on %d samples for %d epochs", len(y), cfg.e_pre)
    result = pretrain(net, x, y, cfg.e_pre, OptimizerConfig(cfg.eta_pre, cfg.optimizer),
                      batch_size=cfg.batch_size, seed=np.random.default_rng([cfg.seed, 2]),
                      logit_gain=cfg.logit_gain)
    return Prepared(train, test, tasks, result.net, result.history)


def run_experiment(cfg: RunConfig, dataset: EventDataset, mode="replay4ncl", *,
                   prepared: Optional[Prepared] = None, store: Optional[LatentStore] = None,
                   energy_model=EnergyModel(), out_dir=None, figures=True) -> ExperimentReport:
    """Pre-train, split, build the replay store and run the continual phase.

    ``prepared`` reuses splits and pre-training from an earlier call with the
    same base config; the pre-trained network itself is copied, never mutated.
    A ready ``store`` skips replay preparation.
    """
    stage = "setup"
    try:
        run_cfg = mode_config(cfg, mode)
        stage = "pretrain"
        prepared = prepared or prepare_experiment(cfg, dataset)
        net = prepared.net.copy()
        tasks = prepared.tasks
        stage = "split"
        split = split_network(net, run_cfg.l_ins)
        frozen_before = [net.layer(i).digest() for i in split.frozen_indices]
        if mode == "no-replay":
            store = None
        elif store is None:
            stage = "prepare-replay"
            store = prepare_replay(net, split, tasks, run_cfg)
        latent_bytes = store.total_bytes if store is not None else 0

        old = [c for c in range(dataset.classes) if c != tasks.held_out_class]
        new = [tasks.held_out_class]
        test_x, test_y = raster(prepared.test, run_cfg.t_step)
        cl_x, cl_y = raster(tasks.ts_cl, run_cfg.t_step)

        def metrics(model):
            full = evaluate(model, (test_x, test_y), run_cfg.t_step, cfg=run_cfg)
            o = evaluate(model, (test_x, test_y), run_cfg.t_step, old, cfg=run_cfg)
            n = evaluate(model, (test_x, test_y), run_cfg.t_step, new, cfg=run_cfg)
            tr = evaluate(model, (cl_x, cl_y), run_cfg.t_step, cfg=run_cfg)
            return {"old_top1": o.accuracy, "new_top1": n.accuracy,
                    "combined_top1": full.accuracy, "new_train_top1": tr.accuracy}

        rows = [ReportRow(0, **metrics(net), wall_latency=0.0, latency_model=0, synop_count=0,
                          neuron_updates=0, energy_proxy=0.0, latent_bytes=latent_bytes)]
        stage = "cl-train"
        optimizer = Optimizer(OptimizerConfig(run_cfg.effective_eta_cl, run_cfg.optimizer))
        rng = np.random.default_rng([cfg.seed, 3])
        history = ncl_train(net, split, store, tasks, run_cfg, eval_fn=metrics, rng=rng,
                            optimizer=optimizer)
        latency, synops, updates = 0.0, 0, 0
        for ep in history:
            latency += ep.wall_latency
            synops += ep.ops.synops
            updates += ep.ops.neuron_updates
            energy = energy_model.e_synop * synops + energy_model.e_neuron * updates
            rows.append(ReportRow(ep.epoch, **ep.metrics, wall_latency=latency,
                                  latency_model=updates, synop_count=synops,
                                  neuron_updates=updates, energy_proxy=energy,
                                  latent_bytes=latent_bytes))
    except EventFormatError:
        raise
    except SnnclError as exc:
        # name the stage that failed; the exception type (and exit code) is kept
        raise type(exc)(f"[{mode}/{stage}] {exc}") from exc
    report = ExperimentReport(mode, run_cfg, rows, net=net, store=store,
                              pre_cl_old_top1=rows[0].old_top1,
                              frozen_digests_before=frozen_before,
                              frozen_digests_after=[net.layer(i).digest() for i in split.frozen_indices])
    report.checkpoint = checkpoint_bytes(net, optimizer, rng, extra={"mode": mode, "l_ins": run_cfg.l_ins})
    report.manifest = build_manifest(cfg, run_cfg, mode, dataset, store)
    if out_dir is not None:
        report.write(out_dir, figures=figures)
    return report


def build_manifest(cfg: RunConfig, run_cfg: RunConfig, mode, dataset: EventDataset, store=None):
    manifest = {
        "mode": mode,
        "config": cfg.to_dict(),
        "effective": {
            "t_step": run_cfg.t_step,
            "eta_cl": run_cfg.effective_eta_cl,
            "chunk": run_cfg.effective_chunk,
            "adaptive_threshold": run_cfg.adaptive_threshold,
        },
        "dataset": {**asdict(dataset.manifest), "sha256": dataset.digest()},
        "code_version": __version__,
        "numpy": np.__version__,
        "python": platform.python_version(),
    }
    if store is not None:
        report = latent_memory_report(store)
        manifest["latent_store"] = {"entries": len(store), "total_bytes": report.total_bytes,
                                    "payload_bytes": report.payload_bytes}
    return manifest


def interleaved_latency(cfg: RunConfig, dataset: EventDataset, modes=("spikinglr", "replay4ncl"), *,
                        prepared: Optional[Prepared] = None):
    """Continual phase of several modes, alternating one epoch at a time.

    Load on the machine then drifts across all modes alike, so per-epoch wall
    latencies are comparable. Training is identical to separate runs with the
    same seed. Returns ``({mode: [ClEpoch, ...]}, {mode: trained network})``.
    """
    prepared = prepared or prepare_experiment(cfg, dataset)
    state = {}
    for mode in modes:
        run_cfg = mode_config(cfg, mode)
        net = prepared.net.copy()
        split = split_network(net, run_cfg.l_ins)
        store = None if mode == "no-replay" else prepare_replay(net, split, prepared.tasks, run_cfg)
        optimizer = Optimizer(OptimizerConfig(run_cfg.effective_eta_cl, run_cfg.optimizer))
        rng = np.random.default_rng([cfg.seed, 3])
        state[mode] = (net, split, store, replace(run_cfg, e_cl=1), optimizer, rng)
    history = {mode: [] for mode in modes}
    for ep in range(cfg.e_cl):
        for mode in modes:
            net, split, store, one, optimizer, rng = state[mode]
            [record] = ncl_train(net, split, store, prepared.tasks, one, rng=rng, optimizer=optimizer)
            record.epoch = ep + 1
            history[mode].append(record)
    return history, {mode: state[mode][0] for mode in modes}


SWEEP_AXES = ("t_step", "l_ins")


def sweep(base: RunConfig, axis, values: Sequence, dataset: EventDataset, mode="replay4ncl", *,
          prepared: Optional[Prepared] = None, out_dir=None, figures=True):
    """Run ``run_experiment`` for each value of ``axis``; pre-training is shared.

    Returns ``{value: ExperimentReport}`` in the given order.
    """
    if axis not in SWEEP_AXES:
        raise ContractError(f"sweep axis must be one of {SWEEP_AXES}")
    if not values:
        raise ContractError("sweep axis has no values")
    prepared = prepared or prepare_experiment(base, dataset)
    reports = {}
    for value in values:
        cfg = replace(base, **{axis: value})
        log.info("sweep %s=%s", axis, value)
        reports[value] = run_experiment(cfg, dataset, mode, prepared=prepared, figures=False)
    if out_dir is not None:
        write_sweep(reports, axis, out_dir, figures=figures)
    return reports


def sweep_csv(reports, axis) -> str:
    rows, keys, modes = [], [], []
    for value, rep in reports.items():
        for row in rep.rows:
            rows.append(row)
            keys.append(value)
            modes.append(rep.mode)
    return rows_to_csv(rows, {axis: keys, "mode": modes})


def write_sweep(reports, axis, out_dir, figures=True):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"sweep_{axis}.csv").write_text(sweep_csv(reports, axis))
    for value, rep in reports.items():
        rep.write(out / f"{axis}_{value}", figures=False)
    if figures:
        from .plotting import plot_sweep
        plot_sweep(reports, axis, out / f"sweep_{axis}.png")
    return out
