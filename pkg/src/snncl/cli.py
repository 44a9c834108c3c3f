"""Command-line entry point.

Exit codes: 0 success, 2 configuration or contract error, 3 data error,
4 numeric error.
"""
from __future__ import annotations

import argparse
import logging
import sys
import typing
from dataclasses import fields, replace
from pathlib import Path

import numpy as np
import yaml

from .continual import RunConfig, prepare_replay, raster
from .data import DEFAULT_DURATION, load_events, synth_generate, write_events
from .errors import ConfigError, DataError, SnnclError
from .harness import (MODES, SWEEP_AXES, Prepared, evaluate, mode_config, prepare_experiment,
                      run_experiment, split_data, sweep)
from .replay import LatentStore, latent_memory_report, split_network
from .training import load_checkpoint, save_checkpoint

log = logging.getLogger("snncl")


# --- configuration -------------------------------------------------------------

def _field_kind(f):
    """(parser, is_optional) for a RunConfig field."""
    hint = typing.get_type_hints(RunConfig)[f.name]
    optional = type(None) in typing.get_args(hint)
    if optional:
        hint = next(a for a in typing.get_args(hint) if a is not type(None))
    return hint, optional


def _parse_hidden(text):
    try:
        return tuple(int(v) for v in str(text).split(",") if v.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated widths, got {text!r}") from None


def _optional(parse):
    def convert(text):
        return None if str(text).lower() == "none" else parse(text)
    return convert


def add_config_flags(parser):
    group = parser.add_argument_group("run configuration (overrides --config)")
    group.add_argument("--config", type=Path, help="YAML file with run configuration keys")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        hint, optional = _field_kind(f)
        if hint is bool:
            group.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
            continue
        parse = _parse_hidden if f.name == "hidden" else hint
        if optional:
            parse = _optional(parse)
        group.add_argument(flag, dest=f.name, type=parse, default=None, metavar=f.name.upper())


def read_config_file(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text) or {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return {str(k).replace("-", "_"): v for k, v in data.items()}


def resolve_config(args, base=None) -> RunConfig:
    """Defaults < ``base`` (e.g. from a checkpoint) < config file < flags."""
    values = dict(base or {})
    if getattr(args, "config", None) is not None:
        values.update(read_config_file(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    try:
        return RunConfig.from_dict(values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


# --- data --------------------------------------------------------------------

def add_data_flags(parser):
    group = parser.add_argument_group("dataset")
    group.add_argument("--data", type=Path, help="EVT1 event file; omit for the built-in synthetic set")
    group.add_argument("--duration", type=float, default=DEFAULT_DURATION,
                       help="recording length in seconds for EVT1 files")
    group.add_argument("--synth-classes", type=int, default=8)
    group.add_argument("--synth-samples", type=int, default=64, help="samples per class")
    group.add_argument("--synth-channels", type=int, default=48)
    group.add_argument("--synth-seed", type=int, default=0)


def load_dataset(args):
    if args.data is None:
        return synth_generate(args.synth_classes, args.synth_samples, args.synth_channels,
                              seed=args.synth_seed)
    try:
        return load_events(args.data, duration=args.duration)
    except OSError as exc:
        raise DataError(f"cannot read {args.data}: {exc.strerror}") from None


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc.strerror}") from None


def _prepared_from_checkpoint(args, dataset):
    ckpt = _checkpoint(args.checkpoint)
    cfg = resolve_config(args, ckpt.extra.get("config"))
    train, test, tasks = split_data(cfg, dataset)
    return cfg, Prepared(train, test, tasks, ckpt.net)


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(args):
    ds = synth_generate(args.classes, args.samples_per_class, args.channels, seed=args.seed,
                        duration=args.duration)
    write_events(ds, args.out)
    print(f"wrote {len(ds)} samples ({ds.classes} classes, {ds.channels} channels) to {args.out}")
    return 0


def cmd_pretrain(args):
    cfg = resolve_config(args)
    dataset = load_dataset(args)
    prepared = prepare_experiment(cfg, dataset)
    extra = {"stage": "pretrain", "config": cfg.to_dict(), "dataset_sha256": dataset.digest()}
    save_checkpoint(args.out, prepared.net, extra=extra)
    last = prepared.history[-1] if prepared.history else None
    if last is not None:
        print(f"epoch {last.epoch}: loss {last.loss:.4f}, train top-1 {last.accuracy:.4f}")
    print(f"wrote {args.out}")
    return 0


def cmd_prepare_replay(args):
    dataset = load_dataset(args)
    cfg, prepared = _prepared_from_checkpoint(args, dataset)
    run_cfg = mode_config(cfg, args.mode)
    split = split_network(prepared.net, run_cfg.l_ins)
    store = prepare_replay(prepared.net, split, prepared.tasks, run_cfg)
    store.save(args.out)
    mem = latent_memory_report(store)
    print(f"{len(store)} entries, T={store.timesteps}, width={store.width}, codec={store.codec}, "
          f"{mem.total_bytes} bytes (payload {mem.payload_bytes})")
    print(f"wrote {args.out}")
    return 0


def cmd_cl_train(args):
    dataset = load_dataset(args)
    cfg, prepared = _prepared_from_checkpoint(args, dataset)
    store = None
    if args.store is not None:
        try:
            store = LatentStore.load(args.store)
        except OSError as exc:
            raise DataError(f"cannot read latent store {args.store}: {exc.strerror}") from None
    report = run_experiment(cfg, dataset, args.mode, prepared=prepared, store=store,
                            out_dir=args.out_dir, figures=not args.no_figures)
    _print_final(report)
    return 0


def cmd_eval(args):
    dataset = load_dataset(args)
    cfg, prepared = _prepared_from_checkpoint(args, dataset)
    subset = {"test": prepared.test, "train": prepared.train, "all": dataset}[args.split]
    classes = None if args.classes is None else _parse_hidden(args.classes)
    x, y = raster(subset, cfg.t_step)
    result = evaluate(prepared.net, (x, y), cfg.t_step, classes, cfg=cfg)
    print(f"top-1 {result.accuracy:.4f} ({result.correct}/{result.total}) at T={cfg.t_step}, "
          f"l_ins={cfg.l_ins}")
    print("confusion (rows: true class, columns: predicted)")
    for i, row in enumerate(result.confusion):
        print(f"{i:>3} " + " ".join(f"{v:>4}" for v in row))
    if args.out is not None:
        np.savetxt(args.out, result.confusion, fmt="%d", delimiter=",")
    return 0


def cmd_run(args):
    cfg = resolve_config(args)
    dataset = load_dataset(args)
    modes = MODES if args.mode == "all" else (args.mode,)
    prepared = prepare_experiment(cfg, dataset)
    for mode in modes:
        out = None if args.out_dir is None else Path(args.out_dir) / mode
        report = run_experiment(cfg, dataset, mode, prepared=prepared, out_dir=out,
                                figures=not args.no_figures)
        _print_final(report)
    return 0


def cmd_sweep(args):
    cfg = resolve_config(args)
    dataset = load_dataset(args)
    try:
        values = [int(v) for v in args.values.split(",") if v.strip()]
    except ValueError:
        raise ConfigError(f"--values must be comma-separated integers, got {args.values!r}") from None
    reports = sweep(cfg, args.axis, values, dataset, args.mode, out_dir=args.out_dir,
                    figures=not args.no_figures)
    for value, rep in reports.items():
        print(f"{args.axis}={value}: ", end="")
        _print_final(rep)
    return 0


def _print_final(report):
    f = report.final
    print(f"{report.mode}: old {f.old_top1:.4f}, new {f.new_top1:.4f}, combined {f.combined_top1:.4f}, "
          f"latency {f.wall_latency:.2f}s, energy {f.energy_proxy:.4g}, latent {f.latent_bytes} B")


def build_parser():
    parser = argparse.ArgumentParser(prog="snncl", description="Spiking continual learning with latent replay")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic EVT1 dataset")
    p.add_argument("--classes", type=int, default=8)
    p.add_argument("--samples-per-class", type=int, default=64)
    p.add_argument("--channels", type=int, default=48)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=DEFAULT_DURATION)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("pretrain", help="pre-train on the old classes and save a checkpoint")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("prepare-replay", help="build the compressed latent replay store")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--mode", choices=[m for m in MODES if m != "no-replay"], default="replay4ncl")
    p.add_argument("--out", type=Path, required=True)
    p.set_defaults(func=cmd_prepare_replay)

    p = sub.add_parser("cl-train", help="continual phase from a pre-trained checkpoint")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--store", type=Path, help="latent store from prepare-replay; built when omitted")
    p.add_argument("--mode", choices=MODES, default="replay4ncl")
    p.add_argument("--out-dir", type=Path, required=True)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_cl_train)

    p = sub.add_parser("eval", help="top-1 accuracy and confusion matrix of a checkpoint")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--split", choices=("test", "train", "all"), default="test")
    p.add_argument("--classes", help="comma-separated class filter")
    p.add_argument("--out", type=Path, help="write the confusion matrix as CSV")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("run", help="pretrain, prepare replay and continual training end to end")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--mode", choices=(*MODES, "all"), default="replay4ncl")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="repeat the run over timesteps or insertion layers")
    add_data_flags(p)
    add_config_flags(p)
    p.add_argument("--axis", choices=SWEEP_AXES, required=True)
    p.add_argument("--values", required=True, help="comma-separated values, e.g. 10,20,40")
    p.add_argument("--mode", choices=MODES, default="replay4ncl")
    p.add_argument("--out-dir", type=Path)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SnnclError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
