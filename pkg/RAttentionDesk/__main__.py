#!/usr/bin/env python3
"""__main__.py
usage: RAttentionDesk [-h] [-v] {verify,train,bench,analyze} ...

Desk-scale workbench for sliding-window attention with a residual linear
attention branch.

subcommands:
  verify      Run the numerical checks and write a JSON report.
  train       Train on the out-of-window recall task.
  bench       Time the chunkwise kernels over chunk sizes and checkpoint strides.
  analyze     Tabulate the analytical decode step-time speedups.

Exit codes: 0 success, 1 failed check or diverged run, 2 configuration error.
"""
from __future__ import annotations
import argparse
from dataclasses import dataclass, fields
from enum import StrEnum
import logging
import os
import sys
from typing import Any, Dict, List
import numpy as np
import pandas as pd

from attention import AttnConfig
from rattention_layer import LocalVariant
from model import Model, ModelConfig
from recall_task import RecallTask
from training import DivergenceError, TrainConfig, evaluate_length_generalization, train
from efficiency import (
    SPEEDUP_COLUMNS,
    AnalyzeConfig,
    HardwareProfile,
    crossover_batch,
    hardware_profile,
    parse_int_list,
    speedup_table,
    variant_pair,
)
from bench import BenchConfig, run_bench
from verify import UnknownFilterError, run_checks
from save_load import ConfigError, ConfigLoader, TableLoader

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2


class Subcommand(StrEnum):
    VERIFY = "verify"
    TRAIN = "train"
    BENCH = "bench"
    ANALYZE = "analyze"


class Precision(StrEnum):
    F32 = "f32"
    F64 = "f64"

    @property
    def dtype(self) -> Any:
        return np.float32 if self == Precision.F32 else np.float64


@dataclass
class RunConfig:
    subcommand: str = Subcommand.VERIFY.value
    config_path: str = ""
    seed: int = 0
    precision: Precision = Precision.F32
    output_dir: str = "out"

    class Fields(StrEnum):
        SUBCOMMAND = "subcommand"
        CONFIG_PATH = "config_path"
        SEED = "seed"
        PRECISION = "precision"
        OUTPUT_DIR = "output_dir"

    def to_dict(self) -> Dict[RunConfig.Fields, Any]:
        return {
            self.Fields(f.name): (
                getattr(self, f.name).value
                if isinstance(getattr(self, f.name), StrEnum)
                else getattr(self, f.name)
            )
            for f in fields(self)
        }


KNOWN_SECTIONS = {
    "run": RunConfig,
    "model": ModelConfig,
    "attention": AttnConfig,
    "task": RecallTask,
    "train": TrainConfig,
    "hardware": HardwareProfile,
    "analyze": AnalyzeConfig,
    "bench": BenchConfig,
}


def get_arguments(argv: List[str] | None = None) -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog="RAttentionDesk",
        description="Desk-scale workbench for sliding-window attention with a residual linear attention branch.",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Log at DEBUG instead of INFO.")
    subparsers = parser.add_subparsers(dest="subcommand", required=True)

    def common(sub: argparse.ArgumentParser) -> None:
        sub.add_argument("--config", type=str, default=None, help="INI-style config file.")
        sub.add_argument("--seed", type=int, default=None, help="Seed for weights and data. Defaults to 0.")
        sub.add_argument(
            "--precision",
            choices=[p.value for p in Precision],
            default=None,
            help="Parameter precision. Defaults to f32.",
        )
        sub.add_argument("--out", type=str, default=None, help="Output directory. Defaults to 'out'.")

    verify = subparsers.add_parser(Subcommand.VERIFY.value, help="Run the numerical checks.")
    common(verify)
    verify.add_argument(
        "--filter",
        action="append",
        default=None,
        help="Glob (or substring) selecting checks. May be repeated.",
    )
    verify.add_argument(
        "--canary", action="store_true", help="Include the deliberately broken check, which must fail."
    )

    train_parser = subparsers.add_parser(Subcommand.TRAIN.value, help="Train on the recall task.")
    common(train_parser)
    train_parser.add_argument(
        "--variants",
        type=str,
        default=None,
        help="Comma-separated local variants to train side by side, e.g. 'rattention,swa_only'.",
    )
    train_parser.add_argument(
        "--eval-lengths",
        type=str,
        default=None,
        help="Comma-separated lengths for the length-generalization report.",
    )

    bench = subparsers.add_parser(Subcommand.BENCH.value, help="Time the chunkwise kernels.")
    common(bench)

    analyze = subparsers.add_parser(Subcommand.ANALYZE.value, help="Tabulate decode speedups.")
    common(analyze)
    analyze.add_argument(
        "--paper-configs", action="store_true", help="Use the registered 3B and 12B geometries."
    )
    analyze.add_argument("--profile", type=str, default=None, help="Hardware profile name.")
    return parser.parse_args(argv)


def load_config(path: str | None) -> ConfigLoader:
    loader = ConfigLoader(path, sections={})
    if path is not None:
        loader.load()
        loader.check_sections(KNOWN_SECTIONS)
    return loader


def resolve_run(args: argparse.Namespace, loader: ConfigLoader) -> RunConfig:
    """Defaults, then the config's [run] section, then flags."""
    run = loader.build("run", RunConfig, subcommand=args.subcommand, config_path=args.config or "")
    if args.seed is not None:
        run.seed = args.seed
    if args.precision is not None:
        run.precision = Precision(args.precision)
    run.precision = Precision(run.precision)
    if args.out is not None:
        run.output_dir = args.out
    os.makedirs(run.output_dir, exist_ok=True)
    return run


def echo_config(run: RunConfig, sections: Dict[str, Dict[Any, Any]]) -> None:
    """Writes the resolved configuration next to the run's artifacts."""
    ConfigLoader(
        os.path.join(run.output_dir, "run_config.ini"),
        sections={"run": run.to_dict(), **sections},
    ).save()


def cmd_verify(args: argparse.Namespace, run: RunConfig) -> int:
    results = run_checks(args.filter, include_canary=args.canary)
    table = pd.DataFrame([vars(result) for result in results])
    TableLoader(
        os.path.join(run.output_dir, "verify_report.json"),
        table,
        metadata={"seed": run.seed, "filters": args.filter or []},
    ).save()
    echo_config(run, {})
    failed = [result.name for result in results if not result.passed]
    print(f"{len(results) - len(failed)} of {len(results)} checks passed.")
    for name in failed:
        print(f"FAILED: {name}")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_train(args: argparse.Namespace, run: RunConfig, loader: ConfigLoader) -> int:
    attn = loader.build("attention", AttnConfig)
    base_cfg = loader.build("model", ModelConfig, attn=attn)
    train_cfg = loader.build("train", TrainConfig)
    task_values = loader.overrides("task", RecallTask)
    task_values.setdefault("window", attn.window)
    task_values.setdefault("n_local_layers", base_cfg.n_local)
    task_values["seed"] = run.seed
    try:
        task = RecallTask(**task_values)
        task.validate()
    except ValueError as error:
        raise ConfigError(f"Section 'task' is invalid: {error}") from error

    try:
        variants = (
            [LocalVariant(name.strip()) for name in args.variants.split(",")]
            if args.variants
            else [base_cfg.local_variant]
        )
    except ValueError as error:
        raise ConfigError(f"Unknown variant in --variants: {error}") from error
    eval_lengths = parse_int_list(args.eval_lengths) if args.eval_lengths else []
    echo_config(
        run,
        {
            "model": base_cfg.to_dict(),
            "attention": attn.to_dict(),
            "task": task.to_dict(),
            "train": train_cfg.to_dict(),
        },
    )

    reports = []
    for variant in variants:
        cfg = ModelConfig.from_dict({**base_cfg.to_dict(), ModelConfig.Fields.LOCAL_VARIANT: variant.value})
        model = Model(cfg, seed=run.seed, dtype=run.precision.dtype)
        out_dir = os.path.join(run.output_dir, variant.value) if len(variants) > 1 else run.output_dir
        logger.info(f"Training the {variant.value} model into '{out_dir}'")
        try:
            trace = train(model, task, train_cfg, out_dir)
        except DivergenceError as error:
            print(f"Training diverged: {error}")
            return EXIT_FAILED
        print(f"{variant.value}: final accuracy {trace['accuracy'].iloc[-1]:.3f} (chance {task.chance:.3f})")
        if eval_lengths:
            reports.append(evaluate_length_generalization(model, task, eval_lengths))
    if reports:
        TableLoader(
            os.path.join(run.output_dir, "length_generalization.csv"), pd.concat(reports, ignore_index=True)
        ).save()
    return EXIT_OK


def cmd_bench(run: RunConfig, loader: ConfigLoader) -> int:
    cfg = loader.build("bench", BenchConfig)
    echo_config(run, {"bench": cfg.to_dict()})
    table = run_bench(cfg, run.seed)
    TableLoader(os.path.join(run.output_dir, "bench.csv"), table).save()
    print(table.to_string(index=False))
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace, run: RunConfig, loader: ConfigLoader) -> int:
    cfg = loader.build("analyze", AnalyzeConfig)
    profile_name = args.profile or cfg.profile
    try:
        base_profile = hardware_profile(profile_name)
    except KeyError as error:
        raise ConfigError(str(error.args[0])) from error
    values = {key.value: value for key, value in base_profile.to_dict().items()}
    values.update(loader.overrides("hardware", HardwareProfile))
    try:
        hw = HardwareProfile(**values)
    except ValueError as error:
        raise ConfigError(f"Section 'hardware' is invalid: {error}") from error

    if args.paper_configs:
        pairs = {
            name.strip(): variant_pair(name.strip(), cfg.base_window, cfg.ratt_window)
            for name in cfg.models.split(",")
        }
    else:
        attn = loader.build("attention", AttnConfig)
        model_cfg = loader.build("model", ModelConfig, attn=attn)
        base = ModelConfig.from_dict({**model_cfg.to_dict(), ModelConfig.Fields.LOCAL_VARIANT: LocalVariant.SWA_ONLY.value})
        ratt = ModelConfig.from_dict({**model_cfg.to_dict(), ModelConfig.Fields.LOCAL_VARIANT: LocalVariant.RATTENTION.value})
        base.attn.window = cfg.base_window
        ratt.attn.window = cfg.ratt_window
        pairs = {"custom": (base, ratt)}

    table = speedup_table(hw, pairs, parse_int_list(cfg.batches), parse_int_list(cfg.contexts))
    metadata = {
        "seed": run.seed,
        "hardware": hw.to_dict(),
        "crossover_batch": {name: crossover_batch(hw, ratt) for name, (_, ratt) in pairs.items()},
    }
    TableLoader(os.path.join(run.output_dir, "speedup.csv"), table[SPEEDUP_COLUMNS]).save()
    TableLoader(os.path.join(run.output_dir, "speedup_extended.csv"), table).save()
    TableLoader(os.path.join(run.output_dir, "speedup.json"), table, metadata).save()
    echo_config(run, {"analyze": cfg.to_dict(), "hardware": hw.to_dict()})
    peaks = table.groupby("model")["speedup_pct"].max()
    for name, peak in peaks.items():
        print(f"{name}: peak speedup {peak:.1f}% on '{hw.name}'")
    return EXIT_OK


def main(argv: List[str] | None = None) -> int:
    args = get_arguments(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        loader = load_config(args.config)
        run = resolve_run(args, loader)
        match Subcommand(args.subcommand):
            case Subcommand.VERIFY:
                return cmd_verify(args, run)
            case Subcommand.TRAIN:
                return cmd_train(args, run, loader)
            case Subcommand.BENCH:
                return cmd_bench(run, loader)
            case Subcommand.ANALYZE:
                return cmd_analyze(args, run, loader)
    except (ConfigError, UnknownFilterError) as error:
        print(f"Configuration error: {error}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
