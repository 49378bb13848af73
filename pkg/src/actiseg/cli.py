"""Command-line experiment harness: gen, pretrain, run, report.

A JSON config file describes the whole experiment (domains, dataset sizes,
loop settings, strategy arms, seeds); command-line flags override file values.
Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError
from .loop import ALL_STRATEGIES, LoopConfig, RunCache, RunRecord, run_strategy
from .metrics import EvalResult, aggregate, evaluate, rows_to_csv, rows_to_text
from .model import SegModel, TrainConfig, TrainSet, load_model, save_model, sgd_epochs, zero_model
from .phantom import Dataset, DomainSpec, default_source_spec, default_target_spec, gen_dataset, load_dataset, save_dataset, splitmix64

_EVAL_STREAM = 0x45564131  # distinct sub-stream tag for held-out eval sets


def eval_spec(spec: DomainSpec) -> DomainSpec:
    """Same domain, disjoint random stream: the held-out evaluation split."""
    return dataclasses.replace(spec, seed=splitmix64(spec.seed ^ _EVAL_STREAM))


def parse_modality_mode(mode: str, num_modalities: int):
    """Return (file tag, modality index or None) for 'multi' / 'single:<l>'."""
    if mode == "multi":
        return "multi", None
    if mode.startswith("single:"):
        try:
            l = int(mode.split(":", 1)[1])
        except ValueError:
            raise ConfigError(f"bad modality mode {mode!r}") from None
        if not 0 <= l < num_modalities:
            raise ConfigError(f"modality {l} out of range [0, {num_modalities})")
        return f"single{l}", l
    raise ConfigError(f"modality mode must be 'multi' or 'single:<l>', got {mode!r}")


@dataclass(frozen=True)
class ExperimentConfig:
    source: DomainSpec = field(default_factory=default_source_spec)
    target: DomainSpec = field(default_factory=default_target_spec)
    n_source_train: int = 40
    n_source_eval: int = 20
    n_train: int = 40
    n_eval: int = 20
    num_classes: int = 2
    loop: LoopConfig = field(default_factory=LoopConfig)
    pretrain_epochs: int = 300
    pretrain_lr0: float = 0.2
    pretrain_batch_voxels: int = 2048
    pretrain_seed: int = 0
    strategies: tuple[str, ...] = ("ours", "random")
    seeds: tuple[int, ...] = (0,)
    modality_mode: str = "multi"
    output_dir: str = "runs"

    def __post_init__(self):
        object.__setattr__(self, "strategies", tuple(self.strategies))
        object.__setattr__(self, "seeds", tuple(int(s) for s in self.seeds))
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if any(s < 0 for s in self.seeds):
            raise ConfigError("seeds must be non-negative")
        if not self.strategies:
            raise ConfigError("strategies must be non-empty")
        unknown = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if unknown:
            raise ConfigError(f"unknown strategies {unknown}; choose from {ALL_STRATEGIES}")
        for name in ("n_source_train", "n_source_eval", "n_train", "n_eval"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.n_train <= self.loop.budget * 4:
            raise ConfigError(
                f"n_train must exceed 4x budget ({self.loop.budget * 4}), got {self.n_train}"
            )
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if self.pretrain_epochs < 0:
            raise ConfigError("pretrain_epochs must be >= 0")
        if self.source.num_modalities != self.target.num_modalities:
            raise ConfigError("source and target must have the same modality count")
        parse_modality_mode(self.modality_mode, self.target.num_modalities)

    def to_json_dict(self) -> dict:
        return {
            "source": self.source.to_json_dict(),
            "target": self.target.to_json_dict(),
            "n_source_train": self.n_source_train,
            "n_source_eval": self.n_source_eval,
            "n_train": self.n_train,
            "n_eval": self.n_eval,
            "num_classes": self.num_classes,
            "loop": self.loop.to_json_dict(),
            "pretrain_epochs": self.pretrain_epochs,
            "pretrain_lr0": self.pretrain_lr0,
            "pretrain_batch_voxels": self.pretrain_batch_voxels,
            "pretrain_seed": self.pretrain_seed,
            "strategies": list(self.strategies),
            "seeds": list(self.seeds),
            "modality_mode": self.modality_mode,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        try:
            d["source"] = DomainSpec.from_json_dict(d["source"])
            d["target"] = DomainSpec.from_json_dict(d["target"])
            d["loop"] = LoopConfig.from_json_dict(d["loop"])
            d["strategies"] = tuple(d["strategies"])
            d["seeds"] = tuple(d["seeds"])
            return cls(**d)
        except (KeyError, TypeError) as exc:
            raise ConfigError(f"bad experiment config: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_json_dict(), sort_keys=True, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        return cls.from_json_dict(json.loads(text))


def default_config(**overrides) -> ExperimentConfig:
    return dataclasses.replace(ExperimentConfig(), **overrides) if overrides else ExperimentConfig()


def load_config(path) -> ExperimentConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise OSError(f"reading {path}: {exc}") from exc
    return ExperimentConfig.from_json(text)


# ---------------------------------------------------------------------------
# dataset plumbing


def build_datasets(config: ExperimentConfig) -> dict[str, Dataset]:
    """All four splits, generated in memory."""
    return {
        "source_train": gen_dataset(config.source, config.n_source_train),
        "source_eval": gen_dataset(eval_spec(config.source), config.n_source_eval),
        "target_train": gen_dataset(config.target, config.n_train),
        "target_eval": gen_dataset(eval_spec(config.target), config.n_eval),
    }


def data_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "data"


def models_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "models"


def records_dir(config: ExperimentConfig) -> Path:
    return Path(config.output_dir) / "records"


def checkpoint_path(config: ExperimentConfig, mode_tag: str) -> Path:
    return models_dir(config) / f"source_{mode_tag}.aseg"


def load_split(config: ExperimentConfig, name: str, modality: int | None) -> Dataset:
    path = data_dir(config) / name
    if not path.exists():
        raise OSError(f"dataset {path} missing; run `actiseg gen` first")
    ds = load_dataset(path)
    return ds if modality is None else ds.modality_subset(modality)


# ---------------------------------------------------------------------------
# commands


def cmd_gen(config: ExperimentConfig) -> int:
    datasets = build_datasets(config)
    base = data_dir(config)
    for name, ds in datasets.items():
        save_dataset(base / name, ds)
        print(f"wrote {len(ds)} samples to {base / name}")
    return 0


def pretrain_from_datasets(
    train_ds: Dataset, eval_ds: Dataset, config: ExperimentConfig
) -> tuple[SegModel, EvalResult]:
    """Train a source model on fully labeled source data; returns (model, eval)."""
    m = train_ds.samples[0].num_modalities
    model = zero_model(m, config.num_classes)
    if config.pretrain_epochs > 0:
        cfg = TrainConfig(
            lr0=config.pretrain_lr0,
            total_epochs=config.pretrain_epochs,
            batch_voxels=config.pretrain_batch_voxels,
            seed=config.pretrain_seed,
        )
        ts = TrainSet.from_labeled(list(zip(train_ds.samples, train_ds.truths)))
        weights, _ = sgd_epochs(model.weights, ts, cfg, 0, config.pretrain_epochs)
        model = SegModel(weights, m, config.num_classes)
    return model, evaluate(model, eval_ds)


def cmd_pretrain(config: ExperimentConfig) -> int:
    mode_tag, modality = parse_modality_mode(config.modality_mode, config.target.num_modalities)
    train_ds = load_split(config, "source_train", modality)
    eval_ds = load_split(config, "source_eval", modality)
    model, ev = pretrain_from_datasets(train_ds, eval_ds, config)
    path = checkpoint_path(config, mode_tag)
    path.parent.mkdir(parents=True, exist_ok=True)
    save_model(path, model)
    print(
        f"pretrained {mode_tag} model ({config.pretrain_epochs} epochs): "
        f"source eval dice {ev.dice_pct:.2f}%, miou {ev.miou_pct:.2f}% -> {path}"
    )
    return 0


def record_basename(mode_tag: str, strategy: str, seed: int) -> str:
    return f"{mode_tag}__{strategy}__s{seed:04d}"


def write_record(directory: Path, mode_tag: str, record: RunRecord, score_dump: bool = False) -> Path:
    """Write the record (and CSVs) with write-then-rename so interrupted runs
    leave no partial files."""
    directory.mkdir(parents=True, exist_ok=True)
    base = record_basename(mode_tag, record.strategy, record.seed)
    out = directory / f"{base}.json"
    payloads = [(out, record.to_json()), (directory / f"{base}.epochs.csv", record.epochs_csv())]
    if score_dump:
        payloads.append((directory / f"{base}.scores.csv", record.scores_csv()))
    for path, text in payloads:
        tmp = path.with_name(path.name + ".tmp")
        try:
            tmp.write_text(text)
            os.replace(tmp, path)
        finally:
            if tmp.exists():
                tmp.unlink()
    return out


def arm_configs(config: ExperimentConfig) -> list[LoopConfig]:
    """One validated LoopConfig per strategy x seed; fails before any run starts."""
    arms = []
    errors = []
    for strategy in config.strategies:
        for seed in config.seeds:
            try:
                arms.append(
                    dataclasses.replace(
                        config.loop,
                        strategy=strategy,
                        seed=seed,
                        train=dataclasses.replace(config.loop.train, seed=seed),
                    )
                )
            except ConfigError as exc:
                errors.append(f"{strategy}/seed {seed}: {exc}")
    if errors:
        raise ConfigError("invalid arms:\n  " + "\n  ".join(errors))
    return arms


_WORKER_CACHE: dict = {}


def _run_arm(payload) -> str:
    """Worker for one strategy x seed arm; safe under process pools."""
    config_json, arm_json, mode_tag, modality, score_dump = payload
    config = ExperimentConfig.from_json(config_json)
    arm = LoopConfig.from_json_dict(json.loads(arm_json))
    key = (config.output_dir, mode_tag)
    if key not in _WORKER_CACHE:
        data = load_split(config, "target_train", modality)
        eval_ds = load_split(config, "target_eval", modality)
        _WORKER_CACHE[key] = (
            data,
            eval_ds,
            load_model(checkpoint_path(config, mode_tag)),
            RunCache(data, eval_ds),
        )
    data, eval_ds, source_model, cache = _WORKER_CACHE[key]
    record = run_strategy(
        data,
        source_model,
        eval_ds,
        arm,
        modality_mode=config.modality_mode,
        extra_config={"experiment": config.to_json_dict()},
        cache=cache,
    )
    path = write_record(records_dir(config), mode_tag, record, score_dump)
    return (
        f"{record_basename(mode_tag, arm.strategy, arm.seed)}: "
        f"final dice {record.final_dice_pct:.2f}%, wrote {path}"
    )


def cmd_run(config: ExperimentConfig, jobs: int = 1, score_dump: bool = False) -> int:
    mode_tag, modality = parse_modality_mode(config.modality_mode, config.target.num_modalities)
    arms = arm_configs(config)
    ckpt = checkpoint_path(config, mode_tag)
    if not ckpt.exists():
        raise OSError(f"checkpoint {ckpt} missing; run `actiseg pretrain` first")
    # fail fast on unreadable inputs before any arm starts
    load_split(config, "target_train", modality)
    load_split(config, "target_eval", modality)
    load_model(ckpt)

    config_json = config.to_json()
    payloads = [
        (config_json, json.dumps(arm.to_json_dict()), mode_tag, modality, score_dump)
        for arm in arms
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for line in pool.map(_run_arm, payloads):
                print(line)
    else:
        for payload in payloads:
            print(_run_arm(payload))
    print(f"{len(arms)} records in {records_dir(config)}")
    return 0


def read_records(directory) -> list[RunRecord]:
    directory = Path(directory)
    if not directory.exists():
        raise OSError(f"records directory {directory} missing")
    paths = sorted(directory.glob("*.json"))
    if not paths:
        raise OSError(f"no run records in {directory}")
    return [RunRecord.from_json(p.read_text()) for p in paths]


def build_report(records: list[RunRecord]) -> dict[str, str]:
    """Comparison and ablation tables from records; pure function of inputs."""
    by_mode: dict[str, list[RunRecord]] = {}
    for rec in records:
        by_mode.setdefault(rec.modality_mode, []).append(rec)
    modes = sorted(by_mode, key=lambda m: (m != "multi", m))
    primary = modes[0]

    def delta_for(recs):
        means = {}
        for strat in ("ours", "oneoff"):
            vals = [r.final_dice_pct for r in recs if r.strategy == strat]
            if vals:
                means[strat] = float(np.mean(vals))
        if "ours" in means and "oneoff" in means:
            return means["ours"] - means["oneoff"]
        return None

    out = {}
    primary_rows = aggregate(by_mode[primary])
    primary_delta = delta_for(by_mode[primary])
    out["report.csv"] = rows_to_csv(primary_rows, primary_delta)
    text = [f"== comparison ({primary}) ==", rows_to_text(primary_rows, primary_delta)]
    for mode in modes[1:]:
        rows = aggregate(by_mode[mode])
        text.append(f"== comparison ({mode}) ==")
        text.append(rows_to_text(rows, delta_for(by_mode[mode])))

    if len(modes) > 1:
        lines = ["modality_mode,n_seeds,dice_mean,dice_std,miou_mean,miou_std"]
        ab_text = []
        for mode in modes:
            ours = [r for r in by_mode[mode] if r.strategy == "ours"]
            if not ours:
                continue
            dices = np.array([r.final_dice_pct for r in ours])
            mious = np.array([r.final_miou_pct for r in ours])
            lines.append(
                f"{mode},{len(ours)},{dices.mean()!r},{dices.std()!r},"
                f"{mious.mean()!r},{mious.std()!r}"
            )
            ab_text.append(
                f"{mode:<12} n={len(ours):<3} dice {dices.mean():6.2f} +/- {dices.std():.2f}"
                f"  miou {mious.mean():6.2f} +/- {mious.std():.2f}"
            )
        out["ablation.csv"] = "\n".join(lines) + "\n"
        text.append("== modality ablation (strategy: ours) ==")
        text.append("\n".join(ab_text) + "\n")

    out["report.txt"] = "\n".join(text)
    return out


def cmd_report(config: ExperimentConfig | None, directory=None) -> int:
    if directory is None:
        if config is None:
            raise ConfigError("report needs a config or an output directory")
        directory = Path(config.output_dir)
    directory = Path(directory)
    records = read_records(directory / "records")
    tables = build_report(records)
    for name, text in tables.items():
        (directory / name).write_text(text)
    sys.stdout.write(tables["report.txt"])
    print(f"report files in {directory}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def parse_seeds(text: str) -> tuple[int, ...]:
    """Accepts 'a..b' (inclusive), a single integer, or a comma list."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            lo, hi = int(lo), int(hi)
            if hi < lo:
                raise ConfigError(f"empty seed range {text!r}")
            return tuple(range(lo, hi + 1))
        if "," in text:
            return tuple(int(p) for p in text.split(",") if p.strip())
        return (int(text),)
    except ValueError:
        raise ConfigError(f"cannot parse seeds {text!r}") from None


def parse_strategies(text: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    if not parts:
        raise ConfigError("empty strategy list")
    return parts


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="actiseg",
        description="Budgeted active adaptation experiments on synthetic multi-modal phantoms",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON experiment config; flags override file values")
        p.add_argument("--output", help="override output directory")

    p_gen = sub.add_parser("gen", help="generate the source/target datasets")
    common(p_gen)

    p_pre = sub.add_parser("pretrain", help="train the source model checkpoint")
    common(p_pre)
    p_pre.add_argument("--modality", help="multi or single:<l>")

    p_run = sub.add_parser("run", help="execute strategy x seed arms")
    common(p_run)
    p_run.add_argument("--strategies", help="comma list, e.g. ours,random,oneoff,upper,lower")
    p_run.add_argument("--seeds", help="a..b inclusive, single value, or comma list")
    p_run.add_argument("--budget", type=int, help="labeling budget")
    p_run.add_argument("--stride", type=int, help="query stride in epochs")
    p_run.add_argument("--jobs", type=int, default=1, help="concurrent arms")
    p_run.add_argument("--score-dump", action="store_true", help="write per-round score CSVs")
    p_run.add_argument("--modality", help="multi or single:<l>")

    p_rep = sub.add_parser("report", help="aggregate run records into tables")
    p_rep.add_argument("directory", nargs="?", help="output directory (defaults to config)")
    common(p_rep)
    return parser


def _effective_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else default_config()
    updates: dict = {}
    if getattr(args, "output", None):
        updates["output_dir"] = args.output
    if getattr(args, "modality", None):
        updates["modality_mode"] = args.modality
    if getattr(args, "strategies", None):
        updates["strategies"] = parse_strategies(args.strategies)
    if getattr(args, "seeds", None):
        updates["seeds"] = parse_seeds(args.seeds)
    loop_updates: dict = {}
    if getattr(args, "budget", None) is not None:
        loop_updates["budget"] = args.budget
    if getattr(args, "stride", None) is not None:
        loop_updates["stride"] = args.stride
    if loop_updates:
        updates["loop"] = dataclasses.replace(config.loop, **loop_updates)
    return dataclasses.replace(config, **updates) if updates else config


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        if args.command == "gen":
            return cmd_gen(_effective_config(args))
        if args.command == "pretrain":
            return cmd_pretrain(_effective_config(args))
        if args.command == "run":
            return cmd_run(_effective_config(args), jobs=args.jobs, score_dump=args.score_dump)
        if args.command == "report":
            config = _effective_config(args) if (args.config or not args.directory) else None
            return cmd_report(config, args.directory)
        raise ConfigError(f"unknown command {args.command!r}")
    except (ConfigError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OSError, FormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
