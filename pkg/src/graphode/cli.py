"""``graphode`` command line: one run directory, one resolved config, fixed file names.

Run-directory layout::

    manifest.json            synth: record paths, seeds, event windows
    records/<name>.grsg      synth: binary signal records
    graphs/<name>.json       featurize: spectral graph sequences
    config.resolved.json     every command: the config it ran with
    history.jsonl            train (rewritten), finetune (appended)
    checkpoint.json/.bin     train, finetune
    metrics.json             eval
    forecast.json            forecast
    field.csv, field.json    field

Exit status: 0 success, 2 validation failure, 1 internal error.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from .autodiff import load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, apply_override, load_config
from .data import RecordGraphs, WindowDataset, corpus_specs
from .forecaster import ForecastResult
from .graphs import SpectralGraphSequence
from .metrics import SingleClassError
from .model import Model
from .neural_ode import GridSpec, export_field_grid, save_field_json
from .pipeline import Splits, build_model, featurize_all, make_splits
from .signals import RecordFormatError, generate_synthetic_record, read_record, write_record
from .training import (evaluate, finetune_classifier, forecast_predictions, train_forecaster,
                       write_history)

log = logging.getLogger("graphode")

VALIDATION_ERRORS = (ConfigError, SingleClassError, RecordFormatError, FileExistsError, FileNotFoundError,
                     ValueError, KeyError)


class CliFailure(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


@contextmanager
def step(module: str, op: str):
    """Tag any failure with the module and operation it came from."""
    try:
        yield
    except CliFailure:
        raise
    except VALIDATION_ERRORS as err:
        raise CliFailure(2, f"{module}.{op}: {err}") from err
    except Exception as err:  # noqa: BLE001 - every other failure is an internal error
        raise CliFailure(1, f"{module}.{op}: internal error: {type(err).__name__}: {err}") from err


# ---------------------------------------------------------------- config and run dir

def resolve_config(args) -> RunConfig:
    run = Path(args.out)
    path = args.config
    if path is None and (run / "config.resolved.json").exists():
        path = run / "config.resolved.json"
    cfg = load_config(path)
    if args.seed is not None:
        if args.command == "synth":
            cfg = dataclasses.replace(cfg, corpus=dataclasses.replace(cfg.corpus, seed=args.seed))
        else:
            cfg = dataclasses.replace(cfg, train=dataclasses.replace(cfg.train, seed=args.seed))
    for item in args.set or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        cfg = apply_override(cfg, key, value)
    return cfg


def echo_config(run: Path, cfg: RunConfig) -> None:
    (run / "config.resolved.json").write_text(cfg.dumps())


def _refuse_overwrite(path: Path, force: bool) -> None:
    if path.exists() and not force:
        raise FileExistsError(f"{path} exists; pass --force to overwrite")


def load_manifest(run: Path) -> dict:
    path = run / "manifest.json"
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `graphode synth` first")
    return json.loads(path.read_text())


def load_record_graphs(run: Path) -> list[RecordGraphs]:
    out = []
    for entry in load_manifest(run)["records"]:
        gpath = run / "graphs" / f"{entry['name']}.json"
        if not gpath.exists():
            raise FileNotFoundError(f"{gpath} not found; run `graphode featurize` first")
        obj = json.loads(gpath.read_text())
        record = read_record(run / entry["path"])
        out.append(RecordGraphs(entry["name"], SpectralGraphSequence.from_json(obj), record.samples.mean(axis=0),
                                np.asarray(obj["epoch_starts"], dtype=np.int64), int(obj["epoch_length"]),
                                bool(obj["has_event"])))
    return out


def load_model(run: Path, splits: Splits, cfg: RunConfig) -> Model:
    stem = run / "checkpoint"
    if not stem.with_suffix(".json").exists():
        raise FileNotFoundError(f"{stem}.json not found; run `graphode train` first")
    state, extra = load_checkpoint(stem)
    model = build_model(splits, cfg)
    model.load_state_dict(state)
    return model


def save_model(run: Path, model: Model, cfg: RunConfig, stage: str, best_epoch: int) -> None:
    save_checkpoint(run / "checkpoint", model.state_dict(),
                    {"config": cfg.to_json(), "stage": stage, "best_epoch": best_epoch,
                     "n_nodes": model.n_nodes, "n_bins": model.n_bins})


# ---------------------------------------------------------------- commands

def cmd_synth(args, cfg: RunConfig, run: Path) -> None:
    _refuse_overwrite(run / "manifest.json", args.force)
    (run / "records").mkdir(parents=True, exist_ok=True)
    entries = []
    with step("signal_pipeline", "generate_synthetic_record"):
        for i, spec in enumerate(corpus_specs(cfg.corpus)):
            name = f"rec{i:03d}"
            rel = f"records/{name}.grsg"
            write_record(generate_synthetic_record(spec), run / rel)
            entries.append({"name": name, "path": rel, "seed": int(spec.seed),
                            "event_windows": [list(w) for w in spec.event_windows],
                            "has_event": bool(spec.event_windows), "channels": spec.channels,
                            "sample_rate": spec.sample_rate, "duration_s": spec.duration_s})
    (run / "manifest.json").write_text(json.dumps({"corpus": dataclasses.asdict(cfg.corpus), "records": entries},
                                                  indent=1, sort_keys=True) + "\n")
    log.info("wrote %d records to %s", len(entries), run / "records")


def cmd_featurize(args, cfg: RunConfig, run: Path) -> None:
    entries = load_manifest(run)["records"]
    gdir = run / "graphs"
    if gdir.exists() and any(gdir.iterdir()):
        _refuse_overwrite(gdir, args.force)
    gdir.mkdir(parents=True, exist_ok=True)
    named = []
    for entry in entries:
        with step("signal_pipeline", "read_record"):
            named.append((entry["name"], read_record(run / entry["path"])))
    with step("graph_builder", "build_graph_sequence"):
        records = featurize_all(named, cfg, args.threads)
    for rec in records:
        rec.graphs.save(gdir / f"{rec.name}.json", name=rec.name, epoch_starts=rec.epoch_starts.tolist(),
                        epoch_length=rec.epoch_length, has_event=rec.has_event)
    log.info("featurized %d records into %s", len(records), gdir)


def _splits(run: Path, cfg: RunConfig) -> Splits:
    with step("training_eval", "load_dataset"):
        return make_splits(load_record_graphs(run), cfg)


def cmd_train(args, cfg: RunConfig, run: Path) -> None:
    _refuse_overwrite(run / "checkpoint.json", args.force)
    splits = _splits(run, cfg)
    with step("training_eval", "train_forecaster"):
        model = build_model(splits, cfg)
        result = train_forecaster(model, splits.train, splits.val, cfg.train, args.threads,
                                  log=lambda rec: log.info("%s", rec))
    write_history(result.history, run / "history.jsonl")
    save_model(run, model, cfg, "forecast_pretrain", result.best_epoch)


def cmd_finetune(args, cfg: RunConfig, run: Path) -> None:
    splits = _splits(run, cfg)
    with step("training_eval", "load_checkpoint"):
        model = load_model(run, splits, cfg)
    with step("training_eval", "finetune_classifier"):
        result = finetune_classifier(model, splits.train, splits.val, cfg.train, args.threads,
                                     log=lambda rec: log.info("%s", rec))
    write_history(result.history, run / "history.jsonl", append=True)
    save_model(run, model, cfg, "classify_finetune", result.best_epoch)


def _split(splits: Splits, name: str) -> WindowDataset:
    return {"train": splits.train, "val": splits.val, "test": splits.test}[name]


def cmd_eval(args, cfg: RunConfig, run: Path) -> None:
    splits = _splits(run, cfg)
    with step("training_eval", "load_checkpoint"):
        model = load_model(run, splits, cfg)
    with step("training_eval", "evaluate"):
        report = evaluate(model, _split(splits, args.split), cfg.train, cfg.threshold_policy, args.threads)
    report.save(run / "metrics.json")
    log.info("%s", report)


def cmd_forecast(args, cfg: RunConfig, run: Path) -> None:
    horizon = args.horizon or cfg.train.horizon
    splits = _splits(run, cfg)
    with step("training_eval", "load_checkpoint"):
        model = load_model(run, splits, cfg)
    with step("forecaster", "decode_trajectory"):
        base = _split(splits, args.split)
        ds = WindowDataset(base.records, cfg.train.obs_len, horizon, cfg.train.sample_stride)
        if not 0 <= args.sample < len(ds):
            raise ValueError(f"sample {args.sample} out of range for {len(ds)} windows")
        one = WindowDataset(ds.records, ds.obs_len, horizon, ds.stride, [ds.index[args.sample]])
        predicted = forecast_predictions(model, one, cfg.train)[0]
        result = ForecastResult.build(predicted, one.all().future[0], cfg.train.tau)
    result.save(run / "forecast.json")
    log.info("forecast %d steps for window %d", horizon, args.sample)


def cmd_field(args, cfg: RunConfig, run: Path) -> None:
    splits = _splits(run, cfg)
    with step("training_eval", "load_checkpoint"):
        model = load_model(run, splits, cfg)
    with step("neural_ode", "export_field_grid"):
        ds = _split(splits, args.split)
        rng = np.random.default_rng(cfg.train.seed)
        refs = np.concatenate([model.encode(ds.batch(range(k, min(k + cfg.train.eval_batch_size, len(ds)))),
                                            rng=rng)[0].data
                               for k in range(0, len(ds), cfg.train.eval_batch_size)])
        grid = export_field_grid(model.field_numpy, refs, GridSpec(cfg.field_resolution))
    grid.write_csv(run / "field.csv")
    save_field_json(grid, run / "field.json")
    log.info("wrote %d field arrows", len(grid.rows))


COMMANDS = {"synth": cmd_synth, "featurize": cmd_featurize, "train": cmd_train, "finetune": cmd_finetune,
            "eval": cmd_eval, "forecast": cmd_forecast, "field": cmd_field}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run config JSON (default: <out>/config.resolved.json)")
    common.add_argument("--out", type=Path, required=True, help="run directory")
    common.add_argument("--seed", type=int, help="corpus seed for synth, training seed otherwise")
    common.add_argument("--threads", type=int, default=1, help="workers for batch-parallel sections")
    common.add_argument("--force", action="store_true", help="overwrite existing outputs")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
    common.add_argument("-v", "--verbose", action="store_true")
    parser = argparse.ArgumentParser(
        prog="graphode", description="Synthesize, featurize, train, evaluate and inspect one run directory.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name in ("eval", "forecast", "field"):
            p.add_argument("--split", choices=("train", "val", "test"), default="test")
        if name == "forecast":
            p.add_argument("--horizon", type=int, default=0, help="forecast steps K (default: train.horizon)")
            p.add_argument("--sample", type=int, default=0, help="window index within the split")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.seed is not None and not 0 <= args.seed < 2 ** 64:
            raise CliFailure(2, "cli.parse_args: --seed must be an unsigned 64-bit integer")
        if args.threads < 1:
            raise CliFailure(2, "cli.parse_args: --threads must be >= 1")
        with step("cli", "resolve_config"):
            cfg = resolve_config(args)
        run = Path(args.out)
        with step("cli", "prepare_run_dir"):
            run.mkdir(parents=True, exist_ok=True)
        with step("cli", args.command):
            COMMANDS[args.command](args, cfg, run)
            echo_config(run, cfg)
    except CliFailure as err:
        print(f"graphode {args.command}: {err}", file=sys.stderr)
        return err.code
    return 0


if __name__ == "__main__":
    sys.exit(main())
