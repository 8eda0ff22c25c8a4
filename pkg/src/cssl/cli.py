"""Command-line entry point.

Every subcommand prints one JSON document on stdout and logs to stderr.
Exit codes: 0 success, 1 runtime failure, 2 usage error, 3 configuration error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import pipeline, replay
from .config import ConfigError, RunConfig, load_config
from .data import MANIFEST, DataConfigError, PGMParseError, generate_synth, ingest
from .mae import MaeModel
from .serialization import FormatError

log = logging.getLogger("cssl")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2, 3
_LEVELS = {"error": logging.ERROR, "warning": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}


class CommandError(Exception):
    """Raised by subcommands for problems the user must fix; maps to exit 3."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


def _setup_logging() -> None:
    level = _LEVELS.get(os.environ.get("RD_LOG", "info").lower(), logging.INFO)
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("cssl")
    root.handlers[:] = [handler]
    root.setLevel(level)
    root.propagate = False


# -- shared helpers --------------------------------------------------------------
def _run_config(args) -> RunConfig:
    rc = load_config(args.config)
    if args.seed is not None:
        rc.experiment.seeds = [args.seed]
    if args.out is not None:
        rc.output_dir = Path(args.out).resolve()
    return rc


def _seed(rc: RunConfig) -> int:
    return rc.experiment.seeds[0]


def _seed_dir(rc: RunConfig) -> Path:
    return rc.output_dir / f"seed_{_seed(rc)}"


def _dataset(rc: RunConfig):
    if not (rc.data_dir / MANIFEST).is_file():
        raise CommandError(f"no dataset at {rc.data_dir}; run gen-data first", field="data.dir")
    m = rc.experiment.model
    return ingest(rc.data_dir, (m.height, m.width, m.channels))


def _ensure_data(rc: RunConfig) -> None:
    if not (rc.data_dir / MANIFEST).is_file():
        generate_synth(rc.data, rc.data_dir, force=True)


def _guard(path: Path, force: bool) -> None:
    if path.exists():
        if not force:
            raise CommandError(f"{path} already exists; pass --force to overwrite")
        if path.is_dir():
            shutil.rmtree(path)
        else:
            path.unlink()


def _plans(rc: RunConfig) -> list[pipeline.StagePlan]:
    return pipeline.build_plans(rc.experiment, _seed(rc), _seed_dir(rc))


# -- subcommands -------------------------------------------------------------------
def cmd_gen_data(args, rc: RunConfig) -> dict:
    out = Path(args.out) if args.out is not None else rc.data_dir
    spec = rc.data if args.seed is None else replace(rc.data, seed=args.seed)
    try:
        generate_synth(spec, out, force=args.force)
    except FileExistsError as exc:
        raise CommandError(str(exc), field="data.dir") from None
    ds = ingest(out)
    return {
        "dir": str(out),
        "n_rows": len(ds),
        "domains": sorted(set(ds.domains.tolist())),
        "labels": sorted(set(int(v) for v in ds.labels)),
    }


def cmd_pretrain(args, rc: RunConfig) -> dict:
    plan = _plans(rc)[0]
    if "fd" in plan.losses:
        raise CommandError("the first stage cannot use the fd loss", field="stages/0/losses")
    plan.buffer_out = None
    _guard(plan.checkpoint, args.force)
    result = pipeline.run_stage(plan, rc.experiment.train, _dataset(rc), rc.experiment.model)
    return {"stage": plan.name, "checkpoint": str(result.checkpoint), "final": result.losses[-1]}


def cmd_sample_buffer(args, rc: RunConfig) -> dict:
    plans = _plans(rc)
    producers = [p for p in plans if p.buffer_out is not None]
    if not producers:
        raise CommandError("no stage declares buffer_out", field="stages/0/buffer_out")
    plan = producers[0]
    ckpt = Path(args.checkpoint) if args.checkpoint else plan.checkpoint
    if not (ckpt / "config.json").is_file():
        raise CommandError(f"missing checkpoint for stage {plan.name!r}: {ckpt}", field="checkpoint")
    _guard(plan.buffer_out, args.force)
    model = MaeModel.load(ckpt)
    train = _dataset(rc).subset(domain=plan.dataset_id, split="train")
    buf = pipeline.sample_stage_buffer(model, train, rc.experiment.train, seed=plan.seed, source_stage=plan.index)
    replay.save(buf, plan.buffer_out)
    return {
        "buffer": str(plan.buffer_out),
        "entries": len(buf),
        "clusters": len({e.cluster_id for e in buf.entries}),
        "token_shape": list(buf.token_shape),
    }


def cmd_cssl(args, rc: RunConfig) -> dict:
    plans = _plans(rc)[1:]
    if not plans:
        raise CommandError("the config has a single stage; nothing to continue", field="stages")
    data = _dataset(rc)
    out = []
    for plan in plans:
        if plan.init_from is not None and not (plan.init_from / "config.json").is_file():
            raise CommandError(f"missing checkpoint {plan.init_from}; run pretrain first", field="init_from")
        for buf in plan.buffer_in:
            if not buf.is_file():
                raise CommandError(f"missing buffer {buf}; run sample-buffer first", field="buffer_in")
        _guard(plan.checkpoint, args.force)
        result = pipeline.run_stage(plan, rc.experiment.train, data, rc.experiment.model)
        out.append({"stage": plan.name, "checkpoint": str(result.checkpoint), "final": result.losses[-1]})
    return {"stages": out}


def cmd_finetune(args, rc: RunConfig) -> dict:
    exp = rc.experiment
    ckpt = Path(args.checkpoint) if args.checkpoint else _plans(rc)[-1].checkpoint
    if not (ckpt / "config.json").is_file():
        raise CommandError(f"missing encoder checkpoint: {ckpt}", field="checkpoint")
    target = _seed_dir(rc) / "classifier"
    _guard(target, args.force)
    data = _dataset(rc)
    domains = list(exp.finetune_domains)
    result = pipeline.finetune_probe(
        MaeModel.load(ckpt),
        data.subset(domain=domains, split="train"),
        data.subset(domain=domains, split="val"),
        exp.n_classes,
        exp.finetune,
        seed=_seed(rc),
    )
    result.classifier.save(target)
    return {"classifier": str(target), "best_epoch": result.best_epoch, "best_val_acc": result.best_val_acc}


def cmd_evaluate(args, rc: RunConfig) -> dict:
    ckpt = Path(args.checkpoint) if args.checkpoint else _seed_dir(rc) / "classifier"
    if not (ckpt / "config.json").is_file():
        raise CommandError(f"missing classifier checkpoint: {ckpt}", field="checkpoint")
    clf = pipeline.Classifier.load(ckpt)
    test = _dataset(rc).subset(domain=list(rc.experiment.eval_domains), split="test")
    report = pipeline.evaluate(clf, test)
    report.seeds = [_seed(rc)]
    return report.to_dict()


def cmd_run_all(args, rc: RunConfig) -> dict:
    _ensure_data(rc)
    data = _dataset(rc)
    for s in rc.experiment.seeds:
        _guard(rc.output_dir / f"seed_{s}", args.force)
    _guard(rc.output_dir / "report.json", args.force)
    rc.output_dir.mkdir(parents=True, exist_ok=True)
    return pipeline.run_experiment(rc.experiment, data, rc.output_dir)


COMMANDS = {
    "gen-data": (cmd_gen_data, "render the synthetic dual-window dataset"),
    "pretrain": (cmd_pretrain, "train the first stage with the SSL loss"),
    "sample-buffer": (cmd_sample_buffer, "cluster first-stage features into the replay buffer"),
    "cssl": (cmd_cssl, "run the remaining stages with replay distillation"),
    "finetune": (cmd_finetune, "fit a classification head on the final encoder"),
    "evaluate": (cmd_evaluate, "report accuracy, AUC and F1 on the test split"),
    "run-all": (cmd_run_all, "every stage, fine-tuning and evaluation for all seeds"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cssl", description="Continual self-supervised pretraining with latent replay.")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", required=True, help="experiment JSON")
        p.add_argument("--seed", type=int, help="run a single seed instead of the configured list")
        p.add_argument("--out", help="output directory (the dataset directory for gen-data)")
        p.add_argument("--force", action="store_true", help="overwrite existing outputs")
        if name in ("sample-buffer", "finetune", "evaluate"):
            p.add_argument("--checkpoint", help="checkpoint directory to read instead of the default")
    return parser


def _emit(doc: dict) -> None:
    sys.stdout.write(json.dumps(doc, indent=2, sort_keys=True, default=_json_default) + "\n")
    sys.stdout.flush()


def _json_default(obj):
    if isinstance(obj, (np.integer, np.floating)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)  # exits with 2 on usage errors
    handler = COMMANDS[args.command][0]
    try:
        rc = _run_config(args)
        _emit(handler(args, rc))
        return EXIT_OK
    except ConfigError as exc:
        _emit({"error": exc.reason, "pointer": exc.pointer})
        log.error("config error at %r: %s", exc.pointer, exc.reason)
        return EXIT_CONFIG
    except CommandError as exc:
        _emit({"error": str(exc), "field": exc.field})
        log.error("%s", exc)
        return EXIT_CONFIG
    except (pipeline.PipelineConfigError, DataConfigError, PGMParseError, FormatError, replay.BufferFormatError, replay.BufferIntegrityError, replay.BufferConfigError) as exc:
        _emit({"error": str(exc)})
        log.error("%s", exc)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - report anything else as a runtime failure
        _emit({"error": f"{type(exc).__name__}: {exc}"})
        log.exception("command failed")
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
