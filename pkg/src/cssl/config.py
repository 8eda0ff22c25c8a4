"""Experiment configuration: one JSON document validated against a schema.

Validation failures carry a JSON pointer to the offending field so the CLI
can report exactly what is wrong.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, fields
from pathlib import Path

import jsonschema

from .data import SynthDatasetSpec, WindowSpec
from .mae import MaeConfig
from .pipeline import ExperimentConfig, FinetuneConfig, StageSpec, TrainConfig


class ConfigError(ValueError):
    def __init__(self, message: str, pointer: str = ""):
        super().__init__(f"{pointer or '/'}: {message}")
        self.reason = message
        self.pointer = pointer


_NUM = {"type": "number"}
_POS_INT = {"type": "integer", "minimum": 1}
_NAME = {"type": "string", "pattern": "^[A-Za-z0-9_.-]+$"}

SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["model", "stages", "finetune", "seeds"],
    "properties": {
        "data": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "dir": {"type": "string"},
                "n_images": _POS_INT,
                "height": _POS_INT,
                "width": _POS_INT,
                "n_classes": {"type": "integer", "minimum": 2},
                "seed": {"type": "integer", "minimum": 0},
                "windows": {
                    "type": "array",
                    "minItems": 1,
                    "items": {
                        "type": "object",
                        "additionalProperties": False,
                        "required": ["center", "width"],
                        "properties": {"center": _NUM, "width": {"type": "number", "exclusiveMinimum": 0}},
                    },
                },
                "split": {"type": "array", "minItems": 3, "maxItems": 3, "items": {"type": "number", "minimum": 0}},
            },
        },
        "model": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "height": _POS_INT,
                "width": _POS_INT,
                "channels": _POS_INT,
                "patch": _POS_INT,
                "embed_dim": _POS_INT,
                "depth": _POS_INT,
                "decoder_depth": _POS_INT,
                "mlp_hidden": _POS_INT,
                "init_seed": {"type": "integer", "minimum": 0},
            },
        },
        "train": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "lr_peak": {"type": "number", "minimum": 0},
                "warmup_epochs": {"type": "integer", "minimum": 0},
                "betas": {
                    "type": "array",
                    "minItems": 2,
                    "maxItems": 2,
                    "items": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                },
                "weight_decay": {"type": "number", "minimum": 0},
                "gamma": {"type": "number", "minimum": 0},
                "omega": {"type": "number", "exclusiveMinimum": 0, "exclusiveMaximum": 1},
                "mask_rate": {"type": "number", "minimum": 0, "exclusiveMaximum": 1},
                "alpha": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "beta": {"type": "number", "exclusiveMinimum": 0, "maximum": 1},
                "fd_weight": {"type": "number", "minimum": 0},
                "use_bke": {"type": "boolean"},
                "augment": {"type": "boolean"},
            },
        },
        "stages": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "additionalProperties": False,
                "required": ["name", "dataset", "epochs"],
                "properties": {
                    "name": _NAME,
                    "dataset": {"type": "string"},
                    "epochs": _POS_INT,
                    "batch_size": _POS_INT,
                    "losses": {
                        "type": "array",
                        "items": {"enum": ["ssl", "fd"]},
                        "contains": {"const": "ssl"},
                        "uniqueItems": True,
                    },
                    "buffer_in": {"type": "array", "items": _NAME},
                    "buffer_out": {"type": ["string", "null"], "pattern": "^[A-Za-z0-9_.-]+$"},
                    "init_from": {"type": ["string", "null"]},
                    "warmup_epochs": {"type": "integer", "minimum": 0},
                    "lr_peak": {"type": "number", "minimum": 0},
                },
            },
        },
        "finetune": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "epochs": _POS_INT,
                "lr": {"type": "number", "minimum": 0},
                "batch_size": _POS_INT,
                "hidden": {"type": "integer", "minimum": 0},
                "train_encoder": {"type": "boolean"},
                "weight_decay": {"type": "number", "minimum": 0},
                "domains": {"type": "array", "minItems": 1, "items": {"type": "string"}},
            },
        },
        "eval": {
            "type": "object",
            "additionalProperties": False,
            "properties": {
                "domains": {"type": "array", "minItems": 1, "items": {"type": "string"}},
                "recon_seed": {"type": "integer", "minimum": 0},
            },
        },
        "n_classes": {"type": "integer", "minimum": 2},
        "seeds": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
        "output_dir": {"type": "string"},
    },
}

_VALIDATOR = jsonschema.Draft202012Validator(SCHEMA)


def _pointer(path) -> str:
    return "".join(f"/{p}" for p in path)


def _error_pointer(err) -> str:
    """Pointer to the bad field; for missing or unknown keys, the key itself."""
    path = list(err.absolute_path)
    if isinstance(err.instance, dict):
        if err.validator == "required":
            missing = [k for k in err.validator_value if k not in err.instance]
            path += missing[:1]
        elif err.validator == "additionalProperties":
            allowed = set(err.schema.get("properties", {}))
            extra = sorted(k for k in err.instance if k not in allowed)
            path += extra[:1]
    return _pointer(path)


@dataclass
class RunConfig:
    experiment: ExperimentConfig
    data: SynthDatasetSpec
    data_dir: Path
    output_dir: Path
    raw: dict


def _pick(cls, section: dict):
    names = {f.name for f in fields(cls)}
    return {k: v for k, v in section.items() if k in names}


def _semantic_checks(doc: dict) -> None:
    stages = doc["stages"]
    names = [s["name"] for s in stages]
    for i, stage in enumerate(stages):
        ptr = f"/stages/{i}"
        if stage["name"] in names[:i]:
            raise ConfigError(f"duplicate stage name {stage['name']!r}", f"{ptr}/name")
        if "fd" in stage.get("losses", ["ssl"]) and not stage.get("buffer_in"):
            raise ConfigError("the fd loss needs buffer_in", f"{ptr}/buffer_in")
        produced = {s.get("buffer_out") for s in stages[:i]}
        for j, buf in enumerate(stage.get("buffer_in", [])):
            if buf not in produced:
                raise ConfigError(f"buffer {buf!r} is not produced by an earlier stage", f"{ptr}/buffer_in/{j}")
        init = stage.get("init_from", "previous")
        if init not in (None, "previous", "scratch") and init not in names[:i]:
            raise ConfigError(f"init_from {init!r} names no earlier stage", f"{ptr}/init_from")
        warmup = stage.get("warmup_epochs", doc.get("train", {}).get("warmup_epochs", TrainConfig.warmup_epochs))
        if warmup >= stage["epochs"]:
            where = f"{ptr}/warmup_epochs" if "warmup_epochs" in stage else "/train/warmup_epochs"
            raise ConfigError(f"warmup_epochs={warmup} must be < epochs={stage['epochs']}", where)
    train = doc.get("train", {})
    alpha = train.get("alpha", TrainConfig.alpha)
    beta = train.get("beta", TrainConfig.beta)
    if alpha > beta:
        raise ConfigError(f"alpha={alpha} must not exceed beta={beta}", "/train/alpha")
    split = doc.get("data", {}).get("split")
    if split is not None and abs(sum(split) - 1.0) > 1e-9:
        raise ConfigError(f"split fractions sum to {sum(split)}, expected 1", "/data/split")
    model = MaeConfig(**_pick(MaeConfig, doc["model"]))
    if model.height % model.patch or model.width % model.patch:
        raise ConfigError(f"image {model.height}x{model.width} not divisible by patch {model.patch}", "/model/patch")
    data = doc.get("data", {})
    for key in ("height", "width"):
        if key in data and data[key] != getattr(model, key):
            raise ConfigError(f"data {key}={data[key]} differs from model {key}={getattr(model, key)}", f"/data/{key}")
    n_classes = doc.get("n_classes", data.get("n_classes", 2))
    if "n_classes" in data and data["n_classes"] != n_classes:
        raise ConfigError("data.n_classes differs from n_classes", "/n_classes")


def parse_config(doc: dict, base_dir: str | Path = ".") -> RunConfig:
    """Validate ``doc`` and build typed configs; relative paths resolve against ``base_dir``."""
    errors = sorted(_VALIDATOR.iter_errors(doc), key=lambda e: (len(e.absolute_path), list(map(str, e.absolute_path))))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise ConfigError(err.message, _error_pointer(err))
    _semantic_checks(doc)
    base = Path(base_dir).resolve()
    model = MaeConfig(**_pick(MaeConfig, doc["model"]))
    train_doc = dict(doc.get("train", {}))
    if "betas" in train_doc:
        train_doc["betas"] = tuple(train_doc["betas"])
    train = TrainConfig(**_pick(TrainConfig, train_doc))
    stages = [
        StageSpec(
            name=s["name"],
            dataset=s["dataset"],
            epochs=s["epochs"],
            batch_size=s.get("batch_size", 64 if i == 0 else 32),
            losses=tuple(s.get("losses", ["ssl"])),
            buffer_in=tuple(s.get("buffer_in", [])),
            buffer_out=s.get("buffer_out"),
            init_from=s.get("init_from", "previous"),
            warmup_epochs=s.get("warmup_epochs"),
            lr_peak=s.get("lr_peak"),
        )
        for i, s in enumerate(doc["stages"])
    ]
    ft_doc = doc["finetune"]
    finetune = FinetuneConfig(**_pick(FinetuneConfig, ft_doc))
    eval_doc = doc.get("eval", {})
    data_doc = doc.get("data", {})
    n_classes = doc.get("n_classes", data_doc.get("n_classes", 2))
    domains = tuple(sorted({s.dataset for s in stages}))
    experiment = ExperimentConfig(
        model=model,
        train=train,
        stages=stages,
        finetune=finetune,
        n_classes=n_classes,
        finetune_domains=tuple(ft_doc.get("domains", domains)),
        eval_domains=tuple(eval_doc.get("domains", ft_doc.get("domains", domains))),
        recon_seed=eval_doc.get("recon_seed", 1234),
        seeds=list(doc["seeds"]),
    )
    spec_kwargs = _pick(SynthDatasetSpec, data_doc)
    if "windows" in data_doc:
        spec_kwargs["windows"] = tuple(WindowSpec(w["center"], w["width"]) for w in data_doc["windows"])
    if "split" in data_doc:
        spec_kwargs["split"] = tuple(data_doc["split"])
    spec_kwargs.setdefault("height", model.height)
    spec_kwargs.setdefault("width", model.width)
    spec_kwargs["n_classes"] = n_classes
    return RunConfig(
        experiment=experiment,
        data=SynthDatasetSpec(**spec_kwargs),
        data_dir=base / data_doc.get("dir", "data"),
        output_dir=base / doc.get("output_dir", "runs"),
        raw=doc,
    )


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON at line {exc.lineno} column {exc.colno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError("top level must be a JSON object")
    return parse_config(doc, path.parent)
