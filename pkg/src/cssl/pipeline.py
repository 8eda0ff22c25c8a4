"""Stage orchestration: SSL pretraining, buffer sampling, distillation stages,
fine-tuning and evaluation.

A run is a chain of stages. Each stage trains an MAE on one domain (optionally
warm-started from the previous stage), optionally adds the replay-based
distillation loss, and optionally samples a memory buffer from its own domain
once training ends.
"""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import replay
from . import tensor as tn
from .bke import bke_target, loss_fd
from .data import Dataset
from .mae import MaeConfig, MaeModel, loss_ssl, masked_targets, patchify_batch, sample_masks
from .metrics import EvalReport, evaluate_predictions
from .optim import AdamW, lr_schedule
from .serialization import load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)

LOSS_CSV_FIELDS = ["stage", "epoch", "l_ssl", "l_fd", "lr"]


class PipelineConfigError(ValueError):
    pass


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_peak: float = 1.5e-4
    warmup_epochs: int = 40
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.05
    gamma: float = 2.0
    omega: float = 0.5
    mask_rate: float = 0.75
    alpha: float = 0.01
    beta: float = 0.05
    fd_weight: float = 1.0
    use_bke: bool = True
    augment: bool = True

    def validate(self, epochs: int | None = None) -> None:
        if epochs is not None and not 0 <= self.warmup_epochs < epochs:
            raise PipelineConfigError(f"warmup_epochs={self.warmup_epochs} must be < epochs={epochs}")
        if not 0 < self.omega < 1:
            raise PipelineConfigError(f"omega must lie in (0, 1), got {self.omega}")
        if not 0 <= self.mask_rate < 1:
            raise PipelineConfigError(f"mask_rate must lie in [0, 1), got {self.mask_rate}")
        if not 0 < self.alpha <= self.beta <= 1:
            raise PipelineConfigError(f"need 0 < alpha <= beta <= 1, got {self.alpha}, {self.beta}")
        if self.gamma < 0 or self.fd_weight < 0 or self.lr_peak < 0:
            raise PipelineConfigError("gamma, fd_weight and lr_peak must be >= 0")


@dataclass
class StagePlan:
    name: str
    dataset_id: str
    epochs: int
    batch_size: int
    losses: frozenset[str]
    checkpoint: Path
    buffer_in: list[Path] = field(default_factory=list)
    buffer_out: Path | None = None
    init_from: Path | None = None
    seed: int = 0
    index: int = 1
    warmup_epochs: int | None = None
    lr_peak: float | None = None

    def validate(self) -> None:
        unknown = set(self.losses) - {"ssl", "fd"}
        if unknown or "ssl" not in self.losses:
            raise PipelineConfigError(f"stage {self.name}: losses must be {{ssl}} or {{ssl, fd}}, got {sorted(self.losses)}")
        if "fd" in self.losses and not self.buffer_in:
            raise PipelineConfigError(f"stage {self.name}: the fd loss needs buffer_in")
        if self.epochs < 1 or self.batch_size < 1:
            raise PipelineConfigError(f"stage {self.name}: epochs and batch_size must be >= 1")


@dataclass
class StageResult:
    model: MaeModel
    checkpoint: Path
    losses: list[dict]
    buffer: replay.MemoryBuffer | None = None


# -- helpers ------------------------------------------------------------------------
def _augment(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Random horizontal flip and a 1-pixel random crop from edge padding."""
    b, h, w, _ = images.shape
    flip = rng.random(b) < 0.5
    out = np.where(flip[:, None, None, None], images[:, :, ::-1, :], images)
    padded = np.pad(out, ((0, 0), (1, 1), (1, 1), (0, 0)), mode="edge")
    dy = rng.integers(0, 3, size=b)
    dx = rng.integers(0, 3, size=b)
    return np.stack([padded[i, dy[i] : dy[i] + h, dx[i] : dx[i] + w] for i in range(b)])


def extract_features(model: MaeModel, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
    """Full-sequence (unmasked) encoder outputs, (N, n, E) float32."""
    patches = patchify_batch(images, model.cfg.patch)
    out = []
    with tn.no_grad():
        for start in range(0, len(patches), batch_size):
            out.append(model.encode(patches[start : start + batch_size]).data)
    return np.concatenate(out).astype(np.float32)


def reconstruction_loss(model: MaeModel, images: np.ndarray, mask_rate: float, seed: int, batch_size: int = 128) -> float:
    """Mean L_SSL over ``images`` under masks drawn from a fixed seed."""
    patches = patchify_batch(images, model.cfg.patch)
    masked, visible = sample_masks(len(patches), model.cfg.n_patches, mask_rate, np.random.default_rng(seed))
    total = 0.0
    with tn.no_grad():
        for start in range(0, len(patches), batch_size):
            sl = slice(start, start + batch_size)
            y, _ = model.forward(patches[sl], masked[sl], visible[sl])
            loss = loss_ssl(y, masked_targets(patches[sl], masked[sl]), model.cfg.patch, model.cfg.channels)
            total += loss.item() * len(patches[sl])
    return total / len(patches)


def _load_buffers(paths: Sequence[Path], model: MaeModel) -> replay.MemoryBuffer:
    buffers = []
    for path in paths:
        if not Path(path).is_file():
            raise PipelineConfigError(f"buffer file not found: {path}")
        buffers.append(replay.load(path))
    buf = replay.MemoryBuffer.merge(buffers)
    t, e = buf.token_shape
    if e != model.cfg.embed_dim or t != model.cfg.n_patches:
        raise PipelineConfigError(
            f"buffer tokens are {t}x{e} but the model produces {model.cfg.n_patches}x{model.cfg.embed_dim}"
        )
    return buf


def losses_csv(rows: Sequence[dict]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(out, fieldnames=LOSS_CSV_FIELDS, lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in row.items()})
    return out.getvalue()


def training_step(
    model: MaeModel,
    patches: np.ndarray,
    cfg: TrainConfig,
    rng: np.random.Generator,
    teacher_bank: np.ndarray | None = None,
    replay_rng: np.random.Generator | None = None,
) -> tuple[tn.Tensor, float, float]:
    """Forward one mini-batch; returns (total loss tensor, l_ssl, l_fd).

    ``teacher_bank`` is the stacked replay buffer (M, n, E). Teacher tokens are
    read at the student's visible positions so both sides have n - m tokens.
    Replay draws come from ``replay_rng`` (default ``rng``), so a separate
    stream keeps masks identical to a run without distillation.
    """
    b = len(patches)
    masked, visible = sample_masks(b, model.cfg.n_patches, cfg.mask_rate, rng)
    y, feats = model.forward(patches, masked, visible)
    l_ssl = loss_ssl(y, masked_targets(patches, masked), model.cfg.patch, model.cfg.channels)
    total, fd_value = l_ssl, 0.0
    if teacher_bank is not None:
        idx = replay.replay_indices(len(teacher_bank), b, replay_rng or rng)
        teacher = np.take_along_axis(teacher_bank[idx], visible[:, :, None], axis=1)
        target = bke_target(teacher, feats.data, cfg.omega) if cfg.use_bke else teacher
        l_fd = loss_fd(target, feats, cfg.gamma)
        fd_value = l_fd.item()
        total = l_ssl + tn.scale(l_fd, cfg.fd_weight)
    return total, l_ssl.item(), fd_value


def run_stage(
    plan: StagePlan,
    cfg: TrainConfig,
    data: Dataset,
    model_cfg: MaeConfig | None = None,
    model_in: MaeModel | None = None,
) -> StageResult:
    plan.validate()
    warmup = cfg.warmup_epochs if plan.warmup_epochs is None else plan.warmup_epochs
    lr_peak = cfg.lr_peak if plan.lr_peak is None else plan.lr_peak
    cfg = replace(cfg, warmup_epochs=warmup, lr_peak=lr_peak)
    cfg.validate(plan.epochs)

    if model_in is not None:
        model = MaeModel(model_in.cfg, model_in.state_dict())
    elif plan.init_from is not None:
        if not (Path(plan.init_from) / "config.json").is_file():
            raise PipelineConfigError(f"stage {plan.name}: init_from checkpoint not found: {plan.init_from}")
        model = MaeModel.load(plan.init_from)
    else:
        if model_cfg is None:
            raise PipelineConfigError(f"stage {plan.name}: need a model config or an initial checkpoint")
        model = MaeModel(replace(model_cfg, init_seed=plan.seed))

    bank = None
    if "fd" in plan.losses:
        bank = _load_buffers(plan.buffer_in, model).stacked()

    train = data.subset(domain=plan.dataset_id, split="train")
    if len(train) == 0:
        raise PipelineConfigError(f"stage {plan.name}: no training images for domain {plan.dataset_id!r}")
    if train.images.shape[1:] != (model.cfg.height, model.cfg.width, model.cfg.channels):
        raise PipelineConfigError(f"stage {plan.name}: images {train.images.shape[1:]} do not fit the model")

    rng = np.random.default_rng([plan.seed, plan.index])
    replay_rng = np.random.default_rng([plan.seed, plan.index, 1])
    opt = AdamW(model.parameters(), lr=lr_peak, betas=cfg.betas, weight_decay=cfg.weight_decay)
    n = len(train)
    steps = math.ceil(n / plan.batch_size)
    rows = []
    step_index = 0
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        sums = np.zeros(2)
        for s in range(steps):
            idx = order[s * plan.batch_size : (s + 1) * plan.batch_size]
            images = train.images[idx]
            if cfg.augment:
                images = _augment(images, rng)
            patches = patchify_batch(images, model.cfg.patch)
            opt.lr = lr_schedule(epoch + s / steps, lr_peak, warmup, plan.epochs)
            total, l_ssl, l_fd = training_step(model, patches, cfg, rng, bank, replay_rng)
            if not (math.isfinite(l_ssl) and math.isfinite(l_fd)):
                raise TrainingDivergedError(
                    f"stage {plan.name}: non-finite loss at step {step_index} (l_ssl={l_ssl}, l_fd={l_fd})"
                )
            tn.backward(total)
            opt.step()
            opt.zero_grad()
            sums += (l_ssl, l_fd)
            step_index += 1
        rows.append(
            {
                "stage": plan.name,
                "epoch": epoch,
                "l_ssl": float(sums[0] / steps),
                "l_fd": float(sums[1] / steps),
                "lr": lr_schedule(epoch, lr_peak, warmup, plan.epochs),
            }
        )
        log.info("stage %s epoch %d l_ssl=%.5f l_fd=%.5f", plan.name, epoch, rows[-1]["l_ssl"], rows[-1]["l_fd"])

    model.save(plan.checkpoint)
    (Path(plan.checkpoint) / "losses.csv").write_text(losses_csv(rows))
    buffer = None
    if plan.buffer_out is not None:
        buffer = sample_stage_buffer(model, train, cfg, seed=plan.seed, source_stage=plan.index)
        replay.save(buffer, plan.buffer_out)
    return StageResult(model, Path(plan.checkpoint), rows, buffer)


def sample_stage_buffer(
    model: MaeModel, train: Dataset, cfg: TrainConfig, seed: int = 0, source_stage: int = 1
) -> replay.MemoryBuffer:
    """Stage-2 pass: encode every training image unmasked and cluster-sample the buffer."""
    feats = extract_features(model, train.images)
    return replay.sample_buffer(
        feats,
        alpha=cfg.alpha,
        beta=cfg.beta,
        seed=seed,
        source_stage=source_stage,
        created_from=replay.fingerprint(train.images),
    )


# -- fine-tuning and evaluation ---------------------------------------------------
@dataclass
class Classifier:
    encoder: MaeModel
    head: dict[str, tn.Tensor]
    n_classes: int
    hidden: int

    def _logits_from_pooled(self, pooled) -> tn.Tensor:
        if self.hidden == 0:
            return pooled @ self.head["cls.w"] + self.head["cls.b"]
        h = tn.relu(pooled @ self.head["cls.w1"] + self.head["cls.b1"])
        return h @ self.head["cls.w2"] + self.head["cls.b2"]

    def logits(self, images: np.ndarray) -> tn.Tensor:
        feats = self.encoder.encode(patchify_batch(images, self.encoder.cfg.patch))
        return self._logits_from_pooled(tn.mean(feats, axis=1))

    def predict_proba(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        out = []
        with tn.no_grad():
            for start in range(0, len(images), batch_size):
                logits = self.logits(images[start : start + batch_size]).data.astype(np.float64)
                logits -= logits.max(axis=1, keepdims=True)
                p = np.exp(logits)
                out.append(p / p.sum(axis=1, keepdims=True))
        return np.concatenate(out)

    def state_dict(self) -> dict[str, np.ndarray]:
        state = self.encoder.state_dict()
        state.update({k: v.data.copy() for k, v in self.head.items()})
        return state

    def save(self, path: str | Path) -> Path:
        meta = {"model": asdict(self.encoder.cfg), "head": {"n_classes": self.n_classes, "hidden": self.hidden}}
        return save_checkpoint(path, self.state_dict(), meta)

    @classmethod
    def load(cls, path: str | Path) -> "Classifier":
        params, meta = load_checkpoint(path)
        if "head" not in meta:
            raise PipelineConfigError(f"{path} is an encoder checkpoint, not a classifier")
        encoder = MaeModel(MaeConfig(**meta["model"]), {k: v for k, v in params.items() if not k.startswith("cls.")})
        head = {k: tn.parameter(v) for k, v in params.items() if k.startswith("cls.")}
        return cls(encoder, head, meta["head"]["n_classes"], meta["head"]["hidden"])


@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 80
    lr: float = 5e-5
    batch_size: int = 32
    hidden: int = 64
    train_encoder: bool = True
    weight_decay: float = 0.05


@dataclass
class FinetuneResult:
    classifier: Classifier
    best_epoch: int
    best_val_acc: float
    history: list[dict]


def _init_head(e: int, hidden: int, k: int, seed: int) -> dict[str, tn.Tensor]:
    """MLP head with one hidden layer; ``hidden=0`` gives a linear head."""
    rng = np.random.default_rng([seed, 7919])
    if hidden == 0:
        return {
            "cls.w": tn.parameter(rng.normal(0, math.sqrt(1.0 / e), size=(e, k))),
            "cls.b": tn.parameter(np.zeros(k)),
        }
    return {
        "cls.w1": tn.parameter(rng.normal(0, math.sqrt(2.0 / e), size=(e, hidden))),
        "cls.b1": tn.parameter(np.zeros(hidden)),
        "cls.w2": tn.parameter(rng.normal(0, math.sqrt(1.0 / hidden), size=(hidden, k))),
        "cls.b2": tn.parameter(np.zeros(k)),
    }


def finetune_probe(
    encoder: MaeModel,
    train: Dataset,
    val: Dataset,
    n_classes: int,
    cfg: FinetuneConfig = FinetuneConfig(),
    seed: int = 0,
) -> FinetuneResult:
    """Attach an MLP head to mean-pooled encoder tokens and train; keep the best-val state.

    With ``train_encoder=False`` the encoder is frozen (a probe) and pooled
    features are computed once.
    """
    labels = np.asarray(train.labels)
    present = np.unique(labels)
    if len(present) < 2:
        raise PipelineConfigError(f"fine-tuning needs at least two classes, found {present.tolist()}")
    if labels.max() >= n_classes or np.asarray(val.labels).max() >= n_classes:
        raise PipelineConfigError(f"labels exceed the configured class count {n_classes}")
    if len(val) == 0:
        raise PipelineConfigError("fine-tuning needs a non-empty validation split")

    clf = Classifier(
        MaeModel(encoder.cfg, encoder.state_dict()),
        _init_head(encoder.cfg.embed_dim, cfg.hidden, n_classes, seed),
        n_classes,
        cfg.hidden,
    )
    params = list(clf.head.values())
    pooled_train = None
    if cfg.train_encoder:
        params += clf.encoder.parameters()
    else:
        for p in clf.encoder.parameters():
            p.requires_grad = False
        pooled_train = extract_features(clf.encoder, train.images).mean(axis=1)
    opt = AdamW(params, lr=cfg.lr, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([seed, 104729])
    n = len(train)
    best = (-1.0, math.inf)
    best_state, best_epoch, history = clf.state_dict(), -1, []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            if pooled_train is not None:
                logits = clf._logits_from_pooled(tn.Tensor(pooled_train[idx]))
            else:
                logits = clf.logits(train.images[idx])
            loss = tn.cross_entropy(logits, labels[idx])
            tn.backward(loss)
            opt.step()
            opt.zero_grad()
        proba = clf.predict_proba(val.images)
        val_acc = float(np.mean(proba.argmax(axis=1) == val.labels))
        val_loss = float(-np.mean(np.log(proba[np.arange(len(val)), val.labels] + 1e-12)))
        history.append({"epoch": epoch, "val_acc": val_acc, "val_loss": val_loss})
        if (val_acc, -val_loss) > (best[0], -best[1]):
            best, best_epoch, best_state = (val_acc, val_loss), epoch, clf.state_dict()
    for p in clf.encoder.parameters():
        p.requires_grad = True
    final = Classifier(
        MaeModel(encoder.cfg, {k: v for k, v in best_state.items() if not k.startswith("cls.")}),
        {k: tn.parameter(v) for k, v in best_state.items() if k.startswith("cls.")},
        n_classes,
        cfg.hidden,
    )
    return FinetuneResult(final, best_epoch, best[0], history)


def evaluate(classifier: Classifier, test: Dataset) -> EvalReport:
    proba = classifier.predict_proba(test.images)
    return evaluate_predictions(test.labels, proba, classifier.n_classes)


# -- experiments ---------------------------------------------------------------------
@dataclass
class StageSpec:
    """Seed-independent stage description as written in an experiment config."""

    name: str
    dataset: str
    epochs: int
    batch_size: int
    losses: tuple[str, ...] = ("ssl",)
    buffer_in: tuple[str, ...] = ()
    buffer_out: str | None = None
    init_from: str | None = "previous"
    warmup_epochs: int | None = None
    lr_peak: float | None = None


@dataclass
class ExperimentConfig:
    model: MaeConfig
    train: TrainConfig
    stages: list[StageSpec]
    finetune: FinetuneConfig
    n_classes: int = 2
    finetune_domains: tuple[str, ...] = ("d1", "d2")
    eval_domains: tuple[str, ...] = ("d1", "d2")
    recon_seed: int = 1234
    seeds: list[int] = field(default_factory=lambda: [0])


def build_plans(exp: ExperimentConfig, seed: int, run_dir: Path) -> list[StagePlan]:
    plans: list[StagePlan] = []
    by_name: dict[str, StagePlan] = {}
    for i, spec in enumerate(exp.stages, start=1):
        if spec.init_from in (None, "scratch"):
            init = None
        elif spec.init_from == "previous":
            init = plans[-1].checkpoint if plans else None
        elif spec.init_from in by_name:
            init = by_name[spec.init_from].checkpoint
        else:
            raise PipelineConfigError(f"stage {spec.name}: unknown init_from {spec.init_from!r}")
        plan = StagePlan(
            name=spec.name,
            dataset_id=spec.dataset,
            epochs=spec.epochs,
            batch_size=spec.batch_size,
            losses=frozenset(spec.losses),
            checkpoint=run_dir / spec.name / "checkpoint",
            buffer_in=[run_dir / "buffers" / f"{b}.rdlb" for b in spec.buffer_in],
            buffer_out=run_dir / "buffers" / f"{spec.buffer_out}.rdlb" if spec.buffer_out else None,
            init_from=init,
            seed=seed,
            index=i,
            warmup_epochs=spec.warmup_epochs,
            lr_peak=spec.lr_peak,
        )
        plan.validate()
        plans.append(plan)
        by_name[spec.name] = plan
    return plans


def run_seed(exp: ExperimentConfig, data: Dataset, seed: int, run_dir: Path) -> dict:
    """All stages, forgetting measurement, fine-tuning and evaluation for one seed."""
    run_dir.mkdir(parents=True, exist_ok=True)
    plans = build_plans(exp, seed, run_dir)
    results: list[StageResult] = []
    for plan in plans:
        log.info("seed %d: stage %s on %s (%s)", seed, plan.name, plan.dataset_id, "+".join(sorted(plan.losses)))
        results.append(run_stage(plan, exp.train, data, exp.model))
    first_domain = plans[0].dataset_id
    held_out = data.subset(domain=first_domain, split="test")
    if len(held_out) == 0:
        held_out = data.subset(domain=first_domain)
    recon_first = reconstruction_loss(results[0].model, held_out.images, exp.train.mask_rate, exp.recon_seed)
    recon_final = reconstruction_loss(results[-1].model, held_out.images, exp.train.mask_rate, exp.recon_seed)

    ft = finetune_probe(
        results[-1].model,
        data.subset(domain=list(exp.finetune_domains), split="train"),
        data.subset(domain=list(exp.finetune_domains), split="val"),
        exp.n_classes,
        exp.finetune,
        seed=seed,
    )
    ft.classifier.save(run_dir / "classifier")
    report = evaluate(ft.classifier, data.subset(domain=list(exp.eval_domains), split="test"))
    report.seeds = [seed]
    with (run_dir / "losses.csv").open("w") as fh:
        fh.write(losses_csv([row for r in results for row in r.losses]))
    out = {
        "seed": seed,
        "eval": report.to_dict(),
        "best_val_epoch": ft.best_epoch,
        "recon_first_domain": {"stage1_model": recon_first, "final_model": recon_final},
        "forgetting": recon_final - recon_first,
    }
    (run_dir / "metrics.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out


def run_experiment(exp: ExperimentConfig, data: Dataset, out_dir: str | Path) -> dict:
    out = Path(out_dir)
    per_seed = [run_seed(exp, data, s, out / f"seed_{s}") for s in exp.seeds]
    reports = [EvalReport(**{k: r["eval"][k] for k in ("acc", "auc", "f1", "n_test")}) for r in per_seed]
    agg = EvalReport.aggregate(reports, list(exp.seeds))
    forgetting = [r["forgetting"] for r in per_seed]
    summary = {
        "aggregate": agg.to_dict(),
        "forgetting": {"per_seed": forgetting, "mean": float(np.mean(forgetting)), "std": float(np.std(forgetting))},
        "per_seed": per_seed,
    }
    (out / "report.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
