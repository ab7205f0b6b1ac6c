"""Staged training: pretrain -> hard prune -> fine-tune -> calibrate."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import warnings
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from . import losses
from .data import Dataset, batch_indices, read_tensor, write_tensor
from .heads import INFODISENT, SIDE, HeadParams, ScoresSheet, backward, forward
from .losses import ASLConfig, OCLAConfig
from .tensor import DataIntegrityError
from .metrics import accuracy, global_size, local_sizes, predict

log = logging.getLogger(__name__)

STAGES = ("pretrain", "finetune", "calibrate")
TRACE_FIELDS = ["epoch", "stage", "loss", "acc", "active_weights", "ocla",
                "global_size", "local_size_mean"]


class NonFiniteLossError(RuntimeError):
    def __init__(self, stage, epoch, batch, block):
        super().__init__(f"non-finite value in stage {stage!r}, epoch {epoch}, "
                         f"batch {batch}, parameter block {block!r}")
        self.stage, self.epoch, self.batch, self.block = stage, epoch, batch, block


class CheckpointError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass
class StageConfig:
    stage: str
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    asl: ASLConfig = field(default_factory=ASLConfig)
    ocla: OCLAConfig = field(default_factory=OCLAConfig)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        # epochs == 0 skips the stage inside run_full_pipeline
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be >= 0")
        if self.stage != "calibrate" and self.ocla.weight != 0:
            raise ValueError("the OCLA term is only used while calibrating")

    @classmethod
    def from_dict(cls, stage: str, doc: dict) -> "StageConfig":
        doc = dict(doc)
        asl_doc = doc.pop("asl", {})
        ocla_doc = doc.pop("ocla", {})
        base = default_stage(stage)
        unknown = set(doc) - {"epochs", "batch_size", "learning_rate", "seed"}
        if unknown:
            raise ValueError(f"unknown {stage} fields: {', '.join(sorted(unknown))}")
        return cls(
            stage=stage,
            epochs=int(doc.get("epochs", base.epochs)),
            batch_size=int(doc.get("batch_size", base.batch_size)),
            learning_rate=float(doc.get("learning_rate", base.learning_rate)),
            asl=ASLConfig(**{**asdict(base.asl), **asl_doc}),
            ocla=OCLAConfig(**{**asdict(base.ocla), **ocla_doc}),
            seed=int(doc.get("seed", base.seed)),
        )


def default_stage(stage: str) -> StageConfig:
    if stage == "pretrain":
        return StageConfig("pretrain", 40, 32, 1e-3, ASLConfig(0.0, 1.0, 0.05), seed=1)
    if stage == "finetune":
        return StageConfig("finetune", 30, 32, 1e-3, ASLConfig(0.0, 1.0, 0.05), seed=2)
    if stage == "calibrate":
        return StageConfig("calibrate", 10, 32, 1e-3, ASLConfig(0.0, 1.0, 0.05),
                           OCLAConfig(0.5, 1.0, 100.0), seed=3)
    raise ValueError(f"unknown stage {stage!r}")


@dataclass
class PruneConfig:
    per_class: float = 3.0  # A: average prototypes kept per class

    def __post_init__(self):
        if self.per_class < 1:
            raise ValueError("A must be >= 1")

    def budget(self, n_classes: int) -> int:
        return int(round(self.per_class * n_classes))


@dataclass
class PipelineConfig:
    pretrain: StageConfig = field(default_factory=lambda: default_stage("pretrain"))
    finetune: StageConfig = field(default_factory=lambda: default_stage("finetune"))
    calibrate: StageConfig = field(default_factory=lambda: default_stage("calibrate"))
    prune: PruneConfig = field(default_factory=PruneConfig)
    seed: int = 0
    head: dict = field(default_factory=lambda: {"type": SIDE, "protos": 64,
                                                "compose_ortho": False})

    @classmethod
    def from_dict(cls, doc: dict) -> "PipelineConfig":
        unknown = set(doc) - {"stages", "prune", "seed", "head"}
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(sorted(unknown))}")
        stages = doc.get("stages", {})
        bad = set(stages) - set(STAGES)
        if bad:
            raise ValueError(f"unknown stages: {', '.join(sorted(bad))}")
        head = {"type": SIDE, "protos": 64, "compose_ortho": False, **doc.get("head", {})}
        if head["type"] not in (SIDE, INFODISENT):
            raise ValueError(f"unknown head type {head['type']!r}")
        prune = doc.get("prune", {})
        return cls(
            *(StageConfig.from_dict(s, stages.get(s, {})) for s in STAGES),
            prune=PruneConfig(float(prune.get("A", 3.0))),
            seed=int(doc.get("seed", 0)),
            head=head,
        )

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def stage(self, name: str) -> StageConfig:
        return getattr(self, name)


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict = {}
        self.v: dict = {}

    def step(self, params: dict, grads: dict) -> None:
        """In-place update of the arrays in ``params``."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, g in grads.items():
            p = params[name]
            m = self.m.setdefault(name, np.zeros_like(p))
            v = self.v.setdefault(name, np.zeros_like(p))
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# ---------------------------------------------------------------------------
# traces
# ---------------------------------------------------------------------------

@dataclass
class TraceRecord:
    epoch: int
    stage: str
    loss: Optional[float]
    acc: float
    active_weights: int
    ocla: float
    global_size: int
    local_size_mean: float


@dataclass
class TrainTrace:
    records: list = field(default_factory=list)
    snapshots: list = field(default_factory=list)  # active-entry masks per record

    def extend(self, other: "TrainTrace") -> "TrainTrace":
        self.records.extend(other.records)
        self.snapshots.extend(other.snapshots)
        return self

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(TRACE_FIELDS)
        for r in self.records:
            wr.writerow([r.epoch, r.stage, "" if r.loss is None else repr(r.loss), repr(r.acc),
                         r.active_weights, repr(r.ocla), r.global_size,
                         repr(r.local_size_mean)])
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_text(self.to_csv())


def active_count(params: HeadParams) -> int:
    return int(params.sheet.active(params.head_type).sum())


def snapshot(params: HeadParams, data: Dataset, stage: str, epoch: int, loss, t: float):
    out = predict(params, data.features)
    rec = TraceRecord(
        epoch=epoch, stage=stage, loss=loss,
        acc=accuracy(out.probs, data.labels),
        active_weights=active_count(params),
        ocla=losses.ocla_metric(out.probs, data.labels, t),
        global_size=global_size(params.sheet, params.head_type),
        local_size_mean=float(np.mean(local_sizes(out.probs, params.sheet, t, params.head_type))),
    )
    return rec, params.sheet.active(params.head_type).copy()


# ---------------------------------------------------------------------------
# stages
# ---------------------------------------------------------------------------

def _loss_and_grad(params: HeadParams, out, labels, cfg: StageConfig):
    """Batch loss and ``dL/dz`` for the stage objective."""
    if params.head_type == INFODISENT:
        return losses.ce_softmax(out.logits, labels), losses.ce_softmax_backward(out.logits, labels)
    y = losses.one_hot(labels, params.n_classes)
    if cfg.stage == "calibrate":
        loss = losses.calibration_loss(out.probs, labels, cfg.asl, cfg.ocla)
    else:
        loss = losses.asl(out.probs, y, cfg.asl)
    gz = losses.asl_grad_logits(out.logits, y, cfg.asl)
    if cfg.stage == "calibrate" and cfg.ocla.weight:
        gp = cfg.ocla.weight * losses.ocla_loss_backward(out.probs, labels, cfg.ocla)
        gz = gz + gp * out.probs * (1.0 - out.probs)
    return loss, gz


def run_stage(params: HeadParams, data: Dataset, cfg: StageConfig, trace_set: Optional[Dataset] = None):
    """Minibatch Adam over ``cfg.epochs`` epochs; returns ``(params, trace)``.

    The input parameters are not modified. One trace record is emitted per
    epoch, computed on ``trace_set`` (the training data by default).
    """
    if data.features.shape[1] != params.d:
        raise ValueError(f"data has {data.features.shape[1]} channels, head expects {params.d}")
    if not np.all(np.isfinite(data.features)):
        raise DataIntegrityError("training features contain non-finite values")
    params = params.copy()
    trace_set = data if trace_set is None else trace_set
    opt = Adam(cfg.learning_rate)
    trace = TrainTrace()
    blocks = params.blocks()
    mask = params.sheet.mask
    for epoch in range(1, cfg.epochs + 1):
        total, count = 0.0, 0
        for b, idx in enumerate(batch_indices(len(data), cfg.batch_size, cfg.seed, epoch)):
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    out = forward(data.features[idx], params)
            except DataIntegrityError as exc:
                raise NonFiniteLossError(cfg.stage, epoch, b, "forward") from exc
            loss, gz = _loss_and_grad(params, out, data.labels[idx], cfg)
            if not math.isfinite(loss):
                raise NonFiniteLossError(cfg.stage, epoch, b, "loss")
            grads = backward(params, out, grad_logits=gz)
            for name, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise NonFiniteLossError(cfg.stage, epoch, b, name)
            opt.step(blocks, grads)
            # pruned entries are frozen at exactly zero
            blocks["scores_w"] *= mask
            total += loss * len(idx)
            count += len(idx)
        rec, act = snapshot(params, trace_set, cfg.stage, epoch, total / count, cfg.ocla.threshold)
        trace.records.append(rec)
        trace.snapshots.append(act)
        log.info("%s epoch %d loss %.5f acc %.4f active %d", cfg.stage, epoch, rec.loss,
                 rec.acc, rec.active_weights)
    return params, trace


def hard_prune(sheet: ScoresSheet, cfg: PruneConfig, n_classes: Optional[int] = None) -> ScoresSheet:
    """Keep the global top-k clamped weights, ``k = A * C``; freeze the rest at 0.

    Ties at the cut-off go to the lower row, then the lower column.
    """
    w = sheet.weights
    eff = np.maximum(w, 0.0) * sheet.mask
    n_classes = w.shape[0] if n_classes is None else n_classes
    k = cfg.budget(n_classes)
    n_active = int((eff > 0).sum())
    if k > n_active:
        warnings.warn(f"prune budget {k} exceeds {n_active} active weights; keeping all",
                      stacklevel=2)
        k = n_active
    rows, cols = np.indices(w.shape)
    # lexsort sorts by the last key first
    order = np.lexsort((cols.ravel(), rows.ravel(), -eff.ravel()))
    keep = np.zeros(w.size, dtype=bool)
    keep[order[:k]] = True
    keep = keep.reshape(w.shape) & (eff > 0)
    return ScoresSheet(np.where(keep, w, 0.0), keep)


def prune_params(params: HeadParams, cfg: PruneConfig) -> HeadParams:
    if params.head_type != SIDE:
        raise ValueError("hard pruning applies to SIDE heads")
    out = params.copy()
    out.sheet = hard_prune(params.sheet, cfg, params.n_classes)
    return out


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(params: HeadParams, path, stage: str = "", epoch: int = 0) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    header = {
        "head_type": params.head_type,
        "d": params.d,
        "C'": params.n_protos,
        "C_classes": params.n_classes,
        "compose_ortho": params.compose_ortho,
        "stage": stage,
        "epoch": epoch,
    }
    (path / "header.json").write_text(json.dumps(header, indent=1) + "\n")
    write_tensor(path / "scores_w.sidt", params.sheet.weights, "f64")
    write_tensor(path / "scores_mask.sidt", params.sheet.mask.astype(np.float64), "f32")
    if params.expansion is not None:
        write_tensor(path / "expansion.sidt", params.expansion, "f64")
    if params.uses_ortho() and params.ortho.size:
        write_tensor(path / "ortho_a.sidt", params.ortho, "f64")


def load_checkpoint(path) -> HeadParams:
    path = Path(path)
    try:
        header = json.loads((path / "header.json").read_text())
    except FileNotFoundError as exc:
        raise CheckpointError(f"{path}: missing header.json") from exc

    def member(name, shape):
        f = path / name
        if not f.exists():
            raise CheckpointError(f"{path}: missing member {name}")
        t = read_tensor(f)
        if t.shape != shape:
            raise CheckpointError(f"{path}: {name} has dims {t.shape}, header implies {shape}")
        return t

    try:
        kind, d, cp, nc = header["head_type"], int(header["d"]), int(header["C'"]), int(header["C_classes"])
    except KeyError as exc:
        raise CheckpointError(f"{path}: header lacks {exc}") from exc
    compose = bool(header.get("compose_ortho", False))
    w = member("scores_w.sidt", (nc, cp))
    mask = member("scores_mask.sidt", (nc, cp)) > 0
    expansion = member("expansion.sidt", (cp, d)) if kind == SIDE else None
    ortho = None
    if kind == INFODISENT or compose:
        n = d * (d - 1) // 2
        ortho = member("ortho_a.sidt", (n,)) if n else np.zeros(0)
    if kind == INFODISENT and cp != d:
        raise CheckpointError(f"{path}: InfoDisent header has C'={cp} != d={d}")
    return HeadParams(kind, d, cp, nc, ScoresSheet(w, mask), expansion, ortho, compose)


def checkpoint_header(path) -> dict:
    return json.loads((Path(path) / "header.json").read_text())


# ---------------------------------------------------------------------------
# full pipeline
# ---------------------------------------------------------------------------

@dataclass
class PipelineReport:
    pre_prune_accuracy: float
    post_prune_accuracy: float
    finetune_accuracy: float
    final_accuracy: float
    finetune_ocla: float
    final_ocla: float
    global_size: int
    local_size_mean: float
    active_weights: int

    def to_dict(self) -> dict:
        return asdict(self)


def init_head(cfg: PipelineConfig, d: int, n_classes: int) -> HeadParams:
    from .heads import init_infodisent_head, init_side_head

    if cfg.head["type"] == INFODISENT:
        return init_infodisent_head(d, n_classes, cfg.seed)
    return init_side_head(d, int(cfg.head["protos"]), n_classes, cfg.seed,
                          bool(cfg.head.get("compose_ortho", False)))


def _eval(params, data: Dataset, t: float):
    out = predict(params, data.features)
    sizes = local_sizes(out.probs, params.sheet, t, params.head_type)
    return (accuracy(out.probs, data.labels), losses.ocla_metric(out.probs, data.labels, t),
            float(np.mean(sizes)))


def run_full_pipeline(train: Dataset, cfg: PipelineConfig, test: Optional[Dataset] = None,
                      params: Optional[HeadParams] = None, out_dir=None):
    """Pretrain, prune, fine-tune and calibrate a SIDE head.

    Accuracies and OCLA in the report are measured on ``test`` when given,
    otherwise on the training data. Stages with ``epochs == 0`` are skipped.
    Returns ``(params, trace, report, stage_params)``; ``stage_params`` maps
    each stage name to the parameters at its end.
    """
    evalset = train if test is None else test
    t = cfg.calibrate.ocla.threshold
    if params is None:
        params = init_head(cfg, train.features.shape[1], train.num_classes)
    if params.head_type != SIDE:
        raise ValueError("the staged pipeline trains SIDE heads")
    ckpt = (lambda p, name, ep: save_checkpoint(p, Path(out_dir) / f"{name}.ckpt", name, ep)) \
        if out_dir is not None else (lambda *a: None)
    trace = TrainTrace()
    stages = {}

    if cfg.pretrain.epochs:
        params, tr = run_stage(params, train, cfg.pretrain)
        trace.extend(tr)
    stages["pretrain"] = params
    ckpt(params, "pretrain", cfg.pretrain.epochs)
    pre_acc = _eval(params, evalset, t)[0]

    params = prune_params(params, cfg.prune)
    rec, act = snapshot(params, train, "prune", 0, None, t)
    trace.records.append(rec)
    trace.snapshots.append(act)
    stages["prune"] = params
    ckpt(params, "prune", 0)
    post_acc = _eval(params, evalset, t)[0]

    if cfg.finetune.epochs:
        params, tr = run_stage(params, train, cfg.finetune)
        trace.extend(tr)
    stages["finetune"] = params
    ckpt(params, "finetune", cfg.finetune.epochs)
    ft_acc, ft_ocla, _ = _eval(params, evalset, t)

    if cfg.calibrate.epochs:
        params, tr = run_stage(params, train, cfg.calibrate)
        trace.extend(tr)
    stages["calibrate"] = params
    ckpt(params, "calibrate", cfg.calibrate.epochs)
    acc, ocla, local_mean = _eval(params, evalset, t)

    report = PipelineReport(pre_acc, post_acc, ft_acc, acc, ft_ocla, ocla,
                            global_size(params.sheet), local_mean, active_count(params))
    if out_dir is not None:
        trace.save(Path(out_dir) / "trace.csv")
        (Path(out_dir) / "pipeline_report.json").write_text(
            json.dumps(report.to_dict(), indent=1) + "\n")
    return params, trace, report, stages
