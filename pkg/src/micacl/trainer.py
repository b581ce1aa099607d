"""Training loop, evaluation metrics and run artifacts."""

from __future__ import annotations

import csv
import logging
import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .data import BagDataset, class_counts, make_batches, read_dataset, stratified_split
from .errors import ConfigError, NonFiniteError
from .mccl import ClassStats, cet_loss, mccl_loss, total_loss
from .model import ModelParams, RunConfig, forward_model, write_checkpoint
from .optim import OptimState, adamw_step, cosine_lr
from .rng import derive_seed
from .tensor import Tensor, backward, no_grad, zero_grad

log = logging.getLogger(__name__)

CSV_COLUMNS = ("epoch", "lr", "loss_mc", "loss_cet", "loss_all", "war", "uar")

# sub-stream ids under the run seed
INIT_STREAM, SPLIT_STREAM, BATCH_STREAM = 0, 1, 1000


@dataclass
class MetricsReport:
    confusion: np.ndarray  # [K, K], rows = true class
    per_class_recall: np.ndarray  # NaN for classes without samples
    war: float
    uar: float
    losses: list = field(default_factory=list)  # per-epoch dicts keyed by CSV_COLUMNS
    eval_losses: Optional[dict] = None  # loss_mc / loss_cet / loss_all on the evaluated set


def metrics_from_confusion(confusion: np.ndarray) -> MetricsReport:
    confusion = np.asarray(confusion, dtype=np.int64)
    support = confusion.sum(axis=1)
    total = support.sum()
    with np.errstate(invalid="ignore", divide="ignore"):
        recall = np.where(support > 0, np.diag(confusion) / support, np.nan)
    war = float(np.trace(confusion) / total) if total else 0.0
    present = support > 0
    uar = float(recall[present].mean()) if present.any() else 0.0
    return MetricsReport(confusion, recall, war, uar)


def confusion_matrix(labels, preds, num_classes: int) -> np.ndarray:
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels), np.asarray(preds)), 1)
    return cm


def predict(logits: np.ndarray) -> np.ndarray:
    """Argmax per row; ties go to the lowest class index."""
    return np.argmax(logits, axis=1)


def evaluate(params: ModelParams, config: RunConfig, dataset: BagDataset,
             stats: Optional[ClassStats] = None, chunk: int = 64) -> MetricsReport:
    """Metrics on ``dataset``; with ``stats`` also the losses as one full batch."""
    x, y = dataset.arrays()
    logits_parts, emb_parts = [], []
    with no_grad():
        for i in range(0, len(y), chunk):
            logits, x_bag = forward_model(x[i:i + chunk], params, config.model)
            logits_parts.append(logits.data)
            emb_parts.append(x_bag.data)
    logits = np.concatenate(logits_parts)
    report = metrics_from_confusion(confusion_matrix(y, predict(logits), config.model.k))
    if stats is not None and len(y) >= 2:
        with no_grad():
            l_cet = cet_loss(Tensor(logits), y).item()
            l_mc = mccl_loss(Tensor(np.concatenate(emb_parts)), y, stats, logits,
                             params.scale_set, config.model.log_form).item()
        report.eval_losses = {"loss_mc": l_mc, "loss_cet": l_cet, "loss_all": l_mc + l_cet}
    return report


def step_loss(params: ModelParams, config: RunConfig, stats: ClassStats, x, y, mode: str):
    """Forward one batch and return ``(loss, l_mc, l_cet, logits)``."""
    logits, x_bag = forward_model(x, params, config.model)
    l_cet = cet_loss(logits, y)
    if mode == "cet-only":
        return l_cet, 0.0, l_cet.item(), logits
    l_mc = mccl_loss(x_bag, y, stats, logits, params.scale_set, config.model.log_form)
    loss = l_mc if mode == "mccl-only" else total_loss(l_mc, l_cet)
    return loss, l_mc.item(), l_cet.item(), logits


@dataclass
class TrainResult:
    params: ModelParams
    history: list  # per-epoch rows keyed by CSV_COLUMNS
    step_losses: list  # (loss_all, loss_mc, loss_cet) per optimizer step
    heldout: MetricsReport
    stats: ClassStats
    train_idx: list
    test_idx: list


def prepare(config: RunConfig, dataset: BagDataset) -> None:
    """Fill data-dependent config fields, rejecting contradictions."""
    t, c_in = dataset.shape
    model = config.model
    defaults = type(model)()
    for name, actual in (("t", t), ("c_in", c_in), ("k", dataset.num_classes)):
        current = getattr(model, name)
        if current != actual and current != getattr(defaults, name):
            raise ConfigError(f"config {name}={current} contradicts the dataset ({actual})")
        setattr(model, name, actual)
    config.validate()


def train(config: RunConfig, dataset, run_seed: int, out_dir=None) -> TrainResult:
    """Train on a stratified 80 % split and evaluate on the held-out 20 %.

    ``dataset`` is a :class:`BagDataset` or a path to a ``.mibg`` file. With
    ``out_dir`` set, writes ``metrics.csv`` (per epoch, training-batch
    metrics), ``heldout.csv`` and ``model.mick``.
    """
    if not isinstance(dataset, BagDataset):
        dataset = read_dataset(dataset)
    prepare(config, dataset)
    mode = config.train.loss_mode
    train_idx, test_idx = stratified_split(dataset, 0.2, derive_seed(run_seed, SPLIT_STREAM))
    train_set = dataset.subset(train_idx)
    stats = ClassStats(np.maximum(class_counts(train_set), 1), config.model.tau0)
    params = ModelParams.init(config.model, derive_seed(run_seed, INIT_STREAM))
    named = params.named_parameters()
    opt = OptimState(**{k: getattr(config.optim, k) for k in OptimState.HYPERPARAMS})

    x_all, y_all = train_set.arrays()
    per_epoch = len(make_batches(len(train_set), config.train.batch_size, 0))
    total_steps = max(1, per_epoch * config.train.epochs)
    history, step_losses = [], []
    step = 0
    for epoch in range(1, config.train.epochs + 1):
        batches = make_batches(len(train_set), config.train.batch_size,
                               derive_seed(run_seed, BATCH_STREAM + epoch))
        sums = np.zeros(3)
        cm = np.zeros((config.model.k, config.model.k), dtype=np.int64)
        lr = cosine_lr(step, total_steps, opt.lr_max, opt.lr_min)
        for batch in batches:
            x, y = x_all[batch], y_all[batch]
            loss, l_mc, l_cet, logits = step_loss(params, config, stats, x, y, mode)
            if not math.isfinite(loss.item()):
                raise NonFiniteError(f"non-finite loss at epoch {epoch}, step {step}: "
                                     f"l_mc={l_mc}, l_cet={l_cet}")
            zero_grad(params.parameters())
            backward(loss)
            lr = cosine_lr(step, total_steps, opt.lr_max, opt.lr_min)
            adamw_step(named, opt, lr)
            step += 1
            step_losses.append((loss.item(), l_mc, l_cet))
            sums += (loss.item(), l_mc, l_cet)
            cm += confusion_matrix(y, predict(logits.data), config.model.k)
        n = max(1, len(batches))
        m = metrics_from_confusion(cm)
        history.append({"epoch": epoch, "lr": lr, "loss_mc": sums[1] / n, "loss_cet": sums[2] / n,
                        "loss_all": sums[0] / n, "war": m.war, "uar": m.uar})
        log.info("epoch %d loss %.5f war %.4f uar %.4f", epoch, sums[0] / n, m.war, m.uar)

    heldout = evaluate(params, config, dataset.subset(test_idx), stats)
    heldout.losses = history
    result = TrainResult(params, history, step_losses, heldout, stats, train_idx, test_idx)
    if out_dir is not None:
        write_artifacts(result, config, dataset.subset(test_idx), out_dir)
    return result


def _fmt(value) -> str:
    return str(value) if isinstance(value, (int, np.integer)) else f"{value:.10g}"


def write_metrics_csv(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([_fmt(row[c]) for c in CSV_COLUMNS])


def write_artifacts(result: TrainResult, config: RunConfig, test_set: BagDataset, out_dir) -> None:
    os.makedirs(out_dir, exist_ok=True)
    write_metrics_csv(os.path.join(out_dir, "metrics.csv"), result.history)
    write_metrics_csv(os.path.join(out_dir, "heldout.csv"), [heldout_row(result.heldout, result.history[-1])])
    write_checkpoint(os.path.join(out_dir, "model.mick"), result.params, config,
                     meta={"n_c": ",".join(str(int(n)) for n in result.stats.n_c),
                           "epochs_trained": len(result.history),
                           "final_lr": _fmt(result.history[-1]["lr"])})


def heldout_row(report: MetricsReport, last: dict) -> dict:
    losses = report.eval_losses or {}
    return {"epoch": last["epoch"], "lr": last["lr"],
            "loss_mc": losses.get("loss_mc", float("nan")),
            "loss_cet": losses.get("loss_cet", float("nan")),
            "loss_all": losses.get("loss_all", float("nan")),
            "war": report.war, "uar": report.uar}
