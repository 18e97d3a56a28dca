"""Training loop, masked L1 loss, evaluation, and expert-usage collection.

Labels are standardized per task with statistics from the training split
(task scales span meV to eV); reported MAEs are always in original units.
Shuffling and gate noise draw from generators seeded by (seed, epoch), so a
run resumed from an epoch-boundary checkpoint reproduces the uninterrupted
run bitwise in single-threaded mode.
"""

from __future__ import annotations

import copy
import logging
import warnings
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import Checkpoint, Normalization, save_checkpoint
from .data import DatasetRecord
from .errors import ConfigError, EmptySplit
from .model import (
    BatchedInput,
    ModelConfig,
    ModelParams,
    PreparedStructure,
    forward,
    init_params,
    make_batch,
    pooled_embeddings,
    prepare_structure,
)
from .moe import ExpertUsage, gate, importance_loss, usage_from_gate_weights
from .optim import AdamWState, adamw_step, onecycle_lr

logger = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 500
    batch_size: int = 64
    max_lr: float = 8e-4
    weight_decay: float = 1e-5
    betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    pct_start: float = 0.3
    div_factor: float = 25.0
    final_div: float = 1e4
    seed: int = 0
    importance_weight: float = 0.0  # optional gate load-balancing term
    log_every: int = 1


def masked_l1(preds: Tensor, labels: np.ndarray, mask: np.ndarray) -> Tensor:
    """Mean absolute error over present (mask == 1) entries.

    Masked positions contribute nothing and receive exactly zero gradient.
    An all-masked batch yields a zero loss and a warning.
    """
    mask = np.asarray(mask, dtype=preds.data.dtype)
    labels = np.asarray(labels, dtype=preds.data.dtype)
    count = float(mask.sum())
    masked_abs = ad.mul(ad.absolute(ad.sub(preds, labels)), mask)
    if count == 0:
        warnings.warn("masked_l1: no labels present in batch; loss is 0")
        return ad.mul(ad.tsum(masked_abs), 0.0)
    return ad.mul(ad.tsum(masked_abs), 1.0 / count)


def _prepare_records(
    records: Sequence[DatasetRecord], config: ModelConfig
) -> List[PreparedStructure]:
    return [prepare_structure(r.to_structure(config.tasks), config) for r in records]


def _standardized_copy(batch: BatchedInput, norm: Normalization) -> BatchedInput:
    out = BatchedInput(**{**vars(batch)})
    out.labels = norm.standardize(batch.labels) * batch.mask  # masked slots stay 0
    return out


def evaluate_prepared(
    prepared: Sequence[PreparedStructure],
    params: ModelParams,
    config: ModelConfig,
    normalization: Normalization,
    batch_size: int = 64,
) -> Dict[str, float]:
    """Per-task MAE in original units, eval mode, present labels only."""
    if not prepared:
        raise EmptySplit("no structures to evaluate")
    abs_err = np.zeros(len(config.tasks))
    counts = np.zeros(len(config.tasks))
    for start in range(0, len(prepared), batch_size):
        batch = make_batch(prepared[start:start + batch_size])
        preds = forward(batch, params, config, training=False).data
        preds = normalization.destandardize(preds)
        abs_err += (np.abs(preds - batch.labels) * batch.mask).sum(axis=0)
        counts += batch.mask.sum(axis=0)
    return {
        task: float(abs_err[t] / counts[t])
        for t, task in enumerate(config.tasks)
        if counts[t] > 0
    }


def evaluate(
    checkpoint: Checkpoint, records: Sequence[DatasetRecord], batch_size: int = 64
) -> Dict[str, float]:
    prepared = _prepare_records(records, checkpoint.config)
    return evaluate_prepared(
        prepared, checkpoint.params, checkpoint.config, checkpoint.normalization, batch_size
    )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    best_checkpoint: Checkpoint
    history: List[dict] = field(default_factory=list)


def train(
    model_config: ModelConfig,
    train_config: TrainConfig,
    train_records: Sequence[DatasetRecord],
    val_records: Sequence[DatasetRecord] = (),
    checkpoint_path=None,
    resume_from: Optional[Checkpoint] = None,
    metrics_path=None,
    stop_after_epoch: Optional[int] = None,
) -> TrainResult:
    """Run the full loop and return final plus best-validation checkpoints.

    Each epoch shuffles with a generator seeded by (seed, epoch) and walks
    minibatches with AdamW under the one-cycle schedule.  The best
    checkpoint is chosen by mean standardized validation MAE (train MAE
    when no validation split is given).  ``stop_after_epoch`` interrupts an
    ``epochs``-long schedule early; resuming the returned checkpoint with
    the same configs reproduces the uninterrupted run bitwise.
    """
    if not train_records:
        raise EmptySplit("training split is empty")

    prepared_train = _prepare_records(train_records, model_config)
    prepared_val = _prepare_records(val_records, model_config)

    if resume_from is not None:
        params = resume_from.params
        normalization = resume_from.normalization
        opt_state = resume_from.optimizer or AdamWState.create(params.parameters())
        history = list(resume_from.history)
        start_epoch = resume_from.epoch
        step = resume_from.step
    else:
        params = init_params(model_config)
        all_labels = np.stack([p.labels for p in prepared_train])
        all_mask = np.stack([p.mask for p in prepared_train])
        normalization = Normalization.fit(all_labels, all_mask)
        opt_state = AdamWState.create(params.parameters())
        history = []
        start_epoch = 0
        step = 0

    n = len(prepared_train)
    batches_per_epoch = (n + train_config.batch_size - 1) // train_config.batch_size
    total_steps = train_config.epochs * batches_per_epoch

    def snapshot(epoch):
        # deep copy: the live params/optimizer keep mutating after this
        return copy.deepcopy(
            Checkpoint(
                config=model_config,
                params=params,
                normalization=normalization,
                optimizer=opt_state,
                epoch=epoch,
                step=step,
                history=list(history),
            )
        )

    best_score = np.inf
    best_checkpoint = snapshot(start_epoch)
    for entry in history:
        if entry.get("score") is not None and entry["score"] < best_score:
            best_score = entry["score"]

    last_epoch = train_config.epochs if stop_after_epoch is None else stop_after_epoch
    trainable = params.parameters()
    for epoch in range(start_epoch, last_epoch):
        shuffle_rng = np.random.default_rng([train_config.seed, 1000 + epoch])
        noise_rng = np.random.default_rng([train_config.seed, 2000 + epoch])
        order = shuffle_rng.permutation(n)

        epoch_loss = 0.0
        lr = 0.0
        for b in range(batches_per_epoch):
            idx = order[b * train_config.batch_size:(b + 1) * train_config.batch_size]
            batch = _standardized_copy(
                make_batch([prepared_train[i] for i in idx]), normalization
            )
            use_aux = train_config.importance_weight > 0 and model_config.multi_task
            gate_sink = {} if use_aux else None
            preds = forward(batch, params, model_config, training=True,
                            noise_rng=noise_rng, gate_sink=gate_sink)
            loss = masked_l1(preds, batch.labels, batch.mask)
            if use_aux:
                for weights in gate_sink.values():
                    loss = ad.add(loss, ad.mul(
                        importance_loss(weights), train_config.importance_weight
                    ))
            params.zero_grads()
            loss.backward()
            lr = onecycle_lr(
                step + 1, total_steps, train_config.max_lr,
                train_config.pct_start, train_config.div_factor, train_config.final_div,
            )
            if not np.isfinite(loss.item()):
                grad_norm = max(
                    float(np.abs(p.value.grad).max()) for p in trainable
                )
                raise FloatingPointError(
                    f"non-finite loss at epoch {epoch} step {step} lr {lr:.3e} "
                    f"max|grad| {grad_norm:.3e}; "
                    f"batch ids {[prepared_train[i].id for i in idx]}"
                )
            adamw_step(
                trainable, opt_state, lr,
                betas=train_config.betas,
                eps=train_config.adam_eps,
                weight_decay=train_config.weight_decay,
            )
            step += 1
            epoch_loss += loss.item()

        entry = {
            "epoch": epoch + 1,
            "lr": lr,
            "train_loss": epoch_loss / batches_per_epoch,
        }
        train_mae = evaluate_prepared(
            prepared_train, params, model_config, normalization, train_config.batch_size
        )
        entry["train_mae"] = train_mae
        if prepared_val:
            val_mae = evaluate_prepared(
                prepared_val, params, model_config, normalization, train_config.batch_size
            )
            entry["val_mae"] = val_mae
            score_source = val_mae
        else:
            score_source = train_mae
        # model selection on standardized scale so tasks weigh equally
        scored = [
            score_source[task] / normalization.std[t]
            for t, task in enumerate(model_config.tasks)
            if task in score_source
        ]
        entry["score"] = float(np.mean(scored)) if scored else None
        history.append(entry)

        if entry["score"] is not None and entry["score"] < best_score:
            best_score = entry["score"]
            best_checkpoint = snapshot(epoch + 1)
            if checkpoint_path is not None:
                save_checkpoint(checkpoint_path, best_checkpoint)
        if (epoch + 1) % train_config.log_every == 0:
            logger.info(
                "epoch %d loss %.5f lr %.2e %s",
                epoch + 1, entry["train_loss"], lr,
                {k: round(v, 5) for k, v in (entry.get("val_mae") or train_mae).items()},
            )

    final = snapshot(last_epoch)
    if checkpoint_path is not None and best_checkpoint.epoch == start_epoch:
        # never improved (or 0 epochs): persist the final state anyway
        save_checkpoint(checkpoint_path, final)
    if metrics_path is not None:
        write_metrics_csv(metrics_path, history, model_config.tasks)
    return TrainResult(checkpoint=final, best_checkpoint=best_checkpoint, history=history)


def write_metrics_csv(path, history: List[dict], tasks: Sequence[str]) -> None:
    import csv

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = ["epoch", "lr", "train_loss"]
        for split in ("train", "val"):
            header += [f"{split}_mae_{task}" for task in tasks]
        writer.writerow(header)
        for entry in history:
            row = [entry["epoch"], entry["lr"], entry["train_loss"]]
            for split in ("train", "val"):
                maes = entry.get(f"{split}_mae") or {}
                row += [maes.get(task, "") for task in tasks]
            writer.writerow(row)


def collect_expert_usage(
    checkpoint: Checkpoint,
    records: Sequence[DatasetRecord],
    batch_size: int = 64,
    indicator: bool = False,
) -> ExpertUsage:
    """Gate statistics over a split, noise disabled (eval routing)."""
    config, params = checkpoint.config, checkpoint.params
    if not config.multi_task:
        raise ConfigError("expert usage requires a multi-task model")
    if not records:
        raise EmptySplit("no records to route")
    prepared = _prepare_records(records, config)
    per_task: Dict[str, List[np.ndarray]] = {task: [] for task in config.tasks}
    for start in range(0, len(prepared), batch_size):
        batch = make_batch(prepared[start:start + batch_size])
        pooled = pooled_embeddings(batch, params, config, training=False)
        for task in config.tasks:
            per_task[task].append(gate(pooled, params.gates[task], None).data)
    return usage_from_gate_weights(
        {task: np.vstack(chunks) for task, chunks in per_task.items()},
        indicator=indicator,
    )
