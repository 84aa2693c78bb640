"""Maximum-likelihood training for base and corrector inverters."""
from __future__ import annotations

import copy
import json
import logging
import math
import os
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, TrainingError
from .models import InversionModel, InverterConfig

logger = logging.getLogger(__name__)


@dataclass
class Hyperparams:
    lr: float = 2e-4
    epochs: int = 100
    batch_size: int = 128
    warmup_fraction: float = 0.05
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    seed: int = 0
    max_steps: int | None = None
    keep_best: bool = False   # restore the weights with the lowest eval loss at the end
    eval_every: int | None = None  # steps; default one epoch with keep_best, else 200

    def __post_init__(self):
        if self.lr <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("lr > 0, batch_size >= 1 and epochs >= 0 are required")
        if not 0 <= self.warmup_fraction < 1:
            raise ConfigError("warmup_fraction must be in [0, 1)")


@dataclass
class TrainState:
    model: InversionModel
    optimizer: torch.optim.Optimizer
    scheduler: torch.optim.lr_scheduler.LambdaLR
    hyperparams: Hyperparams
    step: int = 0
    best_eval_loss: float = math.inf
    best_step: int | None = None
    history: list[dict] = field(default_factory=list)

    @property
    def config(self) -> InverterConfig:
        return self.model.config


@dataclass
class TrainingTensors:
    """Aligned inputs for teacher-forced training."""

    e: torch.Tensor
    e_hat: torch.Tensor
    hyp_ids: torch.Tensor
    tgt_ids: torch.Tensor

    def __len__(self) -> int:
        return self.e.shape[0]

    def batch(self, idx) -> tuple[torch.Tensor, ...]:
        hyp = self.hyp_ids[idx]
        tgt = self.tgt_ids[idx]
        # trim shared padding columns
        if hyp.shape[1]:
            hyp = hyp[:, : int((hyp != 0).sum(1).max())]
        tgt = tgt[:, : int((tgt != 0).sum(1).max())]
        return self.e[idx], self.e_hat[idx], hyp, tgt


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed)
    torch.manual_seed(seed)


def warmup_linear(total_steps: int, warmup_fraction: float):
    warmup = max(1, int(round(total_steps * warmup_fraction))) if warmup_fraction > 0 else 0

    def factor(step: int) -> float:
        if warmup and step < warmup:
            return step / warmup
        if total_steps <= warmup:
            return 1.0
        return max(0.0, (total_steps - step) / (total_steps - warmup))

    return factor


def new_train_state(config: InverterConfig, hp: Hyperparams, n_examples: int) -> TrainState:
    seed_everything(hp.seed)
    model = InversionModel(config)
    opt = torch.optim.Adam(model.parameters(), lr=hp.lr, weight_decay=hp.weight_decay)
    steps_per_epoch = math.ceil(n_examples / hp.batch_size)
    total = hp.max_steps if hp.max_steps is not None else hp.epochs * steps_per_epoch
    sched = torch.optim.lr_scheduler.LambdaLR(opt, warmup_linear(max(total, 1), hp.warmup_fraction))
    return TrainState(model, opt, sched, hp)


@torch.no_grad()
def eval_loss(model: InversionModel, data: TrainingTensors, batch_size: int = 256) -> float:
    model.eval()
    total, count = 0.0, 0
    for i in range(0, len(data), batch_size):
        idx = torch.arange(i, min(i + batch_size, len(data)))
        e, e_hat, hyp, tgt = data.batch(idx)
        n_tok = int((tgt[:, 1:] != 0).sum())
        total += float(model.loss(e, e_hat, hyp, tgt)) * n_tok
        count += n_tok
    return total / max(count, 1)


def fit(state: TrainState, data: TrainingTensors, eval_data: TrainingTensors | None = None,
        metrics_path: str | os.PathLike | None = None, log_every: int = 50) -> TrainState:
    """Run the optimizer until ``epochs`` (or ``max_steps``) are exhausted."""
    hp = state.hyperparams
    if len(data) == 0:
        raise ConfigError("cannot train on an empty dataset")
    steps_per_epoch = math.ceil(len(data) / hp.batch_size)
    total = hp.max_steps if hp.max_steps is not None else hp.epochs * steps_per_epoch
    every = hp.eval_every or (steps_per_epoch if hp.keep_best else log_every * 4)
    best_weights = None
    gen = torch.Generator().manual_seed(hp.seed + state.step)
    metrics = open(metrics_path, "a") if metrics_path else None
    model = state.model
    try:
        while state.step < total:
            perm = torch.randperm(len(data), generator=gen)
            for start in range(0, len(data), hp.batch_size):
                if state.step >= total:
                    break
                model.train()
                e, e_hat, hyp, tgt = data.batch(perm[start:start + hp.batch_size])
                lr = state.scheduler.get_last_lr()[0]
                loss = model.loss(e, e_hat, hyp, tgt)
                if not torch.isfinite(loss):
                    raise TrainingError(
                        f"non-finite loss {loss.item()} at step {state.step} (lr={lr:.3g})")
                state.optimizer.zero_grad()
                loss.backward()
                if hp.grad_clip:
                    torch.nn.utils.clip_grad_norm_(model.parameters(), hp.grad_clip)
                state.optimizer.step()
                state.scheduler.step()
                state.step += 1
                rec = {"step": state.step, "loss": loss.item(), "lr": lr}
                last = state.step == total
                if eval_data is not None and (state.step % every == 0 or last):
                    ev = eval_loss(model, eval_data)
                    rec["eval_loss"] = ev
                    if ev < state.best_eval_loss:
                        state.best_eval_loss, state.best_step = ev, state.step
                        if hp.keep_best:
                            best_weights = copy.deepcopy(model.state_dict())
                state.history.append(rec)
                if metrics:
                    metrics.write(json.dumps(rec) + "\n")
                if state.step % log_every == 0 or last:
                    logger.info("step %d loss %.4f lr %.2e", state.step, rec["loss"], lr)
    finally:
        if metrics:
            metrics.close()
    if best_weights is not None:
        model.load_state_dict(best_weights)
        logger.info("restored weights from step %d (eval loss %.4f)", state.best_step,
                    state.best_eval_loss)
    model.eval()
    return state


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(state: TrainState, directory: str | os.PathLike) -> Path:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest = {
        "config": state.config.to_dict(),
        "hyperparams": asdict(state.hyperparams),
        "step": state.step,
        "best_eval_loss": state.best_eval_loss if math.isfinite(state.best_eval_loss) else None,
        "best_step": state.best_step,
    }
    (d / "config.json").write_text(json.dumps(manifest, indent=2))
    torch.save(state.model.state_dict(), d / "weights.pt")
    torch.save({"optimizer": state.optimizer.state_dict(),
                "scheduler": state.scheduler.state_dict()}, d / "optimizer.pt")
    return d


def load_checkpoint(directory: str | os.PathLike, n_examples: int = 1) -> TrainState:
    d = Path(directory)
    manifest = json.loads((d / "config.json").read_text())
    config = InverterConfig(**manifest["config"])
    hp = Hyperparams(**manifest["hyperparams"])
    state = new_train_state(config, hp, n_examples)
    state.model.load_state_dict(torch.load(d / "weights.pt", weights_only=True))
    opt = d / "optimizer.pt"
    if opt.exists():
        blob = torch.load(opt, weights_only=True)
        state.optimizer.load_state_dict(blob["optimizer"])
        state.scheduler.load_state_dict(blob["scheduler"])
    state.step = manifest["step"]
    if manifest.get("best_eval_loss") is not None:
        state.best_eval_loss = manifest["best_eval_loss"]
    state.best_step = manifest.get("best_step")
    state.model.eval()
    return state


def load_model(directory: str | os.PathLike) -> InversionModel:
    return load_checkpoint(directory).model


# -- role-specific entry points ------------------------------------------------

def _check_tokenizer(examples: Sequence, config: InverterConfig) -> None:
    ids = {getattr(ex, "tokenizer_id", config.tokenizer_id) for ex in examples}
    if ids - {config.tokenizer_id}:
        raise ConfigError(
            f"dataset tokenizer {sorted(ids)} does not match config {config.tokenizer_id!r}")


def base_tensors(model: InversionModel, examples: Sequence, empty_embedding) -> TrainingTensors:
    e = model.as_tensor(np.stack([ex.target_embedding for ex in examples]))
    e_hat = model.as_tensor(np.asarray(empty_embedding))[None].expand_as(e).contiguous()
    hyp = torch.zeros((len(examples), 0), dtype=torch.long, device=model.device)
    return TrainingTensors(e, e_hat, hyp, model.target_ids([ex.tokens for ex in examples]))


def corrector_tensors(model: InversionModel, records: Sequence) -> TrainingTensors:
    e = model.as_tensor(np.stack([r.example.target_embedding for r in records]))
    e_hat = model.as_tensor(np.stack([r.hypothesis_embedding for r in records]))
    hyp = model.hypothesis_ids([r.hypothesis_tokens for r in records])
    tgt = model.target_ids([r.example.tokens for r in records])
    return TrainingTensors(e, e_hat, hyp, tgt)


def train_base(dataset: Sequence, config: InverterConfig, hyperparams: Hyperparams,
               empty_embedding, eval_dataset: Sequence | None = None,
               metrics_path=None, state: TrainState | None = None) -> TrainState:
    """Fit ``p(x | e, <empty>, phi(<empty>))`` by token-level NLL."""
    if not dataset:
        raise ConfigError("cannot train on an empty dataset")
    if config.role != "base":
        raise ConfigError("train_base needs a config with role='base'")
    _check_tokenizer(dataset, config)
    config.empty_embedding = [float(v) for v in np.asarray(empty_embedding)]
    state = state or new_train_state(config, hyperparams, len(dataset))
    data = base_tensors(state.model, dataset, empty_embedding)
    ev = base_tensors(state.model, eval_dataset, empty_embedding) if eval_dataset else None
    return fit(state, data, ev, metrics_path)


def train_corrector(records: Sequence, config: InverterConfig, hyperparams: Hyperparams,
                    eval_records: Sequence | None = None, metrics_path=None,
                    state: TrainState | None = None) -> TrainState:
    """Fit ``p(x | e, x0, phi(x0))`` on base-model hypothesis records."""
    if not records:
        raise ConfigError("cannot train on an empty dataset")
    if config.role != "corrector":
        raise ConfigError("train_corrector needs a config with role='corrector'")
    _check_tokenizer([r.example for r in records], config)
    state = state or new_train_state(config, hyperparams, len(records))
    data = corrector_tensors(state.model, records)
    ev = corrector_tensors(state.model, eval_records) if eval_records else None
    return fit(state, data, ev, metrics_path)
