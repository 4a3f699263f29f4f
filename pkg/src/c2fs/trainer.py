"""Training loop: augment, encode, four losses, SGD, EMA twin, checkpoints."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import substrate as ops
from .data import AugmentConfig, Dataset, augment_array
from .losses import ContrastiveState, LossWeights, loss_align, loss_ce, loss_cont, loss_rec, loss_total
from .model import ModelBundle

logger = logging.getLogger(__name__)


def relative_schedule(epochs: int, points=(0.7, 0.9), factor: float = 0.1) -> list[tuple[int, float]]:
    """Tenfold decays at fixed fractions of the run (140/180 of 200 scaled down)."""
    marks = sorted({min(epochs - 1, max(1, int(round(p * epochs)))) for p in points})
    return [(m, factor) for m in marks if 1 <= m < epochs]


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 64
    initial_lr: float = 0.05
    momentum: float = 0.9
    lr_schedule: Optional[list[tuple[int, float]]] = None
    weights: LossWeights = field(default_factory=LossWeights)
    contrastive: bool = True
    detach_align_stages: bool = False
    align_reduction: str = "mean"
    ema_coeff: float = 0.999
    temperature: float = 0.2
    queue_capacity: int = 4096
    seed: int = 0
    checkpoint_every: int = 10
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if self.epochs <= 0 or self.batch_size <= 0 or self.checkpoint_every <= 0:
            raise ValueError("epochs, batch_size and checkpoint_every must be positive")
        if self.lr_schedule is None:
            self.lr_schedule = relative_schedule(self.epochs)
        self.lr_schedule = [(int(e), float(m)) for e, m in self.lr_schedule]
        if self.align_reduction not in ("sum", "mean"):
            raise ValueError(f"unknown align_reduction {self.align_reduction!r}")
        eps = [e for e, _ in self.lr_schedule]
        if eps != sorted(set(eps)) or any(e >= self.epochs for e in eps):
            raise ValueError(f"lr_schedule epochs must be strictly increasing and < {self.epochs}")


class TrainingAborted(RuntimeError):
    pass


class Trainer:
    """Holds all mutable training state so runs can be checkpointed and resumed exactly.

    Step randomness is derived from ``(seed, epoch, step)`` so a resumed run
    replays the same augmentations and batch order.
    """

    def __init__(self, model: ModelBundle, config: TrainConfig, dataset: Dataset,
                 out_dir: Optional[Path] = None):
        self.model = model
        self.config = config
        self.dataset = dataset
        self.out_dir = Path(out_dir) if out_dir is not None else None
        model.ema_coeff = config.ema_coeff
        self.opt = ops.OptimizerState(config.initial_lr, config.momentum, config.lr_schedule)
        self.cont = ContrastiveState(config.queue_capacity, config.temperature)
        self.epoch = 0
        self.step_in_epoch = 0
        self.log: list[dict] = []
        self.last_checkpoint: Optional[Path] = None
        self._dtype = next(model.parameters()).dtype
        self._coarse = torch.from_numpy(np.array(dataset.coarse, dtype=np.int64))
        self._epoch_sums: dict[str, float] = {}

    # ------------------------------------------------------------------

    def batches(self, epoch: int) -> list[np.ndarray]:
        rng = np.random.default_rng([self.config.seed, epoch, 0x5EED])
        order = rng.permutation(len(self.dataset))
        bs = self.config.batch_size
        return [order[i:i + bs] for i in range(0, len(order), bs)]

    def compute_losses(self, xq: torch.Tensor, xk: torch.Tensor, labels: torch.Tensor,
                       update_queue: bool = True):
        """Composite loss on one batch; returns (total tensor, report)."""
        m, cfg = self.model, self.config
        w = cfg.weights
        pack = m.encode(xq)
        l_ce = loss_ce(m.coarse_logits(pack), labels)
        if cfg.contrastive:
            keys = m.keys(xk)
            l_cont = loss_cont(pack.projected, keys, labels, self.cont, update_queue=update_queue)
        else:
            l_cont = torch.zeros((), dtype=l_ce.dtype)
        with torch.set_grad_enabled(w.alpha > 0 and torch.is_grad_enabled()):
            l_rec = loss_rec(m.reconstruct(pack), xq)
        with torch.set_grad_enabled(w.beta > 0 and torch.is_grad_enabled()):
            l_align = loss_align(m.rescale_all(pack, cfg.detach_align_stages),
                                 cfg.align_reduction)
        return loss_total(l_ce, l_cont, l_rec, l_align, w)

    def views(self, idx: np.ndarray, epoch: int, step: int):
        rng = np.random.default_rng([self.config.seed, epoch, step, 0xA4])
        x = self.dataset.inputs[idx]
        xq = augment_array(x, rng, self.config.augment)
        xk = augment_array(x, rng, self.config.augment)
        to = lambda a: torch.from_numpy(np.ascontiguousarray(a)).to(self._dtype)
        return to(xq), to(xk), self._coarse[idx]

    def step(self, idx: np.ndarray) -> dict:
        epoch, step = self.epoch, self.step_in_epoch
        xq, xk, labels = self.views(idx, epoch, step)
        total, report = self.compute_losses(xq, xk, labels)
        if not math.isfinite(report.total):
            raise TrainingAborted(
                f"non-finite loss at epoch {epoch} step {step}; last good checkpoint: "
                f"{self.last_checkpoint}")
        total.backward()
        lr = ops.sgd_step(self.model.trainable_parameters(), self.opt, epoch)
        self.model.momentum_update()
        self.step_in_epoch += 1
        rec = report.as_dict()
        rec["lr"] = lr
        return rec

    def run_epoch(self) -> dict:
        sums = {k: 0.0 for k in ("l_ce", "l_cont", "l_rec", "l_align", "total")}
        batches = self.batches(self.epoch)
        n = 0
        lr = self.opt.lr_at(self.epoch)
        for idx in batches[self.step_in_epoch:]:
            rec = self.step(idx)
            for k in sums:
                sums[k] += rec[k] * len(idx)
            n += len(idx)
        entry = {"epoch": self.epoch, **{k: v / max(n, 1) for k, v in sums.items()}, "lr": lr}
        self.log.append(entry)
        self.epoch += 1
        self.step_in_epoch = 0
        return entry

    def fit(self, on_epoch: Optional[Callable[[dict], None]] = None) -> list[dict]:
        log_fh = None
        if self.out_dir is not None:
            self.out_dir.mkdir(parents=True, exist_ok=True)
            log_fh = open(self.out_dir / "log.jsonl", "a")
        try:
            while self.epoch < self.config.epochs:
                entry = self.run_epoch()
                logger.info("epoch %d total %.4f (ce %.4f cont %.4f rec %.4f align %.4f) lr %.4g",
                            entry["epoch"], entry["total"], entry["l_ce"], entry["l_cont"],
                            entry["l_rec"], entry["l_align"], entry["lr"])
                if log_fh is not None:
                    log_fh.write(json.dumps(entry) + "\n")
                    log_fh.flush()
                    if self.epoch % self.config.checkpoint_every == 0 or self.epoch == self.config.epochs:
                        self.save(self.out_dir / f"ckpt-{self.epoch:04d}.c2fsckpt")
                if on_epoch is not None:
                    on_epoch(entry)
        finally:
            if log_fh is not None:
                log_fh.close()
        return self.log

    # persistence ------------------------------------------------------

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = dict(self.model.tensors())
        for name, v in self.opt.velocity.items():
            out[f"optim.velocity.{name}"] = v
        for y, q in sorted(self.cont.queues.items()):
            if len(q):
                out[f"queue.{y}"] = q
        out["trainer.position"] = torch.tensor([float(self.epoch), float(self.step_in_epoch)])
        return out

    def save(self, path) -> Path:
        path = Path(path)
        ops.save_tensors(path, self.state_tensors())
        self.last_checkpoint = path
        return path

    def load(self, path) -> None:
        tensors = ops.load_tensors(path)
        self.model.load_tensors({k: v for k, v in tensors.items()
                                 if not k.startswith(("optim.", "queue.", "trainer."))})
        params = self.model.trainable_parameters()
        self.opt.velocity = {k[len("optim.velocity."):]: v.to(self._dtype).clone()
                             for k, v in tensors.items() if k.startswith("optim.velocity.")}
        for name, v in self.opt.velocity.items():
            if name not in params or params[name].shape != v.shape:
                raise ValueError(f"velocity {name!r} does not match the model")
        self.cont.queues = {int(k.split(".")[1]): v.to(self._dtype).clone()
                            for k, v in tensors.items() if k.startswith("queue.")}
        if "trainer.position" in tensors:
            pos = tensors["trainer.position"].tolist()
            self.epoch, self.step_in_epoch = int(pos[0]), int(pos[1])


def train(dataset: Dataset, model: ModelBundle, config: TrainConfig,
          out_dir: Optional[Path] = None) -> tuple[ModelBundle, list[dict]]:
    """Train in place under coarse supervision; returns the model and per-epoch log."""
    if np.any(np.asarray(dataset.coarse) < 0):
        raise ValueError("every training example needs a coarse label")
    if int(np.max(dataset.coarse)) >= model.cfg.coarse_count:
        raise ValueError(f"dataset has coarse labels beyond the model's {model.cfg.coarse_count} outputs")
    trainer = Trainer(model, config, dataset, out_dir)
    log = trainer.fit()
    return model, log
