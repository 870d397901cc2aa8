"""
Joint training of prompts, LoRA factors and head:

    L = L_learn + lambda * L_unlearn

L_learn is cross-entropy with the true class prompt present among m distractors;
L_unlearn is KL-to-uniform with only the m distractors present.
"""

import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config.model_config import TrainConfig
from modules import numerics
from modules.dataset import Dataset
from modules.model_runner import PreForgettableModel
from modules.numerics import AdamOptimizer, derive_seed
from modules.prompt_pool import PromptPoolError

logger = logging.getLogger(__name__)

LOSS_LOG_FIELDS = ["epoch", "batch", "learn_term", "unlearn_term", "total", "wall_ms"]


class TrainingDivergedError(RuntimeError):
    def __init__(self, message: str, breakdown: "LossBreakdown"):
        super().__init__(message)
        self.breakdown = breakdown


@dataclass
class LossBreakdown:
    epoch: int
    batch_index: int
    learn_term: float
    unlearn_term: float
    total: float
    wall_ms: float = 0.0

    def as_row(self) -> dict:
        return {"epoch": self.epoch, "batch": self.batch_index, "learn_term": self.learn_term,
                "unlearn_term": self.unlearn_term, "total": self.total,
                "wall_ms": round(self.wall_ms, 3)}


@dataclass
class FitResult:
    model: PreForgettableModel
    log: List[LossBreakdown] = field(default_factory=list)

    def epoch_means(self, term: str = "learn_term") -> List[float]:
        epochs = sorted({b.epoch for b in self.log})
        return [float(np.mean([getattr(b, term) for b in self.log if b.epoch == e])) for e in epochs]


class PromptTrainer:
    def __init__(self, model: PreForgettableModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.switches = config.ablation

    # -- prompt sequences ------------------------------------------------------

    def _distractors(self, label: int) -> List[int]:
        pool = self.model.pool
        if not self.switches.use_sampling:
            return [c for c in pool.active_classes() if c != label]
        m = pool.draw_m(label, self.config.m_distribution)
        return pool.sample_distractors(label, m)

    def _order(self, ids: List[int]) -> List[int]:
        if self.switches.use_shuffle:
            return self.model.pool.assemble_shuffled(ids)
        return sorted(ids)

    def learn_sequence(self, label: int) -> List[int]:
        """Ordered prompt ids for the learning term: true prompt plus distractors"""
        return self._order([label] + self._distractors(label))

    def unlearn_sequence(self, label: int) -> List[int]:
        """Ordered prompt ids for the unlearning term: distractors only"""
        return self._order(self._distractors(label))

    def _forward(self, images, id_lists: Sequence[Sequence[int]]) -> torch.Tensor:
        tokens, mask = self.model.pool.batch_tokens(id_lists)
        return self.model(torch.as_tensor(images), tokens, mask)

    # -- loss terms ------------------------------------------------------------

    def compute_learn_loss(self, images, labels) -> torch.Tensor:
        labels = [int(c) for c in labels]
        inactive = sorted({c for c in labels if not self.model.pool.active[c]})
        if inactive:
            raise PromptPoolError(f"cannot train forgotten classes {inactive}")
        logits = self._forward(images, [self.learn_sequence(c) for c in labels])
        return numerics.cross_entropy(logits, labels)

    def compute_unlearn_loss(self, images, labels) -> torch.Tensor:
        if self.model.pool.active_count < 2:
            raise PromptPoolError("unlearning term needs at least two active classes")
        logits = self._forward(images, [self.unlearn_sequence(int(c)) for c in labels])
        return numerics.kl_to_uniform(logits)

    def batch_loss(self, images, labels):
        learn = self.compute_learn_loss(images, labels)
        if self.switches.use_kl:
            unlearn = self.compute_unlearn_loss(images, labels)
            total = learn + self.config.lam * unlearn
        else:
            unlearn = torch.zeros((), dtype=learn.dtype)
            total = learn
        return total, learn, unlearn

    # -- loop ------------------------------------------------------------------

    def fit(self, dataset: Dataset) -> FitResult:
        cfg = self.config
        pool = self.model.pool
        if len(dataset) == 0:
            raise ValueError("cannot train on an empty dataset")
        if pool.active_count != pool.num_classes:
            raise PromptPoolError("training requires every class prompt to be active")
        if pool.num_classes < 2:
            raise PromptPoolError("training requires at least two classes")

        pool.reseed(derive_seed(cfg.seed, "sampler"))
        order_rng = np.random.default_rng(derive_seed(cfg.seed, "batches"))
        optimizer = AdamOptimizer(self.model.parameters(), lr=cfg.lr, betas=cfg.betas, eps=cfg.eps)
        result = FitResult(self.model)
        n_batches = math.ceil(len(dataset) / cfg.batch_size)
        logger.info(f"Training for {cfg.epochs} epochs, {n_batches} batches/epoch, lambda={cfg.lam}, "
                    f"switches={self.switches}, full_knowledge={cfg.full_knowledge}")

        self.model.train()
        for epoch in range(1, cfg.epochs + 1):
            progress = tqdm(dataset.batches(cfg.batch_size, order_rng), total=n_batches,
                            desc=f"epoch {epoch}", disable=not cfg.progress, leave=False)
            for batch_index, (images, labels) in enumerate(progress):
                started = time.perf_counter()
                optimizer.zero_grad()
                total, learn, unlearn = self.batch_loss(images, labels)
                breakdown = LossBreakdown(epoch, batch_index, learn.item(), unlearn.item(), total.item())
                if not torch.isfinite(total):
                    logger.error(f"Non-finite loss at epoch {epoch} batch {batch_index}: {breakdown}")
                    raise TrainingDivergedError(
                        f"loss became non-finite at epoch {epoch}, batch {batch_index} "
                        f"(learn={breakdown.learn_term}, unlearn={breakdown.unlearn_term}); "
                        f"check the learning rate ({cfg.lr}) and initialization", breakdown)
                numerics.backward(total)
                optimizer.step()
                breakdown.wall_ms = (time.perf_counter() - started) * 1000.0
                result.log.append(breakdown)
                progress.set_postfix(loss=f"{breakdown.total:.4f}")
            learn_mean = result.epoch_means("learn_term")[-1]
            unlearn_mean = result.epoch_means("unlearn_term")[-1]
            logger.info(f"Epoch {epoch}/{cfg.epochs}: learn={learn_mean:.4f} unlearn={unlearn_mean:.4f}")
        self.model.eval()
        return result


def fit(model: PreForgettableModel, dataset: Dataset, config: TrainConfig) -> FitResult:
    return PromptTrainer(model, config).fit(dataset)


def write_loss_log(log: Sequence[LossBreakdown], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    pd.DataFrame([b.as_row() for b in log], columns=LOSS_LOG_FIELDS).to_csv(path, index=False)
    logger.info(f"Wrote {len(log)} loss rows to {path}")
