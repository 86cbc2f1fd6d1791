"""Training recipe: Adam, linear warmup into cosine decay, early stopping."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, List, Optional, Sequence, TextIO, Tuple

import numpy as np

from .. import numerics as nx
from ..errors import FormatError, NumericError, ParameterError
from ..numerics import Tensor, derive_seed, make_rng
from .data import SyntheticSample, generate_dataset, stack
from .metrics import per_class_dice
from .model import Params, SegConfig, forward_seg, init_params, predict, seg_loss

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 5e-4
    warmup_lr: float = 1e-6
    min_lr: float = 1e-5
    batch_size: int = 32
    warmup_epochs: int = 10
    epochs: int = 60
    patience: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    val_fraction: float = 0.1

    def __post_init__(self):
        if not (0 < self.warmup_lr <= self.min_lr <= self.lr):
            raise ParameterError("learning rates must satisfy 0 < warmup_lr <= min_lr <= lr")
        if self.epochs < 1 or self.batch_size < 1:
            raise ParameterError("epochs and batch_size must be >= 1")
        if not 0 <= self.warmup_epochs < self.epochs:
            raise ParameterError(f"warmup_epochs must lie in [0, epochs), got {self.warmup_epochs}")
        if not 1 <= self.patience <= self.epochs:
            raise ParameterError(f"patience must lie in [1, epochs], got {self.patience}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ParameterError("Adam betas must lie in [0, 1)")
        if not 0 < self.val_fraction < 1:
            raise ParameterError("val_fraction must lie in (0, 1)")

    @classmethod
    def scaled(cls, epochs: int, **overrides) -> "TrainConfig":
        """Shrink warmup and patience proportionally for short runs.

        The reference recipe is 10 warmup / 10 patience out of 60 epochs;
        for fewer epochs both keep that ratio (warmup strictly below the
        epoch count, patience at least 1).
        """
        base = cls()
        warm = min(int(round(epochs * base.warmup_epochs / base.epochs)), epochs - 1)
        pat = max(1, min(base.patience, epochs))
        kw = dict(epochs=epochs, warmup_epochs=warm, patience=pat)
        kw.update(overrides)
        return cls(**kw)


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Linear warmup from ``warmup_lr`` (epoch 0) to ``lr`` (epoch
    ``warmup_epochs``), then half-cosine down to ``min_lr`` at the last epoch."""
    if not 0 <= epoch < config.epochs:
        raise ParameterError(f"epoch {epoch} outside [0, {config.epochs})")
    W, E = config.warmup_epochs, config.epochs
    if epoch < W:
        return config.warmup_lr + (config.lr - config.warmup_lr) * epoch / W
    span = E - 1 - W
    if span == 0:
        return config.lr
    t = (epoch - W) / span
    return config.min_lr + 0.5 * (config.lr - config.min_lr) * (1.0 + math.cos(math.pi * t))


class Adam:
    def __init__(self, params: Params, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params: Params, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for k, p in params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            if not np.all(np.isfinite(p.data)):
                raise NumericError(f"parameter {k} became non-finite")
            p.grad = None


# --------------------------------------------------------------------------
# Run records
# --------------------------------------------------------------------------


def run_header(classes: int = 4) -> List[str]:
    return ["epoch", "lr", "train_loss", "val_mean_dice"] + [f"val_dice_c{c}" for c in range(1, classes)]


@dataclass
class EpochLog:
    epoch: int
    lr: float
    train_loss: float
    val_mean_dice: float
    val_dice: Tuple[float, ...]


@dataclass
class RunRecord:
    epochs: List[EpochLog] = field(default_factory=list)
    best_epoch: int = -1
    best_val_mean_dice: float = -1.0
    stopped_early: bool = False

    def write_csv(self, fh: TextIO, classes: int = 4) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(run_header(classes))
        for e in self.epochs:
            w.writerow([e.epoch, repr(e.lr), repr(e.train_loss), repr(e.val_mean_dice)] + [repr(x) for x in e.val_dice])

    @classmethod
    def read_csv(cls, fh: TextIO) -> "RunRecord":
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != run_header()[:4]:
            raise FormatError(f"unexpected run CSV header {header}")
        rec = cls()
        for row in reader:
            vals = [float(x) for x in row]
            rec.epochs.append(EpochLog(int(vals[0]), vals[1], vals[2], vals[3], tuple(vals[4:])))
        if rec.epochs:
            best = max(rec.epochs, key=lambda e: e.val_mean_dice)
            rec.best_epoch, rec.best_val_mean_dice = best.epoch, best.val_mean_dice
        return rec


# --------------------------------------------------------------------------
# Training
# --------------------------------------------------------------------------


def split_indices(n: int, seed: int, val_fraction: float = 0.1):
    """Deterministic train/val split; a single sample serves as both."""
    if n < 1:
        raise ParameterError("empty dataset")
    if n == 1:
        return np.array([0]), np.array([0])
    perm = make_rng(seed, "split").permutation(n)
    n_val = min(n - 1, max(1, int(round(n * val_fraction))))
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


def evaluate(cfg: SegConfig, params: Params, samples: Sequence[SyntheticSample]) -> np.ndarray:
    images, masks = stack(list(samples))
    return per_class_dice(predict(cfg, params, images), masks, cfg.classes)


def train(
    seg_cfg: SegConfig,
    train_cfg: TrainConfig,
    dataset: Sequence[SyntheticSample],
    seed: int,
    params: Optional[Params] = None,
) -> Tuple[Params, RunRecord]:
    """Fit on a 90/10 split; returns the best-validation parameters."""
    if len(dataset) == 0:
        raise ParameterError("empty dataset")
    tr_idx, va_idx = split_indices(len(dataset), seed, train_cfg.val_fraction)
    images, masks = stack(list(dataset))
    val = [dataset[i] for i in va_idx]
    params = init_params(seg_cfg, seed) if params is None else params
    opt = Adam(params, train_cfg.beta1, train_cfg.beta2, train_cfg.adam_eps)
    record = RunRecord()
    best = {k: v.data.copy() for k, v in params.items()}
    stale = 0
    for epoch in range(train_cfg.epochs):
        lr = lr_at(train_cfg, epoch)
        order = tr_idx[make_rng(seed, "shuffle", epoch).permutation(tr_idx.size)]
        total, seen = 0.0, 0
        for start in range(0, order.size, train_cfg.batch_size):
            batch = order[start:start + train_cfg.batch_size]
            loss = seg_loss(forward_seg(seg_cfg, params, images[batch]), masks[batch])
            nx.backward(loss)
            opt.step(params, lr)
            total += loss.item() * batch.size
            seen += batch.size
        scores = evaluate(seg_cfg, params, val)
        mean_dice = float(scores.mean())
        record.epochs.append(EpochLog(epoch, lr, total / seen, mean_dice, tuple(float(s) for s in scores)))
        log.info("epoch %d lr %.3g loss %.4f val dice %.4f", epoch, lr, total / seen, mean_dice)
        if mean_dice > record.best_val_mean_dice:
            record.best_val_mean_dice, record.best_epoch = mean_dice, epoch
            best = {k: v.data.copy() for k, v in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_cfg.patience:
                record.stopped_early = epoch < train_cfg.epochs - 1
                break
    return {k: Tensor(v, requires_grad=True) for k, v in best.items()}, record


# --------------------------------------------------------------------------
# Ablation
# --------------------------------------------------------------------------

ABLATION_HEADER = ["occlusion", "seed", "use_memory", "mean_dice", "dice_c1", "dice_c2", "dice_c3", "best_epoch"]
# wall and side chamber: the structures standing in for the poorly visible ones
OCCLUDED_CLASSES = (2, 3)


@dataclass(frozen=True)
class AblationRow:
    occlusion: float
    seed: int
    use_memory: bool
    dice: Tuple[float, ...]
    best_epoch: int

    @property
    def mean_dice(self) -> float:
        return float(np.mean(self.dice))

    def occluded_dice(self) -> float:
        return float(np.mean([self.dice[c - 1] for c in OCCLUDED_CLASSES]))


def ablate(
    seg_cfg: SegConfig,
    train_cfg: TrainConfig,
    occlusion_levels: Iterable[float],
    seeds: Sequence[int],
    n_samples: int = 512,
    n_test: int = 128,
) -> List[AblationRow]:
    """Train with and without memory for every (occlusion, seed) pair.

    Both arms see the same training data, the same split, the same
    shuffling and the same backbone initialisation; they are scored on a
    held-out test set drawn from its own stream.
    """
    if len(seeds) < 3:
        raise ParameterError(f"ablation needs at least 3 seeds, got {len(seeds)}")
    rows = []
    for level in occlusion_levels:
        for seed in seeds:
            data = generate_dataset(n_samples, level, seed, seg_cfg.image_size)
            test = generate_dataset(n_test, level, derive_seed(seed, "test"), seg_cfg.image_size)
            for use_memory in (False, True):
                cfg = replace(seg_cfg, use_memory=use_memory)
                params, rec = train(cfg, train_cfg, data, seed)
                scores = evaluate(cfg, params, test)
                rows.append(AblationRow(float(level), int(seed), use_memory, tuple(float(s) for s in scores), rec.best_epoch))
                log.info("occlusion %.2f seed %d memory %s dice %s", level, seed, use_memory, scores)
    return rows


def write_ablation_csv(rows: Sequence[AblationRow], fh: TextIO) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(ABLATION_HEADER)
    for r in rows:
        w.writerow([repr(r.occlusion), r.seed, int(r.use_memory), repr(r.mean_dice)] + [repr(x) for x in r.dice] + [r.best_epoch])


def read_ablation_csv(fh: TextIO) -> List[AblationRow]:
    reader = csv.DictReader(fh)
    if reader.fieldnames != ABLATION_HEADER:
        raise FormatError(f"unexpected ablation CSV header {reader.fieldnames}")
    return [
        AblationRow(
            float(r["occlusion"]), int(r["seed"]), bool(int(r["use_memory"])),
            (float(r["dice_c1"]), float(r["dice_c2"]), float(r["dice_c3"])), int(r["best_epoch"]),
        )
        for r in reader
    ]


def ablation_summary(rows: Sequence[AblationRow]) -> List[dict]:
    """Seed-averaged dice per occlusion level for each arm, plus on-minus-off deltas."""
    out = []
    for level in sorted({r.occlusion for r in rows}):
        arms = {}
        for flag in (False, True):
            sel = [r for r in rows if r.occlusion == level and r.use_memory == flag]
            arms[flag] = {
                "per_class": np.mean([r.dice for r in sel], axis=0),
                "mean": float(np.mean([r.mean_dice for r in sel])),
                "occluded": float(np.mean([r.occluded_dice() for r in sel])),
            }
        out.append({
            "occlusion": level,
            "off": arms[False],
            "on": arms[True],
            "delta_per_class": arms[True]["per_class"] - arms[False]["per_class"],
            "delta_mean": arms[True]["mean"] - arms[False]["mean"],
            "delta_occluded": arms[True]["occluded"] - arms[False]["occluded"],
        })
    return out
