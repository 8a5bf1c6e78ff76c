"""Losses, optimisers and the phased adversarial training loop.

An adversarial epoch runs three sub-updates in a fixed order: the aMCI
individual discriminator with extractor 1, the HC individual discriminator
with extractor 2, then the domain discriminator with both extractors.  A
classifier epoch updates both extractors and the classifier on the group
labels.  Every sub-update owns its optimiser, so moment estimates never mix
between objectives.
"""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ._alloc import tune_allocator
from .data import AMCI, HC
from .errors import DataError, MissingLabelsError, ParameterError, RoutingError
from .model import ArchConfig, GfdannModel
from .tensor import Tensor, as_tensor, log, pick, tensor_mean

logger = logging.getLogger(__name__)

__all__ = [
    "TrainConfig",
    "LossReport",
    "focal_loss",
    "total_loss",
    "Adam",
    "SGD",
    "Trainer",
    "Batch",
    "adversarial_phase_step",
    "classifier_phase_step",
    "TrainResult",
    "train",
    "individual_labels",
]

LOG_COLUMNS = ("epoch", "phase", "L_c", "L_d1", "L_d2", "L_d3", "L_total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    n_d: int = 20
    n_c: int = 20
    lr_d1: float = 1e-3
    lr_d2: float = 1e-3
    lr_d3: float = 1e-3
    lr_c: float = 1e-3
    lr_decay: float = 0.95  # multiplied in once per epoch of a phase
    batch_size: int = 64
    focal_gamma: float = 2.0
    focal_alpha: float = 1.0
    seed: int = 0
    gfe_enabled: bool = True
    dbda_enabled: bool = True
    schedule: str = "sequential"  # or "interleaved"
    optimizer: str = "adam"  # or "sgd"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    balanced_domain_batches: bool = True

    def __post_init__(self):
        for name in ("lr_d1", "lr_d2", "lr_d3", "lr_c"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0")
        if self.n_d < 0 or self.n_c < 0:
            raise ParameterError("epoch counts must be >= 0")
        if self.focal_gamma < 0 or self.focal_alpha <= 0:
            raise ParameterError("focal gamma must be >= 0 and alpha > 0")
        if not 0 < self.lr_decay <= 1:
            raise ParameterError("lr_decay must lie in (0, 1]")
        if self.batch_size < 2:
            raise ParameterError("batch_size must be >= 2 for batch normalisation")
        if self.schedule not in ("sequential", "interleaved"):
            raise ParameterError(f"unknown schedule {self.schedule!r}")
        if self.optimizer not in ("adam", "sgd"):
            raise ParameterError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LossReport:
    """Loss components of one step or epoch; absent terms are 0."""

    L_c: float = 0.0
    L_d1: float = 0.0
    L_d2: float = 0.0
    L_d3: float = 0.0

    @property
    def total(self) -> float:
        return total_loss(self.L_c, self.L_d1, self.L_d2, self.L_d3)

    def as_row(self) -> dict:
        return {"L_c": self.L_c, "L_d1": self.L_d1, "L_d2": self.L_d2, "L_d3": self.L_d3, "L_total": self.total}


def total_loss(L_c: float, L_d1: Optional[float] = None, L_d2: Optional[float] = None,
               L_d3: Optional[float] = None) -> float:
    """Overall objective; disabled discriminator terms (None) count as 0."""
    return float(L_c) - float(L_d1 or 0.0) - float(L_d2 or 0.0) - float(L_d3 or 0.0)


def focal_loss(probabilities, targets, gamma: float = 2.0, alpha: float = 1.0) -> Tensor:
    """Batch mean of ``-alpha (1 - p_t)^gamma log p_t``."""
    if gamma < 0:
        raise ParameterError("gamma must be >= 0")
    if targets is None:
        raise MissingLabelsError("focal loss needs target labels")
    probs = as_tensor(probabilities)
    p_t = pick(probs, targets)
    nll = log(p_t) * -alpha
    if gamma == 0:
        return tensor_mean(nll)
    return tensor_mean((1.0 - p_t) ** gamma * nll)


# -- optimisers --------------------------------------------------------------

class SGD:
    def __init__(self, params: Sequence[Tensor], lr: float):
        self.params = list(params)
        self.lr = lr

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        for p in self.params:
            if p.grad is not None:
                p.data -= lr * p.grad


class Adam:
    def __init__(self, params: Sequence[Tensor], lr: float, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros(p.shape) for p in self.params]
        self.v = [np.zeros(p.shape) for p in self.params]
        self.t = 0

    def step(self, lr: Optional[float] = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


# -- single steps ------------------------------------------------------------

@dataclass
class Batch:
    x: np.ndarray
    labels: Optional[np.ndarray]
    groups: Optional[np.ndarray] = None  # class labels, used only for routing checks


class Trainer:
    """Model plus one optimiser per sub-update."""

    def __init__(self, model: GfdannModel, config: TrainConfig):
        self.model = model
        self.config = config
        self.opt_d1 = self.opt_d2 = self.opt_d3 = None
        if model.gfe_enabled:
            self.opt_d1 = self._make(model.theta_f1 + model.theta_d1, config.lr_d1)
            self.opt_d2 = self._make(model.theta_f2 + model.theta_d2, config.lr_d2)
        if model.dbda_enabled:
            self.opt_d3 = self._make(model.theta_f1 + model.theta_f2 + model.theta_d3, config.lr_d3)
        self.opt_c = self._make(model.theta_f1 + model.theta_f2 + model.theta_c, config.lr_c)

    def _make(self, params, lr):
        c = self.config
        if c.optimizer == "sgd":
            return SGD(params, lr)
        return Adam(params, lr, c.adam_beta1, c.adam_beta2, c.adam_eps)

    def _loss(self, probs: Tensor, labels) -> Tensor:
        return focal_loss(probs, labels, self.config.focal_gamma, self.config.focal_alpha)

    def individual_step(self, batch: Batch, branch: int, lr_scale: float = 1.0) -> float:
        if batch.labels is None:
            raise MissingLabelsError(f"individual labels are required for branch {branch}")
        model = self.model
        opt = self.opt_d1 if branch == 1 else self.opt_d2
        model.zero_grad()
        probs = model.discriminate_individual(batch.x, branch, training=True, groups=batch.groups)
        loss = self._loss(probs, batch.labels)
        loss.backward()
        opt.step(opt.lr * lr_scale)
        return float(loss.data)

    def domain_step(self, batch: Batch, lr_scale: float = 1.0) -> float:
        if batch.labels is None:
            raise MissingLabelsError("domain labels are required for the domain discriminator")
        model = self.model
        model.zero_grad()
        loss = self._loss(model.discriminate_domain(batch.x, training=True), batch.labels)
        loss.backward()
        self.opt_d3.step(self.opt_d3.lr * lr_scale)
        return float(loss.data)

    def classifier_step(self, batch: Batch, lr_scale: float = 1.0) -> float:
        if batch.labels is None:
            raise MissingLabelsError("class labels are required for the classifier")
        model = self.model
        model.zero_grad()
        loss = self._loss(model.classify(batch.x, training=True), batch.labels)
        loss.backward()
        self.opt_c.step(self.opt_c.lr * lr_scale)
        return float(loss.data)


def adversarial_phase_step(trainer: Trainer, batch_c1: Optional[Batch], batch_c2: Optional[Batch],
                           batch_r: Optional[Batch], lr_scale: float = 1.0) -> LossReport:
    """Individual discriminator 1, then 2, then the domain discriminator.

    Sub-updates whose module is disabled, or whose batch is None, are skipped.
    """
    model = trainer.model
    l1 = l2 = l3 = 0.0
    if model.gfe_enabled:
        if batch_c1 is not None:
            l1 = trainer.individual_step(batch_c1, 1, lr_scale)
        if batch_c2 is not None:
            l2 = trainer.individual_step(batch_c2, 2, lr_scale)
    if model.dbda_enabled and batch_r is not None:
        l3 = trainer.domain_step(batch_r, lr_scale)
    return LossReport(L_d1=l1, L_d2=l2, L_d3=l3)


def classifier_phase_step(trainer: Trainer, batch: Batch, lr_scale: float = 1.0) -> LossReport:
    return LossReport(L_c=trainer.classifier_step(batch, lr_scale))


# -- full run ----------------------------------------------------------------

def individual_labels(subjects: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Map subject ids to 0..k-1 in sorted id order."""
    ids = sorted(int(s) for s in np.unique(subjects))
    lookup = {s: i for i, s in enumerate(ids)}
    return np.array([lookup[int(s)] for s in subjects], dtype=np.int64), ids


def _batches(order: np.ndarray, size: int) -> list[np.ndarray]:
    """Split an index order into mini-batches, folding a size-1 tail into
    the previous batch so batch norm always sees at least two samples."""
    chunks = [order[i : i + size] for i in range(0, len(order), size)]
    if len(chunks) > 1 and len(chunks[-1]) < 2:
        chunks[-2] = np.concatenate([chunks[-2], chunks.pop()])
    return chunks


@dataclass
class TrainResult:
    model: GfdannModel
    history: list[dict] = field(default_factory=list)
    individual_ids_1: list[int] = field(default_factory=list)
    individual_ids_2: list[int] = field(default_factory=list)


class _EpochRunner:
    def __init__(self, trainer: Trainer, xs, ys, subj, xt, rng, callback=None):
        self.trainer = trainer
        self.rng = rng
        self.callback = callback
        self.cfg = trainer.config
        self.xs, self.ys = xs, ys
        self.xt = xt
        c1 = np.flatnonzero(ys == AMCI)
        c2 = np.flatnonzero(ys == HC)
        self.c1, self.c2 = c1, c2
        self.ind1, self.ids1 = individual_labels(subj[c1])
        self.ind2, self.ids2 = individual_labels(subj[c2])

    def adversarial_epoch(self, lr_scale: float) -> LossReport:
        cfg, rng, model = self.cfg, self.rng, self.trainer.model
        sums = {"L_d1": [], "L_d2": [], "L_d3": []}
        if model.gfe_enabled:
            for branch, idx, labels, key in ((1, self.c1, self.ind1, "L_d1"), (2, self.c2, self.ind2, "L_d2")):
                group = AMCI if branch == 1 else HC
                for b in _batches(rng.permutation(len(idx)), cfg.batch_size):
                    batch = Batch(self.xs[idx[b]], labels[b], np.full(len(b), group))
                    if branch == 1:
                        rep = adversarial_phase_step(self.trainer, batch, None, None, lr_scale)
                    else:
                        rep = adversarial_phase_step(self.trainer, None, batch, None, lr_scale)
                    sums[key].append(getattr(rep, key))
                    self._notify("d1" if branch == 1 else "d2")
        if model.dbda_enabled:
            for batch in self._domain_batches():
                rep = adversarial_phase_step(self.trainer, None, None, batch, lr_scale)
                sums["L_d3"].append(rep.L_d3)
                self._notify("d3")
        return LossReport(**{k: float(np.mean(v)) if v else 0.0 for k, v in sums.items()})

    def _notify(self, step: str) -> None:
        if self.callback is not None:
            self.callback(step, self.trainer.model)

    def _domain_batches(self):
        cfg, rng = self.cfg, self.rng
        ns, nt = len(self.xs), len(self.xt)
        if not cfg.balanced_domain_batches:
            xr = np.concatenate([self.xs, self.xt])
            dr = np.concatenate([np.zeros(ns, np.int64), np.ones(nt, np.int64)])
            for b in _batches(rng.permutation(ns + nt), cfg.batch_size):
                yield Batch(xr[b], dr[b])
            return
        # half source, half target per batch; X_R-sized epoch
        half = max(1, cfg.batch_size // 2)
        n_batches = max(1, -(-(ns + nt) // cfg.batch_size))
        src = np.resize(rng.permutation(ns), n_batches * half)
        tgt_order = np.concatenate([rng.permutation(nt) for _ in range(-(-n_batches * half // nt))])
        for i in range(n_batches):
            s = src[i * half : (i + 1) * half]
            t = tgt_order[i * half : (i + 1) * half]
            x = np.concatenate([self.xs[s], self.xt[t]])
            d = np.concatenate([np.zeros(len(s), np.int64), np.ones(len(t), np.int64)])
            yield Batch(x, d)

    def classifier_epoch(self, lr_scale: float) -> LossReport:
        losses = []
        for b in _batches(self.rng.permutation(len(self.xs)), self.cfg.batch_size):
            losses.append(classifier_phase_step(self.trainer, Batch(self.xs[b], self.ys[b]), lr_scale).L_c)
            self._notify("c")
        return LossReport(L_c=float(np.mean(losses)))


def _check_inputs(xs, ys, subj, xt, arch: ArchConfig):
    if xs is None or len(xs) == 0:
        raise DataError("source split is empty")
    if xt is None or len(xt) == 0:
        raise DataError("target split is empty")
    if ys is None:
        raise MissingLabelsError("source class labels are required")
    if subj is None:
        raise MissingLabelsError("source subject ids are required")
    if xs.shape[1:] != arch.input_shape or xt.shape[1:] != arch.input_shape:
        raise DataError(f"features must have shape [N, {arch.input_shape}]")
    if len(ys) != len(xs) or len(subj) != len(xs):
        raise DataError("labels must have one entry per source sample")
    bad = set(np.unique(ys).tolist()) - {AMCI, HC}
    if bad:
        raise DataError(f"unexpected class labels {sorted(bad)}")


def train(
    source_x: np.ndarray,
    source_y: np.ndarray,
    source_subject: np.ndarray,
    target_x: np.ndarray,
    config: TrainConfig,
    arch: Optional[ArchConfig] = None,
    log_path=None,
    callback: Optional[Callable[[str, GfdannModel], None]] = None,
) -> TrainResult:
    """Optimise a fresh model on labelled source data and unlabelled target data.

    Target samples enter only the domain discriminator path.  The individual
    discriminator sizes are set from the number of distinct subjects per
    group in the source split.  ``callback(step, model)`` runs after every
    parameter update, with ``step`` one of "d1", "d2", "d3", "c".
    """
    tune_allocator()
    xs = np.ascontiguousarray(source_x, dtype=np.float64)
    xt = np.ascontiguousarray(target_x, dtype=np.float64)
    ys = None if source_y is None else np.asarray(source_y, dtype=np.int64)
    subj = None if source_subject is None else np.asarray(source_subject, dtype=np.int64)
    arch = arch or ArchConfig(input_shape=xs.shape[1:])
    _check_inputs(xs, ys, subj, xt, arch)
    m = np.unique(subj[ys == AMCI]).size
    n = np.unique(subj[ys == HC]).size
    if config.gfe_enabled and (m == 0 or n == 0):
        raise DataError("both groups need source subjects for the individual discriminators")
    arch = arch.with_counts(max(m, 1), max(n, 1))
    model = GfdannModel(arch, seed=config.seed, gfe_enabled=config.gfe_enabled,
                        dbda_enabled=config.dbda_enabled)
    trainer = Trainer(model, config)
    rng = np.random.default_rng(np.random.SeedSequence(config.seed, spawn_key=(0x7EA1,)))
    runner = _EpochRunner(trainer, xs, ys, subj, xt, rng, callback)
    result = TrainResult(model, [], runner.ids1, runner.ids2)
    adversarial = config.gfe_enabled or config.dbda_enabled

    def record(epoch: int, phase: str, rep: LossReport, lr: float):
        row = {"epoch": epoch, "phase": phase, **rep.as_row(), "lr": lr}
        result.history.append(row)
        logger.debug("epoch %d %s %s", epoch, phase, row)

    def adv(e: int):
        scale = config.lr_decay ** e
        record(e, "adversarial", runner.adversarial_epoch(scale), config.lr_d1 * scale)

    def cls(e: int):
        scale = config.lr_decay ** e
        record(e, "classifier", runner.classifier_epoch(scale), config.lr_c * scale)

    if config.schedule == "sequential":
        if adversarial:
            for e in range(config.n_d):
                adv(e)
        for e in range(config.n_c):
            cls(e)
    else:
        for e in range(max(config.n_d if adversarial else 0, config.n_c)):
            if adversarial and e < config.n_d:
                adv(e)
            if e < config.n_c:
                cls(e)
    if log_path is not None:
        write_training_log(result.history, log_path)
    return result


def write_training_log(history: list[dict], path) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})
    os.replace(tmp, path)
