"""
Adam training loops with early stopping.

``train_classifier`` fits the VGG classifier on clean images with
cross-entropy.  ``train_autoencoder`` fits the denoiser to map adversarial
images back to their clean originals under MSE.  Both keep the parameters
from the epoch with the lowest validation loss.
"""

from __future__ import annotations

import csv
import math
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, generate_adversarial_dataset
from .data import Dataset, epoch_batches
from .errors import ConfigError, DimensionError, NonFiniteError
from .nn import Model, save_checkpoint


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: Optional[dict], state: AdamState) -> None:
    """One bias-corrected Adam update, in place.

    ``grads`` maps parameter names to arrays; when omitted each parameter's
    ``.grad`` is used.  A missing gradient counts as zero.  All gradients are
    checked for NaN/Inf before any parameter is touched.
    """
    if grads is None:
        grads = {name: p.grad for name, p in params.items()}
    for name, g in grads.items():
        if g is not None and not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for parameter {name!r}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * np.square(g)
        step = (state.lr / c1) * m / (np.sqrt(v / c2) + state.eps_hat)
        p.data -= step.astype(p.data.dtype, copy=False)


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 30
    patience: int = 5
    min_delta: float = 1e-4
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps_hat: float = 1e-8

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_epochs < 1:
            raise ConfigError(f"max_epochs must be >= 1, got {self.max_epochs}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.min_delta < 0:
            raise ConfigError(f"min_delta must be >= 0, got {self.min_delta}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in [0, 1)")

    def adam(self) -> AdamState:
        return AdamState(self.lr, self.beta1, self.beta2, self.eps_hat)


CLASSIFIER_EPOCHS = 30
AUTOENCODER_EPOCHS = 50


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    val_acc: float


@dataclass
class History:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    stopped_early: bool = False

    def __len__(self) -> int:
        return len(self.records)

    @property
    def best(self) -> EpochRecord:
        return self.records[self.best_epoch - 1]

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records])


HISTORY_HEADER = ("epoch", "train_loss", "val_loss", "val_acc")


def write_history(history: History, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_HEADER)
        for r in history.records:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), repr(r.val_acc)])


def read_history(path) -> History:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != HISTORY_HEADER:
        raise ConfigError(f"{path}: expected header {','.join(HISTORY_HEADER)}")
    records = [EpochRecord(int(e), float(a), float(b), float(c)) for e, a, b, c in rows[1:]]
    h = History(records)
    if records:
        h.best_epoch = int(np.argmin([r.val_loss for r in records])) + 1
    return h


def stderr_progress(kind: str) -> Callable[[EpochRecord, float], None]:
    def report(r: EpochRecord, seconds: float) -> None:
        acc = "" if math.isnan(r.val_acc) else f" val_acc={r.val_acc:.4f}"
        print(
            f"[{kind}] epoch {r.epoch} train_loss={r.train_loss:.5f} val_loss={r.val_loss:.5f}{acc} ({seconds:.1f}s)",
            file=sys.stderr,
            flush=True,
        )

    return report


class TrainingDiverged(NonFiniteError):
    """Loss became NaN/Inf; ``best_model`` and ``history`` hold the last good state."""

    def __init__(self, message: str, best_model: Model, history: History):
        super().__init__(message)
        self.best_model = best_model
        self.history = history


def _snapshot(model: Model) -> dict[str, np.ndarray]:
    return {k: v.copy() for k, v in model.state_dict().items()}


def _fit(
    model: Model,
    n_train: int,
    batch_loss: Callable[[np.ndarray], T.Tensor],
    validate: Callable[[], tuple[float, float]],
    cfg: TrainConfig,
    checkpoint_path=None,
    progress: Optional[Callable] = None,
) -> tuple[Model, History]:
    if n_train < 1:
        raise ConfigError("training set is empty")
    model.rng = np.random.default_rng([cfg.seed, 1])
    adam = cfg.adam()
    history = History()
    best_loss, best_state, stale = math.inf, _snapshot(model), 0
    ref_loss = math.inf

    for epoch in range(1, cfg.max_epochs + 1):
        start = time.perf_counter()
        model.train()
        total, count = 0.0, 0
        for idx in epoch_batches(n_train, cfg.batch_size, cfg.seed, epoch - 1):
            if len(idx) < 2:
                continue  # batch norm needs two samples in train mode
            model.zero_grad()
            loss = batch_loss(idx)
            value = loss.item()
            if not math.isfinite(value):
                model.load_state_dict(best_state)
                model.eval()
                raise TrainingDiverged(f"training loss is {value} at epoch {epoch}", model, history)
            T.backward(loss)
            try:
                adam_step(model.params, None, adam)
            except NonFiniteError as err:
                model.load_state_dict(best_state)
                model.eval()
                raise TrainingDiverged(f"{err} at epoch {epoch}", model, history) from err
            total += value * len(idx)
            count += len(idx)

        model.eval()
        val_loss, val_acc = validate()
        record = EpochRecord(epoch, total / max(count, 1), val_loss, val_acc)
        history.records.append(record)
        if progress is not None:
            progress(record, time.perf_counter() - start)

        # the snapshot follows the lowest loss; patience only resets on gains above min_delta
        if val_loss < best_loss:
            best_loss, best_state = val_loss, _snapshot(model)
            history.best_epoch = epoch
            if checkpoint_path is not None:
                save_checkpoint(model, checkpoint_path)
        if val_loss < ref_loss - cfg.min_delta:
            ref_loss, stale = val_loss, 0
        else:
            stale += 1
            if stale >= cfg.patience:
                history.stopped_early = True
                break

    model.load_state_dict(best_state)
    model.zero_grad()
    return model.eval(), history


def evaluate_classifier(model: Model, dataset: Dataset, batch_size: int = 500) -> tuple[float, float]:
    """Mean cross-entropy and accuracy in eval mode."""
    model.eval()
    total, correct = 0.0, 0
    with T.no_grad():
        for i in range(0, len(dataset), batch_size):
            x, y = dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size]
            logits = model(x)
            total += T.softmax_cross_entropy(logits, y).item() * len(y)
            correct += int((logits.data.argmax(axis=1) == y).sum())
    n = max(len(dataset), 1)
    return total / n, correct / n


def train_classifier(
    model: Model,
    train_set: Dataset,
    val_set: Dataset,
    cfg: TrainConfig = TrainConfig(),
    checkpoint_path=None,
    progress: Optional[Callable] = None,
) -> tuple[Model, History]:
    if len(val_set) == 0:
        raise ConfigError("validation set is empty")

    def batch_loss(idx):
        return T.softmax_cross_entropy(model(train_set.images[idx]), train_set.labels[idx])

    return _fit(model, len(train_set), batch_loss, lambda: evaluate_classifier(model, val_set), cfg, checkpoint_path, progress)


# -- autoencoder ---------------------------------------------------------------------


@dataclass
class PairedSet:
    """Aligned (adversarial, clean) image pairs for denoiser training.

    ``family`` holds ``fgsm``, ``pgd`` or ``clean`` per pair and ``epsilon`` the budget used.
    """

    adversarial: np.ndarray
    clean: np.ndarray
    labels: np.ndarray
    family: np.ndarray = None
    epsilon: np.ndarray = None

    def __post_init__(self):
        if self.adversarial.shape != self.clean.shape or len(self.labels) != len(self.clean):
            raise DimensionError(
                f"pairs misaligned: adversarial {self.adversarial.shape}, clean {self.clean.shape}, labels {self.labels.shape}"
            )
        if self.family is None:
            self.family = np.full(len(self.labels), "clean")
        if self.epsilon is None:
            self.epsilon = np.zeros(len(self.labels))

    def __len__(self) -> int:
        return len(self.labels)

    @classmethod
    def identity(cls, dataset: Dataset) -> "PairedSet":
        return cls(dataset.images, dataset.images, dataset.labels)


def evaluate_autoencoder(model: Model, pairs: PairedSet, batch_size: int = 500) -> float:
    model.eval()
    total = 0.0
    with T.no_grad():
        for i in range(0, len(pairs), batch_size):
            sl = slice(i, i + batch_size)
            total += T.mse(model(pairs.adversarial[sl]), pairs.clean[sl]).item() * len(pairs.clean[sl])
    return total / max(len(pairs), 1)


def train_autoencoder(
    model: Model,
    pairs: PairedSet,
    val_pairs: PairedSet,
    cfg: TrainConfig = TrainConfig(max_epochs=AUTOENCODER_EPOCHS),
    checkpoint_path=None,
    progress: Optional[Callable] = None,
) -> tuple[Model, History]:
    """Minimize MSE(model(x_adv), x_clean); ``val_acc`` in the history is NaN."""
    if len(val_pairs) == 0:
        raise ConfigError("validation pairs are empty")

    def batch_loss(idx):
        return T.mse(model(pairs.adversarial[idx]), pairs.clean[idx])

    def validate():
        return evaluate_autoencoder(model, val_pairs), math.nan

    return _fit(model, len(pairs), batch_loss, validate, cfg, checkpoint_path, progress)


FGSM_GRID = tuple(round(0.1 * k, 2) for k in range(1, 11))
PGD_GRID = tuple(round(0.05 * k, 2) for k in range(1, 9))


@dataclass(frozen=True)
class MixtureRecipe:
    """Per-image draw of attack family and budget for denoiser training pairs.

    Each image independently becomes an FGSM, PGD or clean pair with the given
    weights; its budget is uniform over the family's grid.
    """

    fgsm_weight: float = 0.45
    pgd_weight: float = 0.45
    clean_weight: float = 0.10
    fgsm_eps: tuple[float, ...] = FGSM_GRID
    pgd_eps: tuple[float, ...] = PGD_GRID
    pgd_steps: int = 10
    pgd_alpha: Optional[float] = None
    random_start: bool = True

    def __post_init__(self):
        w = (self.fgsm_weight, self.pgd_weight, self.clean_weight)
        if min(w) < 0 or not math.isclose(sum(w), 1.0, abs_tol=1e-9):
            raise ConfigError(f"mixture weights must be >= 0 and sum to 1, got {w}")
        if (self.fgsm_weight and not self.fgsm_eps) or (self.pgd_weight and not self.pgd_eps):
            raise ConfigError("a family with positive weight needs a non-empty epsilon grid")

    @classmethod
    def for_family(cls, family: str, **overrides) -> "MixtureRecipe":
        weights = {
            "fgsm": dict(fgsm_weight=0.9, pgd_weight=0.0, clean_weight=0.1),
            "pgd": dict(fgsm_weight=0.0, pgd_weight=0.9, clean_weight=0.1),
            "joint": dict(fgsm_weight=0.45, pgd_weight=0.45, clean_weight=0.1),
        }
        if family not in weights:
            raise ConfigError(f"mixture family must be fgsm, pgd or joint, got {family!r}")
        return cls(**{**weights[family], **overrides})


def build_mixture(
    classifier: Model,
    dataset: Dataset,
    recipe: MixtureRecipe = MixtureRecipe(),
    seed: int = 0,
    batch_size: int = 128,
    threads: int = 1,
) -> PairedSet:
    """Attack each image of ``dataset`` with its own drawn (family, epsilon)."""
    n = len(dataset)
    rng = np.random.default_rng([seed, 2])
    kind = rng.choice(3, size=n, p=[recipe.fgsm_weight, recipe.pgd_weight, recipe.clean_weight])
    pick_f = rng.integers(0, max(len(recipe.fgsm_eps), 1), size=n)
    pick_p = rng.integers(0, max(len(recipe.pgd_eps), 1), size=n)
    eps = np.zeros(n)
    family = np.full(n, "clean", dtype=object)
    if recipe.fgsm_eps:
        sel = kind == 0
        eps[sel] = np.asarray(recipe.fgsm_eps)[pick_f[sel]]
        family[sel] = "fgsm"
    if recipe.pgd_eps:
        sel = kind == 1
        eps[sel] = np.asarray(recipe.pgd_eps)[pick_p[sel]]
        family[sel] = "pgd"

    adversarial = dataset.images.copy()
    group = 0
    for fam, grid in (("fgsm", recipe.fgsm_eps), ("pgd", recipe.pgd_eps)):
        for e in grid:
            group += 1
            idx = np.flatnonzero((family == fam) & (eps == e))
            if not len(idx):
                continue
            cfg = AttackConfig(fam, e, recipe.pgd_alpha, recipe.pgd_steps, recipe.random_start, seed=seed * 1000 + group)
            out = generate_adversarial_dataset(classifier, dataset.subset(idx), cfg, batch_size, threads)
            adversarial[idx] = out.adversarial
    return PairedSet(adversarial, dataset.images, dataset.labels, family.astype(str), eps)
