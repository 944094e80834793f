"""
FGSM and PGD adversarial examples under an L-infinity budget.

Both attacks differentiate the cross-entropy loss with respect to the input
image while the classifier is frozen in eval mode.  Every output satisfies
``|x_adv - x| <= epsilon`` and ``0 <= x_adv <= 1`` exactly: the box bounds are
rounded inward to float32 before clipping, so float32 rounding cannot push a
pixel outside the ball.
"""

from __future__ import annotations

import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import tensor as T
from .data import Dataset, read_idx, write_idx
from .errors import ConfigError, DimensionError

FAMILIES = ("fgsm", "pgd")


@dataclass(frozen=True)
class AttackConfig:
    """Attack family and budget.

    ``alpha`` defaults to ``max(epsilon / 10, 0.01)``.  ``alpha``, ``steps``
    and ``random_start`` only affect PGD.
    """

    family: str = "pgd"
    epsilon: float = 0.3
    alpha: Optional[float] = None
    steps: int = 40
    random_start: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.alpha is None:
            object.__setattr__(self, "alpha", max(self.epsilon / 10.0, 0.01))
        self.validate()
        if self.family == "pgd" and self.alpha * self.steps < self.epsilon:
            warnings.warn(
                f"alpha * steps = {self.alpha * self.steps:g} < epsilon = {self.epsilon:g}; "
                "PGD cannot reach the edge of the ball",
                stacklevel=3,
            )

    def validate(self) -> None:
        if self.family not in FAMILIES:
            raise ConfigError(f"attack family must be one of {FAMILIES}, got {self.family!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ConfigError(f"epsilon must be a finite value >= 0, got {self.epsilon}")
        if not (math.isfinite(self.alpha) and self.alpha > 0):
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ConfigError(f"steps must be an integer >= 1, got {self.steps}")

    def with_epsilon(self, epsilon: float, alpha: Optional[float] = None) -> "AttackConfig":
        """Same settings at a new budget; a default alpha is recomputed for the new epsilon."""
        return replace(self, epsilon=epsilon, alpha=alpha)

    def to_dict(self) -> dict[str, str]:
        return {
            "family": self.family,
            "epsilon": repr(float(self.epsilon)),
            "alpha": repr(float(self.alpha)),
            "steps": str(int(self.steps)),
            "random_start": str(bool(self.random_start)).lower(),
            "seed": str(int(self.seed)),
        }

    @classmethod
    def from_dict(cls, d: dict[str, str]) -> "AttackConfig":
        return cls(
            family=d["family"],
            epsilon=float(d["epsilon"]),
            alpha=float(d["alpha"]),
            steps=int(d["steps"]),
            random_start=d["random_start"].lower() in ("1", "true", "yes"),
            seed=int(d["seed"]),
        )


def _check_epsilon(epsilon: float) -> None:
    if not (math.isfinite(epsilon) and epsilon >= 0):
        raise ConfigError(f"epsilon must be a finite value >= 0, got {epsilon}")


def linf_bounds(x0: np.ndarray, epsilon: float) -> tuple[np.ndarray, np.ndarray]:
    """Per-pixel box ``[max(x0 - eps, 0), min(x0 + eps, 1)]`` rounded inward to ``x0.dtype``."""
    ref = x0.astype(np.float64)
    lo64 = np.maximum(ref - epsilon, 0.0)
    hi64 = np.minimum(ref + epsilon, 1.0)
    lo = lo64.astype(x0.dtype)
    hi = hi64.astype(x0.dtype)
    lo = np.where(lo < lo64, np.nextafter(lo, x0.dtype.type(np.inf)), lo)
    hi = np.where(hi > hi64, np.nextafter(hi, x0.dtype.type(-np.inf)), hi)
    return lo, hi


def project_linf(x: np.ndarray, x0: np.ndarray, epsilon: float, bounds=None) -> np.ndarray:
    """Closest point to ``x`` inside the epsilon-ball around ``x0`` intersected with [0, 1].

    ``x`` may be float64; clipping happens before the cast back to ``x0.dtype``
    and the bounds are representable in that dtype, so the cast cannot leave the box.
    """
    lo, hi = bounds if bounds is not None else linf_bounds(x0, epsilon)
    return np.clip(x, lo, hi).astype(x0.dtype, copy=False)


def _signed_step(x: np.ndarray, grad: np.ndarray, size: float) -> np.ndarray:
    # float64 so that a step of size >= epsilon always reaches the box edge
    return x.astype(np.float64) + size * np.sign(grad).astype(np.float64)


def input_gradient(model, x: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, float]:
    """Gradient of the mean cross-entropy with respect to ``x``, parameters frozen."""
    with model.frozen(), T.precision(model.dtype):
        xt = T.Tensor(x, requires_grad=True)
        loss = T.softmax_cross_entropy(model(xt), y)
        T.backward(loss)
    return xt.grad, loss.item()


def _as_batch(model, x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x.data if isinstance(x, T.Tensor) else x)
    x = x.astype(model.dtype, copy=False)
    y = np.asarray(y, dtype=np.int64)
    if x.ndim != 4 or len(x) != len(y):
        raise DimensionError(f"expected images (N, C, H, W) and N labels, got {x.shape} and {y.shape}")
    return x, y


def fgsm(model, x, y, epsilon: float) -> np.ndarray:
    """One signed-gradient step of size ``epsilon``; ``sign(0) = 0``."""
    _check_epsilon(epsilon)
    x, y = _as_batch(model, x, y)
    if epsilon == 0:
        return x.copy()
    grad, _ = input_gradient(model, x, y)
    return project_linf(_signed_step(x, grad, epsilon), x, epsilon)


def pgd(model, x, y, config: AttackConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Iterated signed-gradient steps of size ``alpha``, each projected back into the ball."""
    config.validate()
    x, y = _as_batch(model, x, y)
    eps = config.epsilon
    if eps == 0:
        return x.copy()
    bounds = linf_bounds(x, eps)
    adv = x.copy()
    if config.random_start:
        rng = rng if rng is not None else np.random.default_rng(config.seed)
        adv = project_linf(x + rng.uniform(-eps, eps, size=x.shape), x, eps, bounds)
    for _ in range(int(config.steps)):
        grad, _ = input_gradient(model, adv, y)
        adv = project_linf(_signed_step(adv, grad, config.alpha), x, eps, bounds)
    return adv


def attack(model, x, y, config: AttackConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    if config.family == "fgsm":
        return fgsm(model, x, y, config.epsilon)
    return pgd(model, x, y, config, rng)


@dataclass
class AdversarialSet:
    """Aligned clean images, adversarial images and labels produced by one attack config."""

    clean: np.ndarray
    adversarial: np.ndarray
    labels: np.ndarray
    config: AttackConfig
    source: str = "mnist"
    split: str = "test"

    def __len__(self) -> int:
        return len(self.labels)

    def as_dataset(self) -> Dataset:
        return Dataset(self.adversarial, self.labels, self.split, self.source)

    def clean_dataset(self) -> Dataset:
        return Dataset(self.clean, self.labels, self.split, self.source)

    def max_perturbation(self) -> float:
        if not len(self):
            return 0.0
        return float(np.abs(self.adversarial.astype(np.float64) - self.clean.astype(np.float64)).max())


def generate_adversarial_dataset(
    model, dataset: Dataset, config: AttackConfig, batch_size: int = 128, threads: int = 1
) -> AdversarialSet:
    """Attack every image of ``dataset`` batch by batch.

    Batch ``b`` draws its random start from ``default_rng([seed, b])``, so the
    result does not depend on ``threads``.
    """
    config.validate()
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    n = len(dataset)
    starts = list(range(0, n, batch_size))
    adv = np.empty_like(dataset.images)

    def run(worker_model, indices):
        for b in indices:
            sl = slice(starts[b], starts[b] + batch_size)
            rng = np.random.default_rng([config.seed, b])
            adv[sl] = attack(worker_model, dataset.images[sl], dataset.labels[sl], config, rng)

    threads = max(1, min(int(threads), len(starts) or 1))
    if threads == 1:
        run(model, range(len(starts)))
    else:
        with ThreadPoolExecutor(threads) as pool:
            jobs = [pool.submit(run, model.clone(), range(w, len(starts), threads)) for w in range(threads)]
            for job in jobs:
                job.result()
    return AdversarialSet(dataset.images.copy(), adv, dataset.labels.copy(), config, dataset.source, dataset.split)


# -- persistence -----------------------------------------------------------------

CLEAN_FILE = "clean-images.idx"
ADV_FILE = "adversarial-images.idx"
LABELS_FILE = "labels.idx"
MANIFEST_FILE = "manifest.txt"


def write_manifest(path, entries: dict) -> None:
    lines = [f"{k}={v}" for k, v in entries.items()]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def save_adversarial_set(adv: AdversarialSet, directory, extra: Optional[dict] = None) -> Path:
    """Write the three arrays as IDX files plus a key=value manifest of the attack config."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    write_idx(directory / CLEAN_FILE, adv.clean.astype(np.float32))
    write_idx(directory / ADV_FILE, adv.adversarial.astype(np.float32))
    write_idx(directory / LABELS_FILE, adv.labels.astype(np.uint8))
    entries = dict(adv.config.to_dict())
    entries.update(source=adv.source, split=adv.split, n=str(len(adv)))
    entries.update(extra or {})
    write_manifest(directory / MANIFEST_FILE, entries)
    return directory


def load_adversarial_set(directory) -> AdversarialSet:
    directory = Path(directory)
    manifest = read_manifest(directory / MANIFEST_FILE)
    clean = read_idx(directory / CLEAN_FILE)
    adv = read_idx(directory / ADV_FILE)
    labels = read_idx(directory / LABELS_FILE).astype(np.int64)
    if not (len(clean) == len(adv) == len(labels) == int(manifest.get("n", len(labels)))):
        raise DimensionError(f"{directory}: array lengths disagree with each other or the manifest")
    return AdversarialSet(
        clean, adv, labels, AttackConfig.from_dict(manifest), manifest.get("source", "mnist"), manifest.get("split", "test")
    )
