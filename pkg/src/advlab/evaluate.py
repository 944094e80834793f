"""
Robustness evaluation: accuracy, epsilon sweeps and report files.

A sweep attacks the classifier alone at every epsilon and scores the
adversarial images twice, once as-is and once after passing them through the
denoising autoencoder.  The attack never sees the defense.
"""

from __future__ import annotations

import csv
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attacks import AttackConfig, generate_adversarial_dataset, read_manifest, write_manifest
from .data import Dataset
from .errors import ConfigError, DimensionError

REPORT_HEADER = ("family", "epsilon", "defended", "accuracy", "mean_defense_s", "n")


def _forward(model, x: np.ndarray) -> np.ndarray:
    # works for advlab models and for any callable returning an array
    if hasattr(model, "predict"):
        return np.asarray(model.predict(x))
    out = model(x)
    return np.asarray(getattr(out, "data", out))


def _prepare(model) -> None:
    if hasattr(model, "eval"):
        model.eval()


def accuracy(model, dataset: Dataset, defense=None, batch_size: int = 500) -> tuple[float, float]:
    """Fraction of correctly classified images and mean defense seconds per image.

    With a defense, each batch goes through ``defense`` first; only that
    forward pass is timed.  Without one the latency is 0.
    """
    _prepare(model)
    if defense is not None:
        _prepare(defense)
    n = len(dataset)
    if n == 0:
        raise ConfigError("cannot measure accuracy on an empty dataset")
    correct, per_image = 0, []
    for i in range(0, n, batch_size):
        x, y = dataset.images[i : i + batch_size], dataset.labels[i : i + batch_size]
        if defense is not None:
            start = time.perf_counter()
            cleaned = _forward(defense, x)
            per_image.append((time.perf_counter() - start) / len(x))
            if cleaned.shape != x.shape:
                raise DimensionError(f"defense output {cleaned.shape} does not match classifier input {x.shape}")
            x = cleaned
        logits = _forward(model, x)
        correct += int((logits.argmax(axis=1) == y).sum())
    return correct / n, float(np.mean(per_image)) if per_image else 0.0


@dataclass(frozen=True)
class ReportRow:
    family: str
    epsilon: float
    defended: bool
    accuracy: float
    mean_defense_s: float
    n: int

    def key(self) -> tuple[str, float, bool]:
        return self.family, self.epsilon, self.defended


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    metadata: dict[str, str] = field(default_factory=dict)
    sets: dict = field(default_factory=dict, repr=False, compare=False)

    def add(self, row: ReportRow) -> None:
        if any(r.key() == row.key() for r in self.rows):
            raise ConfigError(f"duplicate report row for {row.key()}")
        self.rows.append(row)

    def select(self, family: Optional[str] = None, defended: Optional[bool] = None) -> list[ReportRow]:
        return [
            r for r in self.rows if (family is None or r.family == family) and (defended is None or r.defended == defended)
        ]

    def accuracy_at(self, family: str, epsilon: float, defended: bool) -> float:
        for r in self.rows:
            if r.family == family and math.isclose(r.epsilon, epsilon, abs_tol=1e-9) and r.defended == defended:
                return r.accuracy
        raise KeyError((family, epsilon, defended))

    def merge(self, other: "EvalReport") -> "EvalReport":
        out = EvalReport(list(self.rows), dict(self.metadata))
        for r in other.rows:
            out.add(r)
        return out


def parse_grid(text: str) -> list[float]:
    """``"start:stop:step"`` (inclusive stop) or a comma-separated list."""
    text = text.strip()
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ConfigError(f"grid must look like start:stop:step, got {text!r}")
        start, stop, step = (float(p) for p in parts)
        if step <= 0 or stop < start:
            raise ConfigError(f"grid {text!r} needs step > 0 and stop >= start")
        count = int(math.floor((stop - start) / step + 1e-9)) + 1
        # round to the decimals of the inputs so 0.1 * 3 prints as 0.3
        digits = max(len(p.split(".")[1]) if "." in p else 0 for p in parts) + 2
        values = [round(start + k * step, digits) for k in range(count)]
    else:
        values = [float(v) for v in text.split(",") if v.strip()]
    _check_grid(values)
    return values


def _check_grid(epsilons: Sequence[float]) -> None:
    if not epsilons:
        raise ConfigError("epsilon grid is empty")
    if any(not math.isfinite(e) or e < 0 for e in epsilons):
        raise ConfigError(f"epsilon values must be finite and >= 0, got {list(epsilons)}")
    if any(b < a for a, b in zip(epsilons, epsilons[1:])):
        raise ConfigError(f"epsilon values must be sorted ascending, got {list(epsilons)}")


def sweep(
    classifier,
    defense,
    dataset: Dataset,
    family: str,
    epsilons: Sequence[float],
    steps: int = 40,
    alpha: Optional[float] = None,
    random_start: bool = True,
    seed: int = 0,
    threads: int = 1,
    batch_size: int = 128,
    keep_sets: bool = False,
) -> EvalReport:
    """Accuracy at each epsilon, undefended and (when ``defense`` is given) defended.

    Adversarial images are generated against ``classifier`` only.  Both rows
    of one epsilon score the same adversarial images, which at epsilon 0 are
    the clean images.  ``alpha=None`` uses the default step rule per epsilon.
    """
    epsilons = [float(e) for e in epsilons]
    _check_grid(epsilons)
    configs = [AttackConfig(family, e, alpha, steps, random_start, seed) for e in epsilons]

    def point(cfg: AttackConfig, clf, dfn):
        adv = generate_adversarial_dataset(clf, dataset, cfg, batch_size)
        rows = [ReportRow(family, cfg.epsilon, False, accuracy(clf, adv.as_dataset())[0], 0.0, len(adv))]
        if dfn is not None:
            acc, secs = accuracy(clf, adv.as_dataset(), dfn)
            rows.append(ReportRow(family, cfg.epsilon, True, acc, secs, len(adv)))
        return rows, adv

    results = [None] * len(configs)
    threads = max(1, min(int(threads), len(configs)))
    if threads == 1:
        for i, cfg in enumerate(configs):
            results[i] = point(cfg, classifier, defense)
    else:
        def worker(w):
            clf = classifier.clone()
            dfn = defense.clone() if defense is not None else None
            for i in range(w, len(configs), threads):
                results[i] = point(configs[i], clf, dfn)

        with ThreadPoolExecutor(threads) as pool:
            for job in [pool.submit(worker, w) for w in range(threads)]:
                job.result()

    report = EvalReport()
    for cfg, (rows, adv) in zip(configs, results):
        for r in rows:
            report.add(r)
        if keep_sets:
            report.sets[cfg.epsilon] = adv
    report.metadata.update(
        dataset=dataset.source,
        split=dataset.split,
        n_images=str(len(dataset)),
        family=family,
        steps=str(steps),
        alpha="default" if alpha is None else repr(float(alpha)),
        random_start=str(bool(random_start)).lower(),
        seed=str(seed),
        classifier=getattr(classifier, "fingerprint", lambda: "unknown")(),
        defense=getattr(defense, "fingerprint", lambda: "none")() if defense is not None else "none",
    )
    return report


# -- report files ----------------------------------------------------------------------


def _fmt_bool(b: bool) -> str:
    return "true" if b else "false"


def _parse_bool(s: str) -> bool:
    s = s.strip().lower()
    if s not in ("true", "false"):
        raise ConfigError(f"expected true or false, got {s!r}")
    return s == "true"


def write_report(report: EvalReport, path, metadata: bool = True) -> Path:
    """CSV rows plus a ``<path>.meta`` key=value sidecar."""
    if not report.rows:
        raise ConfigError("report has no rows")
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_HEADER)
        for r in report.rows:
            w.writerow([r.family, repr(float(r.epsilon)), _fmt_bool(r.defended), repr(float(r.accuracy)), repr(float(r.mean_defense_s)), r.n])
    if metadata and report.metadata:
        write_manifest(path.with_name(path.name + ".meta"), report.metadata)
    return path


def read_report(path) -> EvalReport:
    path = Path(path)
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != REPORT_HEADER:
        raise ConfigError(f"{path}: expected header {','.join(REPORT_HEADER)}")
    report = EvalReport()
    for n, row in enumerate(rows[1:], 2):
        if len(row) != len(REPORT_HEADER):
            raise ConfigError(f"{path}:{n}: expected {len(REPORT_HEADER)} fields, got {len(row)}")
        fam, eps, dfd, acc, secs, count = row
        report.add(ReportRow(fam, float(eps), _parse_bool(dfd), float(acc), float(secs), int(count)))
    meta = path.with_name(path.name + ".meta")
    if meta.exists():
        report.metadata = read_manifest(meta)
    return report


def curve_name(family: str, defended: bool) -> str:
    return f"{family}_{'defended' if defended else 'undefended'}.txt"


def render_plots(report: EvalReport, directory) -> list[Path]:
    """One ``epsilon accuracy`` point file per (family, defended) curve."""
    if not report.rows:
        raise ConfigError("report has no rows")
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for fam, dfd in sorted({(r.family, r.defended) for r in report.rows}):
        rows = sorted(report.select(fam, dfd), key=lambda r: r.epsilon)
        path = directory / curve_name(fam, dfd)
        path.write_text("".join(f"{r.epsilon!r} {r.accuracy!r}\n" for r in rows))
        written.append(path)
    return written


def read_curve(path) -> list[tuple[float, float]]:
    return [tuple(float(v) for v in line.split()) for line in Path(path).read_text().splitlines() if line.strip()]


# Four tables: attack family x with/without the autoencoder.
TABLES = (
    ("table1", "fgsm", False, "Classifier accuracy under FGSM"),
    ("table2", "pgd", False, "Classifier accuracy under PGD"),
    ("table3", "fgsm", True, "Classifier accuracy under FGSM behind the autoencoder"),
    ("table4", "pgd", True, "Classifier accuracy under PGD behind the autoencoder"),
)


def build_tables(reports: Sequence[EvalReport]) -> dict[str, tuple[list[str], list[list[str]]]]:
    """Arrange report rows into the four epsilon-by-dataset tables.

    Each table has one row per epsilon and one accuracy column per dataset;
    the defended tables add a per-image defense time column per dataset.
    """
    by_dataset: dict[str, list[ReportRow]] = {}
    for rep in reports:
        by_dataset.setdefault(rep.metadata.get("dataset", "data"), []).extend(rep.rows)
    datasets = sorted(by_dataset)
    tables = {}
    for name, fam, dfd, _title in TABLES:
        cells: dict[float, dict[str, ReportRow]] = {}
        for ds in datasets:
            for r in by_dataset[ds]:
                if r.family == fam and r.defended == dfd:
                    cells.setdefault(r.epsilon, {})[ds] = r
        if not cells:
            continue
        header = ["epsilon"] + [f"accuracy_{ds}" for ds in datasets]
        if dfd:
            header += [f"defense_s_{ds}" for ds in datasets]
        body = []
        for eps in sorted(cells):
            row = [f"{eps:.2f}"] + [f"{cells[eps][ds].accuracy:.4f}" if ds in cells[eps] else "" for ds in datasets]
            if dfd:
                row += [f"{cells[eps][ds].mean_defense_s:.6f}" if ds in cells[eps] else "" for ds in datasets]
            body.append(row)
        tables[name] = (header, body)
    return tables


def write_tables(reports: Sequence[EvalReport], directory) -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = build_tables(reports)
    if not tables:
        raise ConfigError("no report rows to tabulate")
    written, text = [], []
    titles = {name: title for name, _, _, title in TABLES}
    for name, (header, body) in tables.items():
        path = directory / f"{name}.csv"
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(body)
        written.append(path)
        widths = [max(len(h), *(len(r[i]) for r in body)) for i, h in enumerate(header)]
        text.append(f"{name}: {titles[name]}")
        text.append("  ".join(h.rjust(wd) for h, wd in zip(header, widths)))
        text.extend("  ".join(c.rjust(wd) for c, wd in zip(r, widths)) for r in body)
        text.append("")
    (directory / "tables.txt").write_text("\n".join(text))
    written.append(directory / "tables.txt")
    for rep in reports:
        ds = rep.metadata.get("dataset", "data")
        written += render_plots(rep, directory / "curves" / ds)
    return written


# -- gallery -----------------------------------------------------------------------------


def to_bytes(img: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] values to bytes as ``round(255 * clip(v, 0, 1))``."""
    return np.rint(255.0 * np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, img: np.ndarray) -> None:
    data = to_bytes(img)
    if data.ndim != 2:
        raise DimensionError(f"PGM needs a 2-D image, got shape {data.shape}")
    h, w = data.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + data.tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if len(parts) < 5 or parts[0] != b"P5":
        raise ConfigError(f"{path}: not a binary PGM file")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    if maxval != 255:
        raise ConfigError(f"{path}: only 8-bit PGM is supported")
    return np.frombuffer(raw[len(raw) - w * h :], dtype=np.uint8).reshape(h, w)


def _plane(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    while img.ndim > 2 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise DimensionError(f"expected a single-channel image, got shape {img.shape}")
    return img


def sample_gallery(clean, adversarial, reconstructed, directory, k: int) -> list[Path]:
    """Write ``k`` PGM files, each holding clean | adversarial | reconstructed side by side."""
    if k < 0:
        raise ConfigError(f"k must be >= 0, got {k}")
    if not (len(clean) == len(adversarial) == len(reconstructed)):
        raise DimensionError("gallery inputs must be aligned triples")
    k = min(k, len(clean))
    if k == 0:
        return []
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(k):
        panels = [_plane(a[i]) for a in (clean, adversarial, reconstructed)]
        path = directory / f"sample_{i:03d}.pgm"
        write_pgm(path, np.concatenate(panels, axis=1))
        paths.append(path)
    return paths


def split_gallery_image(img: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    w = img.shape[1] // 3
    return img[:, :w], img[:, w : 2 * w], img[:, 2 * w :]
