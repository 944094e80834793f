"""
``advlab`` command line.

Every option can come from a flat ``key=value`` config file (``--config``);
flags given on the command line win over the file, and the file wins over
built-in defaults.  Each command writes the fully resolved settings to
``<out>/resolved_config.txt``, which can be replayed with
``advlab --config <out>/resolved_config.txt``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import attacks as A
from . import data as D
from . import evaluate as E
from . import nn
from . import train as TR
from .errors import AdvlabError, CheckpointError, ConfigError, UsageError

RESOLVED_NAME = "resolved_config.txt"
DEFAULT_GRIDS = {"fgsm": "0:1.0:0.1", "pgd": "0:0.4:0.05"}


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    s = str(text).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


def _opt_float(text):
    if text is None or str(text).strip().lower() in ("", "none", "default"):
        return None
    return float(text)


def _opt_str(text):
    if text is None or str(text).strip().lower() in ("", "none"):
        return None
    return str(text)


def _str_list(text):
    if isinstance(text, (list, tuple)):
        return list(text)
    return [s for s in str(text).split(",") if s]


# key -> (default, converter); per command on top of the common keys
COMMON = {
    "seed": (0, int),
    "threads": (1, int),
    "out": ("advlab-out", str),
    "data_dir": (None, _opt_str),
    "profile": ("full", str),
    "dataset": ("mnist", str),
}
TRAIN_KEYS = {
    "batch_size": (64, int),
    "lr": (0.001, float),
    "patience": (5, int),
    "min_delta": (1e-4, float),
    "subset": (0, int),
}
ATTACK_KEYS = {
    "family": ("fgsm", str),
    "eps": (0.3, float),
    "alpha": (None, _opt_float),
    "steps": (40, int),
    "random_start": (True, _bool),
}
COMMANDS: dict[str, dict] = {
    "train-classifier": {**TRAIN_KEYS, "epochs": (TR.CLASSIFIER_EPOCHS, int), "dropout": (0.5, float)},
    "train-autoencoder": {
        **TRAIN_KEYS,
        "epochs": (TR.AUTOENCODER_EPOCHS, int),
        "ckpt": (None, _opt_str),
        "family": ("fgsm", str),
        "joint": (False, _bool),
        "pgd_steps": (10, int),
        "clean_fraction": (0.1, float),
        "latent_dim": (128, int),
        "noise_std": (0.1, float),
    },
    "attack": {**ATTACK_KEYS, "ckpt": (None, _opt_str), "split": ("test", str), "subset": (0, int)},
    "evaluate": {
        **ATTACK_KEYS,
        "ckpt": (None, _opt_str),
        "defense": (None, _opt_str),
        "grid": (None, _opt_str),
        "test_limit": (0, int),
    },
    "report": {"inputs": ([], _str_list)},
    "gallery": {
        **ATTACK_KEYS,
        "ckpt": (None, _opt_str),
        "defense": (None, _opt_str),
        "k": (8, int),
        "test_limit": (0, int),
    },
}


# -- config files --------------------------------------------------------------------------


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    return {k.replace("-", "_"): v for k, v in A.read_manifest(path).items()}


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (list, tuple)):
        return ",".join(str(x) for x in v)
    return str(v)


def resolve(command: str, file_values: dict[str, str], flag_values: dict) -> dict:
    """Defaults < config file < flags, with every value converted to its type."""
    schema = {**COMMON, **COMMANDS[command]}
    unknown = set(file_values) - set(schema) - {"command", "config"}
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {', '.join(sorted(unknown))}")
    cfg = {}
    for key, (default, conv) in schema.items():
        if key in flag_values:
            value = flag_values[key]
        elif key in file_values:
            value = file_values[key]
        else:
            value = default
        try:
            cfg[key] = conv(value) if value is not None else None
        except (TypeError, ValueError) as err:
            raise ConfigError(f"bad value for {key}: {value!r} ({err})") from None
    cfg["command"] = command
    return cfg


def write_resolved(cfg: dict, directory) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    path = directory / RESOLVED_NAME
    keys = ["command"] + sorted(k for k in cfg if k != "command")
    path.write_text("".join(f"{k}={_format_value(cfg[k])}\n" for k in keys))
    return path


# -- shared helpers ------------------------------------------------------------------------


def log(msg: str) -> None:
    print(f"[advlab] {msg}", file=sys.stderr, flush=True)


def _data_dir(cfg) -> Path:
    if cfg["data_dir"] is None:
        raise ConfigError("--data-dir is required")
    path = Path(cfg["data_dir"])
    if not path.is_dir():
        raise ConfigError(f"data directory not found: {path}")
    return path


def _load(cfg, split: str) -> D.Dataset:
    try:
        return D.load_corpus(_data_dir(cfg), cfg["dataset"], split)
    except FileNotFoundError as err:
        raise ConfigError(str(err)) from None


def _train_val(cfg) -> tuple[D.Dataset, D.Dataset]:
    corpus = _load(cfg, "train")
    if cfg["subset"]:
        corpus = D.stratified_subset(corpus, cfg["subset"])
    return D.split(corpus, cfg["seed"])


def _test_set(cfg) -> D.Dataset:
    test = _load(cfg, "test")
    return D.stratified_subset(test, cfg["test_limit"]) if cfg.get("test_limit") else test


def _checkpoint(cfg, key: str, kind: str, required: bool = True) -> Optional[nn.Model]:
    path = cfg.get(key)
    if path is None:
        if required:
            raise ConfigError(f"--{key} is required")
        return None
    if not Path(path).is_file():
        raise ConfigError(f"checkpoint not found: {path}")
    return nn.load_checkpoint(path, kind=kind).eval()


def _train_cfg(cfg) -> TR.TrainConfig:
    return TR.TrainConfig(
        lr=cfg["lr"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["epochs"],
        patience=cfg["patience"],
        min_delta=cfg["min_delta"],
        seed=cfg["seed"],
    )


def _attack_cfg(cfg) -> A.AttackConfig:
    return A.AttackConfig(cfg["family"], cfg["eps"], cfg["alpha"], cfg["steps"], cfg["random_start"], cfg["seed"])


# -- commands --------------------------------------------------------------------------


def cmd_train_classifier(cfg) -> int:
    out = Path(cfg["out"])
    tcfg = _train_cfg(cfg)
    spec = nn.ClassifierSpec.profile(cfg["profile"], dropout_rate=cfg["dropout"])
    spec.validate()
    train_set, val_set = _train_val(cfg)
    write_resolved(cfg, out)
    log(f"classifier {cfg['profile']} profile, {len(train_set)} train / {len(val_set)} val images")
    model = nn.build_classifier(spec, np.random.default_rng(cfg["seed"]))
    model, history = TR.train_classifier(model, train_set, val_set, tcfg, out / "classifier.advl", TR.stderr_progress("classifier"))
    nn.save_checkpoint(model, out / "classifier.advl")
    TR.write_history(history, out / "classifier_history.csv")
    log(f"best epoch {history.best_epoch}: val_loss={history.best.val_loss:.5f} val_acc={history.best.val_acc:.4f}")
    return 0


def cmd_train_autoencoder(cfg) -> int:
    out = Path(cfg["out"])
    tcfg = _train_cfg(cfg)
    variant = "joint" if cfg["joint"] else cfg["family"]
    base = TR.MixtureRecipe.for_family(variant)
    c = cfg["clean_fraction"]
    if not 0.0 <= c <= 1.0:
        raise ConfigError(f"--clean-fraction must lie in [0, 1], got {c}")
    scale = (1.0 - c) / (1.0 - base.clean_weight)
    recipe = TR.MixtureRecipe(base.fgsm_weight * scale, base.pgd_weight * scale, c, pgd_steps=cfg["pgd_steps"])
    spec = nn.AutoencoderSpec(latent_dim=cfg["latent_dim"], noise_std=cfg["noise_std"])
    spec.validate()
    classifier = _checkpoint(cfg, "ckpt", "classifier")
    train_set, val_set = _train_val(cfg)
    write_resolved(cfg, out)
    log(f"building {variant} mixture on {len(train_set)} + {len(val_set)} images")
    pairs = TR.build_mixture(classifier, train_set, recipe, cfg["seed"], threads=cfg["threads"])
    val_pairs = TR.build_mixture(classifier, val_set, recipe, cfg["seed"] + 1, threads=cfg["threads"])
    ae = nn.build_autoencoder(spec, np.random.default_rng(cfg["seed"]))
    ckpt = out / f"autoencoder_{variant}.advl"
    ae, history = TR.train_autoencoder(ae, pairs, val_pairs, tcfg, ckpt, TR.stderr_progress("autoencoder"))
    nn.save_checkpoint(ae, ckpt)
    TR.write_history(history, out / f"autoencoder_{variant}_history.csv")
    log(f"best epoch {history.best_epoch}: val_mse={history.best.val_loss:.6f}")
    return 0


def cmd_attack(cfg) -> int:
    out = Path(cfg["out"])
    acfg = _attack_cfg(cfg)
    if cfg["split"] not in ("train", "val", "test"):
        raise ConfigError(f"--split must be train, val or test, got {cfg['split']!r}")
    classifier = _checkpoint(cfg, "ckpt", "classifier")
    if cfg["split"] == "test":
        dataset = _load(cfg, "test")
        if cfg["subset"]:
            dataset = D.stratified_subset(dataset, cfg["subset"])
    else:
        dataset = dict(zip(("train", "val"), _train_val(cfg)))[cfg["split"]]
    write_resolved(cfg, out)
    adv = A.generate_adversarial_dataset(classifier, dataset, acfg, threads=cfg["threads"])
    A.save_adversarial_set(adv, out, {"checkpoint": nn.checkpoint_digest(cfg["ckpt"])})
    acc_clean, _ = E.accuracy(classifier, dataset)
    acc_adv, _ = E.accuracy(classifier, adv.as_dataset())
    log(f"{acfg.family} eps={acfg.epsilon}: accuracy {acc_clean:.4f} -> {acc_adv:.4f} on {len(adv)} images")
    return 0


def cmd_evaluate(cfg) -> int:
    out = Path(cfg["out"])
    family = cfg["family"]
    if family not in A.FAMILIES:
        raise ConfigError(f"--family must be one of {A.FAMILIES}, got {family!r}")
    grid = E.parse_grid(cfg["grid"] or DEFAULT_GRIDS[family])
    A.AttackConfig(family, max(grid), cfg["alpha"], cfg["steps"], cfg["random_start"], cfg["seed"])
    classifier = _checkpoint(cfg, "ckpt", "classifier")
    defense = _checkpoint(cfg, "defense", "autoencoder", required=False)
    test = _test_set(cfg)
    write_resolved(cfg, out)
    start = time.time()
    report = E.sweep(
        classifier, defense, test, family, grid, cfg["steps"], cfg["alpha"], cfg["random_start"], cfg["seed"], cfg["threads"]
    )
    report.metadata.update(
        classifier=nn.checkpoint_digest(cfg["ckpt"]),
        defense=nn.checkpoint_digest(cfg["defense"]) if defense is not None else "none",
        created=time.strftime("%Y-%m-%dT%H:%M:%S"),
        wall_clock_s=f"{time.time() - start:.1f}",
    )
    path = E.write_report(report, out / f"report_{family}.csv")
    E.render_plots(report, out / "curves")
    for r in report.rows:
        log(f"{r.family} eps={r.epsilon:.2f} {'defended  ' if r.defended else 'undefended'} acc={r.accuracy:.4f}")
    log(f"wrote {path}")
    return 0


def cmd_report(cfg) -> int:
    if not cfg["inputs"]:
        raise ConfigError("--in needs at least one report CSV")
    reports = []
    for p in cfg["inputs"]:
        if not Path(p).is_file():
            raise ConfigError(f"report not found: {p}")
        reports.append(E.read_report(p))
    out = Path(cfg["out"])
    write_resolved(cfg, out)
    for path in E.write_tables(reports, out):
        log(f"wrote {path}")
    return 0


def cmd_gallery(cfg) -> int:
    out = Path(cfg["out"])
    acfg = _attack_cfg(cfg)
    classifier = _checkpoint(cfg, "ckpt", "classifier")
    defense = _checkpoint(cfg, "defense", "autoencoder")
    test = _test_set(cfg)
    k = min(cfg["k"], len(test))
    subset = test.subset(np.arange(k))
    write_resolved(cfg, out)
    adv = A.generate_adversarial_dataset(classifier, subset, acfg)
    recon = defense.predict(adv.adversarial) if k else adv.adversarial
    paths = E.sample_gallery(adv.clean, adv.adversarial, recon, out, k)
    log(f"wrote {len(paths)} PGM files to {out}")
    return 0


HANDLERS: dict[str, Callable[[dict], int]] = {
    "train-classifier": cmd_train_classifier,
    "train-autoencoder": cmd_train_autoencoder,
    "attack": cmd_attack,
    "evaluate": cmd_evaluate,
    "report": cmd_report,
    "gallery": cmd_gallery,
}


# -- argument parsing ------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common_flags() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="key=value file; flags override its values")
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="cap on worker threads")
    p.add_argument("--out", help="output directory")
    p.add_argument("--data-dir", dest="data_dir", help="directory holding the IDX files")
    p.add_argument("--profile", choices=("full", "reduced"), help="classifier channel schedule")
    p.add_argument("--dataset", choices=D.SOURCES)
    return p


def _attack_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--family", choices=A.FAMILIES)
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--random-start", dest="random_start", action=argparse.BooleanOptionalAction)


def _train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--min-delta", dest="min_delta", type=float)
    p.add_argument("--subset", type=int, help="stratified subset of the training corpus (0 = all)")


def build_parser() -> argparse.ArgumentParser:
    common = _common_flags()
    parser = _Parser(prog="advlab", description=__doc__.strip().splitlines()[0], parents=[common])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("train-classifier", parents=[common], argument_default=argparse.SUPPRESS, help="train the VGG classifier")
    _train_flags(p)
    p.add_argument("--dropout", type=float)

    p = sub.add_parser("train-autoencoder", parents=[common], argument_default=argparse.SUPPRESS, help="train the denoising defense")
    _train_flags(p)
    p.add_argument("--ckpt", help="classifier checkpoint the training attacks target")
    p.add_argument("--family", choices=A.FAMILIES)
    p.add_argument("--joint", action=argparse.BooleanOptionalAction, help="one autoencoder for FGSM and PGD")
    p.add_argument("--pgd-steps", dest="pgd_steps", type=int)
    p.add_argument("--clean-fraction", dest="clean_fraction", type=float)
    p.add_argument("--latent-dim", dest="latent_dim", type=int)
    p.add_argument("--noise-std", dest="noise_std", type=float)

    p = sub.add_parser("attack", parents=[common], argument_default=argparse.SUPPRESS, help="write an adversarial dataset")
    _attack_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--split", choices=("train", "val", "test"))
    p.add_argument("--subset", type=int)

    p = sub.add_parser("evaluate", parents=[common], argument_default=argparse.SUPPRESS, help="epsilon sweep report")
    _attack_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--defense", help="autoencoder checkpoint; adds defended rows")
    p.add_argument("--grid", help="start:stop:step or comma list")
    p.add_argument("--test-limit", dest="test_limit", type=int, help="stratified test subset (0 = all)")

    p = sub.add_parser("report", parents=[common], argument_default=argparse.SUPPRESS, help="merge report CSVs into tables")
    p.add_argument("--in", dest="inputs", nargs="+")

    p = sub.add_parser("gallery", parents=[common], argument_default=argparse.SUPPRESS, help="clean/adversarial/reconstructed PGMs")
    _attack_flags(p)
    p.add_argument("--ckpt")
    p.add_argument("--defense")
    p.add_argument("-k", type=int)
    p.add_argument("--test-limit", dest="test_limit", type=int)
    return parser


def parse_config(argv) -> dict:
    args = vars(build_parser().parse_args(argv))
    file_values = read_config_file(args["config"]) if "config" in args else {}
    command = args.pop("command", None) or file_values.get("command")
    if command is None:
        raise UsageError("no command given (and the config file has no command= key)")
    if command not in COMMANDS:
        raise UsageError(f"unknown command {command!r}")
    args.pop("config", None)
    return resolve(command, file_values, args)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cfg = parse_config(argv)
        return HANDLERS[cfg["command"]](cfg)
    except (ConfigError, UsageError) as err:
        print(f"advlab: error: {err}", file=sys.stderr)
        return 2
    except (AdvlabError, CheckpointError, OSError, FloatingPointError) as err:
        print(f"advlab: {type(err).__name__}: {err}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1


if __name__ == "__main__":
    sys.exit(main())
