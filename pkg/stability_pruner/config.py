"""Run configuration: INI file sections, flag overrides, the resolved record.

Precedence is defaults < config file < command-line flags. Every command
writes the fully resolved configuration to ``config.resolved.ini`` in its
output directory.
"""
import configparser
import hashlib
import io
import logging
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

from stability_pruner.errors import ConfigError
from stability_pruner.pruner import CRITERIA, PruneSchedule
from stability_pruner.trainer import TrainConfig

logger = logging.getLogger(__name__)

RESOLVED_NAME = "config.resolved.ini"
COMMANDS = ("train", "prune", "analyze", "eval", "ablate")


def parse_int_list(text: str, what: str = "value") -> List[int]:
    try:
        return [int(x) for x in str(text).replace(";", ",").split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from None


def parse_lr_schedule(text: str) -> List[Tuple[int, float]]:
    """``"5:0.005, 8:0.0005"`` -> [(5, 0.005), (8, 0.0005)]."""
    schedule = []
    for token in filter(None, (t.strip() for t in str(text).split(","))):
        epoch, sep, lr = token.partition(":")
        try:
            if not sep:
                raise ValueError(token)
            schedule.append((int(epoch), float(lr)))
        except ValueError:
            raise ConfigError(f"lr_schedule: expected 'epoch:lr' pairs, got {token!r}") from None
    return schedule


def format_lr_schedule(schedule: List[Tuple[int, float]]) -> str:
    return ", ".join(f"{e}:{lr!r}" for e, lr in schedule)


def _float(value: str) -> float:
    try:
        return float(value)
    except ValueError:
        raise ConfigError(f"expected a number, got {value!r}") from None


def _int(value: str) -> int:
    try:
        return int(value)
    except ValueError:
        raise ConfigError(f"expected an integer, got {value!r}") from None


# INI key -> (TrainConfig field, parser)
_PHASE_KEYS: Dict[str, Tuple[str, Callable]] = {
    "lr": ("lr", _float),
    "lr_schedule": ("lr_schedule", parse_lr_schedule),
    "decay": ("decay", str),
    "momentum": ("momentum", _float),
    "weight_decay": ("weight_decay", _float),
    "batch_size": ("batch_size", _int),
    "epochs": ("epochs", _int),
}
_TRAIN_KEYS = dict(_PHASE_KEYS, **{"lambda": ("lam", _float), "aux_form": ("aux_form", str)})
_AUX_KEYS = dict(_PHASE_KEYS, **{"lambda": ("lam", _float), "form": ("aux_form", str)})
_FINETUNE_KEYS = dict(_PHASE_KEYS)

SECTIONS = {
    "run": ("arch", "checkpoint", "out", "seed"),
    "data": ("path", "split"),
    "train": tuple(_TRAIN_KEYS),
    "aux": tuple(_AUX_KEYS),
    "finetune": tuple(_FINETUNE_KEYS),
    "prune": ("schedule", "fraction", "criterion"),
    "analyze": ("batch_sizes", "compare"),
    "ablate": ("layers", "k", "seeds", "workers", "eval_samples"),
}


@dataclass
class RunConfig:
    command: str
    arch: Optional[str] = None
    checkpoint: Optional[str] = None
    data: str = "synth"
    split: str = "test"
    out: Path = Path("runs")
    seed: int = 0
    train: TrainConfig = field(default_factory=TrainConfig.baseline)
    aux: TrainConfig = field(default_factory=TrainConfig.auxiliary)
    finetune: TrainConfig = field(default_factory=TrainConfig.finetune)
    schedule: Optional[str] = None
    fraction: float = 0.2
    criterion: str = "stability"
    batch_sizes: List[int] = field(default_factory=lambda: [1])
    compare: Optional[str] = None
    ablate_layers: List[int] = field(default_factory=lambda: [-1])
    ks: List[int] = field(default_factory=lambda: [0, 4, 8, 16])
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    eval_samples: int = 0

    def validate(self) -> None:
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        if self.split not in ("train", "test"):
            raise ConfigError(f"split must be train or test, got {self.split!r}")
        if self.criterion not in CRITERIA:
            raise ConfigError(f"criterion must be one of {CRITERIA}, got {self.criterion!r}")
        for name in ("train", "aux", "finetune"):
            getattr(self, name).validate()
        if not 0 < self.fraction <= 1:
            raise ConfigError(f"fraction must be in (0, 1], got {self.fraction}")
        if not self.batch_sizes or min(self.batch_sizes) < 1:
            raise ConfigError(f"batch sizes must be >= 1, got {self.batch_sizes}")
        if not self.ks or min(self.ks) < 0:
            raise ConfigError(f"k values must be >= 0, got {self.ks}")
        if not self.seeds:
            raise ConfigError("ablation needs at least one seed")
        if self.workers < 1 or self.eval_samples < 0:
            raise ConfigError("workers must be >= 1 and eval_samples >= 0")

    # -- schedule --------------------------------------------------------------

    def prune_schedule(self, widths: List[int]) -> PruneSchedule:
        """Explicit counts (a file or ``"2,6;1,4"``) or ``"to:4,14"`` target widths."""
        if not self.schedule:
            raise ConfigError("prune needs a schedule (--schedule FILE, 'p1,p2;...' or 'to:w1,w2')")
        budget = dict(aux_epochs=self.aux.epochs, finetune_epochs=self.finetune.epochs, lam=self.aux.lam)
        text = self.schedule.strip()
        if text.startswith("to:"):
            targets = parse_int_list(text[3:], "schedule targets")
            schedule = PruneSchedule.towards(widths, targets, self.fraction, **budget)
        else:
            path = Path(text)
            if path.is_file():
                text = path.read_text(encoding="utf-8")
            schedule = PruneSchedule.parse(text.replace(";", "\n"), **budget)
        schedule.validate(widths)
        return schedule

    # -- serialization -----------------------------------------------------------

    def to_ini(self, include_paths: bool = True) -> configparser.ConfigParser:
        parser = configparser.ConfigParser(interpolation=None)
        run = {"seed": str(self.seed)}
        if self.arch:
            run["arch"] = self.arch
        if include_paths:
            if self.checkpoint:
                run["checkpoint"] = self.checkpoint
            run["out"] = str(self.out)
        parser["run"] = run
        parser["data"] = {"path": self.data, "split": self.split}
        for section, keys in (("train", _TRAIN_KEYS), ("aux", _AUX_KEYS), ("finetune", _FINETUNE_KEYS)):
            cfg = getattr(self, section)
            values = {}
            for key, (attr, _) in keys.items():
                value = getattr(cfg, attr)
                values[key] = format_lr_schedule(value) if attr == "lr_schedule" else str(value)
            parser[section] = values
        parser["prune"] = {"schedule": self.schedule or "", "fraction": str(self.fraction),
                           "criterion": self.criterion}
        parser["analyze"] = {"batch_sizes": ",".join(map(str, self.batch_sizes)), "compare": self.compare or ""}
        parser["ablate"] = {"layers": ",".join(map(str, self.ablate_layers)), "k": ",".join(map(str, self.ks)),
                            "seeds": ",".join(map(str, self.seeds)), "workers": str(self.workers),
                            "eval_samples": str(self.eval_samples)}
        return parser

    def to_text(self, include_paths: bool = True) -> str:
        buffer = io.StringIO()
        self.to_ini(include_paths).write(buffer)
        return buffer.getvalue()

    def config_hash(self) -> str:
        """SHA-256 of the resolved config without output paths."""
        return hashlib.sha256(self.to_text(include_paths=False).encode("utf-8")).hexdigest()

    def write_resolved(self, out_dir: Optional[Path] = None) -> Path:
        out_dir = Path(out_dir or self.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        path = out_dir / RESOLVED_NAME
        path.write_text(self.to_text(), encoding="utf-8")
        logger.debug("wrote %s", path)
        return path


def read_ini(path) -> configparser.ConfigParser:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    parser = configparser.ConfigParser(interpolation=None)
    try:
        parser.read(path, encoding="utf-8")
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    for section in parser.sections():
        if section not in SECTIONS:
            raise ConfigError(f"{path}: unknown section [{section}]")
        unknown = set(parser[section]) - set(SECTIONS[section])
        if unknown:
            raise ConfigError(f"{path}: unknown keys in [{section}]: {sorted(unknown)}")
    return parser


def _apply_phase(cfg: TrainConfig, values: Dict[str, str], keys: Dict[str, Tuple[str, Callable]],
                 section: str) -> TrainConfig:
    updates = {}
    for key, raw in values.items():
        attr, convert = keys[key]
        try:
            updates[attr] = convert(raw)
        except ConfigError as exc:
            raise ConfigError(f"[{section}] {key}: {exc}") from None
    return replace(cfg, **updates)


def apply_ini(config: RunConfig, parser: configparser.ConfigParser) -> RunConfig:
    updates = {}
    run = parser["run"] if parser.has_section("run") else {}
    if "arch" in run:
        updates["arch"] = run["arch"]
    if "checkpoint" in run:
        updates["checkpoint"] = run["checkpoint"] or None
    if "out" in run:
        updates["out"] = Path(run["out"])
    if "seed" in run:
        updates["seed"] = _int(run["seed"])
    if parser.has_section("data"):
        if "path" in parser["data"]:
            updates["data"] = parser["data"]["path"]
        if "split" in parser["data"]:
            updates["split"] = parser["data"]["split"]
    for section, keys in (("train", _TRAIN_KEYS), ("aux", _AUX_KEYS), ("finetune", _FINETUNE_KEYS)):
        if parser.has_section(section):
            updates[section] = _apply_phase(getattr(config, section), dict(parser[section]), keys, section)
    if parser.has_section("prune"):
        prune = parser["prune"]
        if "schedule" in prune:
            updates["schedule"] = prune["schedule"] or None
        if "fraction" in prune:
            updates["fraction"] = _float(prune["fraction"])
        if "criterion" in prune:
            updates["criterion"] = prune["criterion"]
    if parser.has_section("analyze"):
        analyze = parser["analyze"]
        if "batch_sizes" in analyze:
            updates["batch_sizes"] = parse_int_list(analyze["batch_sizes"], "batch_sizes")
        if "compare" in analyze:
            updates["compare"] = analyze["compare"] or None
    if parser.has_section("ablate"):
        ablate = parser["ablate"]
        for key, attr in (("layers", "ablate_layers"), ("k", "ks"), ("seeds", "seeds")):
            if key in ablate:
                updates[attr] = parse_int_list(ablate[key], key)
        if "workers" in ablate:
            updates["workers"] = _int(ablate["workers"])
        if "eval_samples" in ablate:
            updates["eval_samples"] = _int(ablate["eval_samples"])
    return replace(config, **updates)


# Phase that --epochs / --lr retarget, and the phase --lambda / --aux-form set.
_EPOCH_PHASE = {"prune": "finetune", "ablate": "aux"}
_AUX_PHASE = {"train": "train"}


def apply_flags(config: RunConfig, flags: Dict) -> RunConfig:
    """Overlay command-line flags (``None`` means not given)."""
    given = {k: v for k, v in flags.items() if v is not None}
    updates = {}
    for key in ("arch", "checkpoint", "data", "split", "schedule", "criterion", "compare"):
        if key in given:
            updates[key] = given[key]
    if "out" in given:
        updates["out"] = Path(given["out"])
    if "seed" in given:
        updates["seed"] = int(given["seed"])

    phases = {name: {} for name in ("train", "aux", "finetune")}
    epoch_phase = _EPOCH_PHASE.get(config.command, "train")
    aux_phase = _AUX_PHASE.get(config.command, "aux")
    if "epochs" in given:
        phases[epoch_phase]["epochs"] = int(given["epochs"])
    if "lr" in given:
        phases[epoch_phase]["lr"] = float(given["lr"])
    if "lam" in given:
        phases[aux_phase]["lam"] = float(given["lam"])
    if "aux_form" in given:
        phases[aux_phase]["aux_form"] = given["aux_form"]
    if "aux_epochs" in given:
        phases["aux"]["epochs"] = int(given["aux_epochs"])
    if "finetune_epochs" in given:
        phases["finetune"]["epochs"] = int(given["finetune_epochs"])
    if "batch" in given:
        sizes = parse_int_list(given["batch"], "--batch")
        if config.command == "analyze":
            updates["batch_sizes"] = sizes
        elif len(sizes) != 1:
            raise ConfigError(f"--batch for {config.command} takes one mini-batch size, got {given['batch']!r}")
        else:
            for name in phases:
                phases[name]["batch_size"] = sizes[0]
    for name, values in phases.items():
        if values:
            updates[name] = replace(getattr(config, name), **values)

    for key, attr in (("layers", "ablate_layers"), ("k", "ks"), ("seeds", "seeds")):
        if key in given:
            updates[attr] = parse_int_list(given[key], f"--{key}")
    if "workers" in given:
        updates["workers"] = int(given["workers"])
    if "eval_samples" in given:
        updates["eval_samples"] = int(given["eval_samples"])
    return replace(config, **updates)


def _seeded(config: RunConfig) -> RunConfig:
    return replace(config,
                   train=replace(config.train, seed=config.seed),
                   aux=replace(config.aux, seed=config.seed),
                   finetune=replace(config.finetune, seed=config.seed))


def resolve(command: str, flags: Dict, config_path: Optional[str] = None) -> RunConfig:
    config = RunConfig(command=command)
    if config_path:
        config = apply_ini(config, read_ini(config_path))
    config = _seeded(apply_flags(config, flags))
    config.validate()
    return config
