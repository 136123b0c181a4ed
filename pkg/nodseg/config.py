"""Run configuration: dataclass, JSON/TOML files and command-line overrides."""

import json
import os
import tomllib
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Tuple

from .datapipe import SynthConfig
from .errors import ConfigError
from .labelgen import LABEL_MODES
from .losskernels import TOPO_FORMS, LossWeights
from .utils import PathLike

OUTPUT_ROOT_ENV = "NODSEG_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"

# P trains densely on a pseudo-label; A-E pick subsets of the weak losses
LOSS_MODES: Dict[str, Tuple[str, ...]] = {
    "P": (),
    "A": ("alignment",),
    "B": ("alignment", "contrastive"),
    "C": ("alignment", "correlation"),
    "D": ("contrastive", "correlation"),
    "E": ("alignment", "contrastive", "correlation"),
}
# ablation subscripts: 1 topological, 2 prompted mask, 3 fused
ABLATION_LABELS = {"1": "T", "2": "M", "3": "H"}


def default_output_root() -> str:
    return os.environ.get(OUTPUT_ROOT_ENV, DEFAULT_OUTPUT_ROOT)


def parse_mode(token: str) -> Tuple[str, str]:
    """'E3' or 'EH' -> (loss mode, label mode)."""
    token = token.strip().upper()
    if len(token) != 2:
        raise ConfigError(f"mode must be a loss letter and a label digit/letter, got {token!r}")
    loss, label = token[0], ABLATION_LABELS.get(token[1], token[1])
    if loss not in LOSS_MODES or label not in LABEL_MODES:
        raise ConfigError(f"unknown mode {token!r}")
    return loss, label


def mode_name(loss_mode: str, label_mode: str) -> str:
    digits = {v: k for k, v in ABLATION_LABELS.items()}
    return f"{loss_mode}{digits[label_mode]}"


@dataclass
class RunConfig:
    """Everything one training run needs."""

    corpus: Optional[str] = None
    synth: SynthConfig = field(default_factory=SynthConfig)
    epochs: int = 30
    batch_size: int = 8
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    label_mode: str = "H"
    loss_mode: str = "E"
    topo_form: str = "bce"
    seed: int = 0
    workers: int = 4
    output_dir: str = field(default_factory=default_output_root)
    run_name: Optional[str] = None

    def __post_init__(self):
        self.label_mode = str(self.label_mode).upper()
        self.loss_mode = str(self.loss_mode).upper()
        if self.label_mode not in LABEL_MODES:
            raise ConfigError(f"label_mode must be one of {LABEL_MODES}, got {self.label_mode!r}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {tuple(LOSS_MODES)}, got {self.loss_mode!r}")
        if self.topo_form not in TOPO_FORMS:
            raise ConfigError(f"topo_form must be one of {TOPO_FORMS}")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.workers < 1:
            raise ConfigError("workers must be at least 1")

    @property
    def terms(self) -> Tuple[str, ...]:
        return LOSS_MODES[self.loss_mode]

    @property
    def name(self) -> str:
        return self.run_name or f"{mode_name(self.loss_mode, self.label_mode)}_s{self.seed}"

    @property
    def run_dir(self) -> Path:
        return Path(self.output_dir) / self.name

    def to_dict(self) -> Dict[str, Any]:
        data = {f.name: getattr(self, f.name) for f in fields(self)}
        data["synth"] = self.synth.to_dict()
        data["weights"] = self.weights.to_dict()
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        data = dict(data)
        unknown = set(data) - {f.name for f in fields(cls)}
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        if isinstance(data.get("synth"), dict):
            data["synth"] = SynthConfig.from_dict(data["synth"])
        if isinstance(data.get("weights"), dict):
            data["weights"] = LossWeights.from_dict(data["weights"])
        try:
            return cls(**data)
        except TypeError as e:
            raise ConfigError(str(e)) from e


def load_config(path: PathLike) -> RunConfig:
    """Read a .json or .toml run config."""
    path = Path(path)
    try:
        if path.suffix == ".toml":
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        elif path.suffix == ".json":
            data = json.loads(path.read_text())
        else:
            raise ConfigError(f"config must be .json or .toml: {path}")
    except (OSError, json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise ConfigError(f"cannot read config {path}: {e}") from e
    return RunConfig.from_dict(data)


def _coerce(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: RunConfig, overrides: Iterable[str]) -> RunConfig:
    """Apply KEY=VALUE overrides; nested keys use a dot (weights.lambda=0.5, synth.n_train=40)."""
    data = cfg.to_dict()
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override must look like KEY=VALUE, got {item!r}")
        target = data
        *parents, leaf = key.strip().split(".")
        for part in parents:
            if not isinstance(target.get(part), dict):
                raise ConfigError(f"unknown config section {part!r}")
            target = target[part]
        if leaf not in target:
            raise ConfigError(f"unknown config key {key!r}")
        target[leaf] = _coerce(value.strip())
    return RunConfig.from_dict(data)


def with_modes(cfg: RunConfig, loss_mode: str, label_mode: str, seed: Optional[int] = None) -> RunConfig:
    return replace(cfg, loss_mode=loss_mode, label_mode=label_mode,
                   seed=cfg.seed if seed is None else seed, run_name=None)


def save_config(cfg: RunConfig, path: PathLike) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(cfg.to_dict(), indent=2))
    return path
