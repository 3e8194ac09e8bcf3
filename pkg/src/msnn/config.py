"""Experiment configuration in a flat ``key = value`` text format.

Lines starting with ``#`` are comments. Unspecified keys take the defaults of
the chosen dataset's preset.
"""
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .assom import AssomSchedule
from .network import Architecture
from .tensor import DimensionError
from .training import SgdSchedule


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str = "mnist"
    mnist_dir: str = "data/mnist"
    coil_dir: str = "data/coil20"
    train_subset_per_class: int = 0   # 0: use the whole training set
    coil_train_per_class: int = 50
    input_side: int = 28
    kernel_side: int = 5
    kernel_count: int = 10
    pool_scale: int = 2
    block_count: int = 24
    fc_hidden: int = 280
    assom_modules: int = 24
    assom_epochs: int = 15
    assom_eta0: float = 0.5
    assom_decay: float = 0.05
    patch_stride: int = 1
    assom_patch_limit: int = 0        # 0: train on every harvested patch
    sgd_epochs: int = 200
    sgd_batch: int = 50
    sgd_eta0: float = 1.0
    sgd_decay: float = 0.005
    activation: str = "logistic"
    kernel_init: str = "subspace"
    seed: int = 0

    def __post_init__(self):
        if self.dataset not in ("mnist", "coil20"):
            raise ConfigError(f"dataset must be mnist or coil20, got {self.dataset!r}")
        if self.kernel_init not in ("subspace", "random"):
            raise ConfigError(f"kernel_init must be subspace or random, got {self.kernel_init!r}")
        if self.activation not in ("logistic", "tanh", "identity"):
            raise ConfigError(f"unknown activation {self.activation!r}")
        if self.assom_modules < self.block_count:
            raise ConfigError(f"assom_modules={self.assom_modules} must be >= "
                              f"block_count={self.block_count}")
        if self.patch_stride < 1:
            raise ConfigError("patch_stride must be >= 1")
        try:
            self.architecture.sides()
        except DimensionError as exc:
            raise ConfigError(f"invalid architecture: {exc}") from exc
        self.assom_schedule
        self.sgd_schedule

    @property
    def class_count(self):
        return 10 if self.dataset == "mnist" else 20

    @property
    def architecture(self):
        return Architecture(self.input_side, self.kernel_side, self.kernel_count, self.pool_scale,
                            self.block_count, self.fc_hidden, self.class_count)

    @property
    def assom_schedule(self):
        try:
            return AssomSchedule(self.assom_epochs, self.assom_eta0, self.assom_decay)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def sgd_schedule(self):
        try:
            return SgdSchedule(self.sgd_epochs, self.sgd_batch, self.sgd_eta0, self.sgd_decay)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def with_(self, **changes):
        return replace(self, **changes)

    def to_text(self):
        return "".join(f"{k} = {v}\n" for k, v in asdict(self).items())


PRESETS = {
    "mnist": {},
    "coil20": dict(dataset="coil20", input_side=32, block_count=16, fc_hidden=250,
                   assom_modules=16, assom_epochs=10, assom_eta0=1.0, assom_decay=0.05,
                   sgd_epochs=400, sgd_batch=5, sgd_eta0=0.5, sgd_decay=0.005),
}


def _coerce(name, raw):
    types = {f.name: f.type for f in fields(ExperimentConfig)}
    if name not in types:
        raise ConfigError(f"unknown config key {name!r}")
    kind = types[name]
    try:
        if kind in ("int", int):
            return int(raw)
        if kind in ("float", float):
            return float(raw)
    except ValueError as exc:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {kind}") from exc
    return raw


def parse_config(text):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _coerce(key, raw)
    dataset = values.get("dataset", "mnist")
    if dataset not in PRESETS:
        raise ConfigError(f"dataset must be mnist or coil20, got {dataset!r}")
    merged = {**PRESETS[dataset], **values}
    try:
        return ExperimentConfig(**merged)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path):
    return parse_config(Path(path).read_text())


def preset(dataset, **overrides):
    return ExperimentConfig(**{**PRESETS[dataset], **overrides})
