"""Plain-text run configuration: INI sections, strict schema, mandatory seed.

Unknown sections or keys are hard errors; so is a missing seed. The raw file
text is kept verbatim on the parsed config so run records can snapshot it
byte for byte.
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field

import numpy as np

from fasdg.backbone import BackboneConfig
from fasdg.errors import ConfigError

_REQUIRED = object()


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _str_list(raw: str) -> list[str]:
    items = [x.strip() for x in raw.split(",") if x.strip()]
    if not items:
        raise ValueError("empty list")
    return items


_SCHEMA: dict[str, dict[str, tuple]] = {
    "backbone": {
        "image_size": (int, 32),
        "patch_size": (int, 8),
        "embed_dim": (int, 64),
        "heads": (int, 4),
        "n_gpsa_blocks": (int, 2),
        "n_sa_blocks": (int, 2),
        "mlp_ratio": (float, 2.0),
        "locality_strength": (float, 1.0),
        "content_score_scaling": (_bool, True),
    },
    "heads": {
        "k": (int, 10),
        "hidden_dim": (int, 32),
        "lambda_grl": (float, 1.0),
        "grl_schedule": (str, "constant"),
        "adv_weight": (float, 1.0),
        "regression_reduction": (str, "mean"),
        "loss_mode": (str, "regression"),
    },
    "optimizer": {
        "lr": (float, 3e-4),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "eps": (float, 1e-8),
        "batch_size": (int, 32),
        "steps": (int, 600),
        "seed": (int, _REQUIRED),
        "precision": (str, "f32"),
    },
    "data": {
        "source": (str, "synthetic"),
        "ingest_path": (str, ""),
        "eval_fraction": (float, 0.25),
        "n_train_real": (int, 160),
        "n_train_fake": (int, 160),
        "n_eval_real": (int, 100),
        "n_eval_fake": (int, 100),
        "p_mix": (float, 0.5),
        "cue_amplitude": (float, 0.12),
        "cue_frequency": (float, 0.30),
        "cue_blur": (float, 0.8),
    },
    "protocol": {
        "domains": (_str_list, ["A", "B", "C", "D"]),
        "target": (str, ""),
        "folds": (_str_list, None),
        "threshold": (str, "eer-target"),
    },
}


@dataclass
class HeadsConfig:
    k: int
    hidden_dim: int
    lambda_grl: float
    grl_schedule: str
    adv_weight: float
    regression_reduction: str
    loss_mode: str


@dataclass
class OptimConfig:
    lr: float
    beta1: float
    beta2: float
    eps: float
    batch_size: int
    steps: int
    seed: int
    precision: str

    @property
    def dtype(self):
        return np.float32 if self.precision == "f32" else np.float64


@dataclass
class DataConfig:
    source: str
    ingest_path: str
    eval_fraction: float
    n_train_real: int
    n_train_fake: int
    n_eval_real: int
    n_eval_fake: int
    p_mix: float
    cue_amplitude: float
    cue_frequency: float
    cue_blur: float


@dataclass
class ProtocolConfig:
    domains: list[str]
    target: str
    folds: list[str] | None
    threshold: str  # "eer-target", "fixed:<v>", or "eer-dev"

    def threshold_kind(self) -> tuple[str, float]:
        if self.threshold in ("eer-target", "eer-dev"):
            return self.threshold, 0.0
        if self.threshold.startswith("fixed:"):
            try:
                return "fixed", float(self.threshold.split(":", 1)[1])
            except ValueError:
                raise ConfigError(f"bad fixed threshold {self.threshold!r}") from None
        raise ConfigError(f"unknown threshold convention {self.threshold!r}")


@dataclass
class ModelConfig:
    backbone: BackboneConfig
    heads: HeadsConfig
    optimizer: OptimConfig
    data: DataConfig
    protocol: ProtocolConfig
    raw_text: str = field(repr=False, default="")


def _parse_sections(text: str) -> dict[str, dict[str, str]]:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"), interpolation=None)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config: {exc}") from exc
    return {s: dict(parser.items(s)) for s in parser.sections()}


def parse_config(text: str) -> ModelConfig:
    """Parse and validate a config file's text; see _SCHEMA for keys/defaults."""
    sections = _parse_sections(text)
    unknown_sections = set(sections) - set(_SCHEMA)
    if unknown_sections:
        raise ConfigError(f"unknown config section(s): {sorted(unknown_sections)}")

    values: dict[str, dict] = {}
    for section, keys in _SCHEMA.items():
        given = sections.get(section, {})
        unknown = set(given) - set(keys)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{section}]: {sorted(unknown)}")
        out = {}
        for key, (conv, default) in keys.items():
            if key in given:
                try:
                    out[key] = conv(given[key])
                except ValueError as exc:
                    raise ConfigError(f"[{section}] {key}: {exc}") from exc
            elif default is _REQUIRED:
                raise ConfigError(f"[{section}] {key} is mandatory")
            else:
                out[key] = default
        values[section] = out

    backbone = BackboneConfig(**values["backbone"])
    heads = HeadsConfig(**values["heads"])
    optim = OptimConfig(**values["optimizer"])
    data = DataConfig(**values["data"])
    proto = ProtocolConfig(**values["protocol"])

    if heads.k < 2:
        raise ConfigError("heads.k must be >= 2")
    if heads.grl_schedule not in ("constant", "ramp"):
        raise ConfigError(f"unknown grl_schedule {heads.grl_schedule!r}")
    if heads.regression_reduction not in ("mean", "sum"):
        raise ConfigError(f"unknown regression_reduction {heads.regression_reduction!r}")
    if heads.loss_mode not in ("regression", "bce"):
        raise ConfigError(f"unknown loss_mode {heads.loss_mode!r}")
    if heads.lambda_grl < 0:
        raise ConfigError("lambda_grl must be >= 0")
    if optim.precision not in ("f32", "f64"):
        raise ConfigError(f"precision must be f32 or f64, got {optim.precision!r}")
    if optim.batch_size < 1 or optim.steps < 0:
        raise ConfigError("batch_size must be >= 1 and steps >= 0")
    if data.source not in ("synthetic", "directory"):
        raise ConfigError(f"data source must be synthetic or directory, got {data.source!r}")
    if data.source == "directory" and not data.ingest_path:
        raise ConfigError("directory source requires ingest_path")
    if not 0.0 <= data.p_mix <= 1.0:
        raise ConfigError("p_mix must lie in [0, 1]")
    if len(set(proto.domains)) != len(proto.domains):
        raise ConfigError("duplicate domain names")
    if proto.target and proto.target not in proto.domains:
        raise ConfigError(f"target {proto.target!r} not among domains {proto.domains}")
    if proto.folds is not None:
        missing = [f for f in proto.folds if f not in proto.domains]
        if missing:
            raise ConfigError(f"fold target(s) not among domains: {missing}")
    proto.threshold_kind()  # validates

    return ModelConfig(backbone, heads, optim, data, proto, raw_text=text)


def load_config(path) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def default_config_text(seed: int = 7) -> str:
    """A fully commented default config, also used by the test suite."""
    return f"""# fasdg run configuration
[backbone]
image_size = 32
patch_size = 8
embed_dim = 64
heads = 4
n_gpsa_blocks = 2
n_sa_blocks = 2
mlp_ratio = 2.0
locality_strength = 1.0
content_score_scaling = true

[heads]
k = 10
hidden_dim = 32
lambda_grl = 1.0
grl_schedule = constant
adv_weight = 1.0
regression_reduction = mean
loss_mode = regression

[optimizer]
lr = 3e-4
batch_size = 32
steps = 600
seed = {seed}
precision = f32

[data]
source = synthetic
n_train_real = 160
n_train_fake = 160
n_eval_real = 100
n_eval_fake = 100
p_mix = 0.5
cue_amplitude = 0.12
cue_frequency = 0.30
cue_blur = 0.8

[protocol]
domains = A,B,C,D
threshold = eer-target
"""
