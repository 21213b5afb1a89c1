"""Model, refinement and training configuration plus the flat key=value format."""

import dataclasses
import math
from dataclasses import dataclass, field
from fractions import Fraction

from .tensor import ContractError


class ConfigError(ContractError):
    pass


VGG16_WIDTHS = (64, 128, 256, 512, 512)
STAGE_STRIDES = (2, 4, 8, 16, 32)


@dataclass
class RefineConfig:
    # partition factor per level, ordered i = 4, 3, 2, 1
    k_per_level: tuple = (5, 10, 20, 40)
    beta: float = 0.5
    gamma_fesm: float = 0.5
    gamma_sca: float = 0.0
    # shrink k to the feature extent when a level is smaller than k
    k_clamp: bool = True

    def validate(self):
        if len(self.k_per_level) != 4 or any(int(k) < 1 for k in self.k_per_level):
            raise ConfigError(f"k_per_level must be four positive extents, got {self.k_per_level}")
        if not 0.0 <= self.beta <= 1.0:
            raise ConfigError(f"beta out of [0,1]: {self.beta}")
        if not 0.0 < self.gamma_fesm < 1.0:
            raise ConfigError(f"gamma_fesm must lie strictly inside (0,1), got {self.gamma_fesm}")

    def k_for(self, level):
        return int(self.k_per_level[4 - level])


@dataclass
class ModelConfig:
    stage_widths: tuple = (16, 32, 64, 128, 128)
    fpn_width: int = 64
    swap_ratio: Fraction = Fraction(1, 4)
    swap_layout: str = "leading"
    input_size: int = 64
    align_corners: bool = False
    precision: str = "float32"
    refine: RefineConfig = field(default_factory=RefineConfig)

    def validate(self):
        if len(self.stage_widths) != 5 or any(int(w) < 1 for w in self.stage_widths):
            raise ConfigError(f"stage_widths must be five positive extents, got {self.stage_widths}")
        if self.fpn_width < 1:
            raise ConfigError(f"fpn_width must be positive, got {self.fpn_width}")
        if not 0 <= self.swap_ratio <= 1:
            raise ConfigError(f"swap_ratio out of [0,1]: {self.swap_ratio}")
        if self.swap_layout not in ("leading", "interleaved"):
            raise ConfigError(f"swap_layout must be 'leading' or 'interleaved', got {self.swap_layout!r}")
        if self.input_size % 32 or self.input_size < 32:
            raise ConfigError(f"input_size must be divisible by 32, got {self.input_size}")
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        self.refine.validate()

    @property
    def swapped_channels(self):
        return math.floor(Fraction(self.swap_ratio) * self.fpn_width)


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    weight_decay: float = 0.0
    batch_size: int = 4
    epochs: int = 1
    max_iters: int = 0
    seed: int = 0
    checkpoint_dir: str = "checkpoints"
    eval_every: int = 1
    augment: bool = True

    def validate(self):
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be non-negative, got {self.learning_rate}")
        if not (0 <= self.adam_beta1 < 1 and 0 <= self.adam_beta2 < 1):
            raise ConfigError("adam moments must lie in [0,1)")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0 or self.max_iters < 0:
            raise ConfigError("epochs and max_iters must be non-negative")


def _parse_value(raw, current):
    raw = raw.strip()
    if isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if isinstance(current, Fraction):
        return Fraction(raw).limit_denominator(10_000)
    if isinstance(current, tuple):
        return tuple(int(v) for v in raw.split(",") if v.strip())
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def _targets(model, train):
    out = {}
    for obj in (model, model.refine, train):
        for f in dataclasses.fields(obj):
            if f.name != "refine":
                out[f.name] = obj
    return out


def parse_config(text, model=None, train=None):
    """Parse flat ``key = value`` lines (``#`` starts a comment) into configs."""
    model = model or ModelConfig()
    train = train or TrainConfig()
    targets = _targets(model, train)
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key == "preset":
            if raw != "vgg16-width":
                raise ConfigError(f"line {lineno}: unknown preset {raw!r}")
            model.stage_widths = VGG16_WIDTHS
            continue
        if key not in targets:
            raise ConfigError(f"unknown config key {key!r} (line {lineno})")
        obj = targets[key]
        try:
            value = _parse_value(raw, getattr(obj, key))
        except (ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key!r} (line {lineno}): {exc}") from None
        setattr(obj, key, value)
    model.validate()
    train.validate()
    return model, train


def load_config(path):
    with open(path) as fh:
        return parse_config(fh.read())


def config_to_dict(model, train):
    d = {}
    for obj in (model, model.refine, train):
        for f in dataclasses.fields(obj):
            if f.name == "refine":
                continue
            v = getattr(obj, f.name)
            if isinstance(v, Fraction):
                v = str(v)
            elif isinstance(v, tuple):
                v = list(v)
            d[f.name] = v
    return d


def config_from_dict(d):
    model, train = ModelConfig(), TrainConfig()
    targets = _targets(model, train)
    for key, value in d.items():
        obj = targets[key]
        if isinstance(getattr(obj, key), Fraction):
            value = Fraction(value)
        elif isinstance(value, list):
            value = tuple(value)
        setattr(obj, key, value)
    model.validate()
    train.validate()
    return model, train
