"""Experiment configuration, threat model, and training schedules.

Three schedules drive both trainers: a linear epsilon ramp, cosine learning
rate decay, and a piecewise-constant attack-step schedule. All of them are
pure functions of the epoch index so they can be checked against closed forms.
"""

import dataclasses
import math
from dataclasses import dataclass, field

import yaml

BN_VARIANTS = ("split_both", "split_stats_only", "split_affine_only", "single")
METHODS = ("acat", "dajat")


class ConfigError(ValueError):
    """Invalid configuration value or out-of-range schedule query."""


@dataclass(frozen=True)
class ThreatModel:
    """L-inf ball of radius epsilon_max around each input, in [0,1] pixels."""

    epsilon_max: float = 8 / 255
    norm: str = "linf"

    def __post_init__(self):
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ConfigError(f"epsilon_max must be in [0,1], got {self.epsilon_max}")
        if self.norm != "linf":
            raise ConfigError(f"only the linf threat model is supported, got {self.norm!r}")


def epsilon_at(epoch: int, epochs: int, epsilon_max: float) -> float:
    """Linear ramp: epoch * epsilon_max / epochs, reaching epsilon_max at the end."""
    _check_epoch(epoch, epochs)
    return epoch * epsilon_max / epochs


def lr_at(epoch: int, epochs: int, lr_max: float) -> float:
    """Cosine decay from lr_max at epoch 1: 0.5 * lr_max * (1 + cos((epoch-1)/E * pi))."""
    _check_epoch(epoch, epochs)
    return 0.5 * lr_max * (1.0 + math.cos((epoch - 1) / epochs * math.pi))


def _check_epoch(epoch: int, epochs: int) -> None:
    if epochs < 1:
        raise ConfigError(f"epochs must be >= 1, got {epochs}")
    if not 1 <= epoch <= epochs:
        raise ConfigError(f"epoch {epoch} outside schedule range 1..{epochs}")


@dataclass(frozen=True)
class StepSchedule:
    """Piecewise-constant attack-step counts over closed epoch bands.

    bands are (first_epoch, last_epoch, steps) with first <= last, contiguous
    and non-decreasing in steps. Text form: "1-50:2,51-100:3,101-150:4,151-200:5".
    """

    bands: tuple[tuple[int, int, int], ...]

    def __post_init__(self):
        if not self.bands:
            raise ConfigError("step schedule needs at least one band")
        prev_end, prev_steps = 0, 0
        for first, last, steps in self.bands:
            if first != prev_end + 1:
                raise ConfigError(f"bands must be contiguous, got band starting at {first} after {prev_end}")
            if last < first:
                raise ConfigError(f"band {first}-{last} is empty")
            if steps < 1:
                raise ConfigError(f"attack steps must be >= 1, got {steps}")
            if steps < prev_steps:
                raise ConfigError("attack-step schedule must be non-decreasing")
            prev_end, prev_steps = last, steps

    @classmethod
    def parse(cls, text: str) -> "StepSchedule":
        bands = []
        for part in text.split(","):
            span, _, steps = part.strip().partition(":")
            first, _, last = span.partition("-")
            try:
                bands.append((int(first), int(last if last else first), int(steps)))
            except ValueError as exc:
                raise ConfigError(f"cannot parse step-schedule band {part!r}") from exc
        return cls(tuple(bands))

    def render(self) -> str:
        return ",".join(f"{a}-{b}:{s}" for a, b, s in self.bands)

    def steps_at(self, epoch: int) -> int:
        for first, last, steps in self.bands:
            if first <= epoch <= last:
                return steps
        raise ConfigError(f"epoch {epoch} outside all schedule bands ({self.render()})")


def attack_steps_at(epoch: int, schedule) -> int:
    """Steps for this epoch; `schedule` is a fixed int or a StepSchedule."""
    if isinstance(schedule, int):
        if schedule < 1:
            raise ConfigError(f"attack steps must be >= 1, got {schedule}")
        if epoch < 1:
            raise ConfigError(f"epoch must be >= 1, got {epoch}")
        return schedule
    if isinstance(schedule, StepSchedule):
        return schedule.steps_at(epoch)
    raise ConfigError(f"unsupported step schedule {schedule!r}")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters for both trainers; every field maps 1:1 to a CLI flag.

    Defaults follow the reference CIFAR-10 recipe: SGD momentum 0.9, weight
    decay 5e-4 (not applied to BN parameters unless decay_bn_params), peak
    learning rate 0.2 under cosine decay, beta 8 for acat / 9 for dajat,
    lambda_js 2, and a 1000-image validation split at full scale.
    """

    method: str = "acat"
    epochs: int = 110
    lr_max: float = 0.2
    momentum: float = 0.9
    weight_decay: float = 5e-4
    decay_bn_params: bool = False
    beta: float = 8.0
    lambda_js: float = 2.0
    gamma_awp: float = 0.01
    views: int = 0
    attack_steps: str = "2"
    batch_size: int = 128
    seed: int = 0
    ema_decay: float = 0.995
    bn_variant: str = "split_both"
    epsilon_max: float = 8 / 255
    pad: int = 4
    base_view_weight: float = 0.0
    reinit_attack_noise: bool = False
    val_split: int = 1000
    quick_eval_samples: int = 512
    channels: str = "16,32,64,64"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"method must be one of {METHODS}, got {self.method!r}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.lr_max <= 0:
            raise ConfigError(f"lr_max must be > 0, got {self.lr_max}")
        for name in ("beta", "lambda_js", "gamma_awp", "weight_decay"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.views < 0:
            raise ConfigError(f"views must be >= 0, got {self.views}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 <= self.ema_decay <= 1.0:
            raise ConfigError(f"ema_decay must be in [0,1], got {self.ema_decay}")
        if self.bn_variant not in BN_VARIANTS:
            raise ConfigError(f"bn_variant must be one of {BN_VARIANTS}, got {self.bn_variant!r}")
        if not 0.0 <= self.epsilon_max <= 1.0:
            raise ConfigError(f"epsilon_max must be in [0,1], got {self.epsilon_max}")
        if self.pad < 0:
            raise ConfigError(f"pad must be >= 0, got {self.pad}")
        if not 0.0 <= self.base_view_weight < 1.0:
            raise ConfigError(f"base_view_weight must be in [0,1), got {self.base_view_weight}")
        if self.val_split < 0:
            raise ConfigError(f"val_split must be >= 0, got {self.val_split}")
        if self.quick_eval_samples < 1:
            raise ConfigError(f"quick_eval_samples must be >= 1, got {self.quick_eval_samples}")
        self.step_schedule()  # validates attack_steps text
        self.channel_list()

    def step_schedule(self):
        """Parsed attack_steps: an int for a flat count, else a StepSchedule."""
        text = self.attack_steps.strip()
        if text.isdigit():
            steps = int(text)
            if steps < 1:
                raise ConfigError(f"attack steps must be >= 1, got {steps}")
            return steps
        return StepSchedule.parse(text)

    def channel_list(self) -> tuple[int, ...]:
        try:
            chans = tuple(int(c) for c in self.channels.split(","))
        except ValueError as exc:
            raise ConfigError(f"cannot parse channels {self.channels!r}") from exc
        if not chans or any(c < 1 for c in chans):
            raise ConfigError(f"channels must be positive, got {self.channels!r}")
        return chans

    def threat_model(self) -> ThreatModel:
        return ThreatModel(epsilon_max=self.epsilon_max)

    def view_weights(self) -> tuple[float, ...]:
        """Per-view loss weights: uniform 1/(T+1), or base_view_weight + equal split."""
        views = self.views
        if self.base_view_weight == 0.0 or views == 0:
            return tuple([1.0 / (views + 1)] * (views + 1))
        rest = (1.0 - self.base_view_weight) / views
        return (self.base_view_weight,) + tuple([rest] * views)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_text(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(known)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        coerced = {}
        for key, value in data.items():
            coerced[key] = _coerce(value, known[key].type, key)
        return cls(**coerced)

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        data = yaml.safe_load(text)
        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ConfigError("config file must be a flat key/value mapping")
        return cls.from_dict(data)

    def with_overrides(self, overrides: dict) -> "TrainConfig":
        merged = self.to_dict()
        known = {f.name: f for f in dataclasses.fields(self)}
        for key, value in overrides.items():
            if key not in known:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(value, known[key].type, key)
        return TrainConfig(**merged)


def _coerce(value, ftype, key: str):
    """Coerce a parsed scalar (possibly a CLI string) to the field's type."""
    types = {"str": str, "int": int, "float": float, "bool": bool}
    target = types.get(ftype if isinstance(ftype, str) else ftype.__name__)
    if target is None:
        raise ConfigError(f"unsupported field type for {key!r}")
    if isinstance(value, bool) and target is not bool:
        raise ConfigError(f"cannot coerce {key!r} from bool to {target.__name__}")
    if isinstance(value, target):
        return value
    if target is bool:
        if isinstance(value, str) and value.lower() in ("true", "1", "yes"):
            return True
        if isinstance(value, str) and value.lower() in ("false", "0", "no"):
            return False
        raise ConfigError(f"cannot parse boolean for {key!r}: {value!r}")
    if target is float and isinstance(value, int):
        return float(value)
    if isinstance(value, str):
        try:
            if target is float:
                # accept fraction syntax like 8/255
                if "/" in value:
                    num, _, den = value.partition("/")
                    return float(num) / float(den)
                return float(value)
            if target is int:
                return int(value)
            return value
        except ValueError as exc:
            raise ConfigError(f"cannot parse {key!r} from {value!r}") from exc
    raise ConfigError(f"cannot coerce {key!r} from {type(value).__name__} to {target.__name__}")
