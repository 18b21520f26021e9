"""Flat ``key = value`` run configuration.

Lines starting with ``#`` and trailing ``# ...`` comments are ignored. Every
key must be known; values are parsed according to the field's default type.
"""
import hashlib
import os
from dataclasses import dataclass, fields, asdict

from .backbone import ModelConfig
from .errors import ConfigError
from .objectives import MINING_MODES, MINING_STRATEGIES, LossSwitches
from .training import StagePlan, TrainSettings

SEED_ENV = "MOME_SEED"


@dataclass
class RunConfig:
    # model
    layers: int = 4
    hidden: int = 64
    heads: int = 4
    ffn_width: int = 256
    vl_layers: int = 1
    patch_size: int = 4
    image_size: int = 16
    channels: int = 3
    vocab_size: int = 64
    max_text_len: int = 24
    attention_mode: str = "shared"
    expert_mode: str = "mome"
    itc_dim: int = 32
    # stages
    vision_steps: int = 2000
    text_steps: int = 1000
    vl_steps: int = 3000
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_frac: float = 0.1
    checkpoint_every: int = 0
    # objectives
    itc: bool = True
    itm: bool = True
    mlm: bool = True
    hardneg: str = "global"
    hardneg_strategy: str = "sample"
    workers: int = 1
    mask_prob: float = 0.15
    corrupt_mlm: bool = False
    mim_ratio: float = 0.4
    # fine-tuning
    finetune_epochs: int = 5
    finetune_lr: float = 2e-4
    head_input_dim: int = 0     # 0: derive from the task
    # run
    seed: int = 0
    data: str = ""

    def __post_init__(self):
        if self.hardneg not in MINING_MODES:
            raise ConfigError(f"hardneg must be one of {MINING_MODES}")
        if self.hardneg_strategy not in MINING_STRATEGIES:
            raise ConfigError(f"hardneg_strategy must be one of {MINING_STRATEGIES}")
        if not 0.0 <= self.warmup_frac <= 1.0:
            raise ConfigError("warmup_frac must lie in [0, 1]")
        if self.workers < 1 or self.batch_size % self.workers:
            raise ConfigError(f"batch_size {self.batch_size} is not divisible by {self.workers} workers")
        if not (self.itc or self.itm or self.mlm):
            raise ConfigError("at least one of itc, itm, mlm must be on")
        self.model_config()  # validates the architecture

    def model_config(self):
        return ModelConfig(self.layers, self.hidden, self.heads, self.ffn_width, self.vl_layers,
                           self.patch_size, self.image_size, self.channels, self.vocab_size,
                           self.max_text_len, self.attention_mode, self.expert_mode, self.itc_dim)

    def steps(self, stage):
        return getattr(self, f"{stage}_steps")

    def plan(self, stage, steps=None):
        steps = self.steps(stage) if steps is None else steps
        return StagePlan(stage, steps, self.batch_size, self.peak_lr, int(round(self.warmup_frac * steps)))

    def settings(self):
        switches = LossSwitches(self.itc, self.itm, self.mlm, self.hardneg, self.hardneg_strategy)
        return TrainSettings(self.mask_prob, self.mim_ratio, self.corrupt_mlm, self.workers, switches)

    def canonical(self):
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(asdict(self).items()))

    def hash(self):
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    def replace(self, **changes):
        return RunConfig(**{**asdict(self), **changes})


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse_value(key, raw, kind):
    try:
        if kind is bool:
            low = raw.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(raw)
        return kind(raw)
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {kind.__name__}") from exc


_FIELDS = {f.name: type(f.default) for f in fields(RunConfig)}


def parse_config(text, source="<config>"):
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in _FIELDS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw, _FIELDS[key])
    return RunConfig(**values)


def load_config(path):
    try:
        text = open(path, encoding="utf-8").read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, str(path))


def resolve_seed(flag_seed, config_seed, environ=None):
    """Command-line flag, then the environment override, then the config file."""
    if flag_seed is not None:
        return flag_seed
    env = (os.environ if environ is None else environ).get(SEED_ENV)
    if env is not None and env != "":
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return config_seed
