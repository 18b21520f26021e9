"""Stagewise pretraining: image-only, then text-only, then joint image-text.

The text stage freezes self-attention and the vision side; the joint stage
trains everything. Frozen tensors still receive gradients, which are simply
never applied, so they come out of a stage byte-for-byte unchanged.
"""
import math
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .backbone import ModelConfig, MoMETransformer
from .checkpoint import Checkpoint
from .data import Corpus, Tokenizer, block_patch_mask, make_batch, pad_ids, patchify_batch, whole_word_mask
from .errors import ConfigError, ContractError, NonFiniteError, StageOrderError
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.optim import AdamW
from .numerics.tensor import backward
from .objectives import LossSwitches, combined_pretrain_loss, mlm_loss

STAGES = ("vision", "text", "vl")
_ALIASES = {"vision-language": "vl", "image": "vision", "language": "text"}
DEFAULT_STEPS = {"vision": 2000, "text": 1000, "vl": 3000}
TEXT_STAGE_MAX_LEN = 24


class FreshInitWarning(UserWarning):
    """Joint pretraining started from random weights."""


def canonical_stage(stage):
    stage = _ALIASES.get(stage, stage)
    if stage not in STAGES:
        raise ContractError(f"unknown stage {stage!r}; expected one of {STAGES}")
    return stage


def _is_attention(name):
    return ".attn" in name


def freeze_mask(stage, names, config=None):
    """Names left untouched by the optimizer during ``stage``."""
    stage = canonical_stage(stage)
    names = list(names)
    if stage == "vl":
        return frozenset()
    if stage == "vision":
        def trained(n):
            return (_is_attention(n) or ".ffn_v." in n or ".ffn." in n or n.startswith(("img.", "mim.", "final_ln.")))
    else:
        def trained(n):
            return ".ffn_l." in n or n.startswith(("txt.", "mlm."))
    return frozenset(n for n in names if not trained(n))


@dataclass
class StagePlan:
    stage: str
    steps: int
    batch_size: int = 32
    peak_lr: float = 1e-3
    warmup_steps: int = None
    frozen: frozenset = field(default_factory=frozenset)

    def __post_init__(self):
        self.stage = canonical_stage(self.stage)
        if self.steps < 0 or self.batch_size < 1:
            raise ConfigError("steps must be >= 0 and batch_size >= 1")
        if self.warmup_steps is None:
            self.warmup_steps = int(round(0.1 * self.steps))
        if not 0 <= self.warmup_steps <= self.steps:
            raise ConfigError(f"warmup_steps {self.warmup_steps} outside [0, {self.steps}]")

    @classmethod
    def default(cls, stage, **overrides):
        stage = canonical_stage(stage)
        return cls(stage, overrides.pop("steps", DEFAULT_STEPS[stage]), **overrides)


def lr_schedule(step, plan):
    """Linear warmup from 0 to ``peak_lr``, then linear decay to 0 at ``plan.steps``."""
    if not 0 <= step <= plan.steps:
        raise ContractError(f"step {step} outside [0, {plan.steps}]")
    w = plan.warmup_steps
    if step < w:
        return plan.peak_lr * step / w
    if plan.steps == w:
        return plan.peak_lr
    return plan.peak_lr * (plan.steps - step) / (plan.steps - w)


@dataclass
class TrainSettings:
    mask_prob: float = 0.15
    mim_ratio: float = 0.4
    corrupt_mlm: bool = False
    workers: int = 1
    switches: LossSwitches = field(default_factory=LossSwitches)
    text_max_len: int = TEXT_STAGE_MAX_LEN


@dataclass
class TrainState:
    model: MoMETransformer
    optimizer: AdamW
    step: int
    rng: np.random.Generator
    stage: str


# -- stage losses -------------------------------------------------------------
def mim_targets(patches, eps=1e-6):
    """Per-patch standardised pixels."""
    mu = patches.mean(axis=-1, keepdims=True)
    sd = patches.std(axis=-1, keepdims=True)
    return (patches - mu) / (sd + eps)


def mim_loss(encoding, patch_mask, targets, params):
    """MSE between regressed and target pixels over masked patches only."""
    patch_mask = np.asarray(patch_mask, dtype=bool)
    if not patch_mask.any():
        raise ContractError("masked image modelling needs at least one masked patch")
    d = encoding.hidden.shape[-1]
    states = encoding.hidden[:, 1:]  # drop I_CLS
    rows = np.flatnonzero(patch_mask.reshape(-1))
    picked = T.reshape(states, (-1, d))[rows]
    pred = T.linear(picked, params["mim.weight"], params["mim.bias"])
    tgt = np.asarray(targets).reshape(-1, targets.shape[-1])[rows]
    return F.mse_loss(pred, tgt.astype(pred.dtype))


def text_only_corpus(captions, n, seed, max_len=TEXT_STAGE_MAX_LEN):
    """Text-only sentences: two random captions joined by "and"."""
    rng = np.random.default_rng([seed, 7])
    tok = Tokenizer(max_len=max_len)
    pick = rng.integers(0, len(captions), size=(n, 2))
    return [tok.encode(f"{captions[a]} and {captions[b]}") for a, b in pick]


class _Sampler:
    """Reshuffled epochs; drops the ragged tail of each epoch."""

    def __init__(self, n, batch_size, rng):
        if n < batch_size:
            raise ContractError(f"{n} examples cannot fill a batch of {batch_size}")
        self.n, self.b, self.rng = n, batch_size, rng
        self.order, self.pos = rng.permutation(n), 0

    def next(self):
        if self.pos + self.b > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.b]
        self.pos += self.b
        return idx


def _vision_loss(model, patches, targets, settings, rng):
    cfg = model.config
    grid = cfg.image_size // cfg.patch_size
    mask = np.stack([block_patch_mask(grid, grid, settings.mim_ratio, rng) for _ in range(len(patches))])
    enc = model.encode("image", patches=patches, patch_mask=mask)
    loss = mim_loss(enc, mask, targets, model.params)
    return loss, {"mim": float(loss.data)}


def _text_loss(model, tokens, settings, rng):
    masked, labels = zip(*(whole_word_mask(t, settings.mask_prob, rng, settings.corrupt_mlm,
                                           model.config.vocab_size) for t in tokens))
    ids, text_mask = pad_ids([m.ids for m in masked])
    labels, _ = pad_ids(labels, pad=-100)
    enc = model.encode("text", token_ids=ids, text_mask=text_mask)
    loss, _ = mlm_loss(enc.hidden, labels, model.params)
    return loss, {"mlm": float(loss.data)}


# -- driver -------------------------------------------------------------------
def _check_order(stage, init_stage):
    if stage == "vision":
        if init_stage not in (None, "init"):
            raise StageOrderError(f"vision stage must start from a fresh model, got a {init_stage!r} checkpoint")
    elif stage == "text":
        if init_stage != "vision":
            raise StageOrderError("text stage requires a vision-stage checkpoint")
    elif init_stage in (None, "init"):
        warnings.warn("joint pretraining from random initialisation", FreshInitWarning, stacklevel=3)
    elif init_stage not in ("vision", "text"):
        raise StageOrderError(f"joint stage cannot follow a {init_stage!r} checkpoint")


def _check_modality(stage, data):
    if stage == "text":
        ok = isinstance(data, Corpus) or (isinstance(data, (list, tuple)) and all(hasattr(t, "word_ids") for t in data))
    else:
        ok = isinstance(data, Corpus) and (stage == "vision" or len(data.captions) == len(data.images))
    if not ok:
        raise ContractError(f"data does not provide the modality needed by the {stage} stage")


def prepare_pairs(corpus, config, max_len=None):
    tok = Tokenizer(max_len=max_len or config.max_text_len)
    patches = patchify_batch(corpus.images, config.patch_size)
    patches = patches.patches if hasattr(patches, "patches") else patches
    return patches.astype(np.float32), [tok.encode(c) for c in corpus.captions]


def train_stage(plan, data, init=None, seed=0, config=None, settings=None,
                on_step=None, checkpoint_every=0, on_checkpoint=None):
    """Run ``plan.steps`` optimizer steps of ``plan.stage`` and return a checkpoint.

    ``init`` is a :class:`Checkpoint` or ``None`` for a fresh model built
    from ``config``. ``data`` is a :class:`Corpus`; the text stage also
    accepts a list of token sequences. ``on_step`` receives one metrics dict
    per step.
    """
    settings = settings or TrainSettings()
    stage = plan.stage
    init_stage = None if init is None else init.stage
    _check_order(stage, init_stage)
    _check_modality(stage, data)
    if init is None:
        config = config or ModelConfig()
        model = MoMETransformer(config, seed=seed)
        history = []
    else:
        cfg = ModelConfig.from_dict(init.config)
        if config is not None and config != cfg:
            raise ConfigError("model config differs from the checkpoint's")
        config = cfg
        model = MoMETransformer.from_arrays(config, init.params, dtype=np.float32)
        history = list(init.extra.get("history", []))
    frozen = plan.frozen or freeze_mask(stage, dict.keys(model.params), config)
    plan = replace(plan, frozen=frozenset(frozen))
    trainable = [n for n in dict.keys(model.params) if n not in plan.frozen]
    opt = AdamW(dict(model.params), trainable)
    rng = np.random.default_rng([seed, STAGES.index(stage)])
    state = TrainState(model, opt, 0, rng, stage)

    if stage == "vision":
        patches, _ = prepare_pairs(data, config)
        targets = mim_targets(patches)
        n = len(patches)
    elif stage == "text":
        if isinstance(data, Corpus):
            tokens = text_only_corpus(data.captions, max(len(data), plan.batch_size), seed,
                                      min(settings.text_max_len, config.max_text_len))
        else:
            tokens = list(data)
        n = len(tokens)
    else:
        patches, tokens = prepare_pairs(data, config)
        n = len(tokens)
    sampler = _Sampler(n, plan.batch_size, rng) if plan.steps else None

    for s in range(plan.steps):
        idx = sampler.next()
        lr = lr_schedule(s + 1, plan)
        model.zero_grad()
        if stage == "vision":
            loss, parts = _vision_loss(model, patches[idx], targets[idx], settings, rng)
        elif stage == "text":
            loss, parts = _text_loss(model, [tokens[i] for i in idx], settings, rng)
        else:
            batch = make_batch([(patches[i], tokens[i]) for i in idx], settings.workers,
                               settings.mask_prob, rng, settings.corrupt_mlm)
            loss, parts = combined_pretrain_loss(model, batch, rng, settings.switches)
        value = float(loss.data)
        if not math.isfinite(value):
            raise NonFiniteError(f"{stage} loss became {value} at step {s + 1}")
        backward(loss)
        opt.step(lr)
        state.step = s + 1
        if on_step is not None:
            on_step({"stage": stage, "step": s + 1, "lr": lr, "loss": value, **parts})
        if checkpoint_every and on_checkpoint is not None and (s + 1) % checkpoint_every == 0 and s + 1 < plan.steps:
            on_checkpoint(_snapshot(state, init, config, seed, history, plan))
    return _snapshot(state, init, config, seed, history, plan)


def _snapshot(state, init, config, seed, history, plan):
    extra = dict(init.extra) if init is not None else {}
    extra["history"] = history + [{"stage": plan.stage, "steps": state.step}]
    return Checkpoint(config.to_dict(), state.model.arrays(), plan.stage, state.step, seed, extra)


def run_pretraining(corpus, seed, config=None, steps=None, batch_size=32, settings=None, on_step=None,
                    stages=STAGES):
    """Chain the stages and return ``{stage: checkpoint}``."""
    steps = steps or DEFAULT_STEPS
    out = {}
    ckpt = None
    for stage in stages:
        plan = StagePlan.default(stage, steps=steps[stage], batch_size=batch_size)
        ckpt = train_stage(plan, corpus, ckpt, seed=seed, config=config, settings=settings, on_step=on_step)
        out[stage] = ckpt
    return out
