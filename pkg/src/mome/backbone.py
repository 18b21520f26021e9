"""Mixture-of-modality-experts Transformer encoder.

Each block is pre-LN self-attention followed by a per-position feed-forward
expert. Image positions use the vision expert, text positions the language
expert, and for image-text input the top ``vl_layers`` blocks send every
position through the vision-language expert. Attention is shared across
modalities unless ``attention_mode="separate"``, in which case the bottom
``layers - vl_layers`` blocks keep one attention module per modality.

Parameters live in a flat ``name -> Tensor`` mapping (:class:`ParamStore`).
"""
import contextlib
import math
from dataclasses import asdict, dataclass, fields
from enum import Enum

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .numerics import functional as F
from .numerics import tensor as T
from .numerics.tensor import Tensor

MODES = ("image", "text", "pair")
EXPERT_MODES = ("mome", "standard-transformer", "mome-without-vl-expert")
ATTENTION_MODES = ("shared", "separate")
MASK_BIAS = -1e9


class ExpertKind(str, Enum):
    V = "V-FFN"
    L = "L-FFN"
    VL = "VL-FFN"
    SHARED = "FFN"  # single FFN of the standard-Transformer ablation


_EXPERT_PREFIX = {ExpertKind.V: "ffn_v", ExpertKind.L: "ffn_l", ExpertKind.VL: "ffn_vl", ExpertKind.SHARED: "ffn"}


@dataclass(frozen=True)
class ModelConfig:
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
    ln_eps: float = 1e-6

    def __post_init__(self):
        if self.layers < 1:
            raise ConfigError("layers must be >= 1")
        if not 0 <= self.vl_layers <= self.layers:
            raise ConfigError(f"vl_layers={self.vl_layers} outside [0, {self.layers}]")
        if self.hidden % self.heads:
            raise ConfigError(f"hidden={self.hidden} not divisible by heads={self.heads}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"patch_size={self.patch_size} does not divide image_size={self.image_size}")
        if self.expert_mode not in EXPERT_MODES:
            raise ConfigError(f"expert_mode must be one of {EXPERT_MODES}")
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"attention_mode must be one of {ATTENTION_MODES}")

    @property
    def num_patches(self):
        return (self.image_size // self.patch_size) ** 2

    @property
    def patch_dim(self):
        return self.patch_size * self.patch_size * self.channels

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


def route_expert(mode, segment, layer, config):
    """Expert used by positions of ``segment`` ('image' | 'text') at 1-based ``layer``."""
    if not 1 <= layer <= config.layers:
        raise ContractError(f"layer {layer} outside [1, {config.layers}]")
    if mode not in MODES or segment not in ("image", "text"):
        raise ContractError(f"bad routing query mode={mode!r} segment={segment!r}")
    if mode != "pair" and segment != mode:
        raise ContractError(f"{mode}-only input has no {segment} segment")
    if config.expert_mode == "standard-transformer":
        return ExpertKind.SHARED
    if (mode == "pair" and config.expert_mode == "mome"
            and layer > config.layers - config.vl_layers):
        return ExpertKind.VL
    return ExpertKind.V if segment == "image" else ExpertKind.L


def attention_prefix(segment, layer, config):
    if config.attention_mode == "separate" and layer <= config.layers - config.vl_layers:
        return f"layers.{layer}.attn_{'v' if segment == 'image' else 'l'}"
    return f"layers.{layer}.attn"


def layer_experts(layer, config):
    if config.expert_mode == "standard-transformer":
        return [ExpertKind.SHARED]
    kinds = [ExpertKind.V, ExpertKind.L]
    if config.expert_mode == "mome" and layer > config.layers - config.vl_layers:
        kinds.append(ExpertKind.VL)
    return kinds


def expert_prefix(kind, layer):
    return f"layers.{layer}.{_EXPERT_PREFIX[kind]}"


class ParamStore(dict):
    """Parameter mapping that can log which entries a forward pass reads."""

    def __init__(self, *args, **kwargs):
        super().__init__(*args, **kwargs)
        self._recorders = []

    def __getitem__(self, name):
        value = dict.__getitem__(self, name)
        for rec in self._recorders:
            rec[name] = value
        return value

    @contextlib.contextmanager
    def record(self):
        """Yield a dict filled with ``name -> Tensor`` for every parameter read."""
        rec = {}
        self._recorders.append(rec)
        try:
            yield rec
        finally:
            self._recorders.remove(rec)


def _param_shapes(config):
    d, f = config.hidden, config.ffn_width
    shapes = {
        "img.patch.weight": (config.patch_dim, d),
        "img.patch.bias": (d,),
        "img.cls": (d,),
        "img.pos": (config.num_patches + 1, d),
        "img.type": (d,),
        "img.mask": (d,),
        "txt.word": (config.vocab_size, d),
        "txt.pos": (config.max_text_len, d),
        "txt.type": (d,),
    }
    for layer in range(1, config.layers + 1):
        prefixes = {attention_prefix(s, layer, config) for s in ("image", "text")}
        for p in sorted(prefixes):
            shapes[f"{p}.ln.weight"] = (d,)
            shapes[f"{p}.ln.bias"] = (d,)
            for proj in ("q", "k", "v", "o"):
                shapes[f"{p}.{proj}.weight"] = (d, d)
                shapes[f"{p}.{proj}.bias"] = (d,)
        for kind in layer_experts(layer, config):
            p = expert_prefix(kind, layer)
            shapes[f"{p}.ln.weight"] = (d,)
            shapes[f"{p}.ln.bias"] = (d,)
            shapes[f"{p}.fc1.weight"] = (d, f)
            shapes[f"{p}.fc1.bias"] = (f,)
            shapes[f"{p}.fc2.weight"] = (f, d)
            shapes[f"{p}.fc2.bias"] = (d,)
    shapes.update({
        "final_ln.weight": (d,),
        "final_ln.bias": (d,),
        "itc.img_proj": (d, config.itc_dim),
        "itc.txt_proj": (d, config.itc_dim),
        "itc.log_sigma": (),
        "itm.weight": (d, 2),
        "itm.bias": (2,),
        "mlm.dense.weight": (d, d),
        "mlm.dense.bias": (d,),
        "mlm.ln.weight": (d,),
        "mlm.ln.bias": (d,),
        "mlm.decoder.weight": (d, config.vocab_size),
        "mlm.decoder.bias": (config.vocab_size,),
        "mim.weight": (d, config.patch_dim),
        "mim.bias": (config.patch_dim,),
    })
    return shapes


def truncated_normal(rng, shape, std=0.02, bound=2.0):
    z = rng.standard_normal(shape)
    bad = np.abs(z) > bound
    while bad.any():
        z[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(z) > bound
    return z * std


INITIAL_SIGMA = 0.07


def init_params(config, seed=0, dtype=np.float32):
    """Truncated-normal(0.02) weights, zero biases, unit norm gains, sigma=0.07."""
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in _param_shapes(config).items():
        if name == "itc.log_sigma":
            arr = np.array(math.log(INITIAL_SIGMA))
        elif name.endswith("ln.weight"):
            arr = np.ones(shape)
        elif name.endswith(".bias"):
            arr = np.zeros(shape)
        else:
            arr = truncated_normal(rng, shape)
        out[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)
    return out


@dataclass
class EncodedSequence:
    hidden: Tensor          # (B, T, D)
    mode: str
    text_len: int
    image_len: int

    @property
    def segments(self):
        """``[(segment, start, end)]`` covering every position once."""
        if self.mode == "image":
            return [("image", 0, self.image_len)]
        if self.mode == "text":
            return [("text", 0, self.text_len)]
        return [("text", 0, self.text_len), ("image", self.text_len, self.text_len + self.image_len)]

    @property
    def text_cls_index(self):
        return None if self.mode == "image" else 0

    @property
    def image_cls_index(self):
        if self.mode == "text":
            return None
        return 0 if self.mode == "image" else self.text_len

    @property
    def text_cls(self):
        return self.hidden[:, 0]

    @property
    def image_cls(self):
        return self.hidden[:, self.image_cls_index]

    def text_states(self):
        return self.hidden[:, : self.text_len] if self.mode == "pair" else self.hidden


class MoMETransformer:
    def __init__(self, config=None, params=None, seed=0, dtype=np.float32):
        self.config = config or ModelConfig()
        if params is None:
            params = init_params(self.config, seed, dtype)
        self.params = ParamStore(params)
        self.forward_count = 0

    # -- construction helpers ---------------------------------------------
    @classmethod
    def from_arrays(cls, config, arrays, dtype=None):
        expected = _param_shapes(config)
        missing = set(expected) - set(arrays)
        if missing:
            raise ConfigError(f"parameters missing for this config: {sorted(missing)[:5]}")
        params = {}
        for name, arr in arrays.items():
            arr = np.array(arr, dtype=dtype or arr.dtype, copy=True)
            if name in expected and arr.shape != tuple(expected[name]):
                raise DimensionError(f"{name}: shape {arr.shape} != expected {expected[name]}")
            params[name] = Tensor(arr, requires_grad=True, name=name)
        return cls(config, params)

    def arrays(self):
        return {n: t.data.copy() for n, t in dict.items(self.params)}

    def astype(self, dtype):
        return MoMETransformer.from_arrays(self.config, self.arrays(), dtype=dtype)

    def zero_grad(self):
        for t in dict.values(self.params):
            t.grad = None

    @property
    def dtype(self):
        return dict.__getitem__(self.params, "img.cls").dtype

    def _const(self, x):
        return Tensor(np.asarray(x, dtype=self.dtype))

    # -- input representations --------------------------------------------
    def embed_image(self, patches, patch_mask=None):
        """``[I_CLS, V x_1, ..., V x_N] + V_pos + V_type`` -> (B, N+1, D)."""
        p = self.params
        cfg = self.config
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim != 3 or patches.shape[-1] != cfg.patch_dim or patches.shape[1] != cfg.num_patches:
            raise DimensionError(
                f"patches shape {patches.shape} != (B, {cfg.num_patches}, {cfg.patch_dim})")
        b = patches.shape[0]
        x = T.linear(self._const(patches), p["img.patch.weight"], p["img.patch.bias"])
        if patch_mask is not None:
            m = self._const(np.asarray(patch_mask, dtype=self.dtype)[..., None])
            x = x * (1.0 - m) + m * p["img.mask"]
        cls = T.add(T.reshape(p["img.cls"], (1, 1, cfg.hidden)), self._const(np.zeros((b, 1, cfg.hidden))))
        h = T.concat([cls, x], axis=1)
        return h + p["img.pos"] + p["img.type"]

    def embed_text(self, token_ids):
        """``[w_T_CLS, w_1, ..., w_M, w_T_SEP] + T_pos + T_type`` -> (B, M+2, D)."""
        p = self.params
        ids = np.asarray(token_ids)
        if ids.ndim != 2:
            raise DimensionError(f"token ids must be (B, T), got {ids.shape}")
        if ids.shape[1] > self.config.max_text_len:
            raise DimensionError(f"text length {ids.shape[1]} exceeds max_text_len {self.config.max_text_len}")
        if ids.size and (ids.min() < 0 or ids.max() >= self.config.vocab_size):
            raise DimensionError(f"token id outside [0, {self.config.vocab_size})")
        h = T.embedding(p["txt.word"], ids)
        return h + p["txt.pos"][: ids.shape[1]] + p["txt.type"]

    @staticmethod
    def concat_vl(h_text, h_image):
        """Text block first, image block second; nothing else is added."""
        if h_text.shape[-1] != h_image.shape[-1]:
            raise DimensionError(f"hidden size mismatch: {h_text.shape} vs {h_image.shape}")
        return T.concat([h_text, h_image], axis=1)

    # -- blocks -----------------------------------------------------------
    def _attention(self, h, layer, segments, key_bias):
        p = self.params
        cfg = self.config
        b, t, d = h.shape
        nh = cfg.heads
        prefixes = [attention_prefix(seg, layer, cfg) for seg, _, _ in segments]
        shared = len(set(prefixes)) == 1

        def project(x, prefix, proj):
            return T.linear(x, p[f"{prefix}.{proj}.weight"], p[f"{prefix}.{proj}.bias"])

        def normed(x, prefix):
            return F.layer_norm(x, p[f"{prefix}.ln.weight"], p[f"{prefix}.ln.bias"], cfg.ln_eps)

        if shared:
            pre = prefixes[0]
            x = normed(h, pre)
            w = T.concat([p[f"{pre}.{n}.weight"] for n in "qkv"], axis=1)
            bias = T.concat([p[f"{pre}.{n}.bias"] for n in "qkv"], axis=0)
            qkv = T.linear(x, w, bias)
        else:
            parts = {"q": [], "k": [], "v": []}
            for (_, s, e), prefix in zip(segments, prefixes):
                x = normed(h[:, s:e], prefix)
                for n in parts:
                    parts[n].append(project(x, prefix, n))
            qkv = T.concat([T.concat(parts[n], axis=1) for n in "qkv"], axis=-1)
        ctx = F.attention(qkv, nh, key_bias)
        if shared:
            return project(ctx, prefixes[0], "o")
        return T.concat([project(ctx[:, s:e], prefix, "o")
                         for (_, s, e), prefix in zip(segments, prefixes)], axis=1)

    def _ffn(self, x, kind, layer):
        p = self.params
        pre = expert_prefix(kind, layer)
        h = F.layer_norm(x, p[f"{pre}.ln.weight"], p[f"{pre}.ln.bias"], self.config.ln_eps)
        h = F.gelu(T.linear(h, p[f"{pre}.fc1.weight"], p[f"{pre}.fc1.bias"]))
        return T.linear(h, p[f"{pre}.fc2.weight"], p[f"{pre}.fc2.bias"])

    def mome_block(self, h, layer, mode, segments, key_bias=None):
        """One block: ``H' = MSA(LN(H)) + H``; ``H_out = MoME-FFN(LN(H')) + H'``."""
        h = h + self._attention(h, layer, segments, key_bias)
        routed = [(route_expert(mode, seg, layer, self.config), s, e) for seg, s, e in segments]
        if len({kind for kind, _, _ in routed}) == 1:
            out = self._ffn(h, routed[0][0], layer)
        else:
            out = T.concat([self._ffn(h[:, s:e], kind, layer) for kind, s, e in routed], axis=1)
        return h + out

    # -- encoders ---------------------------------------------------------
    def encode(self, mode, patches=None, token_ids=None, text_mask=None, patch_mask=None):
        """Run the embeddings and all blocks for ``mode`` in {'image', 'text', 'pair'}."""
        if mode not in MODES:
            raise ContractError(f"unknown mode {mode!r}")
        needs_image = mode in ("image", "pair")
        needs_text = mode in ("text", "pair")
        if needs_image != (patches is not None) or needs_text != (token_ids is not None):
            raise ContractError(f"mode {mode!r} does not match the supplied inputs")
        text_len = image_len = 0
        bias_parts = []
        if needs_text:
            h_text = self.embed_text(token_ids)
            b, text_len = h_text.shape[:2]
            if text_mask is not None:
                bias_parts.append(np.where(np.asarray(text_mask, dtype=bool), 0.0, MASK_BIAS))
            else:
                bias_parts.append(np.zeros((b, text_len)))
        if needs_image:
            h_img = self.embed_image(patches, patch_mask)
            b, image_len = h_img.shape[:2]
            bias_parts.append(np.zeros((b, image_len)))
        if mode == "pair":
            if h_text.shape[0] != h_img.shape[0]:
                raise DimensionError(f"pair batch mismatch: {h_text.shape[0]} texts, {h_img.shape[0]} images")
            h = self.concat_vl(h_text, h_img)
        else:
            h = h_text if mode == "text" else h_img
        key_bias = None
        if needs_text and text_mask is not None and not np.all(text_mask):
            bias = np.concatenate(bias_parts, axis=1)
            key_bias = bias.astype(self.dtype)
        enc = EncodedSequence(h, mode, text_len, image_len)
        segments = enc.segments
        for layer in range(1, self.config.layers + 1):
            h = self.mome_block(h, layer, mode, segments, key_bias)
        p = self.params
        h = F.layer_norm(h, p["final_ln.weight"], p["final_ln.bias"], self.config.ln_eps)
        self.forward_count += h.shape[0]
        return EncodedSequence(h, mode, text_len, image_len)

    def project_cls(self, cls, modality):
        """Linear map to the contrastive space, then unit normalisation."""
        name = "itc.img_proj" if modality == "image" else "itc.txt_proj"
        return F.l2_normalize(T.matmul(cls, self.params[name]))

    def sigma(self):
        """Contrastive temperature ``clamp(exp(log_sigma), 0.01, 100)``."""
        return T.clamp(T.exp(self.params["itc.log_sigma"]), 0.01, 100.0)
