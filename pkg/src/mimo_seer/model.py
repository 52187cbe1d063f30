"""Encoder-decoder video predictor that emits all future frames in one pass.

Frames are cut into non-overlapping patches and lifted to ``C`` channels by a
small conv stem. The encoder stacks blocks of convolutional multi-head
attention (``mha2d``) followed by a 3D-conv feed-forward block (``ffn3d``).
The decoder receives one learned timestep query per future frame, runs
unmasked self-attention over the queries, cross-attends to the encoder memory,
and applies the same feed-forward block. A shared conv head maps every decoder
layer back to pixel space.

Tensors inside the network are laid out ``[B, L, C, H, W]`` (batch, time,
channels, height, width).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional

import numpy as np

from .numerics import (
    Tensor,
    add,
    as_tensor,
    broadcast_to,
    concat,
    conv2d,
    conv_nd,
    glorot_uniform,
    layer_norm,
    make_rng,
    matmul,
    mul,
    sigmoid,
    silu,
    softmax,
    zeros,
)

__all__ = [
    "ModelConfig",
    "ConfigError",
    "AttentionRecord",
    "ForwardResult",
    "Parameters",
    "parameter_shapes",
    "parameter_count",
    "init_params",
    "space_to_depth",
    "depth_to_space",
    "patch_stem",
    "temporal_encoding",
    "mha2d",
    "ffn3d",
    "encoder_forward",
    "decoder_forward",
    "output_head",
    "model_forward",
    "extract_attention",
    "sum_heads",
]

Parameters = Dict[str, Tensor]

ATTENTION_KINDS = ("encoder_self", "decoder_self", "decoder_cross")


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    """Architecture hyperparameters. Defaults are the desk-scale toy model."""

    m: int = 5
    n: int = 5
    C0: int = 1
    H0: int = 16
    W0: int = 16
    patch: int = 4
    C: int = 32
    heads: int = 4
    enc_blocks: int = 2
    dec_blocks: int = 2
    use_2dmha: bool = True
    use_lsb: bool = True
    use_decoder_self_attn: bool = True
    decode_mode: str = "mimo"
    deep_supervision: bool = True
    dk_mode: str = "per_head"
    ln_eps: float = 1e-5

    def __post_init__(self):
        for name in ("m", "n", "C0", "H0", "W0", "patch", "C", "heads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.enc_blocks < 0 or self.dec_blocks < 0:
            raise ConfigError("block counts must be >= 0")
        if self.H0 % self.patch or self.W0 % self.patch:
            raise ConfigError(f"frame {self.H0}x{self.W0} not divisible by patch {self.patch}")
        if self.C % self.heads:
            raise ConfigError(f"C={self.C} not divisible by heads={self.heads}")
        if self.decode_mode not in ("mimo", "miso"):
            raise ConfigError(f"decode_mode must be 'mimo' or 'miso', got {self.decode_mode!r}")
        if self.dk_mode not in ("per_head", "full"):
            raise ConfigError(f"dk_mode must be 'per_head' or 'full', got {self.dk_mode!r}")

    @classmethod
    def moving_mnist(cls, **overrides) -> "ModelConfig":
        """Full-size configuration used for 64x64 Moving MNIST (10 -> 10)."""
        base = dict(m=10, n=10, C0=1, H0=64, W0=64, patch=4, C=128, heads=8, enc_blocks=6, dec_blocks=10)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def H(self) -> int:
        return self.H0 // self.patch

    @property
    def W(self) -> int:
        return self.W0 // self.patch

    @property
    def out_len(self) -> int:
        """Frames emitted per forward pass: n for mimo, 1 for miso."""
        return 1 if self.decode_mode == "miso" else self.n

    @property
    def head_dim(self) -> int:
        return self.C // self.heads


@dataclass
class AttentionRecord:
    """Temporal attention weights of one head: rows are queries, columns keys."""

    kind: str
    layer: int
    head: int
    map: np.ndarray
    sample: int = 0

    @property
    def is_aggregate(self) -> bool:
        return self.head < 0


@dataclass
class ForwardResult:
    prediction: Tensor
    layer_predictions: List[Tensor]
    attention: List[AttentionRecord] = field(default_factory=list)


# -- parameters -----------------------------------------------------------

def _attn_shapes(out: dict, prefix: str, C: int) -> None:
    for proj in ("q", "k", "v", "o"):
        out[f"{prefix}.{proj}.weight"] = (C, C, 1, 1)
        out[f"{prefix}.{proj}.bias"] = (C,)


def _norm_shapes(out: dict, prefix: str, cfg: ModelConfig) -> None:
    out[f"{prefix}.gain"] = (cfg.C, cfg.H, cfg.W)
    out[f"{prefix}.offset"] = (cfg.C, cfg.H, cfg.W)


def _ffn_shapes(out: dict, prefix: str, cfg: ModelConfig) -> None:
    k = 3 if cfg.use_lsb else 1
    for i in (0, 1):
        out[f"{prefix}.conv{i}.weight"] = (cfg.C, cfg.C, k, k, k)
        out[f"{prefix}.conv{i}.bias"] = (cfg.C,)
        _norm_shapes(out, f"{prefix}.norm{i}", cfg)
    _norm_shapes(out, f"{prefix}.out_norm", cfg)


def parameter_shapes(cfg: ModelConfig) -> Dict[str, tuple]:
    """Name -> shape for every learnable tensor, in canonical order."""
    C, p = cfg.C, cfg.patch
    lifted = cfg.C0 * p * p
    s: Dict[str, tuple] = {
        "stem.0.weight": (C, lifted, 3, 3),
        "stem.0.bias": (C,),
        "stem.1.weight": (C, C, 3, 3),
        "stem.1.bias": (C,),
        "time_embed.weight": (cfg.m + cfg.n, C),
    }
    for i in range(cfg.enc_blocks):
        if cfg.use_2dmha:
            _attn_shapes(s, f"enc.{i}.attn", C)
            _norm_shapes(s, f"enc.{i}.attn_norm", cfg)
        _ffn_shapes(s, f"enc.{i}.ffn", cfg)
    for i in range(cfg.dec_blocks):
        if cfg.use_2dmha:
            if cfg.use_decoder_self_attn:
                _attn_shapes(s, f"dec.{i}.self_attn", C)
                _norm_shapes(s, f"dec.{i}.self_norm", cfg)
            _attn_shapes(s, f"dec.{i}.cross_attn", C)
            _norm_shapes(s, f"dec.{i}.cross_norm", cfg)
        _ffn_shapes(s, f"dec.{i}.ffn", cfg)
    s["head.weight"] = (lifted, C, 3, 3)
    s["head.bias"] = (lifted,)
    return s


def parameter_count(cfg: ModelConfig) -> int:
    return sum(math.prod(shape) for shape in parameter_shapes(cfg).values())


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float64) -> Parameters:
    """Glorot-uniform weights and embeddings, zero biases/offsets, unit gains."""
    rng = make_rng(seed)
    params: Parameters = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".gain"):
            t = Tensor(np.ones(shape, dtype=dtype), requires_grad=True)
        elif name.endswith((".bias", ".offset")):
            t = zeros(shape, dtype=dtype, requires_grad=True)
        elif name == "time_embed.weight":
            t = glorot_uniform(shape, shape[0], shape[1], rng, dtype)
        else:
            kvol = math.prod(shape[2:])
            t = glorot_uniform(shape, shape[1] * kvol, shape[0] * kvol, rng, dtype)
        t.name = name
        params[name] = t
    return params


# -- building blocks ------------------------------------------------------

def space_to_depth(x: Tensor, p: int) -> Tensor:
    """[B, L, C0, H0, W0] -> [B, L, C0*p*p, H0/p, W0/p]."""
    B, L, c0, h0, w0 = x.shape
    if h0 % p or w0 % p:
        raise ConfigError(f"frame {h0}x{w0} not divisible by patch {p}")
    h, w = h0 // p, w0 // p
    y = x.reshape(B, L, c0, h, p, w, p).transpose(0, 1, 2, 4, 6, 3, 5)
    return y.reshape(B, L, c0 * p * p, h, w)


def depth_to_space(x: Tensor, p: int) -> Tensor:
    """Inverse of :func:`space_to_depth`."""
    B, L, cp, h, w = x.shape
    c0 = cp // (p * p)
    y = x.reshape(B, L, c0, p, p, h, w).transpose(0, 1, 2, 5, 3, 6, 4)
    return y.reshape(B, L, c0, h * p, w * p)


def _conv_frames(x: Tensor, w: Tensor, b: Optional[Tensor], padding: int) -> Tensor:
    """Apply one 2D conv to every frame of a [B, L, C, H, W] tensor."""
    B, L = x.shape[:2]
    y = conv2d(x.reshape(B * L, *x.shape[2:]), w, b, padding=padding)
    return y.reshape(B, L, *y.shape[1:])


def patch_stem(frames: Tensor, params: Parameters, cfg: ModelConfig) -> Tensor:
    """[B, m, C0, H0, W0] -> [B, m, C, H, W]: space-to-depth then two 3x3 conv + SiLU layers."""
    x = space_to_depth(frames, cfg.patch)
    x = silu(_conv_frames(x, params["stem.0.weight"], params["stem.0.bias"], 1))
    return silu(_conv_frames(x, params["stem.1.weight"], params["stem.1.bias"], 1))


def temporal_encoding(cfg: ModelConfig, params: Parameters) -> Tensor:
    """Timestep table [(m+n), C] broadcast over the H x W grid -> [m+n, C, H, W]."""
    table = params["time_embed.weight"]
    if table.shape != (cfg.m + cfg.n, cfg.C):
        raise ConfigError(f"timestep table shape {table.shape} != {(cfg.m + cfg.n, cfg.C)}")
    return broadcast_to(table.reshape(cfg.m + cfg.n, cfg.C, 1, 1), (cfg.m + cfg.n, cfg.C, cfg.H, cfg.W))


def mha2d(q_in: Tensor, kv_in: Tensor, params: Parameters, prefix: str, cfg: ModelConfig,
          kind: str = "encoder_self", layer: int = 0,
          records: Optional[List[AttentionRecord]] = None) -> Tensor:
    """Convolutional multi-head attention over the time axis.

    Queries, keys and values come from 1x1 convs; each head sees C/h channels
    of every frame flattened to a vector and attends across frames. When
    ``records`` is a list, the per-head weight matrices are appended to it.
    """
    B, Lq, C, H, W = q_in.shape
    Lk = kv_in.shape[1]
    h = cfg.heads
    if C % h:
        raise ConfigError(f"C={C} not divisible by heads={h}")
    d = (C // h) * H * W
    dk = d if cfg.dk_mode == "per_head" else C * H * W

    def proj(x, name):
        return _conv_frames(x, params[f"{prefix}.{name}.weight"], params[f"{prefix}.{name}.bias"], 0)

    def split(t, L):
        return t.reshape(B, L, h, d).transpose(0, 2, 1, 3)

    q = split(proj(q_in, "q"), Lq)
    k = split(proj(kv_in, "k"), Lk)
    v = split(proj(kv_in, "v"), Lk)
    scores = mul(matmul(q, k.transpose(0, 1, 3, 2)), 1.0 / math.sqrt(dk))
    weights = softmax(scores, axis=-1)
    if records is not None:
        for b in range(B):
            for i in range(h):
                records.append(AttentionRecord(kind, layer, i, weights.data[b, i].copy(), sample=b))
    out = matmul(weights, v).transpose(0, 2, 1, 3).reshape(B, Lq, C, H, W)
    return proj(out, "o")


def _norm(x: Tensor, params: Parameters, prefix: str, cfg: ModelConfig) -> Tensor:
    return layer_norm(x, params[f"{prefix}.gain"], params[f"{prefix}.offset"], cfg.ln_eps)


def ffn3d(x: Tensor, params: Parameters, prefix: str, cfg: ModelConfig) -> Tensor:
    """Two (3D conv -> LayerNorm -> SiLU) layers over the (L, H, W) volume, residual, LayerNorm.

    With ``use_lsb`` off the kernels are 1x1x1, i.e. a per-pixel feed-forward.
    """
    pad = 1 if cfg.use_lsb else 0
    # channels-last inside the block; layer norm covers the same (C, H, W) set per timestep
    y = x.transpose(0, 1, 3, 4, 2)
    for i in (0, 1):
        y = conv_nd(y, params[f"{prefix}.conv{i}.weight"], params[f"{prefix}.conv{i}.bias"],
                    padding=pad, channels_last=True)
        gain = params[f"{prefix}.norm{i}.gain"].transpose(1, 2, 0)
        offset = params[f"{prefix}.norm{i}.offset"].transpose(1, 2, 0)
        y = silu(layer_norm(y, gain, offset, cfg.ln_eps))
    return _norm(add(x, y.transpose(0, 1, 4, 2, 3)), params, f"{prefix}.out_norm", cfg)


def _attn_sublayer(x: Tensor, kv: Tensor, params: Parameters, attn: str, norm: str, cfg: ModelConfig,
                   kind: str, layer: int, records) -> Tensor:
    y = mha2d(x, kv, params, attn, cfg, kind, layer, records)
    return _norm(add(x, y), params, norm, cfg)


def _check(t: Tensor, where: str, debug: bool) -> Tensor:
    return t.check_finite(where) if debug else t


def encoder_forward(h0: Tensor, params: Parameters, cfg: ModelConfig,
                    records: Optional[List[AttentionRecord]] = None, debug: bool = False) -> Tensor:
    x = h0
    for i in range(cfg.enc_blocks):
        if cfg.use_2dmha:
            x = _attn_sublayer(x, x, params, f"enc.{i}.attn", f"enc.{i}.attn_norm", cfg,
                               "encoder_self", i, records)
        x = _check(ffn3d(x, params, f"enc.{i}.ffn", cfg), f"enc.{i}", debug)
    return x


def decoder_forward(queries: Tensor, memory: Tensor, params: Parameters, cfg: ModelConfig,
                    records: Optional[List[AttentionRecord]] = None, debug: bool = False) -> List[Tensor]:
    """Run the decoder stack; returns the output of every block.

    Without attention the decoder has no other route to the memory, so each
    block runs the feed-forward over [memory, queries] in time and keeps the
    query positions.
    """
    x = queries
    lq = queries.shape[1]
    outputs = []
    for i in range(cfg.dec_blocks):
        if cfg.use_2dmha:
            if cfg.use_decoder_self_attn:
                x = _attn_sublayer(x, x, params, f"dec.{i}.self_attn", f"dec.{i}.self_norm", cfg,
                                   "decoder_self", i, records)
            x = _attn_sublayer(x, memory, params, f"dec.{i}.cross_attn", f"dec.{i}.cross_norm", cfg,
                               "decoder_cross", i, records)
            x = ffn3d(x, params, f"dec.{i}.ffn", cfg)
        else:
            x = ffn3d(concat([memory, x], axis=1), params, f"dec.{i}.ffn", cfg)[:, -lq:]
        outputs.append(_check(x, f"dec.{i}", debug))
    return outputs


def output_head(feat: Tensor, params: Parameters, cfg: ModelConfig) -> Tensor:
    """[B, L, C, H, W] -> [B, L, C0, H0, W0] in (0, 1): 3x3 conv, depth-to-space, sigmoid."""
    y = _conv_frames(feat, params["head.weight"], params["head.bias"], 1)
    return sigmoid(depth_to_space(y, cfg.patch))


def model_forward(frames, params: Parameters, cfg: ModelConfig, record: bool = False,
                  debug: bool = False) -> ForwardResult:
    """Predict ``cfg.out_len`` future frames from ``frames`` [B, m', C0, H0, W0] in one pass.

    ``m'`` may be shorter than the configured ``m``; the most recent positional
    encodings are then used, so the last observed frame always sits at
    position m.
    """
    dtype = params["head.weight"].dtype
    x = as_tensor(frames if isinstance(frames, Tensor) else np.asarray(frames, dtype=dtype))
    if x.ndim != 5 or x.shape[2:] != (cfg.C0, cfg.H0, cfg.W0):
        raise ConfigError(f"frames shape {x.shape} does not match [B, m, {cfg.C0}, {cfg.H0}, {cfg.W0}]")
    B, m_in = x.shape[:2]
    if not 1 <= m_in <= cfg.m:
        raise ConfigError(f"input length {m_in} outside 1..{cfg.m}")
    records: Optional[List[AttentionRecord]] = [] if record else None

    enc_T = temporal_encoding(cfg, params)
    h0 = add(_check(patch_stem(x, params, cfg), "stem", debug), enc_T[cfg.m - m_in:cfg.m])
    memory = encoder_forward(h0, params, cfg, records, debug)
    q = enc_T[cfg.m:cfg.m + cfg.out_len]
    queries = broadcast_to(q.reshape(1, *q.shape), (B,) + q.shape)
    feats = decoder_forward(queries, memory, params, cfg, records, debug)
    if not feats:
        feats = [queries]
    supervised = feats if cfg.deep_supervision else feats[-1:]
    preds = [output_head(f, params, cfg) for f in supervised]
    return ForwardResult(preds[-1], preds, records or [])


# -- attention analysis ---------------------------------------------------

def extract_attention(records: List[AttentionRecord], kind: Optional[str] = None, layer: Optional[int] = None,
                      head: Optional[int] = None, sample: Optional[int] = None) -> List[AttentionRecord]:
    """Filter recorded attention maps; raises if nothing matches."""
    if not records:
        raise ValueError("no attention records (run model_forward with record=True)")
    if kind is not None and kind not in ATTENTION_KINDS:
        raise ValueError(f"unknown attention kind {kind!r}")
    out = [
        r for r in records
        if (kind is None or r.kind == kind)
        and (layer is None or r.layer == layer)
        and (head is None or r.head == head)
        and (sample is None or r.sample == sample)
    ]
    if not out:
        raise ValueError(f"no attention records match kind={kind} layer={layer} head={head} sample={sample}")
    return out


def sum_heads(records: List[AttentionRecord]) -> List[AttentionRecord]:
    """Elementwise sum over heads for each (kind, layer, sample); the result has head = -1.

    Sums accumulate in float64 in head order.
    """
    groups: Dict[tuple, np.ndarray] = {}
    for r in records:
        key = (r.kind, r.layer, r.sample)
        m = r.map.astype(np.float64)
        groups[key] = m if key not in groups else groups[key] + m
    return [AttentionRecord(kind, layer, -1, total, sample) for (kind, layer, sample), total in groups.items()]
