"""MFFormer network: 2D/3D convolutional encoders joined by fusion transformer
modules (FTMs), followed by a convolution + MLP classification head."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Module, Parameter
from .tensor import (
    Tensor,
    concatenate,
    flatten,
    matmul,
    reduce_mean,
    repeat_axis,
    reshape,
    slice_axis,
    softmax_rows,
    split,
    transpose,
)

FUSION_STRATEGIES = ("none_t1w", "none_fmri", "dim3", "dim4")
PLACEMENTS = ("last1", "last3")

# ablation rows: name -> (fusion_strategy, ftm_placement)
VARIANTS = {
    "baseline1": ("none_t1w", "last1"),
    "baseline2": ("none_fmri", "last1"),
    "3d-1way": ("dim3", "last1"),
    "3d-3way": ("dim3", "last3"),
    "4d-1way": ("dim4", "last1"),
    "4d-3way": ("dim4", "last3"),
}
VARIANT_LABELS = {
    "baseline1": "baseline 1",
    "baseline2": "baseline 2",
    "3d-1way": "3D 1-way",
    "3d-3way": "3D 3-way",
    "4d-1way": "4D 1-way",
    "4d-3way": "4D 3-way",
}


class ConfigError(ValueError):
    pass


def _strict_from_dict(cls, doc: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {unknown}")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name in doc:
            v = doc[f.name]
            kwargs[f.name] = tuple(v) if isinstance(v, list) else v
    return cls(**kwargs)


@dataclass
class ModelConfig:
    base_channels: int = 8
    n_encoder_layers: int = 5
    fmri_shape: tuple = (124, 1000)
    t1w_shape: tuple = (256, 256, 188)
    attention_dim: int = 128
    n_heads: int = 1
    fusion_strategy: str = "dim4"
    ftm_placement: str = "last3"
    mlp_hidden: int = 20
    n_classes: int = 2
    kernel_size: int = 3
    head_kernel_size: int = 3
    leaky_slope: float = nn.LEAKY_SLOPE
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    residual_on_embedded: bool = False
    pos_embedding_std: float = 0.02
    dtype: str = "float64"

    def __post_init__(self):
        self.fmri_shape = tuple(int(s) for s in self.fmri_shape)
        self.t1w_shape = tuple(int(s) for s in self.t1w_shape)
        self.validate()

    @classmethod
    def desk(cls, **overrides) -> "ModelConfig":
        """Small shapes for CPU experiments."""
        base = dict(fmri_shape=(64, 100), t1w_shape=(32, 32, 32), base_channels=8, attention_dim=32)
        base.update(overrides)
        return cls(**base)

    @classmethod
    def for_variant(cls, variant: str, **overrides) -> "ModelConfig":
        if variant not in VARIANTS:
            raise ConfigError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        fusion, placement = VARIANTS[variant]
        return cls(fusion_strategy=fusion, ftm_placement=placement, **overrides)

    def validate(self) -> None:
        if self.fusion_strategy not in FUSION_STRATEGIES:
            raise ConfigError(f"fusion_strategy must be one of {FUSION_STRATEGIES}")
        if self.ftm_placement not in PLACEMENTS:
            raise ConfigError(f"ftm_placement must be one of {PLACEMENTS}")
        if len(self.fmri_shape) != 2 or len(self.t1w_shape) != 3:
            raise ConfigError("fmri_shape must be (t, n_roi) and t1w_shape (W, H, D)")
        if self.n_encoder_layers < 3 and self.ftm_placement == "last3":
            raise ConfigError("last3 placement needs at least 3 encoder layers")
        if self.n_classes != 2:
            raise ConfigError("only binary heads are supported")
        if self.base_channels < 1 or self.attention_dim < 1 or self.mlp_hidden < 1:
            raise ConfigError("channel, attention and hidden widths must be positive")
        if self.attention_dim % self.n_heads:
            raise ConfigError("attention_dim must be divisible by n_heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError("dtype must be 'float32' or 'float64'")
        if self.kernel_size % 2 == 0 or self.head_kernel_size % 2 == 0:
            raise ConfigError("kernel sizes must be odd")
        min_extent = 2 ** (self.n_encoder_layers - 1)
        for name, shape in (("fmri_shape", self.fmri_shape), ("t1w_shape", self.t1w_shape)):
            if any(s < min_extent for s in shape):
                raise ConfigError(f"{name} {shape}: every extent must be >= {min_extent}")

    @property
    def uses_fmri(self) -> bool:
        return self.fusion_strategy != "none_t1w"

    @property
    def uses_t1w(self) -> bool:
        return self.fusion_strategy != "none_fmri"

    @property
    def fused(self) -> bool:
        return self.fusion_strategy in ("dim3", "dim4")

    def stage_channels(self) -> list[int]:
        return [self.base_channels * 2**i for i in range(self.n_encoder_layers)]

    def ftm_stages(self) -> list[int]:
        """0-based encoder stages followed by an FTM."""
        if not self.fused:
            return []
        last = self.n_encoder_layers - 1
        return [last] if self.ftm_placement == "last1" else [last - 2, last - 1, last]

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["fmri_shape"] = list(self.fmri_shape)
        d["t1w_shape"] = list(self.t1w_shape)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "ModelConfig":
        return _strict_from_dict(cls, doc)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ModelConfig":
        return cls.from_dict(json.loads(text))


def pooled_shape(shape) -> tuple:
    return tuple(s // 2 if s >= 2 else 1 for s in shape)


def stage_shapes(input_shape, n_layers: int) -> list[tuple]:
    """Spatial extents after each conv+pool stage."""
    shapes, s = [], tuple(input_shape)
    for _ in range(n_layers):
        s = pooled_shape(s)
        shapes.append(s)
    return shapes


# ---------------------------------------------------------------------------
# fusion transformer pieces


@dataclass
class TokenMatrix:
    tokens: Tensor  # (B, n_tokens, C); first half fMRI, second half T1w
    aligned_shape: tuple

    @property
    def n_tokens(self) -> int:
        return self.tokens.shape[1]


@dataclass
class FusionState:
    fmri: Tensor
    t1w: Tensor
    tokens: TokenMatrix
    attended: TokenMatrix | None = None
    fmri_out: Tensor | None = None
    t1w_out: Tensor | None = None


def dimension_up(fmri: Tensor, depth: int) -> Tensor:
    """(B, C, W, H) -> (B, C, W, H, depth) by repetition."""
    if fmri.ndim != 4:
        raise ValueError(f"dimension_up expects (B, C, W, H), got {fmri.shape}")
    return repeat_axis(fmri, 4, depth)


def dimension_down(x: Tensor) -> Tensor:
    """Average the trailing depth axis away."""
    return reduce_mean(x, 4)


def _to_tokens(x: Tensor) -> Tensor:
    b, c = x.shape[:2]
    return transpose(reshape(x, (b, c, -1)), (0, 2, 1))


def _from_tokens(tokens: Tensor, spatial: tuple) -> Tensor:
    b, _, c = tokens.shape
    return reshape(transpose(tokens, (0, 2, 1)), (b, c) + tuple(spatial))


def align_and_stack(fmri: Tensor, t1w: Tensor, strategy: str) -> TokenMatrix:
    if fmri.shape[1] != t1w.shape[1]:
        raise ValueError(f"channel mismatch between branches: {fmri.shape[1]} vs {t1w.shape[1]}")
    if fmri.ndim != 4 or t1w.ndim != 5:
        raise ValueError(f"expected fMRI (B,C,W,H) and T1w (B,C,W,H,D), got {fmri.shape}, {t1w.shape}")
    if strategy == "dim4":
        f = dimension_up(fmri, t1w.shape[4])
        s = t1w
    elif strategy == "dim3":
        f = fmri
        s = dimension_down(t1w)
    else:
        raise ValueError(f"no token alignment for strategy {strategy!r}")
    common = tuple(min(a, b) for a, b in zip(f.shape[2:], s.shape[2:]))
    f = nn.adaptive_avg_pool_nd(f, common)
    s = nn.adaptive_avg_pool_nd(s, common)
    return TokenMatrix(concatenate([_to_tokens(f), _to_tokens(s)], axis=1), common)


def ftm_attention(
    tok: TokenMatrix,
    w_q: Tensor,
    w_k: Tensor,
    w_v: Tensor,
    w_o: Tensor,
    position: Tensor,
    n_heads: int = 1,
    residual_on_embedded: bool = False,
) -> TokenMatrix:
    """Residual scaled dot-product self-attention over the stacked tokens."""
    x = tok.tokens
    b, n, c = x.shape
    if w_q.shape[0] != c:
        raise ValueError(f"token width {c} does not match projection rows {w_q.shape[0]}")
    if n > position.shape[0]:
        raise ValueError(f"{n} tokens exceed the position table of {position.shape[0]}")
    emb = x + slice_axis(position, 0, n, axis=0)
    q, k, v = matmul(emb, w_q), matmul(emb, w_k), matmul(emb, w_v)
    d = q.shape[-1]
    dh = d // n_heads
    if n_heads > 1:
        q, k, v = (transpose(reshape(t, (b, n, n_heads, dh)), (0, 2, 1, 3)) for t in (q, k, v))
    scores = matmul(q, transpose(k, (0, 1, 3, 2) if n_heads > 1 else (0, 2, 1))) * (1.0 / math.sqrt(dh))
    ctx = matmul(softmax_rows(scores), v)
    if n_heads > 1:
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, n, d))
    base = emb if residual_on_embedded else x
    return TokenMatrix(base + matmul(ctx, w_o), tok.aligned_shape)


def ftm_restore(out: TokenMatrix, fmri: Tensor, t1w: Tensor, strategy: str) -> tuple[Tensor, Tensor]:
    """Split attended tokens, resize each half back to its branch and add it
    to the branch features."""
    half = int(np.prod(out.aligned_shape))
    if out.n_tokens != 2 * half:
        raise ValueError(f"{out.n_tokens} tokens inconsistent with aligned shape {out.aligned_shape}")
    ft, st = split(out.tokens, [half, half], axis=1)
    f_map = _from_tokens(ft, out.aligned_shape)
    s_map = _from_tokens(st, out.aligned_shape)
    wf, hf = fmri.shape[2:]
    ws, hs, ds = t1w.shape[2:]
    if strategy == "dim4":
        f_back = dimension_down(nn.interpolate_nd(f_map, (wf, hf, ds)))
        s_back = nn.interpolate_nd(s_map, (ws, hs, ds))
    elif strategy == "dim3":
        f_back = nn.interpolate_nd(f_map, (wf, hf))
        s_back = dimension_up(nn.interpolate_nd(s_map, (ws, hs)), ds)
    else:
        raise ValueError(f"no restore path for strategy {strategy!r}")
    return fmri + f_back, t1w + s_back


class FusionTransformer(Module):
    def __init__(self, channels: int, attention_dim: int, max_tokens: int, strategy: str,
                 n_heads: int = 1, residual_on_embedded: bool = False, pos_std: float = 0.02, rng=None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.strategy = strategy
        self.n_heads = n_heads
        self.residual_on_embedded = residual_on_embedded
        s_in = 1.0 / math.sqrt(channels)
        self.w_q = Parameter(rng.normal(0.0, s_in, size=(channels, attention_dim)))
        self.w_k = Parameter(rng.normal(0.0, s_in, size=(channels, attention_dim)))
        self.w_v = Parameter(rng.normal(0.0, s_in, size=(channels, attention_dim)))
        self.w_o = Parameter(rng.normal(0.0, 1.0 / math.sqrt(attention_dim), size=(attention_dim, channels)))
        self.position = Parameter(rng.normal(0.0, pos_std, size=(max_tokens, channels)))
        self.last_state: FusionState | None = None

    def forward(self, fmri: Tensor, t1w: Tensor) -> tuple[Tensor, Tensor]:
        tok = align_and_stack(fmri, t1w, self.strategy)
        att = ftm_attention(tok, self.w_q, self.w_k, self.w_v, self.w_o, self.position,
                            n_heads=self.n_heads, residual_on_embedded=self.residual_on_embedded)
        f_out, s_out = ftm_restore(att, fmri, t1w, self.strategy)
        self.last_state = FusionState(fmri, t1w, tok, att, f_out, s_out)
        return f_out, s_out


def token_count(fmri_spatial, t1w_spatial, strategy: str) -> int:
    if strategy == "dim4":
        f = tuple(fmri_spatial) + (t1w_spatial[2],)
        s = tuple(t1w_spatial)
    else:
        f = tuple(fmri_spatial)
        s = tuple(t1w_spatial[:2])
    return 2 * int(np.prod([min(a, b) for a, b in zip(f, s)]))


class ClassificationHead(Module):
    def __init__(self, config: ModelConfig, fmri_spatial, t1w_spatial, rng=None):
        super().__init__()
        c = config.stage_channels()[-1]
        self.uses_fmri = config.uses_fmri
        self.uses_t1w = config.uses_t1w
        in_ch = c * (int(self.uses_fmri) + int(self.uses_t1w))
        spatial = tuple(fmri_spatial) if self.uses_fmri else tuple(t1w_spatial[:2])
        self.out_spatial = spatial
        kw = dict(kernel=config.head_kernel_size, pool=False, slope=config.leaky_slope,
                  bn_eps=config.bn_eps, bn_momentum=config.bn_momentum, rng=rng)
        self.convs = [nn.ConvBlock(2, in_ch, in_ch, **kw), nn.ConvBlock(2, in_ch, in_ch, **kw)]
        self.flat_features = in_ch * int(np.prod(spatial))
        h = config.mlp_hidden
        self.mlp = nn.MLP([self.flat_features, h, h, config.n_classes], slope=config.leaky_slope, rng=rng)

    def fuse(self, fmri: Tensor | None, t1w: Tensor | None) -> Tensor:
        if t1w is None:
            return fmri
        s = dimension_down(t1w)
        if fmri is None:
            return s
        s = nn.adaptive_avg_pool_nd(s, fmri.shape[2:], allow_upsample=True)
        return concatenate([fmri, s], axis=1)

    def forward(self, fmri: Tensor | None, t1w: Tensor | None) -> Tensor:
        x = self.fuse(fmri, t1w)
        for block in self.convs:
            x = block(x)
        return self.mlp(flatten(x, 1))


class MFFormer(Module):
    def __init__(self, config: ModelConfig, rng=None):
        super().__init__()
        config.validate()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.config = config
        chans = config.stage_channels()
        kw = dict(kernel=config.kernel_size, slope=config.leaky_slope,
                  bn_eps=config.bn_eps, bn_momentum=config.bn_momentum)
        ins = [1] + chans[:-1]
        self.fmri_stages = [nn.ConvBlock(2, a, b, rng=rng, **kw) for a, b in zip(ins, chans)] if config.uses_fmri else []
        self.t1w_stages = [nn.ConvBlock(3, a, b, rng=rng, **kw) for a, b in zip(ins, chans)] if config.uses_t1w else []
        self.fmri_spatial = stage_shapes(config.fmri_shape, config.n_encoder_layers)
        self.t1w_spatial = stage_shapes(config.t1w_shape, config.n_encoder_layers)

        stages = config.ftm_stages()
        self.max_tokens = max(
            (token_count(self.fmri_spatial[i], self.t1w_spatial[i], config.fusion_strategy) for i in stages),
            default=0,
        )
        self.ftm_at = stages
        self.ftms = [
            FusionTransformer(chans[i], config.attention_dim, self.max_tokens, config.fusion_strategy,
                              n_heads=config.n_heads, residual_on_embedded=config.residual_on_embedded,
                              pos_std=config.pos_embedding_std, rng=rng)
            for i in stages
        ]
        self.head = ClassificationHead(config, self.fmri_spatial[-1], self.t1w_spatial[-1], rng=rng)
        if config.dtype != "float64":
            self.astype(config.dtype)

    def _check_inputs(self, fmri, t1w):
        cfg = self.config
        if cfg.uses_fmri:
            if fmri is None or fmri.ndim != 4 or fmri.shape[1] != 1 or fmri.shape[2:] != cfg.fmri_shape:
                raise ValueError(f"fMRI input must be (B, 1, {cfg.fmri_shape[0]}, {cfg.fmri_shape[1]}), "
                                 f"got {None if fmri is None else fmri.shape}")
        if cfg.uses_t1w:
            if t1w is None or t1w.ndim != 5 or t1w.shape[1] != 1 or t1w.shape[2:] != cfg.t1w_shape:
                raise ValueError(f"T1w input must be (B, 1, *{cfg.t1w_shape}), "
                                 f"got {None if t1w is None else t1w.shape}")

    def encode_fmri(self, x: Tensor) -> list[Tensor]:
        outs = []
        for stage in self.fmri_stages:
            x = stage(x)
            outs.append(x)
        return outs

    def encode_t1w(self, x: Tensor) -> list[Tensor]:
        outs = []
        for stage in self.t1w_stages:
            x = stage(x)
            outs.append(x)
        return outs

    def forward(self, fmri: Tensor | None, t1w: Tensor | None) -> Tensor:
        cfg = self.config
        self._check_inputs(fmri, t1w)
        f = fmri if cfg.uses_fmri else None
        s = t1w if cfg.uses_t1w else None
        ftm_of = dict(zip(self.ftm_at, self.ftms))
        for i in range(cfg.n_encoder_layers):
            if f is not None:
                f = self.fmri_stages[i](f)
            if s is not None:
                s = self.t1w_stages[i](s)
            if i in ftm_of:
                f, s = ftm_of[i](f, s)
        return self.head(f, s)

    def uses_conv3d(self) -> bool:
        return any(block.conv.n_dims == 3 for block in self.t1w_stages)
