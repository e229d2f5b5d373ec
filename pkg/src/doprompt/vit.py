"""Small vision transformer whose forward pass accepts extra prompt tokens.

Token order is [CLS], patch tokens in raster order, then any appended prompt
tokens. Positional embeddings cover only [CLS] and the patches; prompts ride
along as position-free tokens and take part in every attention layer. Blocks
are pre-norm residual: x + Attn(LN(x)), then + MLP(LN(.)).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ShapeError, Tensor

__all__ = [
    "BlockParams",
    "ViTConfig",
    "ViTParams",
    "attention_block",
    "forward",
    "init_vit_params",
    "patch_embed",
]


@dataclass(frozen=True)
class ViTConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    dropout_rate: float = 0.1
    num_classes: int = 5

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ShapeError(
                f"image_size {self.image_size} not divisible by patch_size {self.patch_size}"
            )
        if self.embed_dim % self.num_heads != 0:
            raise ShapeError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid**2

    @property
    def patch_dim(self) -> int:
        return self.channels * self.patch_size**2

    @property
    def mlp_dim(self) -> int:
        return int(self.embed_dim * self.mlp_ratio)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor


@dataclass
class ViTParams:
    """Backbone plus classifier; `named()` yields checkpoint-stable names."""

    patch_w: Tensor
    patch_b: Tensor
    cls: Tensor
    pos: Tensor
    blocks: list[BlockParams] = field(default_factory=list)
    norm_g: Tensor = None
    norm_b: Tensor = None
    head_w: Tensor = None
    head_b: Tensor = None

    def named(self):
        yield "vit.patch.w", self.patch_w
        yield "vit.patch.b", self.patch_b
        yield "vit.cls", self.cls
        yield "vit.pos", self.pos
        for i, blk in enumerate(self.blocks):
            prefix = f"vit.block{i}."
            for f in (
                "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
            ):
                yield prefix + f.replace("_", "."), getattr(blk, f)
        yield "vit.norm.g", self.norm_g
        yield "vit.norm.b", self.norm_b
        yield "classifier.w", self.head_w
        yield "classifier.b", self.head_b

    def backbone_names(self):
        return [name for name, _ in self.named() if name.startswith("vit.")]


def init_vit_params(cfg: ViTConfig, rng: np.random.Generator) -> ViTParams:
    """Token-embedding-scale init: N(0, 0.02) weights, zero biases, unit norms."""

    def w(*shape):
        return Tensor(rng.normal(0.0, 0.02, size=shape), requires_grad=True)

    def zeros(*shape):
        return Tensor(np.zeros(shape), requires_grad=True)

    def ones(*shape):
        return Tensor(np.ones(shape), requires_grad=True)

    d = cfg.embed_dim
    params = ViTParams(
        patch_w=w(cfg.patch_dim, d),
        patch_b=zeros(d),
        cls=w(d),
        pos=w(1 + cfg.num_patches, d),
        norm_g=ones(d),
        norm_b=zeros(d),
        head_w=w(d, cfg.num_classes),
        head_b=zeros(cfg.num_classes),
    )
    for _ in range(cfg.depth):
        params.blocks.append(
            BlockParams(
                ln1_g=ones(d), ln1_b=zeros(d),
                wq=w(d, d), bq=zeros(d),
                wk=w(d, d), bk=zeros(d),
                wv=w(d, d), bv=zeros(d),
                wo=w(d, d), bo=zeros(d),
                ln2_g=ones(d), ln2_b=zeros(d),
                w1=w(d, cfg.mlp_dim), b1=zeros(cfg.mlp_dim),
                w2=w(cfg.mlp_dim, d), b2=zeros(d),
            )
        )
    return params


def vit_params_from_named(cfg: ViTConfig, named: dict) -> ViTParams:
    """Rebuild structured params from a flat name -> Tensor mapping."""
    params = ViTParams(
        patch_w=named["vit.patch.w"],
        patch_b=named["vit.patch.b"],
        cls=named["vit.cls"],
        pos=named["vit.pos"],
        norm_g=named["vit.norm.g"],
        norm_b=named["vit.norm.b"],
        head_w=named["classifier.w"],
        head_b=named["classifier.b"],
    )
    for i in range(cfg.depth):
        prefix = f"vit.block{i}."
        kw = {}
        for f in (
            "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
            "wo", "bo", "ln2_g", "ln2_b", "w1", "b1", "w2", "b2",
        ):
            kw[f] = named[prefix + f.replace("_", ".")]
        params.blocks.append(BlockParams(**kw))
    return params


def patch_embed(params: ViTParams, cfg: ViTConfig, images: Tensor) -> Tensor:
    """(B, C, H, W) -> (B, k, D): non-overlapping patches, linear projection."""
    b, c, h, w_ = images.shape
    if h != cfg.image_size or w_ != cfg.image_size or c != cfg.channels:
        raise ShapeError(
            f"patch_embed: expected (B, {cfg.channels}, {cfg.image_size}, "
            f"{cfg.image_size}), got {images.shape}"
        )
    g, p = cfg.grid, cfg.patch_size
    x = T.reshape(images, (b, c, g, p, g, p))
    x = T.transpose(x, (0, 2, 4, 1, 3, 5))  # (B, gh, gw, C, p, p): raster order
    x = T.reshape(x, (b, g * g, cfg.patch_dim))
    return T.matmul(x, params.patch_w) + params.patch_b


def attention_block(
    x: Tensor,
    blk: BlockParams,
    num_heads: int,
    dropout_rate: float = 0.0,
    train: bool = False,
    rng: np.random.Generator | None = None,
) -> Tensor:
    """Pre-norm residual block with full bidirectional attention."""
    b, t, d = x.shape
    dh = d // num_heads

    def split_heads(z):
        return T.transpose(T.reshape(z, (b, t, num_heads, dh)), (0, 2, 1, 3))

    h = T.layer_norm(x, blk.ln1_g, blk.ln1_b)
    q = split_heads(T.matmul(h, blk.wq) + blk.bq)
    k = split_heads(T.matmul(h, blk.wk) + blk.bk)
    v = split_heads(T.matmul(h, blk.wv) + blk.bv)
    att = T.matmul(q, T.transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(dh))
    att = T.softmax(att, axis=-1)
    att = T.dropout(att, dropout_rate, rng, train)
    o = T.matmul(att, v)  # (B, heads, T, dh)
    o = T.reshape(T.transpose(o, (0, 2, 1, 3)), (b, t, d))
    o = T.matmul(o, blk.wo) + blk.bo
    o = T.dropout(o, dropout_rate, rng, train)
    x = x + o

    h2 = T.layer_norm(x, blk.ln2_g, blk.ln2_b)
    m = T.gelu(T.matmul(h2, blk.w1) + blk.b1)
    m = T.dropout(m, dropout_rate, rng, train)
    m = T.matmul(m, blk.w2) + blk.b2
    m = T.dropout(m, dropout_rate, rng, train)
    return x + m


def forward(
    params: ViTParams,
    cfg: ViTConfig,
    images: Tensor,
    prompt_tokens: Tensor | None = None,
    train: bool = False,
    rng: np.random.Generator | None = None,
    dropout_rate: float | None = None,
) -> tuple[Tensor, Tensor]:
    """Full forward pass; returns (cls_feature BxD, logits BxC).

    `prompt_tokens` may be (P, D), shared by the batch, or (B, P, D); they are
    concatenated after the patch tokens and receive no positional embedding.
    The cls feature is the final-norm class token, the same tensor the
    classifier consumes.
    """
    rate = cfg.dropout_rate if dropout_rate is None else dropout_rate
    x = patch_embed(params, cfg, images)
    b = x.shape[0]
    d = cfg.embed_dim
    cls = T.broadcast_to(T.reshape(params.cls, (1, 1, d)), (b, 1, d))
    x = T.concat([cls, x], axis=1) + params.pos
    if prompt_tokens is not None:
        if prompt_tokens.shape[-1] != d:
            raise ShapeError(
                f"prompt tokens have dim {prompt_tokens.shape[-1]}, model dim is {d}"
            )
        if prompt_tokens.ndim == 2:
            p = prompt_tokens.shape[0]
            prompt_tokens = T.broadcast_to(T.reshape(prompt_tokens, (1, p, d)), (b, p, d))
        x = T.concat([x, prompt_tokens], axis=1)
    x = T.dropout(x, rate, rng, train)
    for blk in params.blocks:
        x = attention_block(x, blk, cfg.num_heads, rate, train, rng)
    cls_feature = T.layer_norm(x[:, 0, :], params.norm_g, params.norm_b)
    logits = T.matmul(cls_feature, params.head_w) + params.head_b
    return cls_feature, logits
