"""Miniature promptable segmenter: wide ViT-style image encoder, a
Fourier point-prompt encoder, and a two-way transformer mask decoder.

The decoder returns three candidate masks with predicted-IoU scores so
an ambiguous prompt (a point on a composite object) can be answered at
several granularities, plus its final image-token state ``f_dt`` for
modules that refine boundaries from decoder-side features.

Capacity lives almost entirely in the encoder (wide internal width,
projected down to the decoder channel count by a small neck), mirroring
encoder-dominated segmenters; adapters trained later stay under 1% of
these weights. All parameters sit in one ``ParamStore`` under the
``backbone.`` namespace; the two Fourier matrices are stored frozen.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, DimensionError, InputError
from .params import ParamStore, add_attention, add_layer_norm, add_linear, attention_view

__all__ = [
    "BackboneConfig", "ImageFeatures", "PromptEmbedding", "DecoderOutputs",
    "init_backbone", "patch_tokens", "encode_image", "encode_prompt",
    "grid_positional_encoding", "decode_masks", "upsample_matrix",
]


@dataclass(frozen=True)
class BackboneConfig:
    image_size: int = 64
    patch: int = 8
    channels: int = 64       # decoder-side channel count C
    enc_width: int = 704     # internal encoder width, necked down to C
    enc_blocks: int = 2
    dec_blocks: int = 2
    mask_tokens: int = 3
    heads: int = 8

    @property
    def grid(self) -> int:
        return self.image_size // self.patch

    def validate(self) -> "BackboneConfig":
        if self.image_size % self.patch != 0:
            raise ConfigError(f"image size {self.image_size} not divisible by "
                              f"patch {self.patch}")
        if self.grid >= self.image_size:
            raise ConfigError("feature grid must be strictly coarser than the image")
        if self.channels % self.heads != 0:
            raise ConfigError(f"channels {self.channels} not divisible by "
                              f"heads {self.heads}")
        if self.enc_width % self.heads != 0:
            raise ConfigError(f"encoder width {self.enc_width} not divisible by "
                              f"heads {self.heads}")
        if self.channels % 2 or self.enc_width % 2:
            raise ConfigError("channel counts must be even for sin/cos encoding")
        return self


@dataclass
class ImageFeatures:
    """Encoder output: one token per feature-grid cell, row-major."""

    tokens: T.Tensor           # (grid*grid, C)
    positions: np.ndarray      # (grid*grid, 2) int (row, col)
    grid_pe: T.Tensor          # (grid*grid, C) constant positional encoding


@dataclass
class PromptEmbedding:
    """One token per prompt point, plus the source pixel coordinates."""

    tokens: T.Tensor           # (n_p, C)
    points: np.ndarray         # (n_p, 2) float (x, y) pixels


@dataclass
class DecoderOutputs:
    mask_logits: T.Tensor      # (3, H, W)
    iou_pred: T.Tensor         # (3,) in (0, 1)
    f_dt: T.Tensor             # (grid, grid, C) decoder-side image tokens


# ---------------------------------------------------------------------------
# parameters


def init_backbone(cfg: BackboneConfig, seed: int = 0) -> ParamStore:
    cfg.validate()
    rng = np.random.default_rng(seed)
    store = ParamStore()
    add_linear(store, "backbone.patch_embed", rng, cfg.patch * cfg.patch, cfg.enc_width)
    store.add("backbone.enc_pe.B",
              rng.normal(0.0, 2.0, (2, cfg.enc_width // 2)).astype(np.float32),
              trainable=False)
    for i in range(cfg.enc_blocks):
        blk = f"backbone.enc.block{i}"
        add_attention(store, blk + ".attn", rng, cfg.enc_width)
        add_layer_norm(store, blk + ".ln1", cfg.enc_width)
        add_linear(store, blk + ".mlp.fc1", rng, cfg.enc_width, 4 * cfg.enc_width)
        add_linear(store, blk + ".mlp.fc2", rng, 4 * cfg.enc_width, cfg.enc_width)
        add_layer_norm(store, blk + ".ln2", cfg.enc_width)
    add_layer_norm(store, "backbone.enc.ln_out", cfg.enc_width)
    add_linear(store, "backbone.neck.proj", rng, cfg.enc_width, cfg.channels)
    add_layer_norm(store, "backbone.neck.ln", cfg.channels)

    store.add("backbone.prompt.B",
              rng.normal(0.0, 2.0, (2, cfg.channels // 2)).astype(np.float32),
              trainable=False)
    store.add("backbone.prompt.type_embed",
              rng.normal(0.0, 0.02, cfg.channels).astype(np.float32))

    store.add("backbone.dec.iou_token",
              rng.normal(0.0, 0.02, (1, cfg.channels)).astype(np.float32))
    store.add("backbone.dec.mask_tokens",
              rng.normal(0.0, 0.02, (cfg.mask_tokens, cfg.channels)).astype(np.float32))
    for i in range(cfg.dec_blocks):
        blk = f"backbone.dec.block{i}"
        add_attention(store, blk + ".self_attn", rng, cfg.channels)
        add_layer_norm(store, blk + ".ln1", cfg.channels)
        add_attention(store, blk + ".t2i", rng, cfg.channels)
        add_layer_norm(store, blk + ".ln2", cfg.channels)
        add_linear(store, blk + ".mlp.fc1", rng, cfg.channels, 4 * cfg.channels)
        add_linear(store, blk + ".mlp.fc2", rng, 4 * cfg.channels, cfg.channels)
        add_layer_norm(store, blk + ".ln3", cfg.channels)
        add_attention(store, blk + ".i2t", rng, cfg.channels)
        add_layer_norm(store, blk + ".ln4", cfg.channels)
    for k in range(cfg.mask_tokens):
        hyp = f"backbone.dec.hyper{k}"
        add_linear(store, hyp + ".fc1", rng, cfg.channels, cfg.channels)
        add_linear(store, hyp + ".fc2", rng, cfg.channels, cfg.channels)
        # Small output init keeps initial mask logits near zero: heads start
        # unsaturated (but distinct), so early training grows per-pixel
        # structure instead of first undoing a large constant offset.
        add_linear(store, hyp + ".fc3", rng, cfg.channels, cfg.channels, scale=0.1)
    # Per-head scalar logit bias, initialized to the background prior's
    # log-odds (most pixels are background). Starting each head at the
    # foreground/background balance point makes the net constant component
    # of the early gradient vanish, so training grows per-pixel structure
    # instead of pushing a token-constant vector through the residual
    # stream — a drift the per-token layer norms would otherwise amplify
    # at the expense of all spatial contrast.
    store.add("backbone.dec.mask_bias",
              np.full(cfg.mask_tokens, -2.0, np.float32))
    add_linear(store, "backbone.dec.iou_head.fc1", rng, cfg.channels, cfg.channels)
    add_linear(store, "backbone.dec.iou_head.fc2", rng, cfg.channels, cfg.channels)
    add_linear(store, "backbone.dec.iou_head.out", rng, cfg.channels, cfg.mask_tokens)
    return store


# ---------------------------------------------------------------------------
# positional encodings


def _fourier(points01: np.ndarray, Bmat: np.ndarray) -> np.ndarray:
    ang = 2.0 * np.pi * np.asarray(points01, np.float64) @ np.asarray(Bmat, np.float64)
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def _centers01(grid: int) -> np.ndarray:
    rr, cc = np.divmod(np.arange(grid * grid), grid)
    return np.stack([(cc + 0.5) / grid, (rr + 0.5) / grid], axis=1)


def grid_positional_encoding(store: ParamStore, cfg: BackboneConfig) -> T.Tensor:
    """Decoder-side positional encoding of the feature grid (constant)."""
    return T.Tensor(_fourier(_centers01(cfg.grid), store["backbone.prompt.B"].data))


# ---------------------------------------------------------------------------
# image encoder


def _post_norm_block(t: T.Tensor, store: ParamStore, prefix: str, heads: int,
                     attn_name: str = ".attn") -> T.Tensor:
    attended = T.multi_head_attention(t, t, attention_view(store, prefix + attn_name),
                                      heads)
    t = T.layer_norm(t + attended, store[prefix + ".ln1.g"], store[prefix + ".ln1.b"])
    hidden = T.gelu(T.linear(t, store[prefix + ".mlp.fc1.w"],
                             store[prefix + ".mlp.fc1.b"]))
    out = T.linear(hidden, store[prefix + ".mlp.fc2.w"], store[prefix + ".mlp.fc2.b"])
    return T.layer_norm(t + out, store[prefix + ".ln2.g"], store[prefix + ".ln2.b"])


def patch_tokens(image: np.ndarray, store: ParamStore, cfg: BackboneConfig) -> T.Tensor:
    """Patchify + linear embed + grid positional encoding (pre-transformer)."""
    img = np.asarray(image, np.float32)
    if img.shape != (cfg.image_size, cfg.image_size):
        raise DimensionError(f"expected {(cfg.image_size, cfg.image_size)} image, "
                             f"got {img.shape}")
    g, p = cfg.grid, cfg.patch
    patches = img.reshape(g, p, g, p).transpose(0, 2, 1, 3).reshape(g * g, p * p)
    pe = _fourier(_centers01(g), store["backbone.enc_pe.B"].data)
    return T.linear(T.Tensor(patches), store["backbone.patch_embed.w"],
                    store["backbone.patch_embed.b"]) + T.Tensor(pe)


def encode_image(image: np.ndarray, store: ParamStore,
                 cfg: BackboneConfig) -> ImageFeatures:
    t = patch_tokens(image, store, cfg)
    for i in range(cfg.enc_blocks):
        t = _post_norm_block(t, store, f"backbone.enc.block{i}", cfg.heads)
    t = T.layer_norm(t, store["backbone.enc.ln_out.g"], store["backbone.enc.ln_out.b"])
    t = T.linear(t, store["backbone.neck.proj.w"], store["backbone.neck.proj.b"])
    t = T.layer_norm(t, store["backbone.neck.ln.g"], store["backbone.neck.ln.b"])
    g = cfg.grid
    positions = np.stack(np.divmod(np.arange(g * g), g), axis=1)
    return ImageFeatures(tokens=t, positions=positions,
                         grid_pe=grid_positional_encoding(store, cfg))


# ---------------------------------------------------------------------------
# prompt encoder


def encode_prompt(points, store: ParamStore, cfg: BackboneConfig) -> PromptEmbedding:
    pts = np.asarray(points, np.float64).reshape(-1, 2)
    if len(pts) == 0:
        raise InputError("prompt needs at least one point")
    hi = cfg.image_size - 1
    if (pts < 0).any() or (pts > hi).any():
        raise InputError(f"prompt point outside [0, {hi}]: {pts.tolist()}")
    four = _fourier(pts / cfg.image_size, store["backbone.prompt.B"].data)
    tokens = T.Tensor(four) + store["backbone.prompt.type_embed"]
    return PromptEmbedding(tokens=tokens, points=pts.astype(np.float32))


# ---------------------------------------------------------------------------
# mask decoder


def upsample_matrix(out_size: int, in_size: int) -> np.ndarray:
    """1-D bilinear interpolation as a row-stochastic constant matrix.

    Output center ``o`` samples source coordinate ``(o + 0.5) * in / out - 0.5``
    with linear weights on its two neighbors, clamped at the border.
    """
    U = np.zeros((out_size, in_size), np.float64)
    src = (np.arange(out_size) + 0.5) * (in_size / out_size) - 0.5
    lo = np.floor(src).astype(int)
    w = src - lo
    rows = np.arange(out_size)
    np.add.at(U, (rows, np.clip(lo, 0, in_size - 1)), 1.0 - w)
    np.add.at(U, (rows, np.clip(lo + 1, 0, in_size - 1)), w)
    return U.astype(np.float32)


def _mlp3(t: T.Tensor, store: ParamStore, prefix: str) -> T.Tensor:
    h = T.gelu(T.linear(t, store[prefix + ".fc1.w"], store[prefix + ".fc1.b"]))
    h = T.gelu(T.linear(h, store[prefix + ".fc2.w"], store[prefix + ".fc2.b"]))
    return T.linear(h, store[prefix + ".fc3.w"], store[prefix + ".fc3.b"])


def decode_masks(f_i: ImageFeatures, f_p: PromptEmbedding, store: ParamStore,
                 cfg: BackboneConfig) -> DecoderOutputs:
    c = cfg.channels
    if f_i.tokens.shape[1] != c:
        raise DimensionError(f"image tokens have {f_i.tokens.shape[1]} channels, "
                             f"config says {c}")
    if f_p.tokens.shape[1] != c:
        raise DimensionError(f"prompt tokens have {f_p.tokens.shape[1]} channels, "
                             f"config says {c}")
    t = T.concat([store["backbone.dec.iou_token"], store["backbone.dec.mask_tokens"],
                  f_p.tokens], axis=0)
    tpe = t  # token identities double as their positional term
    x, xpe = f_i.tokens, f_i.grid_pe
    for i in range(cfg.dec_blocks):
        blk = f"backbone.dec.block{i}"
        a = T.multi_head_attention(t + tpe, t + tpe,
                                   attention_view(store, blk + ".self_attn"), cfg.heads)
        t = T.layer_norm(t + a, store[blk + ".ln1.g"], store[blk + ".ln1.b"])
        a = T.multi_head_attention(t + tpe, x + xpe,
                                   attention_view(store, blk + ".t2i"), cfg.heads)
        t = T.layer_norm(t + a, store[blk + ".ln2.g"], store[blk + ".ln2.b"])
        hidden = T.gelu(T.linear(t, store[blk + ".mlp.fc1.w"], store[blk + ".mlp.fc1.b"]))
        t = T.layer_norm(t + T.linear(hidden, store[blk + ".mlp.fc2.w"],
                                      store[blk + ".mlp.fc2.b"]),
                         store[blk + ".ln3.g"], store[blk + ".ln3.b"])
        a = T.multi_head_attention(x + xpe, t + tpe,
                                   attention_view(store, blk + ".i2t"), cfg.heads)
        x = T.layer_norm(x + a, store[blk + ".ln4.g"], store[blk + ".ln4.b"])

    g, s = cfg.grid, cfg.image_size
    f_dt = T.reshape(x, (g, g, c))
    U = T.Tensor(upsample_matrix(s, g))
    Ut = T.Tensor(upsample_matrix(s, g).T.copy())
    masks = []
    for k in range(cfg.mask_tokens):
        h_k = _mlp3(T.take_rows(t, np.array([1 + k])), store, f"backbone.dec.hyper{k}")
        low = T.reshape(T.matmul(x, T.transpose(h_k, (1, 0))), (g, g))
        masks.append(T.reshape(T.matmul(T.matmul(U, low), Ut), (1, s, s)))
    mask_logits = T.concat(masks, axis=0) \
        + T.reshape(store["backbone.dec.mask_bias"], (cfg.mask_tokens, 1, 1))
    iou_tok = T.take_rows(t, np.array([0]))
    h = T.gelu(T.linear(iou_tok, store["backbone.dec.iou_head.fc1.w"],
                        store["backbone.dec.iou_head.fc1.b"]))
    h = T.gelu(T.linear(h, store["backbone.dec.iou_head.fc2.w"],
                        store["backbone.dec.iou_head.fc2.b"]))
    iou = T.sigmoid(T.linear(h, store["backbone.dec.iou_head.out.w"],
                             store["backbone.dec.iou_head.out.b"]))
    return DecoderOutputs(mask_logits=mask_logits,
                          iou_pred=T.reshape(iou, (cfg.mask_tokens,)),
                          f_dt=f_dt)
