"""Residual prompt-embedding adapter trained against a frozen predictor.

Instead of fine-tuning the segmenter, a small module estimates an offset
for the prompt embedding from the prompt and image features, and the
corrected prompt is decoded by the untouched backbone:

    delta = offset(f_p, f_i);   masks = decode(f_i, f_p + delta)

The offset network is one self-attention block over prompt tokens, one
cross-attention block from prompts to image tokens (both with residual
connections and post-layer-norm), and a per-token MLP whose final layer
is zero-initialized. The zero init makes the whole pipeline an exact
identity before training: segmenting with a fresh adapter reproduces the
frozen model bit for bit, so any behavioural change is attributable to
adaptation.

Positional terms reuse the backbone's frozen Fourier matrix: prompt
tokens get the encoding of their source points, image tokens get the
feature-grid encoding already carried by ``ImageFeatures``.

All parameters live under the ``adapter.`` namespace so the module can
be saved, loaded, and detached independently of the backbone weights.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbone import (BackboneConfig, DecoderOutputs, ImageFeatures,
                       PromptEmbedding, _fourier, decode_masks, encode_image,
                       encode_prompt)
from .errors import DimensionError
from .params import ParamStore, add_attention, add_layer_norm, add_linear, attention_view

__all__ = ["init_plm", "plm_offset", "apply_prompt_offset", "segment_adapted"]


def init_plm(cfg: BackboneConfig, seed: int = 0) -> ParamStore:
    """Create adapter parameters under the ``adapter.`` namespace."""
    rng = np.random.default_rng(seed)
    c = cfg.channels
    store = ParamStore()
    add_attention(store, "adapter.self_attn", rng, c)
    add_layer_norm(store, "adapter.ln1", c)
    add_attention(store, "adapter.cross", rng, c)
    add_layer_norm(store, "adapter.ln2", c)
    add_linear(store, "adapter.mlp.fc1", rng, c, 4 * c)
    add_linear(store, "adapter.mlp.fc2", rng, 4 * c, c, zero=True)
    return store


def plm_offset(f_p: PromptEmbedding, f_i: ImageFeatures, store: ParamStore,
               cfg: BackboneConfig) -> T.Tensor:
    """Estimate a per-token offset for the prompt embedding.

    Returns a tensor shaped like ``f_p.tokens``. Zero while the final MLP
    layer is zero-initialized.
    """
    c = cfg.channels
    if f_p.tokens.shape[1] != c:
        raise DimensionError(f"prompt tokens have {f_p.tokens.shape[1]} channels, "
                             f"config says {c}")
    if f_i.tokens.shape[1] != c:
        raise DimensionError(f"image tokens have {f_i.tokens.shape[1]} channels, "
                             f"config says {c}")
    ppe = T.Tensor(_fourier(np.asarray(f_p.points, np.float64) / cfg.image_size,
                            store["backbone.prompt.B"].data))
    t = f_p.tokens
    a = T.multi_head_attention(t + ppe, t + ppe,
                               attention_view(store, "adapter.self_attn"), cfg.heads)
    t = T.layer_norm(t + a, store["adapter.ln1.g"], store["adapter.ln1.b"])
    a = T.multi_head_attention(t + ppe, f_i.tokens + f_i.grid_pe,
                               attention_view(store, "adapter.cross"), cfg.heads)
    t = T.layer_norm(t + a, store["adapter.ln2.g"], store["adapter.ln2.b"])
    hidden = T.gelu(T.linear(t, store["adapter.mlp.fc1.w"],
                             store["adapter.mlp.fc1.b"]))
    return T.linear(hidden, store["adapter.mlp.fc2.w"], store["adapter.mlp.fc2.b"])


def apply_prompt_offset(f_p: PromptEmbedding, delta: T.Tensor) -> PromptEmbedding:
    """Elementwise residual correction of the prompt embedding."""
    if delta.shape != f_p.tokens.shape:
        raise DimensionError(f"offset shape {delta.shape} does not match prompt "
                             f"tokens {f_p.tokens.shape}")
    return PromptEmbedding(tokens=f_p.tokens + delta, points=f_p.points)


def segment_adapted(image: np.ndarray, points, store: ParamStore,
                    cfg: BackboneConfig) -> DecoderOutputs:
    """Full adapted pipeline: encode, offset the prompt, decode.

    The backbone weights are read but never written; with a fresh adapter
    the outputs equal ``decode_masks`` on the unmodified prompt.
    """
    f_i = encode_image(image, store, cfg)
    f_p = encode_prompt(points, store, cfg)
    delta = plm_offset(f_p, f_i, store, cfg)
    return decode_masks(f_i, apply_prompt_offset(f_p, delta), store, cfg)
