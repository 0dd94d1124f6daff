"""Generative intermediate fusion.

Two independent branches share one recipe::

    fused = Transformer(CA(LN_q(query_tokens), LN_kv(generated), LN_kv(generated)))

The image branch queries with image tokens and pools row 0; the text branch
queries with text tokens and pools the eos row.  Generated-image tokens are
always the keys and values.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn

from .encoders import TokenSequence
from .errors import ValidationError
from .layers import MultiHeadAttention, TransformerStack


@dataclass(frozen=True)
class GifConfig:
    embed_dim: int = 512
    heads: int = 8
    layers: int = 6
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.embed_dim % self.heads:
            raise ValidationError("embed_dim must be divisible by heads")
        if self.layers < 1:
            raise ValidationError("fusion branches need at least one transformer layer")


class GifBranch(nn.Module):
    def __init__(self, config: GifConfig):
        super().__init__()
        d = config.embed_dim
        self.ln_q = nn.LayerNorm(d)
        self.ln_kv = nn.LayerNorm(d)
        self.ca = MultiHeadAttention(d, config.heads)
        self.transformer = TransformerStack(d, config.heads, config.layers, config.mlp_ratio)
        for block in self.transformer.blocks:
            block.zero_residual()

    def forward(self, query, generated, query_mask=None, gen_mask=None):
        """``(B, Lq, d)`` queries and ``(B, Lk, d)`` generated tokens -> ``(B, Lq, d)``."""
        if query.shape[-1] != generated.shape[-1]:
            raise ValidationError(
                f"query dimension {query.shape[-1]} != generated dimension {generated.shape[-1]}")
        kv = self.ln_kv(generated)
        x = self.ca(self.ln_q(query), kv, kv, key_mask=gen_mask)
        return self.transformer(x, key_mask=query_mask)

    def heatmap(self, query, generated, gen_mask=None):
        kv = self.ln_kv(generated)
        return self.ca.attention_weights(self.ln_q(query), kv, gen_mask).mean(dim=1)


class GifFusion(nn.Module):
    def __init__(self, config: GifConfig = GifConfig()):
        super().__init__()
        self.config = config
        self.image_branch = GifBranch(config)
        self.text_branch = GifBranch(config)

    def fuse_image_batch(self, image_tokens, gen_tokens, image_mask=None, gen_mask=None):
        return self.image_branch(image_tokens, gen_tokens, image_mask, gen_mask)[:, 0]

    def fuse_text_batch(self, text_tokens, eos_index, gen_tokens, text_mask=None, gen_mask=None):
        out = self.text_branch(text_tokens, gen_tokens, text_mask, gen_mask)
        return out[torch.arange(out.shape[0]), eos_index]


def cross_attention(q_seq, k_seq, v_seq, params: MultiHeadAttention):
    """Multi-head ``softmax(Q K^T / sqrt(d_head)) V`` followed by the output projection.

    Accepts unbatched ``(L, d)`` or batched ``(B, L, d)`` inputs.
    """
    q_seq, k_seq, v_seq = (torch.as_tensor(x, dtype=params.w_q.weight.dtype) for x in (q_seq, k_seq, v_seq))
    if k_seq.shape != v_seq.shape:
        raise ValidationError(f"keys {tuple(k_seq.shape)} and values {tuple(v_seq.shape)} differ in shape")
    if q_seq.ndim == 2:
        return params(q_seq[None], k_seq[None], v_seq[None])[0]
    return params(q_seq, k_seq, v_seq)


def _rows(seq):
    return seq.rows if isinstance(seq, TokenSequence) else torch.as_tensor(seq)


def fuse_image(image_seq, generated_seq, params: GifFusion) -> torch.Tensor:
    q, g = _rows(image_seq), _rows(generated_seq)
    return params.fuse_image_batch(q[None], g[None])[0]


def fuse_text(text_seq, generated_seq, params: GifFusion, eos_index=None) -> torch.Tensor:
    q, g = _rows(text_seq), _rows(generated_seq)
    if eos_index is None:
        eos_index = text_seq.eos_index if isinstance(text_seq, TokenSequence) else q.shape[0] - 1
    return params.fuse_text_batch(q[None], torch.tensor([eos_index]), g[None])[0]


def attention_heatmap(q_seq, k_seq, params) -> torch.Tensor:
    """Head-averaged post-softmax attention weights ``(Lq, Lk)``.

    ``params`` is either a bare attention module or a fusion branch (whose
    layer norms are then applied first).
    """
    q, k = _rows(q_seq), _rows(k_seq)
    if isinstance(params, GifBranch):
        dtype = params.ca.w_q.weight.dtype
        return params.heatmap(q.to(dtype)[None], k.to(dtype)[None])[0]
    if q.shape[-1] != params.dim or k.shape[-1] != params.dim:
        raise ValidationError("query/key dimension does not match the attention module")
    dtype = params.w_q.weight.dtype
    return params.attention_weights(q.to(dtype)[None], k.to(dtype)[None]).mean(dim=1)[0]
