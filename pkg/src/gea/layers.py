"""Attention and transformer building blocks shared by encoders and fusion."""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ValidationError


class MultiHeadAttention(nn.Module):
    """Bias-free multi-head attention with separate query and key/value inputs.

    Scores are scaled by ``sqrt(d / heads)`` per head.  ``key_mask`` is a
    boolean ``(B, Lk)`` tensor, True for real keys.
    """

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValidationError(f"embed dim {dim} not divisible by {heads} heads")
        self.dim = dim
        self.heads = heads
        self.w_q = nn.Linear(dim, dim, bias=False)
        self.w_k = nn.Linear(dim, dim, bias=False)
        self.w_v = nn.Linear(dim, dim, bias=False)
        self.w_o = nn.Linear(dim, dim, bias=False)
        for lin in (self.w_q, self.w_k, self.w_v, self.w_o):
            nn.init.normal_(lin.weight, std=dim ** -0.5)

    def _split(self, x):
        b, n, _ = x.shape
        return x.view(b, n, self.heads, self.dim // self.heads).transpose(1, 2)

    def attention_weights(self, q_in, k_in, key_mask=None):
        q = self._split(self.w_q(q_in))
        k = self._split(self.w_k(k_in))
        logits = q @ k.transpose(-1, -2) / math.sqrt(self.dim // self.heads)
        if key_mask is not None:
            logits = logits.masked_fill(~key_mask[:, None, None, :], float("-inf"))
        return torch.softmax(logits, dim=-1)

    def forward(self, q_in, k_in, v_in=None, key_mask=None, return_weights=False):
        if q_in.shape[-1] != self.dim or k_in.shape[-1] != self.dim:
            raise ValidationError(
                f"attention expects dimension {self.dim}, got {q_in.shape[-1]} and {k_in.shape[-1]}")
        if k_in.shape[-2] < 1:
            raise ValidationError("attention needs at least one key")
        v_in = k_in if v_in is None else v_in
        attn = self.attention_weights(q_in, k_in, key_mask)
        out = attn @ self._split(self.w_v(v_in))
        b, _, n, _ = out.shape
        out = self.w_o(out.transpose(1, 2).reshape(b, n, self.dim))
        return (out, attn) if return_weights else out


class TransformerBlock(nn.Module):
    """Pre-norm self-attention block: ``x + MHA(LN x)`` then ``x + MLP(LN x)``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.ln_1 = nn.LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)
        self.ln_2 = nn.LayerNorm(dim)
        self.fc_1 = nn.Linear(dim, mlp_ratio * dim)
        self.fc_2 = nn.Linear(mlp_ratio * dim, dim)

    def zero_residual(self):
        """Zero both residual-branch output projections so the block is the identity."""
        nn.init.zeros_(self.attn.w_o.weight)
        nn.init.zeros_(self.fc_2.weight)
        nn.init.zeros_(self.fc_2.bias)

    def forward(self, x, key_mask=None):
        h = self.ln_1(x)
        x = x + self.attn(h, h, h, key_mask=key_mask)
        return x + self.fc_2(F.gelu(self.fc_1(self.ln_2(x))))


class TransformerStack(nn.Module):
    def __init__(self, dim: int, heads: int, depth: int, mlp_ratio: int = 4):
        super().__init__()
        self.blocks = nn.ModuleList(TransformerBlock(dim, heads, mlp_ratio) for _ in range(depth))

    def forward(self, x, key_mask=None):
        for block in self.blocks:
            x = block(x, key_mask)
        return x


def pad_sequences(seqs, dim: int, dtype=torch.float32):
    """Stack variable-length ``(L_i, d)`` arrays into ``(B, L_max, d)`` plus a validity mask."""
    lengths = [int(s.shape[0]) for s in seqs]
    out = torch.zeros(len(seqs), max(lengths), dim, dtype=dtype)
    mask = torch.zeros(len(seqs), max(lengths), dtype=torch.bool)
    for i, s in enumerate(seqs):
        out[i, :lengths[i]] = torch.as_tensor(s, dtype=dtype)
        mask[i, :lengths[i]] = True
    return out, mask
