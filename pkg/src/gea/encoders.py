"""Toy image and text encoders with CLIP-style token layouts.

Images become ``M = H*W/P**2`` patch tokens behind a learned class token;
texts become ``[sos, w_1, ..., w_n, eos]`` with at most ``max_text_len``
positions.  The global representation is the class row for images and the
eos row for texts.
"""

from __future__ import annotations

import re
import zlib
from dataclasses import dataclass
from typing import Optional

import torch
from torch import nn

from .errors import ValidationError
from .layers import TransformerStack

PAD_ID, SOS_ID, EOS_ID = 0, 1, 2
_RESERVED = 3
KINDS = ("image", "text", "generated")


@dataclass(frozen=True)
class EncoderConfig:
    embed_dim: int = 512
    heads: int = 8
    layers: int = 2
    patch_size: int = 16
    image_height: int = 384
    image_width: int = 128
    channels: int = 3
    max_text_len: int = 77
    vocab_size: int = 1000

    def __post_init__(self):
        if self.image_height % self.patch_size or self.image_width % self.patch_size:
            raise ValidationError("image height and width must be divisible by the patch size")
        if self.embed_dim % self.heads:
            raise ValidationError("embed_dim must be divisible by heads")
        if self.max_text_len < 2:
            raise ValidationError("max_text_len must leave room for sos and eos")
        if self.vocab_size <= _RESERVED:
            raise ValidationError(f"vocab_size must exceed {_RESERVED}")

    @property
    def num_patches(self) -> int:
        return self.image_height * self.image_width // self.patch_size ** 2


@dataclass(frozen=True)
class TokenSequence:
    rows: torch.Tensor
    kind: str
    eos_index: Optional[int] = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValidationError(f"unknown sequence kind {self.kind!r}")
        if self.rows.ndim != 2 or self.rows.shape[0] < 1:
            raise ValidationError(f"sequence rows must be a non-empty (L, d) matrix, got {tuple(self.rows.shape)}")
        if self.kind == "text":
            eos = self.rows.shape[0] - 1 if self.eos_index is None else self.eos_index
            if not 0 <= eos < self.rows.shape[0]:
                raise ValidationError(f"eos index {eos} outside sequence of length {self.rows.shape[0]}")
            object.__setattr__(self, "eos_index", eos)

    def __len__(self):
        return int(self.rows.shape[0])

    @property
    def global_index(self) -> int:
        return self.eos_index if self.kind == "text" else 0


def select_global(seq: TokenSequence) -> torch.Tensor:
    return seq.rows[seq.global_index]


def patchify(image, patch_size: int):
    """Split an ``(H, W, C)`` array into row-major flattened ``P x P x C`` patches.

    Works for numpy arrays and torch tensors alike.
    """
    if image.ndim == 2:
        image = image[..., None]
    h, w, c = image.shape
    p = patch_size
    if p <= 0 or h % p or w % p:
        raise ValidationError(f"image of size {h}x{w} is not divisible into {p}x{p} patches")
    x = image.reshape(h // p, p, w // p, p, c)
    x = x.permute(0, 2, 1, 3, 4) if isinstance(x, torch.Tensor) else x.transpose(0, 2, 1, 3, 4)
    return x.reshape((h // p) * (w // p), p * p * c)


class HashTokenizer:
    """Lower-case, whitespace split, stable hash into the configured vocabulary."""

    def __init__(self, vocab_size: int, max_len: int = 77):
        self.vocab_size = vocab_size
        self.max_len = max_len

    def word_id(self, word: str) -> int:
        return _RESERVED + zlib.crc32(word.encode("utf-8")) % (self.vocab_size - _RESERVED)

    def __call__(self, text: str) -> list:
        words = re.split(r"\s+", text.lower().strip())
        words = [w for w in words if w]
        if not words:
            raise ValidationError("cannot tokenize empty text")
        ids = [self.word_id(w) for w in words[: self.max_len - 2]]
        return [SOS_ID] + ids + [EOS_ID]


class ImageEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        patch_dim = config.patch_size ** 2 * config.channels
        self.patch_embed = nn.Linear(patch_dim, d, bias=False)
        self.cls_token = nn.Parameter(torch.randn(d) * 0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.num_patches + 1, d) * 0.02)
        self.blocks = TransformerStack(d, config.heads, config.layers)

    def embed(self, patches):
        x = self.patch_embed(patches)
        cls = self.cls_token.expand(x.shape[0], 1, -1)
        return torch.cat([cls, x], dim=1) + self.pos_embed

    def forward(self, patches):
        """``(B, M, P*P*C)`` patches -> ``(B, M + 1, d)`` tokens, class token first."""
        m = self.config.num_patches
        if patches.ndim != 3 or patches.shape[1] != m or patches.shape[2] != self.patch_embed.in_features:
            raise ValidationError(
                f"expected patches of shape (B, {m}, {self.patch_embed.in_features}), got {tuple(patches.shape)}")
        return self.blocks(self.embed(patches))


class TextEncoder(nn.Module):
    def __init__(self, config: EncoderConfig, tokenizer=None):
        super().__init__()
        self.config = config
        self.tokenizer = tokenizer or HashTokenizer(config.vocab_size, config.max_text_len)
        d = config.embed_dim
        self.token_embed = nn.Embedding(config.vocab_size, d)
        nn.init.normal_(self.token_embed.weight, std=0.02)
        self.pos_embed = nn.Parameter(torch.randn(config.max_text_len, d) * 0.01)
        self.blocks = TransformerStack(d, config.heads, config.layers)

    def tokenize_batch(self, texts):
        ids = [self.tokenizer(t) for t in texts]
        n = max(len(i) for i in ids)
        out = torch.full((len(ids), n), PAD_ID, dtype=torch.long)
        mask = torch.zeros(len(ids), n, dtype=torch.bool)
        for row, seq in enumerate(ids):
            out[row, :len(seq)] = torch.tensor(seq)
            mask[row, :len(seq)] = True
        return out, mask

    def forward(self, ids, mask):
        """Returns ``(B, L, d)`` tokens and the eos index of every row."""
        x = self.token_embed(ids) + self.pos_embed[: ids.shape[1]]
        eos = mask.sum(dim=1) - 1
        return self.blocks(x, key_mask=mask), eos


def _as_patches(image_or_patches, config: EncoderConfig, dtype):
    x = torch.as_tensor(image_or_patches, dtype=dtype)
    if x.ndim == 3 and x.shape[:2] == (config.image_height, config.image_width):
        x = patchify(x, config.patch_size)
    return x


def encode_image(image_or_patches, encoder: ImageEncoder) -> TokenSequence:
    """Encode one image (``H x W x C``) or its ``M`` patches into ``M + 1`` tokens."""
    dtype = encoder.patch_embed.weight.dtype
    patches = _as_patches(image_or_patches, encoder.config, dtype)
    if patches.ndim != 2:
        raise ValidationError(f"expected an image or an (M, patch_dim) patch matrix, got {tuple(patches.shape)}")
    return TokenSequence(encoder(patches[None])[0], "image")


def encode_text(text: str, encoder: TextEncoder) -> TokenSequence:
    if not isinstance(text, str) or not text.strip():
        raise ValidationError("text must be non-empty")
    ids, mask = encoder.tokenize_batch([text])
    rows, eos = encoder(ids, mask)
    return TokenSequence(rows[0], "text", int(eos[0]))
