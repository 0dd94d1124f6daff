"""Text-guided token enhancement: mix generated-image tokens into text tokens.

``t_cls = (1 - omega) * t_eos + omega * g_cls`` followed by cosine scoring
against image class tokens.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .errors import NumericError, ValidationError


@dataclass(frozen=True)
class MixSchedule:
    omega_start: float = 0.3
    omega_end: float = 0.6
    total_epochs: int = 60

    def __post_init__(self):
        if not 0.0 <= self.omega_start <= self.omega_end <= 1.0:
            raise ValidationError("need 0 <= omega_start <= omega_end <= 1")
        if self.total_epochs < 1:
            raise ValidationError("total_epochs must be positive")


def omega_at(schedule: MixSchedule, epoch: int) -> float:
    """Linear ramp from ``omega_start`` (first epoch) to ``omega_end`` (last epoch)."""
    if not 0 <= epoch < schedule.total_epochs:
        raise ValidationError(f"epoch {epoch} outside [0, {schedule.total_epochs})")
    if schedule.total_epochs == 1:
        return schedule.omega_start
    frac = epoch / (schedule.total_epochs - 1)
    return schedule.omega_start + (schedule.omega_end - schedule.omega_start) * frac


def mix_tokens(t_eos, g_cls, omega):
    """Convex combination of text and generated global tokens.

    ``omega`` may be a scalar or a per-row vector for batched ``(K, d)`` inputs.
    """
    if t_eos.shape != g_cls.shape:
        raise ValidationError(f"cannot mix tokens of shapes {tuple(t_eos.shape)} and {tuple(g_cls.shape)}")
    if isinstance(omega, (int, float)):
        if not 0.0 <= omega <= 1.0:
            raise ValidationError(f"omega must lie in [0, 1], got {omega}")
    else:
        lo, hi = float(omega.min()), float(omega.max())
        if lo < 0.0 or hi > 1.0:
            raise ValidationError("omega must lie in [0, 1]")
        if t_eos.ndim == 2:
            omega = omega[:, None]
    return (1 - omega) * t_eos + omega * g_cls


def cosine_similarity(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if u.shape != v.shape:
        raise ValidationError(f"shape mismatch {u.shape} vs {v.shape}")
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise NumericError("cosine similarity of a zero vector is undefined")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


@dataclass(frozen=True)
class SimilarityMatrix:
    """Cosine scores ``scores[i, j] = S(image_i, text_j)`` with identity labels per axis."""

    scores: torch.Tensor
    image_ids: torch.Tensor
    text_ids: torch.Tensor

    def __post_init__(self):
        s = self.scores
        if s.ndim != 2 or s.shape[0] < 1 or s.shape[1] < 1:
            raise ValidationError(f"similarity matrix must be a non-empty 2-D array, got {tuple(s.shape)}")
        if self.image_ids.shape != (s.shape[0],) or self.text_ids.shape != (s.shape[1],):
            raise ValidationError("identity labels do not match the matrix shape")

    @property
    def positive_mask(self) -> torch.Tensor:
        return self.image_ids[:, None] == self.text_ids[None, :]

    @classmethod
    def from_arrays(cls, scores, image_ids, text_ids=None, dtype=torch.float64):
        scores = torch.as_tensor(scores, dtype=dtype)
        image_ids = torch.as_tensor(np.asarray(image_ids), dtype=torch.long)
        text_ids = image_ids if text_ids is None else torch.as_tensor(np.asarray(text_ids), dtype=torch.long)
        return cls(scores, image_ids, text_ids)


def _unit_rows(x: torch.Tensor, axis_name: str) -> torch.Tensor:
    norms = x.norm(dim=1, keepdim=True)
    zero = (norms[:, 0] == 0).nonzero()
    if len(zero):
        raise NumericError(f"zero-norm {axis_name} vector at index {int(zero[0, 0])}")
    return x / norms


def similarity_matrix(images, texts, image_ids=None, text_ids=None) -> SimilarityMatrix:
    """All-pairs cosine similarity between image and (mixed) text global tokens."""
    images = torch.as_tensor(images)
    texts = torch.as_tensor(texts, dtype=images.dtype)
    if images.ndim != 2 or texts.ndim != 2 or images.shape[1] != texts.shape[1]:
        raise ValidationError(
            f"need (K, d) image and text matrices, got {tuple(images.shape)} and {tuple(texts.shape)}")
    scores = _unit_rows(images, "image") @ _unit_rows(texts, "text").T
    scores = scores.clamp(-1.0, 1.0)
    if image_ids is None:
        image_ids = torch.arange(images.shape[0])
    if text_ids is None:
        text_ids = torch.arange(texts.shape[0])
    return SimilarityMatrix(scores, torch.as_tensor(image_ids, dtype=torch.long),
                            torch.as_tensor(text_ids, dtype=torch.long))
