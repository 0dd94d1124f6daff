"""Triplet alignment loss over a batch similarity matrix.

For every image row ``i`` (and symmetrically every text column)::

    [m - S+_i + tau * log sum_j exp(S_ij / tau)]_+

where ``S+_i`` is the softmax(``S / tau``)-weighted average over the row's
positive pairs.  The log-sum-exp term runs over all ``K`` columns.  The batch
loss is the mean over ``K`` of the two directional hinge terms.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import BatchError, ValidationError
from .tgte import SimilarityMatrix

RESTRICTIONS = ("positives_only", "all_pairs")


@dataclass(frozen=True)
class TALConfig:
    margin: float = 0.1
    temperature: float = 0.015
    positive_restriction: str = "positives_only"

    def __post_init__(self):
        if self.margin <= 0:
            raise ValidationError("margin must be positive")
        if self.temperature <= 0:
            raise ValidationError("temperature must be positive")
        if self.positive_restriction not in RESTRICTIONS:
            raise ValidationError(f"positive_restriction must be one of {RESTRICTIONS}")


def _masked_softmax(logits: torch.Tensor, mask: torch.Tensor, dim: int) -> torch.Tensor:
    logits = logits.masked_fill(~mask, float("-inf"))
    peak = logits.amax(dim=dim, keepdim=True).detach()
    w = torch.exp(logits - peak)
    return w / w.sum(dim=dim, keepdim=True)


def softmax_weights(row, mask=None, tau: float = 0.015) -> torch.Tensor:
    """Max-subtracted softmax of ``row / tau`` restricted to ``mask`` (zero elsewhere)."""
    if tau <= 0:
        raise ValidationError("tau must be positive")
    row = torch.as_tensor(row, dtype=torch.float64) if not isinstance(row, torch.Tensor) else row
    if mask is None:
        mask = torch.ones_like(row, dtype=torch.bool)
    mask = torch.as_tensor(mask, dtype=torch.bool)
    if mask.shape != row.shape:
        raise ValidationError("mask shape does not match row shape")
    if not bool(mask.any()):
        raise ValidationError("softmax over an empty selection")
    return _masked_softmax(row / tau, mask, dim=-1)


def _check_positives(mask: torch.Tensor):
    empty_rows = (~mask.any(dim=1)).nonzero()
    if len(empty_rows):
        raise BatchError(f"image row {int(empty_rows[0, 0])} has no positive text in the batch")
    empty_cols = (~mask.any(dim=0)).nonzero()
    if len(empty_cols):
        raise BatchError(f"text column {int(empty_cols[0, 0])} has no positive image in the batch")


def positive_aggregate(sim: SimilarityMatrix, direction: str, config: TALConfig) -> torch.Tensor:
    """Softmax-weighted positive similarity per image row (``i2t``) or text column (``t2i``)."""
    s, mask = sim.scores, sim.positive_mask
    _check_positives(mask)
    if config.positive_restriction == "all_pairs":
        mask = torch.ones_like(mask)
    if direction == "i2t":
        alpha = _masked_softmax(s / config.temperature, mask, dim=1)
        return (alpha * s).sum(dim=1)
    if direction == "t2i":
        alpha = _masked_softmax(s / config.temperature, mask, dim=0)
        return (alpha * s).sum(dim=0)
    raise ValidationError(f"direction must be 'i2t' or 't2i', got {direction!r}")


def tal_terms(sim: SimilarityMatrix, config: TALConfig):
    """Per-sample hinge terms ``(i2t, t2i)``, each of length ``K``."""
    s = sim.scores
    if s.shape[0] != s.shape[1]:
        raise ValidationError(f"alignment loss needs a square matrix, got {tuple(s.shape)}")
    tau, m = config.temperature, config.margin
    pos_i2t = positive_aggregate(sim, "i2t", config)
    pos_t2i = positive_aggregate(sim, "t2i", config)
    lse_rows = tau * torch.logsumexp(s / tau, dim=1)
    lse_cols = tau * torch.logsumexp(s / tau, dim=0)
    return (torch.clamp(m - pos_i2t + lse_rows, min=0.0),
            torch.clamp(m - pos_t2i + lse_cols, min=0.0))


def tal(sim: SimilarityMatrix, config: TALConfig = TALConfig()) -> torch.Tensor:
    i2t, t2i = tal_terms(sim, config)
    return (i2t + t2i).mean()


def total_loss(s_global: SimilarityMatrix, s_fused: SimilarityMatrix,
               config: TALConfig = TALConfig(), fused_config: TALConfig | None = None) -> torch.Tensor:
    """Global alignment loss plus fusion alignment loss."""
    if s_global.scores.shape != s_fused.scores.shape:
        raise ValidationError(
            f"batch mismatch: {tuple(s_global.scores.shape)} vs {tuple(s_fused.scores.shape)}")
    return tal(s_global, config) + tal(s_fused, fused_config or config)
