"""Text-to-image retrieval metrics: Rank-k (CMC) and mean average precision."""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
import torch

from .errors import ValidationError
from .feature_store import DatasetManifest
from .model import manifest_tensors
from .tgte import similarity_matrix

SCHEMA_VERSION = 1


def _check(scores, relevance):
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(relevance, dtype=bool)
    if scores.ndim != 2 or scores.shape != relevance.shape:
        raise ValidationError(f"scores {scores.shape} and relevance {relevance.shape} must be equal 2-D shapes")
    if scores.shape[0] == 0 or scores.shape[1] == 0:
        raise ValidationError("need at least one query and one gallery item")
    empty = np.nonzero(~relevance.any(axis=1))[0]
    if len(empty):
        raise ValidationError(f"query {int(empty[0])} has no relevant gallery item")
    return scores, relevance


def ranked_relevance(scores, relevance) -> np.ndarray:
    """Relevance re-ordered by descending score; ties keep the lower gallery index first."""
    scores, relevance = _check(scores, relevance)
    order = np.argsort(-scores, axis=1, kind="stable")
    return np.take_along_axis(relevance, order, axis=1)


def first_hit_ranks(scores, relevance) -> np.ndarray:
    """0-based position of the best-ranked positive for every query."""
    return ranked_relevance(scores, relevance).argmax(axis=1)


def rank_k(scores, relevance, ks: Sequence[int] = (1, 5, 10)) -> dict:
    """Percentage of queries whose first positive lies in the top ``k``."""
    scores, relevance = _check(scores, relevance)
    if max(ks) > scores.shape[1]:
        raise ValidationError(f"gallery of {scores.shape[1]} items is smaller than k={max(ks)}")
    first = first_hit_ranks(scores, relevance)
    return {k: 100.0 * float(np.mean(first < k)) for k in ks}


def average_precision(scores, relevance) -> np.ndarray:
    rel = ranked_relevance(scores, relevance)
    hits = np.cumsum(rel, axis=1)
    positions = np.arange(1, rel.shape[1] + 1)
    precision = hits / positions
    return (precision * rel).sum(axis=1) / rel.sum(axis=1)


def mean_average_precision(scores, relevance) -> float:
    return float(np.mean(average_precision(scores, relevance)))


@dataclass
class RetrievalReport:
    rank1: float
    rank5: float
    rank10: float
    map: float
    per_query_ranks: list
    num_queries: int
    num_gallery: int
    config_digest: str = ""
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **asdict(self)}

    def table(self) -> str:
        rows = [("R-1", self.rank1), ("R-5", self.rank5), ("R-10", self.rank10), ("mAP", 100 * self.map)]
        return "\n".join(f"{name:<6}{value:>8.2f}" for name, value in rows)


def digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def report_from_scores(scores, query_ids, gallery_ids, config_digest: str = "", meta=None) -> RetrievalReport:
    scores = np.asarray(scores, dtype=np.float64)
    relevance = np.asarray(query_ids)[:, None] == np.asarray(gallery_ids)[None, :]
    # Small galleries: a Rank-k with k beyond the gallery size is 100 by definition.
    ranks = rank_k(scores, relevance, [k for k in (1, 5, 10) if k <= scores.shape[1]])
    r = [ranks.get(k, 100.0) for k in (1, 5, 10)]
    first = first_hit_ranks(scores, relevance)
    return RetrievalReport(r[0], r[1], r[2], mean_average_precision(scores, relevance),
                           (first + 1).tolist(), scores.shape[0], scores.shape[1],
                           config_digest, dict(meta or {}))


@torch.no_grad()
def retrieval_scores(manifest: DatasetManifest, model, omega: float = 0.0,
                     use_fused_rerank: bool = False, generated_policy: str = "zero",
                     tensors=None):
    """Query-by-gallery score matrix for text queries against the image gallery.

    The gallery is the set of distinct image references in the manifest;
    every record contributes one text query.
    """
    if manifest.split not in ("val", "test"):
        raise ValidationError(f"evaluation needs a val/test manifest, got split {manifest.split!r}")
    if not len(manifest):
        raise ValidationError("empty query/gallery set")
    model.eval()
    dtype = next(model.parameters()).dtype
    batch = tensors if tensors is not None else manifest_tensors(manifest, dtype, generated_policy)
    out = model(batch, omega=omega, with_fusion=False)
    gallery_index = {}
    for i, ref in enumerate(batch.image_refs):
        gallery_index.setdefault(ref, i)
    g_rows = torch.tensor(list(gallery_index.values()))
    gallery_ids = batch.ids[g_rows]
    scores = similarity_matrix(out["t_cls"], out["v"][g_rows]).scores
    if use_fused_rerank:
        scores = scores + _fused_scores(model, batch, out, g_rows)
    return scores.double().numpy(), batch.ids.numpy(), gallery_ids.numpy()


def _fused_scores(model, batch, out, g_rows):
    enc = out["encoded"]
    gif = model.gif
    n_q, n_g = len(batch), len(g_rows)
    tf = gif.fuse_text_batch(enc["text"], enc["text_eos"], enc["generated"], enc["text_mask"],
                             batch.generated_mask)
    img, img_mask = enc["image"][g_rows], batch.image_mask[g_rows]
    scores = torch.empty(n_q, n_g, dtype=tf.dtype)
    for q in range(n_q):
        gen = enc["generated"][q:q + 1].expand(n_g, -1, -1)
        gmask = batch.generated_mask[q:q + 1].expand(n_g, -1)
        vf = gif.fuse_image_batch(img, gen, img_mask, gmask)
        scores[q] = similarity_matrix(tf[q:q + 1], vf).scores[0]
    return scores


def evaluate(manifest: DatasetManifest, model, omega: float = 0.0, use_fused_rerank: bool = False,
             config_digest: str = "", generated_policy: str = "zero", tensors=None) -> RetrievalReport:
    scores, qids, gids = retrieval_scores(manifest, model, omega, use_fused_rerank,
                                          generated_policy, tensors)
    return report_from_scores(scores, qids, gids, config_digest,
                              {"omega": omega, "rerank_fused": use_fused_rerank, "split": manifest.split})
