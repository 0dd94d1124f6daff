"""Tabular exports: omega sweeps, 2-D projections and attention heatmaps.

Every CSV carries a ``schema_version`` column so downstream readers can
detect layout changes.
"""

from __future__ import annotations

import csv
import logging
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from .errors import ValidationError
from .feature_store import DatasetManifest
from .gif_fusion import attention_heatmap
from .model import manifest_tensors
from .retrieval_eval import SCHEMA_VERSION, evaluate

log = logging.getLogger(__name__)

SWEEP_COLUMNS = ("omega", "rank1", "rank5", "rank10", "map")
PROJECTION_COLUMNS = ("sample_id", "modality", "identity", "x", "y")


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["schema_version", *columns])
        for row in rows:
            w.writerow([SCHEMA_VERSION, *row])
    return path


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def omega_sweep(manifest: DatasetManifest, model, omegas: Sequence[float],
                generated_policy: str = "zero") -> list[tuple]:
    """One evaluation per mix weight; rows of ``(omega, R-1, R-5, R-10, mAP)``."""
    if not len(omegas):
        raise ValidationError("need at least one omega")
    for w in omegas:
        if not 0.0 <= w <= 1.0:
            raise ValidationError(f"omega {w} outside [0, 1]")
    tensors = manifest_tensors(manifest, next(model.parameters()).dtype, generated_policy)
    rows = []
    for w in omegas:
        rep = evaluate(manifest, model, float(w), tensors=tensors, generated_policy=generated_policy)
        rows.append((float(w), rep.rank1, rep.rank5, rep.rank10, rep.map))
    return rows


def pca_2d(points) -> np.ndarray:
    """Project rows onto their two principal axes.

    Sign convention: each axis is flipped so its largest-magnitude loading is
    positive, which makes the output deterministic.  A zero covariance falls
    back to the first two (centred) coordinates with a warning.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise ValidationError("projection needs at least 3 points in a 2-D array")
    if x.shape[1] < 2:
        raise ValidationError("projection needs at least 2 feature dimensions")
    centred = x - x.mean(axis=0)
    _, s, vt = np.linalg.svd(centred, full_matrices=False)
    scale = s[0] if s.size else 0.0
    if scale <= 1e-12 * max(1.0, np.abs(x).max()):
        log.warning("degenerate covariance; falling back to the first two axes")
        return centred[:, :2].copy()
    axes = vt[:2]
    if s.size < 2 or s[1] <= 1e-12 * scale:
        log.warning("covariance has rank 1; second coordinate is zero")
        axes = np.vstack([vt[0], np.zeros_like(vt[0])])
    pivots = np.abs(axes).argmax(axis=1)
    signs = np.sign(axes[np.arange(2), pivots])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    return centred @ axes.T


@torch.no_grad()
def project_2d(manifest: DatasetManifest, model=None, omega: float = 0.6,
               modalities: Sequence[str] = ("image", "text", "fused"),
               generated_policy: str = "zero") -> list[tuple]:
    """Joint PCA of global image, text and mixed-text embeddings.

    Without a model the raw stored features are projected (with the mixed
    text computed directly from the stored text and generated globals).
    Rows are ``(sample_id, modality, identity, x, y)``.
    """
    unknown = set(modalities) - {"image", "text", "fused"}
    if unknown:
        raise ValidationError(f"unknown modalities {sorted(unknown)}")
    if model is None:
        from .model import GEAModel, ModelConfig
        model = GEAModel(ModelConfig(embed_dim=manifest.embedding_dim, fusion_layers=1)).double()
    model.eval()
    batch = manifest_tensors(manifest, next(model.parameters()).dtype, generated_policy)
    out = model(batch, omega=omega, with_fusion=False)
    pick = {"image": out["v"], "text": out["t"], "fused": out["t_cls"]}
    blocks, tags = [], []
    for m in modalities:
        blocks.append(pick[m].double().numpy())
        tags.extend((sid, m, int(i)) for sid, i in zip(batch.sample_ids, batch.ids.tolist()))
    xy = pca_2d(np.vstack(blocks))
    return [(*tag, float(p[0]), float(p[1])) for tag, p in zip(tags, xy)]


@torch.no_grad()
def export_heatmap(manifest: DatasetManifest, model, sample_id: str, branch: str = "text",
                   generated_policy: str = "zero") -> np.ndarray:
    """Head-averaged cross-attention of one sample's query tokens over its generated tokens."""
    if branch not in ("text", "image"):
        raise ValidationError("branch must be 'text' or 'image'")
    try:
        row = [r.sample_id for r in manifest.records].index(sample_id)
    except ValueError:
        raise ValidationError(f"sample {sample_id!r} not in manifest") from None
    model.eval()
    batch = manifest_tensors(manifest, next(model.parameters()).dtype, generated_policy).subset([row])
    enc = model.encode(batch)
    if branch == "text":
        q = enc["text"][0][batch.text_mask[0]] if batch.text_mask is not None else enc["text"][0]
    else:
        q = enc["image"][0][batch.image_mask[0]]
    k = enc["generated"][0][batch.generated_mask[0]]
    gif_branch = model.gif.text_branch if branch == "text" else model.gif.image_branch
    return attention_heatmap(q, k, gif_branch).double().numpy()


def heatmap_rows(weights: np.ndarray):
    for i, row in enumerate(np.asarray(weights)):
        for j, w in enumerate(row):
            yield (i, j, float(w))
