"""The trainable GEA stack on top of (frozen or encoded) features."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np
import torch
from torch import nn

from .encoders import EncoderConfig, TextEncoder
from .errors import ValidationError
from .feature_store import DatasetManifest
from .flow_sampler import GenerationConfig, generate_for_text
from .gif_fusion import GifConfig, GifFusion
from .layers import pad_sequences
from .tgte import mix_tokens, similarity_matrix

GENERATED_POLICIES = ("zero", "flow")


@dataclass(frozen=True)
class ModelConfig:
    embed_dim: int = 512
    heads: int = 8
    fusion_layers: int = 6
    mlp_ratio: int = 4
    # "features": texts arrive as precomputed bundles; "encoder": desk text encoder.
    text_mode: str = "features"
    encoder_layers: int = 2
    vocab_size: int = 1000
    max_text_len: int = 77

    def __post_init__(self):
        if self.text_mode not in ("features", "encoder"):
            raise ValidationError(f"unknown text_mode {self.text_mode!r}")

    def to_dict(self):
        return asdict(self)


class GEAModel(nn.Module):
    """Projection heads, optional desk text encoder and the GIF fusion branches.

    Image and generated-image tokens share ``image_proj``; text tokens go
    through ``text_proj``.  Both start as the identity so an untrained model
    scores raw features.
    """

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        d = config.embed_dim
        self.image_proj = nn.Linear(d, d, bias=False)
        self.text_proj = nn.Linear(d, d, bias=False)
        nn.init.eye_(self.image_proj.weight)
        nn.init.eye_(self.text_proj.weight)
        self.text_encoder = None
        if config.text_mode == "encoder":
            self.text_encoder = TextEncoder(EncoderConfig(
                embed_dim=d, heads=config.heads, layers=config.encoder_layers,
                vocab_size=config.vocab_size, max_text_len=config.max_text_len))
        self.gif = GifFusion(GifConfig(d, config.heads, config.fusion_layers, config.mlp_ratio))

    def param_groups(self):
        backbone = [p for n, p in self.named_parameters() if not n.startswith("gif.")]
        fusion = list(self.gif.parameters())
        return {"backbone": backbone, "fusion": fusion}

    def encode(self, batch: "FeatureBatch"):
        img = self.image_proj(batch.image)
        gen = self.image_proj(batch.generated)
        if self.text_encoder is not None:
            ids, mask = self.text_encoder.tokenize_batch(batch.texts)
            txt, eos = self.text_encoder(ids, mask)
            txt = self.text_proj(txt)
        else:
            txt, mask, eos = self.text_proj(batch.text), batch.text_mask, batch.text_eos
        return {"image": img, "generated": gen, "text": txt, "text_mask": mask, "text_eos": eos}

    def forward(self, batch: "FeatureBatch", omega: float = 0.0, with_fusion: bool = True):
        enc = self.encode(batch)
        rows = torch.arange(len(batch))
        v = enc["image"][:, 0]
        t = enc["text"][rows, enc["text_eos"]]
        g = enc["generated"][:, 0]
        # Samples without a generated feature fall back to omega = 0.
        w = torch.where(batch.has_generated, torch.as_tensor(omega, dtype=v.dtype), torch.zeros((), dtype=v.dtype))
        out = {"v": v, "t": t, "g": g, "t_cls": mix_tokens(t, g, w)}
        if with_fusion:
            out["vf"] = self.gif.fuse_image_batch(enc["image"], enc["generated"], batch.image_mask,
                                                 batch.generated_mask)
            out["tf"] = self.gif.fuse_text_batch(enc["text"], enc["text_eos"], enc["generated"],
                                                enc["text_mask"], batch.generated_mask)
        out["encoded"] = enc
        return out


@dataclass
class FeatureBatch:
    ids: torch.Tensor
    sample_ids: list
    texts: list
    image: torch.Tensor
    image_mask: torch.Tensor
    generated: torch.Tensor
    generated_mask: torch.Tensor
    has_generated: torch.Tensor
    text: Optional[torch.Tensor] = None
    text_mask: Optional[torch.Tensor] = None
    text_eos: Optional[torch.Tensor] = None
    image_refs: list = field(default_factory=list)

    def __len__(self):
        return len(self.sample_ids)

    def subset(self, idx) -> "FeatureBatch":
        idx = torch.as_tensor(np.asarray(idx), dtype=torch.long)
        pick = lambda x: None if x is None else x[idx]
        il = idx.tolist()
        return FeatureBatch(self.ids[idx], [self.sample_ids[i] for i in il], [self.texts[i] for i in il],
                            self.image[idx], self.image_mask[idx], self.generated[idx],
                            self.generated_mask[idx], self.has_generated[idx], pick(self.text),
                            pick(self.text_mask), pick(self.text_eos),
                            [self.image_refs[i] for i in il] if self.image_refs else [])


def manifest_tensors(manifest: DatasetManifest, dtype=torch.float32, generated_policy: str = "zero",
                     generation: GenerationConfig | None = None) -> FeatureBatch:
    """Pad every record's features into batch tensors.

    Image and generated sequences are ``[global, tokens...]``; text sequences
    are ``[tokens..., global]`` so the global row sits at the eos position.
    Missing generated features become a single zero row (``zero``) or are
    sampled once from the desk flow generator (``flow``).
    """
    if generated_policy not in GENERATED_POLICIES:
        raise ValidationError(f"generated_policy must be one of {GENERATED_POLICIES}")
    if not len(manifest):
        raise ValidationError("manifest has no records")
    d = manifest.embedding_dim
    imgs, gens, txts, present = [], [], [], []
    for rec in manifest.records:
        f = manifest.features[rec.sample_id]
        imgs.append(np.vstack([f.image.global_token[None], f.image.tokens]))
        gen = f.generated
        if gen is None and generated_policy == "flow":
            gen = generate_for_text(rec.text, generation or GenerationConfig(), d, key=rec.sample_id)
        if gen is None:
            gens.append(np.zeros((1, d), dtype=np.float32))
            present.append(False)
        else:
            gens.append(np.vstack([gen.global_token[None], gen.tokens]))
            present.append(True)
        if f.text is not None:
            txts.append(np.vstack([f.text.tokens, f.text.global_token[None]]))
    image, image_mask = pad_sequences(imgs, d, dtype)
    generated, generated_mask = pad_sequences(gens, d, dtype)
    batch = FeatureBatch(torch.as_tensor(manifest.identities), [r.sample_id for r in manifest.records],
                         [r.text for r in manifest.records], image, image_mask, generated,
                         generated_mask, torch.tensor(present), image_refs=[r.image_feature for r in manifest.records])
    if len(txts) == len(manifest.records):
        batch.text, batch.text_mask = pad_sequences(txts, d, dtype)
        batch.text_eos = torch.tensor([t.shape[0] - 1 for t in txts])
    return batch


def batch_similarity(out, ids, fused: bool = False):
    if fused:
        return similarity_matrix(out["vf"], out["tf"], ids, ids)
    return similarity_matrix(out["v"], out["t_cls"], ids, ids)
