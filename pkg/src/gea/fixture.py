"""Synthetic identity dataset standing in for pedestrian retrieval benchmarks.

Every identity owns a unit anchor inside a low-dimensional *signal*
subspace.  Each sample's image, text and generated features are copies of
that anchor plus

* in-signal noise, which no linear map can remove (text and generated
  features share part of theirs, the way a text-conditioned generator
  inherits what its prompt says);
* large *nuisance* noise in an orthogonal subspace, plus a constant text
  offset there (a modality gap), which a learned projection can suppress.

With ``noise=0`` all three modalities equal the anchor exactly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .feature_store import FeatureBundle, Sample, build_manifest, write_feature_bundle

WORDS = ("man woman young old tall short wearing black white red blue green grey yellow "
         "jacket coat shirt dress skirt jeans shorts backpack bag hat shoes sneakers boots "
         "long short hair glasses striped patterned carrying walking holding").split()
SPLIT_CODES = {"train": 1, "val": 2, "test": 3}


@dataclass(frozen=True)
class FixtureSpec:
    num_identities: int = 32
    texts_per_identity: int = 4
    dim: int = 512
    noise: float = 1.0
    seed: int = 0
    num_tokens: int = 4
    signal_noise: float = 0.6
    nuisance_scale: float = 2.0
    gap_scale: float = 3.0
    image_gap_scale: float = 3.0
    token_jitter: float = 0.3
    token_mode: str = "jitter"
    text_generated_corr: float = 0.5
    max_signal_dim: int = 32
    max_nuisance_dim: int = 2

    def __post_init__(self):
        for name in ("num_identities", "texts_per_identity", "dim", "num_tokens"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")

    @property
    def signal_dim(self) -> int:
        return max(1, min(self.max_signal_dim, self.dim // 4))

    @property
    def nuisance_dim(self) -> int:
        return max(0, min(self.max_nuisance_dim, self.dim - self.signal_dim - 2))


def _describe(rng, identity_words):
    k = rng.integers(3, len(identity_words) + 1)
    words = list(rng.choice(identity_words, size=k, replace=False))
    return "a person " + " ".join(words)


def _split_samples(spec: FixtureSpec, basis, anchors, rng, split):
    d, r, q = spec.dim, spec.signal_dim, spec.nuisance_dim
    us, un = basis[:, :r], basis[:, r:r + 2 + q]
    gap_img = spec.image_gap_scale * basis[:, r] if basis.shape[1] > r else np.zeros(d)
    gap_txt = spec.gap_scale * basis[:, r + 1] if basis.shape[1] > r + 1 else np.zeros(d)
    rho = spec.text_generated_corr
    out = []
    for ident in range(spec.num_identities):
        words = np.random.default_rng([spec.seed, ident, 7]).choice(WORDS, size=6, replace=False)
        for k in range(spec.texts_per_identity):
            sig = lambda: rng.standard_normal(r) / np.sqrt(r) * spec.signal_noise
            nui = lambda: rng.standard_normal(un.shape[1]) / np.sqrt(max(un.shape[1], 1)) * spec.nuisance_scale
            a = anchors[ident]
            e_txt = sig()

            def draw(gap, base=None):
                e = sig() if base is None else rho * base + np.sqrt(1 - rho ** 2) * sig()
                return us @ (a + spec.noise * e) + spec.noise * (un @ nui() + gap)

            def bundle(g, gap, modality, base=None):
                if spec.token_mode == "views":
                    # Token rows are further independent looks at the same identity.
                    rows = np.stack([draw(gap, base) for _ in range(spec.num_tokens)])
                else:
                    jitter = rng.standard_normal((spec.num_tokens, d)) / np.sqrt(d)
                    rows = g[None] + spec.noise * spec.token_jitter * jitter
                return FeatureBundle(g, rows, modality)

            txt = us @ (a + spec.noise * e_txt) + spec.noise * (un @ nui() + gap_txt)
            img_b = bundle(draw(gap_img), gap_img, "image")
            txt_b = bundle(txt, gap_txt, "text")
            gen_b = bundle(draw(gap_img, e_txt), gap_img, "generated", e_txt)
            out.append((f"{split}-{ident:04d}-{k}", ident, _describe(rng, words), img_b, txt_b, gen_b))
    return out


def make_fixture(out_dir, num_identities: int = 32, texts_per_identity: int = 4, dim: int = 512,
                 noise: float = 1.0, seed: int = 0, splits=("train", "val", "test"), **kwargs):
    """Write a synthetic fixture (features + one manifest per split); returns the manifests.

    All splits share the identities and subspaces but draw fresh samples.
    """
    spec = FixtureSpec(num_identities, texts_per_identity, dim, noise, seed, **kwargs)
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    r, q = spec.signal_dim, spec.nuisance_dim
    basis, _ = np.linalg.qr(rng.standard_normal((dim, min(dim, r + 2 + q))))
    anchors = rng.standard_normal((num_identities, r))
    anchors /= np.linalg.norm(anchors, axis=1, keepdims=True)

    manifests = {}
    for split in splits:
        split_rng = np.random.default_rng([seed, SPLIT_CODES[split]])
        records = []
        for sid, ident, text, img, txt, gen in _split_samples(spec, basis, anchors, split_rng, split):
            refs = {}
            for name, b in (("img", img), ("txt", txt), ("gen", gen)):
                rel = f"features/{sid}.{name}.geaf"
                write_feature_bundle(b, out / rel)
                refs[name] = rel
            records.append(Sample(sid, ident, text, refs["img"], refs["gen"], refs["txt"]))
        manifest = build_manifest(records, dim, split, out)
        (out / f"{split}.json").write_text(json.dumps(manifest.to_json(), indent=1) + "\n")
        manifests[split] = manifest
    (out / "fixture.json").write_text(json.dumps({"schema_version": 1, **spec.__dict__}, indent=1) + "\n")
    return manifests

