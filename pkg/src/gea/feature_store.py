"""Samples, manifests and the binary feature-file format.

Feature files (``.geaf``) are little-endian::

    b"GEAF" | version:u32 = 1 | L:u32 | d:u32 | (L + 1) * d float32

The global token comes first, followed by the ``L`` token rows in order.
A feature reference in a manifest is either a path (relative to the
manifest's directory) or an inline ``base64:`` string holding the same bytes.
"""

from __future__ import annotations

import base64
import json
import os
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Mapping, Optional, Sequence

import numpy as np

from .errors import FeatureLoadError, ManifestParseError, ValidationError

MAGIC = b"GEAF"
VERSION = 1
_HEADER = struct.Struct("<4sIII")
_DTYPE = np.dtype("<f4")
INLINE_PREFIX = "base64:"

MODALITIES = ("image", "text", "generated")
SPLITS = ("train", "val", "test")


@dataclass(frozen=True, eq=False)
class FeatureBundle:
    """A global token plus ``L`` sequence tokens of one sample in one modality."""

    global_token: np.ndarray
    tokens: np.ndarray
    modality: str = "image"

    def __post_init__(self):
        g = np.ascontiguousarray(self.global_token, dtype=np.float32)
        t = np.ascontiguousarray(self.tokens, dtype=np.float32)
        if g.ndim != 1:
            raise ValidationError(f"global token must be a vector, got shape {g.shape}")
        if t.size == 0:
            t = t.reshape(0, g.shape[0])
        if t.ndim != 2 or t.shape[1] != g.shape[0]:
            raise ValidationError(
                f"token rows must have dimension {g.shape[0]}, got shape {t.shape}")
        if self.modality not in MODALITIES:
            raise ValidationError(f"unknown modality {self.modality!r}")
        if not (np.isfinite(g).all() and np.isfinite(t).all()):
            raise ValidationError("feature bundle contains non-finite values")
        g.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "global_token", g)
        object.__setattr__(self, "tokens", t)

    @property
    def dim(self) -> int:
        return int(self.global_token.shape[0])

    @property
    def num_tokens(self) -> int:
        return int(self.tokens.shape[0])

    def __eq__(self, other):
        if not isinstance(other, FeatureBundle):
            return NotImplemented
        return (self.modality == other.modality
                and self.global_token.tobytes() == other.global_token.tobytes()
                and self.tokens.shape == other.tokens.shape
                and self.tokens.tobytes() == other.tokens.tobytes())

    __hash__ = None


def encode_feature_bundle(bundle: FeatureBundle) -> bytes:
    header = _HEADER.pack(MAGIC, VERSION, bundle.num_tokens, bundle.dim)
    payload = np.concatenate([bundle.global_token[None, :], bundle.tokens], axis=0)
    return header + payload.astype(_DTYPE, copy=False).tobytes()


def decode_feature_bundle(data: bytes, expected_dim: Optional[int] = None,
                          modality: str = "image", source: str = "<bytes>") -> FeatureBundle:
    if len(data) < _HEADER.size:
        raise FeatureLoadError(f"{source}: truncated header ({len(data)} bytes)")
    magic, version, n_tokens, dim = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise FeatureLoadError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise FeatureLoadError(f"{source}: unsupported version {version}")
    if dim == 0:
        raise FeatureLoadError(f"{source}: zero embedding dimension")
    expected = _HEADER.size + (n_tokens + 1) * dim * _DTYPE.itemsize
    if len(data) != expected:
        raise FeatureLoadError(
            f"{source}: payload size {len(data)} does not match header (L={n_tokens}, d={dim})")
    if expected_dim is not None and dim != expected_dim:
        raise ValidationError(f"{source}: dimension {dim} != expected {expected_dim}")
    arr = np.frombuffer(data, dtype=_DTYPE, offset=_HEADER.size).reshape(n_tokens + 1, dim)
    if not np.isfinite(arr).all():
        raise FeatureLoadError(f"{source}: non-finite values in payload")
    arr = arr.astype(np.float32)
    return FeatureBundle(arr[0], arr[1:], modality)


def write_feature_bundle(bundle: FeatureBundle, path) -> None:
    """Write ``bundle`` to ``path``; raises ``OSError`` if the path is unwritable."""
    data = encode_feature_bundle(bundle)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(data)


def inline_ref(bundle: FeatureBundle) -> str:
    return INLINE_PREFIX + base64.b64encode(encode_feature_bundle(bundle)).decode("ascii")


def load_feature_bundle(ref, expected_dim: Optional[int] = None, modality: str = "image",
                        root=None) -> FeatureBundle:
    """Load a bundle from a path or an inline ``base64:`` reference.

    Relative paths resolve against ``root`` when given.
    """
    if isinstance(ref, FeatureBundle):
        if expected_dim is not None and ref.dim != expected_dim:
            raise ValidationError(f"dimension {ref.dim} != expected {expected_dim}")
        return ref
    ref = str(ref)
    if ref.startswith(INLINE_PREFIX):
        try:
            data = base64.b64decode(ref[len(INLINE_PREFIX):], validate=True)
        except ValueError as exc:
            raise FeatureLoadError(f"inline feature: invalid base64 ({exc})") from None
        return decode_feature_bundle(data, expected_dim, modality, source="<inline>")
    path = Path(ref)
    if root is not None and not path.is_absolute():
        path = Path(root) / path
    try:
        data = path.read_bytes()
    except FileNotFoundError:
        raise FeatureLoadError(f"{path}: feature file not found") from None
    return decode_feature_bundle(data, expected_dim, modality, source=str(path))


@dataclass(frozen=True)
class Sample:
    sample_id: str
    identity: int
    text: str
    image_feature: str
    generated_feature: Optional[str] = None
    # Extension: precomputed text features bypass the text encoder.
    text_feature: Optional[str] = None

    def to_json(self) -> dict:
        out = {"sample_id": self.sample_id, "identity": self.identity, "text": self.text,
               "image_feature": self.image_feature,
               "generated_feature": self.generated_feature}
        if self.text_feature is not None:
            out["text_feature"] = self.text_feature
        return out


@dataclass(frozen=True)
class SampleFeatures:
    image: FeatureBundle
    generated: Optional[FeatureBundle] = None
    text: Optional[FeatureBundle] = None


@dataclass(frozen=True)
class DatasetManifest:
    """Validated, immutable view of a manifest and its loaded features."""

    records: tuple
    embedding_dim: int
    split: str
    root: Optional[Path] = None
    features: Mapping[str, SampleFeatures] = field(default_factory=dict, repr=False)

    def __len__(self):
        return len(self.records)

    @property
    def identities(self) -> np.ndarray:
        return np.array([r.identity for r in self.records], dtype=np.int64)

    @property
    def num_identities(self) -> int:
        return len({r.identity for r in self.records})

    @property
    def has_text_features(self) -> bool:
        return bool(self.records) and all(r.text_feature is not None for r in self.records)

    def to_json(self) -> dict:
        return {"embedding_dim": self.embedding_dim, "split": self.split,
                "records": [r.to_json() for r in self.records]}

    def with_records(self, records: Sequence[Sample]) -> "DatasetManifest":
        return build_manifest(records, self.embedding_dim, self.split, self.root)


def _fail(index, sample_id, msg):
    who = f"record {index}" + (f" ({sample_id!r})" if sample_id else "")
    raise ManifestParseError(f"{who}: {msg}")


def _parse_record(index: int, raw) -> Sample:
    if not isinstance(raw, dict):
        _fail(index, None, "record must be an object")
    sid = raw.get("sample_id")
    if not isinstance(sid, str) or not sid:
        _fail(index, None, "sample_id must be a non-empty string")
    ident = raw.get("identity")
    if isinstance(ident, bool) or not isinstance(ident, int) or ident < 0:
        _fail(index, sid, "identity must be a non-negative integer")
    text = raw.get("text")
    if not isinstance(text, str) or not text.strip():
        _fail(index, sid, "text must be a non-empty string")
    img = raw.get("image_feature")
    if not isinstance(img, str) or not img:
        _fail(index, sid, "image_feature must be a string")
    gen = raw.get("generated_feature")
    if gen is not None and not isinstance(gen, str):
        _fail(index, sid, "generated_feature must be a string or null")
    txt = raw.get("text_feature")
    if txt is not None and not isinstance(txt, str):
        _fail(index, sid, "text_feature must be a string or null")
    return Sample(sid, ident, text, img, gen, txt)


def _load_sample_features(rec: Sample, dim: int, root) -> SampleFeatures:
    def load(ref, modality):
        if ref is None:
            return None
        try:
            return load_feature_bundle(ref, dim, modality, root)
        except FeatureLoadError as exc:
            raise FeatureLoadError(f"sample {rec.sample_id!r}: {exc}") from None
        except ValidationError as exc:
            raise ValidationError(f"sample {rec.sample_id!r}: {exc}") from None

    return SampleFeatures(load(rec.image_feature, "image"),
                          load(rec.generated_feature, "generated"),
                          load(rec.text_feature, "text"))


def build_manifest(records: Sequence[Sample], embedding_dim: int, split: str,
                   root=None, workers: int = 1) -> DatasetManifest:
    """Validate ``records`` and load every referenced feature bundle."""
    if isinstance(embedding_dim, bool) or not isinstance(embedding_dim, int) or embedding_dim <= 0:
        raise ManifestParseError("embedding_dim must be a positive integer")
    if split not in SPLITS:
        raise ManifestParseError(f"split must be one of {SPLITS}, got {split!r}")
    records = tuple(records)
    seen = set()
    for rec in records:
        if rec.sample_id in seen:
            raise ManifestParseError(f"duplicate sample_id {rec.sample_id!r}")
        seen.add(rec.sample_id)
    ids = {rec.identity for rec in records}
    if ids and ids != set(range(len(ids))):
        raise ValidationError(
            f"identity labels must be dense in [0, {len(ids)}), got max {max(ids)}")

    if workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(workers) as pool:
            loaded = list(pool.map(lambda r: _load_sample_features(r, embedding_dim, root), records))
    else:
        loaded = [_load_sample_features(r, embedding_dim, root) for r in records]
    feats = MappingProxyType({r.sample_id: f for r, f in zip(records, loaded)})
    return DatasetManifest(records, embedding_dim, split,
                           Path(root) if root is not None else None, feats)


def parse_manifest(obj, root=None, workers: int = 1) -> DatasetManifest:
    if not isinstance(obj, dict):
        raise ManifestParseError("manifest must be a JSON object")
    for key in ("embedding_dim", "split", "records"):
        if key not in obj:
            raise ManifestParseError(f"manifest is missing {key!r}")
    if not isinstance(obj["records"], list):
        raise ManifestParseError("records must be a list")
    records = [_parse_record(i, raw) for i, raw in enumerate(obj["records"])]
    return build_manifest(records, obj["embedding_dim"], obj["split"], root, workers)


def ingest_manifest(path, workers: int = 1) -> DatasetManifest:
    """Read, validate and load a manifest JSON file."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ManifestParseError(f"{path}: manifest not found") from None
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ManifestParseError(f"{path}: invalid JSON ({exc})") from None
    return parse_manifest(obj, root=path.parent, workers=workers)


def write_manifest(manifest: DatasetManifest, path) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_text(json.dumps(manifest.to_json(), indent=1) + "\n", encoding="utf-8")
    os.replace(tmp, path)
