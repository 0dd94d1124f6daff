"""Generation-enhanced alignment for text-to-image person retrieval, at desk scale."""

from .errors import GEAError, NumericError, ValidationError
from .feature_store import (DatasetManifest, FeatureBundle, Sample, ingest_manifest,
                            load_feature_bundle, write_feature_bundle)
from .tal_loss import TALConfig, tal, total_loss
from .tgte import MixSchedule, cosine_similarity, mix_tokens, omega_at, similarity_matrix

__version__ = "0.1.0"
