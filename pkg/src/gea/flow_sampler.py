"""Rectified-flow sampling of desk-scale "generated image" features.

The integrator walks a latent from ``t = 1`` (Gaussian noise) to ``t = 0``
with explicit Euler steps ``z <- z - dt * v(z, t, c)`` and hands the final
latent to a decoder.  Velocity fields and decoders are duck-typed so a real
generator can be attached behind the same two methods.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Protocol

import numpy as np

from .errors import NumericError, ValidationError
from .feature_store import FeatureBundle

_T_EPS = 1e-9


@dataclass(frozen=True)
class LatentState:
    z: np.ndarray
    t: float

    def __post_init__(self):
        if not (-_T_EPS <= self.t <= 1.0 + _T_EPS):
            raise ValidationError(f"flow time must lie in [0, 1], got {self.t}")
        if not np.isfinite(self.z).all():
            raise NumericError("latent contains non-finite values")


@dataclass(frozen=True)
class GenerationConfig:
    steps: int = 28
    guidance_scale: float = 7.0
    width: int = 1024
    height: int = 336
    positive_suffix: str = "pedestrian"
    negative_prompt: str = "cartoon"
    seed: int = 0
    latent_dim: int = 64

    def __post_init__(self):
        if self.steps < 1:
            raise ValidationError("steps must be >= 1")
        if self.guidance_scale < 0:
            raise ValidationError("guidance_scale must be >= 0")
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")


class VelocityField(Protocol):
    def evaluate(self, z: np.ndarray, t: float, c: np.ndarray) -> np.ndarray: ...


class Decoder(Protocol):
    latent_dim: int

    def decode(self, z0: np.ndarray) -> FeatureBundle: ...


def euler_step(state: LatentState, field: VelocityField, c, dt: float) -> LatentState:
    if dt < 0:
        raise ValidationError("dt must be non-negative")
    if state.t - dt < -_T_EPS:
        raise ValidationError(f"step of {dt} from t={state.t} overshoots t=0")
    if dt == 0:
        return state
    v = np.asarray(field.evaluate(state.z, state.t, c), dtype=np.float64)
    if v.shape != state.z.shape:
        raise ValidationError(f"velocity shape {v.shape} != latent shape {state.z.shape}")
    if not np.isfinite(v).all():
        raise NumericError(f"non-finite velocity at t={state.t}")
    t_next = state.t - dt
    if t_next < _T_EPS:
        t_next = 0.0
    return LatentState(state.z - dt * v, t_next)


def guided_velocity(field: VelocityField, z, t: float, c_cond, c_uncond, g: float) -> np.ndarray:
    """Classifier-free guidance: ``v_u + g * (v_c - v_u)``."""
    if g < 0:
        raise ValidationError("guidance scale must be >= 0")
    v_c = np.asarray(field.evaluate(z, t, c_cond), dtype=np.float64)
    v_u = np.asarray(field.evaluate(z, t, c_uncond), dtype=np.float64)
    return v_u + g * (v_c - v_u)


class GuidedField:
    """Wraps a field so that ``evaluate(z, t, c)`` returns the guided velocity."""

    def __init__(self, field: VelocityField, c_uncond, guidance_scale: float):
        self.field = field
        self.c_uncond = c_uncond
        self.guidance_scale = guidance_scale

    def evaluate(self, z, t, c):
        return guided_velocity(self.field, z, t, c, self.c_uncond, self.guidance_scale)


def integrate(z1: np.ndarray, field: VelocityField, c, steps: int, trajectory: bool = False):
    """Integrate ``steps`` equal Euler steps from t=1 to t=0; optionally keep every state."""
    dt = 1.0 / steps
    state = LatentState(np.asarray(z1, dtype=np.float64), 1.0)
    states = [state]
    for _ in range(steps):
        state = euler_step(state, field, c, dt)
        if trajectory:
            states.append(state)
    return states if trajectory else state


def sample(config: GenerationConfig, field: VelocityField, decoder: Decoder,
           c_cond, c_uncond) -> FeatureBundle:
    rng = np.random.default_rng(config.seed)
    z1 = rng.standard_normal(decoder.latent_dim)
    guided = GuidedField(field, c_uncond, config.guidance_scale)
    final = integrate(z1, guided, c_cond, config.steps)
    bundle = decoder.decode(final.z)
    if bundle.modality != "generated":
        bundle = FeatureBundle(bundle.global_token, bundle.tokens, "generated")
    return bundle


def build_prompt(text: str, config: GenerationConfig = GenerationConfig()) -> tuple:
    if not text or not text.strip():
        raise ValidationError("prompt text must be non-empty")
    positive = f"{text}, {config.positive_suffix}" if config.positive_suffix else text
    return positive, config.negative_prompt


def _stable_seed(*parts) -> int:
    h = hashlib.blake2b(digest_size=8)
    for p in parts:
        h.update(str(p).encode("utf-8"))
        h.update(b"\x00")
    return int.from_bytes(h.digest(), "little")


def hash_embedding(text: str, dim: int) -> np.ndarray:
    """Deterministic pseudo-random unit-variance embedding of a prompt string."""
    rng = np.random.default_rng(_stable_seed("prompt", text))
    return rng.standard_normal(dim)


class LinearTargetField:
    """Straight-line rectified-flow field toward a target latent.

    Interprets the conditioning vector as the target ``x0``; along the path
    ``z_t = t z1 + (1 - t) x0`` the velocity is ``(z_t - x0) / t``.
    """

    def __init__(self, t_min: float = 1e-6):
        self.t_min = t_min

    def evaluate(self, z, t, c):
        return (np.asarray(z) - np.asarray(c)) / max(t, self.t_min)


class LinearDecoder:
    """Fixed seeded linear map from latent space to a (1 + L)-row feature bundle."""

    def __init__(self, latent_dim: int, embed_dim: int, num_tokens: int = 1, seed: int = 0):
        self.latent_dim = latent_dim
        self.embed_dim = embed_dim
        self.num_tokens = num_tokens
        rng = np.random.default_rng(_stable_seed("decoder", seed))
        self.weight = rng.standard_normal((latent_dim, (num_tokens + 1) * embed_dim))
        self.weight /= np.sqrt(latent_dim)

    def decode(self, z0):
        out = (np.asarray(z0, dtype=np.float64) @ self.weight).reshape(self.num_tokens + 1,
                                                                      self.embed_dim)
        return FeatureBundle(out[0], out[1:], "generated")


def generate_for_text(text: str, config: GenerationConfig, embed_dim: int,
                      field: VelocityField | None = None, decoder: Decoder | None = None,
                      key: str = "") -> FeatureBundle:
    """Prompt construction, hash conditioning and sampling for one text.

    ``key`` (usually the sample id) is mixed into the seed so each record
    owns an independent noise draw.
    """
    positive, negative = build_prompt(text, config)
    field = field or LinearTargetField()
    decoder = decoder or LinearDecoder(config.latent_dim, embed_dim, seed=config.seed)
    per_text = GenerationConfig(**{**config.__dict__,
                                   "seed": _stable_seed(config.seed, key, text)})
    return sample(per_text, field, decoder,
                  hash_embedding(positive, decoder.latent_dim),
                  hash_embedding(negative, decoder.latent_dim))
