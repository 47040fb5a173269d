"""Frozen surrogate encoders standing in for a vision-language backbone.

The image path is ``relu(a @ W_frozen)`` followed by a trainable affine
adapter and unit normalisation.  The text path mean-pools prompt tokens and
applies a frozen projection.  Frozen weights are drawn from a seeded
uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)).
"""
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc


@dataclass
class EncoderConfig:
    d_feat: int = 64
    d_tok: int = 32
    d_emb: int = 64
    seed: int = 0
    adapter_enabled: bool = True

    def validate(self):
        for name in ("d_feat", "d_tok", "d_emb"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 bits")


def _uniform(rng, fan_in, shape):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ImageEncoder:
    def __init__(self, frozen, adapter_w, adapter_b, adapter_enabled=True):
        self.frozen = frozen  # plain ndarray, never receives gradients
        self.adapter_w = dc.Tensor(adapter_w, requires_grad=adapter_enabled, name="adapter.w")
        self.adapter_b = dc.Tensor(adapter_b, requires_grad=adapter_enabled, name="adapter.b")
        self.adapter_enabled = adapter_enabled

    @property
    def d_feat(self):
        return self.frozen.shape[0]

    def hidden(self, feats):
        """Frozen half of the image path, as an ndarray."""
        feats = np.asarray(feats, dtype=np.float64)
        if feats.shape[-1] != self.d_feat:
            raise ValueError(f"expected features of length {self.d_feat}, got {feats.shape[-1]}")
        if not np.all(np.isfinite(feats)):
            raise dc.NumericError("non-finite image feature")
        return np.maximum(feats @ self.frozen, 0.0)

    def encode(self, feats):
        """Unit embeddings for one feature vector or a batch (rows)."""
        h = dc.constant(self.hidden(feats))
        return dc.l2_normalize(h @ self.adapter_w + self.adapter_b)

    def encode_numpy(self, feats):
        h = self.hidden(feats)
        z = h @ self.adapter_w.data + self.adapter_b.data
        norms = np.linalg.norm(z, axis=-1, keepdims=True)
        if np.any(norms <= dc.EPS_NORM):
            raise dc.DegenerateVectorError("image embedding collapsed to zero")
        return z / norms

    def parameters(self):
        return {"adapter.w": self.adapter_w, "adapter.b": self.adapter_b}


class TextEncoder:
    def __init__(self, projection):
        self.projection = projection

    @property
    def d_tok(self):
        return self.projection.shape[0]

    def encode(self, tokens):
        """Encode an ``(L, d_tok)`` token sequence into a unit embedding."""
        if tokens.data.ndim != 2 or tokens.shape[0] == 0:
            raise ValueError("token sequence must be a non-empty (L, d_tok) matrix")
        if tokens.shape[1] != self.d_tok:
            raise ValueError(f"tokens must have width {self.d_tok}")
        return self.encode_pooled(dc.mean(tokens, axis=0))

    def encode_pooled(self, pooled):
        """Project already mean-pooled tokens (vector or batch of rows)."""
        return dc.l2_normalize(pooled @ dc.constant(self.projection))


def init_encoders(config):
    config.validate()
    rng = np.random.default_rng([config.seed, 0xE1C])
    frozen = _uniform(rng, config.d_feat, (config.d_feat, config.d_emb))
    projection = _uniform(rng, config.d_tok, (config.d_tok, config.d_emb))
    image = ImageEncoder(frozen, np.eye(config.d_emb), np.zeros(config.d_emb), config.adapter_enabled)
    return image, TextEncoder(projection)


def encode_image(enc, a):
    return enc.encode(a)


def encode_text(enc, tokens):
    return enc.encode(tokens)
