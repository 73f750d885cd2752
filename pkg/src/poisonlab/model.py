"""Toy two-tower model: linear image/text encoders into a shared unit sphere.

Images are flattened pixel vectors, texts are bag-of-token count vectors;
both are linearly projected and L2-normalized. The encoders are small enough
that every gradient in the training stack is hand-derived, which keeps the
whole pipeline checkable against finite differences.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, IoError, NormError, ShapeError, VocabError

INITIAL_TEMPERATURE = 0.07

# field -> whether AdamW weight decay applies (matrices only)
PARAM_FIELDS = {
    "image_w": True,
    "image_b": False,
    "text_w": True,
    "text_b": False,
    "logit_scale": False,
}


@dataclass
class ModelParams:
    image_w: np.ndarray  # (d, pixel_count)
    image_b: np.ndarray  # (d,)
    text_w: np.ndarray  # (d, vocab_size)
    text_b: np.ndarray  # (d,)
    logit_scale: np.ndarray  # () scalar, contrastive temperature = exp(-logit_scale)

    @property
    def embed_dim(self) -> int:
        return self.image_w.shape[0]

    @property
    def pixel_count(self) -> int:
        return self.image_w.shape[1]

    @property
    def vocab_size(self) -> int:
        return self.text_w.shape[1]

    @property
    def clip_temperature(self) -> float:
        return float(np.exp(-self.logit_scale))

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    def copy(self) -> "ModelParams":
        return ModelParams(**{k: v.copy() for k, v in self.arrays().items()})


@dataclass
class ModelGrads:
    image_w: np.ndarray
    image_b: np.ndarray
    text_w: np.ndarray
    text_b: np.ndarray
    logit_scale: np.ndarray

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_FIELDS}

    @classmethod
    def zeros_like(cls, params: ModelParams) -> "ModelGrads":
        return cls(**{k: np.zeros_like(v) for k, v in params.arrays().items()})


def init_params(
    embed_dim: int,
    pixel_count: int,
    vocab_size: int,
    rng: np.random.Generator,
) -> ModelParams:
    """Gaussian init with std 1/sqrt(fan_in); zero biases; temperature 0.07."""
    if embed_dim < 2:
        raise ConfigError(f"embed_dim must be >= 2, got {embed_dim}")
    if pixel_count < 1 or vocab_size < 1:
        raise ConfigError("pixel_count and vocab_size must be positive")
    return ModelParams(
        image_w=rng.normal(0.0, 1.0 / math.sqrt(pixel_count), (embed_dim, pixel_count)),
        image_b=np.zeros(embed_dim),
        text_w=rng.normal(0.0, 1.0 / math.sqrt(vocab_size), (embed_dim, vocab_size)),
        text_b=np.zeros(embed_dim),
        logit_scale=np.array(math.log(1.0 / INITIAL_TEMPERATURE)),
    )


def _flatten_images(params: ModelParams, images: np.ndarray) -> np.ndarray:
    arr = np.asarray(images, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    elif arr.ndim == 3:
        arr = arr.reshape(1, -1)
    elif arr.ndim == 4:
        arr = arr.reshape(arr.shape[0], -1)
    if arr.ndim != 2 or arr.shape[1] != params.pixel_count:
        raise ShapeError(
            f"image pixel count {arr.shape[-1] if arr.ndim else 0} "
            f"does not match model ({params.pixel_count})"
        )
    return arr


@dataclass
class EncodeCache:
    """Forward intermediates kept for the backward (vector-Jacobian) pass."""

    inputs: np.ndarray  # (n, in_dim) flattened pixels or token counts
    norms: np.ndarray  # (n,) pre-normalization norms
    embeddings: np.ndarray  # (n, d) unit rows


def _project_and_normalize(
    w: np.ndarray, b: np.ndarray, inputs: np.ndarray
) -> EncodeCache:
    u = inputs @ w.T + b
    norms = np.linalg.norm(u, axis=1)
    if np.any(norms == 0.0):
        raise NormError("zero projection cannot be normalized")
    return EncodeCache(inputs=inputs, norms=norms, embeddings=u / norms[:, None])


def _vjp(cache: EncodeCache, d_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of (w, b) given d loss / d embeddings, via the normalize step."""
    z = cache.embeddings
    du = (d_emb - np.sum(d_emb * z, axis=1, keepdims=True) * z) / cache.norms[:, None]
    return du.T @ cache.inputs, du.sum(axis=0)


def project_image(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """Un-normalized image projection, exposed for linearity checks."""
    flat = _flatten_images(params, image)
    return (flat @ params.image_w.T + params.image_b)[0]


def encode_image(params: ModelParams, image: np.ndarray) -> np.ndarray:
    """L2-normalized embedding of one image."""
    return encode_image_batch(params, image)[0].embeddings[0]


def encode_image_batch(
    params: ModelParams, images: np.ndarray
) -> tuple[EncodeCache, np.ndarray]:
    cache = _project_and_normalize(
        params.image_w, params.image_b, _flatten_images(params, images)
    )
    return cache, cache.embeddings


def image_vjp(cache: EncodeCache, d_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _vjp(cache, d_emb)


def tokens_to_counts(
    vocab: Mapping[str, int], token_seqs: Sequence[Sequence[str]], vocab_size: int | None = None
) -> np.ndarray:
    """Bag-of-token count matrix, (n, vocab_size) float64."""
    size = len(vocab) if vocab_size is None else vocab_size
    counts = np.zeros((len(token_seqs), size))
    for i, seq in enumerate(token_seqs):
        for tok in seq:
            idx = vocab.get(tok)
            if idx is None:
                raise VocabError(f"token {tok!r} not in vocabulary")
            counts[i, idx] += 1.0
    return counts


def project_text(
    params: ModelParams, tokens: Sequence[str], vocab: Mapping[str, int]
) -> np.ndarray:
    counts = tokens_to_counts(vocab, [tokens], params.vocab_size)
    return (counts @ params.text_w.T + params.text_b)[0]


def encode_text(
    params: ModelParams, tokens: Sequence[str], vocab: Mapping[str, int]
) -> np.ndarray:
    """L2-normalized embedding of one token sequence (order-free)."""
    counts = tokens_to_counts(vocab, [tokens], params.vocab_size)
    return encode_text_batch(params, counts)[0].embeddings[0]


def encode_text_batch(
    params: ModelParams, counts: np.ndarray
) -> tuple[EncodeCache, np.ndarray]:
    counts = np.asarray(counts, dtype=np.float64)
    if counts.ndim != 2 or counts.shape[1] != params.vocab_size:
        raise ShapeError(
            f"count matrix width {counts.shape[-1]} does not match vocab "
            f"({params.vocab_size})"
        )
    cache = _project_and_normalize(params.text_w, params.text_b, counts)
    return cache, cache.embeddings


def text_vjp(cache: EncodeCache, d_emb: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    return _vjp(cache, d_emb)


def save_checkpoint(params: ModelParams, directory: Path | str) -> Path:
    """model.json (dims, logit_scale) + weights.bin (float64 LE, fixed order)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "embed_dim": params.embed_dim,
        "pixel_count": params.pixel_count,
        "vocab_size": params.vocab_size,
        "logit_scale": float(params.logit_scale),
    }
    (directory / "model.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    blob = b"".join(
        np.ascontiguousarray(a, dtype="<f8").tobytes()
        for a in (params.image_w, params.image_b, params.text_w, params.text_b)
    )
    (directory / "weights.bin").write_bytes(blob)
    return directory


def load_checkpoint(directory: Path | str) -> ModelParams:
    directory = Path(directory)
    meta_path = directory / "model.json"
    if not meta_path.exists():
        raise IoError(f"checkpoint meta not found: {meta_path}")
    meta = json.loads(meta_path.read_text("utf-8"))
    d, p, v = meta["embed_dim"], meta["pixel_count"], meta["vocab_size"]
    raw = np.frombuffer((directory / "weights.bin").read_bytes(), dtype="<f8")
    expected = d * p + d + d * v + d
    if raw.size != expected:
        raise IoError(f"weights.bin holds {raw.size} floats, expected {expected}")
    off = 0

    def take(shape: tuple[int, ...]) -> np.ndarray:
        nonlocal off
        size = int(np.prod(shape))
        out = raw[off : off + size].reshape(shape).copy()
        off += size
        return out

    return ModelParams(
        image_w=take((d, p)),
        image_b=take((d,)),
        text_w=take((d, v)),
        text_b=take((d,)),
        logit_scale=np.array(float(meta["logit_scale"])),
    )
