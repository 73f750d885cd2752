"""Training objectives with hand-derived gradients, all in float64.

Four building blocks:

* ``clip_loss`` — symmetric InfoNCE over the in-batch image/text similarity
  matrix (the standard two-tower contrastive objective).
* ``ss_loss`` — unimodal self-supervised InfoNCE between original and
  augmented views of each modality.
* ``cleanclip_loss`` — ``clip + lambda_ss * ss``, the published CleanCLIP
  fine-tuning objective.
* ``pn_loss`` — the positive/negative sub-caption contrastive term: each
  image is pulled toward its factual sub-caption against all factual
  sub-captions (temperature ``t_p``) and pushed from counterfactual
  sub-captions (temperature ``t_n``). ``counterfactual_loss`` combines it
  with ``cleanclip_loss`` via the (alpha, beta) weights.

Every function returns a :class:`LossResult` whose ``grads`` dict maps each
embedding input (and, where meaningful, the temperature) to the gradient of
the loss value with respect to it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import ConfigError, ShapeError


@dataclass(frozen=True)
class LossConfig:
    t_p: float = 0.3
    t_n: float = 0.3
    clip_temperature: float = 0.07
    alpha: float = 1.0
    beta: float = 1.0
    lambda_ss: float = 1.0
    own_negative_only: bool = False

    def __post_init__(self) -> None:
        for name in ("t_p", "t_n", "clip_temperature"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be > 0, got {getattr(self, name)}")
        for name in ("alpha", "beta", "lambda_ss"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0, got {getattr(self, name)}")


@dataclass
class LossResult:
    value: float
    grads: dict[str, np.ndarray] = field(default_factory=dict)


def _as_batch(name: str, emb: np.ndarray) -> np.ndarray:
    arr = np.asarray(emb, dtype=np.float64)
    if arr.ndim != 2:
        raise ShapeError(f"{name} must be a (n, d) batch, got shape {arr.shape}")
    return arr


def _check_temperature(t: float) -> float:
    if t <= 0:
        raise ConfigError(f"temperature must be > 0, got {t}")
    return float(t)


def _logsumexp_rows(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise logsumexp and softmax, max-shifted for stability."""
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    return (m + np.log(s))[:, 0], e / s


def _symmetric_infonce(
    za: np.ndarray, zb: np.ndarray, temperature: float
) -> tuple[float, np.ndarray, np.ndarray, float]:
    """Mean of row-wise and column-wise cross-entropy on za @ zb.T / t.

    Returns (value, d/d za, d/d zb, d/d temperature).
    """
    n = za.shape[0]
    s = za @ zb.T / temperature
    lse_r, p_r = _logsumexp_rows(s)
    lse_c, p_c = _logsumexp_rows(s.T)
    diag = np.diag(s)
    value = 0.5 * (np.mean(lse_r - diag) + np.mean(lse_c - diag))
    eye = np.eye(n)
    ds = ((p_r - eye) + (p_c - eye).T) / (2.0 * n)
    dza = ds @ zb / temperature
    dzb = ds.T @ za / temperature
    dt = -float(np.sum(ds * s)) / temperature
    return float(value), dza, dzb, dt


def clip_loss(
    image_embs: np.ndarray, text_embs: np.ndarray, temperature: float
) -> LossResult:
    """Symmetric in-batch contrastive loss between paired image/text embeddings."""
    zi = _as_batch("image_embs", image_embs)
    zt = _as_batch("text_embs", text_embs)
    t = _check_temperature(temperature)
    if zi.shape != zt.shape:
        raise ShapeError(f"batch shapes differ: {zi.shape} vs {zt.shape}")
    if zi.shape[0] < 1:
        raise ShapeError("batch must contain at least one pair")
    value, dzi, dzt, dt = _symmetric_infonce(zi, zt, t)
    return LossResult(value, {"image": dzi, "text": dzt, "temperature": np.array(dt)})


def ss_loss(
    image_embs: np.ndarray,
    aug_image_embs: np.ndarray,
    text_embs: np.ndarray,
    aug_text_embs: np.ndarray,
    temperature: float,
) -> LossResult:
    """Unimodal InfoNCE between original and augmented views, both modalities."""
    zi = _as_batch("image_embs", image_embs)
    zia = _as_batch("aug_image_embs", aug_image_embs)
    zt = _as_batch("text_embs", text_embs)
    zta = _as_batch("aug_text_embs", aug_text_embs)
    t = _check_temperature(temperature)
    if not (zi.shape == zia.shape == zt.shape == zta.shape):
        raise ShapeError("all four batches must share one shape")
    v_img, dzi, dzia, dt_img = _symmetric_infonce(zi, zia, t)
    v_txt, dzt, dzta, dt_txt = _symmetric_infonce(zt, zta, t)
    return LossResult(
        0.5 * (v_img + v_txt),
        {
            "image": 0.5 * dzi,
            "aug_image": 0.5 * dzia,
            "text": 0.5 * dzt,
            "aug_text": 0.5 * dzta,
            "temperature": np.array(0.5 * (dt_img + dt_txt)),
        },
    )


def cleanclip_loss(
    image_embs: np.ndarray,
    text_embs: np.ndarray,
    aug_image_embs: np.ndarray,
    aug_text_embs: np.ndarray,
    temperature: float,
    lambda_ss: float = 1.0,
) -> LossResult:
    """clip_loss + lambda_ss * ss_loss with merged gradients."""
    if lambda_ss < 0:
        raise ConfigError(f"lambda_ss must be >= 0, got {lambda_ss}")
    base = clip_loss(image_embs, text_embs, temperature)
    if lambda_ss == 0.0:
        base.grads.setdefault("aug_image", np.zeros_like(np.asarray(aug_image_embs, dtype=np.float64)))
        base.grads.setdefault("aug_text", np.zeros_like(np.asarray(aug_text_embs, dtype=np.float64)))
        return base
    ss = ss_loss(image_embs, aug_image_embs, text_embs, aug_text_embs, temperature)
    grads = {
        "image": base.grads["image"] + lambda_ss * ss.grads["image"],
        "text": base.grads["text"] + lambda_ss * ss.grads["text"],
        "aug_image": lambda_ss * ss.grads["aug_image"],
        "aug_text": lambda_ss * ss.grads["aug_text"],
        "temperature": base.grads["temperature"] + lambda_ss * ss.grads["temperature"],
    }
    return LossResult(base.value + lambda_ss * ss.value, grads)


def pn_loss(
    image_embs: np.ndarray,
    pos_text_embs: np.ndarray,
    neg_text_embs: np.ndarray,
    t_p: float,
    t_n: float,
    own_negative_only: bool = False,
) -> LossResult:
    """Positive/negative sub-caption contrastive loss.

    For quadruple i the image-to-text direction classifies image i against
    all positive sub-captions (scaled by ``t_p``) with the counterfactual
    sub-captions added to the denominator (scaled by ``t_n``); the
    text-to-image direction swaps the roles of image and positive text.
    With ``own_negative_only`` the negative sum uses sample i's own
    counterfactual repeated K times instead of all K counterfactuals.
    """
    zi = _as_batch("image_embs", image_embs)
    zp = _as_batch("pos_text_embs", pos_text_embs)
    zn = _as_batch("neg_text_embs", neg_text_embs)
    tp = _check_temperature(t_p)
    tn = _check_temperature(t_n)
    if not (zi.shape == zp.shape == zn.shape):
        raise ShapeError("image/positive/negative batches must share one shape")
    k = zi.shape[0]
    if k < 1:
        raise ShapeError("pn_loss needs at least one quadruple")

    m = zi @ zp.T / tp  # (k, k): image i vs positive j
    q = zi @ zn.T / tn  # (k, k): image i vs negative j
    eye = np.eye(k)

    if own_negative_only:
        neg_col = (np.log(k) + np.diag(q))[:, None]  # log of k * exp(q_ii)
        r1 = np.concatenate([m, neg_col], axis=1)
        r2 = np.concatenate([m.T, neg_col], axis=1)
    else:
        r1 = np.concatenate([m, q], axis=1)
        r2 = np.concatenate([m.T, q], axis=1)

    lse1, p1 = _logsumexp_rows(r1)
    lse2, p2 = _logsumexp_rows(r2)
    diag = np.diag(m)
    i2t = float(np.mean(lse1 - diag))
    t2i = float(np.mean(lse2 - diag))
    value = 0.5 * (i2t + t2i)

    dm = (p1[:, :k] - eye) / k
    dm += ((p2[:, :k] - eye) / k).T
    if own_negative_only:
        dq = np.diag(p1[:, k] + p2[:, k]) / k
    else:
        dq = (p1[:, k:] + p2[:, k:]) / k
    dm *= 0.5
    dq *= 0.5

    dzi = dm @ zp / tp + dq @ zn / tn
    dzp = dm.T @ zi / tp
    dzn = dq.T @ zi / tn
    return LossResult(value, {"image": dzi, "pos_text": dzp, "neg_text": dzn})


def counterfactual_loss(
    image_embs: np.ndarray,
    text_embs: np.ndarray,
    aug_image_embs: np.ndarray,
    aug_text_embs: np.ndarray,
    quad_image_embs: np.ndarray,
    quad_pos_embs: np.ndarray,
    quad_neg_embs: np.ndarray,
    config: LossConfig,
    temperature: float | None = None,
) -> LossResult:
    """Full defense objective: alpha * cleanclip_loss + beta * pn_loss.

    The pn term is skipped exactly (contributing nothing, not a float zero)
    when beta == 0 or the quadruple batch is empty, so the reduction to the
    CleanCLIP objective is bit-identical.
    """
    t = config.clip_temperature if temperature is None else temperature
    base = cleanclip_loss(
        image_embs, text_embs, aug_image_embs, aug_text_embs, t, config.lambda_ss
    )
    quad_i = np.asarray(quad_image_embs, dtype=np.float64)
    quad_p = np.asarray(quad_pos_embs, dtype=np.float64)
    quad_n = np.asarray(quad_neg_embs, dtype=np.float64)

    grads = {k: config.alpha * g for k, g in base.grads.items()}
    value = config.alpha * base.value

    if config.beta != 0.0 and quad_i.shape[0] > 0:
        pn = pn_loss(
            quad_i, quad_p, quad_n, config.t_p, config.t_n, config.own_negative_only
        )
        value += config.beta * pn.value
        grads["quad_image"] = config.beta * pn.grads["image"]
        grads["quad_pos"] = config.beta * pn.grads["pos_text"]
        grads["quad_neg"] = config.beta * pn.grads["neg_text"]
    else:
        grads["quad_image"] = np.zeros_like(quad_i)
        grads["quad_pos"] = np.zeros_like(quad_p)
        grads["quad_neg"] = np.zeros_like(quad_n)
    return LossResult(value, grads)
