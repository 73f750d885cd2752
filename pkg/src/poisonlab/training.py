"""Optimization loops: AdamW from scratch, attack/defense fine-tuning.

Three fine-tuning modes share one loop:

* ``ft`` — plain contrastive fine-tuning (also used to build victims),
* ``cleanclip`` — contrastive + unimodal self-supervised loss on augmented
  views,
* ``counterfactual`` — cleanclip plus the positive/negative sub-caption term
  computed on K freshly augmented caption quadruples per epoch.

Per-epoch RNG is split into independent child streams (shuffle, view
augmentation, sub-caption sampling) so that disabling the counterfactual
term (K = 0 or beta = 0) reproduces the cleanclip trajectory bit for bit.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .captions import Lexicon, SubCaptionPair, generate_pair, tokenize
from .corpus import PairDataset
from .errors import ConfigError, GrammarError, NumericsError, ShapeError
from .losses import LossConfig, clip_loss, counterfactual_loss
from .model import (
    ModelGrads,
    ModelParams,
    PARAM_FIELDS,
    encode_image_batch,
    encode_text_batch,
    image_vjp,
    text_vjp,
    tokens_to_counts,
)

EvalHook = Callable[[int, ModelParams], dict[str, float]]

MAX_REDRAWS = 1000


@dataclass(frozen=True)
class OptimConfig:
    learning_rate: float = 1e-3
    warmup_steps: int = 100
    weight_decay: float = 0.1
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 64
    epochs: int = 10

    def __post_init__(self) -> None:
        if self.learning_rate <= 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.warmup_steps < 0 or self.epochs < 0:
            raise ConfigError("warmup_steps and epochs must be >= 0")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ConfigError("beta1 and beta2 must lie in (0, 1)")
        if self.epsilon <= 0 or self.batch_size < 1 or self.weight_decay < 0:
            raise ConfigError("invalid epsilon/batch_size/weight_decay")


@dataclass(frozen=True)
class DefenseSpec:
    mode: str = "counterfactual"  # ft | cleanclip | counterfactual
    K: int = 200
    loss: LossConfig = field(default_factory=LossConfig)
    image_noise_std: float = 0.05
    token_dropout: float = 0.2
    spread_quadruples: bool = True  # spread K across batches vs. first batch only

    def __post_init__(self) -> None:
        if self.mode not in ("ft", "cleanclip", "counterfactual"):
            raise ConfigError(f"unknown defense mode {self.mode!r}")
        if self.K < 0:
            raise ConfigError(f"K must be >= 0, got {self.K}")
        if not (0 <= self.token_dropout < 1) or self.image_noise_std < 0:
            raise ConfigError("invalid augmentation parameters")


@dataclass
class TrainHistory:
    records: list[dict] = field(default_factory=list)

    def columns(self) -> list[str]:
        cols = ["epoch", "loss"]
        extra = sorted({k for r in self.records for k in r} - {"epoch", "loss"})
        return cols + extra

    def to_csv(self, path: Path | str) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        cols = self.columns()
        lines = [",".join(cols)]
        for rec in self.records:
            lines.append(",".join(_format_cell(rec.get(c)) for c in cols))
        path.write_text("\n".join(lines) + "\n", "utf-8")
        return path


def _format_cell(v: object) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros(cls, params: ModelParams) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(a) for k, a in params.arrays().items()},
            v={k: np.zeros_like(a) for k, a in params.arrays().items()},
        )


def warmup_lr(base_lr: float, step: int, warmup_steps: int) -> float:
    """Linear warmup: lr * step/warmup for step <= warmup, then constant."""
    if warmup_steps <= 0:
        return base_lr
    return base_lr * min(1.0, step / warmup_steps)


def adamw_update(
    param: np.ndarray,
    grad: np.ndarray,
    m: np.ndarray,
    v: np.ndarray,
    step: int,
    lr: float,
    beta1: float,
    beta2: float,
    epsilon: float,
    weight_decay: float,
) -> np.ndarray:
    """Single decoupled-weight-decay Adam update; m and v updated in place."""
    if param.shape != grad.shape:
        raise ShapeError(f"grad shape {grad.shape} != param shape {param.shape}")
    m *= beta1
    m += (1.0 - beta1) * grad
    v *= beta2
    v += (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    out = param - lr * m_hat / (np.sqrt(v_hat) + epsilon)
    if weight_decay != 0.0:
        out = out - lr * weight_decay * param
    return out


def adamw_step(
    params: ModelParams,
    grads: ModelGrads,
    state: AdamWState,
    config: OptimConfig,
    step: int,
) -> ModelParams:
    """Apply one AdamW step to every parameter; decay weight matrices only."""
    if step < 1:
        raise ConfigError(f"step index must be >= 1, got {step}")
    lr = warmup_lr(config.learning_rate, step, config.warmup_steps)
    updated = {}
    for name, decays in PARAM_FIELDS.items():
        updated[name] = adamw_update(
            getattr(params, name),
            getattr(grads, name),
            state.m[name],
            state.v[name],
            step,
            lr,
            config.beta1,
            config.beta2,
            config.epsilon,
            config.weight_decay if decays else 0.0,
        )
    return ModelParams(**updated)


def _augment_images(
    images: np.ndarray, noise_std: float, rng: np.random.Generator
) -> np.ndarray:
    noise = rng.normal(0.0, noise_std, size=images.shape)
    return np.clip(images + noise, 0.0, 1.0)


def _dropout_tokens(
    token_seqs: Sequence[tuple[str, ...]], p: float, rng: np.random.Generator
) -> list[tuple[str, ...]]:
    """Drop each token with probability p, always keeping at least one."""
    out = []
    for seq in token_seqs:
        keep = rng.random(len(seq)) >= p
        if not keep.any():
            keep[int(rng.integers(len(seq)))] = True
        out.append(tuple(tok for tok, k in zip(seq, keep) if k))
    return out


def sample_quadruples(
    dataset: PairDataset,
    k: int,
    lexicon: Lexicon,
    rng: np.random.Generator,
) -> list[SubCaptionPair]:
    """Draw K distinct pairs and generate their sub-caption quadruples.

    Unparseable captions are replaced by redrawing; the corpus grammar makes
    this a no-op on clean data but keeps the loop robust to injected junk.
    """
    n = len(dataset)
    if k > n:
        raise ConfigError(f"K={k} exceeds dataset size {n}")
    chosen = rng.choice(n, size=k, replace=False)
    pairs: list[SubCaptionPair] = []
    failures = 0
    for idx in chosen:
        idx = int(idx)
        while True:
            try:
                pairs.append(generate_pair(dataset.captions[idx], lexicon, rng, idx))
                break
            except GrammarError:
                failures += 1
                if failures > MAX_REDRAWS:
                    raise GrammarError(
                        f"gave up after {MAX_REDRAWS} unparseable caption redraws"
                    )
                idx = int(rng.integers(n))
    return pairs


@dataclass
class _Batchable:
    """Dataset tensors prepared once per fine-tuning run."""

    images: np.ndarray  # (n, P) float64
    counts: np.ndarray  # (n, V) float64
    token_seqs: list[tuple[str, ...]]


def _prepare(dataset: PairDataset, params: ModelParams) -> _Batchable:
    vocab = dataset.lexicon.vocabulary()
    if len(vocab) != params.vocab_size:
        raise ShapeError(
            f"dataset vocabulary size {len(vocab)} != model vocab {params.vocab_size}"
        )
    token_seqs = [tokenize(c) for c in dataset.captions]
    return _Batchable(
        images=np.asarray(dataset.images, dtype=np.float64).reshape(len(dataset), -1),
        counts=tokens_to_counts(vocab, token_seqs, params.vocab_size),
        token_seqs=token_seqs,
    )


def batch_loss_and_grads(
    params: ModelParams,
    images: np.ndarray,
    counts: np.ndarray,
    token_seqs: Sequence[tuple[str, ...]] | None,
    mode: str,
    spec: DefenseSpec,
    aug_rng: np.random.Generator | None,
    quad_images: np.ndarray | None = None,
    quad_pos_counts: np.ndarray | None = None,
    quad_neg_counts: np.ndarray | None = None,
    vocab: dict[str, int] | None = None,
) -> tuple[float, ModelGrads]:
    """Loss value and full parameter gradient for one mini-batch."""
    grads = ModelGrads.zeros_like(params)
    img_cache, zi = encode_image_batch(params, images)
    txt_cache, zt = encode_text_batch(params, counts)
    t_clip = params.clip_temperature

    if mode == "ft":
        res = clip_loss(zi, zt, t_clip)
        d_img, d_txt = res.grads["image"], res.grads["text"]
        dt = float(res.grads["temperature"])
        gw, gb = image_vjp(img_cache, d_img)
        grads.image_w += gw
        grads.image_b += gb
        gw, gb = text_vjp(txt_cache, d_txt)
        grads.text_w += gw
        grads.text_b += gb
        grads.logit_scale += dt * (-t_clip)
        return res.value, grads

    assert aug_rng is not None and token_seqs is not None and vocab is not None
    aug_images = _augment_images(images, spec.image_noise_std, aug_rng)
    aug_tokens = _dropout_tokens(token_seqs, spec.token_dropout, aug_rng)
    aug_counts = tokens_to_counts(vocab, aug_tokens, params.vocab_size)
    aug_img_cache, zia = encode_image_batch(params, aug_images)
    aug_txt_cache, zta = encode_text_batch(params, aug_counts)

    have_quads = (
        mode == "counterfactual"
        and quad_images is not None
        and quad_images.shape[0] > 0
        and spec.loss.beta != 0.0
    )
    if have_quads:
        quad_img_cache, zqi = encode_image_batch(params, quad_images)
        quad_pos_cache, zqp = encode_text_batch(params, quad_pos_counts)
        quad_neg_cache, zqn = encode_text_batch(params, quad_neg_counts)
    else:
        zqi = zqp = zqn = np.zeros((0, params.embed_dim))

    cfg = spec.loss
    if mode == "cleanclip":
        # cleanclip mode is the alpha=1, beta-off reduction of the full loss
        cfg = LossConfig(
            t_p=cfg.t_p,
            t_n=cfg.t_n,
            clip_temperature=cfg.clip_temperature,
            alpha=1.0,
            beta=0.0,
            lambda_ss=cfg.lambda_ss,
            own_negative_only=cfg.own_negative_only,
        )
    res = counterfactual_loss(zi, zt, zia, zta, zqi, zqp, zqn, cfg, temperature=t_clip)

    gw, gb = image_vjp(img_cache, res.grads["image"])
    grads.image_w += gw
    grads.image_b += gb
    gw, gb = image_vjp(aug_img_cache, res.grads["aug_image"])
    grads.image_w += gw
    grads.image_b += gb
    gw, gb = text_vjp(txt_cache, res.grads["text"])
    grads.text_w += gw
    grads.text_b += gb
    gw, gb = text_vjp(aug_txt_cache, res.grads["aug_text"])
    grads.text_w += gw
    grads.text_b += gb
    if have_quads:
        gw, gb = image_vjp(quad_img_cache, res.grads["quad_image"])
        grads.image_w += gw
        grads.image_b += gb
        gw, gb = text_vjp(quad_pos_cache, res.grads["quad_pos"])
        grads.text_w += gw
        grads.text_b += gb
        gw, gb = text_vjp(quad_neg_cache, res.grads["quad_neg"])
        grads.text_w += gw
        grads.text_b += gb
    grads.logit_scale += float(res.grads["temperature"]) * (-t_clip)
    return res.value, grads


def _train_loop(
    params: ModelParams,
    dataset: PairDataset,
    optim: OptimConfig,
    rng: np.random.Generator,
    mode: str,
    spec: DefenseSpec,
    lexicon: Lexicon | None,
    eval_hook: EvalHook | None,
) -> tuple[ModelParams, TrainHistory]:
    if len(dataset) == 0:
        raise ConfigError("dataset is empty")
    params = params.copy()
    history = TrainHistory()
    if optim.epochs == 0:
        return params, history

    data = _prepare(dataset, params)
    vocab = dataset.lexicon.vocabulary()
    lexicon = lexicon or dataset.lexicon
    state = AdamWState.zeros(params)
    n = len(dataset)
    n_batches = math.ceil(n / optim.batch_size)
    step = 0

    for epoch in range(1, optim.epochs + 1):
        shuffle_rng, aug_rng, quad_rng = rng.spawn(3)
        perm = shuffle_rng.permutation(n)

        quad_chunks: list[np.ndarray] | None = None
        quad_pos_counts = quad_neg_counts = None
        quad_image_rows: np.ndarray | None = None
        if mode == "counterfactual" and spec.K > 0:
            pairs = sample_quadruples(dataset, spec.K, lexicon, quad_rng)
            quad_image_rows = data.images[[p.source_index for p in pairs]]
            quad_pos_counts = tokens_to_counts(
                vocab, [p.positive for p in pairs], params.vocab_size
            )
            quad_neg_counts = tokens_to_counts(
                vocab, [p.negative for p in pairs], params.vocab_size
            )
            if spec.spread_quadruples:
                quad_chunks = np.array_split(np.arange(spec.K), n_batches)
            else:
                quad_chunks = [np.arange(spec.K)] + [
                    np.empty(0, dtype=int) for _ in range(n_batches - 1)
                ]

        epoch_loss = 0.0
        for b in range(n_batches):
            batch = perm[b * optim.batch_size : (b + 1) * optim.batch_size]
            q_imgs = q_pos = q_neg = None
            if quad_chunks is not None and len(quad_chunks[b]) > 0:
                sel = quad_chunks[b]
                q_imgs = quad_image_rows[sel]
                q_pos = quad_pos_counts[sel]
                q_neg = quad_neg_counts[sel]
            value, grads = batch_loss_and_grads(
                params,
                data.images[batch],
                data.counts[batch],
                [data.token_seqs[i] for i in batch],
                mode,
                spec,
                aug_rng,
                q_imgs,
                q_pos,
                q_neg,
                vocab,
            )
            if not np.isfinite(value):
                raise NumericsError(f"non-finite loss at epoch {epoch} batch {b}")
            step += 1
            params = adamw_step(params, grads, state, optim, step)
            epoch_loss += value * len(batch)

        record: dict = {"epoch": epoch, "loss": epoch_loss / n}
        if eval_hook is not None:
            record.update(eval_hook(epoch, params))
        history.records.append(record)
    return params, history


def finetune(
    params: ModelParams,
    dataset: PairDataset,
    optim: OptimConfig,
    rng: np.random.Generator,
    mode: str = "ft",
    spec: DefenseSpec | None = None,
    eval_hook: EvalHook | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Fine-tune with the plain contrastive or cleanclip objective."""
    if mode not in ("ft", "cleanclip"):
        raise ConfigError(f"finetune mode must be 'ft' or 'cleanclip', got {mode!r}")
    spec = spec or DefenseSpec(mode=mode, K=0)
    return _train_loop(params, dataset, optim, rng, mode, spec, None, eval_hook)


def counterfactual_finetune(
    params: ModelParams,
    dataset: PairDataset,
    spec: DefenseSpec,
    optim: OptimConfig,
    lexicon: Lexicon | None,
    rng: np.random.Generator,
    eval_hook: EvalHook | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Defense fine-tuning with per-epoch counterfactual caption quadruples.

    Each epoch samples K pairs, regenerates their positive/negative
    sub-captions, and spreads the resulting quadruples across that epoch's
    mini-batches; K = 0 degenerates exactly to the cleanclip trajectory.
    """
    if spec.mode != "counterfactual":
        raise ConfigError(f"spec.mode must be 'counterfactual', got {spec.mode!r}")
    return _train_loop(
        params, dataset, optim, rng, "counterfactual", spec, lexicon, eval_hook
    )
