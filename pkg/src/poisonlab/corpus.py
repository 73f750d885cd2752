"""Synthetic paired image-caption corpus with known latent classes.

Each class owns a fixed prototype image; samples are prototype + Gaussian
noise clamped to [0, 1]. Captions are drawn from the corpus grammar so that
the subject noun names the latent class, which gives every downstream
attack/defense metric a ground truth to stand on.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .captions import Lexicon, format_lexicon
from .errors import ConfigError, IoError

DETERMINER_PROB = 0.8
FILLER_PROB = 0.25
SIMPLE_PROB = 0.25
ADJECTIVE_PROB = 0.5


@dataclass
class PairDataset:
    """Immutable-by-convention collection of (image, caption, class) samples."""

    images: np.ndarray  # (n, H, W, C) float32 in [0, 1]
    captions: tuple[str, ...]
    latent_classes: np.ndarray  # (n,) int64
    poisoned: np.ndarray  # (n,) bool
    class_names: tuple[str, ...]
    lexicon: Lexicon
    seed: int | None = None
    noise_std: float = 0.0

    def __len__(self) -> int:
        return self.images.shape[0]

    @property
    def class_count(self) -> int:
        return len(self.class_names)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])  # type: ignore[return-value]

    @property
    def pixel_count(self) -> int:
        return int(np.prod(self.image_shape))

    def subset(self, indices: np.ndarray) -> "PairDataset":
        idx = np.asarray(indices, dtype=np.int64)
        return replace(
            self,
            images=self.images[idx].copy(),
            captions=tuple(self.captions[i] for i in idx),
            latent_classes=self.latent_classes[idx].copy(),
            poisoned=self.poisoned[idx].copy(),
        )


def _draw_caption(
    class_noun: str,
    object_pool: tuple[str, ...],
    lexicon: Lexicon,
    rng: np.random.Generator,
) -> str:
    """One grammar-conformant caption whose subject noun is the class name."""
    parts: list[str] = []
    if rng.random() < FILLER_PROB:
        parts += ["a", str(rng.choice(["picture", "photo"])), "of"]

    def noun_phrase(noun: str) -> list[str]:
        words = [noun]
        if rng.random() < ADJECTIVE_PROB:
            words.insert(0, str(rng.choice(lexicon.adjectives)))
        if rng.random() < DETERMINER_PROB:
            words.insert(0, "an" if words[0][0] in "aeiou" else "a")
        return words

    parts += noun_phrase(class_noun)
    if rng.random() >= SIMPLE_PROB:
        parts.append(str(rng.choice(lexicon.verbs)))
        parts += noun_phrase(str(rng.choice(object_pool)))
    return " ".join(parts)


def generate_corpus(
    class_count: int,
    samples_per_class: int,
    noise_std: float,
    rng: np.random.Generator,
    lexicon: Lexicon | None = None,
    image_size: int = 16,
    channels: int = 3,
    seed: int | None = None,
) -> PairDataset:
    """Build the synthetic corpus: per-class prototypes plus noisy samples."""
    if class_count < 2:
        raise ConfigError(f"class_count must be >= 2, got {class_count}")
    if samples_per_class < 1:
        raise ConfigError(f"samples_per_class must be >= 1, got {samples_per_class}")
    if noise_std < 0:
        raise ConfigError(f"noise_std must be >= 0, got {noise_std}")
    if image_size < 1 or channels < 1:
        raise ConfigError("image_size and channels must be positive")
    lexicon = lexicon or Lexicon.default()
    if class_count + 1 > len(lexicon.nouns):
        raise ConfigError(
            f"need at least {class_count + 1} grammar nouns "
            f"(classes plus one object noun), lexicon has {len(lexicon.nouns)}"
        )

    class_names = tuple(lexicon.nouns[:class_count])
    object_pool = tuple(lexicon.nouns[class_count:])
    shape = (image_size, image_size, channels)
    prototypes = rng.random((class_count, *shape))

    n = class_count * samples_per_class
    images = np.empty((n, *shape), dtype=np.float32)
    captions: list[str] = []
    classes = np.empty(n, dtype=np.int64)
    i = 0
    for c in range(class_count):
        for _ in range(samples_per_class):
            img = prototypes[c] + rng.normal(0.0, noise_std, size=shape)
            images[i] = np.clip(img, 0.0, 1.0)
            captions.append(_draw_caption(class_names[c], object_pool, lexicon, rng))
            classes[i] = c
            i += 1

    return PairDataset(
        images=images,
        captions=tuple(captions),
        latent_classes=classes,
        poisoned=np.zeros(n, dtype=bool),
        class_names=class_names,
        lexicon=lexicon,
        seed=seed,
        noise_std=noise_std,
    )


def split(
    dataset: PairDataset,
    fractions: tuple[float, ...],
    rng: np.random.Generator,
) -> tuple[PairDataset, PairDataset]:
    """Stratified-by-class disjoint partition into (train, eval)."""
    if len(fractions) not in (1, 2):
        raise ConfigError("fractions must have one or two entries")
    if any(f <= 0 for f in fractions):
        raise ConfigError("fractions must be positive")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ConfigError(f"fractions must sum to 1, got {sum(fractions)}")

    first = fractions[0]
    train_idx: list[int] = []
    eval_idx: list[int] = []
    for c in range(dataset.class_count):
        members = np.flatnonzero(dataset.latent_classes == c)
        perm = members[rng.permutation(len(members))]
        n_train = int(round(first * len(members)))
        train_idx.extend(perm[:n_train].tolist())
        eval_idx.extend(perm[n_train:].tolist())
    train_idx.sort()
    eval_idx.sort()
    return dataset.subset(np.array(train_idx, dtype=np.int64)), dataset.subset(
        np.array(eval_idx, dtype=np.int64)
    )


def save_dataset(dataset: PairDataset, directory: Path | str) -> Path:
    """Write meta.json, images.bin (float32 LE), captions.txt and lexicons."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    meta = {
        "n_samples": len(dataset),
        "image_shape": list(dataset.image_shape),
        "class_count": dataset.class_count,
        "class_names": list(dataset.class_names),
        "seed": dataset.seed,
        "noise_std": dataset.noise_std,
        "latent_classes": dataset.latent_classes.tolist(),
        "poisoned": dataset.poisoned.astype(int).tolist(),
    }
    (directory / "meta.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    (directory / "images.bin").write_bytes(
        np.ascontiguousarray(dataset.images, dtype="<f4").tobytes()
    )
    (directory / "captions.txt").write_text(
        "\n".join(dataset.captions) + "\n", "utf-8"
    )
    lex = dataset.lexicon
    (directory / "lexicon.txt").write_text(
        format_lexicon(lex.nouns, lex.adjectives, lex.verbs), "utf-8"
    )
    (directory / "replacements.txt").write_text(
        format_lexicon(
            lex.replacement_nouns, lex.replacement_adjectives, lex.replacement_verbs
        ),
        "utf-8",
    )
    return directory


def load_dataset(directory: Path | str) -> PairDataset:
    directory = Path(directory)
    meta_path = directory / "meta.json"
    if not meta_path.exists():
        raise IoError(f"dataset meta not found: {meta_path}")
    meta = json.loads(meta_path.read_text("utf-8"))
    shape = tuple(meta["image_shape"])
    n = meta["n_samples"]
    raw = (directory / "images.bin").read_bytes()
    images = np.frombuffer(raw, dtype="<f4").reshape((n, *shape)).copy()
    captions = tuple((directory / "captions.txt").read_text("utf-8").splitlines())
    if len(captions) != n:
        raise IoError(f"captions.txt has {len(captions)} lines, expected {n}")
    lexicon = Lexicon.load(directory / "lexicon.txt", directory / "replacements.txt")
    return PairDataset(
        images=images,
        captions=captions,
        latent_classes=np.array(meta["latent_classes"], dtype=np.int64),
        poisoned=np.array(meta["poisoned"], dtype=bool),
        class_names=tuple(meta["class_names"]),
        lexicon=lexicon,
        seed=meta.get("seed"),
        noise_std=meta.get("noise_std", 0.0),
    )
