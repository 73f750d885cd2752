"""Caption grammar: scene-graph parsing and factual/counterfactual sub-captions.

The corpus speaks a closed grammar::

    [filler] [det] adj* noun [verb [det] adj* noun]

where ``filler`` is an optional leading ``[det] (picture|photo) of``.
Captions are parsed into a :class:`SceneGraph`; from the graph we derive a
factual (positive) sub-caption that keeps the subject-relation-object core,
and a counterfactual (negative) sub-caption in which one class of slots
(adjectives, the relational verb, or the nouns) is replaced by random draws
from a replacement repository.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError, GrammarError, LexiconError

DETERMINERS = ("a", "an", "the")
FILLER_NOUNS = ("picture", "photo")

_SECTION_NAMES = ("nouns", "adjectives", "verbs")


class Strategy(enum.Enum):
    """Which slots of the positive sub-caption the negative one alters."""

    ADJ_REPLACE = "adj_replace"
    VERB_REPLACE = "verb_replace"
    NOUN_REPLACE = "noun_replace"


@dataclass(frozen=True)
class SceneGraph:
    subject: str
    subject_adjectives: tuple[str, ...] = ()
    relation: str | None = None
    object: str | None = None
    object_adjectives: tuple[str, ...] = ()

    @property
    def is_simple(self) -> bool:
        """True when the caption carries a single content noun."""
        return self.relation is None

    def __post_init__(self) -> None:
        if self.relation is None and self.object is not None:
            raise ConfigError("SceneGraph with an object requires a relation")
        if self.relation is not None and self.object is None:
            raise ConfigError("SceneGraph with a relation requires an object")


@dataclass(frozen=True)
class SubCaptionPair:
    positive: tuple[str, ...]
    negative: tuple[str, ...]
    strategy: Strategy
    source_index: int = -1

    def __post_init__(self) -> None:
        if len(self.positive) != len(self.negative):
            raise ConfigError("positive and negative must have equal length")
        if self.positive == self.negative:
            raise ConfigError("negative must differ from positive")


@dataclass(frozen=True)
class Lexicon:
    """Grammar vocabulary plus replacement repositories.

    ``nouns``/``adjectives``/``verbs`` define the closed grammar; the
    ``replacement_*`` lists are sampled when generating counterfactual
    sub-captions and need not overlap the grammar sections.
    """

    nouns: tuple[str, ...]
    adjectives: tuple[str, ...]
    verbs: tuple[str, ...]
    replacement_nouns: tuple[str, ...] = ()
    replacement_adjectives: tuple[str, ...] = ()
    replacement_verbs: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        for name in ("nouns", "adjectives", "verbs"):
            if not getattr(self, name):
                raise ConfigError(f"grammar section '{name}' is empty")
        noun_set = frozenset(self.nouns)
        adj_set = frozenset(self.adjectives)
        verb_set = frozenset(self.verbs)
        if noun_set & adj_set or noun_set & verb_set or adj_set & verb_set:
            raise ConfigError("grammar sections must be pairwise disjoint")
        object.__setattr__(self, "_noun_set", noun_set)
        object.__setattr__(self, "_adj_set", adj_set)
        object.__setattr__(self, "_verb_set", verb_set)
        vocab_tokens = sorted(
            noun_set
            | adj_set
            | verb_set
            | set(self.replacement_nouns)
            | set(self.replacement_adjectives)
            | set(self.replacement_verbs)
            | set(DETERMINERS)
            | set(FILLER_NOUNS)
            | {"of"}
        )
        object.__setattr__(
            self, "_vocab", {tok: i for i, tok in enumerate(vocab_tokens)}
        )

    @property
    def noun_set(self) -> frozenset[str]:
        return self._noun_set  # type: ignore[attr-defined]

    @property
    def adjective_set(self) -> frozenset[str]:
        return self._adj_set  # type: ignore[attr-defined]

    @property
    def verb_set(self) -> frozenset[str]:
        return self._verb_set  # type: ignore[attr-defined]

    def vocabulary(self) -> dict[str, int]:
        """Token -> unique integer id over grammar, replacements and filler."""
        return self._vocab  # type: ignore[attr-defined]

    @classmethod
    def load(cls, grammar_path: Path | str, replacement_path: Path | str) -> "Lexicon":
        grammar = _read_lexicon_file(Path(grammar_path))
        repl = _read_lexicon_file(Path(replacement_path))
        return cls(
            nouns=tuple(grammar["nouns"]),
            adjectives=tuple(grammar["adjectives"]),
            verbs=tuple(grammar["verbs"]),
            replacement_nouns=tuple(repl["nouns"]),
            replacement_adjectives=tuple(repl["adjectives"]),
            replacement_verbs=tuple(repl["verbs"]),
        )

    @classmethod
    def default(cls) -> "Lexicon":
        """Lexicon bundled with the package (>= 100 replacements per section)."""
        data = resources.files("poisonlab.data")
        grammar = _parse_lexicon_text(
            data.joinpath("grammar_lexicon.txt").read_text("utf-8"), "grammar_lexicon.txt"
        )
        repl = _parse_lexicon_text(
            data.joinpath("replacement_lexicon.txt").read_text("utf-8"),
            "replacement_lexicon.txt",
        )
        return cls(
            nouns=tuple(grammar["nouns"]),
            adjectives=tuple(grammar["adjectives"]),
            verbs=tuple(grammar["verbs"]),
            replacement_nouns=tuple(repl["nouns"]),
            replacement_adjectives=tuple(repl["adjectives"]),
            replacement_verbs=tuple(repl["verbs"]),
        )


def _read_lexicon_file(path: Path) -> dict[str, list[str]]:
    if not path.exists():
        raise ConfigError(f"lexicon file not found: {path}")
    return _parse_lexicon_text(path.read_text("utf-8"), str(path))


def _parse_lexicon_text(text: str, source: str) -> dict[str, list[str]]:
    """Parse the sectioned one-token-per-line lexicon format."""
    sections: dict[str, list[str]] = {name: [] for name in _SECTION_NAMES}
    current: str | None = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            name = line[1:-1].strip().lower()
            if name not in sections:
                raise ConfigError(f"{source}:{lineno}: unknown section '[{name}]'")
            current = name
            continue
        if current is None:
            raise ConfigError(f"{source}:{lineno}: token before any section header")
        token = line.lower()
        if len(token.split()) != 1:
            raise ConfigError(f"{source}:{lineno}: expected one token per line")
        sections[current].append(token)
    return sections


def format_lexicon(nouns: Iterable[str], adjectives: Iterable[str], verbs: Iterable[str]) -> str:
    """Serialize three token lists back into the sectioned file format."""
    parts = []
    for name, toks in (("nouns", nouns), ("adjectives", adjectives), ("verbs", verbs)):
        parts.append(f"[{name}]")
        parts.extend(toks)
        parts.append("")
    return "\n".join(parts)


def tokenize(text: str | Sequence[str]) -> tuple[str, ...]:
    if isinstance(text, str):
        return tuple(text.lower().split())
    return tuple(t.lower() for t in text)


def parse_caption(text: str | Sequence[str], lexicon: Lexicon) -> SceneGraph:
    """Parse a caption under the corpus grammar into a scene graph.

    Filler ("a picture of", "a photo of") and determiners are stripped.
    Raises :class:`GrammarError` for out-of-lexicon tokens or structure the
    grammar does not cover (two clauses, conjunctions, trailing tokens).
    """
    tokens = tokenize(text)
    if not tokens:
        raise GrammarError("empty caption")

    pos = 0
    # optional leading filler: [det] (picture|photo) of
    if (
        pos + 2 < len(tokens)
        and tokens[pos] in DETERMINERS
        and tokens[pos + 1] in FILLER_NOUNS
        and tokens[pos + 2] == "of"
    ):
        pos += 3
    elif pos + 1 < len(tokens) and tokens[pos] in FILLER_NOUNS and tokens[pos + 1] == "of":
        pos += 2

    def noun_phrase(role: str) -> tuple[tuple[str, ...], str, int]:
        i = pos
        if i < len(tokens) and tokens[i] in DETERMINERS:
            i += 1
        adjs = []
        while i < len(tokens) and tokens[i] in lexicon.adjective_set:
            adjs.append(tokens[i])
            i += 1
        if i >= len(tokens):
            raise GrammarError(f"caption ends before the {role} noun: {' '.join(tokens)!r}")
        if tokens[i] not in lexicon.noun_set:
            raise GrammarError(f"token {tokens[i]!r} is not a known noun ({role})")
        return tuple(adjs), tokens[i], i + 1

    subject_adjs, subject, pos = noun_phrase("subject")
    if pos == len(tokens):
        return SceneGraph(subject=subject, subject_adjectives=subject_adjs)

    relation = tokens[pos]
    if relation not in lexicon.verb_set:
        raise GrammarError(f"token {relation!r} is not a known relation")
    pos += 1
    object_adjs, obj, pos = noun_phrase("object")
    if pos != len(tokens):
        raise GrammarError(f"trailing tokens after object: {' '.join(tokens[pos:])!r}")
    return SceneGraph(
        subject=subject,
        subject_adjectives=subject_adjs,
        relation=relation,
        object=obj,
        object_adjectives=object_adjs,
    )


def gen_positive(graph: SceneGraph) -> tuple[str, ...]:
    """Factual sub-caption: adjectives + subject + relation + adjectives + object.

    A simple caption keeps only its single content noun.
    """
    if graph.is_simple:
        return (graph.subject,)
    assert graph.object is not None and graph.relation is not None
    return (
        *graph.subject_adjectives,
        graph.subject,
        graph.relation,
        *graph.object_adjectives,
        graph.object,
    )


def applicable_strategies(graph: SceneGraph) -> tuple[Strategy, ...]:
    """Strategies that can alter at least one slot of the positive sub-caption.

    The positive of a simple graph is the bare subject, so only the noun
    strategy applies there regardless of adjectives in the raw caption.
    """
    out = []
    if not graph.is_simple:
        if graph.subject_adjectives or graph.object_adjectives:
            out.append(Strategy.ADJ_REPLACE)
        out.append(Strategy.VERB_REPLACE)
    out.append(Strategy.NOUN_REPLACE)
    return tuple(out)


def pick_strategy(graph: SceneGraph, rng: np.random.Generator) -> Strategy:
    """Uniformly pick a replacement strategy, falling back when inapplicable."""
    allowed = applicable_strategies(graph)
    first = (Strategy.ADJ_REPLACE, Strategy.VERB_REPLACE, Strategy.NOUN_REPLACE)[
        int(rng.integers(3))
    ]
    if first in allowed:
        return first
    return allowed[int(rng.integers(len(allowed)))]


def _draw_replacement(
    pool: tuple[str, ...], name: str, original: str, rng: np.random.Generator
) -> str:
    if not pool:
        raise LexiconError(f"replacement list '{name}' is empty")
    if all(tok == original for tok in pool):
        raise LexiconError(f"replacement list '{name}' has no token distinct from {original!r}")
    while True:
        tok = pool[int(rng.integers(len(pool)))]
        if tok != original:
            return tok


def gen_negative(
    graph: SceneGraph,
    strategy: Strategy,
    lexicon: Lexicon,
    rng: np.random.Generator,
) -> tuple[str, ...]:
    """Counterfactual sub-caption: the positive with one slot class replaced.

    Replacement tokens are drawn uniformly from the matching repository;
    draws equal to the original token are rejected and redrawn so the
    negative always diverges.
    """
    if strategy not in applicable_strategies(graph):
        raise ValueError(f"strategy {strategy.value} not applicable to this graph")

    if graph.is_simple:
        return (
            _draw_replacement(lexicon.replacement_nouns, "nouns", graph.subject, rng),
        )

    assert graph.relation is not None and graph.object is not None
    subject_adjs = list(graph.subject_adjectives)
    object_adjs = list(graph.object_adjectives)
    subject, relation, obj = graph.subject, graph.relation, graph.object

    if strategy is Strategy.ADJ_REPLACE:
        subject_adjs = [
            _draw_replacement(lexicon.replacement_adjectives, "adjectives", a, rng)
            for a in subject_adjs
        ]
        object_adjs = [
            _draw_replacement(lexicon.replacement_adjectives, "adjectives", a, rng)
            for a in object_adjs
        ]
    elif strategy is Strategy.VERB_REPLACE:
        relation = _draw_replacement(lexicon.replacement_verbs, "verbs", relation, rng)
    else:
        subject = _draw_replacement(lexicon.replacement_nouns, "nouns", subject, rng)
        obj = _draw_replacement(lexicon.replacement_nouns, "nouns", obj, rng)

    return (*subject_adjs, subject, relation, *object_adjs, obj)


def generate_pair(
    caption: str | Sequence[str],
    lexicon: Lexicon,
    rng: np.random.Generator,
    source_index: int = -1,
) -> SubCaptionPair:
    """Parse a caption and produce its (positive, negative, strategy) triple."""
    graph = parse_caption(caption, lexicon)
    strategy = pick_strategy(graph, rng)
    return SubCaptionPair(
        positive=gen_positive(graph),
        negative=gen_negative(graph, strategy, lexicon, rng),
        strategy=strategy,
        source_index=source_index,
    )
