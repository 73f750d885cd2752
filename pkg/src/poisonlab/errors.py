"""Exception hierarchy shared by all poisonlab modules."""


class PoisonLabError(Exception):
    """Base class for every error raised by this package."""


class ConfigError(PoisonLabError):
    """Invalid configuration value, dimension, or file content."""


class GrammarError(PoisonLabError):
    """Caption does not tokenize/parse under the corpus grammar."""


class LexiconError(PoisonLabError):
    """A replacement repository is missing or unusable."""


class ShapeError(PoisonLabError):
    """Array shapes do not match the declared contract."""


class VocabError(PoisonLabError):
    """Token not present in the model vocabulary."""


class NormError(PoisonLabError):
    """A zero vector cannot be L2-normalized into an embedding."""


class IoError(PoisonLabError):
    """Missing or unreadable input/output path."""


class NumericsError(PoisonLabError):
    """Non-finite value detected during optimization."""
