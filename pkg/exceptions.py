"""Error types raised across the toolkit.

All errors derive from ``ValueError`` so callers that only know about bad
input keep working; ``exit_code`` is what the command line returns.
"""
from typing import Any, Dict, Optional


class PopComposerError(ValueError):
    """Base class for every error raised by this package"""

    exit_code = 2


class ConfigError(PopComposerError):
    """Missing or malformed configuration"""

    exit_code = 1


class ParseError(PopComposerError):
    """Malformed Standard MIDI File"""

    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ValidationError(PopComposerError):
    """A value cannot be represented in the target format"""


class NoMelodyError(PopComposerError):
    """No pitched track with notes is available for melody identification"""


class NoRootError(PopComposerError):
    """A chord bin holds no notes"""


class OutOfModeError(PopComposerError):
    """A chord root is not diatonic to the current tonic and mode"""


class KeyEstimationError(PopComposerError):
    """Key estimation was asked to work on no notes"""


class EncodingError(PopComposerError):
    """A segment cannot be encoded into the network's tensor layout"""


class GrammarSyntaxError(PopComposerError):
    """Grammar text does not follow the rule syntax"""


class EmptyGrammarError(GrammarSyntaxError):
    """Grammar text holds no rules"""


class ScopeError(GrammarSyntaxError):
    """A bound variable is referenced outside its let-binding"""


class GrammarRecursionError(GrammarSyntaxError):
    """A nonterminal can never finish expanding"""


class ExpansionError(PopComposerError):
    """Expansion exceeded its depth limit or produced an unplayable section"""


class ShapeError(PopComposerError):
    """Tensor dimensions disagree with the model configuration"""


class TrainingDivergedError(PopComposerError):
    """Training produced a non-finite loss"""

    exit_code = 3

    def __init__(self, message: str, snapshot: Optional[Dict[str, Any]] = None):
        self.snapshot = snapshot or {}
        super().__init__(message)


class ReharmonizeError(PopComposerError):
    """The source song yields no segment that can be reharmonized"""
