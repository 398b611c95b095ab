"""Exception hierarchy.

Four categories map onto the CLI exit codes: configuration (2), data (3),
numeric (4) and io (5). Specific errors subclass a category so callers can
catch broadly or precisely.
"""


class UniphoneError(Exception):
    exit_code = 1


class ConfigurationError(UniphoneError):
    exit_code = 2


class DataError(UniphoneError):
    exit_code = 3


class NumericError(UniphoneError):
    exit_code = 4


class IoError(UniphoneError):
    exit_code = 5


# --- symbolic layer ---------------------------------------------------------

class UnknownSymbol(DataError):
    def __init__(self, position, codepoint, line=None):
        self.position = position
        self.codepoint = codepoint
        self.line = line
        where = f"line {line}, " if line is not None else ""
        super().__init__(
            f"{where}position {position}: unknown codepoint U+{ord(codepoint):04X} ({codepoint!r})"
        )


class EmptyInput(DataError):
    pass


class ParseError(DataError):
    def __init__(self, line, message):
        self.line = line
        super().__init__(f"line {line}: {message}")


class OovWord(DataError):
    def __init__(self, word):
        self.word = word
        super().__init__(f"word not in lexicon: {word!r}")


class RuleGap(DataError):
    def __init__(self, word, position):
        self.word = word
        self.position = position
        super().__init__(f"no rule consumes {word!r} at position {position}")


class EmptyCorpus(DataError):
    pass


class IdOutOfRange(DataError):
    pass


# --- data layer -------------------------------------------------------------

class TooShort(DataError):
    pass


class BadConfig(ConfigurationError):
    pass


class DuplicateId(DataError):
    def __init__(self, utt_id):
        self.utt_id = utt_id
        super().__init__(f"duplicate utterance id: {utt_id}")


class MissingAudio(DataError):
    def __init__(self, utt_id):
        self.utt_id = utt_id
        super().__init__(f"utterance {utt_id}: neither audio nor feats present")


class InsufficientData(DataError):
    pass


# --- numeric layer ----------------------------------------------------------

class ShapeMismatch(NumericError):
    pass


class NonFinite(NumericError):
    pass


class NonScalarLoss(NumericError):
    pass


class TargetTooLong(DataError):
    pass


class BadLabel(DataError):
    pass


class BadStep(ConfigurationError):
    pass


class PrefixTooLong(DataError):
    pass


# --- checkpoints and stages -------------------------------------------------

class FingerprintMismatch(DataError):
    pass


class VocabMissingSymbols(DataError):
    def __init__(self, symbols):
        self.symbols = sorted(symbols)
        super().__init__("target symbols missing from vocabulary: " + " ".join(self.symbols))


class WrongParentStage(ConfigurationError):
    pass


class StageOrderError(ConfigurationError):
    pass


class NoTrainableData(DataError):
    pass


class BadMagic(IoError):
    pass


class VersionMismatch(IoError):
    pass


# --- eval and viz -----------------------------------------------------------

class EmptyEncoding(DataError):
    pass


class EmptyReference(DataError):
    pass


class IdMismatch(DataError):
    pass


class TooFewPoints(DataError):
    pass


class BadPerplexity(ConfigurationError):
    pass


class InsufficientFrames(DataError):
    def __init__(self, language, have, want):
        self.language = language
        super().__init__(f"language {language}: {have} frames available, {want} requested")
