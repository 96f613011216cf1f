"""Exception hierarchy shared by all mlmbias modules."""


class MlmBiasError(Exception):
    """Base class for all errors raised by this package."""


# corpus
class MalformedRow(MlmBiasError):
    pass


class GroupBoundsViolation(MlmBiasError):
    pass


class CorpusShapeError(MlmBiasError):
    """Cardinality contract broken (wrong number of templates/persons/professions)."""


class MissingGermanForm(MlmBiasError):
    pass


class TargetNotSingleToken(MlmBiasError):
    pass


class SlotNotFound(MlmBiasError):
    pass


# scoring / encoding
class EmptyBatch(MlmBiasError):
    pass


class TokenizationFailure(MlmBiasError):
    pass


class TokenNotInVocabulary(MlmBiasError):
    pass


class PositionNotMasked(MlmBiasError):
    pass


class NonPositiveProbability(MlmBiasError):
    pass


class ScoringError(MlmBiasError):
    """Scorer error annotated with the instance it occurred on."""


# toy model / training
class EmptyCorpus(MlmBiasError):
    pass


class SequenceTooLong(MlmBiasError):
    pass


class NoEligiblePositions(MlmBiasError):
    pass


class DivergenceDetected(MlmBiasError):
    pass


class CheckpointError(MlmBiasError):
    pass


# stats
class DegenerateSample(MlmBiasError):
    pass


class NonPositiveN(MlmBiasError):
    pass


class KeyMismatch(MlmBiasError):
    pass


class MissingCell(MlmBiasError):
    pass


# cds
class MissingTextColumn(MlmBiasError):
    pass


class AmbiguousTokenUnresolved(MlmBiasError):
    pass


class LexiconConflict(MlmBiasError):
    """A word maps to two targets under the same discriminator."""


# backends
class BackendUnavailable(MlmBiasError):
    pass


class BridgeProtocolError(MlmBiasError):
    pass
