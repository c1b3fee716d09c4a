"""Exception hierarchy.

Every error raised by the library derives from :class:`SegrecError`; the CLI
prints the class name verbatim so failures are greppable in logs.
"""


class SegrecError(Exception):
    """Base class for all library errors."""


# seqcore
class MismatchedLengths(SegrecError):
    pass


class NonPositiveSegment(SegrecError):
    pass


class EmptyPlan(SegrecError):
    pass


class LengthMismatch(SegrecError):
    pass


# tinyformer
class InvalidConfig(SegrecError):
    pass


class ShapeMismatch(SegrecError):
    pass


class VocabOverflow(SegrecError):
    pass


class NoIncludedSlots(SegrecError):
    pass


class CacheLayerMismatch(SegrecError):
    pass


class CorruptFile(SegrecError):
    pass


# trainer
class NonFiniteGradient(SegrecError):
    pass


class EmptyDataset(SegrecError):
    pass


# inference
class PlanMismatch(SegrecError):
    pass


class EmptyRecent(SegrecError):
    pass


class KTooLarge(SegrecError):
    pass


# costmodel
class InstrumentationDisabled(SegrecError):
    pass


# datakit
class MalformedRow(SegrecError):
    def __init__(self, line: int, reason: str = ""):
        self.line = line
        super().__init__(f"line {line}: {reason}" if reason else f"line {line}")


class MissingColumn(SegrecError):
    pass


class EmptyAfterFilter(SegrecError):
    pass


class SequenceTooShort(SegrecError):
    def __init__(self, user, needed: int, got: int):
        self.user = user
        super().__init__(f"user {user}: need {needed} events, have {got}")


# evalkit
class EmptyEvalSet(SegrecError):
    pass


class WindowTooLarge(SegrecError):
    pass


class InconsistentTotals(SegrecError):
    pass


# expertlens
class DidNotConverge(SegrecError):
    pass


class NoExperts(SegrecError):
    pass
