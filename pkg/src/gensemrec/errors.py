"""Exception types raised across the toolkit."""


class GenSemRecError(Exception):
    """Base class for all toolkit errors."""


class CapacityExceeded(GenSemRecError):
    pass


class DuplicateTriple(GenSemRecError):
    pass


class InvalidSid(GenSemRecError, KeyError):
    pass


class InfeasibleQuota(GenSemRecError):
    pass


class LengthMismatch(GenSemRecError, ValueError):
    pass


class EmptyPairSet(GenSemRecError, ValueError):
    pass


class DimensionMismatch(GenSemRecError, ValueError):
    pass


class GroupTooSmall(GenSemRecError, ValueError):
    pass


class NoJudgedPairs(GenSemRecError, ValueError):
    pass


class KTooLarge(GenSemRecError, ValueError):
    pass


class CatalogTooLarge(GenSemRecError):
    pass


class PartitionMismatch(GenSemRecError, ValueError):
    pass


class ConfigError(GenSemRecError, ValueError):
    pass


class MissingWorld(GenSemRecError, FileNotFoundError):
    pass


class ResumeMismatch(GenSemRecError):
    pass


class FormatError(GenSemRecError, ValueError):
    """A persisted text file does not follow its schema."""
