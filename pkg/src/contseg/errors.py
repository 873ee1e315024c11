"""Exception hierarchy shared across the package."""


class ContsegError(Exception):
    """Base class for all package errors."""


class MalformedHeader(ContsegError):
    pass


class PayloadSizeMismatch(ContsegError):
    pass


class NonFiniteVoxel(ContsegError):
    pass


class TooFewCases(ContsegError):
    pass


class ShapeTooSmall(ContsegError):
    pass


class IncompatiblePatchSize(ContsegError):
    pass


class BadInputShape(ContsegError):
    pass


class DimMismatch(ContsegError):
    pass


class ShapeMismatch(ContsegError):
    pass


class NoAnchor(ContsegError):
    pass


class NoPreviousModel(ContsegError):
    pass


class EmptyDataset(ContsegError):
    pass


class NonFiniteLoss(ContsegError):
    pass


class UnknownGroup(ContsegError):
    pass


class UndefinedMetric(ContsegError):
    pass


class OutOfRange(ContsegError):
    pass


class NoViTComponent(ContsegError):
    pass


class IncompleteGrid(ContsegError):
    pass


class ConfigInvalid(ContsegError):
    """Raised with every violated config field, each named by its JSON path."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{p}: {m}" for p, m in self.problems))


class RunNotFound(ContsegError):
    pass
