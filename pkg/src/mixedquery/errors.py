"""Exception hierarchy.

Every error raised for bad *data* (as opposed to bad usage) derives from
:class:`MixedQueryError`; the CLI maps those to exit code 1.
"""

from __future__ import annotations


class MixedQueryError(Exception):
    """Base class for domain errors."""


class SizeMismatch(MixedQueryError, ValueError):
    pass


class DimMismatch(MixedQueryError, ValueError):
    pass


class EmptyMask(MixedQueryError, ValueError):
    pass


class OverlapError(MixedQueryError, ValueError):
    pass


class EmptyText(MixedQueryError, ValueError):
    pass


class TooManyCaptions(MixedQueryError, ValueError):
    pass


class IndexOutOfRange(MixedQueryError, IndexError):
    pass


class Infeasible(MixedQueryError, ValueError):
    """More ground-truth rows than query columns."""


class MissingThingStuffTag(MixedQueryError, ValueError):
    """Separated matching needs a thing/stuff tag on every ground truth."""


class DegenerateBox(MixedQueryError, ValueError):
    pass


class KTooLarge(MixedQueryError, ValueError):
    pass


class UnknownDataset(MixedQueryError, KeyError):
    pass


class NonFiniteLoss(MixedQueryError, FloatingPointError):
    def __init__(self, step: int, value: float):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
        self.value = value
