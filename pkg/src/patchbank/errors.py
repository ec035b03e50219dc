"""Typed errors raised across the package.

Everything user-facing derives from PatchBankError so callers (and the CLI)
can catch one base class. File-format problems get their own subclasses
because callers need to tell corruption modes apart: a wrong magic usually
means "not one of our files at all", a truncation means a bad copy, and a
non-finite payload means the producer was broken.
"""


class PatchBankError(Exception):
    """Base class for all errors raised by this package."""


class FeatureFormatError(PatchBankError):
    """A feature/checkpoint file violates the binary container format."""


class BadMagicError(FeatureFormatError):
    """The file does not start with the expected magic bytes."""


class TruncatedPayloadError(FeatureFormatError):
    """The file ends before the payload promised by its header."""


class NonFinitePayloadError(FeatureFormatError):
    """A payload contains NaN or infinity."""


class ManifestError(PatchBankError):
    """A dataset manifest is malformed or inconsistent with the filesystem."""


class ValidationError(PatchBankError):
    """An in-memory value violates a documented invariant or precondition."""


class NonFiniteGradientError(ValidationError):
    """An optimizer step received a gradient containing NaN or infinity."""


class NonFiniteLossError(PatchBankError):
    """Training produced a non-finite loss term.

    Carries enough context to point at the offending step.
    """

    def __init__(self, epoch: int, sample_id: str, term: str):
        self.epoch = epoch
        self.sample_id = sample_id
        self.term = term
        super().__init__(
            f"non-finite loss term {term!r} at epoch {epoch}, sample {sample_id!r}"
        )


class EvaluationError(PatchBankError):
    """A metric is undefined for the given inputs (e.g. single-class labels)."""
