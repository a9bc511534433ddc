"""Exceptions raised by mixup_merge.

All errors derive from :class:`MixupMergeError`, itself a ``ValueError``, so code
that guards merges with ``except ValueError`` keeps working.
"""

from collections.abc import Iterable

__all__ = [
    "BaseIdentityError",
    "CheckpointError",
    "CongruenceError",
    "EvaluatorError",
    "MalformedHeaderError",
    "ManifestSchemaError",
    "MixupMergeError",
    "NameSetMismatchError",
    "NonFiniteError",
    "OffsetGapError",
    "OffsetOverlapError",
    "PDRUndefinedError",
    "RecipeError",
    "ReplayError",
    "ShapeMismatchError",
    "TrainingDivergedError",
    "TruncatedPayloadError",
]


class MixupMergeError(ValueError):
    """Base class of every data or validation error in mixup_merge."""


class CongruenceError(MixupMergeError):
    """Two tensor collections cannot be combined elementwise."""


class NameSetMismatchError(CongruenceError):
    def __init__(self, only_left: Iterable[str], only_right: Iterable[str]):
        self.only_left = sorted(only_left)
        self.only_right = sorted(only_right)
        super().__init__(
            "Tensor names differ. "
            f"Only in left: {self.only_left}; only in right: {self.only_right}"
        )


class ShapeMismatchError(CongruenceError):
    def __init__(self, name: str, left: tuple[int, ...], right: tuple[int, ...]):
        self.name = name
        super().__init__(f"Tensor '{name}' has shape {left} on one side and {right}")


class BaseIdentityError(MixupMergeError):
    """A DeltaSet was computed against a different checkpoint than expected."""


class NonFiniteError(MixupMergeError):
    def __init__(self, name: str, count: int):
        self.name = name
        super().__init__(f"Tensor '{name}' contains {count} non-finite value(s)")


class RecipeError(MixupMergeError):
    """Recipe fields are inconsistent with the requested method."""


class CheckpointError(MixupMergeError):
    """A checkpoint file violates the container layout."""


class MalformedHeaderError(CheckpointError):
    pass


class OffsetOverlapError(CheckpointError):
    pass


class OffsetGapError(CheckpointError):
    pass


class TruncatedPayloadError(CheckpointError):
    pass


class ManifestSchemaError(MixupMergeError):
    """A merge manifest does not match the published schema."""


class ReplayError(MixupMergeError):
    """Replaying a manifest did not reproduce the recorded digests."""


class EvaluatorError(MixupMergeError):
    """An evaluator failed to score a checkpoint."""


class TrainingDivergedError(MixupMergeError):
    def __init__(self, seed: int, phase: str, step: int):
        self.seed = seed
        super().__init__(
            f"Training diverged (non-finite loss) in phase '{phase}' at step {step} "
            f"for seed {seed}"
        )


class PDRUndefinedError(MixupMergeError):
    """PDR needs a strictly positive metric without attack."""
