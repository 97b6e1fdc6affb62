"""Exception hierarchy shared across the package."""


class PlanMergeError(Exception):
    """Base class for all package errors."""


class LayoutError(PlanMergeError):
    """Parameter vectors or group layouts do not line up."""


class NumericError(PlanMergeError):
    """A NaN/Inf showed up where only finite values are allowed."""


class FormatError(PlanMergeError):
    """A file does not conform to the expected on-disk format."""


class InputError(PlanMergeError):
    """Caller passed structurally invalid arguments."""


class StateError(PlanMergeError):
    """An operation ran before its prerequisites were in place."""


class SpecError(PlanMergeError):
    """A domain specification cannot be realized."""


class TrainingError(PlanMergeError):
    """Training diverged or could not proceed."""
