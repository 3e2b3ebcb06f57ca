"""Exception hierarchy; the CLI maps each class to a distinct exit code."""


class SkinmatchError(Exception):
    """Base class for all library errors."""


class MeshLoadError(SkinmatchError):
    """Input mesh file is unreadable or malformed."""


class MeshValidationError(SkinmatchError):
    """Mesh violates a structural invariant (bad indices, degenerate edges)."""


class AnnotationError(SkinmatchError):
    """Landmark or lesion annotations are invalid or mismatched."""


class ConfigError(SkinmatchError):
    """Configuration value out of range or unparseable."""


class SynthesisError(SkinmatchError):
    """Synthetic pair generation cannot satisfy the requested spec."""


class EvaluationError(SkinmatchError):
    """Evaluation inputs are inconsistent (missing labels, empty sets)."""
