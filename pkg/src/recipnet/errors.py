"""Exception types shared across the package."""


class RecipnetError(Exception):
    """Base class for all package errors."""


class LatticeDegenerate(RecipnetError):
    """Lattice matrix is singular or numerically too close to singular."""


class NonFiniteCoordinate(RecipnetError):
    """Coordinate contains NaN or infinity."""


class AtomOverlap(RecipnetError):
    """Two atoms (or periodic images) closer than the overlap threshold."""


class ShapeError(RecipnetError):
    """Array arguments have incompatible shapes."""


class FrequencyMismatch(RecipnetError):
    """Structure factors built from a different frequency set than requested."""


class UnknownElement(RecipnetError):
    """Atomic number missing from the feature table."""


class ConfigError(RecipnetError):
    """Invalid configuration value."""


class NonFiniteGradient(RecipnetError):
    """Gradient contains NaN or infinity during an optimizer step."""


class NondeterministicFunction(RecipnetError):
    """Function under finite-difference check is not deterministic."""


class EmptySplit(RecipnetError):
    """Dataset split contains no usable records."""


class ParseError(RecipnetError):
    """A dataset line could not be parsed."""

    def __init__(self, line_number, message):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {message}")


class ValidationError(RecipnetError):
    """A dataset record failed structure validation."""

    def __init__(self, record_id, violations):
        self.record_id = record_id
        self.violations = violations
        super().__init__(f"record {record_id!r}: " + "; ".join(str(v) for v in violations))
