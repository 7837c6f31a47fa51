"""Exception hierarchy shared by every subpackage."""


class UnifierError(Exception):
    pass


class ShapeError(UnifierError, ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(UnifierError, ValueError):
    """A precondition of a call was violated (e.g. non-scalar loss)."""


class ConfigError(UnifierError, ValueError):
    """Unknown option or invalid configuration value.

    ``field`` names the offending config key so the CLI can report it.
    """

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class ProtocolError(UnifierError, RuntimeError):
    """Continual-learning protocol misuse (expanding mid-task, expanding a seen scenario)."""


class IntegrityError(UnifierError, RuntimeError):
    """Internal structure is inconsistent (e.g. projector width != K * d1)."""
