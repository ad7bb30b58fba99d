"""Exception types; the CLI maps each to a stable exit code."""


class ShapeError(ValueError):
    """Operands have incompatible or invalid shapes."""


class DataError(ValueError):
    """Input data violates a documented precondition."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class TrainingDiverged(ArithmeticError):
    """A loss became NaN or infinite."""

    def __init__(self, iteration: int, message: str):
        super().__init__(f"iteration {iteration}: {message}")
        self.iteration = iteration
