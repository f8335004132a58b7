"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor shapes are incompatible with the requested operation."""


class FormatError(ValueError):
    """A binary file (dataset or checkpoint) violates its format."""


class ConfigError(ValueError):
    """An experiment config failed schema validation.

    ``problems`` lists one human-readable diagnostic per offending key.
    """

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


class TrainingDiverged(RuntimeError):
    """Mean epoch loss became non-finite during optimization."""
