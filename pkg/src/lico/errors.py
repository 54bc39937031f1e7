"""Error taxonomy shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class DomainError(ValueError):
    """A value is outside the domain an operation accepts."""


class ContractError(RuntimeError):
    """A caller violated an API contract (not a data problem)."""


class ConfigError(ValueError):
    """A run configuration is malformed or inconsistent."""


class NonFiniteLossError(RuntimeError):
    """A loss term became NaN/Inf during training."""

    def __init__(self, term: str, sample: int | None = None):
        self.term = term
        self.sample = sample
        where = f" (sample {sample})" if sample is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
