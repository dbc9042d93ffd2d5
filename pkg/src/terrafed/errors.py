"""Exception hierarchy. ConfigError maps to CLI exit code 1, ContractError to 2."""


class TerrafedError(Exception):
    pass


class ConfigError(TerrafedError):
    """Invalid or infeasible experiment configuration."""


class ContractError(TerrafedError):
    """A runtime precondition or invariant was violated."""


class DimensionError(ContractError):
    """Operand shapes do not agree."""


class LabelError(ContractError):
    """A label value is outside the valid class range."""


class DegenerateBatchError(ContractError):
    """No supervised pixels / no usable samples in a batch."""


class NumericError(ContractError):
    """An operation produced NaN or Inf."""


class MemoryEmptyError(ContractError):
    """An exemplar buffer was required but is empty."""


class PrototypeUndefinedError(ContractError):
    """A stored class has no labeled pixels to build a prototype from."""


class RecoveryImpossibleError(ContractError):
    """Recovery was triggered but cannot run (no memory to fine-tune on)."""


class UndefinedMetricError(ContractError):
    """Every class was excluded from the metric."""
