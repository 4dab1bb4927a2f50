"""Exception types shared across the package.

Everything derives from ValueError or RuntimeError so callers that do not care
about the fine distinctions can still catch broadly.
"""


class DimensionError(ValueError):
    """Operand shapes are incompatible; message names both shapes."""


class ContractError(ValueError):
    """A documented precondition was violated (bad norms, bad distribution, ...)."""


class DegenerateInputError(ValueError):
    """Input is in the function's domain hole (zero vector and friends)."""


class PaddingOverflowError(ValueError):
    """Content does not fit the padding target length. Carries the admissible max."""

    def __init__(self, msg: str, max_content_len: int):
        super().__init__(msg)
        self.max_content_len = max_content_len


class ManifestError(ValueError):
    """Malformed manifest line (bad JSON or bad schema); message names the line."""

    def __init__(self, msg: str, line_no: int | None = None):
        super().__init__(msg)
        self.line_no = line_no


class EmptyCorpusError(ValueError):
    """A corpus spec that generates zero records."""


class ConfigError(ValueError):
    """Bad run configuration; message names the offending key."""


class CheckpointError(RuntimeError):
    """Unreadable or corrupted checkpoint file."""


class TrainingDiverged(RuntimeError):
    """Non-finite loss during training. Carries the failing step index."""

    def __init__(self, step: int, loss_value: float):
        super().__init__(f"non-finite loss {loss_value!r} at step {step}")
        self.step = step
        self.loss_value = loss_value
