from typing import List, Optional


class ArchtreeError(Exception):
    """Base class for every error raised by the pruning engine."""


class GraphValidationError(ArchtreeError, ValueError):
    def __init__(self, violations: List[str]):
        self.violations = list(violations)
        super().__init__("invalid model graph: " + "; ".join(self.violations))


class UnsupportedLayerError(ArchtreeError, ValueError):
    pass


class PruningError(ArchtreeError, ValueError):
    pass


class ShapeMismatchError(ArchtreeError, ValueError):
    pass


class ManifestError(ArchtreeError, ValueError):
    pass


class CacheFingerprintError(ArchtreeError, ValueError):
    pass


class ProviderError(ArchtreeError, RuntimeError):
    def __init__(self, message: str, stderr: Optional[str] = None):
        self.stderr = stderr
        super().__init__(message if not stderr else f"{message}: {stderr.strip()}")


class UnmeasuredSignatureError(ProviderError, LookupError):
    def __init__(self, counts):
        self.counts = tuple(counts)
        super().__init__(f"unmeasured signature {list(self.counts)}")


class InfeasibleGoalError(ArchtreeError, RuntimeError):
    def __init__(self, step: int):
        self.step = step
        super().__init__(f"infeasible latency goal at step {step}")


EXIT_OK = 0
EXIT_INPUT_ERROR = 2
EXIT_INFEASIBLE = 3
EXIT_PROVIDER_FAILURE = 4


def exit_code_for(exc: BaseException) -> int:
    """Maps an exception to the CLI's stable exit-code contract."""
    if isinstance(exc, InfeasibleGoalError):
        return EXIT_INFEASIBLE
    if isinstance(exc, ProviderError):
        return EXIT_PROVIDER_FAILURE
    return EXIT_INPUT_ERROR
