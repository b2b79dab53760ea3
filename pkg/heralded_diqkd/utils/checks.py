# heralded_diqkd/utils/checks.py
import math
import os

# Numerical slack accepted on probabilities that should lie in [0, 1]
PROBABILITY_SLACK = 1e-12


class CheckError(ValueError):
    """Custom exception for parameter checks that fail before any computation starts."""
    def __init__(self, message: str, name: str = None, value=None):
        super().__init__(message)
        self.name = name
        self.value = value


class OutputPathError(CheckError):
    """Raised when a command tries to write outside its output directory."""
    def __init__(self, message: str, path: str = None, root: str = None):
        super().__init__(message, name='path', value=path)
        self.path = path
        self.root = root


def validate_unit_interval(name: str, value: float) -> float:
    """
    Checks that a parameter such as an efficiency or a transmittance lies in [0, 1].

    Args:
        name: Parameter name used in the error message.
        value: The value to check.

    Returns:
        The value as a float.

    Raises:
        CheckError: If the value is not a finite number in [0, 1].
    """
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise CheckError(f"{name} must be a number, got {value!r}", name, value)
    if not math.isfinite(value) or value < 0.0 or value > 1.0:
        raise CheckError(f"{name} must lie in [0, 1], got {value}", name, value)
    return value


def validate_half_open(name: str, value: float, upper: float) -> float:
    """Checks 0 <= value < upper (source parameters)."""
    try:
        value = float(value)
    except (TypeError, ValueError):
        raise CheckError(f"{name} must be a number, got {value!r}", name, value)
    if not math.isfinite(value) or value < 0.0 or value >= upper:
        raise CheckError(f"{name} must lie in [0, {upper}), got {value}", name, value)
    return value


def validate_positive_int(name: str, value, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, int) or value < minimum:
        raise CheckError(f"{name} must be an integer >= {minimum}, got {value!r}", name, value)
    return value


def ensure_inside_directory(path: str, root: str) -> str:
    """
    Enforces the output-directory rule: every file a command writes must resolve
    inside the configured output directory.

    Args:
        path: Target file path, absolute or relative to `root`.
        root: The configured output directory.

    Returns:
        The resolved absolute path.

    Raises:
        OutputPathError: If the resolved path escapes `root`.
    """
    normalized_root = os.path.realpath(os.path.abspath(root))
    target = path if os.path.isabs(path) else os.path.join(normalized_root, path)
    normalized_path = os.path.realpath(os.path.abspath(target))

    if os.path.commonpath([normalized_root, normalized_path]) != normalized_root:
        raise OutputPathError(
            f"Operation aborted: '{path}' resolves outside the output directory '{root}'.",
            path=path, root=root,
        )
    return normalized_path


# Simple test stub for checks.py
if __name__ == '__main__':
    print("--- Testing checks.py ---")
    print(validate_unit_interval('eta_d', 0.9))
    try:
        validate_unit_interval('eta_d', 1.5)
    except CheckError as e:
        print(f"  - OK: Caught expected CheckError: {e}")
    try:
        ensure_inside_directory('../escape.csv', '/tmp/out')
    except OutputPathError as e:
        print(f"  - OK: Caught expected OutputPathError: {e}")
