"""Exception types shared across the package."""


class DataError(Exception):
    """Invalid or missing input data (datasets, checkpoints, sizing)."""


class NumericError(Exception):
    """Numerical failure during optimization (NaN gradients, divergence)."""
