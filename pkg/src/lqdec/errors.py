"""Exceptions shared across the package."""


class FormatError(Exception):
    """A byte stream or file does not conform to an on-disk format."""


class InfeasibleBudgetError(Exception):
    """No assignment fits the storage budget.

    Carries the minimal achievable total storage so callers can report
    how far off the requested budget is.
    """

    def __init__(self, budget_bits, min_storage_bits):
        self.budget_bits = budget_bits
        self.min_storage_bits = min_storage_bits
        super().__init__(
            f"budget of {float(budget_bits):.6g} bits is below the minimal "
            f"achievable storage of {float(min_storage_bits):.6g} bits"
        )
