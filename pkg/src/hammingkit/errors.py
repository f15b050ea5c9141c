"""Exception types shared across the package."""

from __future__ import annotations


class ContractViolation(ValueError):
    """An argument or file violates a documented precondition or invariant."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    Carries enough context to report where the run blew up.
    """

    def __init__(self, message: str, *, epoch: int | None = None) -> None:
        super().__init__(message)
        self.epoch = epoch
