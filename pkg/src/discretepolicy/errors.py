"""Exception types shared across the package."""

from __future__ import annotations


class ContractViolation(ValueError):
    """An operation was called with arguments that break its preconditions."""


class InvalidConfig(ValueError):
    """A configuration value is missing, out of range or inconsistent."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value or failed to converge.

    ``head`` and ``dim`` identify the policy head and action dimension when
    the failure originates in a distribution; ``step`` is the environment
    step index when it surfaces during a rollout.
    """

    def __init__(
        self,
        message: str,
        *,
        head: str | None = None,
        dim: int | None = None,
        step: int | None = None,
    ) -> None:
        self.message = message
        self.head = head
        self.dim = dim
        self.step = step
        parts = [message]
        if head is not None:
            parts.append(f"head={head}")
        if dim is not None:
            parts.append(f"dim={dim}")
        if step is not None:
            parts.append(f"step={step}")
        super().__init__(" ".join(parts) if len(parts) > 1 else message)

    def with_step(self, step: int) -> "NumericError":
        return NumericError(self.message, head=self.head, dim=self.dim, step=step)

    def __reduce__(self):
        return (_rebuild_numeric_error, (self.message, self.head, self.dim, self.step))


def _rebuild_numeric_error(message, head, dim, step):
    return NumericError(message, head=head, dim=dim, step=step)
