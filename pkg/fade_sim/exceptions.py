# Copyright 2025 Zenshiro
# Licensed under the Apache License, Version 2.0

"""
Error hierarchy for the FADE simulator.
Every error carries the process exit code the CLI reports for it.
"""

from typing import Optional


class FadeError(Exception):
    """Base class for all simulator errors."""

    exit_code = 1


class ConfigError(FadeError):
    """Invalid experiment configuration or inconsistent structural settings."""

    exit_code = 2


class ShapeError(ConfigError):
    """A tensor does not have the shape its layer stack declares."""


class DataError(FadeError):
    """Unreadable or malformed input data."""

    exit_code = 3


class ParseError(DataError):
    """Malformed IDX payload."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.detail = message
        self.offset = offset


class CheckpointError(DataError):
    """Checkpoint file that cannot be read against the declared model."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


class NumericError(FadeError):
    """Non-finite values during training, attack or evaluation."""

    exit_code = 4

    def __init__(
        self,
        message: str,
        round_index: Optional[int] = None,
        client_id: Optional[int] = None,
        sample: Optional[int] = None,
    ):
        self.message = message
        self.round_index = round_index
        self.client_id = client_id
        self.sample = sample
        super().__init__(self._render())

    def _render(self) -> str:
        context = []
        if self.round_index is not None:
            context.append(f"round {self.round_index}")
        if self.client_id is not None:
            context.append(f"client {self.client_id}")
        if self.sample is not None:
            context.append(f"sample {self.sample}")
        if not context:
            return self.message
        return f"{self.message} [{', '.join(context)}]"

    def with_context(self, round_index: Optional[int] = None, client_id: Optional[int] = None) -> "NumericError":
        """Return a copy with round/client context filled in where missing."""
        return NumericError(
            self.message,
            round_index=self.round_index if self.round_index is not None else round_index,
            client_id=self.client_id if self.client_id is not None else client_id,
            sample=self.sample,
        )


class UsageError(FadeError):
    """API called out of order, e.g. backward before forward."""


class ProtocolError(FadeError):
    """An upload that does not match the round plan or the global model."""

    def __init__(self, client_id: int, message: str):
        super().__init__(f"client {client_id}: {message}")
        self.client_id = client_id


class TheoryError(FadeError):
    """A theory diagnostic could not be evaluated or an oracle disagreed."""

    exit_code = 5


class StrongConvexityError(TheoryError):
    """The curvature constant mu is not positive."""


class UnsupportedHeadError(TheoryError):
    """Closed-form curvature requested for a head that is not linear."""
