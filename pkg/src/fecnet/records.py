"""Per-layer cluster assignments captured during a forward pass."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class AssignmentRecord:
    """Hard assignment of one clustering layer.

    ``assignment`` has shape ``(B, H*W)`` with entries in ``[0, O)`` where
    ``O = center_grid[0] * center_grid[1]``; ``representatives`` is the
    ``(B, O, C')`` snapshot of the aggregated cluster features.
    """

    layer_id: int
    kind: str  # "encode" or "pool"
    input_grid: tuple[int, int]
    center_grid: tuple[int, int]
    assignment: np.ndarray
    representatives: np.ndarray

    def __post_init__(self):
        self.assignment = np.asarray(self.assignment, dtype=np.int64)
        if self.assignment.ndim == 1:
            self.assignment = self.assignment[None]
        if self.representatives is not None:
            reps = np.asarray(self.representatives)
            self.representatives = reps[None] if reps.ndim == 2 else reps
        n = self.input_grid[0] * self.input_grid[1]
        if self.assignment.shape[-1] != n:
            raise ContractError(
                f"assignment length {self.assignment.shape[-1]} != grid size {n}")
        if self.assignment.size and (
                self.assignment.min() < 0 or self.assignment.max() >= self.num_centers):
            raise ContractError(f"assignment entries must lie in [0, {self.num_centers})")

    @property
    def num_pixels(self) -> int:
        return self.input_grid[0] * self.input_grid[1]

    @property
    def num_centers(self) -> int:
        return self.center_grid[0] * self.center_grid[1]

    @property
    def batch_size(self) -> int:
        return self.assignment.shape[0]

    def select(self, index: int) -> AssignmentRecord:
        """The record restricted to a single image of the batch."""
        reps = None if self.representatives is None else self.representatives[index:index + 1]
        return AssignmentRecord(self.layer_id, self.kind, self.input_grid, self.center_grid,
                                self.assignment[index:index + 1], reps)

    def to_dict(self, index: int = 0) -> dict:
        return {
            "layer_id": int(self.layer_id),
            "kind": self.kind,
            "input_grid": list(self.input_grid),
            "center_grid": list(self.center_grid),
            "assignment": self.assignment[index].tolist(),
        }
