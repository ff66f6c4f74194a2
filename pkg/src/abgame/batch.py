from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParameterError
from .numeric import as_finite


@dataclass(frozen=True, eq=False)
class LabeledBatch:
    """Query points with the labels returned for them.

    ``mode == "hard"`` labels are in {-1, +1}; ``mode == "soft"`` labels are
    probabilities in [0, 1].
    """

    X: np.ndarray
    y: np.ndarray
    mode: str = "hard"

    def __post_init__(self):
        X = as_finite(self.X, "X", ndim=2)
        y = as_finite(self.y, "y", ndim=1)
        if X.shape[0] < 1:
            raise DimensionError("a labeled batch needs at least one point")
        if y.size != X.shape[0]:
            raise DimensionError(f"{X.shape[0]} points but {y.size} labels")
        if self.mode == "hard":
            if not np.all(np.abs(y) == 1):
                raise ParameterError("hard labels must be -1 or +1")
        elif self.mode == "soft":
            if np.any(y < 0) or np.any(y > 1):
                raise ParameterError("soft labels must lie in [0, 1]")
        else:
            raise ParameterError(f"unknown label mode {self.mode!r}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)

    def __len__(self):
        return self.X.shape[0]

    def targets01(self) -> np.ndarray:
        """Labels on the [0, 1] scale used by the cross-entropy loss."""
        return (self.y + 1.0) / 2.0 if self.mode == "hard" else self.y
