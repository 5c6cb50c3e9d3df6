"""Fully periodic rectangular simulation domains and minimum-image arithmetic."""

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class DomainSpec:
    """Periodic box with edge lengths ``lengths`` (all axes periodic)."""

    lengths: tuple[float, float, float]
    periodic: tuple[bool, bool, bool] = (True, True, True)

    def __post_init__(self):
        if len(self.lengths) != 3:
            raise ValueError("box needs exactly three edge lengths")
        if any(L <= 0 for L in self.lengths):
            raise ValueError(f"box lengths must be positive, got {self.lengths}")

    @property
    def array(self) -> np.ndarray:
        return np.asarray(self.lengths, dtype=np.float64)

    @property
    def volume(self) -> float:
        return float(np.prod(self.array))


def unit_box() -> DomainSpec:
    return DomainSpec((1.0, 1.0, 1.0))


def wrap_positions(pos: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Map positions into [0, L) per axis."""
    box = np.asarray(box, dtype=np.float64)
    return pos - box * np.floor(pos / box)


def min_image(delta: np.ndarray, box: np.ndarray) -> np.ndarray:
    """Shortest periodic image of displacement vectors, in (-L/2, L/2]."""
    box = np.asarray(box, dtype=np.float64)
    return delta - box * np.round(delta / box)
