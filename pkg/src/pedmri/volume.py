from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DataError(Exception):
    """Malformed or inconsistent input data (CLI exit status 2)."""


@dataclass
class Volume4D:
    """H x W x D x C voxel grid with free-form JSON-able metadata.

    On disk the data are always 32-bit; in memory a float64 array is allowed
    so that physics round trips can be checked at double precision.
    """

    data: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 3:
            self.data = self.data[..., None]
        if self.data.ndim != 4:
            raise DataError(f"Volume4D needs 4 axes, got shape {self.data.shape}")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return tuple(int(s) for s in self.data.shape)

    @property
    def channels(self) -> int:
        return int(self.data.shape[3])
