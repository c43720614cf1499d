from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class MaskError(ValueError):
    """A dropout mask does not fit the model it is applied to."""


@dataclass(frozen=True)
class DropoutMask:
    """Binary mask over a model's maskable units; ``True`` marks a dropped unit.

    ``target`` names what the bits index: ``"mlp:<layer>"`` for entries of
    one weight matrix (row-major over its (in, out) shape), ``"splats"``
    for whole splats.
    """

    target: str
    dropped: np.ndarray = field(repr=False)
    ratio: float

    def __post_init__(self):
        d = np.asarray(self.dropped, dtype=bool)
        if d.ndim != 1:
            raise MaskError("mask bits must form a flat vector")
        object.__setattr__(self, "dropped", d)

    @property
    def n_units(self) -> int:
        return int(self.dropped.size)

    @property
    def n_dropped(self) -> int:
        return int(self.dropped.sum())

    def keep(self) -> np.ndarray:
        return ~self.dropped


def n_dropped_for(ratio: float, n_units: int) -> int:
    """round(r * U), halves rounded up."""
    return int(np.floor(ratio * n_units + 0.5))
