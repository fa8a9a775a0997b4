from __future__ import annotations

import numpy as np

from ..seeding import rng
from ..types import ProbeMode
from .base import ProbeSampler


class NoiseProbeSampler(ProbeSampler):
    """I.i.d. standard-normal pixels."""

    mode = ProbeMode.NOISE

    def _draw(self, count: int, seed: int) -> np.ndarray:
        return rng(seed, "probes", "noise").standard_normal((count,) + self.image_shape)
