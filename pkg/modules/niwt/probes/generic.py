from __future__ import annotations

import numpy as np

from ..seeding import rng
from ..synthbench import render_background, to_chw
from ..types import ProbeMode
from .base import ProbeSampler


class GenericProbeSampler(ProbeSampler):
    """
    Procedural textures from the benchmark's background generator.

    These images share the natural statistics of the benchmark backdrops but
    contain no glyph, so they show no class on purpose.
    """

    mode = ProbeMode.GENERIC

    def _draw(self, count: int, seed: int) -> np.ndarray:
        channels, height, width = self.image_shape
        images = np.empty((count,) + self.image_shape)
        for i in range(count):
            texture = to_chw(render_background(rng(seed, "probes", "generic", i), height, width))
            # non-RGB inputs get the channel mean repeated
            images[i] = texture if channels == 3 else np.repeat(texture.mean(axis=0, keepdims=True), channels, axis=0)
        return images
