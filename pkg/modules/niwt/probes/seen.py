from __future__ import annotations

import logging

import numpy as np

from ..errors import ConfigError
from ..seeding import rng
from ..types import ProbeMode
from .base import ProbeSampler

logger = logging.getLogger(__name__)


class SeenProbeSampler(ProbeSampler):
    """Uniform draws from the seen-class training images (labels are discarded)."""

    mode = ProbeMode.SEEN

    def __init__(self, images: np.ndarray):
        images = np.asarray(images, dtype=np.float64)
        if images.ndim != 4 or len(images) == 0:
            raise ConfigError(f"seen probes need a non-empty image stack [N, C, H, W], got {images.shape}")
        super().__init__(images.shape[1:])
        self.images = images

    def _draw(self, count: int, seed: int) -> np.ndarray:
        generator = rng(seed, "probes", "seen")
        replace = count > len(self.images)
        if replace:
            logger.warning(f"Requested {count} seen probes from {len(self.images)} images; sampling with replacement")
        picks = generator.choice(len(self.images), size=count, replace=replace)
        return self.images[picks].copy()
