from __future__ import annotations

import asyncio
from abc import ABC, abstractmethod
from typing import Optional, Tuple

from ..errors import ConfigError
from ..types import ProbeMode, ProbePool


class ProbeSampler(ABC):
    """
    Abstract source of unlabeled probe images.

    Probe images are what the weight transfer feeds through the network to
    observe importances; they carry no labels. Every sampler is
    bit-reproducible for a given seed.
    """

    mode: ProbeMode

    def __init__(self, image_shape: Tuple[int, int, int]):
        if len(image_shape) != 3 or min(image_shape) < 1:
            raise ConfigError(f"probe image shape must be (C, H, W) with positive sizes, got {image_shape}")
        self.image_shape = tuple(int(s) for s in image_shape)

    def sample(self, count: int, seed: int) -> ProbePool:
        """
        Draw a pool of probe images.

        Args:
            count: Number of images in the pool
            seed: Seed of the sampling stream

        Returns:
            ProbePool of ``count`` images shaped like the network input
        """
        if count < 1:
            raise ConfigError(f"probe count must be >= 1, got {count}")
        return ProbePool(self.mode, self._draw(count, seed))

    async def asample(self, count: int, seed: int) -> ProbePool:
        """Draw a pool without blocking the event loop."""
        return await asyncio.to_thread(self.sample, count, seed)

    @abstractmethod
    def _draw(self, count: int, seed: int):
        """Return the images [count, C, H, W]."""
        raise NotImplementedError

    def __repr__(self) -> str:
        return f"{type(self).__name__}(image_shape={self.image_shape})"


def require_dataset(dataset: Optional[object], mode: ProbeMode) -> object:
    if dataset is None:
        raise ConfigError(f"probe mode {mode.value!r} needs a dataset")
    return dataset
