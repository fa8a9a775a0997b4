from __future__ import annotations

from typing import Optional, Tuple, Union

from ..errors import ConfigError
from ..types import DatasetManifest, Partition, ProbeMode, ProbePool
from .base import ProbeSampler, require_dataset
from .generic import GenericProbeSampler
from .noise import NoiseProbeSampler
from .seen import SeenProbeSampler


def make_sampler(
    mode: Union[ProbeMode, str],
    dataset: Optional[DatasetManifest] = None,
    image_shape: Optional[Tuple[int, int, int]] = None,
) -> ProbeSampler:
    """
    Build the sampler of ``mode``.

    noise needs only ``image_shape`` (or a dataset to read it from); generic
    and seen need the dataset. Seen probes come from the training partition
    of the seen classes.
    """
    try:
        mode = ProbeMode(mode)
    except ValueError:
        raise ConfigError(f"unknown probe mode {mode!r}") from None
    if mode is ProbeMode.NOISE:
        shape = image_shape or (dataset.image_shape if dataset is not None else None)
        if shape is None:
            raise ConfigError("noise probes need an image shape")
        return NoiseProbeSampler(shape)
    dataset = require_dataset(dataset, mode)
    if mode is ProbeMode.GENERIC:
        return GenericProbeSampler(dataset.image_shape)
    split = dataset.split
    if split is None:
        raise ConfigError("seen probes need a dataset with a GZSL split")
    ids = split.instances(Partition.TRAIN, split.seen, dataset.labels)
    return SeenProbeSampler(dataset.images[ids])


def sample_probes(
    mode: Union[ProbeMode, str],
    count: int,
    seed: int,
    dataset: Optional[DatasetManifest] = None,
    image_shape: Optional[Tuple[int, int, int]] = None,
) -> ProbePool:
    """Unlabeled probe pool of ``count`` images drawn by the ``mode`` sampler."""
    return make_sampler(mode, dataset, image_shape).sample(count, seed)


__all__ = [
    "ProbeSampler",
    "NoiseProbeSampler",
    "GenericProbeSampler",
    "SeenProbeSampler",
    "make_sampler",
    "sample_probes",
]
