"""
Class-conditional neuron importances and their rank statistics.

The importance of channel ``n`` for class ``c`` at a layer is the spatial mean
of the gradient of the pre-softmax score ``o_c`` with respect to that
channel's activation map. Fully-connected (or pooled) layers have no spatial
extent and use the raw gradient per unit.
"""
from __future__ import annotations

import csv
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import rankdata

from autodiff import Graph, Tensor, no_grad, ops

from .errors import ConfigError, DegenerateRanksError, FormatError, MissingArtifactError, ShapeError
from .model import Network
from .seeding import rng
from .types import CLASS_AGGREGATE, ImportanceVector

logger = logging.getLogger(__name__)

CROSS_PAIRS = 10_000


def spatial_mean(grad: Tensor) -> Tensor:
    """
    [B, C, H, W] -> [B, C] mean over positions; [B, C] passes through.

    The mean carries the 1/(H*W) of the global pool: for a linear map of
    pooled features with head row ``w`` every position has gradient
    ``w / (H*W)``, so the importance is ``w / (H*W)``, not ``w``. The
    constant factor changes neither cosines nor ranks.
    """
    if grad.ndim == 4:
        return ops.reduce_mean(grad, axis=(2, 3))
    if grad.ndim == 2:
        return grad
    raise ShapeError(f"cannot take importances of an activation with shape {grad.shape}")


def observed_importance(
    net: Network,
    layer: str,
    activation: Tensor,
    rows: Sequence[int],
    graph: Graph,
    head: Optional[Tuple[Tensor, Tensor]] = None,
    create_graph: bool = True,
) -> Tensor:
    """
    Importances [B, C] of ``activation`` (a tracked leaf at ``layer``).

    Instance ``i`` is scored by head row ``rows[i]``; ``head`` may replace the
    network head (e.g. by a single row that is being optimized). With
    ``create_graph`` the result stays differentiable, which is what turns the
    transfer objective into a Hessian-vector product.
    """
    with graph.recording():
        scores = net.forward_from(activation, layer, head)
        mask = np.zeros(scores.shape)
        mask[np.arange(scores.shape[0]), np.asarray(rows)] = 1.0
        total = ops.reduce_sum(ops.multiply(scores, Tensor(mask)))
    (grad,) = graph.backward(total, [activation], create_graph=create_graph)
    with graph.recording():
        return spatial_mean(grad)


def neuron_importance(
    net: Network,
    layer: str,
    image: np.ndarray,
    class_id: int,
    graph: Optional[Graph] = None,
    source: str = CLASS_AGGREGATE,
) -> ImportanceVector:
    """
    Importance vector of ``class_id`` for one input.

    Args:
        net: Network whose head contains ``class_id``
        layer: Named layer (conv1..conv3 or gap)
        image: One image [C, H, W] (or a batch of one)
        class_id: Dataset class whose score is differentiated
        graph: When given, the vector is recorded there and ``tensor`` is set
            so it can be differentiated again; otherwise it is detached
        source: Tag stored on the vector (usually the instance id)

    Returns:
        ImportanceVector with one value per channel of ``layer``
    """
    net.position(layer)
    row = net.row_of(class_id)
    batch = np.asarray(image, dtype=np.float64)
    if batch.ndim == 3:
        batch = batch[None]
    if batch.shape[0] != 1:
        raise ShapeError(f"neuron_importance takes a single input, got batch {batch.shape[0]}")
    with no_grad():
        activation = Tensor(net.forward_until(batch, layer).data, requires_grad=True)
    if graph is not None:
        alpha = observed_importance(net, layer, activation, [row], graph)
        with graph.recording():
            flat = ops.reshape(alpha, (alpha.shape[1],))
        return ImportanceVector(layer, class_id, flat.numpy(), source=source, tensor=flat)
    with Graph() as local:
        alpha = observed_importance(net, layer, activation, [row], local, create_graph=False)
        values = alpha.numpy()[0]
    return ImportanceVector(layer, class_id, values, source=source)


def importance_dataset(
    net: Network,
    layer: str,
    images: np.ndarray,
    labels: Sequence[int],
    instance_ids: Optional[Sequence[int]] = None,
    batch_size: int = 64,
    threads: int = 1,
) -> List[ImportanceVector]:
    """One importance vector per instance, taken for the instance's own label."""
    labels = [int(c) for c in labels]
    if len(labels) != len(images):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    ids = list(instance_ids) if instance_ids is not None else list(range(len(images)))
    rows = [net.row_of(c) for c in labels]
    net.position(layer)

    def run(start: int) -> np.ndarray:
        stop = min(start + batch_size, len(images))
        with no_grad():
            activation = Tensor(net.forward_until(images[start:stop], layer).data, requires_grad=True)
        with Graph() as graph:
            alpha = observed_importance(net, layer, activation, rows[start:stop], graph, create_graph=False)
            return alpha.numpy()

    starts = list(range(0, len(images), batch_size))
    if threads > 1 and len(starts) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(run, starts))
    else:
        chunks = [run(s) for s in starts]
    values = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, net.channels(layer)))
    logger.info(f"Computed {len(values)} importance vectors at {layer}")
    return [ImportanceVector(layer, c, v, source=str(i)) for i, c, v in zip(ids, labels, values)]


def class_aggregate(vectors: Iterable[ImportanceVector]) -> Dict[int, ImportanceVector]:
    """Mean importance vector per class."""
    grouped: Dict[int, List[np.ndarray]] = {}
    layers: Dict[int, str] = {}
    for vector in vectors:
        grouped.setdefault(vector.class_id, []).append(vector.values)
        layers[vector.class_id] = vector.layer
    return {
        c: ImportanceVector(layers[c], c, np.mean(values, axis=0), source=CLASS_AGGREGATE)
        for c, values in sorted(grouped.items())
    }


# ---------------------------------------------------------------------------
# Rank statistics


def _normalized_ranks(matrix: np.ndarray) -> np.ndarray:
    """Row-wise average ranks, centred and scaled to unit norm."""
    ranks = rankdata(matrix, method="average", axis=1)
    centred = ranks - ranks.mean(axis=1, keepdims=True)
    norms = np.linalg.norm(centred, axis=1, keepdims=True)
    if np.any(norms == 0):
        bad = int(np.flatnonzero(norms[:, 0] == 0)[0])
        raise DegenerateRanksError(f"row {bad} has zero rank variance; Spearman correlation is undefined")
    return centred / norms


def spearman(x: Sequence[float], y: Sequence[float]) -> float:
    """Spearman rank correlation with average ranks for ties."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or x.shape != y.shape:
        raise ShapeError(f"spearman needs two vectors of equal length, got {x.shape} and {y.shape}")
    if x.shape[0] < 2:
        raise ShapeError("spearman needs at least two values")
    z = _normalized_ranks(np.stack([x, y]))
    return float(np.clip(z[0] @ z[1], -1.0, 1.0))


def rowwise_spearman(predicted: np.ndarray, observed: np.ndarray) -> np.ndarray:
    """Spearman correlation of each row pair."""
    predicted = np.atleast_2d(np.asarray(predicted, dtype=np.float64))
    observed = np.atleast_2d(np.asarray(observed, dtype=np.float64))
    if predicted.shape != observed.shape:
        raise ShapeError(f"shapes {predicted.shape} and {observed.shape} differ")
    return np.clip(np.sum(_normalized_ranks(predicted) * _normalized_ranks(observed), axis=1), -1.0, 1.0)


def correlation_report(
    groups: Dict[int, Sequence[np.ndarray]],
    cross_pairs: int = CROSS_PAIRS,
    seed: int = 0,
) -> Tuple[float, float]:
    """
    Mean within-class and mean cross-class Spearman correlation.

    Within-class averages over every same-class instance pair. Cross-class
    averages over ``cross_pairs`` uniformly sampled pairs from different
    classes (all of them when there are fewer).
    """
    if len(groups) < 2:
        raise ConfigError("correlation_report needs at least two classes")
    if any(len(v) < 2 for v in groups.values()):
        raise ConfigError("correlation_report needs at least two instances per class")

    classes = sorted(groups)
    matrix = np.concatenate([np.asarray(groups[c], dtype=np.float64) for c in classes], axis=0)
    labels = np.concatenate([np.full(len(groups[c]), c) for c in classes])
    z = _normalized_ranks(matrix)

    within_sum, within_count = 0.0, 0
    for c in classes:
        zc = z[labels == c]
        gram = zc @ zc.T
        upper = np.triu_indices(len(zc), k=1)
        within_sum += float(gram[upper].sum())
        within_count += len(upper[0])

    n = len(labels)
    total_cross = (n * n - sum(int(np.sum(labels == c)) ** 2 for c in classes)) // 2
    if total_cross <= cross_pairs:
        i, j = np.triu_indices(n, k=1)
        keep = labels[i] != labels[j]
        i, j = i[keep], j[keep]
    else:
        generator = rng(seed, "cross_pairs")
        picked_i: List[np.ndarray] = []
        picked_j: List[np.ndarray] = []
        remaining = cross_pairs
        while remaining > 0:
            a = generator.integers(0, n, size=2 * remaining)
            b = generator.integers(0, n, size=2 * remaining)
            keep = labels[a] != labels[b]
            a, b = a[keep][:remaining], b[keep][:remaining]
            picked_i.append(a)
            picked_j.append(b)
            remaining -= len(a)
        i, j = np.concatenate(picked_i), np.concatenate(picked_j)
    cross = float(np.mean(np.sum(z[i] * z[j], axis=1)))
    return within_sum / within_count, cross


def correlation_report_from_vectors(vectors: Iterable[ImportanceVector], **kwargs) -> Tuple[float, float]:
    groups: Dict[int, List[np.ndarray]] = {}
    for vector in vectors:
        groups.setdefault(vector.class_id, []).append(vector.values)
    return correlation_report(groups, **kwargs)


@dataclass
class PermutationResult:
    observed: float
    p_value: float
    null_mean: float
    permutations: int


def rank_permutation_test(
    predicted: np.ndarray,
    observed: np.ndarray,
    n_permutations: int = 1000,
    seed: int = 0,
) -> PermutationResult:
    """
    Mean row-wise Spearman correlation against a row-shuffle null.

    The null pairs each observed row with a randomly permuted predicted row;
    ``p = (1 + #{null >= observed}) / (1 + n_permutations)``.
    """
    zp = _normalized_ranks(np.atleast_2d(predicted))
    zo = _normalized_ranks(np.atleast_2d(observed))
    if zp.shape != zo.shape:
        raise ShapeError(f"shapes {zp.shape} and {zo.shape} differ")
    statistic = float(np.mean(np.sum(zp * zo, axis=1)))
    generator = rng(seed, "permutation_test")
    null = np.empty(n_permutations)
    for k in range(n_permutations):
        null[k] = np.mean(np.sum(zp[generator.permutation(len(zp))] * zo, axis=1))
    p_value = (1 + int(np.sum(null >= statistic))) / (1 + n_permutations)
    return PermutationResult(statistic, p_value, float(null.mean()) if n_permutations else 0.0, n_permutations)


# ---------------------------------------------------------------------------
# CSV dump


def write_importance_csv(path: str, vectors: Sequence[ImportanceVector]) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    width = max((len(v) for v in vectors), default=0)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["instance_id", "class_id", "layer"] + [f"n{i}" for i in range(width)])
        for vector in vectors:
            writer.writerow([vector.source, vector.class_id, vector.layer] + [repr(float(v)) for v in vector.values])
    logger.info(f"Wrote {len(vectors)} importance vectors to {path}")
    return path


def read_importance_csv(path: str) -> List[ImportanceVector]:
    if not os.path.exists(path):
        raise MissingArtifactError("importance dump", path)
    with open(path, "r", newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if not header or header[:3] != ["instance_id", "class_id", "layer"]:
            raise FormatError(f"{path}: expected header instance_id,class_id,layer,n0,...")
        vectors = []
        for line, row in enumerate(reader, start=2):
            try:
                vectors.append(ImportanceVector(row[2], int(row[1]), [float(v) for v in row[3:]], source=row[0]))
            except (IndexError, ValueError) as exc:
                raise FormatError(f"{path}:{line}: {exc}") from exc
    return vectors
