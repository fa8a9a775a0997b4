"""
Visual and textual explanations of (seen or transferred) head rows.

Visual: Grad-CAM maps weighted by the per-instance neuron importances.
Textual: the inverse importance->attribute map scores attributes for an
importance vector; its one-hot columns give every neuron a name.
"""
from __future__ import annotations

import csv
import json
import logging
import os
from typing import Dict, List, Optional, Sequence, Set, Union

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError
from .importance import neuron_importance
from .knowmap import predict_knowledge
from .model import CONV, Network
from .seeding import rng
from .types import Box, DatasetManifest, Heatmap, ImportanceVector, LinearMap, MapDirection, TextualExplanation

logger = logging.getLogger(__name__)


def weighted_activation_map(activation: np.ndarray, alpha: np.ndarray) -> np.ndarray:
    """relu(sum_n alpha_n * activation_n), max-normalized; zero maps stay zero."""
    activation = np.asarray(activation, dtype=np.float64)
    alpha = np.asarray(alpha, dtype=np.float64)
    if activation.ndim != 3 or alpha.shape != (activation.shape[0],):
        raise ShapeError(f"need activation [C, h, w] and alpha [C], got {activation.shape} and {alpha.shape}")
    values = np.maximum(np.tensordot(alpha, activation, axes=1), 0.0)
    peak = values.max()
    return values / peak if peak > 0 else values


def upsample(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D map."""
    image = Image.fromarray(np.asarray(values, dtype=np.float32))
    return np.asarray(image.resize((width, height), resample=Image.Resampling.BILINEAR), dtype=np.float64)


def gradcam(net: Network, layer: str, image: np.ndarray, class_id: int,
            instance_id: Optional[int] = None, upsampled: bool = True) -> Heatmap:
    """
    Grad-CAM heatmap of ``class_id`` on one image.

    Args:
        net: Network whose head contains ``class_id``
        layer: Convolutional layer to explain at
        image: Input [C, H, W]
        class_id: Class whose evidence is mapped
        instance_id: Stored on the heatmap
        upsampled: Also resize the map bilinearly to the input resolution

    Returns:
        Heatmap with non-negative values, max-normalized when nonzero
    """
    if net.spec.layers[net.position(layer)].kind != CONV:
        raise ConfigError(f"gradcam needs a convolutional layer, {layer!r} is not one")
    image = np.asarray(image, dtype=np.float64)
    alpha = neuron_importance(net, layer, image, class_id).values
    activation = net.activation(image[None], layer)[0]
    values = weighted_activation_map(activation, alpha)
    _, height, width = net.spec.input_shape
    big = upsample(values, height, width) if upsampled else None
    return Heatmap(values, class_id, instance_id, big)


def _box_mask(boxes: Sequence[Box], height: int, width: int) -> np.ndarray:
    mask = np.zeros((height, width), dtype=bool)
    for box in boxes:
        if box.x0 < 0 or box.y0 < 0 or box.x1 > width or box.y1 > height:
            raise ShapeError(f"box {box} lies outside a {height}x{width} image")
        mask[box.y0:box.y1, box.x0:box.x1] = True
    return mask


def bbox_energy_fraction(heatmap: Union[Heatmap, np.ndarray], boxes: Sequence[Box]) -> float:
    """Share of the heatmap mass that falls inside the union of ``boxes`` (0 for an empty map)."""
    if isinstance(heatmap, Heatmap):
        values = heatmap.upsampled if heatmap.upsampled is not None else heatmap.values
    else:
        values = np.asarray(heatmap, dtype=np.float64)
    total = float(values.sum())
    if total <= 0:
        return 0.0
    mask = _box_mask(boxes, *values.shape)
    return float(values[mask].sum()) / total


def shuffled_energy_fraction(heatmaps: Sequence[Heatmap], boxes: Sequence[Sequence[Box]], seed: int) -> float:
    """Mean energy fraction when every heatmap is scored against another instance's boxes."""
    if len(heatmaps) != len(boxes):
        raise ShapeError(f"{len(heatmaps)} heatmaps but {len(boxes)} box lists")
    if len(heatmaps) < 2:
        raise ConfigError("a shuffled baseline needs at least two instances")
    order = rng(seed, "shuffled_boxes").permutation(len(heatmaps))
    # a cyclic shift of a random order has no fixed points
    partner = np.roll(order, 1)
    pairing = np.empty(len(order), dtype=np.int64)
    pairing[order] = partner
    return float(np.mean([bbox_energy_fraction(h, boxes[j]) for h, j in zip(heatmaps, pairing)]))


def _inverse_scores(inverse_map: LinearMap, importance: Union[ImportanceVector, np.ndarray]) -> np.ndarray:
    if inverse_map.direction is not MapDirection.IMPORTANCE_TO_KNOWLEDGE:
        raise ConfigError(f"explanations need an a->K map, got {inverse_map.direction.value}")
    return predict_knowledge(inverse_map, importance)


def _names(inverse_map: LinearMap, names: Optional[Sequence[str]]) -> List[str]:
    names = list(names) if names is not None else [f"k{i}" for i in range(inverse_map.out_dim)]
    if len(names) != inverse_map.out_dim:
        raise ShapeError(f"{len(names)} attribute names for a map with {inverse_map.out_dim} outputs")
    return names


def textual_explanation(
    inverse_map: LinearMap,
    importance: Union[ImportanceVector, np.ndarray],
    k: int,
    attribute_names: Optional[Sequence[str]] = None,
    class_id: Optional[int] = None,
    instance_id: Optional[int] = None,
) -> TextualExplanation:
    """Top-``k`` attributes of W_{a->K} a; ties go to the lowest attribute index."""
    names = _names(inverse_map, attribute_names)
    if not 1 <= k <= len(names):
        raise ConfigError(f"k must lie in [1, {len(names)}], got {k}")
    scores = _inverse_scores(inverse_map, importance)
    if class_id is None:
        class_id = importance.class_id if isinstance(importance, ImportanceVector) else -1
    order = np.lexsort((np.arange(len(scores)), -scores))[:k]
    ranked = [(names[i], float(scores[i])) for i in order]
    return TextualExplanation(class_id, ranked, k, instance_id, [int(i) for i in order])


def explanation_fidelity(
    explanations: Sequence[Union[TextualExplanation, Sequence[int]]],
    ground_truth: Sequence[Set[int]],
    k: int,
) -> float:
    """
    Percentage of ground-truth attributes captured by the top-``k`` explanations.

    Per instance the score is |top-k ∩ truth| / |truth|; the result is the
    mean over instances, times 100.
    """
    if len(explanations) != len(ground_truth):
        raise ShapeError(f"{len(explanations)} explanations but {len(ground_truth)} ground-truth sets")
    if not explanations:
        raise ConfigError("fidelity needs at least one explanation")
    scores = []
    for explanation, truth in zip(explanations, ground_truth):
        truth = set(int(t) for t in truth)
        if not truth:
            raise ConfigError("ground-truth attribute set is empty")
        indices = explanation.indices if isinstance(explanation, TextualExplanation) else list(explanation)
        scores.append(len(set(indices[:k]) & truth) / len(truth))
    return 100.0 * float(np.mean(scores))


def fidelity_curve(
    inverse_map: LinearMap,
    importances: Sequence[Union[ImportanceVector, np.ndarray]],
    ground_truth: Sequence[Set[int]],
) -> Dict[int, float]:
    """Fidelity for every k from 1 to the number of attributes."""
    full = [textual_explanation(inverse_map, a, inverse_map.out_dim) for a in importances]
    return {k: explanation_fidelity(full, ground_truth, k) for k in range(1, inverse_map.out_dim + 1)}


def neuron_name(inverse_map: LinearMap, neuron: int, attribute_names: Optional[Sequence[str]] = None) -> str:
    """Attribute retrieved (top-1) for a one-hot importance on ``neuron``."""
    if not 0 <= neuron < inverse_map.in_dim:
        raise ConfigError(f"neuron {neuron} outside [0, {inverse_map.in_dim})")
    onehot = np.zeros(inverse_map.in_dim)
    onehot[neuron] = 1.0
    return textual_explanation(inverse_map, onehot, 1, attribute_names).ranked[0][0]


def neuron_names(inverse_map: LinearMap, attribute_names: Optional[Sequence[str]] = None) -> List[str]:
    return [neuron_name(inverse_map, n, attribute_names) for n in range(inverse_map.in_dim)]


def neuron_focus(
    net: Network,
    layer: str,
    manifest: DatasetManifest,
    inverse_map: LinearMap,
    instance_ids: Sequence[int],
) -> float:
    """
    Fraction of neurons whose strongest response sits on the glyph they are named after.

    For each channel the instance and cell of peak activation are found; the
    neuron counts as focused when the centre of that cell lies inside a box of
    its named attribute.
    """
    if not instance_ids:
        raise ConfigError("neuron_focus needs at least one instance")
    ids = list(instance_ids)
    activations = net.activations(manifest.images[ids], layer)
    if activations.ndim != 4:
        raise ConfigError(f"neuron_focus needs a spatial layer, {layer!r} is not one")
    _, height, width = manifest.image_shape
    names = neuron_names(inverse_map, manifest.attribute_names)
    index = {name: j for j, name in enumerate(manifest.attribute_names)}
    hits = 0
    for n, name in enumerate(names):
        channel = activations[:, n]
        which, row, col = np.unravel_index(int(np.argmax(channel)), channel.shape)
        y = (row + 0.5) * height / channel.shape[1]
        x = (col + 0.5) * width / channel.shape[2]
        boxes = [b for b in manifest.boxes_of(ids[which]) if b.attribute == index[name]]
        if any(b.x0 <= x < b.x1 and b.y0 <= y < b.y1 for b in boxes):
            hits += 1
    return hits / len(names)


# ---------------------------------------------------------------------------
# Export


def write_pgm(path: str, heatmap: Union[Heatmap, np.ndarray]) -> str:
    """8-bit grayscale PGM, max-scaled."""
    if isinstance(heatmap, Heatmap):
        values = heatmap.upsampled if heatmap.upsampled is not None else heatmap.values
    else:
        values = np.asarray(heatmap, dtype=np.float64)
    peak = values.max() if values.size else 0.0
    scaled = np.round(255.0 * values / peak) if peak > 0 else np.zeros_like(values)
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    Image.fromarray(scaled.astype(np.uint8)).save(path, format="PPM")
    return path


def write_heatmap_csv(path: str, heatmaps: Sequence[Heatmap]) -> str:
    """Raw (not upsampled) heatmap values, one row per heatmap."""
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["instance_id", "class_id", "height", "width", "values"])
        for heatmap in heatmaps:
            height, width = heatmap.values.shape
            flat = " ".join(repr(float(v)) for v in heatmap.values.ravel())
            writer.writerow([heatmap.instance_id, heatmap.class_id, height, width, flat])
    return path


def write_explanations_json(path: str, explanations: Sequence[TextualExplanation]) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump([e.to_dict() for e in explanations], f, indent=2, sort_keys=True)
    logger.info(f"Wrote {len(explanations)} explanations to {path}")
    return path
