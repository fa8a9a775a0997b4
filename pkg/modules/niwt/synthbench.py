"""
Attribute-grounded synthetic benchmark.

Each class owns a binary attribute vector. Attribute ``j`` always renders the
same glyph (one shape in one color), so an image of a class shows the glyphs
of its active attributes at random positions and scales over a procedural
texture. Glyph boxes are recorded for the explanation metrics.
"""
from __future__ import annotations

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations
from math import comb
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image, ImageDraw

from autodiff import Adam, Graph, Tensor, ops

from . import storage
from .errors import ConfigError, LeakageError, MissingArtifactError
from .model import Network
from .seeding import rng
from .types import (
    AttributeClassSpec,
    Box,
    DatasetManifest,
    GzslResult,
    GzslSplit,
    ImageRecord,
    Partition,
)

logger = logging.getLogger(__name__)

SHAPES = ("circle", "square", "triangle", "cross", "ring", "hbar", "vbar", "diamond")
COLORS = (
    ("red", (230, 40, 40)),
    ("green", (40, 200, 60)),
    ("blue", (50, 80, 235)),
    ("yellow", (235, 220, 40)),
    ("magenta", (220, 50, 210)),
    ("cyan", (40, 215, 225)),
)
MAX_ATTRIBUTES = len(SHAPES) * len(COLORS)
PLACEMENT_ATTEMPTS = 50


def glyph_of(attribute: int) -> Tuple[str, Tuple[int, int, int]]:
    """Shape and RGB color rendered for ``attribute`` (injective)."""
    if not 0 <= attribute < MAX_ATTRIBUTES:
        raise ConfigError(f"attribute {attribute} has no glyph; at most {MAX_ATTRIBUTES} attributes are supported")
    return SHAPES[attribute % len(SHAPES)], COLORS[attribute // len(SHAPES)][1]


def attribute_names(d_k: int) -> List[str]:
    return [f"{COLORS[j // len(SHAPES)][0]}_{SHAPES[j % len(SHAPES)]}" for j in range(d_k)]


def _sample_subsets(generator: np.random.Generator, d_k: int, size: int, count: int) -> List[Tuple[int, ...]]:
    """``count`` distinct ``size``-subsets of range(d_k); needs comb(d_k, size) >= count."""
    available = comb(d_k, size)
    if available <= 4 * count:
        pool = list(combinations(range(d_k), size))
        picks = generator.choice(len(pool), size=count, replace=False)
        return [pool[i] for i in sorted(picks)]
    rows: List[Tuple[int, ...]] = []
    chosen = set()
    while len(rows) < count:
        candidate = tuple(sorted(generator.choice(d_k, size=size, replace=False).tolist()))
        if candidate not in chosen:
            chosen.add(candidate)
            rows.append(candidate)
    return rows


def sample_attribute_matrix(num_classes: int, d_k: int, active: int, seed: int) -> np.ndarray:
    """
    Distinct binary rows with ``active`` ones each.

    When fewer than ``num_classes`` such rows exist (``active`` > d_k or too
    few combinations), rows use the active counts closest to ``active``
    instead: every subset of the nearest counts, then a sample of the next.
    """
    if active < 1:
        raise ConfigError(f"active attribute count must be >= 1, got {active}")
    if num_classes > 2 ** d_k - 1:
        raise ConfigError(f"{num_classes} classes cannot have distinct nonzero vectors over {d_k} attributes")
    generator = rng(seed, "attributes")
    if active <= d_k and comb(d_k, active) >= num_classes:
        rows = _sample_subsets(generator, d_k, active, num_classes)
    else:
        target = min(active, d_k)
        logger.warning(f"{num_classes} classes do not fit {active} of {d_k} active attributes; "
                       f"using counts near {target}")
        rows = []
        for size in sorted(range(1, d_k + 1), key=lambda m: (abs(m - target), m)):
            need = num_classes - len(rows)
            if comb(d_k, size) <= need:
                rows.extend(combinations(range(d_k), size))
            else:
                rows.extend(_sample_subsets(generator, d_k, size, need))
            if len(rows) == num_classes:
                break
        rows = [rows[i] for i in generator.permutation(len(rows))]
    matrix = np.zeros((num_classes, d_k))
    for c, active_set in enumerate(rows):
        matrix[c, list(active_set)] = 1.0
    return matrix


def render_background(generator: np.random.Generator, height: int, width: int) -> np.ndarray:
    """Procedural texture [H, W, 3] in [0, 1]: two oriented gratings plus pixel noise."""
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    base = generator.uniform(0.35, 0.65)
    tint = generator.uniform(-0.01, 0.01, size=3)
    texture = np.zeros((height, width))
    for _ in range(2):
        angle = generator.uniform(0, np.pi)
        frequency = generator.uniform(0.15, 0.6)
        phase = generator.uniform(0, 2 * np.pi)
        amplitude = generator.uniform(0.03, 0.1)
        texture += amplitude * np.sin(frequency * (xx * np.cos(angle) + yy * np.sin(angle)) + phase)
    noise = generator.normal(0.0, 0.04, size=(height, width, 3))
    image = base + tint[None, None, :] + texture[:, :, None] + noise
    return np.clip(image, 0.0, 1.0)


def _draw_glyph(draw: ImageDraw.ImageDraw, shape: str, color: Tuple[int, int, int], x0: int, y0: int, size: int) -> None:
    x1, y1 = x0 + size - 1, y0 + size - 1
    cx, cy = (x0 + x1) / 2, (y0 + y1) / 2
    stroke = max(1, size // 4)
    if shape == "circle":
        draw.ellipse([x0, y0, x1, y1], fill=color)
    elif shape == "square":
        draw.rectangle([x0, y0, x1, y1], fill=color)
    elif shape == "triangle":
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=color)
    elif shape == "cross":
        draw.rectangle([cx - stroke / 2, y0, cx + stroke / 2, y1], fill=color)
        draw.rectangle([x0, cy - stroke / 2, x1, cy + stroke / 2], fill=color)
    elif shape == "ring":
        draw.ellipse([x0, y0, x1, y1], outline=color, width=stroke)
    elif shape == "hbar":
        draw.rectangle([x0, cy - stroke, x1, cy + stroke], fill=color)
    elif shape == "vbar":
        draw.rectangle([cx - stroke, y0, cx + stroke, y1], fill=color)
    elif shape == "diamond":
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)], fill=color)


def to_chw(pixels: np.ndarray) -> np.ndarray:
    """[H, W, 3] in [0, 1] -> centred [3, H, W]."""
    return np.transpose(pixels, (2, 0, 1)) - 0.5


def render_image(spec: AttributeClassSpec, height: int, width: int, seed: int, instance_id: int) -> Tuple[np.ndarray, List[Box]]:
    generator = rng(seed, "image", instance_id)
    background = render_background(generator, height, width)
    canvas = Image.fromarray(np.round(background * 255).astype(np.uint8))
    draw = ImageDraw.Draw(canvas)
    low, high = max(3, min(height, width) // 4), max(4, min(height, width) // 3 + 1)
    boxes: List[Box] = []
    for attribute in spec.active:
        shape, color = glyph_of(attribute)
        size = int(generator.integers(low, high + 1))
        size = min(size, height, width)
        # glyphs avoid each other when the canvas allows it
        for _ in range(PLACEMENT_ATTEMPTS):
            x0 = int(generator.integers(0, width - size + 1))
            y0 = int(generator.integers(0, height - size + 1))
            if not any(x0 < b.x1 and b.x0 < x0 + size and y0 < b.y1 and b.y0 < y0 + size for b in boxes):
                break
        _draw_glyph(draw, shape, color, x0, y0, size)
        boxes.append(Box(x0, y0, x0 + size, y0 + size, attribute))
    pixels = np.asarray(canvas, dtype=np.float64) / 255.0
    return to_chw(pixels), boxes


def generate_dataset(
    num_classes: int,
    d_k: int,
    images_per_class: int,
    image_shape: Tuple[int, int, int] = (3, 32, 32),
    seed: int = 7,
    active_attributes: int = 4,
    attributes: Optional[np.ndarray] = None,
    threads: int = 1,
) -> DatasetManifest:
    """
    Render ``images_per_class`` images for each class.

    Args:
        num_classes: Number of classes
        d_k: Number of binary attributes
        images_per_class: Images rendered per class
        image_shape: (channels, height, width); channels must be 3
        seed: Seed of every random choice in the benchmark
        active_attributes: Active attributes per class when ``attributes`` is None
        attributes: Optional explicit [num_classes, d_k] binary matrix
        threads: Rendering workers (results do not depend on it)

    Returns:
        DatasetManifest with class-major instance ids
    """
    channels, height, width = image_shape
    if channels != 3:
        raise ConfigError("the benchmark renders RGB images; channels must be 3")
    if min(num_classes, d_k, images_per_class, height, width) < 1:
        raise ConfigError("benchmark sizes must be positive")
    if d_k > MAX_ATTRIBUTES:
        raise ConfigError(f"d_k={d_k} exceeds the {MAX_ATTRIBUTES} available glyphs")
    if attributes is None:
        attributes = sample_attribute_matrix(num_classes, d_k, active_attributes, seed)
    attributes = np.asarray(attributes, dtype=np.float64)
    if attributes.shape != (num_classes, d_k):
        raise ConfigError(f"attribute matrix must be {num_classes}x{d_k}, got {attributes.shape}")
    if np.any(attributes.sum(axis=1) < 1):
        raise ConfigError("every class needs at least one active attribute")
    if len({tuple(row) for row in attributes}) != num_classes:
        raise ConfigError("class attribute vectors must be distinct")

    specs = [
        AttributeClassSpec(c, attributes[c], [glyph_of(j) for j in np.flatnonzero(attributes[c])])
        for c in range(num_classes)
    ]
    jobs = [(specs[c], c * images_per_class + i) for c in range(num_classes) for i in range(images_per_class)]

    def render(job):
        spec, instance_id = job
        return render_image(spec, height, width, seed, instance_id)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rendered = list(pool.map(render, jobs))
    else:
        rendered = [render(job) for job in jobs]

    images = np.stack([image for image, _ in rendered])
    labels = np.array([spec.class_id for spec, _ in jobs], dtype=np.int64)
    records = [ImageRecord(i, int(labels[i]), boxes) for i, (_, boxes) in enumerate(rendered)]
    logger.info(f"Generated {len(images)} images for {num_classes} classes ({d_k} attributes)")
    return DatasetManifest(images, labels, records, attributes, attribute_names(d_k), specs, seed=seed)


def split_gzsl(
    manifest: DatasetManifest,
    num_unseen: int,
    num_heldout: int,
    seed: int,
    fractions: Tuple[float, float, float] = (0.7, 0.1, 0.2),
) -> GzslSplit:
    """Random seen/unseen/held-out partition; unseen instances all go to test."""
    total = manifest.num_classes
    if num_unseen < 1:
        raise ConfigError("a GZSL split needs at least one unseen class")
    if num_heldout < 0 or num_unseen + num_heldout >= total:
        raise ConfigError(f"infeasible split: {num_unseen} unseen + {num_heldout} held-out of {total} classes")
    generator = rng(seed, "split")
    order = generator.permutation(total)
    unseen = sorted(int(c) for c in order[:num_unseen])
    seen = sorted(int(c) for c in order[num_unseen:])
    heldout = sorted(int(c) for c in generator.choice(seen, size=num_heldout, replace=False)) if num_heldout else []

    assignment: Dict[int, Partition] = {}
    unseen_set = set(unseen)
    for c in range(total):
        members = np.flatnonzero(manifest.labels == c)
        if c in unseen_set:
            for i in members:
                assignment[int(i)] = Partition.TEST
            continue
        members = members[rng(seed, "split", "class", c).permutation(len(members))]
        n_train = int(round(fractions[0] * len(members)))
        n_val = int(round(fractions[1] * len(members)))
        for position, i in enumerate(members):
            if position < n_train:
                assignment[int(i)] = Partition.TRAIN
            elif position < n_train + n_val:
                assignment[int(i)] = Partition.VAL
            else:
                assignment[int(i)] = Partition.TEST
    return GzslSplit(seen, unseen, heldout, assignment)


def audit_no_unseen_leak(split: GzslSplit, labels: np.ndarray, instance_ids: Sequence[int], stage: str = "") -> None:
    """Raise LeakageError when any instance of an unseen class is listed."""
    unseen = set(split.unseen)
    leaked = [int(i) for i in instance_ids if int(labels[int(i)]) in unseen]
    if leaked:
        where = f" in {stage}" if stage else ""
        raise LeakageError(f"{len(leaked)} unseen-class instances{where}, e.g. {leaked[:5]}")


def class_normalized_accuracy(predictions: Sequence[int], labels: Sequence[int], classes: Sequence[int]) -> float:
    """Mean over ``classes`` of the per-class accuracy."""
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    classes = list(classes)
    if not classes:
        raise ConfigError("class subset is empty")
    per_class = []
    for c in classes:
        members = labels == c
        if not members.any():
            raise ConfigError(f"class {c} has no test instance")
        per_class.append(float(np.mean(predictions[members] == c)))
    return float(np.mean(per_class))


def harmonic_mean(acc_unseen: float, acc_seen: float) -> float:
    if acc_unseen < 0 or acc_seen < 0:
        raise ConfigError("accuracies must be non-negative")
    if acc_unseen + acc_seen == 0:
        return 0.0
    return 2.0 * acc_unseen * acc_seen / (acc_unseen + acc_seen)


def evaluate_gzsl(net: Network, manifest: DatasetManifest, split: GzslSplit, threads: int = 1,
                  label: str = "") -> GzslResult:
    """Acc_U, Acc_S over the full S∪U label space, and H."""
    missing = sorted(set(split.unseen + split.seen) - set(net.class_ids))
    if missing:
        raise MissingArtifactError(f"head rows for classes {missing[:10]} (unseen head not transferred)")
    test_ids = np.array(split.instances(Partition.TEST), dtype=np.int64)
    predictions = net.predict(manifest.images[test_ids], threads=threads)
    labels = manifest.labels[test_ids]
    acc_u = class_normalized_accuracy(predictions, labels, split.unseen)
    acc_s = class_normalized_accuracy(predictions, labels, split.seen)
    result = GzslResult(acc_u, acc_s, harmonic_mean(acc_u, acc_s), label)
    logger.info(f"GZSL {label or 'eval'}: Acc_U {acc_u:.4f}, Acc_S {acc_s:.4f}, H {result.harmonic:.4f}")
    return result


def seen_accuracy(net: Network, manifest: DatasetManifest, split: GzslSplit, threads: int = 1) -> float:
    """Class-normalized accuracy on seen test instances over the net's own label space."""
    test_ids = np.array(split.instances(Partition.TEST, split.seen, manifest.labels), dtype=np.int64)
    predictions = net.predict(manifest.images[test_ids], threads=threads)
    return class_normalized_accuracy(predictions, manifest.labels[test_ids], split.seen)


def train_unseen_skyline(
    net: Network,
    manifest: DatasetManifest,
    split: GzslSplit,
    fraction: float = 0.5,
    epochs: int = 30,
    lr: float = 1e-2,
    batch_size: int = 64,
    seed: int = 0,
) -> Tuple[Network, GzslSplit]:
    """
    Supervised upper reference: fit the unseen head rows on part of the unseen images.

    The backbone and the seen rows stay frozen. Returns the fitted network and
    a split whose test set excludes the unseen images used for fitting.
    """
    if not 0 < fraction < 1:
        raise ConfigError("skyline fraction must lie in (0, 1)")
    held_back: List[int] = []
    for c in split.unseen:
        members = np.array(split.instances(Partition.TEST, [c], manifest.labels))
        members = members[rng(seed, "skyline", c).permutation(len(members))]
        held_back += [int(i) for i in members[: max(1, int(round(fraction * len(members))))]]
    seen_train = split.instances(Partition.TRAIN, split.seen, manifest.labels)
    train_ids = np.array(sorted(held_back + seen_train), dtype=np.int64)

    fitted = net.copy()
    features = fitted.activations(manifest.images[train_ids], "gap")
    rows = np.array([fitted.row_of(int(c)) for c in manifest.labels[train_ids]])
    trainable = np.array([[1.0] if c in set(split.unseen) else [0.0] for c in fitted.class_ids])
    weight, bias = fitted.head_weight, fitted.head_bias
    optimizer = Adam([weight, bias], lr=lr)
    for epoch in range(epochs):
        order = rng(seed, "skyline", "epoch", epoch).permutation(len(train_ids))
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            with Graph() as graph:
                scores = fitted.forward_from(Tensor(features[batch]), "gap")
                loss = ops.softmax_cross_entropy(scores, rows[batch])
                grad_w, grad_b = graph.backward(loss, [weight, bias], create_graph=False)
            optimizer.step([grad_w.numpy() * trainable, grad_b.numpy() * trainable[:, 0]])

    derived = GzslSplit(split.seen, split.unseen, split.heldout, dict(split.assignment))
    for i in held_back:
        derived.assignment[i] = Partition.TRAIN
    logger.info(f"Skyline fitted on {len(held_back)} held-back unseen images")
    return fitted, derived


# ---------------------------------------------------------------------------
# Persistence


def save_dataset(path: str, manifest: DatasetManifest) -> str:
    meta = {
        "records": [{"class_id": r.class_id, "boxes": [b.to_dict() for b in r.boxes]} for r in manifest.records],
        "attribute_names": list(manifest.attribute_names),
        "split": manifest.split.to_dict() if manifest.split else None,
        "seed": manifest.seed,
    }
    tensors = {"images": manifest.images, "labels": manifest.labels.astype(np.float64), "attributes": manifest.attributes}
    storage.save(path, storage.Container("dataset", tensors, meta))
    directory = os.path.dirname(path) or "."
    with open(os.path.join(directory, "split.json"), "w", encoding="utf-8") as f:
        json.dump(meta["split"], f, indent=2)
    return path


def load_dataset(path: str) -> DatasetManifest:
    container = storage.load(path, artifact="dataset (run gen-data first)", expected_kind="dataset")
    meta = container.meta
    labels = container.tensors["labels"].astype(np.int64)
    attributes = container.tensors["attributes"]
    records = [
        ImageRecord(i, int(r["class_id"]), [Box(**b) for b in r["boxes"]]) for i, r in enumerate(meta["records"])
    ]
    specs = [
        AttributeClassSpec(c, attributes[c], [glyph_of(int(j)) for j in np.flatnonzero(attributes[c])])
        for c in range(attributes.shape[0])
    ]
    split = GzslSplit.from_dict(meta["split"]) if meta.get("split") else None
    return DatasetManifest(container.tensors["images"], labels, records, attributes,
                           list(meta["attribute_names"]), specs, split, int(meta.get("seed", 0)))
