from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np

from autodiff import Tensor


class Modality(Enum):
    """Kind of external class knowledge."""
    ATTRIBUTES = "attributes"
    TEXT_EMBEDDING = "text-embedding"


class MapDirection(Enum):
    """Direction of a linear map between knowledge and importance space."""
    KNOWLEDGE_TO_IMPORTANCE = "K->a"
    IMPORTANCE_TO_KNOWLEDGE = "a->K"


class ProbeMode(Enum):
    """Source of the unlabeled images used during weight transfer."""
    NOISE = "noise"
    GENERIC = "generic"
    SEEN = "seen"


class Partition(Enum):
    """Per-instance assignment inside a GZSL split."""
    TRAIN = "train"
    VAL = "val"
    TEST = "test"


CLASS_AGGREGATE = "class-aggregate"


@dataclass
class ImportanceVector:
    """Channel importances of one class at one layer."""
    layer: str
    class_id: int
    values: np.ndarray
    source: str = CLASS_AGGREGATE
    tensor: Optional[Tensor] = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"importance vector for class {self.class_id} has non-finite values")

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass
class KnowledgeVector:
    """External description k_c of one class."""
    class_id: int
    values: np.ndarray
    modality: Modality = Modality.ATTRIBUTES

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(self.values)):
            raise ValueError(f"knowledge vector for class {self.class_id} has non-finite values")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass
class LinearMap:
    """Dense map ``matrix @ x (+ bias)`` between knowledge and importance space."""
    matrix: np.ndarray
    direction: MapDirection
    bias: Optional[np.ndarray] = None
    heldout_classes: List[int] = field(default_factory=list)
    best_validation_rho: Optional[float] = None
    epochs: int = 0
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def in_dim(self) -> int:
        return int(self.matrix.shape[1])

    @property
    def out_dim(self) -> int:
        return int(self.matrix.shape[0])


@dataclass
class TrainingReport:
    """Per-epoch record of a supervised training run."""
    epoch_losses: List[float] = field(default_factory=list)
    val_accuracies: List[float] = field(default_factory=list)
    frozen_below: Optional[str] = None

    @property
    def final_accuracy(self) -> Optional[float]:
        return self.val_accuracies[-1] if self.val_accuracies else None


@dataclass
class ProbePool:
    """Unlabeled images with their source tag."""
    source: ProbeMode
    images: np.ndarray

    def __len__(self) -> int:
        return int(self.images.shape[0])


@dataclass
class LossRecord:
    iteration: int
    class_id: int
    cos_term: float
    reg_term: float
    total: float


@dataclass
class TransferResult:
    """Optimized unseen head rows and the loss traces that produced them."""
    rows: Dict[int, np.ndarray] = field(default_factory=dict)
    biases: Dict[int, float] = field(default_factory=dict)
    best_losses: Dict[int, float] = field(default_factory=dict)
    iterations: Dict[int, int] = field(default_factory=dict)
    trace: List[LossRecord] = field(default_factory=list)
    errors: List[str] = field(default_factory=list)

    def trace_for(self, class_id: int) -> List[LossRecord]:
        return [r for r in self.trace if r.class_id == class_id]


@dataclass
class RecoveryPoint:
    """Seen accuracy of a head re-learned from importances perturbed at ``epsilon``."""
    epsilon: float
    accuracy: float
    original_accuracy: float
    chance: float

    def as_row(self) -> Dict[str, Any]:
        return {
            "epsilon": self.epsilon,
            "accuracy": self.accuracy,
            "original_accuracy": self.original_accuracy,
            "chance": self.chance,
        }


@dataclass(frozen=True)
class Box:
    """Axis-aligned glyph box in pixel coordinates, ``x1``/``y1`` exclusive."""
    x0: int
    y0: int
    x1: int
    y1: int
    attribute: int = -1

    def area(self) -> int:
        return max(0, self.x1 - self.x0) * max(0, self.y1 - self.y0)

    def to_dict(self) -> Dict[str, int]:
        return {"x0": self.x0, "y0": self.y0, "x1": self.x1, "y1": self.y1, "attribute": self.attribute}


@dataclass
class AttributeClassSpec:
    """Binary attribute vector of a class and the glyphs it renders."""
    class_id: int
    attributes: np.ndarray
    glyphs: List[Tuple[str, Tuple[int, int, int]]] = field(default_factory=list)

    @property
    def active(self) -> List[int]:
        return [int(i) for i in np.flatnonzero(self.attributes)]


@dataclass
class ImageRecord:
    instance_id: int
    class_id: int
    boxes: List[Box] = field(default_factory=list)


@dataclass
class GzslSplit:
    """Seen/unseen/held-out class partition with per-instance assignment."""
    seen: List[int]
    unseen: List[int]
    heldout: List[int]
    assignment: Dict[int, Partition] = field(default_factory=dict)

    def instances(self, partition: Partition, classes: Optional[List[int]] = None,
                  labels: Optional[np.ndarray] = None) -> List[int]:
        ids = sorted(i for i, p in self.assignment.items() if p is partition)
        if classes is None or labels is None:
            return ids
        wanted = set(classes)
        return [i for i in ids if int(labels[i]) in wanted]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "seen": list(self.seen),
            "unseen": list(self.unseen),
            "heldout": list(self.heldout),
            "assignment": {str(k): v.value for k, v in sorted(self.assignment.items())},
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GzslSplit":
        return cls(
            seen=[int(c) for c in data["seen"]],
            unseen=[int(c) for c in data["unseen"]],
            heldout=[int(c) for c in data["heldout"]],
            assignment={int(k): Partition(v) for k, v in data.get("assignment", {}).items()},
        )


@dataclass
class DatasetManifest:
    """Images, labels, boxes and class knowledge of a benchmark."""
    images: np.ndarray
    labels: np.ndarray
    records: List[ImageRecord]
    attributes: np.ndarray
    attribute_names: List[str]
    class_specs: List[AttributeClassSpec] = field(default_factory=list)
    split: Optional[GzslSplit] = None
    seed: int = 0

    @property
    def num_classes(self) -> int:
        return int(self.attributes.shape[0])

    @property
    def image_shape(self) -> Tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def __len__(self) -> int:
        return int(self.images.shape[0])

    def knowledge(self, class_id: int) -> KnowledgeVector:
        return KnowledgeVector(class_id, self.attributes[class_id], Modality.ATTRIBUTES)

    def boxes_of(self, instance_id: int) -> List[Box]:
        return self.records[instance_id].boxes


@dataclass
class GzslResult:
    """Class-normalized accuracies over S∪U and their harmonic mean."""
    acc_unseen: float
    acc_seen: float
    harmonic: float
    label: str = ""

    def as_row(self) -> Dict[str, Any]:
        return {"label": self.label, "acc_u": self.acc_unseen, "acc_s": self.acc_seen, "h": self.harmonic}


@dataclass
class Heatmap:
    """Non-negative evidence map of one (instance, class) pair."""
    values: np.ndarray
    class_id: int
    instance_id: Optional[int] = None
    upsampled: Optional[np.ndarray] = None


@dataclass
class TextualExplanation:
    """Top-k attributes retrieved for an importance vector."""
    class_id: int
    ranked: List[Tuple[str, float]]
    k: int
    instance_id: Optional[int] = None
    indices: List[int] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "instance": self.instance_id,
            "class": self.class_id,
            "topk": [{"attribute": name, "score": score} for name, score in self.ranked],
        }
