from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from autodiff import Adam, Graph, Tensor, no_grad, ops
from autodiff.ops import conv_output_size

from . import storage
from .errors import ConfigError, ShapeError
from .seeding import rng
from .types import TrainingReport

logger = logging.getLogger(__name__)

CONV = "conv"
RELU = "relu"
AVG_POOL = "avg_pool"
GAP = "gap"
FC = "fc"


@dataclass
class LayerSpec:
    """One layer of a NetworkSpec; unused fields stay at 0."""
    kind: str
    name: str = ""
    in_channels: int = 0
    out_channels: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0
    size: int = 0


@dataclass
class NetworkSpec:
    input_shape: Tuple[int, int, int]
    layers: List[LayerSpec] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {"input_shape": list(self.input_shape), "layers": [asdict(layer) for layer in self.layers]}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "NetworkSpec":
        return cls(tuple(int(s) for s in data["input_shape"]), [LayerSpec(**layer) for layer in data["layers"]])

    @property
    def names(self) -> List[str]:
        return [layer.name for layer in self.layers if layer.name]

    @property
    def head(self) -> LayerSpec:
        return self.layers[-1]

    def shapes(self) -> Dict[str, Tuple[int, ...]]:
        """Output shape (without batch) of every named layer; validates the chain."""
        shape: Tuple[int, ...] = tuple(self.input_shape)
        named: Dict[str, Tuple[int, ...]] = {}
        fc_count = sum(1 for layer in self.layers if layer.kind == FC)
        if fc_count != 1 or not self.layers or self.layers[-1].kind != FC:
            raise ShapeError("a network needs exactly one fully-connected head as its last layer")
        seen_names = set()
        for position, layer in enumerate(self.layers):
            if layer.kind == CONV:
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ShapeError(f"layer {position} ({layer.name}) expects {layer.in_channels} channels, got {shape}")
                h = conv_output_size(shape[1], layer.kernel, layer.stride, layer.pad)
                w = conv_output_size(shape[2], layer.kernel, layer.stride, layer.pad)
                if h < 1 or w < 1:
                    raise ShapeError(f"layer {layer.name}: kernel {layer.kernel} does not fit input {shape}")
                shape = (layer.out_channels, h, w)
            elif layer.kind == RELU:
                pass
            elif layer.kind == AVG_POOL:
                if len(shape) != 3 or layer.size < 1 or shape[1] % layer.size or shape[2] % layer.size:
                    raise ShapeError(f"avg_pool({layer.size}) does not tile {shape}")
                shape = (shape[0], shape[1] // layer.size, shape[2] // layer.size)
            elif layer.kind == GAP:
                if len(shape) != 3:
                    raise ShapeError(f"global average pool needs a spatial input, got {shape}")
                shape = (shape[0],)
            elif layer.kind == FC:
                if len(shape) != 1 or shape[0] != layer.in_channels:
                    raise ShapeError(f"head expects {layer.in_channels} features, got {shape}")
                shape = (layer.out_channels,)
            else:
                raise ShapeError(f"unknown layer kind {layer.kind!r}")
            if layer.name:
                if layer.name in seen_names:
                    raise ShapeError(f"duplicate layer name {layer.name!r}")
                seen_names.add(layer.name)
                named[layer.name] = shape
        return named


def default_spec(num_classes: int, input_shape: Tuple[int, int, int] = (3, 32, 32)) -> NetworkSpec:
    """conv1-relu-pool-conv2-relu-conv3-relu-gap-head; conv3 is the top conv layer."""
    channels = input_shape[0]
    return NetworkSpec(
        input_shape=tuple(input_shape),
        layers=[
            LayerSpec(CONV, "conv1", channels, 16, kernel=3, pad=1),
            LayerSpec(RELU),
            LayerSpec(AVG_POOL, size=2),
            LayerSpec(CONV, "conv2", 16, 32, kernel=3, pad=1),
            LayerSpec(RELU),
            LayerSpec(CONV, "conv3", 32, 32, kernel=3, pad=1),
            LayerSpec(RELU),
            LayerSpec(GAP, "gap"),
            LayerSpec(FC, "head", 32, num_classes),
        ],
    )


def linear_spec(features: int, num_classes: int, spatial: int = 4) -> NetworkSpec:
    """Head directly on GAP features of the input (no learnable layer below it)."""
    return NetworkSpec(
        input_shape=(features, spatial, spatial),
        layers=[LayerSpec(GAP, "gap"), LayerSpec(FC, "head", features, num_classes)],
    )


class Network:
    """
    A NetworkSpec with parameters and a head-row to class-id mapping.

    Parameters are named ``<layer>.weight`` / ``<layer>.bias``. Head row ``r``
    scores dataset class ``class_ids[r]``.
    """

    def __init__(self, spec: NetworkSpec, params: Dict[str, Tensor], class_ids: Optional[Sequence[int]] = None):
        self.spec = spec
        self.shapes = spec.shapes()
        self.params = params
        rows = spec.head.out_channels
        self.class_ids: List[int] = list(class_ids) if class_ids is not None else list(range(rows))
        if len(self.class_ids) != rows:
            raise ShapeError(f"{len(self.class_ids)} class ids for a head with {rows} rows")
        self._position = {layer.name: i for i, layer in enumerate(spec.layers) if layer.name}

    @property
    def num_rows(self) -> int:
        return self.spec.head.out_channels

    @property
    def head_weight(self) -> Tensor:
        return self.params["head.weight"]

    @property
    def head_bias(self) -> Tensor:
        return self.params["head.bias"]

    def row_of(self, class_id: int) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ConfigError(f"class {class_id} is not in the head (classes {self.class_ids})") from None

    def position(self, layer: str) -> int:
        if layer not in self._position:
            raise ConfigError(f"unknown layer {layer!r}; known layers are {list(self._position)}")
        return self._position[layer]

    def channels(self, layer: str) -> int:
        self.position(layer)
        return self.shapes[layer][0]

    def trainable(self, from_layer: Optional[str] = None) -> List[str]:
        start = self.position(from_layer) if from_layer else 0
        names = []
        for layer in self.spec.layers[start:]:
            if layer.kind in (CONV, FC):
                names += [f"{layer.name}.weight", f"{layer.name}.bias"]
        return names

    def _check_input(self, x: Tensor) -> None:
        if x.ndim != 4 or tuple(x.shape[1:]) != tuple(self.spec.input_shape):
            raise ShapeError(f"network expects input [B, {self.spec.input_shape}], got {x.shape}")

    def _run(self, x: Tensor, start: int, stop: int, head: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        for layer in self.spec.layers[start:stop]:
            if layer.kind == CONV:
                w, b = self.params[f"{layer.name}.weight"], self.params[f"{layer.name}.bias"]
                x = ops.conv2d(x, w, stride=layer.stride, pad=layer.pad)
                x = ops.add(x, ops.reshape(b, (1, layer.out_channels, 1, 1)))
            elif layer.kind == RELU:
                x = ops.relu(x)
            elif layer.kind == AVG_POOL:
                x = ops.avg_pool2d(x, layer.size)
            elif layer.kind == GAP:
                x = ops.global_average_pool(x)
            elif layer.kind == FC:
                w, b = head if head is not None else (self.params["head.weight"], self.params["head.bias"])
                x = ops.add(ops.matmul(x, ops.transpose(w)), ops.reshape(b, (1, w.shape[0])))
        return x

    def forward(self, x, head: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        """Pre-softmax scores [B, rows]; ``head`` replaces the head (weight [K, D], bias [K])."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        return self._run(x, 0, len(self.spec.layers), head)

    def forward_until(self, x, layer: str) -> Tensor:
        """Output of ``layer`` (pre-activation for conv layers)."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self._check_input(x)
        return self._run(x, 0, self.position(layer) + 1)

    def forward_from(self, activation: Tensor, layer: str, head: Optional[Tuple[Tensor, Tensor]] = None) -> Tensor:
        """Scores computed from the output of ``layer``."""
        expected = self.shapes[layer] if layer in self.shapes else None
        if expected is None or tuple(activation.shape[1:]) != tuple(expected):
            raise ShapeError(f"activation of {layer} must be [B, {expected}], got {activation.shape}")
        return self._run(activation, self.position(layer) + 1, len(self.spec.layers), head)

    def activation(self, x, layer: str) -> np.ndarray:
        with no_grad():
            return self.forward_until(x, layer).numpy()

    def activations(self, images: np.ndarray, layer: str, batch_size: int = 256, threads: int = 1) -> np.ndarray:
        """Batched :meth:`activation` over many images."""
        chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
        if not chunks:
            return np.zeros((0,) + tuple(self.shapes[layer]))
        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(lambda chunk: self.activation(chunk, layer), chunks))
        else:
            parts = [self.activation(chunk, layer) for chunk in chunks]
        return np.concatenate(parts, axis=0)

    def scores(self, images: np.ndarray, batch_size: int = 256, threads: int = 1) -> np.ndarray:
        """Inference scores for many images, sharded over ``threads`` workers."""
        chunks = [images[i:i + batch_size] for i in range(0, len(images), batch_size)]
        if not chunks:
            return np.zeros((0, self.num_rows))

        def run(chunk: np.ndarray) -> np.ndarray:
            with no_grad():
                return self.forward(chunk).numpy()

        if threads > 1 and len(chunks) > 1:
            with ThreadPoolExecutor(max_workers=threads) as pool:
                parts = list(pool.map(run, chunks))
        else:
            parts = [run(chunk) for chunk in chunks]
        return np.concatenate(parts, axis=0)

    def predict(self, images: np.ndarray, batch_size: int = 256, threads: int = 1) -> np.ndarray:
        """Predicted class ids; ties go to the lowest class id."""
        return predict_from_scores(self.scores(images, batch_size, threads), self.class_ids)

    def copy(self) -> "Network":
        params = {name: Tensor(t.data, requires_grad=True, name=name) for name, t in self.params.items()}
        return Network(NetworkSpec.from_dict(self.spec.to_dict()), params, list(self.class_ids))

    def state(self) -> Dict[str, np.ndarray]:
        return {name: t.numpy() for name, t in self.params.items()}


def predict_from_scores(scores: np.ndarray, class_ids: Sequence[int]) -> np.ndarray:
    class_ids = np.asarray(class_ids)
    order = np.argsort(class_ids, kind="stable")
    return class_ids[order][np.argmax(scores[:, order], axis=1)]


def build_network(spec: NetworkSpec, seed: int, class_ids: Optional[Sequence[int]] = None) -> Network:
    """Initialize parameters with He (fan-in) scaling; biases start at zero."""
    spec.shapes()
    generator = rng(seed, "build_network")
    params: Dict[str, Tensor] = {}
    for layer in spec.layers:
        if layer.kind == CONV:
            fan_in = layer.in_channels * layer.kernel * layer.kernel
            shape = (layer.out_channels, layer.in_channels, layer.kernel, layer.kernel)
        elif layer.kind == FC:
            fan_in = layer.in_channels
            shape = (layer.out_channels, layer.in_channels)
        else:
            continue
        weight = generator.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[f"{layer.name}.weight"] = Tensor(weight, requires_grad=True, name=f"{layer.name}.weight")
        params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_channels), requires_grad=True, name=f"{layer.name}.bias")
    return Network(spec, params, class_ids)


def train_seen(
    net: Network,
    images: np.ndarray,
    labels: Sequence[int],
    epochs: int,
    lr: float,
    batch_size: int,
    seed: int = 0,
    validation: Optional[Tuple[np.ndarray, Sequence[int]]] = None,
    freeze_below: Optional[str] = None,
) -> TrainingReport:
    """
    Minibatch Adam on softmax cross-entropy over the head's classes.

    Args:
        net: Network whose ``class_ids`` are the seen classes
        images: Training images [N, C, H, W]
        labels: Dataset class ids, all present in ``net.class_ids``
        epochs: Passes over the data
        lr: Adam learning rate (0 leaves the parameters unchanged)
        batch_size: Minibatch size
        seed: Seed of the shuffling stream
        validation: Optional (images, labels) scored after every epoch
        freeze_below: Only layers at or above this one are updated

    Returns:
        TrainingReport with per-epoch mean loss and validation accuracy
    """
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ConfigError("train_seen needs a non-empty dataset")
    if len(labels) != len(images):
        raise ShapeError(f"{len(images)} images but {len(labels)} labels")
    row_of = {c: r for r, c in enumerate(net.class_ids)}
    outside = sorted({int(c) for c in labels} - set(row_of))
    if outside:
        raise ConfigError(f"labels {outside} are outside the seen classes")
    rows = np.array([row_of[int(c)] for c in labels])

    names = net.trainable(freeze_below)
    params = [net.params[n] for n in names]
    optimizer = Adam(params, lr=lr)
    frozen_stop = net.position(freeze_below) if freeze_below else 0
    report = TrainingReport(frozen_below=freeze_below)

    for epoch in range(epochs):
        order = rng(seed, "train_seen", epoch).permutation(len(images))
        losses = []
        for start in range(0, len(order), batch_size):
            batch = order[start:start + batch_size]
            x = Tensor(images[batch])
            if frozen_stop:
                with no_grad():
                    x = net._run(x, 0, frozen_stop).detach()
            with Graph() as graph:
                scores = net._run(x, frozen_stop, len(net.spec.layers))
                loss = ops.softmax_cross_entropy(scores, rows[batch])
                grads = graph.backward(loss, params, create_graph=False)
                losses.append(loss.item())
            optimizer.step(grads)
        report.epoch_losses.append(float(np.mean(losses)))
        if validation is not None:
            val_images, val_labels = validation
            accuracy = float(np.mean(net.predict(val_images) == np.asarray(val_labels)))
            report.val_accuracies.append(accuracy)
            logger.info(f"epoch {epoch + 1}/{epochs}: loss {report.epoch_losses[-1]:.4f}, val accuracy {accuracy:.3f}")
        else:
            logger.info(f"epoch {epoch + 1}/{epochs}: loss {report.epoch_losses[-1]:.4f}")
    return report


def expand_head(net: Network, num_unseen: int, seed: int, class_ids: Optional[Sequence[int]] = None) -> Network:
    """
    Append ``num_unseen`` head rows drawn from a diagonal normal fitted to the seen rows.

    Per-dimension mean and (population) variance come from the existing rows;
    new biases equal the mean existing bias. Existing parameters are copied
    bit-exactly.
    """
    if num_unseen < 1:
        raise ConfigError(f"num_unseen must be >= 1, got {num_unseen}")
    seen = net.head_weight.numpy()
    if seen.shape[0] < 2:
        raise ConfigError("expand_head needs a trained head with at least 2 rows")
    if class_ids is None:
        first = max(net.class_ids) + 1
        class_ids = list(range(first, first + num_unseen))
    class_ids = list(class_ids)
    if len(class_ids) != num_unseen or set(class_ids) & set(net.class_ids):
        raise ConfigError("unseen class ids must be new and match num_unseen")

    mean, std = seen.mean(axis=0), seen.std(axis=0)
    draws = rng(seed, "expand_head").standard_normal((num_unseen, seen.shape[1]))
    new_rows = mean + std * draws
    bias = net.head_bias.numpy()

    expanded = net.copy()
    head = expanded.spec.head
    head.out_channels += num_unseen
    expanded.params["head.weight"] = Tensor(np.concatenate([seen, new_rows]), requires_grad=True, name="head.weight")
    expanded.params["head.bias"] = Tensor(
        np.concatenate([bias, np.full(num_unseen, bias.mean())]), requires_grad=True, name="head.bias"
    )
    result = Network(expanded.spec, expanded.params, list(net.class_ids) + class_ids)
    logger.info(f"Expanded head from {seen.shape[0]} to {result.num_rows} rows")
    return result


def with_head(net: Network, weight: np.ndarray, bias: np.ndarray, class_ids: Sequence[int]) -> Network:
    """Copy of ``net`` whose head is replaced by ``weight``/``bias``."""
    replaced = net.copy()
    replaced.spec.head.out_channels = int(weight.shape[0])
    replaced.params["head.weight"] = Tensor(weight, requires_grad=True, name="head.weight")
    replaced.params["head.bias"] = Tensor(bias, requires_grad=True, name="head.bias")
    return Network(replaced.spec, replaced.params, list(class_ids))


def save_checkpoint(path: str, net: Network, metadata: Optional[Dict[str, Any]] = None) -> str:
    meta = {"spec": net.spec.to_dict(), "class_ids": list(net.class_ids), "training": metadata or {}}
    return storage.save(path, storage.Container("checkpoint", net.state(), meta))


def load_checkpoint(path: str, artifact: str = "checkpoint") -> Tuple[Network, Dict[str, Any]]:
    container = storage.load(path, artifact=artifact, expected_kind="checkpoint")
    spec = NetworkSpec.from_dict(container.meta["spec"])
    params = {name: Tensor(value, requires_grad=True, name=name) for name, value in container.tensors.items()}
    net = Network(spec, params, container.meta.get("class_ids"))
    return net, container.meta.get("training", {})
