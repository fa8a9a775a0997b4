from __future__ import annotations

import csv
import logging
import os
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import solve

from autodiff import SGD, Adam, Graph, Tensor, ops

from . import storage
from .errors import ConfigError, FormatError, MissingArtifactError, ShapeError
from .importance import rowwise_spearman
from .seeding import rng
from .types import ImportanceVector, KnowledgeVector, LinearMap, MapDirection, Modality

logger = logging.getLogger(__name__)

Pair = Tuple[ImportanceVector, KnowledgeVector]

MAP_OPTIMIZERS = ("adam", "sgd")
MAP_INITS = ("ridge", "random")


def l2_normalize(matrix: np.ndarray) -> np.ndarray:
    """Unit-norm rows; zero rows stay zero."""
    matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    norms = np.linalg.norm(matrix, axis=1, keepdims=True)
    return np.divide(matrix, norms, out=np.zeros_like(matrix), where=norms > 0)


def cosine_loss(pred: Tensor, target: Tensor) -> Tensor:
    """Mean over rows of 1 - cos(pred_i, target_i); lies in [0, 2]."""
    cos = ops.cosine_similarity(pred, target, axis=1)
    return ops.scale(ops.reduce_sum(ops.subtract(Tensor.ones(cos.shape), cos)), 1.0 / cos.shape[0])


def _validation_rho(predicted: np.ndarray, observed: np.ndarray) -> float:
    """Mean row-wise Spearman correlation; a constant prediction row counts as 0."""
    live = np.ptp(predicted, axis=1) > 0
    rho = np.zeros(predicted.shape[0])
    if live.any():
        rho[live] = rowwise_spearman(predicted[live], observed[live])
    return float(rho.mean())


def ridge_solution(inputs: np.ndarray, targets: np.ndarray, ridge: float,
                   bias: bool = False) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """
    Least-squares map ``targets ~ inputs @ W.T (+ b)`` with an L2 penalty of
    ``ridge`` per training row on W (the offset is not penalized).

    Returns:
        (W [d_out, d_in], b [d_out] or None)
    """
    n, d_in = inputs.shape
    design = np.hstack([inputs, np.ones((n, 1))]) if bias else inputs
    penalty = np.full(design.shape[1], ridge * n)
    if bias:
        penalty[-1] = 0.0
    gram = design.T @ design + np.diag(penalty)
    solution = solve(gram, design.T @ targets, assume_a="sym")
    if bias:
        return solution[:d_in].T, solution[d_in]
    return solution.T, None


def _fit_map(
    inputs: np.ndarray,
    targets: np.ndarray,
    classes: np.ndarray,
    heldout_classes: Sequence[int],
    direction: MapDirection,
    lr: float,
    max_epochs: int,
    patience: int,
    min_delta: float,
    seed: int,
    optimizer: str,
    bias: bool,
    init: str,
    ridge: float,
) -> LinearMap:
    if inputs.shape[0] != targets.shape[0] or inputs.shape[0] != classes.shape[0]:
        raise ShapeError("inputs, targets and classes must have the same number of rows")
    heldout = set(int(c) for c in heldout_classes)
    train = np.array([int(c) not in heldout for c in classes])
    if not train.any():
        raise ConfigError("map fitting needs at least one training class outside the held-out set")
    if optimizer not in MAP_OPTIMIZERS:
        raise ConfigError(f"unknown optimizer {optimizer!r}")
    if init not in MAP_INITS:
        raise ConfigError(f"unknown map initialization {init!r}")
    if ridge < 0:
        raise ConfigError(f"ridge penalty must be >= 0, got {ridge}")
    val = ~train

    x = l2_normalize(inputs)
    d_in, d_out = x.shape[1], targets.shape[1]
    x_val, y_val = (x[val], targets[val]) if val.any() else (x[train], targets[train])
    if not val.any():
        logger.warning("No held-out instances; early stopping monitors training rank correlation")
    # undefined correlations in the observed rows are a data problem, not a fitting one
    rowwise_spearman(y_val, y_val)

    if init == "ridge":
        start, start_offset = ridge_solution(x[train], targets[train], ridge, bias)
    else:
        start = rng(seed, "map", direction.value).normal(0.0, 1.0 / np.sqrt(d_in), size=(d_out, d_in))
        start_offset = np.zeros(d_out) if bias else None
    weight = Tensor(start, requires_grad=True, name="map.weight")
    params = [weight]
    offset = None
    if bias:
        offset = Tensor(start_offset, requires_grad=True, name="map.bias")
        params.append(offset)
    opt = Adam(params, lr=lr) if optimizer == "adam" else SGD(params, lr=lr)
    x_train, y_train = Tensor(x[train]), Tensor(targets[train])

    def predict(values: np.ndarray) -> np.ndarray:
        out = values @ weight.data.T
        return out + offset.data if offset is not None else out

    def snapshot():
        return weight.numpy(), offset.numpy() if offset is not None else None

    best_rho, best = _validation_rho(predict(x_val), y_val), snapshot()
    rhos: List[float] = [best_rho]
    losses: List[float] = []
    wait, epochs = 0, 0
    for epoch in range(max_epochs):
        with Graph() as graph:
            pred = ops.matmul(x_train, ops.transpose(weight))
            if offset is not None:
                pred = ops.add(pred, ops.reshape(offset, (1, d_out)))
            loss = cosine_loss(pred, y_train)
            grads = graph.backward(loss, params, create_graph=False)
            losses.append(loss.item())
        opt.step(grads)
        epochs = epoch + 1
        rho = _validation_rho(predict(x_val), y_val)
        rhos.append(rho)
        if rho > best_rho + min_delta:
            best_rho, best, wait = rho, snapshot(), 0
        else:
            # a tie keeps the later, lower-loss iterate
            if rho >= best_rho:
                best_rho, best = rho, snapshot()
            wait += 1
            if wait >= patience:
                logger.info(f"Map early stop at epoch {epochs}: best held-out rho {best_rho:.4f}")
                break

    logger.info(f"Fitted {direction.value} map ({d_out}x{d_in}) from a {init} start in {epochs} epochs, "
                f"start rho {rhos[0]:.4f}, best rho {best_rho:.4f}")
    return LinearMap(
        matrix=best[0],
        direction=direction,
        bias=best[1],
        heldout_classes=sorted(heldout),
        best_validation_rho=float(best_rho),
        epochs=epochs,
        metadata={"train_losses": losses, "val_rhos": rhos, "optimizer": optimizer, "init": init},
    )


def _stack_pairs(pairs: Sequence[Pair]) -> Tuple[np.ndarray, np.ndarray, np.ndarray, str]:
    if not pairs:
        raise ConfigError("map fitting needs a non-empty set of pairs")
    importances = np.stack([a.values for a, _ in pairs])
    knowledge = np.stack([k.values for _, k in pairs])
    classes = np.array([k.class_id for _, k in pairs])
    if any(a.class_id != k.class_id for a, k in pairs):
        raise ConfigError("every importance vector must be paired with the knowledge of its own class")
    return importances, knowledge, classes, pairs[0][0].layer


def fit_forward_map(
    pairs: Sequence[Pair],
    heldout_classes: Sequence[int],
    lr: float = 1e-3,
    max_epochs: int = 400,
    patience: int = 20,
    min_delta: float = 1e-3,
    seed: int = 0,
    optimizer: str = "adam",
    bias: bool = False,
    init: str = "ridge",
    ridge: float = 1e-3,
) -> LinearMap:
    """
    Fit W (importance_dim x knowledge_dim) minimizing the mean cosine distance
    between W·k and the observed importances.

    With ``init="ridge"`` the cosine descent starts from the closed-form ridge
    solution on the training rows; ``init="random"`` starts from a seeded
    normal draw. The returned matrix is the iterate (the start included) with
    the best mean held-out Spearman correlation; training stops once that correlation has not improved by
    more than ``min_delta`` for ``patience`` epochs.
    """
    importances, knowledge, classes, layer = _stack_pairs(pairs)
    fitted = _fit_map(knowledge, importances, classes, heldout_classes, MapDirection.KNOWLEDGE_TO_IMPORTANCE,
                      lr, max_epochs, patience, min_delta, seed, optimizer, bias, init, ridge)
    fitted.metadata["layer"] = layer
    return fitted


def fit_inverse_map(
    pairs: Sequence[Pair],
    heldout_classes: Sequence[int],
    lr: float = 1e-3,
    max_epochs: int = 400,
    patience: int = 20,
    min_delta: float = 1e-3,
    seed: int = 0,
    optimizer: str = "adam",
    bias: bool = False,
    init: str = "ridge",
    ridge: float = 1e-3,
) -> LinearMap:
    """Same as :func:`fit_forward_map` with importances as inputs and knowledge as targets."""
    importances, knowledge, classes, layer = _stack_pairs(pairs)
    fitted = _fit_map(importances, knowledge, classes, heldout_classes, MapDirection.IMPORTANCE_TO_KNOWLEDGE,
                      lr, max_epochs, patience, min_delta, seed, optimizer, bias, init, ridge)
    fitted.metadata["layer"] = layer
    return fitted


def _apply(linear: LinearMap, values: np.ndarray, direction: MapDirection) -> np.ndarray:
    if linear.direction is not direction:
        raise ConfigError(f"expected a {direction.value} map, got {linear.direction.value}")
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] != linear.in_dim:
        raise ShapeError(f"map takes {linear.in_dim}-dimensional input, got {values.shape[-1]}")
    if linear.bias is None:
        return values @ linear.matrix.T
    # with an offset the input scale matters; fitting saw unit-norm inputs
    unit = l2_normalize(values).reshape(values.shape)
    return unit @ linear.matrix.T + linear.bias


def predict_importance(linear: LinearMap, knowledge: Union[KnowledgeVector, np.ndarray], class_id: int = -1) -> ImportanceVector:
    """Predicted importance vector W_{K->a} k_c."""
    if isinstance(knowledge, KnowledgeVector):
        class_id, knowledge = knowledge.class_id, knowledge.values
    values = _apply(linear, knowledge, MapDirection.KNOWLEDGE_TO_IMPORTANCE)
    return ImportanceVector(linear.metadata.get("layer", ""), class_id, values, source="predicted")


def predict_knowledge(linear: LinearMap, importance: Union[ImportanceVector, np.ndarray]) -> np.ndarray:
    """Scores over knowledge dimensions, W_{a->K} a."""
    values = importance.values if isinstance(importance, ImportanceVector) else importance
    return _apply(linear, values, MapDirection.IMPORTANCE_TO_KNOWLEDGE)


def save_map(path: str, linear: LinearMap) -> str:
    tensors = {"matrix": linear.matrix}
    if linear.bias is not None:
        tensors["bias"] = linear.bias
    meta = {
        "direction": linear.direction.value,
        "heldout_classes": list(linear.heldout_classes),
        "best_validation_rho": linear.best_validation_rho,
        "epochs": linear.epochs,
        "layer": linear.metadata.get("layer", ""),
    }
    return storage.save(path, storage.Container("map", tensors, meta))


def load_map(path: str, artifact: str = "map") -> LinearMap:
    container = storage.load(path, artifact=artifact, expected_kind="map")
    meta = container.meta
    return LinearMap(
        matrix=container.tensors["matrix"],
        direction=MapDirection(meta["direction"]),
        bias=container.tensors.get("bias"),
        heldout_classes=[int(c) for c in meta.get("heldout_classes", [])],
        best_validation_rho=meta.get("best_validation_rho"),
        epochs=int(meta.get("epochs", 0)),
        metadata={"layer": meta.get("layer", "")},
    )


def read_knowledge_csv(path: str, modality: Optional[Modality] = None) -> Tuple[List[KnowledgeVector], List[str]]:
    """
    Read ``class_id,k0,k1,...`` rows; an optional header row names the dimensions.

    Returns:
        (knowledge vectors sorted by class id, dimension names)
    """
    if not os.path.exists(path):
        raise MissingArtifactError("knowledge csv", path)
    with open(path, "r", newline="", encoding="utf-8") as f:
        rows = [row for row in csv.reader(f) if row]
    if not rows:
        raise FormatError(f"{path}: empty knowledge file")
    names: List[str] = []
    if rows[0][0].strip() == "class_id":
        names = [name.strip() for name in rows[0][1:]]
        rows = rows[1:]
    vectors: List[KnowledgeVector] = []
    try:
        parsed = [(int(row[0]), np.array([float(v) for v in row[1:]])) for row in rows]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    dims = {values.shape[0] for _, values in parsed}
    if len(dims) != 1:
        raise FormatError(f"{path}: inconsistent knowledge dimensions {sorted(dims)}")
    dim = dims.pop()
    if names and len(names) != dim:
        raise FormatError(f"{path}: {len(names)} names for {dim} dimensions")
    if modality is None:
        binary = all(np.isin(values, (0.0, 1.0)).all() for _, values in parsed)
        modality = Modality.ATTRIBUTES if binary else Modality.TEXT_EMBEDDING
    for class_id, values in sorted(parsed, key=lambda item: item[0]):
        vectors.append(KnowledgeVector(class_id, values, modality))
    return vectors, names or [f"k{i}" for i in range(dim)]


def write_knowledge_csv(path: str, vectors: Sequence[KnowledgeVector], names: Sequence[str]) -> str:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["class_id"] + list(names))
        for vector in vectors:
            writer.writerow([vector.class_id] + [repr(float(v)) for v in vector.values])
    return path
