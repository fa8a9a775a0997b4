"""
Unseen-class weight transfer.

For every unseen class the head row ``w_c`` is optimized so that the
importances it induces on unlabeled probe images point the same way as the
importances predicted from the class description:

    L(w_c) = mean_probes [1 - cos(alpha_c(w_c), a_c)] + lambda * ||w_c - mean seen row||

``alpha_c`` is itself a gradient, so the update of ``w_c`` differentiates
through a backward pass (a Hessian-vector product). Each iteration takes an
Adam step on the cosine term, then a proximal step of size ``lr * lambda`` on
the regularizer (:func:`shrink_towards`). Seen rows and every layer below
the head stay frozen. The unseen bias is never optimized: the importance is the
gradient of the logit with respect to the features, which does not depend on
the bias, so the bias keeps the mean seen bias that head expansion gave it.
"""
from __future__ import annotations

import asyncio
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from autodiff import Adam, Graph, Tensor, no_grad, ops

from .config import TransferConfig
from .errors import ConfigError, EngineNumericalError, NumericalError, ShapeError
from .importance import observed_importance
from .knowmap import predict_importance
from .model import Network, with_head
from .seeding import rng
from .synthbench import seen_accuracy
from .types import (
    DatasetManifest,
    GzslSplit,
    KnowledgeVector,
    LinearMap,
    LossRecord,
    MapDirection,
    ProbePool,
    RecoveryPoint,
    TransferResult,
)

logger = logging.getLogger(__name__)

ORACLE_PROBES = 64


@dataclass
class ObjectiveTerms:
    loss: Tensor
    cos_term: Tensor
    reg_term: Tensor


def transfer_objective(
    net: Network,
    layer: str,
    activation: Tensor,
    weight: Tensor,
    bias: Tensor,
    target: np.ndarray,
    mean_row: np.ndarray,
    lambda_: float,
    graph: Graph,
    squared: bool = False,
) -> ObjectiveTerms:
    """
    Transfer loss of one head row on a batch of probe activations.

    Args:
        net: Network providing the layers above ``layer``
        layer: Layer the importances are taken at
        activation: Probe activations at ``layer`` (a leaf requiring grad)
        weight: Head row being optimized [D]
        bias: Its bias [1]
        target: Predicted importance a_c [channels of ``layer``]
        mean_row: Elementwise mean of the seen rows [D]
        lambda_: Regularization coefficient
        graph: Graph everything is recorded in
        squared: Use ||w - mean||^2 instead of the plain norm

    Returns:
        ObjectiveTerms whose ``loss`` is differentiable with respect to ``weight``
    """
    with graph.recording():
        head = (ops.reshape(weight, (1, weight.shape[0])), ops.reshape(bias, (1,)))
    alpha = observed_importance(net, layer, activation, [0] * activation.shape[0], graph, head=head)
    with graph.recording():
        goal = Tensor(np.asarray(target, dtype=np.float64).reshape(1, -1))
        cos = ops.cosine_similarity(alpha, goal, axis=1)
        cos_term = ops.scale(ops.reduce_sum(ops.subtract(Tensor.ones(cos.shape), cos)), 1.0 / cos.shape[0])
        diff = ops.subtract(weight, Tensor(mean_row))
        reg_term = ops.dot(diff, diff) if squared else ops.l2_norm(diff)
        loss = ops.add(cos_term, ops.scale(reg_term, lambda_))
    return ObjectiveTerms(loss, cos_term, reg_term)


def shrink_towards(row: np.ndarray, anchor: np.ndarray, tau: float, squared: bool = False) -> np.ndarray:
    """
    Proximal step of ``tau * ||row - anchor||`` (``tau * ||row - anchor||^2``
    when ``squared``): the offset from the anchor shrinks by ``tau`` in norm,
    snapping to the anchor once it is shorter than ``tau``.
    """
    if tau <= 0:
        return row
    offset = row - anchor
    if squared:
        return anchor + offset / (1.0 + 2.0 * tau)
    norm = float(np.linalg.norm(offset))
    if norm <= tau:
        return anchor.copy()
    return anchor + (1.0 - tau / norm) * offset


class WeightTransfer:
    """
    Optimizes unseen head rows of an expanded network.

    Classes are independent, so they run in parallel workers; within a class
    iterations are sequential. Results are assembled in class order whatever
    the completion order.
    """

    def __init__(self, net: Network, config: TransferConfig, threads: int = 1):
        """
        Args:
            net: Expanded network (seen rows plus initialized unseen rows)
            config: Transfer hyperparameters
            threads: Upper bound on concurrent per-class optimizations
        """
        config.validate()
        if threads < 1:
            raise ConfigError(f"threads must be >= 1, got {threads}")
        net.position(config.layer)
        self.net = net
        self.config = config
        self.threads = threads

    # -- targets ---------------------------------------------------------

    def predicted_targets(self, linear_map: LinearMap, knowledge: Sequence[KnowledgeVector]) -> Dict[int, np.ndarray]:
        """a_c = W_{K->a} k_c for each described class."""
        if linear_map.direction is not MapDirection.KNOWLEDGE_TO_IMPORTANCE:
            raise ConfigError(f"transfer needs a K->a map, got {linear_map.direction.value}")
        map_layer = linear_map.metadata.get("layer")
        if map_layer and map_layer != self.config.layer:
            raise ConfigError(f"map was fitted at layer {map_layer!r} but transfer runs at {self.config.layer!r}")
        if not knowledge:
            raise ConfigError("transfer needs at least one unseen class description")
        channels = self.net.channels(self.config.layer)
        targets = {}
        for vector in knowledge:
            predicted = predict_importance(linear_map, vector)
            if len(predicted) != channels:
                raise ShapeError(f"map predicts {len(predicted)} importances; layer {self.config.layer} has {channels}")
            targets[vector.class_id] = predicted.values
        return targets

    def seen_mean(self, transferred: Sequence[int]) -> np.ndarray:
        """Elementwise mean of the head rows that are not being transferred."""
        rows = [r for r, c in enumerate(self.net.class_ids) if c not in set(transferred)]
        if not rows:
            raise ConfigError("no seen rows left to regularize towards")
        return self.net.head_weight.numpy()[rows].mean(axis=0)

    # -- optimization ----------------------------------------------------

    def _check(self, targets: Dict[int, np.ndarray], probes: ProbePool) -> List[int]:
        if len(probes) == 0:
            raise ConfigError("probe pool is empty")
        if tuple(probes.images.shape[1:]) != tuple(self.net.spec.input_shape):
            raise ShapeError(f"probe images {probes.images.shape[1:]} do not match input {self.net.spec.input_shape}")
        classes = sorted(targets)
        for c in classes:
            self.net.row_of(c)
        return classes

    def _optimize(self, class_id: int, target: np.ndarray, mean_row: np.ndarray,
                  probes: ProbePool) -> Tuple[np.ndarray, float, int, List[LossRecord]]:
        config = self.config
        row = self.net.row_of(class_id)
        weight = Tensor(self.net.head_weight.numpy()[row], requires_grad=True, name=f"head.row{class_id}")
        bias = Tensor(self.net.head_bias.numpy()[row:row + 1])
        optimizer = Adam([weight], lr=config.lr)
        generator = rng(config.seed, "transfer", class_id)
        batch = min(config.batch_size, len(probes))

        best_loss, best_row = np.inf, weight.numpy()
        reference, wait = np.inf, 0
        trace: List[LossRecord] = []
        iterations = 0
        try:
            for iteration in range(config.max_iterations):
                picks = np.sort(generator.choice(len(probes), size=batch, replace=False))
                with no_grad():
                    frozen = self.net.forward_until(probes.images[picks], config.layer).data
                activation = Tensor(frozen, requires_grad=True)
                with Graph() as graph:
                    terms = transfer_objective(self.net, config.layer, activation, weight, bias, target,
                                               mean_row, config.lambda_, graph, config.squared_regularizer)
                    total = terms.loss.item()
                    (grad,) = graph.backward(terms.cos_term, [weight], create_graph=False)
                    record = LossRecord(iteration, class_id, terms.cos_term.item(), terms.reg_term.item(), total)
                    step = grad.numpy()
                if not np.isfinite(total):
                    raise NumericalError(f"class {class_id}: non-finite transfer loss at iteration {iteration}")
                trace.append(record)
                iterations = iteration + 1
                if total < best_loss:
                    best_loss, best_row = total, weight.numpy()
                optimizer.step([step])
                weight.assign(shrink_towards(weight.numpy(), mean_row, config.lr * config.lambda_,
                                             config.squared_regularizer))

                if best_loss < reference * (1.0 - config.min_improvement):
                    reference, wait = best_loss, 0
                else:
                    wait += 1
                    if wait >= config.patience:
                        break
        except EngineNumericalError as exc:
            raise NumericalError(f"class {class_id}: {exc}") from exc

        logger.info(f"class {class_id}: best loss {best_loss:.4f} after {iterations} iterations")
        return best_row, float(best_loss), iterations, trace

    def _assemble(self, classes: Sequence[int], outcomes: Sequence[object]) -> TransferResult:
        result = TransferResult()
        failures: List[BaseException] = []
        for class_id, outcome in zip(classes, outcomes):
            if isinstance(outcome, BaseException):
                result.errors.append(f"class {class_id}: {outcome}")
                failures.append(outcome)
                continue
            row, loss, iterations, trace = outcome
            result.rows[class_id] = row
            result.biases[class_id] = float(self.net.head_bias.numpy()[self.net.row_of(class_id)])
            result.best_losses[class_id] = loss
            result.iterations[class_id] = iterations
            result.trace.extend(trace)
        for message in result.errors:
            logger.error(f"Transfer failed for {message}")
        if failures:
            raise failures[0]
        return result

    def transfer_to_targets(self, targets: Dict[int, np.ndarray], probes: ProbePool,
                            mean_row: Optional[np.ndarray] = None) -> TransferResult:
        """
        Optimize the rows of ``targets``' classes towards the given importances.

        Args:
            targets: Class id to target importance vector
            probes: Unlabeled probe images
            mean_row: Regularization anchor; defaults to the mean of the other rows

        Returns:
            TransferResult with the lowest-loss iterate of every class
        """
        classes = self._check(targets, probes)
        anchor = self.seen_mean(classes) if mean_row is None else np.asarray(mean_row, dtype=np.float64)
        logger.info(f"Transferring {len(classes)} rows at {self.config.layer} with {len(probes)} probes")

        def run(class_id: int):
            try:
                return self._optimize(class_id, targets[class_id], anchor, probes)
            except Exception as exc:
                return exc

        if self.threads > 1 and len(classes) > 1:
            with ThreadPoolExecutor(max_workers=self.threads) as pool:
                outcomes = list(pool.map(run, classes))
        else:
            outcomes = [run(c) for c in classes]
        return self._assemble(classes, outcomes)

    async def atransfer_to_targets(self, targets: Dict[int, np.ndarray], probes: ProbePool,
                                   mean_row: Optional[np.ndarray] = None) -> TransferResult:
        """
        Asynchronous :meth:`transfer_to_targets`; at most ``threads`` classes run at once.
        """
        classes = self._check(targets, probes)
        anchor = self.seen_mean(classes) if mean_row is None else np.asarray(mean_row, dtype=np.float64)
        limit = asyncio.Semaphore(self.threads)

        async def run(class_id: int):
            async with limit:
                return await asyncio.to_thread(self._optimize, class_id, targets[class_id], anchor, probes)

        outcomes = await asyncio.gather(*(run(c) for c in classes), return_exceptions=True)
        return self._assemble(classes, outcomes)

    def transfer_weights(self, linear_map: LinearMap, knowledge: Sequence[KnowledgeVector],
                         probes: ProbePool) -> TransferResult:
        """
        Learn unseen rows from class descriptions.

        Args:
            linear_map: Fitted K->a map at the transfer layer
            knowledge: Descriptions of the unseen classes (rows already in the head)
            probes: Unlabeled probe images

        Returns:
            TransferResult; apply it with :func:`apply_transfer`
        """
        return self.transfer_to_targets(self.predicted_targets(linear_map, knowledge), probes)

    async def atransfer_weights(self, linear_map: LinearMap, knowledge: Sequence[KnowledgeVector],
                                probes: ProbePool) -> TransferResult:
        """
        Learn unseen rows from class descriptions asynchronously.

        Args:
            linear_map: Fitted K->a map at the transfer layer
            knowledge: Descriptions of the unseen classes
            probes: Unlabeled probe images

        Returns:
            TransferResult, identical to the synchronous one
        """
        return await self.atransfer_to_targets(self.predicted_targets(linear_map, knowledge), probes)


def transfer_weights(
    net: Network,
    linear_map: LinearMap,
    knowledge: Sequence[KnowledgeVector],
    probes: ProbePool,
    config: TransferConfig,
    threads: int = 1,
) -> TransferResult:
    return WeightTransfer(net, config, threads).transfer_weights(linear_map, knowledge, probes)


def apply_transfer(net: Network, result: TransferResult) -> Network:
    """Copy of ``net`` with the transferred rows written into the head."""
    weight = net.head_weight.numpy()
    bias = net.head_bias.numpy()
    for class_id, row in result.rows.items():
        index = net.row_of(class_id)
        weight[index] = row
        bias[index] = result.biases.get(class_id, bias[index])
    return with_head(net, weight, bias, net.class_ids)


def perturb_importance(
    targets: Union[Dict[int, np.ndarray], np.ndarray],
    epsilon: float,
    seed: int,
) -> Union[Dict[int, np.ndarray], np.ndarray]:
    """
    Add zero-centred Gaussian noise scaled by ``epsilon`` times the mean L1 norm of the targets.

    ``targets`` is either a class-to-vector dict or a matrix with one class per
    row (a single vector counts as one class). The result has the same form.
    """
    if epsilon < 0:
        raise ConfigError(f"noise level must be >= 0, got {epsilon}")
    as_dict = isinstance(targets, dict)
    classes = sorted(targets) if as_dict else None
    matrix = np.stack([targets[c] for c in classes]) if as_dict else np.asarray(targets, dtype=np.float64)
    flat = np.atleast_2d(matrix)
    scale = float(np.mean(np.sum(np.abs(flat), axis=1)))
    noisy = flat + epsilon * scale * rng(seed, "perturb").standard_normal(flat.shape)
    if as_dict:
        return {c: noisy[i] for i, c in enumerate(classes)}
    return noisy.reshape(matrix.shape)


def oracle_importances(net: Network, layer: str, probes: ProbePool,
                       count: int = ORACLE_PROBES) -> Dict[int, np.ndarray]:
    """Importances each existing head row induces, averaged over the first ``count`` probes."""
    images = probes.images[:count]
    with no_grad():
        frozen = net.forward_until(images, layer).data
    targets: Dict[int, np.ndarray] = {}
    for row, class_id in enumerate(net.class_ids):
        activation = Tensor(frozen, requires_grad=True)
        with Graph() as graph:
            alpha = observed_importance(net, layer, activation, [row] * len(images), graph, create_graph=False)
            targets[class_id] = alpha.numpy().mean(axis=0)
    return targets


def recover_seen_weights(
    net: Network,
    manifest: DatasetManifest,
    split: GzslSplit,
    noise_levels: Sequence[float],
    config: TransferConfig,
    probes: ProbePool,
    iterations: Optional[int] = None,
    threads: int = 1,
) -> List[RecoveryPoint]:
    """
    Re-learn the seen head from its own (noised) importances.

    The head of the trained seen network is replaced by rows drawn from a
    diagonal normal fitted to it; each row is then optimized towards the
    importance the original row induces on the probes, perturbed at every
    noise level, and the recovered head is scored on the seen test images.

    Returns:
        One RecoveryPoint per noise level, in the given order
    """
    if not noise_levels:
        raise ConfigError("noise sweep is empty")
    if iterations is not None:
        config = replace(config, max_iterations=iterations)
    original = seen_accuracy(net, manifest, split, threads=threads)
    chance = 1.0 / len(net.class_ids)
    targets = oracle_importances(net, config.layer, probes)

    rows = net.head_weight.numpy()
    mean, std = rows.mean(axis=0), rows.std(axis=0)
    fresh = mean + std * rng(config.seed, "recover", "init").standard_normal(rows.shape)
    bias = np.full(rows.shape[0], net.head_bias.numpy().mean())
    fresh_net = with_head(net, fresh, bias, net.class_ids)
    worker = WeightTransfer(fresh_net, config, threads)

    points: List[RecoveryPoint] = []
    for epsilon in noise_levels:
        noisy = perturb_importance(targets, epsilon, config.seed)
        recovered = apply_transfer(fresh_net, worker.transfer_to_targets(noisy, probes, mean_row=mean))
        accuracy = seen_accuracy(recovered, manifest, split, threads=threads)
        logger.info(f"noise {epsilon:g}: recovered accuracy {accuracy:.4f} (original {original:.4f})")
        points.append(RecoveryPoint(float(epsilon), accuracy, original, chance))
    return points


__all__ = [
    "ObjectiveTerms",
    "WeightTransfer",
    "transfer_objective",
    "transfer_weights",
    "apply_transfer",
    "perturb_importance",
    "oracle_importances",
    "recover_seen_weights",
]
