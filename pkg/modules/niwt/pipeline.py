from __future__ import annotations

import itertools
import logging
import os
from dataclasses import replace
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import RunConfig, TransferConfig
from .errors import ConfigError, MissingArtifactError
from .explain import (
    bbox_energy_fraction,
    explanation_fidelity,
    fidelity_curve,
    gradcam,
    neuron_focus,
    shuffled_energy_fraction,
    textual_explanation,
    write_explanations_json,
    write_heatmap_csv,
    write_pgm,
)
from .importance import (
    class_aggregate,
    correlation_report_from_vectors,
    importance_dataset,
    neuron_importance,
    rank_permutation_test,
    read_importance_csv,
    write_importance_csv,
)
from .knowmap import fit_forward_map, fit_inverse_map, load_map, read_knowledge_csv, save_map, write_knowledge_csv
from .model import (
    CONV,
    Network,
    build_network,
    default_spec,
    expand_head,
    load_checkpoint,
    save_checkpoint,
    train_seen,
)
from .probes import sample_probes
from .report import emit_report, run_meta, write_csv, write_json, write_trace_csv
from .seeding import rng
from .synthbench import (
    audit_no_unseen_leak,
    evaluate_gzsl,
    generate_dataset,
    load_dataset,
    save_dataset,
    split_gzsl,
    train_unseen_skyline,
)
from .transfer import WeightTransfer, apply_transfer, recover_seen_weights
from .types import (
    DatasetManifest,
    GzslResult,
    GzslSplit,
    ImportanceVector,
    KnowledgeVector,
    LinearMap,
    Partition,
    ProbePool,
    TransferResult,
)

logger = logging.getLogger(__name__)

Pair = Tuple[ImportanceVector, KnowledgeVector]


class NiwtPipeline:
    """
    Runs the stages of a zero-shot weight-transfer experiment.

    Every stage reads its prerequisites from the run directory and writes its
    own artifacts there, so stages can be invoked one at a time (as the CLI
    does) or chained with :meth:`run_all`. A missing prerequisite raises
    MissingArtifactError naming the stage that produces it.
    """

    def __init__(self, config: RunConfig):
        """
        Initialize the pipeline with a resolved configuration.

        Args:
            config: Validated run configuration
        """
        self.config = config
        self._manifest: Optional[DatasetManifest] = None
        os.makedirs(config.paths.out_dir, exist_ok=True)

    # ------------------------------------------------------------------
    # paths and cached artifacts

    @property
    def out_dir(self) -> str:
        return self.config.paths.out_dir

    def path(self, name: str) -> str:
        return os.path.join(self.out_dir, name)

    @property
    def manifest(self) -> DatasetManifest:
        if self._manifest is None:
            path = self.config.require("dataset", "dataset (run gen-data first)")
            self._manifest = load_dataset(path)
        return self._manifest

    @property
    def split(self) -> GzslSplit:
        if self.manifest.split is None:
            raise MissingArtifactError("GZSL split (run gen-data first)", self.config.paths.resolve("dataset"))
        return self.manifest.split

    def seen_network(self) -> Network:
        path = self.config.require("seen_checkpoint", "seen-class checkpoint (run train-seen first)")
        net, _ = load_checkpoint(path, artifact="seen-class checkpoint")
        return net

    def knowledge(self) -> Tuple[Dict[int, KnowledgeVector], List[str]]:
        """Class descriptions from the configured CSV, else the benchmark attributes."""
        csv_path = self.config.paths.resolve("knowledge_csv")
        if csv_path:
            vectors, names = read_knowledge_csv(csv_path)
            return {v.class_id: v for v in vectors}, names
        manifest = self.manifest
        return {c: manifest.knowledge(c) for c in range(manifest.num_classes)}, list(manifest.attribute_names)

    def probes(self, mode: Optional[str] = None, count: Optional[int] = None) -> ProbePool:
        tc = self.config.transfer
        return sample_probes(mode or tc.probe_mode, count or tc.probe_count, self.config.seed, dataset=self.manifest)

    def write_meta(self, command: str) -> str:
        return write_json(self.path("run_meta.json"), run_meta(self.config, command))

    # ------------------------------------------------------------------
    # stages

    def generate_data(self) -> DatasetManifest:
        b = self.config.benchmark
        manifest = generate_dataset(
            b.num_classes, b.d_k, b.images_per_class, (b.channels, b.height, b.width),
            seed=self.config.seed, active_attributes=b.active_attributes, threads=self.config.threads,
        )
        manifest.split = split_gzsl(manifest, b.num_unseen, b.num_heldout, self.config.seed,
                                    (b.train_fraction, b.val_fraction, b.test_fraction))
        save_dataset(self.config.paths.resolve("dataset"), manifest)
        write_knowledge_csv(self.path("attributes.csv"),
                            [manifest.knowledge(c) for c in range(manifest.num_classes)], manifest.attribute_names)
        self._manifest = manifest
        logger.info(f"Split: {len(manifest.split.seen)} seen, {len(manifest.split.unseen)} unseen, "
                    f"{len(manifest.split.heldout)} held-out")
        return manifest

    def _train(self, classes: Sequence[int], split: GzslSplit, stage: str) -> Tuple[Network, Any]:
        manifest, tc = self.manifest, self.config.train
        train_ids = split.instances(Partition.TRAIN, list(classes), manifest.labels)
        val_ids = split.instances(Partition.VAL, list(classes), manifest.labels)
        audit_no_unseen_leak(self.split, manifest.labels, train_ids, stage)
        net = build_network(default_spec(len(classes), manifest.image_shape), self.config.seed, class_ids=classes)
        report = train_seen(
            net, manifest.images[train_ids], manifest.labels[train_ids], tc.epochs, tc.lr, tc.batch_size,
            seed=self.config.seed,
            validation=(manifest.images[val_ids], manifest.labels[val_ids]) if val_ids else None,
            freeze_below=tc.freeze_below,
        )
        return net, report

    def train_seen(self) -> Tuple[Network, Any]:
        """Train the seen-class network and save its checkpoint."""
        net, report = self._train(self.split.seen, self.split, "seen training")
        save_checkpoint(self.config.paths.resolve("seen_checkpoint"), net, {
            "epoch_losses": report.epoch_losses,
            "val_accuracies": report.val_accuracies,
        })
        return net, report

    def _importances(self, net: Network, layer: str, classes: Sequence[int], stage: str) -> List[ImportanceVector]:
        manifest = self.manifest
        ids = self.split.instances(Partition.TRAIN, list(classes), manifest.labels)
        audit_no_unseen_leak(self.split, manifest.labels, ids, stage)
        return importance_dataset(net, layer, manifest.images[ids], manifest.labels[ids], instance_ids=ids,
                                  threads=self.config.threads)

    def extract_importance(self, layer: Optional[str] = None) -> Dict[str, Any]:
        """Per-instance importances of the seen training images; also reports their rank consistency."""
        layer = layer or self.config.layer
        vectors = self._importances(self.seen_network(), layer, self.split.seen, "importance extraction")
        write_importance_csv(self.config.paths.resolve("importances"), vectors)
        within, cross = correlation_report_from_vectors(vectors, seed=self.config.seed)
        summary = {"layer": layer, "instances": len(vectors), "within_rho": within, "cross_rho": cross}
        write_json(self.path("importance_report.json"), summary)
        return summary

    def _pairs(self, vectors: Sequence[ImportanceVector]) -> List[Pair]:
        knowledge, _ = self.knowledge()
        if self.config.map.aggregate:
            vectors = list(class_aggregate(vectors).values())
        missing = sorted({v.class_id for v in vectors} - set(knowledge))
        if missing:
            raise ConfigError(f"no class description for classes {missing[:10]}")
        return [(v, knowledge[v.class_id]) for v in vectors]

    def _fit(self, pairs: Sequence[Pair], heldout: Sequence[int]) -> Tuple[LinearMap, LinearMap]:
        mc = self.config.map
        options = dict(lr=mc.lr, max_epochs=mc.max_epochs, patience=mc.patience, min_delta=mc.min_delta,
                       seed=self.config.seed, optimizer=mc.optimizer, bias=mc.bias, init=mc.init, ridge=mc.ridge)
        return fit_forward_map(pairs, heldout, **options), fit_inverse_map(pairs, heldout, **options)

    def fit_maps(self) -> Dict[str, Any]:
        """Fit both maps on the dumped importances; held-out seen classes drive early stopping."""
        path = self.config.require("importances", "importance dump (run extract-importance first)")
        vectors = read_importance_csv(path)
        ids = [int(v.source) for v in vectors if v.source.isdigit()]
        audit_no_unseen_leak(self.split, self.manifest.labels, ids, "map fitting")
        pairs = self._pairs(vectors)
        forward, inverse = self._fit(pairs, self.split.heldout)
        save_map(self.config.paths.resolve("forward_map"), forward)
        save_map(self.config.paths.resolve("inverse_map"), inverse)

        summary: Dict[str, Any] = {
            "layer": forward.metadata.get("layer"),
            "forward_rho": forward.best_validation_rho,
            "inverse_rho": inverse.best_validation_rho,
            "forward_epochs": forward.epochs,
            "forward_start_rho": forward.metadata["val_rhos"][0],
            "inverse_start_rho": inverse.metadata["val_rhos"][0],
        }
        heldout_pairs = [(a, k) for a, k in pairs if a.class_id in set(self.split.heldout)]
        if len(heldout_pairs) >= 2:
            predicted = np.stack([k.values for _, k in heldout_pairs]) @ forward.matrix.T
            observed = np.stack([a.values for a, _ in heldout_pairs])
            test = rank_permutation_test(predicted, observed, seed=self.config.seed)
            summary.update(permutation_rho=test.observed, permutation_p=test.p_value)
        write_json(self.path("map_report.json"), summary)
        return summary

    def _expanded(self, net: Network, split: Optional[GzslSplit] = None) -> Network:
        split = split or self.split
        return expand_head(net, len(split.unseen), self.config.seed, class_ids=split.unseen)

    def _transfer(self, net: Network, forward: LinearMap, probes: ProbePool, config: TransferConfig,
                  split: Optional[GzslSplit] = None) -> Tuple[Network, TransferResult]:
        split = split or self.split
        knowledge, _ = self.knowledge()
        expanded = self._expanded(net, split)
        worker = WeightTransfer(expanded, config, self.config.threads)
        result = worker.transfer_weights(forward, [knowledge[c] for c in split.unseen], probes)
        return apply_transfer(expanded, result), result

    def _transfer_inputs(self, lambda_: Optional[float], probe_mode: Optional[str]):
        config = self.config.transfer
        if lambda_ is not None:
            config = replace(config, lambda_=lambda_)
        if probe_mode is not None:
            config = replace(config, probe_mode=probe_mode)
        config.validate()
        forward = load_map(self.config.require("forward_map", "K->a map (run fit-map first)"), artifact="K->a map")
        return config, forward, self.probes(config.probe_mode, config.probe_count)

    def transfer(self, lambda_: Optional[float] = None, probe_mode: Optional[str] = None) -> TransferResult:
        """
        Learn the unseen head rows and save the transferred checkpoint.

        Args:
            lambda_: Overrides the configured regularization coefficient
            probe_mode: Overrides the configured probe source

        Returns:
            TransferResult with loss traces (also written to transfer_trace.csv)
        """
        config, forward, probes = self._transfer_inputs(lambda_, probe_mode)
        net, result = self._transfer(self.seen_network(), forward, probes, config)
        self._save_transfer(net, result, config)
        return result

    async def atransfer(self, lambda_: Optional[float] = None, probe_mode: Optional[str] = None) -> TransferResult:
        """
        Learn the unseen head rows asynchronously and save the transferred checkpoint.

        Args:
            lambda_: Overrides the configured regularization coefficient
            probe_mode: Overrides the configured probe source

        Returns:
            TransferResult, identical to :meth:`transfer`
        """
        config, forward, probes = self._transfer_inputs(lambda_, probe_mode)
        knowledge, _ = self.knowledge()
        expanded = self._expanded(self.seen_network())
        worker = WeightTransfer(expanded, config, self.config.threads)
        result = await worker.atransfer_weights(forward, [knowledge[c] for c in self.split.unseen], probes)
        self._save_transfer(apply_transfer(expanded, result), result, config)
        return result

    def _save_transfer(self, net: Network, result: TransferResult, config: TransferConfig) -> None:
        save_checkpoint(self.config.paths.resolve("transferred_checkpoint"), net, {
            "lambda": config.lambda_, "layer": config.layer, "probe_mode": config.probe_mode,
            "best_losses": {str(c): v for c, v in result.best_losses.items()},
        })
        write_trace_csv(self.path("transfer_trace.csv"), result.trace)

    def evaluate(self, label: str = "NIWT") -> GzslResult:
        path = self.config.require("transferred_checkpoint", "unseen head (transferred checkpoint; run transfer first)")
        net, _ = load_checkpoint(path, artifact="transferred checkpoint")
        return evaluate_gzsl(net, self.manifest, self.split, self.config.threads, label)

    def baseline(self) -> GzslResult:
        """Expanded head with randomly initialized unseen rows."""
        return evaluate_gzsl(self._expanded(self.seen_network()), self.manifest, self.split,
                             self.config.threads, "random unseen head")

    def skyline(self) -> GzslResult:
        """Unseen rows fitted on held-back unseen images (supervised upper reference)."""
        fitted, derived = train_unseen_skyline(self._expanded(self.seen_network()), self.manifest, self.split,
                                               seed=self.config.seed)
        return evaluate_gzsl(fitted, self.manifest, derived, self.config.threads, "supervised skyline")

    def eval_gzsl(self, with_reference: bool = False) -> Tuple[List[GzslResult], str]:
        transferred = self.evaluate()
        results = [self.baseline(), transferred]
        table = emit_report(results, self.out_dir, "metrics", with_reference)
        return results, table

    # ------------------------------------------------------------------
    # explanations

    def explain(self) -> Dict[str, Any]:
        """Grad-CAM maps, textual explanations, fidelity and neuron focus on unseen test images."""
        path = self.config.require("transferred_checkpoint", "unseen head (transferred checkpoint; run transfer first)")
        net, _ = load_checkpoint(path, artifact="transferred checkpoint")
        inverse = load_map(self.config.require("inverse_map", "a->K map (run fit-map first)"), artifact="a->K map")
        manifest, split, ec = self.manifest, self.split, self.config.explain
        layer = inverse.metadata.get("layer") or self.config.layer
        _, names = self.knowledge()

        ids = split.instances(Partition.TEST, split.unseen, manifest.labels)
        ids = [ids[i] for i in sorted(rng(self.config.seed, "explain").permutation(len(ids))[:ec.max_instances])]
        predictions = net.predict(manifest.images[ids])
        importances = [neuron_importance(net, layer, manifest.images[i], int(manifest.labels[i]), source=str(i))
                       for i in ids]
        truth = [set(manifest.class_specs[int(manifest.labels[i])].active) for i in ids]
        explanations = [
            textual_explanation(inverse, a, ec.k, names, class_id=a.class_id, instance_id=i)
            for a, i in zip(importances, ids)
        ]
        write_explanations_json(self.path("explanations.json"), explanations)
        summary: Dict[str, Any] = {
            "layer": layer,
            "instances": len(ids),
            "k": ec.k,
            "fidelity": explanation_fidelity(explanations, truth, ec.k),
            "fidelity_curve": {str(k): v for k, v in fidelity_curve(inverse, importances, truth).items()},
            "chance_fidelity": 100.0 * ec.k / inverse.out_dim,
        }

        if net.spec.layers[net.position(layer)].kind == CONV:
            correct = [i for i, p in zip(ids, predictions) if int(p) == int(manifest.labels[i])]
            heatmaps = [gradcam(net, layer, manifest.images[i], int(manifest.labels[i]), instance_id=i) for i in correct]
            boxes = [manifest.boxes_of(i) for i in correct]
            if heatmaps:
                summary["bbox_energy"] = float(np.mean([bbox_energy_fraction(h, b) for h, b in zip(heatmaps, boxes)]))
            if len(heatmaps) >= 2:
                summary["bbox_energy_shuffled"] = shuffled_energy_fraction(heatmaps, boxes, self.config.seed)
            for heatmap in heatmaps[:ec.heatmaps]:
                write_pgm(self.path(os.path.join("heatmaps", f"{heatmap.instance_id}_{heatmap.class_id}.pgm")), heatmap)
            write_heatmap_csv(self.path("heatmaps.csv"), heatmaps)
            summary["neuron_focus"] = neuron_focus(net, layer, manifest, inverse, ids)
        else:
            logger.warning(f"Layer {layer} is not convolutional; skipping Grad-CAM and neuron focus")
        write_json(self.path("explain_report.json"), summary)
        return summary

    # ------------------------------------------------------------------
    # sweeps and model selection

    def _layer_maps(self, net: Network, layer: str) -> Tuple[LinearMap, LinearMap]:
        vectors = self._importances(net, layer, self.split.seen, f"importance extraction at {layer}")
        return self._fit(self._pairs(vectors), self.split.heldout)

    def sweep_lambda(self) -> List[Dict[str, Any]]:
        """Unseen and seen accuracy for every λ of the sweep grid."""
        net = self.seen_network()
        forward = load_map(self.config.require("forward_map", "K->a map (run fit-map first)"))
        probes = self.probes()
        rows = []
        for lambda_ in self.config.sweep.lambdas:
            transferred, _ = self._transfer(net, forward, probes, replace(self.config.transfer, lambda_=lambda_))
            result = evaluate_gzsl(transferred, self.manifest, self.split, self.config.threads, f"lambda={lambda_:g}")
            rows.append({"lambda": lambda_, "acc_u": result.acc_unseen, "acc_s": result.acc_seen, "h": result.harmonic})
        write_csv(self.path("sweep_lambda.csv"), ("lambda", "acc_u", "acc_s", "h"), rows)
        write_json(self.path("sweep_lambda.json"), rows)
        return rows

    def sweep_noise(self) -> List[Dict[str, Any]]:
        """Recover the seen head from oracle importances at every noise level."""
        points = recover_seen_weights(
            self.seen_network(), self.manifest, self.split, self.config.sweep.noise_levels, self.config.transfer,
            self.probes(), iterations=self.config.sweep.recovery_iterations, threads=self.config.threads,
        )
        rows = [p.as_row() for p in points]
        write_csv(self.path("sweep_noise.csv"), ("epsilon", "accuracy", "original_accuracy", "chance"), rows)
        write_json(self.path("sweep_noise.json"), rows)
        return rows

    def sweep_layer(self) -> List[Dict[str, Any]]:
        """Full map fitting and transfer at every layer of the sweep."""
        net = self.seen_network()
        probes = self.probes()
        rows = []
        for layer in self.config.sweep.layers:
            forward, _ = self._layer_maps(net, layer)
            transferred, _ = self._transfer(net, forward, probes, replace(self.config.transfer, layer=layer))
            result = evaluate_gzsl(transferred, self.manifest, self.split, self.config.threads, layer)
            rows.append({"layer": layer, "acc_u": result.acc_unseen, "acc_s": result.acc_seen, "h": result.harmonic,
                         "map_rho": forward.best_validation_rho})
        write_csv(self.path("sweep_layer.csv"), ("layer", "acc_u", "acc_s", "h", "map_rho"), rows)
        write_json(self.path("sweep_layer.json"), rows)
        return rows

    def sweep_probes(self) -> List[Dict[str, Any]]:
        """Transfer with every probe source."""
        net = self.seen_network()
        forward = load_map(self.config.require("forward_map", "K->a map (run fit-map first)"))
        rows = []
        for mode in self.config.sweep.probe_modes:
            config = replace(self.config.transfer, probe_mode=mode)
            transferred, _ = self._transfer(net, forward, self.probes(mode, config.probe_count), config)
            result = evaluate_gzsl(transferred, self.manifest, self.split, self.config.threads, mode)
            rows.append({"probe_mode": mode, "acc_u": result.acc_unseen, "acc_s": result.acc_seen, "h": result.harmonic})
        write_csv(self.path("sweep_probes.csv"), ("probe_mode", "acc_u", "acc_s", "h"), rows)
        write_json(self.path("sweep_probes.json"), rows)
        return rows

    def validation_split(self) -> GzslSplit:
        """
        Held-out seen classes act as unseen; only train and val instances are used.

        Seen validation images become the test set of this split, so model
        selection never looks at test images.
        """
        split, labels = self.split, self.manifest.labels
        if not split.heldout:
            raise ConfigError("grid search needs held-out seen classes (benchmark.num_heldout >= 1)")
        pseudo_unseen, seen_classes = set(split.heldout), set(split.seen)
        assignment: Dict[int, Partition] = {}
        for i, partition in split.assignment.items():
            c = int(labels[i])
            if c not in seen_classes or partition is Partition.TEST:
                continue
            if c in pseudo_unseen:
                assignment[i] = Partition.TEST
            else:
                assignment[i] = Partition.TRAIN if partition is Partition.TRAIN else Partition.TEST
        seen = [c for c in split.seen if c not in pseudo_unseen]
        return GzslSplit(seen, sorted(pseudo_unseen), [], assignment)

    def grid_search(self) -> Dict[str, Any]:
        """
        Pick (λ, lr, batch) maximizing H on the validation split.

        A separate network is trained on the remaining seen classes and its
        map is fitted without the pseudo-unseen classes.

        Returns:
            The best setting plus every evaluated row (also in grid_search.csv)
        """
        tc = self.config.transfer
        val_split = self.validation_split()
        net, _ = self._train(val_split.seen, val_split, "grid-search training")
        vectors = self._importances(net, tc.layer, val_split.seen, "grid-search importances")
        generator = rng(self.config.seed, "grid_search")
        stop_classes = sorted(int(c) for c in generator.choice(val_split.seen, size=max(1, len(val_split.unseen)),
                                                              replace=False))
        forward, _ = self._fit(self._pairs(vectors), stop_classes)
        probes = self.probes()

        rows = []
        for lambda_, lr, batch in itertools.product(tc.grid_lambdas, tc.grid_lrs, tc.grid_batches):
            config = replace(tc, lambda_=lambda_, lr=lr, batch_size=batch)
            transferred, _ = self._transfer(net, forward, probes, config, split=val_split)
            result = evaluate_gzsl(transferred, self.manifest, val_split, self.config.threads)
            rows.append({"lambda": lambda_, "lr": lr, "batch_size": batch,
                         "acc_u": result.acc_unseen, "acc_s": result.acc_seen, "h": result.harmonic})
        write_csv(self.path("grid_search.csv"), ("lambda", "lr", "batch_size", "acc_u", "acc_s", "h"), rows)
        best = max(rows, key=lambda r: r["h"])
        logger.info(f"Grid search picked lambda={best['lambda']:g}, lr={best['lr']:g}, batch={best['batch_size']}")
        self.config.transfer = replace(tc, lambda_=best["lambda"], lr=best["lr"], batch_size=best["batch_size"])
        return {"best": best, "rows": rows}

    def run_all(self, with_reference: bool = False) -> Tuple[List[GzslResult], str]:
        """gen-data, train-seen, extract-importance, fit-map, transfer, eval-gzsl and explain in one go."""
        self.generate_data()
        self.train_seen()
        self.extract_importance()
        self.fit_maps()
        self.transfer()
        results = [self.baseline(), self.evaluate(), self.skyline()]
        table = emit_report(results, self.out_dir, "metrics", with_reference)
        self.explain()
        return results, table
