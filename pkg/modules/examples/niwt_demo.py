#!/usr/bin/env python3
import os, sys, asyncio
sys.path.insert(0, os.path.join(os.path.dirname(os.path.abspath(__file__)), ".."))

from niwt import NiwtPipeline, load_config
from niwt.explain import textual_explanation
from niwt.knowmap import load_map, predict_importance
from niwt.report import format_table


def small_config(out_dir: str):
    return load_config(overrides={
        "seed": 3,
        "threads": 2,
        "paths": {"out_dir": out_dir},
        "benchmark": {"num_classes": 12, "d_k": 8, "active_attributes": 3, "images_per_class": 20,
                      "num_unseen": 3, "num_heldout": 2},
        "train": {"epochs": 3},
        "map": {"max_epochs": 60},
        "transfer": {"probe_count": 64, "max_iterations": 40, "layer": "conv3"},
    }, use_env=False)


def demo_stages(pipeline: NiwtPipeline):
    print("Generating the synthetic benchmark...")
    manifest = pipeline.generate_data()
    print(f"{len(manifest)} images, attributes: {', '.join(manifest.attribute_names)}")

    print("Training on seen classes...")
    _, report = pipeline.train_seen()
    print("Epoch losses:", [round(v, 3) for v in report.epoch_losses])

    print("Importances and maps...")
    print(pipeline.extract_importance())
    print(pipeline.fit_maps())

    forward = load_map(pipeline.config.paths.resolve("forward_map"))
    inverse = load_map(pipeline.config.paths.resolve("inverse_map"))
    _, names = pipeline.knowledge()
    unseen = pipeline.split.unseen[0]
    predicted = predict_importance(forward, manifest.knowledge(unseen), unseen)
    explanation = textual_explanation(inverse, predicted, 3, names)
    print(f"Class {unseen} described by its own predicted importance:", explanation.ranked)


def demo_transfer(pipeline: NiwtPipeline):
    print("Transferring unseen weights (sync)...")
    result = pipeline.transfer()
    print("Best losses:", {c: round(v, 4) for c, v in result.best_losses.items()})

    async def run_async_transfer():
        print("Transferring unseen weights (async)...")
        again = await pipeline.atransfer()
        print("Same rows as sync:", all((again.rows[c] == result.rows[c]).all() for c in result.rows))

    asyncio.run(run_async_transfer())

    results, _ = pipeline.eval_gzsl()
    print(format_table(results, "Generalized zero-shot accuracy"))


if __name__ == "__main__":
    pipeline = NiwtPipeline(small_config("runs/demo"))
    demo_stages(pipeline)
    demo_transfer(pipeline)
