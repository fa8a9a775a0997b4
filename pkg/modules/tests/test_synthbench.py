import json
import os

import numpy as np
import pytest

from niwt.errors import ConfigError, LeakageError, MissingArtifactError
from niwt.model import build_network, linear_spec
from niwt.synthbench import (
    MAX_ATTRIBUTES,
    attribute_names,
    audit_no_unseen_leak,
    class_normalized_accuracy,
    evaluate_gzsl,
    generate_dataset,
    glyph_of,
    harmonic_mean,
    load_dataset,
    sample_attribute_matrix,
    save_dataset,
    split_gzsl,
)
from niwt.types import Partition


@pytest.fixture(scope="module")
def small_manifest():
    return generate_dataset(num_classes=8, d_k=6, images_per_class=10, image_shape=(3, 16, 16), seed=4,
                            active_attributes=2)


class TestGlyphs:
    """Test the attribute to glyph mapping."""

    def test_injective(self):
        glyphs = {glyph_of(j) for j in range(MAX_ATTRIBUTES)}
        assert len(glyphs) == MAX_ATTRIBUTES

    def test_out_of_range(self):
        with pytest.raises(ConfigError):
            glyph_of(MAX_ATTRIBUTES)

    def test_names(self):
        assert attribute_names(2) == ["red_circle", "red_square"]


class TestAttributeMatrix:
    """Test sampling of class attribute vectors."""

    def test_distinct_rows_with_fixed_count(self):
        matrix = sample_attribute_matrix(20, 10, 3, seed=1)
        assert matrix.shape == (20, 10)
        assert np.all(matrix.sum(axis=1) == 3)
        assert len({tuple(row) for row in matrix}) == 20

    def test_seeded(self):
        np.testing.assert_array_equal(sample_attribute_matrix(10, 8, 2, 3), sample_attribute_matrix(10, 8, 2, 3))

    def test_infeasible(self):
        """Zero active attributes and more classes than nonzero patterns are rejected."""
        with pytest.raises(ConfigError):
            sample_attribute_matrix(3, 4, 0, seed=0)
        with pytest.raises(ConfigError):
            sample_attribute_matrix(8, 3, 1, seed=0)

    @pytest.mark.parametrize(
        "num_classes, d_k, active, counts",
        [
            (20, 5, 4, {4: 5, 3: 10, 5: 1, 2: 4}),
            (5, 4, 1, {1: 4, 2: 1}),
            (5, 3, 4, {3: 1, 2: 3, 1: 1}),
        ],
    )
    def test_variable_counts_when_fixed_count_runs_out(self, num_classes, d_k, active, counts):
        """Too few patterns at the requested count fill up from the nearest counts."""
        matrix = sample_attribute_matrix(num_classes, d_k, active, seed=2)
        assert matrix.shape == (num_classes, d_k)
        assert len({tuple(row) for row in matrix}) == num_classes
        sizes, frequency = np.unique(matrix.sum(axis=1).astype(int), return_counts=True)
        assert dict(zip(sizes.tolist(), frequency.tolist())) == counts

    def test_dataset_with_variable_counts(self):
        """A small vocabulary still renders one glyph box per active attribute."""
        manifest = generate_dataset(5, 3, 2, image_shape=(3, 12, 12), seed=0, active_attributes=4)
        assert manifest.attributes.shape == (5, 3)
        assert manifest.attributes.sum(axis=1).min() >= 1
        for record in manifest.records:
            active = set(np.flatnonzero(manifest.attributes[record.class_id]).tolist())
            assert {b.attribute for b in record.boxes} == active


class TestGenerateDataset:
    """Test procedural image rendering."""

    def test_shapes_and_labels(self, small_manifest):
        assert small_manifest.images.shape == (80, 3, 16, 16)
        assert list(small_manifest.labels[:10]) == [0] * 10
        assert small_manifest.num_classes == 8
        assert [r.instance_id for r in small_manifest.records] == list(range(80))

    def test_boxes_match_attributes(self, small_manifest):
        """Every image shows exactly the glyphs of its class, inside the canvas."""
        for record in small_manifest.records:
            active = set(np.flatnonzero(small_manifest.attributes[record.class_id]).tolist())
            assert {b.attribute for b in record.boxes} == active
            for box in record.boxes:
                assert 0 <= box.x0 < box.x1 <= 16 and 0 <= box.y0 < box.y1 <= 16

    def test_deterministic_across_threads(self):
        """Rendering in a pool produces the same pixels."""
        a = generate_dataset(4, 5, 3, image_shape=(3, 12, 12), seed=9, active_attributes=2)
        b = generate_dataset(4, 5, 3, image_shape=(3, 12, 12), seed=9, active_attributes=2, threads=3)
        np.testing.assert_array_equal(a.images, b.images)

    def test_two_classes_separable_by_color(self):
        """A red glyph class and a green glyph class differ in the mean red-minus-green channel."""
        attributes = np.zeros((2, 10))
        attributes[0, 0] = 1.0  # red circle
        attributes[1, 9] = 1.0  # green square
        manifest = generate_dataset(2, 10, 20, image_shape=(3, 32, 32), seed=2, attributes=attributes)
        score = (manifest.images[:, 0] - manifest.images[:, 1]).mean(axis=(1, 2))
        assert score[manifest.labels == 0].min() > score[manifest.labels == 1].max()

    def test_invalid_inputs(self):
        with pytest.raises(ConfigError):
            generate_dataset(4, 5, 2, image_shape=(1, 8, 8))
        with pytest.raises(ConfigError):
            generate_dataset(4, MAX_ATTRIBUTES + 1, 2)
        with pytest.raises(ConfigError):
            generate_dataset(2, 3, 2, attributes=np.ones((2, 3)))


class TestSplit:
    """Test the seen/unseen/held-out partition."""

    def test_partition(self, small_manifest):
        split = split_gzsl(small_manifest, num_unseen=2, num_heldout=1, seed=5)
        assert len(split.unseen) == 2 and len(split.seen) == 6
        assert set(split.seen).isdisjoint(split.unseen)
        assert set(split.heldout) <= set(split.seen)
        assert len(split.assignment) == len(small_manifest)
        for i in range(len(small_manifest)):
            if int(small_manifest.labels[i]) in split.unseen:
                assert split.assignment[i] is Partition.TEST
        train = split.instances(Partition.TRAIN, [split.seen[0]], small_manifest.labels)
        assert len(train) == 7

    def test_seeded(self, small_manifest):
        assert split_gzsl(small_manifest, 2, 1, 5).to_dict() == split_gzsl(small_manifest, 2, 1, 5).to_dict()

    def test_infeasible(self, small_manifest):
        with pytest.raises(ConfigError):
            split_gzsl(small_manifest, 0, 0, 1)
        with pytest.raises(ConfigError):
            split_gzsl(small_manifest, 6, 2, 1)

    def test_leak_audit(self, small_manifest):
        split = split_gzsl(small_manifest, 2, 0, 5)
        seen_ids = split.instances(Partition.TRAIN)
        audit_no_unseen_leak(split, small_manifest.labels, seen_ids, "training")
        unseen_id = int(np.flatnonzero(small_manifest.labels == split.unseen[0])[0])
        with pytest.raises(LeakageError, match="map fitting"):
            audit_no_unseen_leak(split, small_manifest.labels, seen_ids + [unseen_id], "map fitting")


class TestMetrics:
    """Test class-normalized accuracy and the harmonic mean."""

    def test_class_normalized(self):
        """Per-class accuracy is averaged, not pooled."""
        labels = [0, 0, 0, 0, 1]
        predictions = [0, 0, 0, 0, 0]
        assert class_normalized_accuracy(predictions, labels, [0, 1]) == pytest.approx(0.5)
        assert class_normalized_accuracy(predictions, labels, [0]) == 1.0

    def test_duplicating_a_class_changes_nothing(self):
        """Repeating every instance of one class leaves the class-normalized accuracy as it was."""
        labels = np.array([0, 0, 1, 1, 1, 2, 2])
        predictions = np.array([0, 1, 1, 2, 1, 2, 0])
        base = class_normalized_accuracy(predictions, labels, [0, 1, 2])
        ones = labels == 1
        repeated_labels = np.concatenate([labels] + [labels[ones]] * 3)
        repeated_predictions = np.concatenate([predictions] + [predictions[ones]] * 3)
        assert class_normalized_accuracy(repeated_predictions, repeated_labels, [0, 1, 2]) == pytest.approx(base)

    def test_class_without_instances(self):
        with pytest.raises(ConfigError):
            class_normalized_accuracy([0], [0], [0, 3])
        with pytest.raises(ConfigError):
            class_normalized_accuracy([0], [0], [])

    def test_harmonic_mean(self):
        assert harmonic_mean(0.5, 0.25) == pytest.approx(1.0 / 3.0)
        assert harmonic_mean(0.0, 0.0) == 0.0
        assert harmonic_mean(0.0, 0.9) == 0.0
        with pytest.raises(ConfigError):
            harmonic_mean(-0.1, 0.5)

    def test_evaluate_requires_unseen_rows(self, small_manifest):
        """Evaluating a seen-only head is a missing-prerequisite error."""
        split = split_gzsl(small_manifest, 2, 0, 5)
        net = build_network(linear_spec(3, 6, spatial=16), 0, class_ids=split.seen)
        with pytest.raises(MissingArtifactError):
            evaluate_gzsl(net, small_manifest, split)

    def test_evaluate_full_head(self, small_manifest):
        split = split_gzsl(small_manifest, 2, 0, 5)
        net = build_network(linear_spec(3, 8, spatial=16), 0, class_ids=split.seen + split.unseen)
        result = evaluate_gzsl(net, small_manifest, split, label="random")
        assert 0.0 <= result.acc_unseen <= 1.0 and 0.0 <= result.acc_seen <= 1.0
        assert result.harmonic == pytest.approx(harmonic_mean(result.acc_unseen, result.acc_seen))
        assert result.label == "random"


class TestPersistence:
    """Test dataset save and load."""

    def test_round_trip(self, small_manifest, tmp_path):
        small_manifest.split = split_gzsl(small_manifest, 2, 1, 5)
        path = save_dataset(str(tmp_path / "dataset.niwt"), small_manifest)
        loaded = load_dataset(path)
        np.testing.assert_array_equal(loaded.images, small_manifest.images)
        np.testing.assert_array_equal(loaded.labels, small_manifest.labels)
        assert loaded.records[3].boxes == small_manifest.records[3].boxes
        assert loaded.split.to_dict() == small_manifest.split.to_dict()
        with open(os.path.join(tmp_path, "split.json"), encoding="utf-8") as f:
            assert json.load(f)["unseen"] == small_manifest.split.unseen

    def test_missing(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            load_dataset(str(tmp_path / "absent.niwt"))


class TestMetricIdentities:
    """Test the harmonic mean against a published triple and its bounds."""

    def test_published_triple(self):
        assert 100 * harmonic_mean(0.353, 0.755) == pytest.approx(48.1, abs=0.05)

    def test_between_min_and_max(self):
        pairs = np.random.default_rng(0).uniform(0.0, 1.0, size=(100_000, 2))
        values = np.array([harmonic_mean(u, s) for u, s in pairs])
        assert np.all(values >= pairs.min(axis=1) - 1e-15)
        assert np.all(values <= pairs.max(axis=1) + 1e-15)
