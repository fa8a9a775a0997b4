import numpy as np
import pytest

from autodiff import Graph, Tensor, no_grad, ops
from niwt.errors import ConfigError, DegenerateRanksError, FormatError, MissingArtifactError, ShapeError
from niwt.importance import (
    class_aggregate,
    correlation_report,
    correlation_report_from_vectors,
    importance_dataset,
    neuron_importance,
    rank_permutation_test,
    read_importance_csv,
    rowwise_spearman,
    spatial_mean,
    spearman,
    write_importance_csv,
)
from niwt.model import AVG_POOL, CONV, FC, GAP, LayerSpec, Network, NetworkSpec, build_network, default_spec, linear_spec, with_head
from niwt.types import CLASS_AGGREGATE, ImportanceVector


def _single_channel_net(spatial):
    spec = NetworkSpec((1, spatial, spatial), [
        LayerSpec(CONV, "conv1", 1, 1, kernel=1),
        LayerSpec(GAP, "gap"),
        LayerSpec(FC, "head", 1, 1),
    ])
    params = {
        "conv1.weight": Tensor(np.ones((1, 1, 1, 1)), requires_grad=True),
        "conv1.bias": Tensor(np.zeros(1), requires_grad=True),
        "head.weight": Tensor(np.ones((1, 1)), requires_grad=True),
        "head.bias": Tensor(np.zeros(1), requires_grad=True),
    }
    return Network(spec, params)


def _linear_conv_net(seed=0):
    """conv-pool-conv-gap-head without any relu."""
    spec = NetworkSpec((2, 8, 8), [
        LayerSpec(CONV, "conv1", 2, 4, kernel=3, pad=1),
        LayerSpec(AVG_POOL, size=2),
        LayerSpec(CONV, "conv2", 4, 5, kernel=3, pad=1),
        LayerSpec(GAP, "gap"),
        LayerSpec(FC, "head", 5, 3),
    ])
    return build_network(spec, seed)


class TestNeuronImportance:
    """Test the spatial-mean gradient definition of importance."""

    def test_mean_of_gradient_map(self):
        """The importance of a [[1, 2], [3, 4]] gradient map is 2.5."""
        grad = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]).reshape(1, 1, 2, 2))
        assert spatial_mean(grad).numpy()[0, 0] == pytest.approx(2.5)

    def test_gap_of_one_by_one_map(self):
        """o = GAP(a) of a single 1x1 channel gives importance 1 for any input."""
        net = _single_channel_net(1)
        for value in (-3.0, 0.5, 7.0):
            vector = neuron_importance(net, "conv1", np.full((1, 1, 1), value), 0)
            assert vector.values[0] == pytest.approx(1.0)

    def test_gap_spreads_over_cells(self):
        """With an HxW map each cell contributes 1/HW, so the mean gradient is 1/HW."""
        net = _single_channel_net(4)
        vector = neuron_importance(net, "conv1", np.random.default_rng(0).normal(size=(1, 4, 4)), 0)
        assert vector.values[0] == pytest.approx(1.0 / 16)

    def test_matches_finite_differences(self):
        """Importances equal the mean finite-difference gradient of the class score."""
        net = build_network(default_spec(4, (3, 8, 8)), seed=5)
        image = np.random.default_rng(5).normal(size=(3, 8, 8))
        class_id, layer, eps = 2, "conv2", 1e-6
        vector = neuron_importance(net, layer, image, class_id)
        activation = net.activation(image[None], layer)

        def score(a):
            with no_grad():
                return net.forward_from(Tensor(a), layer).numpy()[0, class_id]

        for channel in range(3):
            grads = []
            for i in range(activation.shape[2]):
                for j in range(activation.shape[3]):
                    plus, minus = activation.copy(), activation.copy()
                    plus[0, channel, i, j] += eps
                    minus[0, channel, i, j] -= eps
                    grads.append((score(plus) - score(minus)) / (2 * eps))
            assert vector.values[channel] == pytest.approx(np.mean(grads), rel=1e-4, abs=1e-9)

    def test_head_row_scaling(self):
        """Scaling w_c by k scales the importances by k and keeps their ranks."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=1)
        image = np.random.default_rng(1).normal(size=(3, 8, 8))
        weight, bias = net.head_weight.numpy(), net.head_bias.numpy()
        scaled = weight.copy()
        scaled[1] *= 3.0
        other = with_head(net, scaled, bias, net.class_ids)
        before = neuron_importance(net, "conv3", image, 1).values
        after = neuron_importance(other, "conv3", image, 1).values
        np.testing.assert_allclose(after, 3.0 * before, rtol=1e-10, atol=1e-14)
        assert spearman(before, after) == pytest.approx(1.0)

    def test_linear_decomposition_at_gap(self):
        """On GAP features with zero bias, sum_n alpha_n * gap_n equals the class score."""
        net = build_network(linear_spec(6, 4), seed=2)
        image = np.random.default_rng(2).normal(size=(6, 4, 4))
        features = net.activation(image[None], "gap")[0]
        for class_id in range(4):
            alpha = neuron_importance(net, "gap", image, class_id).values
            assert alpha @ features == pytest.approx(net.forward(image[None]).numpy()[0, class_id])

    def test_recorded_vector_is_differentiable(self):
        """With a graph the vector stays attached and depends on the head row."""
        net = build_network(linear_spec(3, 2), seed=0)
        image = np.random.default_rng(0).normal(size=(3, 4, 4))
        with Graph() as graph:
            vector = neuron_importance(net, "gap", image, 1, graph=graph)
            assert vector.tensor is not None
            total = ops.reduce_sum(vector.tensor)
            (grad,) = graph.backward(total, [net.head_weight], create_graph=False)
        np.testing.assert_allclose(grad.numpy(), [[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]])

    def test_errors(self):
        """Unknown layers and classes outside the head are rejected."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=0)
        image = np.zeros((3, 8, 8))
        with pytest.raises(ConfigError):
            neuron_importance(net, "fc7", image, 0)
        with pytest.raises(ConfigError):
            neuron_importance(net, "conv3", image, 5)
        with pytest.raises(ShapeError):
            neuron_importance(net, "conv3", np.zeros((2, 3, 8, 8)), 0)


class TestImportanceDataset:
    """Test per-instance importance extraction."""

    def test_one_vector_per_instance(self):
        """N instances give N vectors tagged with their ids."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=0, class_ids=[4, 6, 9])
        images = np.random.default_rng(0).normal(size=(5, 3, 8, 8))
        vectors = importance_dataset(net, "conv3", images, [4, 6, 9, 4, 6], instance_ids=[10, 11, 12, 13, 14],
                                     batch_size=2, threads=2)
        assert len(vectors) == 5
        assert [v.source for v in vectors] == ["10", "11", "12", "13", "14"]
        assert all(len(v) == 32 for v in vectors)

    def test_matches_single_extraction(self):
        """Batched extraction equals neuron_importance instance by instance."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=3)
        images = np.random.default_rng(3).normal(size=(3, 3, 8, 8))
        vectors = importance_dataset(net, "conv2", images, [0, 2, 1])
        for image, label, vector in zip(images, [0, 2, 1], vectors):
            np.testing.assert_allclose(vector.values, neuron_importance(net, "conv2", image, label).values,
                                       rtol=1e-12, atol=1e-15)

    def test_duplicate_instance(self):
        """The same image twice gives identical vectors."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=4)
        image = np.random.default_rng(4).normal(size=(3, 8, 8))
        a, b = importance_dataset(net, "conv3", np.stack([image, image]), [1, 1])
        np.testing.assert_array_equal(a.values, b.values)

    def test_linear_network_is_input_independent(self):
        """Without relu the importances do not depend on the input."""
        net = _linear_conv_net()
        images = np.random.default_rng(6).normal(size=(4, 2, 8, 8)) * np.array([1, 5, 0.1, 3])[:, None, None, None]
        vectors = importance_dataset(net, "conv1", images, [0, 0, 0, 0])
        for vector in vectors[1:]:
            np.testing.assert_allclose(vector.values, vectors[0].values, rtol=1e-10, atol=1e-14)

    def test_label_count_mismatch(self):
        """Images and labels must pair up."""
        net = build_network(default_spec(3, (3, 8, 8)), seed=0)
        with pytest.raises(ShapeError):
            importance_dataset(net, "conv3", np.zeros((2, 3, 8, 8)), [0])

    def test_class_aggregate(self):
        """Per-class means are tagged as class aggregates."""
        vectors = [
            ImportanceVector("conv3", 1, [1.0, 2.0], "0"),
            ImportanceVector("conv3", 1, [3.0, 4.0], "1"),
            ImportanceVector("conv3", 2, [5.0, 5.0], "2"),
        ]
        aggregated = class_aggregate(vectors)
        np.testing.assert_allclose(aggregated[1].values, [2.0, 3.0])
        assert aggregated[2].source == CLASS_AGGREGATE
        assert sorted(aggregated) == [1, 2]


class TestSpearman:
    """Test rank correlation."""

    def test_identical_and_reversed(self):
        """Identical vectors give 1 and reversed order gives -1."""
        assert spearman([1.0, 5.0, 2.0, 9.0], [1.0, 5.0, 2.0, 9.0]) == pytest.approx(1.0)
        assert spearman([1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]) == pytest.approx(-1.0)

    def test_hand_computed(self):
        """x=(2,1,3), y=(1,2,3) gives 0.5."""
        assert spearman([2.0, 1.0, 3.0], [1.0, 2.0, 3.0]) == pytest.approx(0.5)

    def test_ties_use_average_ranks(self):
        """Tied values share their average rank."""
        x, y = [1.0, 1.0, 2.0, 3.0], [1.0, 2.0, 3.0, 4.0]
        rx = np.array([1.5, 1.5, 3.0, 4.0]) - 2.5
        ry = np.array([1.0, 2.0, 3.0, 4.0]) - 2.5
        expected = rx @ ry / (np.linalg.norm(rx) * np.linalg.norm(ry))
        assert spearman(x, y) == pytest.approx(expected)

    def test_zero_variance_is_an_error(self):
        """Constant input has no defined rank correlation."""
        with pytest.raises(DegenerateRanksError):
            spearman([1.0, 1.0, 1.0], [1.0, 2.0, 3.0])

    def test_length_mismatch(self):
        """Vectors must have equal length of at least 2."""
        with pytest.raises(ShapeError):
            spearman([1.0, 2.0], [1.0, 2.0, 3.0])
        with pytest.raises(ShapeError):
            spearman([1.0], [1.0])

    def test_rowwise(self):
        """Row-wise correlation pairs rows in order."""
        predicted = np.array([[1.0, 2.0, 3.0], [3.0, 2.0, 1.0]])
        observed = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 3.0]])
        np.testing.assert_allclose(rowwise_spearman(predicted, observed), [1.0, -1.0])


class TestCorrelationReport:
    """Test within-class and cross-class correlation summaries."""

    def test_identical_vectors(self):
        """All-identical vectors give within = cross = 1."""
        v = np.array([1.0, 4.0, 2.0, 3.0])
        within, cross = correlation_report({0: [v, v], 1: [v, v, v]})
        assert within == pytest.approx(1.0)
        assert cross == pytest.approx(1.0)

    def test_class_prototypes(self):
        """Constant per-class vectors give within 1 and small cross correlation."""
        generator = np.random.default_rng(7)
        groups = {c: [generator.normal(size=64)] * 3 for c in range(30)}
        within, cross = correlation_report(groups, seed=1)
        assert within == pytest.approx(1.0)
        assert abs(cross) < 0.1

    def test_sampled_cross_pairs_are_seeded(self):
        """Sampling cross pairs is reproducible for a fixed seed."""
        generator = np.random.default_rng(8)
        groups = {c: list(generator.normal(size=(4, 10))) for c in range(6)}
        first = correlation_report(groups, cross_pairs=20, seed=3)
        second = correlation_report(groups, cross_pairs=20, seed=3)
        assert first == second

    def test_from_vectors(self):
        """Grouping ImportanceVectors by class matches the dict form."""
        generator = np.random.default_rng(9)
        values = generator.normal(size=(6, 8))
        vectors = [ImportanceVector("conv3", i % 2, values[i], str(i)) for i in range(6)]
        groups = {0: [values[0], values[2], values[4]], 1: [values[1], values[3], values[5]]}
        assert correlation_report_from_vectors(vectors) == correlation_report(groups)

    def test_degenerate_groups(self):
        """One class or singleton classes are rejected."""
        v = np.array([1.0, 2.0, 3.0])
        with pytest.raises(ConfigError):
            correlation_report({0: [v, v]})
        with pytest.raises(ConfigError):
            correlation_report({0: [v], 1: [v, v]})


class TestPermutationTest:
    """Test the row-shuffle permutation test."""

    def test_perfect_prediction(self):
        """Exact predictions beat almost every shuffle."""
        observed = np.random.default_rng(10).normal(size=(20, 12))
        result = rank_permutation_test(observed.copy(), observed, n_permutations=200, seed=0)
        assert result.observed == pytest.approx(1.0)
        assert result.p_value <= 0.02
        assert abs(result.null_mean) < 0.2

    def test_unrelated_prediction(self):
        """Independent predictions are not significant."""
        generator = np.random.default_rng(11)
        result = rank_permutation_test(generator.normal(size=(15, 10)), generator.normal(size=(15, 10)),
                                       n_permutations=200, seed=0)
        assert result.p_value > 0.01
        assert result.permutations == 200


class TestImportanceCsv:
    """Test the importance dump."""

    def test_write_and_read(self, tmp_path):
        """Values survive the dump exactly."""
        vectors = [ImportanceVector("conv3", 2, [0.1, -1e-9, 3.0], "5"), ImportanceVector("conv3", 4, [1.0, 2.0, 3.0], "8")]
        path = write_importance_csv(str(tmp_path / "imp.csv"), vectors)
        with open(path, encoding="utf-8") as f:
            assert f.readline().strip() == "instance_id,class_id,layer,n0,n1,n2"
        loaded = read_importance_csv(path)
        assert [v.class_id for v in loaded] == [2, 4]
        np.testing.assert_array_equal(loaded[0].values, vectors[0].values)
        assert loaded[1].source == "8"

    def test_bad_header(self, tmp_path):
        """A file without the expected header is a format error."""
        path = tmp_path / "bad.csv"
        path.write_text("a,b,c\n1,2,3\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_importance_csv(str(path))

    def test_missing(self, tmp_path):
        """A missing dump is a missing artifact."""
        with pytest.raises(MissingArtifactError):
            read_importance_csv(str(tmp_path / "none.csv"))
