import numpy as np
import pytest

from autodiff import Tensor, grad_check
from niwt.errors import ConfigError, DegenerateRanksError, FormatError, ShapeError
from niwt.knowmap import (
    cosine_loss,
    fit_forward_map,
    fit_inverse_map,
    load_map,
    predict_importance,
    predict_knowledge,
    read_knowledge_csv,
    ridge_solution,
    save_map,
    write_knowledge_csv,
)
from niwt.model import build_network, linear_spec, save_checkpoint
from niwt.types import ImportanceVector, KnowledgeVector, LinearMap, MapDirection, Modality


def _cos(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def _linear_model(num_classes=30, d_k=8, d_a=12, per_class=2, seed=0):
    """Pairs drawn from an exact linear generative model a = M k."""
    generator = np.random.default_rng(seed)
    m = generator.normal(size=(d_a, d_k))
    knowledge = generator.normal(size=(num_classes, d_k))
    pairs = []
    for c in range(num_classes):
        k = KnowledgeVector(c, knowledge[c], Modality.TEXT_EMBEDDING)
        for i in range(per_class):
            pairs.append((ImportanceVector("conv3", c, m @ knowledge[c], f"{c}-{i}"), k))
    return m, knowledge, pairs


class TestCosineLoss:
    """Test the cosine-distance objective."""

    def test_scale_invariance(self):
        """Positive rescaling of targets or predictions leaves the loss unchanged."""
        generator = np.random.default_rng(1)
        pred, target = generator.normal(size=(5, 4)), generator.normal(size=(5, 4))
        base = cosine_loss(Tensor(pred), Tensor(target)).item()
        for k in (0.01, 3.0, 250.0):
            assert cosine_loss(Tensor(pred), Tensor(k * target)).item() == pytest.approx(base, rel=1e-10)
            assert cosine_loss(Tensor(k * pred), Tensor(target)).item() == pytest.approx(base, rel=1e-10)

    def test_range(self):
        """0 for collinear rows, 2 for opposite rows."""
        v = np.array([[1.0, 2.0, -1.0]])
        assert cosine_loss(Tensor(3 * v), Tensor(v)).item() == pytest.approx(0.0, abs=1e-12)
        assert cosine_loss(Tensor(-v), Tensor(v)).item() == pytest.approx(2.0)
        generator = np.random.default_rng(2)
        value = cosine_loss(Tensor(generator.normal(size=(10, 3))), Tensor(generator.normal(size=(10, 3)))).item()
        assert 0.0 <= value <= 2.0

    def test_gradient_matches_finite_differences(self):
        """Analytic gradient with respect to W agrees numerically."""
        from autodiff import ops

        generator = np.random.default_rng(3)
        x, target = Tensor(generator.normal(size=(6, 4))), Tensor(generator.normal(size=(6, 5)))
        w = Tensor(generator.normal(size=(5, 4)))
        report = grad_check(lambda w: cosine_loss(ops.matmul(x, ops.transpose(w)), target), [w])
        assert report.passed, report.max_rel_error


class TestFitForwardMap:
    """Test fitting W_{K->a}."""

    def test_recovers_linear_model(self):
        """Held-out classes of an exact linear model are ranked almost perfectly."""
        m, knowledge, pairs = _linear_model()
        heldout = [25, 26, 27, 28, 29]
        fitted = fit_forward_map(pairs, heldout, lr=1e-2, max_epochs=3000, patience=200, min_delta=1e-4, seed=0)
        assert fitted.direction is MapDirection.KNOWLEDGE_TO_IMPORTANCE
        assert fitted.matrix.shape == (12, 8)
        assert fitted.best_validation_rho >= 0.95
        assert fitted.heldout_classes == heldout
        assert fitted.metadata["layer"] == "conv3"
        for c in heldout:
            predicted = predict_importance(fitted, knowledge[c], c).values
            assert _cos(predicted, m @ knowledge[c]) >= 0.99

    def test_full_batch_loss_is_non_increasing(self):
        """Plain gradient descent with a small step never increases the training loss."""
        _, _, pairs = _linear_model(seed=4)
        fitted = fit_forward_map(pairs, [0, 1], lr=0.01, max_epochs=100, patience=1000, seed=1, optimizer="sgd",
                                 init="random")
        losses = fitted.metadata["train_losses"]
        assert len(losses) == 100
        assert all(b <= a + 1e-12 for a, b in zip(losses, losses[1:]))

    def test_early_stopping_keeps_best(self):
        """Training stops after ``patience`` epochs without improvement."""
        _, _, pairs = _linear_model(seed=5)
        fitted = fit_forward_map(pairs, [0, 1, 2], lr=1e-2, max_epochs=5000, patience=5, min_delta=0.5, seed=0)
        assert fitted.epochs < 5000
        rhos = fitted.metadata["val_rhos"]
        assert len(rhos) == fitted.epochs + 1
        assert fitted.best_validation_rho in rhos
        assert fitted.best_validation_rho >= rhos[0]

    def test_degenerate_targets(self):
        """Constant importance targets leave the validation correlation undefined."""
        pairs = [
            (ImportanceVector("conv3", c, np.ones(4), str(c)), KnowledgeVector(c, np.eye(3)[c % 3] + 0.1 * c))
            for c in range(6)
        ]
        with pytest.raises(DegenerateRanksError):
            fit_forward_map(pairs, [4, 5], max_epochs=3)

    def test_validation(self):
        """Empty pairs, all-held-out classes and mismatched pairs are rejected."""
        _, _, pairs = _linear_model(num_classes=3)
        with pytest.raises(ConfigError):
            fit_forward_map([], [])
        with pytest.raises(ConfigError):
            fit_forward_map(pairs, [0, 1, 2])
        swapped = [(pairs[0][0], pairs[2][1])]
        with pytest.raises(ConfigError):
            fit_forward_map(swapped, [])
        with pytest.raises(ConfigError):
            fit_forward_map(pairs, [0], optimizer="lbfgs")

    def test_ridge_start_already_ranks_heldout_classes(self):
        """The closed-form start generalizes before any descent step."""
        _, _, pairs = _linear_model(seed=7)
        fitted = fit_forward_map(pairs, [25, 26, 27, 28, 29], max_epochs=1, patience=1)
        assert fitted.metadata["init"] == "ridge"
        assert fitted.metadata["val_rhos"][0] >= 0.8
        random_start = fit_forward_map(pairs, [25, 26, 27, 28, 29], max_epochs=1, patience=1, init="random")
        assert fitted.metadata["val_rhos"][0] > random_start.metadata["val_rhos"][0]

    def test_constant_prediction_scores_zero(self):
        """A held-out class the map sends to a constant row counts as rho 0 instead of aborting the fit."""
        _, _, pairs = _linear_model(seed=8)
        importance = np.random.default_rng(8).normal(size=12)
        pairs.append((ImportanceVector("conv3", 30, importance, "30-0"), KnowledgeVector(30, np.zeros(8))))
        fitted = fit_forward_map(pairs, [29, 30], lr=1e-2, max_epochs=20, patience=20)
        rhos = fitted.metadata["val_rhos"]
        assert len(rhos) == 21 and np.all(np.isfinite(rhos))
        # class 30 contributes 0 to the mean over the two held-out classes
        assert max(rhos) <= 0.5 + 1e-12

    def test_unknown_init(self):
        """Only ridge and random starts exist."""
        _, _, pairs = _linear_model(num_classes=3)
        with pytest.raises(ConfigError):
            fit_forward_map(pairs, [0], init="zeros")
        with pytest.raises(ConfigError):
            fit_forward_map(pairs, [0], ridge=-1.0)


class TestRidgeSolution:
    """Test the closed-form least-squares start."""

    def test_recovers_exact_map(self):
        """Without a penalty a noiseless linear relation is recovered."""
        generator = np.random.default_rng(9)
        x, w = generator.normal(size=(20, 5)), generator.normal(size=(3, 5))
        matrix, offset = ridge_solution(x, x @ w.T, 0.0)
        np.testing.assert_allclose(matrix, w, atol=1e-8)
        assert offset is None

    def test_recovers_offset(self):
        """The unpenalized offset column absorbs a constant shift."""
        generator = np.random.default_rng(10)
        x, w, b = generator.normal(size=(30, 4)), generator.normal(size=(2, 4)), np.array([1.5, -0.5])
        matrix, offset = ridge_solution(x, x @ w.T + b, 0.0, bias=True)
        np.testing.assert_allclose(matrix, w, atol=1e-8)
        np.testing.assert_allclose(offset, b, atol=1e-8)

    def test_penalty_shrinks(self):
        """A larger penalty gives a smaller matrix norm."""
        generator = np.random.default_rng(11)
        x, y = generator.normal(size=(15, 4)), generator.normal(size=(15, 3))
        norms = [np.linalg.norm(ridge_solution(x, y, ridge)[0]) for ridge in (0.0, 0.1, 10.0)]
        assert norms[0] > norms[1] > norms[2]


class TestInverseMap:
    """Test fitting W_{a->K} and predictions in both directions."""

    def test_round_trip_through_both_maps(self):
        """predict_knowledge(predict_importance(k)) points along k."""
        _, knowledge, pairs = _linear_model(seed=6)
        heldout = [25, 26, 27, 28, 29]
        forward = fit_forward_map(pairs, heldout, lr=1e-2, max_epochs=3000, patience=200, min_delta=1e-4)
        inverse = fit_inverse_map(pairs, heldout, lr=1e-2, max_epochs=3000, patience=200, min_delta=1e-4)
        assert inverse.direction is MapDirection.IMPORTANCE_TO_KNOWLEDGE
        assert inverse.matrix.shape == (8, 12)
        for c in heldout:
            scores = predict_knowledge(inverse, predict_importance(forward, knowledge[c], c))
            assert _cos(scores, knowledge[c]) >= 0.95

    def test_identity_and_zero(self):
        """Identity maps return their input and zero inputs give zero outputs."""
        forward = LinearMap(np.eye(3), MapDirection.KNOWLEDGE_TO_IMPORTANCE)
        inverse = LinearMap(np.eye(3), MapDirection.IMPORTANCE_TO_KNOWLEDGE)
        k = np.array([0.5, -2.0, 1.0])
        np.testing.assert_array_equal(predict_importance(forward, k).values, k)
        np.testing.assert_array_equal(predict_knowledge(inverse, k), k)
        np.testing.assert_array_equal(predict_importance(forward, np.zeros(3)).values, np.zeros(3))
        np.testing.assert_array_equal(predict_knowledge(inverse, np.zeros(3)), np.zeros(3))

    def test_direction_and_dimension_checks(self):
        """Maps refuse the wrong direction or input size."""
        forward = LinearMap(np.eye(3), MapDirection.KNOWLEDGE_TO_IMPORTANCE)
        with pytest.raises(ConfigError):
            predict_knowledge(forward, np.ones(3))
        with pytest.raises(ShapeError):
            predict_importance(forward, np.ones(4))

    def test_predict_keeps_class_id(self):
        """A KnowledgeVector's class id is carried to the prediction."""
        forward = LinearMap(np.eye(2), MapDirection.KNOWLEDGE_TO_IMPORTANCE, metadata={"layer": "gap"})
        vector = predict_importance(forward, KnowledgeVector(7, [1.0, 2.0]))
        assert vector.class_id == 7 and vector.layer == "gap"


class TestMapStorage:
    """Test map files and knowledge CSVs."""

    def test_save_and_load(self, tmp_path):
        """Matrix, direction and metadata are restored."""
        linear = LinearMap(np.arange(6.0).reshape(2, 3), MapDirection.IMPORTANCE_TO_KNOWLEDGE,
                           heldout_classes=[3, 4], best_validation_rho=0.5, epochs=12, metadata={"layer": "conv2"})
        loaded = load_map(save_map(str(tmp_path / "m.niwt"), linear))
        np.testing.assert_array_equal(loaded.matrix, linear.matrix)
        assert loaded.direction is MapDirection.IMPORTANCE_TO_KNOWLEDGE
        assert loaded.heldout_classes == [3, 4] and loaded.epochs == 12
        assert loaded.metadata["layer"] == "conv2" and loaded.bias is None

    def test_wrong_container_kind(self, tmp_path):
        """A checkpoint is not a map."""
        path = save_checkpoint(str(tmp_path / "net.niwt"), build_network(linear_spec(2, 2), seed=0))
        with pytest.raises(FormatError):
            load_map(path)

    def test_knowledge_csv_with_names(self, tmp_path):
        """Header names are returned and binary rows are attributes."""
        vectors = [KnowledgeVector(1, [0.0, 1.0]), KnowledgeVector(0, [1.0, 1.0])]
        path = write_knowledge_csv(str(tmp_path / "k.csv"), vectors, ["red_circle", "blue_square"])
        loaded, names = read_knowledge_csv(path)
        assert names == ["red_circle", "blue_square"]
        assert [v.class_id for v in loaded] == [0, 1]
        assert loaded[0].modality is Modality.ATTRIBUTES

    def test_knowledge_csv_without_header(self, tmp_path):
        """Real-valued rows without a header are text embeddings with generated names."""
        path = tmp_path / "emb.csv"
        path.write_text("0,0.25,-1.5,2\n1,1,0,0.5\n", encoding="utf-8")
        loaded, names = read_knowledge_csv(str(path))
        assert names == ["k0", "k1", "k2"]
        assert loaded[0].modality is Modality.TEXT_EMBEDDING
        np.testing.assert_array_equal(loaded[0].values, [0.25, -1.5, 2.0])

    def test_knowledge_csv_errors(self, tmp_path):
        """Ragged rows and name-count mismatches are format errors."""
        ragged = tmp_path / "ragged.csv"
        ragged.write_text("0,1,0\n1,1\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_knowledge_csv(str(ragged))
        names = tmp_path / "names.csv"
        names.write_text("class_id,a\n0,1,0\n", encoding="utf-8")
        with pytest.raises(FormatError):
            read_knowledge_csv(str(names))
