import numpy as np
import pytest

from niwt import storage
from niwt.errors import FormatError, MissingArtifactError


def _container():
    return storage.Container(
        "checkpoint",
        {"b": np.arange(3.0), "a": np.array([[1.5, -2.0], [np.pi, 0.0]]), "s": np.array(4.0)},
        {"class_ids": [3, 1], "note": "x"},
    )


class TestContainer:
    """Test the binary tensor container."""

    def test_bit_exact(self):
        loaded = storage.loads(storage.dumps(_container()))
        assert loaded.kind == "checkpoint"
        assert loaded.meta == {"class_ids": [3, 1], "note": "x"}
        for name, array in _container().tensors.items():
            assert loaded.tensors[name].shape == array.shape
            assert loaded.tensors[name].tobytes() == array.astype("<f8").tobytes()

    def test_deterministic_bytes(self):
        """Tensor order and header keys are canonical."""
        first = _container()
        second = storage.Container("checkpoint", dict(reversed(list(first.tensors.items()))), dict(first.meta))
        assert storage.dumps(first) == storage.dumps(second)

    def test_preamble(self):
        blob = storage.dumps(_container())
        assert blob[:4] == b"NIWT"
        assert int.from_bytes(blob[4:8], "little") == storage.VERSION

    def test_corruption(self):
        blob = storage.dumps(_container())
        with pytest.raises(FormatError):
            storage.loads(b"XXXX" + blob[4:])
        with pytest.raises(FormatError):
            storage.loads(blob[:10])
        with pytest.raises(FormatError):
            storage.loads(blob[:-8])
        with pytest.raises(FormatError):
            storage.loads(blob[:4] + (99).to_bytes(4, "little") + blob[8:])


class TestFiles:
    """Test saving and loading container files."""

    def test_save_load(self, tmp_path):
        path = storage.save(str(tmp_path / "nested" / "c.niwt"), _container())
        loaded = storage.load(path, expected_kind="checkpoint")
        np.testing.assert_array_equal(loaded.tensors["a"], _container().tensors["a"])

    def test_missing_names_artifact(self, tmp_path):
        with pytest.raises(MissingArtifactError, match="forward map"):
            storage.load(str(tmp_path / "map.niwt"), artifact="forward map")

    def test_wrong_kind(self, tmp_path):
        path = storage.save(str(tmp_path / "c.niwt"), _container())
        with pytest.raises(FormatError):
            storage.load(path, expected_kind="map")
