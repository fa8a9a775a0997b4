import json
import os

import pytest

from niwt.config import RunConfig, load_config
from niwt.errors import ConfigError, MissingArtifactError


@pytest.fixture(autouse=True)
def clean_env(monkeypatch, tmp_path):
    """No stray NIWT_* variables or .env file."""
    for key in list(os.environ):
        if key.startswith("NIWT_"):
            monkeypatch.delenv(key)
    monkeypatch.chdir(tmp_path)


class TestDefaults:
    """Test the pinned default configuration."""

    def test_defaults(self):
        config = load_config()
        assert config.seed == 7
        assert config.transfer.lambda_ == 1e-4
        assert config.transfer.layer == "conv3"
        assert config.transfer.probe_mode == "generic"
        assert config.benchmark.num_classes == 50
        assert config.transfer.seed == config.seed

    def test_hash_is_stable(self):
        assert load_config().config_hash() == load_config().config_hash()
        assert load_config(overrides={"seed": 8}).config_hash() != load_config().config_hash()


class TestSources:
    """Test the file < environment < override precedence."""

    def test_toml_file(self, tmp_path):
        path = tmp_path / "run.toml"
        path.write_text('seed = 3\n[transfer]\nlambda = 0.01\nlayer = "conv2"\n[sweep]\nlambdas = [0, 1]\n')
        config = load_config(str(path))
        assert config.seed == 3
        assert config.transfer.lambda_ == 0.01
        assert config.transfer.layer == "conv2"
        assert config.sweep.lambdas == [0.0, 1.0]
        assert config.transfer.seed == 3

    def test_shipped_config(self):
        """The repository's config.toml parses on every supported interpreter."""
        path = os.path.join(os.path.dirname(__file__), "..", "..", "config.toml")
        config = load_config(path)
        assert config.seed == 7
        assert config.transfer.layer == "conv3"
        assert config.map.init == "ridge"
        assert config.benchmark.d_k == 16

    def test_json_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"threads": 2, "map": {"optimizer": "sgd"}}))
        config = load_config(str(path))
        assert config.threads == 2
        assert config.map.optimizer == "sgd"

    def test_environment(self, monkeypatch):
        monkeypatch.setenv("NIWT_SEED", "21")
        monkeypatch.setenv("NIWT_LAYER", "gap")
        config = load_config()
        assert config.seed == 21
        assert config.transfer.layer == "gap"
        assert load_config(use_env=False).seed == 7

    def test_dotenv(self, tmp_path):
        (tmp_path / ".env").write_text("NIWT_THREADS=3\n")
        try:
            assert load_config().threads == 3
        finally:
            os.environ.pop("NIWT_THREADS", None)

    def test_overrides_win(self, tmp_path, monkeypatch):
        path = tmp_path / "run.json"
        path.write_text(json.dumps({"seed": 3}))
        monkeypatch.setenv("NIWT_SEED", "4")
        config = load_config(str(path), {"seed": 5, "transfer": {"lambda": 0.5}})
        assert config.seed == 5
        assert config.transfer.lambda_ == 0.5
        assert config.transfer.seed == 5


class TestValidation:
    """Test rejection of invalid settings."""

    @pytest.mark.parametrize(
        "overrides",
        [
            {"transfer": {"lambda": -1.0}},
            {"transfer": {"layer": "fc7"}},
            {"transfer": {"probe_mode": "imagenet"}},
            {"benchmark": {"num_unseen": 40, "num_heldout": 10}},
            {"benchmark": {"train_fraction": 0.9}},
            {"threads": 0},
            {"sweep": {"lambdas": []}},
            {"map": {"optimizer": "lbfgs"}},
            {"map": {"init": "zeros"}},
            {"benchmark": {"active_attributes": 0}},
            {"explain": {"k": 100}},
        ],
    )
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            load_config(overrides=overrides)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="transfer.momentum"):
            load_config(overrides={"transfer": {"momentum": 0.9}})

    def test_bad_value(self):
        with pytest.raises(ConfigError):
            load_config(overrides={"seed": "seven"})

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_config(str(tmp_path / "absent.toml"))

    def test_unparsable_file(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{seed: ")
        with pytest.raises(ConfigError):
            load_config(str(path))


class TestPaths:
    """Test artifact path resolution."""

    def test_resolve(self, tmp_path):
        config = RunConfig()
        config.paths.out_dir = str(tmp_path)
        assert config.paths.resolve("dataset") == os.path.join(str(tmp_path), "dataset.niwt")
        config.paths.forward_map = "/abs/map.niwt"
        assert config.paths.resolve("forward_map") == "/abs/map.niwt"
        assert config.paths.resolve("knowledge_csv") == ""

    def test_require(self, tmp_path):
        config = RunConfig()
        config.paths.out_dir = str(tmp_path)
        with pytest.raises(MissingArtifactError, match="seen checkpoint"):
            config.require("seen_checkpoint", "seen checkpoint")
        (tmp_path / "seen.niwt").write_bytes(b"")
        assert config.require("seen_checkpoint", "seen checkpoint").endswith("seen.niwt")
