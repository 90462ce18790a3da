import pytest

from particle_ebm import config
from particle_ebm.config import ConfigError, RunConfig


class TestParse:
    def test_minimal_defaults(self):
        cfg = config.parse_config_text("method: alpha\ntarget: ring8\nseed: 1\n")
        assert cfg.seed == 1
        assert cfg.n_particles == 1000 and cfg.batch_size == 256 and cfg.iterations == 5000
        assert cfg.particle_lr == 1.0
        assert cfg.correction_steps == 10
        assert cfg.optimizer.kind == "adam" and cfg.optimizer.lr == 1e-3
        assert cfg.model.hidden == 300 and cfg.model.n_layers == 2

    def test_method_dependent_defaults(self):
        g = config.parse_config_text("method: gamma\nkernel: {kind: rbf}\n")
        assert g.particle_lr == 0.5 and g.correction_steps == 0
        rb = config.parse_config_text("method: anneal-rb\nn_particles: 50\n")
        assert rb.buffer.capacity == 500

    def test_gamma_requires_kernel(self):
        with pytest.raises(ConfigError, match="kernel"):
            config.parse_config_text("method: gamma\n")

    def test_unknown_method_names_line(self):
        with pytest.raises(ConfigError, match="line 2") as info:
            config.parse_config_text("seed: 1\nmethod: delta\n")
        assert "delta" in str(info.value)

    def test_unknown_key(self):
        with pytest.raises(ConfigError, match="particle_rate"):
            config.parse_config_text("particle_rate: 0.1\n")

    def test_unknown_nested_key(self):
        with pytest.raises(ConfigError, match="optimizer"):
            config.parse_config_text("optimizer:\n  momentum: 0.9\n")

    def test_type_mismatch(self):
        with pytest.raises(ConfigError, match="n_particles"):
            config.parse_config_text("n_particles: many\n")

    def test_bool_is_not_int(self):
        with pytest.raises(ConfigError):
            config.parse_config_text("iterations: true\n")

    def test_invalid_target(self):
        with pytest.raises(ConfigError, match="target"):
            config.parse_config_text("target: moons\n")

    def test_malformed_yaml(self):
        with pytest.raises(ConfigError):
            config.parse_config_text("method: [alpha\n")

    def test_empty_file(self):
        assert config.parse_config_text("") == RunConfig().resolved()

    def test_round_trip(self):
        cfg = config.parse_config_text(
            "method: gamma\nkernel: {kind: ntk-averaged-init, n_draws: 3}\ntarget:\n  name: ring8\n  radius: 3.0\n"
        )
        assert config.parse_config_text(config.dump_config(cfg)) == cfg

    def test_from_file(self, tmp_path):
        p = tmp_path / "c.yaml"
        p.write_text("method: beta\nseed: 4\n")
        assert config.parse_config(p).method == "beta"
        with pytest.raises(OSError):
            config.parse_config(tmp_path / "missing.yaml")


class TestDigest:
    def test_ignores_seed_and_output(self):
        a = RunConfig(seed=1, output_dir="a")
        b = RunConfig(seed=2, output_dir="b")
        assert a.digest() == b.digest()

    def test_sensitive_to_settings(self):
        assert RunConfig().digest() != RunConfig(n_particles=999).digest()
