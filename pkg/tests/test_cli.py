import csv
import json

import numpy as np
import pytest
from PIL import Image

from particle_ebm import cli, config, metrics, trainer
from particle_ebm.metrics import GridSpec

SMALL = """\
method: {method}
seed: {seed}
iterations: {iterations}
n_particles: 40
batch_size: 20
n_data: 100
burn_in_steps: 3
log_interval: 2
langevin_steps: 2
model: {{hidden: 8}}
metrics: {{grid: [30, 30], gamma_grid: [12, 12]}}
"""


def small_cfg(method="alpha", seed=0, iterations=4, extra=""):
    return config.parse_config_text(SMALL.format(method=method, seed=seed, iterations=iterations) + extra)


@pytest.fixture
def root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUTPUT_ROOT_ENV, str(tmp_path / "out"))
    return tmp_path / "out"


class TestRun:
    def test_artifacts(self, root):
        art = cli.run(small_cfg())
        assert art.run_dir.parent == root
        assert art.run_dir.name.startswith("alpha-") and art.run_dir.name.endswith("-s0")
        for _, path in art.manifest:
            assert path.exists()
        roles = {r for r, _ in art.manifest}
        assert {"metrics", "particles", "energy_grid", "density_grid", "heatmap", "checkpoint", "resolved_config"} <= roles
        manifest = json.loads((art.run_dir / "manifest.json").read_text())
        assert manifest["complete"]

    def test_metrics_schema(self, root):
        art = cli.run(small_cfg(iterations=5))
        with open(art.paths("metrics")[0]) as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == trainer.METRIC_COLUMNS
        assert [int(r[0]) for r in rows[1:]] == [0, 2, 4, 5]

    def test_zero_iterations(self, root):
        art = cli.run(small_cfg(iterations=0))
        table = cli.read_metrics(art.paths("metrics")[0])
        np.testing.assert_array_equal(table["iteration"], [0])
        assert len(art.paths("checkpoint")) == 1

    def test_checkpoint_round_trip(self, root):
        art = cli.run(small_cfg())
        cfg, theta = cli.read_checkpoint(art.paths("checkpoint")[0])
        assert cfg == small_cfg()
        state = trainer.train(trainer.init_state(small_cfg()))
        np.testing.assert_array_equal(theta, state.theta)

    def test_resolved_config_has_all_defaults(self, root):
        art = cli.run(small_cfg())
        text = (art.run_dir / "config.yaml").read_text()
        assert "particle_lr: 1.0" in text and "correction_steps: 10" in text

    def test_density_grid_normalized(self, root):
        art = cli.run(small_cfg())
        values, grid = metrics.read_grid(art.paths("density_grid")[0])
        mass = np.exp(metrics.log_partition_from_values(-np.log(values), grid))
        assert mass == pytest.approx(1.0, rel=1e-12)

    def test_no_overwrite(self, root):
        a = cli.run(small_cfg())
        b = cli.run(small_cfg())
        assert b.run_dir.name == a.run_dir.name + "-v2"

    def test_byte_identical_metrics(self, root):
        a = cli.run(small_cfg(method="beta"))
        b = cli.run(small_cfg(method="beta"))
        assert a.paths("metrics")[0].read_bytes() == b.paths("metrics")[0].read_bytes()
        assert a.paths("heatmap")[0].read_bytes() == b.paths("heatmap")[0].read_bytes()

    @pytest.mark.parametrize("method,extra", [("gamma", "kernel: {kind: rbf}\n"), ("pcd", ""), ("anneal-rb", "")])
    def test_other_methods(self, root, method, extra):
        art = cli.run(small_cfg(method=method, extra=extra))
        assert art.paths("heatmap")[0].exists()

    def test_divergence_marker(self, root, monkeypatch):
        def explode(state):
            raise cli.DivergenceError(0, "non-finite particle")

        monkeypatch.setattr(trainer, "train_step", explode)
        with pytest.raises(cli.DivergenceError):
            cli.run(small_cfg())
        (run_dir,) = root.iterdir()
        assert (run_dir / "ERROR").exists()
        assert (run_dir / "metrics.csv").read_text().count("\n") == 2
        assert not json.loads((run_dir / "manifest.json").read_text())["complete"]


class TestSweep:
    def test_single_seed(self, root):
        s = cli.run_sweep(small_cfg(), [3], workers=1)
        single = cli.read_metrics(next(iter(s.runs.values())) + "/metrics.csv")
        agg = cli.read_metrics(s.aggregate)
        for c in trainer.METRIC_COLUMNS:
            np.testing.assert_array_equal(agg[c], single[c])

    def test_mean_over_seeds(self, root):
        s = cli.run_sweep(small_cfg(method="beta"), [0, 1, 2], workers=1)
        per_seed = [cli.read_metrics(p + "/metrics.csv") for p in s.runs.values()]
        assert len({t["mmd2_rbf_biased"].tobytes() for t in per_seed}) == 3
        agg = cli.read_metrics(s.aggregate)
        expected = np.mean([t["mmd2_rbf_biased"] for t in per_seed], axis=0)
        np.testing.assert_allclose(agg["mmd2_rbf_biased"], expected, rtol=1e-15)

    def test_duplicate_seeds(self, root):
        cli.run_sweep(small_cfg(), [5, 5], workers=1)
        dirs = sorted(p for p in root.iterdir() if p.name.endswith(("-s5", "-s5-v2")))
        assert len(dirs) == 2
        assert (dirs[0] / "metrics.csv").read_bytes() == (dirs[1] / "metrics.csv").read_bytes()

    def test_failures_recorded(self, root, monkeypatch):
        real = trainer.train_step

        def flaky(state):
            if state.config.seed == 1:
                raise cli.DivergenceError(0, "boom")
            return real(state)

        monkeypatch.setattr(trainer, "train_step", flaky)
        s = cli.run_sweep(small_cfg(), [0, 1], workers=1)
        assert list(s.runs) == [0] and list(s.failures) == [1]
        assert s.aggregate.exists()

    def test_no_seeds(self, root):
        with pytest.raises(ValueError):
            cli.run_sweep(small_cfg(), [])


def grid_file(path, values, grid):
    metrics.write_grid(path, values, grid)
    return path


class TestRender:
    def test_constant_grid_uniform(self, tmp_path):
        g = GridSpec(0, 1, 0, 1, nx=4, ny=3)
        out = cli.render_heatmap(grid_file(tmp_path / "g", np.full((3, 4), 2.5), g), tmp_path / "a.png")
        img = np.asarray(Image.open(out))
        assert len(np.unique(img.reshape(-1, 3), axis=0)) == 1

    def test_brightest_block(self, tmp_path):
        g = GridSpec(0, 1, 0, 1, nx=2, ny=2)
        values = np.zeros((2, 2))
        values[0, 1] = 1.0  # y = ymin, x = xmax: bottom right once y points up
        img = np.asarray(Image.open(cli.render_heatmap(grid_file(tmp_path / "g", values, g), tmp_path / "a.png")))
        lum = img.astype(float).sum(axis=2)
        h, w = lum.shape
        blocks = lum.reshape(2, h // 2, 2, w // 2).mean(axis=(1, 3))
        assert np.unravel_index(blocks.argmax(), blocks.shape) == (1, 1)
        assert lum[h - 1, w - 1] == lum.max()

    def test_colormap_monotone_in_lightness(self):
        rgb = cli._to_rgb(np.linspace(0, 1, 50)[None, :])[0].astype(float)
        lum = rgb @ [0.2126, 0.7152, 0.0722]
        assert np.all(np.diff(lum) >= 0)

    def test_deterministic(self, tmp_path, rng):
        g = GridSpec(-1, 1, -1, 1, nx=7, ny=5)
        path = grid_file(tmp_path / "g", rng.standard_normal((5, 7)), g)
        pts = rng.uniform(-1, 1, (20, 2))
        a = cli.render_heatmap(path, tmp_path / "a.png", particles=pts).read_bytes()
        b = cli.render_heatmap(path, tmp_path / "b.png", particles=pts).read_bytes()
        assert a == b

    def test_malformed(self, tmp_path):
        (tmp_path / "g").write_text("2 2 0 1 0 1\n1 2\n")
        with pytest.raises(ValueError):
            cli.render_heatmap(tmp_path / "g", tmp_path / "a.png")


class TestMain:
    def write(self, tmp_path, text):
        p = tmp_path / "c.yaml"
        p.write_text(text)
        return str(p)

    def test_validate(self, tmp_path, capsys):
        assert cli.main(["validate", self.write(tmp_path, "method: beta\n")]) == 0
        assert "method: beta" in capsys.readouterr().out

    def test_config_error(self, tmp_path, capsys):
        assert cli.main(["validate", self.write(tmp_path, "method: gamma\n")]) == 2
        assert "kernel" in capsys.readouterr().err

    def test_missing_file(self, tmp_path):
        assert cli.main(["run", str(tmp_path / "nope.yaml")]) == 4

    def test_run_and_render(self, tmp_path, root, capsys):
        text = SMALL.format(method="alpha", seed=0, iterations=2)
        assert cli.main(["run", self.write(tmp_path, text)]) == 0
        run_dir = capsys.readouterr().out.strip().splitlines()[-1]
        out = tmp_path / "r.png"
        argv = ["render", f"{run_dir}/density.grid", str(out), "--particles", f"{run_dir}/particles_final.csv"]
        assert cli.main(argv) == 0
        assert out.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_sweep(self, tmp_path, root, capsys):
        text = SMALL.format(method="alpha", seed=0, iterations=2)
        assert cli.main(["sweep", self.write(tmp_path, text), "--seeds", "1,2", "--workers", "1"]) == 0
        assert "aggregate:" in capsys.readouterr().out

    def test_bad_seeds(self, tmp_path, root):
        assert cli.main(["sweep", self.write(tmp_path, "method: alpha\n"), "--seeds", "a,b"]) == 2

    def test_divergence_exit(self, tmp_path, root, monkeypatch):
        def explode(state):
            raise cli.DivergenceError(0, "boom")

        monkeypatch.setattr(trainer, "train_step", explode)
        text = SMALL.format(method="alpha", seed=0, iterations=2)
        assert cli.main(["run", self.write(tmp_path, text)]) == 3
