"""Tests for diffusion module."""

import json
import struct

import numpy as np
import pytest

from sketchstack.config import ConfigError
from sketchstack.diffusion import (
    ArchConfig,
    CheckpointError,
    DenoiserData,
    DenoiserModel,
    OptimConfig,
    ShapeError,
    TrainingDiverged,
    ancestral_step,
    cosine_schedule,
    forward_noise,
    grad_check,
    load_checkpoint,
    load_models,
    sample_single,
    save_checkpoint,
    train_denoiser,
)
from sketchstack.layers import sigmoid
from sketchstack.relations import ArityError

TINY_FIXED = ArchConfig(mode="fixed", slots=2, hidden=8, time_hidden=16, steps_T=10)
TINY_VARIADIC = ArchConfig(
    mode="variadic", slots=4, hidden=8, time_hidden=16, heads=2, blocks=1, steps_T=10
)


def batch(arch: ArchConfig, n: int = 3, seed: int = 0):
    rng = np.random.default_rng(seed)
    p0 = rng.standard_normal((n, arch.slots, 3))
    g = rng.uniform(0.1, 0.5, size=(n, arch.slots, arch.geom_dim))
    mask = np.ones((n, arch.slots), dtype=bool)
    if arch.mode == "variadic":
        mask[0, -1] = False
    eps = rng.standard_normal(p0.shape)
    return p0, g, mask, eps


def constant_data(arch: ArchConfig, n: int = 64) -> DenoiserData:
    p = np.tile(np.array([[-0.2, 0.0, 0.1], [0.2, 0.0, 0.1]]), (n, 1, 1))
    g = np.full((n, 2, arch.geom_dim), 0.2)
    return DenoiserData(g, p, np.ones((n, 2), dtype=bool))


class TestSchedule:
    """Tests for cosine_schedule and forward_noise."""

    def test_monotone(self):
        """Should start at full signal and decrease strictly."""
        sched = cosine_schedule(50)
        assert sched.alpha_bar[0] == pytest.approx(1.0)
        assert np.all(np.diff(sched.alpha_bar) < 0)
        assert sched.beta[0] == 0.0
        assert np.all((sched.beta[1:] > 0) & (sched.beta[1:] <= 0.999))

    def test_needs_a_step(self):
        """Should reject T < 1."""
        with pytest.raises(ConfigError):
            cosine_schedule(0)

    def test_level_zero_is_clean(self):
        """Should return the clean pose at t=0."""
        sched = cosine_schedule(10)
        p0 = np.ones((2, 3))
        np.testing.assert_allclose(forward_noise(p0, 0, np.zeros((2, 3)), sched), p0)

    def test_per_sample_levels(self):
        """Should broadcast one level per batch entry."""
        sched = cosine_schedule(10)
        p0 = np.ones((2, 1, 3))
        eps = np.zeros((2, 1, 3))
        out = forward_noise(p0, np.array([0, 10]), eps, sched)
        np.testing.assert_allclose(out[0], 1.0)
        np.testing.assert_allclose(out[1], np.sqrt(sched.alpha_bar[10]))

    def test_shape_mismatch(self):
        """Should raise ShapeError when noise and poses differ in shape."""
        with pytest.raises(ShapeError):
            forward_noise(np.zeros((2, 3)), 1, np.zeros((3, 3)), cosine_schedule(5))


class TestArchConfig:
    """Tests for ArchConfig."""

    def test_presets(self):
        """Should read the preset and let explicit keys override it."""
        arch = ArchConfig.from_config({"preset": "full"})
        assert (arch.hidden, arch.steps_T) == (256, 1500)
        arch = ArchConfig.from_config({"preset": "desk", "T": 50}, mode="variadic", slots=6)
        assert (arch.steps_T, arch.mode, arch.slots) == (50, "variadic", 6)

    def test_unknown_preset(self):
        """Should reject unknown presets."""
        with pytest.raises(ConfigError, match="Unknown diffusion preset"):
            ArchConfig.from_config({"preset": "huge"})

    def test_invalid_values(self):
        """Should reject an unknown mode and an odd width."""
        with pytest.raises(ConfigError):
            ArchConfig(mode="graph")
        with pytest.raises(ConfigError):
            ArchConfig(hidden=7)

    def test_optim_from_config(self):
        """Should keep only optimizer keys."""
        opt = OptimConfig.from_config({"steps": 5, "lr": 0.01, "preset": "desk"})
        assert (opt.steps, opt.lr, opt.batch_size) == (5, 0.01, 128)


class TestDenoiserData:
    """Tests for DenoiserData."""

    def test_shape_checks(self):
        """Should reject inconsistent arrays."""
        with pytest.raises(ShapeError):
            DenoiserData(np.zeros((4, 2, 3)), np.zeros((4, 2, 2)), np.ones((4, 2)))
        with pytest.raises(ShapeError):
            DenoiserData(np.zeros((4, 2, 3)), np.zeros((4, 2, 3)), np.ones((4, 3)))


class TestDenoiserModel:
    """Tests for DenoiserModel forward and backward."""

    @pytest.mark.parametrize("arch", [TINY_FIXED, TINY_VARIADIC])
    def test_output_shape(self, arch):
        """Should predict one noise vector per slot."""
        model = DenoiserModel("rel", arch, np.random.default_rng(0))
        p0, g, mask, _ = batch(arch)
        out = model.forward(p0, g, np.array([1, 5, 10]), mask)
        assert out.shape == p0.shape
        if arch.mode == "variadic":
            assert np.all(out[0, -1] == 0)

    def test_variadic_accepts_fewer_slots(self):
        """Should run a variadic model on fewer slots than its capacity."""
        model = DenoiserModel("rel", TINY_VARIADIC, np.random.default_rng(0))
        out = model.forward(np.zeros((1, 3, 3)), np.full((1, 3, 3), 0.2), np.array([4]))
        assert out.shape == (1, 3, 3)

    def test_too_many_slots(self):
        """Should raise ArityError beyond the slot capacity."""
        model = DenoiserModel("rel", TINY_VARIADIC, np.random.default_rng(0))
        with pytest.raises(ArityError):
            model.forward(np.zeros((1, 5, 3)), np.zeros((1, 5, 3)), np.array([1]))

    def test_fixed_needs_exact_slots(self):
        """Should raise ArityError when a fixed model gets the wrong count."""
        model = DenoiserModel("rel", TINY_FIXED, np.random.default_rng(0))
        with pytest.raises(ArityError):
            model.forward(np.zeros((1, 1, 3)), np.zeros((1, 1, 3)), np.array([1]))

    def test_geometry_shape(self):
        """Should raise ShapeError for geometry of the wrong width."""
        model = DenoiserModel("rel", TINY_FIXED, np.random.default_rng(0))
        with pytest.raises(ShapeError):
            model.forward(np.zeros((1, 2, 3)), np.zeros((1, 2, 4)), np.array([1]))

    @pytest.mark.parametrize("arch", [TINY_FIXED, TINY_VARIADIC])
    def test_gradients_match_finite_differences(self, arch):
        """Should backpropagate the exact loss gradient."""
        model = DenoiserModel("rel", arch, np.random.default_rng(1))
        err = grad_check(model, batch(arch), np.array([1, 4, 9]), cosine_schedule(10))
        assert err < 1e-4

    def test_grad_check_catches_wrong_derivative(self, monkeypatch):
        """Should report a large error when an activation derivative is wrong."""
        monkeypatch.setattr("sketchstack.layers.silu_prime", sigmoid)
        model = DenoiserModel("rel", TINY_FIXED, np.random.default_rng(1))
        err = grad_check(model, batch(TINY_FIXED), np.array([1, 4, 9]), cosine_schedule(10))
        assert err > 1e-2


class TestTraining:
    """Tests for train_denoiser function."""

    def test_loss_decreases(self):
        """Should fit a constant pose distribution."""
        opt = OptimConfig(steps=200, batch_size=16, lr=1e-2, log_every=0)
        model = train_denoiser(
            constant_data(TINY_FIXED),
            TINY_FIXED,
            opt,
            cosine_schedule(10),
            np.random.default_rng(0),
        )
        assert len(model.losses) == 200
        assert np.mean(model.losses[-50:]) < np.mean(model.losses[:10])

    def test_reproducible(self):
        """Should give identical losses for identical seeds."""
        opt = OptimConfig(steps=5, batch_size=8, log_every=0)
        data = constant_data(TINY_FIXED)
        a = train_denoiser(data, TINY_FIXED, opt, cosine_schedule(10), np.random.default_rng(3))
        b = train_denoiser(data, TINY_FIXED, opt, cosine_schedule(10), np.random.default_rng(3))
        assert a.losses == b.losses

    def test_dataset_smaller_than_batch(self):
        """Should refuse to train on fewer samples than one batch."""
        opt = OptimConfig(steps=1, batch_size=128)
        with pytest.raises(ShapeError, match="fewer than batch size"):
            train_denoiser(
                constant_data(TINY_FIXED, n=4),
                TINY_FIXED,
                opt,
                cosine_schedule(10),
                np.random.default_rng(0),
            )

    def test_diverged(self):
        """Should stop with TrainingDiverged on a non-finite loss."""
        data = constant_data(TINY_FIXED, n=8)
        data.p[:] = np.nan
        opt = OptimConfig(steps=3, batch_size=4, log_every=0)
        with pytest.raises(TrainingDiverged) as exc:
            train_denoiser(data, TINY_FIXED, opt, cosine_schedule(10), np.random.default_rng(0))
        assert exc.value.step == 1

    @pytest.mark.slow
    def test_gaussian_toy_matches_analytic_noise(self):
        """Should learn the optimal noise prediction for Gaussian data at mid-schedule."""
        mu, sigma, n = 0.5, 0.8, 8192
        sched = cosine_schedule(20)
        arch = ArchConfig(slots=1, geom_dim=1, hidden=64, time_hidden=64, steps_T=20)
        rng = np.random.default_rng(0)
        data = DenoiserData(
            np.zeros((n, 1, 1)), mu + sigma * rng.standard_normal((n, 1, 3)), np.ones((n, 1), bool)
        )
        opt = OptimConfig(steps=8000, batch_size=512, lr=1e-3, log_every=0)
        model = train_denoiser(data, arch, opt, sched, rng)

        t = sched.T // 2
        ab = sched.alpha_bar[t]
        spread = ab * sigma**2 + 1.0 - ab
        x = np.sqrt(ab) * mu + np.sqrt(spread) * rng.standard_normal((2000, 1, 3))
        eps_hat = model.forward(x, np.zeros((2000, 1, 1)), np.full(2000, float(t)))
        optimum = (x - np.sqrt(ab) * mu) * np.sqrt(1.0 - ab) / spread
        # Irreducible error of the optimal predictor
        baseline = ab * sigma**2 / spread
        assert np.mean((eps_hat - optimum) ** 2) <= 0.05 * baseline


class TestSampling:
    """Tests for single-model sampling."""

    def test_last_step_is_deterministic(self):
        """Should add no noise when stepping from t=1."""
        model = DenoiserModel("rel", TINY_FIXED, np.random.default_rng(0))
        sched = cosine_schedule(10)
        p = np.zeros((2, 3))
        g = np.full((2, 3), 0.2)
        a = ancestral_step(model, p, g, 1, sched, np.random.default_rng(1))
        b = ancestral_step(model, p, g, 1, sched, np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)

    def test_sample_single(self):
        """Should return finite scene-unit poses with padded slots zeroed."""
        model = DenoiserModel("rel", TINY_VARIADIC, np.random.default_rng(0))
        g = np.full((4, 3), 0.2)
        mask = np.array([True, True, True, False])
        poses = sample_single(model, g, cosine_schedule(10), np.random.default_rng(0), mask)
        assert poses.shape == (4, 3)
        assert np.all(np.isfinite(poses))
        assert np.all(poses[3] == 0)


class TestCheckpoints:
    """Tests for checkpoint files."""

    def test_save_and_load(self, tmp_path):
        """Should restore a model that predicts the same noise."""
        model = DenoiserModel("left-of", TINY_FIXED, np.random.default_rng(0))
        model.seed = 7
        model.config_hash = "abc123"
        path = tmp_path / "left-of.ckpt"
        save_checkpoint(model, path)

        loaded = load_checkpoint(path)
        assert loaded.name == "left-of"
        assert loaded.arch == TINY_FIXED
        assert (loaded.seed, loaded.config_hash) == (7, "abc123")
        p0, g, mask, _ = batch(TINY_FIXED)
        t = np.array([1, 2, 3])
        np.testing.assert_allclose(
            loaded.forward(p0, g, t, mask), model.forward(p0, g, t, mask), atol=1e-4
        )

    def test_bad_magic(self, tmp_path):
        """Should reject files that are not checkpoints."""
        path = tmp_path / "x.ckpt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="Not a checkpoint"):
            load_checkpoint(path)

    def test_future_format(self, tmp_path):
        """Should reject checkpoints from another major format."""
        model = DenoiserModel("left-of", TINY_FIXED, np.random.default_rng(0))
        path = tmp_path / "left-of.ckpt"
        save_checkpoint(model, path)
        raw = path.read_bytes()
        (n,) = struct.unpack("<I", raw[4:8])
        header = json.loads(raw[8 : 8 + n])
        header["format"] = "2.0"
        head = json.dumps(header).encode()
        path.write_bytes(raw[:4] + struct.pack("<I", len(head)) + head + raw[8 + n :])
        with pytest.raises(CheckpointError, match="not supported"):
            load_checkpoint(path)

    def test_truncated_weights(self, tmp_path):
        """Should reject a checkpoint whose weights are cut short."""
        model = DenoiserModel("left-of", TINY_FIXED, np.random.default_rng(0))
        path = tmp_path / "left-of.ckpt"
        save_checkpoint(model, path)
        path.write_bytes(path.read_bytes()[:-40])
        with pytest.raises(CheckpointError, match="do not match"):
            load_checkpoint(path)

    def test_missing(self, tmp_path):
        """Should raise FileNotFoundError for a missing checkpoint."""
        with pytest.raises(FileNotFoundError):
            load_checkpoint(tmp_path / "none.ckpt")


class TestLoadModels:
    """Tests for load_models function."""

    def test_loads_directory_and_names(self, tmp_path):
        """Should load every checkpoint or only the named ones."""
        for name in ("left-of", "near-along-x"):
            save_checkpoint(
                DenoiserModel(name, TINY_FIXED, np.random.default_rng(0)),
                tmp_path / f"{name}.ckpt",
            )
        assert sorted(load_models(tmp_path)) == ["left-of", "near-along-x"]
        assert list(load_models(tmp_path, ["left-of"])) == ["left-of"]

    def test_missing_named_model(self, tmp_path):
        """Should raise FileNotFoundError for a named model that is absent."""
        with pytest.raises(FileNotFoundError):
            load_models(tmp_path, ["left-of"])

    def test_missing_directory(self, tmp_path):
        """Should raise FileNotFoundError for a missing directory."""
        with pytest.raises(FileNotFoundError):
            load_models(tmp_path / "nope")
