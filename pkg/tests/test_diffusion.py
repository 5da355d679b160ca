"""Denoiser training objectives, pretraining loop, sampling, checkpoints."""

import numpy as np
import pytest

from noisedistill.diffusion import (
    TrainConfig,
    ambient_sample,
    ambient_tweedie_loss,
    denoising_loss,
    load_checkpoint,
    pretrain,
    save_checkpoint,
    standard_diffusion_loss,
)
from noisedistill.errors import DivergenceError, PreconditionError
from noisedistill.gaussians import fit_gaussian
from noisedistill.nets import DenseNet
from noisedistill.rng import derive, make_rng
from noisedistill.schedule import NoiseSchedule
from noisedistill.toydata import make_dataset

SCHED = NoiseSchedule(0.02, 2.5)


def tiny_net(seed=0, sizes=(3, 16, 16, 2)):
    return DenseNet(list(sizes), derive(seed, 1))


class TestLossDegenerations:
    def test_sigma_hat_zero_reduces_to_standard_bitwise(self):
        net = tiny_net(1)
        batch = derive(1, 2).standard_normal((32, 2))
        loss_a, grads_a = ambient_tweedie_loss(net, batch, 0.0, SCHED, make_rng(5))
        loss_s, grads_s = standard_diffusion_loss(net, batch, SCHED, make_rng(5))
        assert loss_a == loss_s
        for ga, gs in zip(grads_a, grads_s):
            assert np.array_equal(ga, gs)

    def test_clipped_level_gives_exactly_zero_per_sample_loss(self):
        # constant schedule at sigma_hat: every draw is clipped, x_t == y
        net = tiny_net(2)
        sigma_hat = 0.3
        sched = NoiseSchedule(sigma_hat / 2, sigma_hat / 2)  # always below, always clipped
        batch = derive(2, 2).standard_normal((16, 2))
        loss, grads = ambient_tweedie_loss(net, batch, sigma_hat, sched, make_rng(6))
        assert loss == 0.0
        assert all(np.all(g == 0) for g in grads)

    def test_identical_seeds_identical_loss(self):
        net = tiny_net(3)
        batch = derive(3, 2).standard_normal((16, 2))
        l1, _ = standard_diffusion_loss(net, batch, SCHED, make_rng(9))
        l2, _ = standard_diffusion_loss(net, batch, SCHED, make_rng(9))
        assert l1 == l2

    def test_duplicated_rows_leave_loss_unchanged(self):
        # duplicating the batch with a duplicated RNG pattern keeps the mean
        net = tiny_net(4)
        batch = derive(4, 2).standard_normal((8, 2))
        rng = make_rng(11)
        l1, _ = standard_diffusion_loss(net, batch, SCHED, rng)
        # expectation argument: mean over duplicated rows equals mean over rows
        doubled = np.vstack([batch, batch])
        l2s = [standard_diffusion_loss(net, doubled, SCHED, make_rng(s))[0] for s in range(40)]
        l1s = [standard_diffusion_loss(net, batch, SCHED, make_rng(s))[0] for s in range(40)]
        assert np.mean(l2s) == pytest.approx(np.mean(l1s), rel=0.15)

    def test_gradients_flow_to_all_parameters(self):
        net = tiny_net(5)
        batch = derive(5, 2).standard_normal((64, 2))
        loss, grads = standard_diffusion_loss(net, batch, SCHED, make_rng(12))
        assert loss >= 0
        assert all(np.any(g != 0) for g in grads)

    def test_empty_batch_rejected(self):
        with pytest.raises(PreconditionError):
            standard_diffusion_loss(tiny_net(6), np.empty((0, 2)), SCHED, make_rng(0))


class TestMemorizationFloor:
    def test_single_point_floor_via_monte_carlo_oracle(self):
        # Brute-force oracle: with one repeated training point the posterior
        # mean is that point, so the attainable floor of the loss is 0, while
        # the identity predictor f(x_t) = x_t sits at the residual-noise level
        # E||x_t - x||^2 = d * sigma0^2.
        sigma0 = 0.1
        sched = NoiseSchedule(sigma0, sigma0)
        point = np.array([0.4, -0.2])
        rng = make_rng(20)
        eps = rng.standard_normal((200000, 2))
        mc_identity = float(np.mean(np.sum((sigma0 * eps) ** 2, axis=1)))
        assert mc_identity == pytest.approx(2 * sigma0**2, rel=0.02)
        # posterior mean of a point mass is the point itself: the floor is 0
        mc_floor = float(np.mean(np.sum((np.tile(point, (8, 1)) - point) ** 2, axis=1)))
        assert mc_floor == 0.0

        # a trained net on the repeated point approaches the floor, far below
        # the identity predictor's residual level
        net = DenseNet([3, 16, 16, 2], derive(21, 1))
        data = np.tile(point, (512, 1))

        class _Data:
            points = data

        cfg = TrainConfig(batch_size=64, lr=3e-3, steps=2500, schedule=sched, seed=3)
        net, curve = pretrain(net, _Data(), cfg, "standard")
        tail = float(np.mean(curve[-100:]))
        assert tail < 0.1 * mc_identity


class TestAmbientPosteriorMean:
    def test_linear_gaussian_oracle_at_three_noise_levels(self):
        # 2-D rank-1 linear-Gaussian data: the ambient objective should drive
        # f toward E[x | x_t] = EE^T (EE^T + sigma_t^2 I)^{-1} x_t.  Agreement
        # is asserted on the bulk of the perturbed marginal (inputs within
        # twice the typical radius); 3-sigma tails carry no training signal.
        e = np.array([[0.6], [0.8]])
        rng = derive(30, 1)
        z = rng.standard_normal((4096, 1))
        sigma_data = 0.2
        clean = z @ e.T
        noisy = clean + sigma_data * rng.standard_normal(clean.shape)

        class _Data:
            points = noisy

        sched = NoiseSchedule(0.05, 2.0)
        net = DenseNet([3, 64, 64, 2], derive(30, 2))
        cfg = TrainConfig(batch_size=384, lr=1e-3, steps=20000, schedule=sched,
                          sigma_hat=sigma_data, seed=5)
        net, _ = pretrain(net, _Data(), cfg, "ambient")

        test_rng = derive(30, 3)
        worst = 0.0
        for sigma_t in (0.3, 0.6, 1.2):
            cov = e @ e.T + sigma_t**2 * np.eye(2)
            gain = e @ e.T @ np.linalg.inv(cov)
            x_t = (test_rng.standard_normal((512, 1)) @ e.T
                   + sigma_t * test_rng.standard_normal((512, 2)))
            typical = np.sqrt(1.0 + sigma_t**2)
            bulk = np.linalg.norm(x_t, axis=1) <= 2.0 * typical
            oracle = x_t @ gain.T
            pred = net.forward(x_t, sigma_t)
            worst = max(worst, float(np.max(np.abs(pred - oracle)[bulk])))
        assert worst <= 0.05


class TestPretrain:
    def test_zero_steps_leaves_net_unchanged(self):
        net = tiny_net(40)
        digest = net.params_digest()
        data = make_dataset("ring", 256, 0.05, seed=1)
        net, curve = pretrain(net, data, TrainConfig(steps=0, schedule=SCHED), "ambient")
        assert net.params_digest() == digest
        assert curve == []

    def test_two_seeds_differ_but_stay_healthy(self):
        data = make_dataset("ring", 512, 0.05, seed=2)
        nets = []
        for seed in (0, 1):
            net = tiny_net(41)
            cfg = TrainConfig(batch_size=64, lr=1e-3, steps=300, schedule=SCHED,
                              sigma_hat=0.05, seed=seed)
            net, curve = pretrain(net, data, cfg, "ambient")
            assert all(np.isfinite(v) and v < 1e6 for v in curve)
            nets.append(net.get_flat())
        assert not np.array_equal(nets[0], nets[1])

    def test_deterministic_for_fixed_seed(self):
        data = make_dataset("ring", 512, 0.05, seed=3)
        flats = []
        for _ in range(2):
            net = tiny_net(42)
            cfg = TrainConfig(batch_size=32, lr=1e-3, steps=200, schedule=SCHED, seed=7)
            net, curve = pretrain(net, data, cfg, "standard")
            flats.append((net.get_flat(), tuple(curve)))
        assert np.array_equal(flats[0][0], flats[1][0])
        assert flats[0][1] == flats[1][1]

    def test_divergence_detector(self):
        data = make_dataset("ring", 512, 0.05, seed=4)
        net = tiny_net(43)
        net.weights[-1][...] *= 1e9  # guarantee an absurd loss
        cfg = TrainConfig(batch_size=32, lr=1e-3, steps=10, schedule=SCHED, seed=0)
        with pytest.raises(DivergenceError) as exc:
            pretrain(net, data, cfg, "standard")
        assert "step" in exc.value.diagnostics

    def test_unknown_mode_rejected(self):
        data = make_dataset("ring", 512, 0.05, seed=5)
        with pytest.raises(PreconditionError):
            pretrain(tiny_net(44), data, TrainConfig(schedule=SCHED), "tweedie")


class _ZeroNet:
    """Denoiser stand-in predicting 0 everywhere."""

    data_dim = 2

    def forward(self, x, sigma):
        return np.zeros_like(x)


class _OracleDenoiser:
    """Exact posterior mean for N(0, EE^T) data under VE noise."""

    def __init__(self, e):
        self.e = e
        self.data_dim = e.shape[0]

    def forward(self, x, sigma):
        cov = self.e @ self.e.T + sigma**2 * np.eye(self.data_dim)
        gain = self.e @ self.e.T @ np.linalg.inv(cov)
        return x @ gain.T


class TestAmbientSampling:
    def test_zero_net_contracts_geometrically(self):
        # with f == 0 the recursion is x <- x * sigma_prev/sigma_t, which
        # telescopes to exactly sigma_min/sigma_max
        rng = make_rng(50)
        sched = NoiseSchedule(0.05, 5.0)
        net = _ZeroNet()
        x = ambient_sample(net, 0.0, 40, "full", 256, rng, sched)
        rng2 = make_rng(50)
        x_init = rng2.standard_normal((256, 2)) * sched.sigma_max
        expected = x_init * (sched.sigma_min / sched.sigma_max)
        assert np.allclose(x, expected, atol=1e-12)

    def test_truncated_immediate_exit_at_large_sigma_hat(self):
        sched = NoiseSchedule(0.05, 2.0)
        net = _ZeroNet()
        out = ambient_sample(net, sched.sigma_max + 1.0, 16, "truncated", 64, make_rng(51), sched)
        assert np.allclose(out, 0.0)  # one-step denoise of the initial noise

    def test_oracle_denoiser_recovers_data_covariance(self):
        e = np.array([[0.6], [0.8]])
        sched = NoiseSchedule(0.02, 5.0)
        net = _OracleDenoiser(e)
        x = ambient_sample(net, 0.0, 64, "full", 10000, make_rng(52), sched)
        _, cov = fit_gaussian(x)
        assert np.max(np.abs(cov - e @ e.T)) <= 0.1

    def test_grid_refinement_changes_little_on_oracle(self):
        e = np.array([[0.6], [0.8]])
        sched = NoiseSchedule(0.02, 5.0)
        net = _OracleDenoiser(e)
        x64 = ambient_sample(net, 0.0, 64, "full", 512, make_rng(53), sched)
        x128 = ambient_sample(net, 0.0, 128, "full", 512, make_rng(53), sched)
        displacement = float(np.mean(np.linalg.norm(x64 - x128, axis=1)))
        assert displacement <= 0.05

    def test_bad_mode_and_steps_rejected(self):
        with pytest.raises(PreconditionError):
            ambient_sample(_ZeroNet(), 0.0, 1, "full", 8, make_rng(0), SCHED)
        with pytest.raises(PreconditionError):
            ambient_sample(_ZeroNet(), 0.0, 16, "midway", 8, make_rng(0), SCHED)


class TestCheckpoints:
    def test_roundtrip_value_exact(self, tmp_path):
        net = tiny_net(60)
        cfg = TrainConfig(batch_size=37, lr=3.3e-4, steps=123, schedule=SCHED,
                          sigma_hat=0.077, seed=9)
        path = tmp_path / "ckpt.json"
        save_checkpoint(path, net, cfg, 123, "ambient", meta={"config_hash": "abc", "seed": 9})
        loaded, cfg2, step, mode = load_checkpoint(path)
        assert step == 123 and mode == "ambient"
        assert cfg2.batch_size == 37 and cfg2.lr == 3.3e-4 and cfg2.sigma_hat == 0.077
        assert cfg2.schedule == SCHED
        assert loaded.layer_sizes == net.layer_sizes
        assert np.array_equal(loaded.get_flat(), net.get_flat())

    def test_rejects_foreign_json(self, tmp_path):
        path = tmp_path / "other.json"
        path.write_text('{"hello": 1}')
        with pytest.raises(PreconditionError):
            load_checkpoint(path)
