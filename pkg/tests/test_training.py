"""Objectives, exact gradients, optimizers, schedules."""

import numpy as np
import pytest

from varwidth.blocks import (
    BlockSpec,
    DenseLayerParams,
    EncoderBlockParams,
    NoiseSpec,
    StochasticNet,
    expect_block,
    gaussian_vae_net,
    mlp_dropout_net,
)
from varwidth.errors import ConfigurationError, TrainingDivergenceError
from varwidth.experiments import gradient_check
from varwidth.numkit import RngStream
from varwidth.training import (
    Dataset,
    LossSpec,
    TrainSpec,
    backprop_grad,
    deterministic_mse,
    elbo_objective,
    get_parameter_vector,
    make_cubic_dataset,
    make_gaussian_auto_dataset,
    make_sine_dataset,
    mse_stochastic_loss,
    parameter_items,
    prior_loss,
    prior_penalty_terms,
    sampled_objective,
    step_decay_schedule,
    train,
)


def _interpolated_dataset(net, n=6, seed=17):
    """Targets generated by the net itself, so the deterministic loss is zero."""
    x = RngStream(seed, 0).normal(n * net.widths[0]).reshape(n, net.widths[0])
    y = np.stack([expect_block(net, xi) for xi in x])
    return Dataset(x, y)


def _pure_noise_net():
    """f(x, eps) = eps: one standard-Gaussian output coordinate, no signal path."""
    trunk = BlockSpec([], identity_dim=2)
    enc = EncoderBlockParams(trunk, np.zeros((1, 2)), np.zeros((1, 2)), np.ones(1))
    return StochasticNet(NoiseSpec("standard_gaussian"), enc, np.eye(1))


class TestDatasets:
    def test_degenerate_pairs_rejected(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0]])
        y = np.array([[0.0], [1.0]])
        with pytest.raises(ConfigurationError):
            Dataset(x, y)

    def test_duplicate_inputs_with_same_target_allowed(self):
        x = np.array([[1.0, 2.0], [1.0, 2.0]])
        y = np.array([[3.0], [3.0]])
        assert Dataset(x, y).n == 2

    def test_generators(self):
        sine = make_sine_dataset(50, 0)
        assert sine.generator_tag == "sine" and sine.inputs.shape == (50, 1)
        assert np.all((sine.inputs >= -3) & (sine.inputs <= 3))
        cubic = make_cubic_dataset(40, 0, dim=20)
        assert cubic.generator_tag == "cubic" and cubic.targets.shape == (40, 20)
        auto = make_gaussian_auto_dataset(30, 0, dim=20)
        assert auto.generator_tag == "gaussian-auto"
        np.testing.assert_array_equal(auto.inputs, auto.targets)

    def test_generators_are_seed_deterministic(self):
        a = make_cubic_dataset(10, 3)
        b = make_cubic_dataset(10, 3)
        np.testing.assert_array_equal(a.inputs, b.inputs)
        assert not np.array_equal(a.inputs, make_cubic_dataset(10, 4).inputs)


class TestStochasticMseLoss:
    def test_zero_for_noise_free_interpolating_net(self):
        # identity net with zero noise scale reproduces its inputs exactly
        trunk = BlockSpec([], identity_dim=2)
        enc = EncoderBlockParams(trunk, np.eye(2), np.zeros((2, 2)), np.zeros(2))
        net = StochasticNet(NoiseSpec("standard_gaussian"), enc, np.eye(2))
        x = RngStream(61, 0).normal(8).reshape(4, 2)
        data = Dataset(x, x.copy())
        assert mse_stochastic_loss(net, data, 5, RngStream(1, 1)) == 0.0

    def test_pure_additive_unit_noise_gives_n(self):
        """E[f] = y = 0 with unit output noise: loss concentrates at N."""
        net = _pure_noise_net()
        n = 200
        data = Dataset(np.zeros((n, 2)) + RngStream(3, 0).normal(2 * n).reshape(n, 2),
                       np.zeros((n, 1)))
        rounds = 60
        vals = [mse_stochastic_loss(net, data, 1, RngStream(4, r)) for r in range(rounds)]
        vals = np.asarray(vals)
        se = vals.std(ddof=1) / np.sqrt(rounds)
        assert abs(vals.mean() - n) <= 3.0 * se

    def test_matches_exhaustive_mask_enumeration(self):
        """MC estimate agrees with the exact expectation over all 2^d1 masks."""
        d1 = 10
        net = mlp_dropout_net(3, d1, 2, 0.3, RngStream(62, 0), "tanh")
        data = Dataset(RngStream(63, 0).normal(12).reshape(4, 3),
                       RngStream(63, 1).normal(8).reshape(4, 2))
        exact = _exhaustive_mask_loss(net, data, 0.3)
        rounds = 400
        vals = np.asarray([mse_stochastic_loss(net, data, 1, RngStream(64, r))
                           for r in range(rounds)])
        se = vals.std(ddof=1) / np.sqrt(rounds)
        assert abs(vals.mean() - exact) <= 3.0 * se


def _exhaustive_mask_loss(net, data, p):
    """Exact sum_i E[(f(x_i, mask) - y_i)^2] by enumerating every mask."""
    d1 = net.widths[1]
    total = 0.0
    for x, y in zip(data.inputs, data.targets):
        from varwidth.blocks import block_forward

        h = block_forward(net.block, x)
        for bits in range(2 ** d1):
            mask = np.array([(bits >> j) & 1 for j in range(d1)], dtype=float)
            prob = p ** mask.sum() * (1 - p) ** (d1 - mask.sum())
            out = net.bottleneck @ (h * mask / p) + net.bottleneck_bias
            total += prob * float(((out - y) ** 2).sum())
    return total


class TestPriorLoss:
    def _net(self, seed=71):
        return gaussian_vae_net(3, 5, 4, 5, 3, RngStream(seed, 0), "tanh")

    def test_zero_at_matched_posterior(self):
        net = self._net()
        net.block.mean_map[:] = 0.0
        net.block.scale_map[:] = 0.0
        net.block.scale_bias[:] = 1.0
        data = Dataset(RngStream(1, 0).normal(9).reshape(3, 3), np.zeros((3, 3)))
        spec = LossSpec(kind="prior_regularized", alpha=1.3)
        assert prior_loss(net, data, spec) == 0.0

    def test_width_doubling_scales_by_two_to_one_minus_alpha(self):
        """Duplicating rows doubles the penalty sum while the prefactor gains 2^-alpha."""
        alpha = 1.7
        net = self._net()
        data = Dataset(RngStream(2, 0).normal(9).reshape(3, 3), np.zeros((3, 3)))
        spec = LossSpec(kind="prior_regularized", alpha=alpha)
        small = prior_loss(net, data, spec)
        idx = np.arange(8) % 4
        doubled = StochasticNet(
            NoiseSpec("standard_gaussian"),
            EncoderBlockParams(net.block.trunk.copy(), net.block.mean_map[idx],
                               net.block.scale_map[idx], net.block.scale_bias[idx]),
            np.zeros((net.bottleneck.shape[0], 8)),
            net.bottleneck_bias.copy(),
            net.tail_activation,
            net.tail.copy(),
        )
        big = prior_loss(doubled, data, spec)
        np.testing.assert_allclose(big / small, 2.0 ** (1.0 - alpha), rtol=1e-12)

    def test_quadratic_pair_equals_gaussian_kl(self):
        """Penalty sum equals the closed-form KL to the standard normal, per coordinate."""
        net = self._net(72)
        data = Dataset(RngStream(3, 0).normal(15).reshape(5, 3), np.zeros((5, 3)))
        spec = LossSpec(kind="prior_regularized", alpha=1.0)
        from varwidth.blocks import block_forward

        kl = 0.0
        for x in data.inputs:
            h = block_forward(net.block.trunk, x)
            mu = net.block.mean_map @ h
            s = net.block.scale_map @ h + net.block.scale_bias
            kl += float(0.5 * (mu ** 2 + s ** 2 - 1.0 - np.log(s ** 2)).sum())
        np.testing.assert_allclose(prior_loss(net, data, spec), kl / 4.0, rtol=1e-12)

    def test_dropout_net_rejected(self):
        net = mlp_dropout_net(3, 4, 2, 0.5, RngStream(73, 0))
        data = Dataset(np.zeros((1, 3)), np.zeros((1, 2)))
        with pytest.raises(ConfigurationError):
            prior_loss(net, data, LossSpec(kind="prior_regularized", alpha=1.0))

    def test_penalty_terms_split(self):
        net = self._net(74)
        data = Dataset(RngStream(4, 0).normal(6).reshape(2, 3), np.zeros((2, 3)))
        mean_term, var_term = prior_penalty_terms(net, data, 1.0)
        total = prior_loss(net, data, LossSpec(kind="prior_regularized", alpha=1.0))
        np.testing.assert_allclose(mean_term + var_term, total, rtol=1e-12)


class TestElboObjective:
    def test_beta_zero_reduces_to_mse(self):
        net = gaussian_vae_net(3, 4, 3, 4, 3, RngStream(81, 0))
        data = make_gaussian_auto_dataset(10, 5, dim=3)
        state = (9, 9, 0)
        a = elbo_objective(net, data, 0.0, 3, RngStream(*state))
        b = mse_stochastic_loss(net, data, 3, RngStream(*state))
        assert a == b

    def test_matched_posterior_contributes_no_kl(self):
        net = gaussian_vae_net(3, 4, 3, 4, 3, RngStream(82, 0))
        net.block.mean_map[:] = 0.0
        net.block.scale_map[:] = 0.0
        net.block.scale_bias[:] = 1.0
        data = make_gaussian_auto_dataset(10, 6, dim=3)
        state = (10, 10, 0)
        with_kl = elbo_objective(net, data, 2.5, 2, RngStream(*state))
        without = mse_stochastic_loss(net, data, 2, RngStream(*state))
        assert with_kl == without

    def test_negative_beta_rejected(self):
        net = gaussian_vae_net(3, 4, 3, 4, 3, RngStream(83, 0))
        data = make_gaussian_auto_dataset(4, 7, dim=3)
        with pytest.raises(ConfigurationError):
            elbo_objective(net, data, -0.1, 1, RngStream(0, 0))


class TestBackpropGrad:
    def test_tanh_dropout_net_matches_finite_differences(self):
        net = mlp_dropout_net(3, 5, 2, 0.3, RngStream(91, 0), "tanh")
        data = Dataset(RngStream(92, 0).normal(12).reshape(4, 3),
                       RngStream(92, 1).normal(8).reshape(4, 2))
        rel = gradient_check(net, data, LossSpec(kind="mse"), seed=93)
        assert np.percentile(rel, 95) <= 1e-4

    def test_encoder_reparameterization_matches_finite_differences(self):
        net = gaussian_vae_net(3, 5, 4, 5, 3, RngStream(94, 0), "tanh")
        data = Dataset(RngStream(95, 0).normal(12).reshape(4, 3),
                       RngStream(95, 1).normal(12).reshape(4, 3))
        rel = gradient_check(net, data, LossSpec(kind="mse"), seed=96)
        assert np.percentile(rel, 95) <= 1e-4

    def test_zero_gradient_at_interpolating_minimum(self):
        net = gaussian_vae_net(3, 4, 3, 4, 2, RngStream(97, 0), "tanh")
        net.block.scale_map[:] = 0.0
        net.block.scale_bias[:] = 0.0
        data = _interpolated_dataset(net)
        grads = backprop_grad(net, data, LossSpec(kind="mse", mc_samples_per_step=0),
                              RngStream(0, 0))
        for name, g in grads.items():
            np.testing.assert_allclose(g, 0.0, atol=1e-12, err_msg=name)

    def test_multi_round_average(self):
        """mc_samples_per_step > 1 averages the per-round gradients."""
        net = mlp_dropout_net(2, 4, 1, 0.5, RngStream(98, 0), "tanh")
        data = Dataset(RngStream(99, 0).normal(6).reshape(3, 2),
                       RngStream(99, 1).normal(3).reshape(3, 1))
        state = (100, 0, 0)
        g2 = backprop_grad(net, data, LossSpec(kind="mse", mc_samples_per_step=2),
                           RngStream(*state))
        ga = backprop_grad(net, data, LossSpec(kind="mse"), RngStream(*state))
        rng = RngStream(*state)
        rng.dropout_mask(3 * 4, 0.5)
        gb = backprop_grad(net, data, LossSpec(kind="mse"), rng)
        for name in g2:
            np.testing.assert_allclose(g2[name], 0.5 * (ga[name] + gb[name]), rtol=1e-12)


class TestTrain:
    def _small_problem(self, seed=111):
        net = mlp_dropout_net(2, 6, 1, 0.5, RngStream(seed, 0), "tanh")
        data = Dataset(RngStream(seed, 1).normal(12).reshape(6, 2),
                       RngStream(seed, 2).normal(6).reshape(6, 1))
        return net, data

    def test_zero_lr_keeps_parameters(self):
        net, data = self._small_problem()
        before = get_parameter_vector(net)
        trained, _ = train(net, data, LossSpec(kind="mse"),
                           TrainSpec(optimizer="sgd", lr=0.0, steps=10, seed=1))
        np.testing.assert_array_equal(get_parameter_vector(trained), before)

    def test_pure_decay_closed_form(self):
        """loss == 0 exactly (zero net on zero targets): only decay acts."""
        net = mlp_dropout_net(2, 3, 1, 0.5, RngStream(114, 0), "tanh")
        for _, arr in parameter_items(net):
            arr[:] = 0.0
        net.block.layers[0].weights[:] = 0.3  # trunk weights; output stays zero
        data = Dataset(np.zeros((2, 2)) + RngStream(115, 0).normal(4).reshape(2, 2),
                       np.zeros((2, 1)))
        lr, lam, steps = 0.1, 0.5, 4
        trained, trace = train(net, data, LossSpec(kind="mse", mc_samples_per_step=0),
                               TrainSpec(optimizer="sgd", lr=lr, weight_decay=lam,
                                         steps=steps, seed=3))
        np.testing.assert_allclose(
            trained.block.layers[0].weights,
            0.3 * (1.0 - lr * lam) ** steps * np.ones((3, 2)),
            rtol=1e-12,
        )

    def test_training_is_bitwise_deterministic(self):
        net, data = self._small_problem(116)
        spec = TrainSpec(optimizer="adam", lr=0.01, steps=40, seed=7,
                         lr_schedule=((20, 0.001),))
        a, trace_a = train(net, data, LossSpec(kind="mse"), spec)
        b, trace_b = train(net, data, LossSpec(kind="mse"), spec)
        np.testing.assert_array_equal(get_parameter_vector(a), get_parameter_vector(b))
        assert trace_a == trace_b

    def test_schedule_is_monotone_and_drops_at_boundaries(self):
        net, data = self._small_problem(117)
        schedule = step_decay_schedule(0.01, 30, 10)
        assert schedule == ((10, 0.001), (20, 0.0001))
        _, trace = train(net, data, LossSpec(kind="mse"),
                         TrainSpec(optimizer="sgd", lr=0.01, steps=30,
                                   lr_schedule=schedule, seed=8))
        lrs = [lr for _, _, lr in trace]
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert lrs[9] == 0.01 and lrs[10] == 0.001 and lrs[20] == 0.0001

    def test_divergence_aborts_with_trace(self):
        net, data = self._small_problem(118)
        with pytest.raises(TrainingDivergenceError) as exc:
            train(net, data, LossSpec(kind="mse"),
                  TrainSpec(optimizer="sgd", lr=1e12, steps=200, seed=9))
        assert len(exc.value.trace) >= 1

    def test_decreasing_schedule_required(self):
        with pytest.raises(ConfigurationError):
            TrainSpec(lr_schedule=((10, 0.1), (10, 0.01)))

    def test_illustration_run_beats_noise_floor(self):
        """Sine illustration config ends below the 0.1 * N data-noise floor."""
        data = make_sine_dataset(100, 0, noise_var=0.1)
        net = mlp_dropout_net(1, 50, 1, 0.9, RngStream(0, 50 * 16), "tanh")
        spec = TrainSpec(optimizer="adam", lr=0.01, steps=4500,
                         lr_schedule=step_decay_schedule(0.01, 4500, 1500), seed=50)
        trained, _ = train(net, data, LossSpec(kind="mse"), spec)
        assert deterministic_mse(trained, data) < 0.1 * data.n


class TestMseDecomposition:
    def test_bias_variance_identity_within_mc_error(self):
        """sum E[(f-y)^2] = (E f - y)^2 + Var f, checked with independent streams."""
        net = mlp_dropout_net(3, 6, 2, 0.4, RngStream(121, 0), "tanh")
        x = RngStream(122, 0).normal(3)
        y = RngStream(122, 1).normal(2)
        n = 4000
        from varwidth.blocks import stochastic_forward

        noise_a = RngStream(123, 0)
        sq = np.stack([(stochastic_forward(net, x, noise_a) - y) ** 2 for _ in range(n)])
        noise_b = RngStream(123, 1)
        outs = np.stack([stochastic_forward(net, x, noise_b) for _ in range(n)])
        lhs = sq.mean(axis=0)
        rhs = (outs.mean(axis=0) - y) ** 2 + outs.var(axis=0, ddof=1)
        se = sq.std(axis=0, ddof=1) / np.sqrt(n) + outs.std(axis=0, ddof=1) / np.sqrt(n) * 3
        assert np.all(np.abs(lhs - rhs) <= 3 * se)
