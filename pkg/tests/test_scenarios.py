"""Tests for the shipped scenarios and the config loader."""

import json
import math

import numpy as np
import pytest
import scipy.stats

from cyclo_lms.cyclolinalg import NumericalError
from cyclo_lms.moment_matrices import build_moment_matrices
from cyclo_lms.scenarios import (
    BUILTIN,
    ConfigError,
    example1_config,
    example2_config,
    from_config,
    load_scenario,
    nbplc_config,
    nbplc_lite,
    scalar_gaussian_config,
    toeplitz_kernel,
    validate_config,
)
from cyclo_lms.signal_models import estimate_moments

from oracles import entrywise_check

EPS_ALG = 1e-10
QUICK_ESTIMATION = {"second_order_draws": 20_000, "fourth_order_draws": 2_000, "seed": 5}


def kernel_oracle(M, scale, decay):
    out = np.empty((M, M), complex)
    for k in range(M):
        for l in range(M):
            out[k, l] = scale * math.exp(-decay * abs(k - l)) * np.exp(2j * math.pi * (k - l) / M)
    return out


def passthrough(**extra):
    """Identity channel and no noise, so ``d[n]`` is the newest window sample."""
    return nbplc_lite(
        {"channel": {"kind": "taps", "taps": [[1.0]]}, "noise_profile": {"kind": "none"},
         "estimation": QUICK_ESTIMATION, **extra}
    )


class TestExample1:
    """Multivariate t input with cosine envelope and ramped system."""

    def test_shape_and_period(self, ex1):
        assert ex1.M == 8 and ex1.period == 40
        assert ex1.default_mus == (0.01, 0.04)

    def test_noise_at_phase_zero(self, ex1):
        assert ex1.gt.sigma_v2[0] == pytest.approx(1e-6 * 1.1**2, rel=1e-14)

    def test_noise_profile(self, ex1):
        for n in range(40):
            assert ex1.gt.sigma_v2[n] == pytest.approx(1e-6 * (1 + 0.1 / (n % 5 + 1)) ** 2, rel=1e-14)

    def test_scatter_kernel(self, ex1):
        scatter = ex1.input.base.speckle_cov[0]
        assert scatter[0, 0] == 1
        np.testing.assert_allclose(scatter, kernel_oracle(8, 1.0, 1.0), atol=1e-15)

    def test_covariance_follows_envelope(self, ex1):
        c_t = kernel_oracle(8, 1.0, 1.0)
        for n in (0, 7, 20, 39):
            env = 1 + 0.5 * math.cos(2 * math.pi * n / 40)
            np.testing.assert_allclose(ex1.input.covariance(n), env**2 * 5 / 4 * c_t, atol=1e-14)

    def test_ground_truth(self, ex1):
        k = np.arange(8)
        for n in range(40):
            expected = (1 + (n % 10) / 50) * np.exp(-0.5 * k)
            np.testing.assert_allclose(ex1.gt.h_M[n], expected, atol=1e-15)


class TestExample2:
    """Three-component Gaussian mixture with ramp envelope."""

    def test_weights(self, ex2):
        w = ex2.input.base.weights[0]
        np.testing.assert_array_equal(w, [0.1, 0.2, 0.7])
        assert w.sum() == pytest.approx(1.0)

    def test_component_kernels(self, ex2):
        covs = ex2.input.base.component_covs
        assert covs[0][0][0, 0] == 6
        for m, cov in enumerate(covs, start=1):
            np.testing.assert_allclose(cov[0], kernel_oracle(8, 6.0, m), atol=1e-14)

    def test_covariance_follows_envelope(self, ex2):
        mix = sum(w * kernel_oracle(8, 6.0, m) for w, m in zip((0.1, 0.2, 0.7), (1, 2, 3)))
        for n in (0, 13, 39):
            np.testing.assert_allclose(ex2.input.covariance(n), (1 + n / 40) ** 2 * mix, atol=1e-13)

    def test_ground_truth_and_noise(self, ex2):
        k = np.arange(8)
        for n in range(40):
            np.testing.assert_allclose(ex2.gt.h_M[n], (1 + (n % 10) / 1000) * (1 + 0.1 * k), atol=1e-15)
            expected = 1e-6 * (1 + 0.1 * math.sin(2 * math.pi * n / 5)) ** 2
            assert ex2.gt.sigma_v2[n] == pytest.approx(expected, rel=1e-14)


class TestModellingFlags:
    def test_closed_form_examples_satisfy_assumptions(self, ex1, ex2):
        for s in (ex1, ex2):
            assert s.notes["independent_input"] and s.notes["independent_noise"]
            assert s.notes["bounded_fourth_moments"]

    def test_power_line_violates_independence(self, nbplc):
        assert not nbplc.notes["independent_input"]
        assert not nbplc.notes["independent_noise"]


class TestClosedFormAgainstEstimates:
    """Closed-form moment matrices agree with sample estimates."""

    @pytest.mark.parametrize("name,phases", [("ex1", (0, 21)), ("ex2", (5, 38))])
    def test_moment_matrices(self, request, name, phases):
        s = request.getfixturevalue(name)
        mu = s.default_mus[0]

        def sampler(rng, size):
            return np.stack([s.input.sample(n, rng, size) for n in phases], axis=1)

        est = estimate_moments(sampler, len(phases), s.M, 200_000, np.random.default_rng(40))
        closed = build_moment_matrices(s.input, mu)
        estimated = build_moment_matrices(est, mu)
        for j, n in enumerate(phases):
            z_b = np.abs(estimated.B[j] - closed.B[n]) / np.maximum(est.b_stderr[j], 1e-300)
            z_c = np.abs(estimated.C[j] - closed.C[n]) / np.maximum(est.cov_stderr[j], 1e-300)
            assert entrywise_check(z_b[np.triu_indices(s.M**2)], 4)
            assert entrywise_check(z_c[np.triu_indices(s.M)], 4)


class TestPowerLine:
    """OFDM power-line scenario with estimated moments."""

    def test_block_length(self, nbplc):
        link = nbplc.notes["link"]
        assert link.block == 48 == nbplc.period
        assert nbplc.M == 8

    def test_snr_definition(self, nbplc):
        link = nbplc.notes["link"]
        ratio = np.sum(np.abs(link.taps) ** 2) / np.sum(link.noise_var)
        assert ratio == pytest.approx(10**1.2, rel=1e-12)

    def test_passthrough_recovers_first_tap(self):
        s = passthrough()
        e1 = np.eye(8)[0]
        for k in range(48):
            np.testing.assert_allclose(s.gt.h_M[k], e1, atol=1e-9)
            assert abs(s.gt.sigma_v2[k]) < 1e-12

    def test_passthrough_trajectory(self):
        s = passthrough()
        x, d = s.trajectory(np.random.default_rng(3), 500)
        assert x.shape == (500, 8) and d.shape == (500,)
        np.testing.assert_array_equal(x[:, 0], d)
        np.testing.assert_array_equal(x[1:, 1], d[:-1])

    def test_singular_covariance_names_phase(self):
        with pytest.raises(NumericalError, match="phase 0"):
            passthrough(channel={"kind": "taps", "taps": [[0.0]]})

    def test_cyclic_prefix_copies_block_tail(self, nbplc):
        d = nbplc.notes["link"].ofdm(np.random.default_rng(1), 20).reshape(20, 48)
        np.testing.assert_array_equal(d[:, :12], d[:, 36:])

    def test_soi_power_is_periodic(self, nbplc):
        """Per-phase power is consistent with one 48-periodic profile (chi-square, 5%)."""
        d = nbplc.notes["link"].ofdm(np.random.default_rng(2), 100_000).reshape(-1, 48)
        p = np.abs(d) ** 2
        distinct = p[:, 12:]
        mean = distinct.mean(axis=0)
        se = distinct.std(axis=0, ddof=1) / np.sqrt(distinct.shape[0])
        stat = np.sum(((mean - 1.0) / se) ** 2)
        assert stat < scipy.stats.chi2(distinct.shape[1]).ppf(0.95)

    def test_soi_is_cyclostationary(self, nbplc):
        """Lag-36 correlation is one on prefix phases and zero elsewhere."""
        d = nbplc.notes["link"].ofdm(np.random.default_rng(4), 20_000).reshape(-1, 48)
        corr = d[:, :12] * d[:, 36:].conj()
        z_on = np.abs(corr.mean(axis=0) - 1.0) / (corr.std(axis=0, ddof=1) / np.sqrt(corr.shape[0]))
        assert entrywise_check(z_on, 4)
        flat = d.reshape(-1)
        pairs = (flat[:-36] * flat[36:].conj())[: 48 * (d.shape[0] - 1)].reshape(-1, 48)
        off = pairs[:, 12:]
        z = np.abs(off.mean(axis=0)) / (np.abs(off).std(axis=0, ddof=1) / np.sqrt(off.shape[0]))
        assert entrywise_check(z, 4)

    def test_overrides_accept_full_config(self):
        cfg = nbplc_config(
            channel={"kind": "taps", "taps": [[1.0]]}, noise_profile={"kind": "none"}, estimation=QUICK_ESTIMATION
        )
        assert nbplc_lite(cfg).notes["link"].taps.shape == (48, 1)

    def test_channel_period_must_divide_block(self):
        with pytest.raises(ConfigError):
            passthrough(channel={"kind": "taps", "taps": [[1.0]] * 5})

    def test_fourth_draws_bounded_by_second(self):
        with pytest.raises(ConfigError):
            nbplc_lite({"estimation": {"second_order_draws": 2000, "fourth_order_draws": 4000}})


class TestFromConfig:
    def test_round_trip(self, ex1, tmp_path):
        path = tmp_path / "ex1.json"
        path.write_text(json.dumps(ex1.to_config()))
        s = from_config(path)
        assert (s.name, s.M, s.period, s.default_mus) == (ex1.name, ex1.M, ex1.period, ex1.default_mus)
        for n in (0, 9, 33):
            np.testing.assert_array_equal(s.input.covariance(n), ex1.input.covariance(n))
            np.testing.assert_array_equal(s.input.b_matrix(n), ex1.input.b_matrix(n))
            np.testing.assert_array_equal(s.gt.h_M[n], ex1.gt.h_M[n])
            assert s.gt.sigma_v2[n] == ex1.gt.sigma_v2[n]
        np.testing.assert_array_equal(s.gt.h_o, ex1.gt.h_o)

    def test_negative_noise_rejected_with_path(self):
        cfg = scalar_gaussian_config()
        cfg["noise"]["value"] = -1e-3
        with pytest.raises(ConfigError, match="noise/value"):
            from_config(cfg)

    def test_common_period_is_lcm(self):
        cfg = example2_config()
        cfg["periods"] = {"N_x": 4, "N_h": 2, "N_v": 3}
        assert from_config(cfg).period == 12 == math.lcm(4, 2, 3)

    def test_unknown_field_rejected(self):
        cfg = example1_config()
        cfg["model"]["colour"] = "blue"
        with pytest.raises(ConfigError, match="model"):
            from_config(cfg)

    def test_weights_must_sum_to_one(self):
        cfg = example2_config()
        cfg["model"]["weights"] = [0.2, 0.2, 0.7]
        with pytest.raises(ConfigError):
            from_config(cfg)

    def test_tap_count_must_match(self):
        cfg = scalar_gaussian_config()
        cfg["ground_truth"]["taps"] = [1.0, 0.5]
        with pytest.raises(ConfigError):
            from_config(cfg)

    def test_unreadable_sources(self, tmp_path):
        with pytest.raises(ConfigError):
            from_config(tmp_path / "missing.json")
        bad = tmp_path / "bad.json"
        bad.write_text("{not json")
        with pytest.raises(ConfigError):
            from_config(bad)

    def test_shipped_configs_validate(self):
        for cfg in (example1_config(), example2_config(), scalar_gaussian_config(), nbplc_config()):
            validate_config(cfg)

    def test_kernel_helper(self):
        np.testing.assert_allclose(toeplitz_kernel(5, 2.0, 0.3), kernel_oracle(5, 2.0, 0.3), atol=1e-15)


class TestLoadScenario:
    def test_builtins(self):
        assert load_scenario("scalar_gaussian").M == 1
        assert {"example1", "example2", "nbplc_lite", "nbplc-lite"} <= set(BUILTIN)

    def test_unknown_name(self):
        with pytest.raises(ConfigError, match="unknown scenario"):
            load_scenario("example9")

    def test_path(self, tmp_path):
        path = tmp_path / "toy.json"
        path.write_text(json.dumps(scalar_gaussian_config(variance=2.0)))
        s = load_scenario(str(path))
        assert s.input.covariance(0)[0, 0] == pytest.approx(2.0)
