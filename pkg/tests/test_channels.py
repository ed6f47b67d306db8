import warnings

import numpy as np
import pytest

from helpers import analytic_task, krylov_basis, max_principal_angle, random_spd, relative_error
from lgrad import (
    DegenerateTaskError,
    ImageStack,
    SignalImage,
    TaskStats,
    ValidationError,
    build_cho,
    estimate_class_stats,
    generate_lgrad_channels,
    generate_lgrad_channels_from_samples,
    generate_lgrad_cmd_channels,
    generate_pls_channels,
    iterate_lgrad,
    lagrangian_gradient,
    lagrangian_value,
    symmetric_solve,
)
from lgrad.channels import EarlyStopWarning, lagrangian_value_from_samples, pls_nipals
from lgrad.stats import ClassStats


def _class_stats(k0, k1, delta):
    m = delta.size
    return ClassStats(np.zeros(m), delta, delta, k0, k1, 10, 10)


class TestLagrangian:
    def test_zero_template(self, rng):
        k = random_spd(rng, 4)
        st_ = _class_stats(k, k, rng.standard_normal(4))
        assert lagrangian_value(np.zeros(4), 2.0, 0.7, st_) == pytest.approx(1.4)

    def test_hand_example(self):
        e1 = np.eye(3)[0]
        st_ = _class_stats(np.eye(3), np.eye(3), e1)
        assert lagrangian_value(e1, 2.0, 0.0, st_) == -1.0

    def test_monte_carlo_expectation(self):
        rng = np.random.default_rng(2)
        m, n = 5, 200_000
        k0, k1 = random_spd(rng, m, 5.0), random_spd(rng, m, 5.0)
        mu0, mu1 = rng.standard_normal(m), rng.standard_normal(m)
        w = rng.standard_normal(m)
        g0 = rng.multivariate_normal(mu0, k0, n)
        g1 = rng.multivariate_normal(mu1, k1, n)
        mc = 0.5 * np.mean((g0 @ w - mu0 @ w) ** 2) + 0.5 * np.mean((g1 @ w - mu1 @ w) ** 2)
        mc -= 2.0 * (w @ (mu1 - mu0) - 0.3)
        exact = lagrangian_value(w, 2.0, 0.3, ClassStats(mu0, mu1, mu1 - mu0, k0, k1, n, n))
        scale = 0.5 * (w @ k0 @ w + w @ k1 @ w)
        assert abs(mc - exact) < 5.0 * scale * np.sqrt(2.0 / n)

    def test_gradient_at_zero_is_minus_two_delta(self, rng):
        delta = rng.standard_normal(6)
        ts = TaskStats(2.0 * random_spd(rng, 6), delta)
        np.testing.assert_array_equal(-0.5 * lagrangian_gradient(np.zeros(6), ts), delta)

    def test_stationary_point(self, rng):
        w = rng.standard_normal(4)
        np.testing.assert_array_equal(lagrangian_gradient(w, TaskStats(2.0 * np.eye(4), w)), 0.0)

    def test_gradient_vs_finite_differences(self, rng):
        k0, k1 = random_spd(rng, 7), random_spd(rng, 7)
        delta = rng.standard_normal(7)
        cs = _class_stats(k0, k1, delta)
        ts = TaskStats.from_class_stats(cs)
        h = 1e-5
        for _ in range(5):
            w = rng.standard_normal(7)
            g = lagrangian_gradient(w, ts)
            fd = np.array([
                (lagrangian_value(w + h * e, 2.0, 0.0, cs) - lagrangian_value(w - h * e, 2.0, 0.0, cs)) / (2 * h)
                for e in np.eye(7)
            ])
            assert np.max(np.abs(fd - g)) / np.max(np.abs(g)) < 1e-4

    def test_sample_form_matches_class_stats(self, labelled_stack, rng):
        w = rng.standard_normal(labelled_stack.m)
        cs = estimate_class_stats(labelled_stack)
        assert lagrangian_value_from_samples(w, 2.0, 0.5, labelled_stack) == pytest.approx(
            lagrangian_value(w, 2.0, 0.5, cs), rel=1e-12
        )

    def test_dimension_mismatch(self, rng):
        ts = TaskStats(np.eye(3), np.ones(3))
        with pytest.raises(ValidationError):
            lagrangian_gradient(np.ones(4), ts)


class TestLgradAlgorithm:
    def test_first_channel_is_delta(self, rng):
        delta = rng.standard_normal(10)
        ch = generate_lgrad_channels(TaskStats(2.0 * random_spd(rng, 10), delta), 3)
        np.testing.assert_array_equal(ch.rows[0], delta)

    def test_white_data_stops_after_one(self, rng):
        delta = rng.standard_normal(8)
        with pytest.warns(EarlyStopWarning):
            ch = generate_lgrad_channels(TaskStats(2.0 * np.eye(8), delta), 5)
        assert ch.d == 1

    def test_zero_delta_is_degenerate(self):
        with pytest.raises(DegenerateTaskError):
            generate_lgrad_channels(TaskStats(np.eye(3), np.zeros(3)), 2)

    def test_delta_in_null_space(self):
        with pytest.raises(DegenerateTaskError):
            generate_lgrad_channels(TaskStats(np.diag([1.0, 0.0]), np.array([0.0, 1.0])), 1)

    def test_channel_count_bounds(self, rng):
        ts = TaskStats(np.eye(3), np.ones(3))
        for d in (0, 4):
            with pytest.raises(ValidationError):
                generate_lgrad_channels(ts, d)

    def test_krylov_span(self):
        ts, kbar, delta = analytic_task()
        ch = generate_lgrad_channels(ts, 20)
        q = krylov_basis(kbar, delta, 20)
        for i in (1, 5, 10, 20):
            assert max_principal_angle(ch.rows[:i], q[:, :i]) < 1e-6

    def test_channels_mutually_orthogonal(self):
        ts, _, _ = analytic_task()
        rows = generate_lgrad_channels(ts, 15).normalized().rows
        np.testing.assert_allclose(rows @ rows.T, np.eye(15), atol=1e-8)

    def test_ho_recovery(self):
        ts, kbar, delta = analytic_task()
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", EarlyStopWarning)
            *_, last = iterate_lgrad(ts, delta.size)
        assert relative_error(last.cho_template, symmetric_solve(kbar, delta)) < 1e-6

    def test_snr_monotone(self):
        ts, _, _ = analytic_task()
        snr2 = [s.snr2 for s in iterate_lgrad(ts, 40)]
        assert np.all(np.diff(snr2) >= -1e-12 * snr2[-1])

    def test_incremental_matches_direct(self):
        ts, kbar, delta = analytic_task()
        for state in iterate_lgrad(ts, 30):
            t = state.channel_matrix.rows
            w_direct = t.T @ np.linalg.solve(t @ kbar @ t.T, t @ delta)
            assert relative_error(state.cho_template, w_direct) < 1e-8

    def test_template_scale_invariance(self):
        # scaling K scales the template but not the channel directions
        ts, kbar, delta = analytic_task()
        a = generate_lgrad_channels(ts, 8).normalized().rows
        b = generate_lgrad_channels(TaskStats(7.0 * ts.k_sum, delta), 8).normalized().rows
        np.testing.assert_allclose(np.abs(np.sum(a * b, axis=1)), 1.0, atol=1e-8)

    def test_cho_invariant_to_channel_normalization(self):
        ts, kbar, delta = analytic_task()
        ch = generate_lgrad_channels(ts, 6)
        stats = TaskStats(ts.k_sum, delta)
        w1 = build_cho(ch, stats).expanded_template
        w2 = build_cho(ch.normalized(), stats).expanded_template
        assert relative_error(w2, w1) < 1e-10


class TestLgradFromData:
    def _data(self, n=400, seed=0):
        rng = np.random.default_rng(seed)
        m = 12
        data = rng.standard_normal((n, m)) @ np.diag(np.linspace(0.5, 3, m))
        labels = np.repeat(np.array([0, 1], np.uint8), n // 2)
        s = np.linspace(1.0, 0.0, m)
        data[labels == 1] += s
        return ImageStack(data, labels, 3, 4), SignalImage(s, 3, 4)

    def test_ske_first_channel_is_signal(self):
        stack, sig = self._data()
        ch = generate_lgrad_channels_from_samples(stack, sig, 4)
        np.testing.assert_array_equal(ch.rows[0], sig.s)

    def test_non_ske_first_channel_is_mean_difference(self):
        stack, _ = self._data()
        ch = generate_lgrad_channels_from_samples(stack, None, 4, covariance="dense")
        np.testing.assert_array_equal(ch.rows[0], estimate_class_stats(stack).delta_mean)

    def test_dense_and_implicit_agree(self):
        stack, sig = self._data()
        a = generate_lgrad_channels_from_samples(stack, sig, 6, covariance="dense")
        b = generate_lgrad_channels_from_samples(stack, sig, 6, covariance="implicit")
        np.testing.assert_allclose(b.rows, a.rows, rtol=1e-9, atol=1e-12 * np.abs(a.rows).max())

    def test_auto_switches_to_dense_with_many_images(self):
        from lgrad.channels import _use_dense

        assert not _use_dense("auto", 1000, 4096, 50)
        assert _use_dense("auto", 16000, 4096, 50)
        assert _use_dense("auto", 100, 12, 6)
        with pytest.raises(ValidationError):
            _use_dense("sparse", 100, 12, 6)

    def test_deterministic(self):
        stack, sig = self._data()
        a = generate_lgrad_channels_from_samples(stack, sig, 6)
        b = generate_lgrad_channels_from_samples(stack, sig, 6)
        assert a.rows.tobytes() == b.rows.tobytes()

    def test_cmd_ignores_training_images(self):
        # only backgrounds and K_n enter, never noisy training images
        stack, sig = self._data()
        bg = stack.subset(np.arange(100))
        a = generate_lgrad_cmd_channels(bg, 4.0, sig, 5)
        b = generate_lgrad_cmd_channels(bg, 4.0, sig, 5)
        assert a.rows.tobytes() == b.rows.tobytes()

    def test_cmd_dense_matches_generic_bitwise(self):
        stack, sig = self._data()
        bg = stack.subset(np.arange(200))
        from lgrad.channels import cmd_task_stats

        ts = cmd_task_stats(bg, 4.0, sig, covariance="dense")
        a = generate_lgrad_cmd_channels(bg, 4.0, sig, 5, covariance="dense")
        b = generate_lgrad_channels(TaskStats(ts.k_sum, sig.s), 5)
        assert a.rows.tobytes() == b.rows.tobytes()

    def test_cmd_degenerate_inputs(self):
        bg = ImageStack(np.full((4, 4), 3.0), np.zeros(4), 2, 2)
        with pytest.raises(DegenerateTaskError):
            generate_lgrad_cmd_channels(bg, 0.0, SignalImage(np.ones(4), 2, 2), 1)


class TestPls:
    def test_first_weight_collinear_with_mean_difference(self, labelled_stack):
        w = generate_pls_channels(labelled_stack, 1).rows[0]
        d = estimate_class_stats(labelled_stack).delta_mean
        assert abs(w @ d) / (np.linalg.norm(w) * np.linalg.norm(d)) > 1 - 1e-10

    def test_one_class_rejected(self, labelled_stack):
        with pytest.raises(ValidationError):
            generate_pls_channels(labelled_stack.with_labels(np.zeros(labelled_stack.n)), 1)

    def test_scores_orthogonal(self, labelled_stack):
        t = pls_nipals(labelled_stack, 8).scores
        g = t.T @ t
        off = g - np.diag(np.diag(g))
        assert np.max(np.abs(off)) < 1e-8 * np.max(np.diag(g))

    def test_deterministic(self, labelled_stack):
        a = generate_pls_channels(labelled_stack, 5)
        b = generate_pls_channels(labelled_stack, 5)
        assert a.rows.tobytes() == b.rows.tobytes()

    def test_channel_bound(self, labelled_stack):
        with pytest.raises(ValidationError):
            generate_pls_channels(labelled_stack, labelled_stack.m + 1)

    def test_early_stop(self):
        # rank-1 data: X^T y vanishes after the first component
        x = np.outer(np.arange(6.0), [1.0, 2.0, 3.0])
        stack = ImageStack(x, [0, 0, 0, 1, 1, 1], 1, 3)
        with pytest.warns(EarlyStopWarning):
            ch = generate_pls_channels(stack, 3)
        assert ch.d == 1
