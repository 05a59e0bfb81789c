import math

import numpy as np
import pytest

from selm import lm, training
from selm.projection import build_projection, project

TINY = lm.ModelConfig(
    vocab_size=256, context_len=16, n_layers=1, n_heads=2, d_model=8, d_ff=16
)


def tiny_setup(d=32, seed=0):
    params = lm.init_params(TINY, seed=seed)
    spec = build_projection(bytes(range(32)), d, lm.n_params(TINY))
    return params, spec


def fine_grid_omega(theta, sigma):
    """Independent oracle: midpoint-rule integral of the ECDF-vs-CDF gap
    curve on a uniform grid with step <= sigma / 1e4."""
    x = np.sort(theta)
    d = len(x)
    gap = np.abs(np.arange(d) / d - training.normal_cdf(x / sigma))
    span = x[-1] - x[0]
    n = max(2, int(math.ceil(span / (sigma / 1e4))) + 1)
    grid = np.linspace(x[0], x[-1], n)
    mids = 0.5 * (grid[1:] + grid[:-1])
    return float((np.interp(mids, x, gap) * np.diff(grid)).sum())


class TestNormalCdf:
    def test_against_high_precision_erf(self):
        import mpmath

        xs = np.linspace(-6, 6, 101)
        ours = training.normal_cdf(xs)
        for x, v in zip(xs, ours):
            ref = float(0.5 * (1 + mpmath.erf(x / mpmath.sqrt(2))))
            assert abs(v - ref) <= 1e-7

    def test_symmetry(self):
        xs = np.array([0.0, 0.5, 1.7])
        assert np.allclose(
            training.normal_cdf(xs) + training.normal_cdf(-xs), 1.0, atol=1e-15
        )


class TestLambdaSchedule:
    def test_endpoints(self):
        assert training.lambda_schedule(0, 1e5, 500) == 0.0
        assert training.lambda_schedule(500, 1e5, 500) == 1e5
        assert training.lambda_schedule(900, 1e5, 500) == 1e5

    def test_paper_midpoint(self):
        assert training.lambda_schedule(250, 1e5, 500) == pytest.approx(5e4)

    def test_monotone_during_warmup(self):
        vals = [training.lambda_schedule(e, 2.0, 100) for e in range(150)]
        assert all(b >= a for a, b in zip(vals, vals[1:]))


class TestL2TargetPenalty:
    def test_zero_at_target_norm(self):
        theta = np.array([3.0, 4.0])  # norm 5
        value, grad = training.l2_target_penalty(theta, alpha=5.0, lam=2.0)
        assert value == pytest.approx(0.0, abs=1e-12)

    def test_subgradient_at_origin(self):
        value, grad = training.l2_target_penalty(np.zeros(4), alpha=1.5, lam=2.0)
        assert value == pytest.approx(3.0)
        assert np.array_equal(grad, np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        theta = rng.standard_normal(16)
        value, grad = training.l2_target_penalty(theta, alpha=1.0, lam=3.0)
        h = 1e-7
        for i in range(0, 16, 3):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (
                training.l2_target_penalty(up, 1.0, 3.0)[0]
                - training.l2_target_penalty(dn, 1.0, 3.0)[0]
            ) / (2 * h)
            assert abs(fd - grad[i]) / max(abs(fd), 1e-12) < 1e-5


class TestWassersteinPenalty:
    def test_nonnegative(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            theta = rng.standard_normal(rng.integers(2, 40))
            value, _ = training.wasserstein_penalty(theta, 0.7, 1.0)
            assert value >= 0.0

    def test_value_matches_brute_force_oracle(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            theta = rng.standard_normal(64) * rng.uniform(0.5, 2.0)
            sigma = rng.uniform(0.5, 2.0)
            value, _ = training.wasserstein_penalty(theta, sigma, 1.0)
            oracle = fine_grid_omega(theta, sigma)
            assert abs(value - oracle) <= 1e-6 * abs(oracle)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(4)
        theta = rng.standard_normal(64)
        _, grad = training.wasserstein_penalty(theta, 0.8, 2.5)
        h = 1e-7
        for i in rng.choice(64, size=20, replace=False):
            up, dn = theta.copy(), theta.copy()
            up[i] += h
            dn[i] -= h
            fd = (
                training.wasserstein_penalty(up, 0.8, 2.5)[0]
                - training.wasserstein_penalty(dn, 0.8, 2.5)[0]
            ) / (2 * h)
            assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-12) < 1e-3

    def test_lambda_scales_linearly(self):
        theta = np.random.default_rng(5).standard_normal(16)
        v1, g1 = training.wasserstein_penalty(theta, 1.0, 1.0)
        v3, g3 = training.wasserstein_penalty(theta, 1.0, 3.0)
        assert v3 == pytest.approx(3 * v1)
        assert np.allclose(g3, 3 * g1)

    def test_rejects_scalar_inputs(self):
        with pytest.raises(ValueError):
            training.wasserstein_penalty(np.array([1.0]), 1.0, 1.0)
        with pytest.raises(ValueError):
            training.wasserstein_penalty(np.array([1.0, 2.0]), 0.0, 1.0)


class TestConfigs:
    def test_train_config_validation(self):
        with pytest.raises(ValueError):
            training.TrainConfig(d=0)
        with pytest.raises(ValueError):
            training.TrainConfig(d=8, lr0=0.0)
        with pytest.raises(ValueError):
            training.TrainConfig(d=8, max_epochs=0)
        with pytest.raises(ValueError):
            training.TrainConfig(d=8, verify_every=0)

    def test_regularizer_validation(self):
        with pytest.raises(ValueError):
            training.RegularizerConfig(kind="bogus")
        with pytest.raises(ValueError):
            training.RegularizerConfig(kind="wasserstein", sigma=0.0)
        with pytest.raises(ValueError):
            training.RegularizerConfig(warmup_epochs=0)


class TestMemorize:
    def test_one_token_message_converges(self):
        params, spec = tiny_setup()
        ex = lm.make_example([10, 20, 30, 40], [7])
        cfg = training.TrainConfig(d=32, lr0=3e-4, max_epochs=500)
        res = training.memorize(cfg, TINY, params, spec, [ex])
        assert res.converged
        assert res.theta_d_star.dtype == np.float32
        decoded = lm.greedy_decode(
            TINY,
            lm.ModelParams(
                TINY,
                params.flat + project(spec, res.theta_d_star.astype(np.float64)),
            ),
            ex.prompt,
            1,
        )
        assert decoded.tolist() == [7]

    def test_budget_exhaustion_contract(self):
        params, spec = tiny_setup()
        rng = np.random.default_rng(6)
        ex = lm.make_example(rng.integers(0, 256, 4), rng.integers(0, 256, 10))
        cfg = training.TrainConfig(d=32, lr0=1e-6, max_epochs=1)
        res = training.memorize(cfg, TINY, params, spec, [ex])
        assert not res.converged
        assert res.epochs_used == 1

    def test_determinism(self):
        params, spec = tiny_setup()
        ex = lm.make_example([1, 2, 3], [9, 9, 4])
        cfg = training.TrainConfig(d=32, lr0=3e-4, max_epochs=300)
        a = training.memorize(cfg, TINY, params, spec, [ex])
        b = training.memorize(cfg, TINY, params, spec, [ex])
        assert a.converged == b.converged
        assert a.epochs_used == b.epochs_used
        assert np.array_equal(a.theta_d_star, b.theta_d_star)

    def test_convergence_implies_decode(self):
        params, spec = tiny_setup(seed=2)
        rng = np.random.default_rng(7)
        examples = [
            lm.make_example(rng.integers(0, 256, 3), rng.integers(0, 256, 5))
            for _ in range(2)
        ]
        cfg = training.TrainConfig(d=32, lr0=3e-4, max_epochs=2000)
        res = training.memorize(cfg, TINY, params, spec, examples)
        assert res.converged
        theta_D = params.flat + project(spec, res.theta_d_star.astype(np.float64))
        star = lm.ModelParams(TINY, theta_D)
        for ex in examples:
            out = lm.greedy_decode(TINY, star, ex.prompt, ex.chunk.size)
            assert np.array_equal(out, ex.chunk)

    def test_dimension_mismatch_rejected(self):
        params, spec = tiny_setup()
        ex = lm.make_example([1], [2])
        cfg = training.TrainConfig(d=16, lr0=1e-4)  # spec has d=32
        with pytest.raises(training.ConfigurationError):
            training.memorize(cfg, TINY, params, spec, [ex])

    def test_l2_regularizer_pulls_norm_toward_target(self):
        """Matched runs: with the l2-target penalty the final norm must sit
        closer to alpha than the unregularized norm does."""
        params, spec = tiny_setup(seed=3)
        ex = lm.make_example([5, 6, 7], [1, 2, 3, 4])
        base_cfg = training.TrainConfig(d=32, lr0=3e-4, max_epochs=2000)
        base = training.memorize(base_cfg, TINY, params, spec, [ex])
        assert base.converged
        base_norm = float(np.linalg.norm(base.theta_d_star.astype(np.float64)))
        alpha = 2.0 * base_norm
        reg_cfg = training.TrainConfig(
            d=32,
            lr0=3e-4,
            max_epochs=2000,
            regularizer=training.RegularizerConfig(
                kind="l2_target", alpha=alpha, lambda_max=5.0, warmup_epochs=5
            ),
        )
        reg = training.memorize(reg_cfg, TINY, params, spec, [ex])
        assert reg.converged
        reg_norm = float(np.linalg.norm(reg.theta_d_star.astype(np.float64)))
        assert abs(reg_norm - alpha) < abs(base_norm - alpha)


def test_composite_gradient_matches_finite_differences():
    """d/d theta of [masked CE at theta_D0 + P(theta) plus the regularizer]
    via adjoint + analytic penalty gradient, against central differences."""
    params, spec = tiny_setup(seed=4)
    rng = np.random.default_rng(8)
    ex = lm.make_example(rng.integers(0, 256, 4), rng.integers(0, 256, 6))
    sigma, lam = 3e-3, 2.0

    def objective_and_grad(theta):
        theta_D = params.flat + project(spec, theta)
        loss, grad_D = lm.forward_loss(TINY, lm.ModelParams(TINY, theta_D), [ex])
        from selm.projection import project_adjoint

        pv, pg = training.wasserstein_penalty(theta, sigma, lam)
        return loss + pv, project_adjoint(spec, grad_D) + pg

    theta = rng.standard_normal(32) * 1e-3
    _, grad = objective_and_grad(theta)
    h = 1e-6
    for i in rng.choice(32, size=12, replace=False):
        up, dn = theta.copy(), theta.copy()
        up[i] += h
        dn[i] -= h
        fd = (objective_and_grad(up)[0] - objective_and_grad(dn)[0]) / (2 * h)
        assert abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-8) < 1e-3
