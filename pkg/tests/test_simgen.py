import math

import numpy as np
import pytest
from scipy import stats

from sica.datamodel import PreconditionError, read_matrix
from sica.simgen import (
    SIM_FILES,
    SimConfig,
    fragmented_field,
    gaussian_field,
    kernel_std,
    load_truth,
    make_sources,
    mixed_kurtosis,
    random_rotation,
    resolved_theta,
    sample_kurtosis,
    save_truth,
    simulate,
    solve_theta,
    supergaussian_field,
)

GRID = (80, 80)


def test_kernel_std():
    assert kernel_std(2.0) == pytest.approx(0.84932, abs=5e-6)


class TestSources:
    def test_support_fraction(self):
        src, sup = make_sources(SimConfig(seed=3))
        assert src.shape == (9, 6400)
        frac = sup.mean(axis=1)
        # one or two rectangles with sides 3..5 pixels
        assert np.all(frac >= 9 / 6400) and np.all(frac <= 50 / 6400)
        assert set(np.unique(src)) == {0.0, 1.0}

    def test_zero_amplitude(self):
        src, sup = make_sources(SimConfig(rect_amplitude=0.0, seed=3))
        assert not src.any() and not sup.any()

    def test_deterministic(self):
        a, b = make_sources(SimConfig(seed=5)), make_sources(SimConfig(seed=5))
        assert np.array_equal(a[0], b[0])


class TestGaussianField:
    def test_unit_variance(self):
        f = gaussian_field(GRID, 2.0, 0)
        assert f.var() == pytest.approx(1.0, abs=1e-9)
        assert abs(f.mean()) < 1e-12

    def test_lag1_autocorrelation(self):
        # oracle: autocorrelation of the discrete kernel applied to white noise
        s = kernel_std(2.0)
        radius = int(4.0 * s + 0.5)
        k = np.arange(-radius, radius + 1)
        g = np.exp(-k ** 2 / (2 * s * s))
        rho = np.sum(g[:-1] * g[1:]) / np.sum(g * g)
        vals = []
        for seed in range(20):
            f = gaussian_field(GRID, 2.0, seed)
            vals.append(np.mean(f * np.roll(f, 1, axis=0)))
            vals.append(np.mean(f * np.roll(f, 1, axis=1)))
        assert np.mean(vals) == pytest.approx(rho, abs=0.02)

    def test_deterministic(self):
        assert np.array_equal(gaussian_field(GRID, 2.0, 9), gaussian_field(GRID, 2.0, 9))

    def test_bad_fwhm(self):
        with pytest.raises(PreconditionError):
            gaussian_field(GRID, 0.0, 0)


class TestSuperGaussian:
    def test_cube_kurtosis_unsmoothed_limit(self):
        # E[z^12] / E[z^6]^2 = 10395 / 225
        f = supergaussian_field((2000, 2000), 1e-3, 1)
        assert sample_kurtosis(f) == pytest.approx(10395 / 225, rel=0.10)

    def test_symmetric(self):
        # pooled over 20 large fields: the skewness SE of a cubed Gaussian is
        # about sqrt(E z^18 / 15^3 / n), 0.02 here
        pooled = np.concatenate([supergaussian_field((1000, 1000), 2.0, s).ravel() for s in range(20)])
        assert abs(stats.skew(pooled)) < 0.1

    def test_deterministic(self):
        assert np.array_equal(supergaussian_field(GRID, 2.0, 4), supergaussian_field(GRID, 2.0, 4))


class TestSolveTheta:
    def test_gaussian_endpoint(self):
        assert solve_theta(3.0, 2.0, GRID, 0) == 0.0

    def test_kurtosis_four(self):
        theta = solve_theta(4.0, 2.0, GRID, 0)
        assert mixed_kurtosis(theta, 2.0, GRID, 0) == pytest.approx(4.0, abs=0.1)
        # closed form for independent standardized fields: 3 + (K - 3) sin^4 theta
        k_pure = mixed_kurtosis(math.pi / 2, 2.0, GRID, 0)
        oracle = math.asin(((4.0 - 3.0) / (k_pure - 3.0)) ** 0.25)
        assert theta == pytest.approx(oracle, abs=0.02)
        assert solve_theta(4.0, 2.0, GRID, 0) == theta

    def test_pure_endpoint(self):
        k_pure = mixed_kurtosis(math.pi / 2, 2.0, GRID, 0)
        assert solve_theta(k_pure, 2.0, GRID, 0) == pytest.approx(math.pi / 2)

    def test_unreachable(self):
        with pytest.raises(PreconditionError):
            solve_theta(1e4, 2.0, GRID, 0)

    def test_below_gaussian(self):
        with pytest.raises(PreconditionError):
            solve_theta(2.0, 2.0, GRID, 0)


def test_rotation_det_plus_one():
    for s in range(10):
        q = random_rotation(9, np.random.default_rng(s))
        assert np.linalg.norm(q.T @ q - np.eye(9)) < 1e-10
        assert np.linalg.det(q) == pytest.approx(1.0)


class TestSimulate:
    def test_deterministic(self):
        cfg = SimConfig(seed=7, target_kurtosis=4.0)
        a, b = simulate(cfg), simulate(cfg)
        assert a.observed.patterns.tobytes() == b.observed.patterns.tobytes()
        assert a.noise.tobytes() == b.noise.tobytes()
        assert a.mixing.m.tobytes() == b.mixing.m.tobytes()

    def test_seed_changes_output(self):
        a, b = simulate(SimConfig(seed=1)), simulate(SimConfig(seed=2))
        assert not np.array_equal(a.observed.patterns, b.observed.patterns)

    def test_noiseless(self):
        t = simulate(SimConfig(sigma=0.0, seed=2))
        assert np.array_equal(t.observed.patterns, t.mixing.m @ t.clean)

    @pytest.mark.parametrize("kurt", [None, 4.0])
    def test_noise_std(self, kurt):
        t = simulate(SimConfig(sigma=0.2, target_kurtosis=kurt, seed=4))
        assert np.allclose(t.noise.std(axis=1), 0.2, rtol=0.02)

    def test_noise_kurtosis(self):
        # per-row sample kurtosis is noisy; pool each row over 40 seeds
        rows = [simulate(SimConfig(target_kurtosis=4.0, seed=s)).noise for s in range(40)]
        pooled = np.concatenate(rows, axis=1)
        for row in pooled:
            assert sample_kurtosis(row) == pytest.approx(4.0, abs=0.3)

    def test_sparse_scatter(self):
        t = simulate(SimConfig(seed=0))
        b = t.mixing.m.T @ t.observed.patterns
        outside = ~t.supports
        assert np.mean(np.abs(b[outside]) > 3 * t.config.sigma) < 0.01

    def test_fragmented_rows(self):
        t = simulate(SimConfig(n_fragmented=2, seed=1))
        assert not t.supports[-2:].any()
        assert not t.sources[-2:].any()
        assert t.clean[-1].std() == pytest.approx(t.config.fragment_std)

    def test_unsmoothed_sources(self):
        t = simulate(SimConfig(smooth_sources=False, sigma=0.0, seed=1))
        assert np.array_equal(t.clean, t.sources)

    def test_theta_resolved(self):
        cfg = SimConfig(target_kurtosis=4.0)
        assert simulate(cfg).theta == resolved_theta(cfg) > 0


def test_fragmented_field():
    f = fragmented_field(GRID, 2.0, 3)
    assert f.std() == pytest.approx(1.0)
    # no strong region: light tails relative to a Gaussian
    assert np.mean(np.abs(f) > 2.576) < 0.01


@pytest.mark.parametrize("field,value", [
    ("sigma", -1.0), ("theta", 2.0), ("target_kurtosis", 2.5), ("fwhm", 0.0),
    ("n_sources", 0), ("side_range", (5, 3)), ("grid", (4, 4)), ("n_fragmented", 20),
])
def test_config_validation_names_field(field, value):
    with pytest.raises(PreconditionError, match=field):
        SimConfig(**{field: value})


def test_save_and_load(tmp_path):
    t = simulate(SimConfig(seed=12, target_kurtosis=4.0))
    save_truth(t, tmp_path)
    assert sorted(p.name for p in tmp_path.iterdir()) == sorted(SIM_FILES)
    assert np.array_equal(read_matrix(tmp_path / "mixing.sica"), t.mixing.m)
    back = load_truth(tmp_path)
    assert np.array_equal(back.supports, t.supports)
    assert back.theta == t.theta


def test_config_json_roundtrip():
    cfg = SimConfig(grid=(40, 60), sigma=0.3, seed=99, side_range=(4, 6))
    assert SimConfig.from_json(cfg.to_json()) == cfg
