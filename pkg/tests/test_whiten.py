import numpy as np
import pytest
from scipy.linalg import subspace_angles

from sica.datamodel import Dataset, whiteness_error
from sica.whiten import RankError, center, fit_pca, whiten_components


def _orthonormal_zero_mean(rng, n_rows, n_cols):
    """Orthonormal columns, each orthogonal to the all-ones vector."""
    a = rng.standard_normal((n_rows, n_cols))
    a -= a.mean(axis=0)
    q, _ = np.linalg.qr(a)
    return q


def test_recovers_known_subspace(rng):
    u = _orthonormal_zero_mean(rng, 12, 3)
    v = _orthonormal_zero_mean(rng, 400, 3)
    y = u @ np.diag([3.0, 2.0, 1.0]) @ v.T
    fit = fit_pca(Dataset(y), 3)
    # oracle: eigendecomposition of the small time-by-time Gram matrix
    yc = center(y)
    evals, evecs = np.linalg.eigh(yc @ yc.T)
    top = evecs[:, np.argsort(evals)[::-1][:3]]
    oracle = top.T @ yc
    angles = subspace_angles(fit.components.patterns.T, oracle.T)
    assert np.max(angles) < 1e-8
    assert np.allclose(fit.singular_values[:3], [3.0, 2.0, 1.0])


def test_residual_variance_isotropic_noise():
    k, n_time, n_vox = 5, 60, 3000
    ratios = []
    for seed in range(20):
        y = np.random.default_rng(seed).standard_normal((n_time, n_vox))
        fit = fit_pca(Dataset(y), k)
        total = np.mean(center(y) ** 2)
        ratios.append(fit.residual_variance / (total * (1 - k / n_time)))
    assert abs(np.mean(ratios) - 1.0) < 0.10


def test_exact_rank_two(rng):
    u = _orthonormal_zero_mean(rng, 8, 2)
    v = _orthonormal_zero_mean(rng, 100, 2)
    fit = fit_pca(Dataset(u @ np.diag([5.0, 1.0]) @ v.T), 2)
    assert fit.residual_variance < 1e-16


@pytest.mark.parametrize("seed", range(5))
def test_whitened_output(seed):
    y = np.random.default_rng(seed).standard_normal((30, 500)) * np.linspace(1, 3, 500)
    fit = fit_pca(Dataset(y), 7)
    p = fit.components.patterns
    cov = p @ p.T / p.shape[1]
    assert np.max(np.abs(cov - np.eye(7))) < 1e-6
    assert max(whiteness_error(p)) < 1e-6


def test_transform_maps_centered_data(rng):
    y = rng.standard_normal((20, 300))
    fit = fit_pca(Dataset(y), 4)
    assert np.allclose(fit.transform @ center(y), fit.components.patterns, atol=1e-10)


def test_reconstruction(rng):
    y = rng.standard_normal((6, 200))
    fit = fit_pca(Dataset(y), 5)  # rank after centering is 5
    yc = center(y)
    rec = fit.loadings @ fit.components.patterns
    assert np.linalg.norm(rec - yc) / np.linalg.norm(yc) < 1e-8


@pytest.mark.parametrize("c", [0.01, 3.0, 1e4])
def test_scale_equivariance(rng, c):
    y = rng.standard_normal((25, 400))
    a, b = fit_pca(Dataset(y), 6), fit_pca(Dataset(c * y), 6)
    assert np.allclose(b.singular_values, c * a.singular_values, rtol=1e-10)
    signs = np.sign(np.sum(a.components.patterns * b.components.patterns, axis=1))
    assert np.allclose(a.components.patterns, signs[:, None] * b.components.patterns, atol=1e-8)


def test_idempotent_projection(rng):
    y = rng.standard_normal((25, 400))
    a = fit_pca(Dataset(y), 6)
    b = fit_pca(Dataset(a.loadings @ a.components.patterns), 6)
    assert np.max(subspace_angles(a.components.patterns.T, b.components.patterns.T)) < 1e-8


def test_sign_convention(rng):
    fit = fit_pca(Dataset(rng.standard_normal((15, 200))), 4)
    p = fit.components.patterns
    assert np.all(p[np.arange(4), np.argmax(np.abs(p), axis=1)] > 0)


def test_rank_error(rng):
    y = np.outer(rng.standard_normal(10), rng.standard_normal(50))
    with pytest.raises(RankError) as info:
        fit_pca(Dataset(y), 3)
    assert info.value.rank == 1


def test_more_components_than_frames(rng):
    with pytest.raises(RankError):
        fit_pca(Dataset(rng.standard_normal((5, 50))), 6)


def test_constant_input():
    with pytest.raises(ValueError):
        fit_pca(Dataset(np.ones((4, 10))), 1)


def test_whiten_components_keeps_rows(rng):
    c = rng.standard_normal((4, 300))
    fit = whiten_components(c)
    assert fit.n_components == 4
    # rows of c are combinations of the whitened patterns
    coef, *_ = np.linalg.lstsq(fit.components.patterns.T, (c - c.mean(axis=1, keepdims=True)).T, rcond=None)
    resid = fit.components.patterns.T @ coef - (c - c.mean(axis=1, keepdims=True)).T
    assert np.max(np.abs(resid)) < 1e-10
