"""PCA estimate of the signal subspace with whitened spatial components."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datamodel import ComponentSet, Dataset, PreconditionError


class RankError(PreconditionError):
    """More components were requested than the data rank supports."""

    def __init__(self, requested: int, rank: int):
        super().__init__(
            f"requested {requested} components but the centered data has rank {rank}"
        )
        self.requested = requested
        self.rank = rank


@dataclass(frozen=True)
class PcaFit:
    """Truncated PCA of a dataset.

    Attributes
    ----------
    components : ComponentSet
        Whitened spatial patterns, ``n_components x n_voxels``.
    loadings : ndarray, shape (n_time, n_components)
        Time courses; ``loadings @ patterns`` is the rank-k reconstruction
        of the centered data.
    singular_values : ndarray
        Full singular spectrum of the centered data, descending.
    residual_variance : float
        Mean squared entry of the discarded part of the centered data.
    transform : ndarray, shape (n_components, n_time)
        Linear map taking centered data rows to whitened patterns.
    """

    components: ComponentSet
    loadings: np.ndarray
    singular_values: np.ndarray
    residual_variance: float
    transform: np.ndarray

    @property
    def n_components(self) -> int:
        return self.components.n_components


def center(y: np.ndarray, center_time: bool = True) -> np.ndarray:
    """Remove voxel time means (optional) then per-frame spatial means."""
    y = np.asarray(y, dtype=np.float64)
    if center_time:
        y = y - y.mean(axis=0, keepdims=True)
    return y - y.mean(axis=1, keepdims=True)


def numerical_rank(s: np.ndarray, shape) -> int:
    if s.size == 0 or s[0] == 0.0:
        return 0
    tol = s[0] * max(shape) * np.finfo(np.float64).eps
    return int(np.sum(s > tol))


def fit_pca(y: Dataset, n_components: int, center_time: bool = True) -> PcaFit:
    """Project a dataset on its leading principal components and whiten.

    Parameters
    ----------
    y : Dataset
        Observations, time points by voxels.
    n_components : int
        Dimension of the retained subspace.
    center_time : bool
        Remove each voxel's mean over time before the decomposition. Each
        frame's spatial mean is always removed so that whitened patterns are
        zero-mean. Pass ``False`` when the rows of ``y`` are already
        components rather than time frames.

    Returns
    -------
    PcaFit
    """
    if not isinstance(y, Dataset):
        y = Dataset(y)
    n_components = int(n_components)
    if n_components < 1:
        raise PreconditionError("n_components must be positive")
    n_time, n_voxels = y.data.shape
    if n_components > min(n_time, n_voxels):
        raise RankError(n_components, min(n_time, n_voxels))

    yc = center(y.data, center_time=center_time)
    if not np.any(yc):
        raise PreconditionError("input is constant after centering")
    u, s, vt = np.linalg.svd(yc, full_matrices=False)
    rank = numerical_rank(s, yc.shape)
    if rank == 0:
        raise PreconditionError("input is constant after centering")
    if n_components > rank:
        raise RankError(n_components, rank)

    k = n_components
    scale = np.sqrt(n_voxels)
    patterns = vt[:k] * scale
    loadings = u[:, :k] * (s[:k] / scale)
    # deterministic sign: largest-magnitude entry of every pattern positive
    idx = np.argmax(np.abs(patterns), axis=1)
    signs = np.sign(patterns[np.arange(k), idx])
    signs[signs == 0] = 1.0
    patterns *= signs[:, None]
    loadings *= signs[None, :]
    # exact zero row means; SVD leaves O(eps) residue
    patterns -= patterns.mean(axis=1, keepdims=True)

    residual = yc - loadings @ patterns
    residual_variance = float(np.mean(residual ** 2))
    transform = (u[:, :k] * (signs * scale / s[:k])[None, :]).T

    components = ComponentSet(patterns, loadings=loadings, grid=y.grid, whitened=True)
    return PcaFit(
        components=components,
        loadings=components.loadings,
        singular_values=s,
        residual_variance=residual_variance,
        transform=transform,
    )


def whiten_components(c, grid=None) -> PcaFit:
    """Whiten an already-reduced component matrix (components by voxels)."""
    c = np.asarray(c, dtype=np.float64)
    return fit_pca(Dataset(c, grid=grid), c.shape[0], center_time=False)
