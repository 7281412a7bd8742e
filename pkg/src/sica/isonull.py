"""Thresholds for independent components under the isotropy null.

Under the null hypothesis every direction of the whitened feature space is
equivalent, so the distribution of an IC value is that of a projection
``omega^T B`` of the components on a random unit direction. It can be
sampled from the data (``empirical``) or, since projections of unit-variance
components tend to a unit Gaussian, taken as ``N(0, 1)`` (``gaussian``).

Thresholds control the per-voxel false-positive rate. No correction for the
number of voxels or components is applied.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import stats

from .datamodel import ComponentSet, PreconditionError, ThresholdResult, whiteness_error

DEFAULT_N_DIRECTIONS = 1000
MIN_STABLE_DIRECTIONS = 50
_BLOCK = 64


class UnstableNullWarning(UserWarning):
    """Too few directions were sampled for a stable tail estimate."""


@dataclass(frozen=True)
class NullModel:
    """Null distribution of absolute IC values.

    ``samples`` holds the pooled ``|omega^T B|`` values sorted ascending and
    is present only for the empirical kind.
    """

    kind: str
    samples: Optional[np.ndarray] = None
    n_directions: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("empirical", "gaussian"):
            raise PreconditionError(f"unknown null kind {self.kind!r}")
        if self.kind == "empirical":
            if self.samples is None:
                raise PreconditionError("empirical null needs samples")
            s = np.array(self.samples, dtype=np.float64).ravel()
            if np.any(~np.isfinite(s)) or np.any(s < 0):
                raise PreconditionError("null samples must be finite and nonnegative")
            s.sort()
            s.setflags(write=False)
            object.__setattr__(self, "samples", s)
        elif self.samples is not None:
            raise PreconditionError("gaussian null carries no samples")

    def sf(self, tau) -> np.ndarray:
        """Null probability that an absolute IC value exceeds ``tau``."""
        tau = np.asarray(tau, dtype=np.float64)
        if self.kind == "gaussian":
            return 2.0 * stats.norm.sf(tau)
        n = self.samples.size
        return (n - np.searchsorted(self.samples, tau, side="right")) / n


def gaussian_null() -> NullModel:
    return NullModel("gaussian")


def random_directions(n_components: int, n_directions: int, seed: int) -> np.ndarray:
    """Unit vectors drawn uniformly on the sphere, one per row.

    Directions are generated in fixed blocks, each from its own counter
    derived child seed, so the result does not depend on how blocks are
    scheduled.
    """
    root = np.random.SeedSequence(int(seed))
    n_blocks = -(-n_directions // _BLOCK)
    out = np.empty((n_directions, n_components))
    for b, child in enumerate(root.spawn(n_blocks)):
        lo = b * _BLOCK
        hi = min(lo + _BLOCK, n_directions)
        out[lo:hi] = np.random.default_rng(child).standard_normal((hi - lo, n_components))
    norms = np.linalg.norm(out, axis=1, keepdims=True)
    # measure-zero event; redraw is not worth the nondeterminism
    norms[norms == 0] = 1.0
    return out / norms


def _check_unit_variance(b: ComponentSet):
    if b.whitened:
        return
    _, var_err, _ = whiteness_error(b.patterns)
    if var_err > 1e-6:
        raise PreconditionError(
            f"components must have unit-variance rows (deviation {var_err:.3g})"
        )


def null_from_directions(b: ComponentSet, directions: np.ndarray, seed: int = 0) -> NullModel:
    """Empirical null from explicitly given unit directions."""
    _check_unit_variance(b)
    directions = np.atleast_2d(np.asarray(directions, dtype=np.float64))
    if directions.shape[1] != b.n_components:
        raise PreconditionError(
            f"directions have dimension {directions.shape[1]}, "
            f"components {b.n_components}"
        )
    norms = np.linalg.norm(directions, axis=1)
    if np.any(np.abs(norms - 1.0) > 1e-12):
        raise PreconditionError("directions must be unit vectors")
    samples = np.abs(directions @ b.patterns).ravel()
    return NullModel("empirical", samples=samples, n_directions=directions.shape[0], seed=seed)


def sample_null(b: ComponentSet, n_directions: int = DEFAULT_N_DIRECTIONS, seed: int = 0) -> NullModel:
    """Sample the isotropy null by projecting components on random directions.

    Parameters
    ----------
    b : ComponentSet
        Unit-variance components (whitened PCA output or ICA sources).
    n_directions : int
        Number of random unit directions. Fewer than 50 triggers an
        :class:`UnstableNullWarning`.
    seed : int
        Seed for the directions.

    Returns
    -------
    NullModel
        Pooled ``n_directions * n_voxels`` absolute projections.
    """
    if n_directions < 1:
        raise PreconditionError("n_directions must be positive")
    if n_directions < MIN_STABLE_DIRECTIONS:
        warnings.warn(
            f"only {n_directions} directions sampled; null tail is unstable",
            UnstableNullWarning,
            stacklevel=2,
        )
    directions = random_directions(b.n_components, n_directions, seed)
    return null_from_directions(b, directions, seed=seed)


def threshold_for_pvalue(null: NullModel, alpha: float) -> float:
    """Threshold ``tau`` such that the null exceedance probability is ``alpha``."""
    alpha = float(alpha)
    if not 0.0 < alpha <= 0.5:
        raise PreconditionError(f"alpha must lie in (0, 0.5], got {alpha}")
    if null.kind == "gaussian":
        return float(stats.norm.isf(alpha / 2.0))
    n = null.samples.size
    if n < 10.0 / alpha:
        raise PreconditionError(
            f"empirical null has {n} samples; alpha={alpha} needs at least {int(np.ceil(10 / alpha))}"
        )
    return float(np.quantile(null.samples, 1.0 - alpha, method="linear"))


def apply_threshold(b: ComponentSet, tau: float, alpha: float, method: str = "gaussian") -> ThresholdResult:
    """Select voxels whose absolute component value exceeds ``tau``."""
    if not tau >= 0:
        raise PreconditionError(f"tau must be nonnegative, got {tau}")
    supports = np.abs(b.patterns) > tau
    return ThresholdResult(alpha=alpha, tau=tau, supports=supports, method=method)


def threshold_components(b: ComponentSet, alpha: float, null: Optional[NullModel] = None) -> ThresholdResult:
    """Convenience wrapper: calibrate ``tau`` on ``null`` and apply it."""
    null = gaussian_null() if null is None else null
    tau = threshold_for_pvalue(null, alpha)
    return apply_threshold(b, tau, alpha, method=null.kind)
