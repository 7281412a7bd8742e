"""Synthetic sparse-source datasets with a known ground truth.

Sources are maps made of one or two rectangles of uniformly active pixels.
They are smoothed, mixed by a random rotation and confounded by spatially
smooth noise: a Gaussian random field mixed with the sources and an optional
spiky super-Gaussian field (cubed smoothed Gaussian field) added in the
observation basis::

    C = M A + lambda * (cos(theta) * M E_g + sin(theta) * E_ng)

``lambda`` is set per component so that the noise term has standard
deviation ``sigma`` exactly.
"""

from __future__ import annotations

import functools
import json
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy import ndimage

from .datamodel import (
    ComponentSet,
    MixingMatrix,
    PreconditionError,
    SicaError,
    read_matrix,
    write_matrix,
)

FWHM_TO_STD = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))
# pixels used when estimating the kurtosis of a noise mix
KURTOSIS_PIXELS = 1_000_000
MAX_PLACEMENT_ATTEMPTS = 100
FRAGMENT_COVERAGE = 0.25
FRAGMENT_PATCH_FWHM = 4.0
# theta is a property of the noise model, not of one draw: solve it on a
# fixed set of fields so every simulation of a condition shares it
THETA_SEED = 20_150_401


class PlacementError(SicaError):
    """Rectangles could not be placed on the grid."""


def kernel_std(fwhm: float) -> float:
    return fwhm * FWHM_TO_STD


@dataclass(frozen=True)
class SimConfig:
    """Parameters of one synthetic dataset.

    ``side_range`` bounds rectangle side lengths in pixels. When
    ``target_kurtosis`` is set, ``theta`` is solved from it. The last
    ``n_fragmented`` sources are diffuse patchy maps with an empty support,
    scaled to standard deviation ``fragment_std``.
    """

    grid: Tuple[int, int] = (80, 80)
    n_sources: int = 9
    rect_amplitude: float = 1.0
    sigma: float = 0.15
    theta: float = 0.0
    target_kurtosis: Optional[float] = None
    fwhm: float = 2.0
    seed: int = 0
    side_range: Tuple[int, int] = (3, 5)
    smooth_sources: bool = True
    n_fragmented: int = 0
    fragment_std: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "grid", tuple(int(g) for g in self.grid))
        object.__setattr__(self, "side_range", tuple(int(s) for s in self.side_range))
        self.validate()

    def validate(self) -> None:
        if len(self.grid) != 2 or min(self.grid) < 8:
            raise PreconditionError(f"grid: dimensions must be >= 8, got {self.grid}")
        if self.n_sources < 1:
            raise PreconditionError("n_sources: must be positive")
        if not self.sigma >= 0:
            raise PreconditionError(f"sigma: must be nonnegative, got {self.sigma}")
        if not 0.0 <= self.theta <= math.pi / 2:
            raise PreconditionError(f"theta: must lie in [0, pi/2], got {self.theta}")
        if self.target_kurtosis is not None and not self.target_kurtosis >= 3.0:
            raise PreconditionError(f"target_kurtosis: must be >= 3, got {self.target_kurtosis}")
        if not self.fwhm > 0:
            raise PreconditionError(f"fwhm: must be positive, got {self.fwhm}")
        if not self.rect_amplitude >= 0:
            raise PreconditionError("rect_amplitude: must be nonnegative")
        lo, hi = self.side_range
        if not 1 <= lo <= hi:
            raise PreconditionError(f"side_range: invalid {self.side_range}")
        if not 0 <= self.n_fragmented <= self.n_sources:
            raise PreconditionError("n_fragmented: must lie in [0, n_sources]")
        if not self.fragment_std >= 0:
            raise PreconditionError("fragment_std: must be nonnegative")
        if not 0 <= int(self.seed) < 2 ** 64:
            raise PreconditionError("seed: must be a 64-bit unsigned integer")

    @property
    def n_voxels(self) -> int:
        return self.grid[0] * self.grid[1]

    def to_json(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        d["side_range"] = list(self.side_range)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SimConfig":
        d = dict(d)
        d.pop("solved_theta", None)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        if "side_range" in d:
            d["side_range"] = tuple(d["side_range"])
        return cls(**d)


@dataclass(frozen=True)
class SimTruth:
    """A simulated dataset and everything needed to score it.

    Attributes
    ----------
    sources : ndarray (n_sources, n_voxels)
        Unsmoothed rectangle maps; zero rows for fragmented sources.
    supports : ndarray of bool
        ``sources != 0``.
    clean : ndarray (n_sources, n_voxels)
        What is mixed: smoothed sources plus fragmented maps.
    mixing : MixingMatrix
        Rotation with determinant +1.
    observed : ComponentSet
        ``mixing.m @ clean + noise``.
    noise : ndarray (n_sources, n_voxels)
        Total noise term, row standard deviation ``sigma``.
    theta : float
        Gaussian/super-Gaussian balance actually used.
    noise_scale : ndarray
        Per-component ``lambda``.
    """

    sources: np.ndarray
    supports: np.ndarray
    clean: np.ndarray
    mixing: MixingMatrix
    observed: ComponentSet
    noise: np.ndarray
    theta: float
    noise_scale: np.ndarray
    config: SimConfig = field(default_factory=SimConfig)


def _standardize(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    sd = x.std()
    if sd == 0:
        return x
    return x / sd


def _smooth(img: np.ndarray, fwhm: float, mode: str) -> np.ndarray:
    return ndimage.gaussian_filter(img, sigma=kernel_std(fwhm), mode=mode)


def make_sources(config: SimConfig, seed=None):
    """Draw rectangle source maps.

    Returns
    -------
    sources : ndarray (n_sources, n_voxels)
        ``rect_amplitude`` inside rectangles, 0 elsewhere; fragmented rows
        are zero.
    supports : ndarray of bool
    """
    rng = np.random.default_rng(_seeds(config)["sources"] if seed is None else seed)
    h, w = config.grid
    lo, hi = config.side_range
    if lo > min(h, w):
        raise PlacementError(f"sides of {lo} pixels do not fit in grid {config.grid}")
    n_rect_sources = config.n_sources - config.n_fragmented
    maps = np.zeros((config.n_sources, h, w))
    masks = np.zeros((config.n_sources, h, w), dtype=bool)
    for i in range(n_rect_sources):
        n_rect = int(rng.integers(1, 3))
        for _ in range(n_rect):
            for _attempt in range(MAX_PLACEMENT_ATTEMPTS):
                rh, rw = (int(v) for v in rng.integers(lo, min(hi, h, w) + 1, size=2))
                top = int(rng.integers(0, h - rh + 1))
                left = int(rng.integers(0, w - rw + 1))
                if not masks[i, top:top + rh, left:left + rw].any():
                    masks[i, top:top + rh, left:left + rw] = True
                    break
            else:
                raise PlacementError(
                    f"could not place rectangle for source {i} after "
                    f"{MAX_PLACEMENT_ATTEMPTS} attempts; grid too small"
                )
    maps[masks] = config.rect_amplitude
    sources = maps.reshape(config.n_sources, -1)
    return sources, sources != 0


def gaussian_field(grid, fwhm: float, seed) -> np.ndarray:
    """Smoothed white-noise map standardized to mean 0, variance 1.

    The kernel is an isotropic Gaussian of standard deviation
    ``fwhm / (2 sqrt(2 ln 2))`` with periodic boundaries.
    """
    if not fwhm > 0:
        raise PreconditionError("fwhm must be positive")
    rng = np.random.default_rng(seed)
    white = rng.standard_normal(tuple(grid))
    return _standardize(_smooth(white, fwhm, mode="wrap"))


def supergaussian_field(grid, fwhm: float, seed) -> np.ndarray:
    """Cube of :func:`gaussian_field`, restandardized; heavy tailed and spiky."""
    return _standardize(gaussian_field(grid, fwhm, seed) ** 3)


def fragmented_field(grid, fwhm: float, seed, coverage: float = FRAGMENT_COVERAGE,
                     patch_fwhm: float = FRAGMENT_PATCH_FWHM) -> np.ndarray:
    """Diffuse map of many flat patches of either sign, standardized.

    Patches are where a coarse Gaussian field is largest in magnitude,
    covering about ``coverage`` of the grid; they carry the sign of that
    field and are then smoothed with ``fwhm``. No region stands out.
    """
    if not 0 < coverage < 1:
        raise PreconditionError("coverage must lie in (0, 1)")
    coarse = gaussian_field(grid, patch_fwhm, seed)
    mag = np.abs(coarse)
    patches = np.where(mag > np.quantile(mag, 1.0 - coverage), np.sign(coarse), 0.0)
    return _standardize(_smooth(patches, fwhm, mode="wrap"))


def sample_kurtosis(x) -> float:
    """Pearson kurtosis (3 for a Gaussian)."""
    x = np.asarray(x, dtype=np.float64).ravel()
    x = x - x.mean()
    m2 = np.mean(x ** 2)
    return float(np.mean(x ** 4) / m2 ** 2)


def _tiles(grid, fwhm, seed, n_pixels):
    h, w = grid
    n_tiles = -(-n_pixels // (h * w))
    g_seq, ng_seq = np.random.SeedSequence(int(seed)).spawn(2)
    eg = np.concatenate([gaussian_field(grid, fwhm, s).ravel() for s in g_seq.spawn(n_tiles)])
    eng = np.concatenate([supergaussian_field(grid, fwhm, s).ravel() for s in ng_seq.spawn(n_tiles)])
    return eg, eng


@functools.lru_cache(maxsize=2)
def _kurtosis_curve(grid, fwhm, seed, n_pixels):
    eg, eng = _tiles(grid, fwhm, seed, n_pixels)
    # cached moments of the two fields make kurtosis(theta) cheap
    def at(theta):
        return sample_kurtosis(math.cos(theta) * eg + math.sin(theta) * eng)
    return at


def mixed_kurtosis(theta: float, fwhm: float, grid=(80, 80), seed: int = 0,
                   n_pixels: int = KURTOSIS_PIXELS) -> float:
    """Sample kurtosis of ``cos(theta) E_g + sin(theta) E_ng`` on tiled fields."""
    return _kurtosis_curve(tuple(grid), float(fwhm), int(seed), int(n_pixels))(theta)


def solve_theta(target_kurtosis: float, fwhm: float, grid=(80, 80), seed: int = 0,
                n_pixels: int = KURTOSIS_PIXELS, tol: float = 1e-3) -> float:
    """Bisect ``theta`` so the noise mix reaches ``target_kurtosis``.

    Kurtosis is estimated on at least ``n_pixels`` pixels of tiled fields.
    The Gaussian endpoint is returned for targets at or below the sample
    kurtosis of the pure Gaussian field, the super-Gaussian endpoint for the
    sample kurtosis of the pure super-Gaussian field.
    """
    if not target_kurtosis >= 3.0:
        raise PreconditionError(f"target kurtosis must be >= 3, got {target_kurtosis}")
    return _solve_theta(float(target_kurtosis), float(fwhm), tuple(int(g) for g in grid),
                        int(seed), int(n_pixels), float(tol))


@functools.lru_cache(maxsize=64)
def _solve_theta(target_kurtosis, fwhm, grid, seed, n_pixels, tol):
    kurt = _kurtosis_curve(grid, fwhm, seed, n_pixels)
    k_lo, k_hi = kurt(0.0), kurt(math.pi / 2)
    # the sampled Gaussian endpoint may sit slightly below 3
    if target_kurtosis <= max(k_lo, 3.0):
        return 0.0
    if target_kurtosis >= k_hi:
        if target_kurtosis - k_hi <= 1e-9 * k_hi:
            return math.pi / 2
        raise PreconditionError(
            f"target kurtosis {target_kurtosis} outside achievable range [3, {k_hi:.3f}]"
        )
    lo, hi = 0.0, math.pi / 2
    while hi - lo > 1e-12:
        mid = 0.5 * (lo + hi)
        k = kurt(mid)
        if abs(k - target_kurtosis) < tol:
            return mid
        if k < target_kurtosis:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def random_rotation(n: int, rng: np.random.Generator) -> np.ndarray:
    """Haar orthogonal matrix with determinant forced to +1."""
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    q = q * d[None, :]
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def _seeds(config: SimConfig) -> dict:
    names = ("sources", "mixing", "gaussian", "supergaussian", "fragments")
    children = np.random.SeedSequence(int(config.seed)).spawn(len(names))
    return dict(zip(names, children))


def resolved_theta(config: SimConfig) -> float:
    """Theta used by :func:`simulate`; solved on fields seeded by ``THETA_SEED``."""
    if config.target_kurtosis is None:
        return config.theta
    return solve_theta(config.target_kurtosis, config.fwhm, config.grid, THETA_SEED)


def simulate(config: SimConfig) -> SimTruth:
    """Generate one dataset following ``config``; deterministic in its seed."""
    seeds = _seeds(config)
    k, grid = config.n_sources, config.grid
    sources, supports = make_sources(config, seed=seeds["sources"])

    if config.smooth_sources:
        clean = np.stack([
            _smooth(s.reshape(grid), config.fwhm, mode="constant").ravel() for s in sources
        ])
    else:
        clean = sources.copy()
    if config.n_fragmented:
        frag_seeds = seeds["fragments"].spawn(config.n_fragmented)
        for j, s in enumerate(frag_seeds):
            clean[k - config.n_fragmented + j] = (
                config.fragment_std * fragmented_field(grid, config.fwhm, s).ravel()
            )

    m = random_rotation(k, np.random.default_rng(seeds["mixing"]))
    theta = resolved_theta(config)

    e_g = np.stack([gaussian_field(grid, config.fwhm, s).ravel()
                    for s in seeds["gaussian"].spawn(k)])
    raw_noise = math.cos(theta) * (m @ e_g)
    if theta > 0:
        e_ng = np.stack([supergaussian_field(grid, config.fwhm, s).ravel()
                         for s in seeds["supergaussian"].spawn(k)])
        raw_noise = raw_noise + math.sin(theta) * e_ng
    raw_noise = raw_noise - raw_noise.mean(axis=1, keepdims=True)
    scale = config.sigma / raw_noise.std(axis=1)
    noise = raw_noise * scale[:, None]

    observed = m @ clean + noise
    return SimTruth(
        sources=sources,
        supports=supports,
        clean=clean,
        mixing=MixingMatrix(m),
        observed=ComponentSet(observed, grid=grid),
        noise=noise,
        theta=float(theta),
        noise_scale=scale,
        config=config,
    )


SIM_FILES = ("sources.sica", "observed.sica", "mixing.sica", "supports.sica", "config.json")


def save_truth(truth: SimTruth, directory) -> Path:
    """Persist a simulation as a directory of ``SICA1`` files plus ``config.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    cfg = truth.config
    write_matrix(truth.sources, d / "sources.sica")
    write_matrix(truth.observed.patterns, d / "observed.sica")
    write_matrix(truth.mixing.m, d / "mixing.sica")
    write_matrix(truth.supports.astype(np.float64), d / "supports.sica")
    meta = cfg.to_json()
    meta["solved_theta"] = truth.theta
    (d / "config.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return d


def load_truth(directory) -> SimTruth:
    """Rebuild a :class:`SimTruth` saved by :func:`save_truth`.

    Only the persisted matrices are read back; ``clean`` and ``noise`` are
    regenerated from the stored configuration.
    """
    d = Path(directory)
    meta = json.loads((d / "config.json").read_text())
    cfg = SimConfig.from_json(meta)
    regenerated = simulate(cfg)
    observed = read_matrix(d / "observed.sica")
    if not np.array_equal(observed, regenerated.observed.patterns):
        raise SicaError(f"{d}: stored observations do not match their configuration")
    return replace(
        regenerated,
        sources=read_matrix(d / "sources.sica"),
        supports=read_matrix(d / "supports.sica") != 0,
    )
