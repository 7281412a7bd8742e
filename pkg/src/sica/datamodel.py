"""Matrix containers, invariant checks and the ``SICA1`` on-disk format.

Every matrix in the package is a dense, row-major float64 array. Voxel maps
are flattened row-major from ``(height, width)`` grids.

The ``SICA1`` file layout is an ASCII header line ``SICA1 <rows> <cols>\\n``
followed by ``rows * cols`` little-endian IEEE-754 doubles in row-major
order. A JSON sidecar ``<path>.json`` may carry ``seed``, ``created_by`` and
``grid``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Optional, Tuple

import numpy as np

MAGIC = "SICA1"
_MAX_HEADER = 64

Grid = Tuple[int, int]


class SicaError(Exception):
    """Base class for errors raised by this package."""


class PreconditionError(SicaError, ValueError):
    """An input violates the documented precondition of an operation."""


class NonFiniteError(SicaError, ValueError):
    """A matrix contains NaN or infinite entries."""


class MatrixFormatError(SicaError, ValueError):
    """A file does not follow the ``SICA1`` layout."""


class BadMagicError(MatrixFormatError):
    """The header line does not start with a recognised magic token."""


class FormatVersionError(BadMagicError):
    """The header carries a ``SICA`` magic of an unsupported version."""


class PayloadSizeError(MatrixFormatError):
    """The payload length disagrees with the declared dimensions."""


class TruncatedPayloadError(PayloadSizeError):
    """The payload holds fewer values than the header declares."""


def _frozen(a) -> np.ndarray:
    arr = np.array(a, dtype=np.float64, copy=True, order="C")
    arr.setflags(write=False)
    return arr


def _check_finite(a: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(a)):
        raise NonFiniteError(f"{what} contains non-finite entries")


def _check_grid(grid: Optional[Grid], n_voxels: int) -> Optional[Grid]:
    if grid is None:
        return None
    h, w = (int(g) for g in grid)
    if h * w != n_voxels:
        raise PreconditionError(
            f"grid {h}x{w} has {h * w} cells but data has {n_voxels} voxels"
        )
    return (h, w)


@dataclass(frozen=True)
class Dataset:
    """Observed signal matrix, time points by voxels."""

    data: np.ndarray
    grid: Optional[Grid] = None
    meta: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        data = _frozen(self.data)
        if data.ndim != 2:
            raise PreconditionError(f"data must be 2-D, got shape {data.shape}")
        n_time, n_voxels = data.shape
        if n_time < 2 or n_voxels < 2:
            raise PreconditionError(
                f"need at least 2 time points and 2 voxels, got {data.shape}"
            )
        _check_finite(data, "dataset")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "grid", _check_grid(self.grid, n_voxels))
        object.__setattr__(self, "meta", {str(k): str(v) for k, v in self.meta.items()})

    @property
    def n_time(self) -> int:
        return self.data.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.data.shape[1]


def whiteness_error(patterns: np.ndarray) -> Tuple[float, float, float]:
    """Return the worst deviations of ``patterns`` rows from whiteness.

    Returns
    -------
    mean_err, var_err, corr_err : float
        Largest absolute row mean, largest ``|var - 1|`` and largest
        absolute off-diagonal correlation (population statistics).
    """
    patterns = np.asarray(patterns, dtype=np.float64)
    means = patterns.mean(axis=1)
    centered = patterns - means[:, None]
    cov = centered @ centered.T / patterns.shape[1]
    var = np.diag(cov)
    mean_err = float(np.max(np.abs(means)))
    var_err = float(np.max(np.abs(var - 1.0)))
    if patterns.shape[0] > 1:
        sd = np.sqrt(np.clip(var, 1e-300, None))
        corr = cov / np.outer(sd, sd)
        np.fill_diagonal(corr, 0.0)
        corr_err = float(np.max(np.abs(corr)))
    else:
        corr_err = 0.0
    return mean_err, var_err, corr_err


@dataclass(frozen=True)
class ComponentSet:
    """Spatial patterns (components by voxels) with optional loadings.

    When ``whitened`` is true the row statistics are recomputed at
    construction: rows must be zero-mean, unit-variance and uncorrelated.
    """

    patterns: np.ndarray
    loadings: Optional[np.ndarray] = None
    grid: Optional[Grid] = None
    whitened: bool = False

    def __post_init__(self):
        patterns = _frozen(self.patterns)
        if patterns.ndim == 1:
            patterns = _frozen(patterns[None, :])
        if patterns.ndim != 2:
            raise PreconditionError(f"patterns must be 2-D, got shape {patterns.shape}")
        _check_finite(patterns, "patterns")
        object.__setattr__(self, "patterns", patterns)
        if self.loadings is not None:
            loadings = _frozen(self.loadings)
            if loadings.ndim != 2 or loadings.shape[1] != patterns.shape[0]:
                raise PreconditionError(
                    f"loadings shape {loadings.shape} incompatible with "
                    f"{patterns.shape[0]} components"
                )
            _check_finite(loadings, "loadings")
            object.__setattr__(self, "loadings", loadings)
        object.__setattr__(self, "grid", _check_grid(self.grid, patterns.shape[1]))
        object.__setattr__(self, "whitened", bool(self.whitened))
        if self.whitened:
            mean_err, var_err, corr_err = whiteness_error(patterns)
            if mean_err > 1e-8 or var_err > 1e-6 or corr_err > 1e-6:
                raise PreconditionError(
                    "patterns flagged whitened but row statistics disagree "
                    f"(mean {mean_err:.3g}, var {var_err:.3g}, corr {corr_err:.3g})"
                )

    @property
    def n_components(self) -> int:
        return self.patterns.shape[0]

    @property
    def n_voxels(self) -> int:
        return self.patterns.shape[1]


@dataclass(frozen=True)
class MixingMatrix:
    """Square orthogonal matrix mapping unmixed sources to components."""

    m: np.ndarray

    def __post_init__(self):
        m = _frozen(self.m)
        if m.ndim != 2 or m.shape[0] != m.shape[1]:
            raise PreconditionError(f"mixing matrix must be square, got {m.shape}")
        _check_finite(m, "mixing matrix")
        dev = np.linalg.norm(m.T @ m - np.eye(m.shape[0]))
        if dev >= 1e-6:
            raise PreconditionError(f"mixing matrix not orthogonal (deviation {dev:.3g})")
        object.__setattr__(self, "m", m)


THRESHOLD_METHODS = ("empirical", "gaussian")


@dataclass(frozen=True)
class ThresholdResult:
    """Binary supports obtained by thresholding ``|patterns| > tau``."""

    alpha: float
    tau: float
    supports: np.ndarray
    method: str

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise PreconditionError(f"alpha must lie in (0, 1), got {self.alpha}")
        if not self.tau >= 0.0:
            raise PreconditionError(f"tau must be nonnegative, got {self.tau}")
        if self.method not in THRESHOLD_METHODS:
            raise PreconditionError(f"unknown threshold method {self.method!r}")
        supports = np.array(self.supports, dtype=bool, copy=True)
        supports.setflags(write=False)
        object.__setattr__(self, "supports", supports)
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "tau", float(self.tau))


def write_matrix(m, path) -> None:
    """Write a 2-D finite matrix to ``path`` in ``SICA1`` format."""
    arr = np.asarray(m, dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise PreconditionError(f"can only write 2-D matrices, got shape {arr.shape}")
    _check_finite(arr, f"matrix for {path}")
    rows, cols = arr.shape
    header = f"{MAGIC} {rows} {cols}\n".encode("ascii")
    payload = np.ascontiguousarray(arr, dtype="<f8").tobytes(order="C")
    try:
        with open(path, "wb") as fh:
            fh.write(header)
            fh.write(payload)
    except OSError as exc:
        raise OSError(f"cannot write matrix to {path}: {exc}") from exc


def read_matrix(path) -> np.ndarray:
    """Read a ``SICA1`` matrix written by :func:`write_matrix`."""
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise OSError(f"cannot read matrix from {path}: {exc}") from exc
    end = raw.find(b"\n", 0, _MAX_HEADER)
    if end < 0:
        raise BadMagicError(f"{path}: no header line")
    try:
        tokens = raw[:end].decode("ascii").split(" ")
    except UnicodeDecodeError:
        raise BadMagicError(f"{path}: header is not ASCII") from None
    if tokens[0] != MAGIC:
        if tokens[0].startswith("SICA"):
            raise FormatVersionError(f"{path}: unsupported format version {tokens[0]!r}")
        raise BadMagicError(f"{path}: bad magic {tokens[0]!r}")
    if len(tokens) != 3 or not all(t.isdigit() for t in tokens[1:]):
        raise BadMagicError(f"{path}: malformed header {raw[:end]!r}")
    rows, cols = int(tokens[1]), int(tokens[2])
    payload = raw[end + 1:]
    expected = rows * cols * 8
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    if len(payload) > expected:
        raise PayloadSizeError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected}"
        )
    arr = np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(rows, cols)
    _check_finite(arr, str(path))
    return arr


def sidecar_path(path) -> Path:
    return Path(os.fspath(path) + ".json")


def write_sidecar(path, seed=None, created_by="sica", grid=None, **extra) -> None:
    """Write the JSON metadata sidecar next to a matrix file."""
    meta = {"seed": seed, "created_by": created_by}
    if grid is not None:
        meta["grid"] = [int(g) for g in grid]
    meta.update(extra)
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def load_dataset(path) -> Dataset:
    """Read a matrix and its sidecar into a :class:`Dataset`."""
    data = read_matrix(path)
    meta = read_sidecar(path)
    grid = meta.get("grid")
    return Dataset(
        data,
        grid=tuple(grid) if grid else None,
        meta={k: v for k, v in meta.items() if k != "grid" and v is not None},
    )
