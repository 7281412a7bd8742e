"""Scoring thresholded components against a known or pseudo ground truth."""

from __future__ import annotations

import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment

from . import __version__
from .datamodel import ComponentSet, Dataset, PreconditionError
from .fastica import DEFAULT_MAX_ITER, DEFAULT_TOL, IcaFit, amari_index, fastica
from .isonull import DEFAULT_N_DIRECTIONS, gaussian_null, sample_null, threshold_components
from .mixbase import fit_mixture, selection_is_monotone, threshold_mixture
from .simgen import SimConfig, SimTruth, simulate
from .whiten import PcaFit, fit_pca, whiten_components

logger = logging.getLogger(__name__)

ROC_METHODS = ("isonull-gaussian", "isonull-empirical", "mixture")
TABLE_ALPHAS = (5e-2, 1e-2, 5e-3)
DEFAULT_ALPHAS = tuple(np.geomspace(1e-5, 0.5, 25))
# annotation only: pseudo-ground-truth errors inflate observed FPR about 2x
PSEUDO_TRUTH_FPR_FACTOR = 0.5


@dataclass(frozen=True)
class MatchResult:
    """Assignment of estimated components to true ones.

    ``permutation[i]`` is the true component matched to estimate ``i``;
    ``signs[i]`` makes the matched correlation nonnegative.
    """

    permutation: np.ndarray
    signs: np.ndarray
    correlations: np.ndarray

    def align(self, estimated: np.ndarray) -> np.ndarray:
        """Reorder estimate rows into truth order (signs not applied)."""
        estimated = np.asarray(estimated)
        out = np.empty_like(estimated)
        out[self.permutation] = estimated
        return out


class Confusion(NamedTuple):
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def fpr(self) -> float:
        d = self.fp + self.tn
        return self.fp / d if d else 0.0

    @property
    def tpr(self) -> float:
        d = self.tp + self.fn
        return self.tp / d if d else 1.0


@dataclass(frozen=True)
class RocCurve:
    """Operating points ``(fpr, tpr, parameter)`` sorted by FPR."""

    points: Tuple[Tuple[float, float, float], ...]
    auc: float
    method: str = ""
    non_monotone: Tuple[float, ...] = ()

    def envelope(self) -> np.ndarray:
        """``(fpr, tpr)`` of the monotone envelope with (0,0) and (1,1) added."""
        return _envelope(self.points)


def _row_correlations(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    num = a @ b.T
    den = np.outer(na, nb)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.where(den > 0, num / np.where(den > 0, den, 1.0), 0.0)
    return np.clip(c, -1.0, 1.0)


def match_components(estimated, truth) -> MatchResult:
    """Match estimates to true maps by maximal total absolute correlation.

    Zero-variance rows correlate 0 with everything. The assignment is
    solved exactly (Hungarian-type algorithm).
    """
    est = estimated.patterns if isinstance(estimated, ComponentSet) else np.asarray(estimated, float)
    truth = np.asarray(truth, dtype=np.float64)
    if est.shape != truth.shape:
        raise PreconditionError(
            f"estimated {est.shape} and truth {truth.shape} must have equal dimensions"
        )
    corr = _row_correlations(est, truth)
    rows, cols = linear_sum_assignment(-np.abs(corr))
    perm = np.empty(est.shape[0], dtype=int)
    perm[rows] = cols
    matched = corr[np.arange(est.shape[0]), perm]
    signs = np.where(matched < 0, -1, 1)
    return MatchResult(perm, signs, np.abs(matched))


def confusion(est_support, true_support) -> Confusion:
    """Voxel-wise counts pooled over all components."""
    est = np.asarray(est_support, dtype=bool)
    true = np.asarray(true_support, dtype=bool)
    if est.shape != true.shape:
        raise PreconditionError(f"support shapes differ: {est.shape} vs {true.shape}")
    tp = int(np.sum(est & true))
    fp = int(np.sum(est & ~true))
    fn = int(np.sum(~est & true))
    tn = int(est.size - tp - fp - fn)
    return Confusion(tp, fp, tn, fn)


def _envelope(points) -> np.ndarray:
    pts = np.array([(p[0], p[1]) for p in points], dtype=np.float64).reshape(-1, 2)
    pts = np.vstack([[0.0, 0.0], pts, [1.0, 1.0]])
    order = np.lexsort((pts[:, 1], pts[:, 0]))
    pts = pts[order]
    pts[:, 1] = np.maximum.accumulate(pts[:, 1])
    return pts


def auc_from_points(points) -> float:
    env = _envelope(points)
    return float(np.trapezoid(env[:, 1], env[:, 0]))


def roc_curve(points, method: str = "", non_monotone=()) -> RocCurve:
    pts = sorted((float(f), float(t), float(p)) for f, t, p in points)
    return RocCurve(tuple(pts), auc_from_points(pts), method, tuple(non_monotone))


def decompose(observed, n_components: Optional[int] = None, contrast: str = "logcosh",
              seed: int = 0, max_iter: int = DEFAULT_MAX_ITER, tol: float = DEFAULT_TOL,
              center_time: bool = True, grid=None) -> Tuple[PcaFit, IcaFit]:
    """PCA whitening followed by FastICA.

    ``observed`` is a :class:`Dataset` (time by voxels) or a
    :class:`ComponentSet` whose rows already span the signal subspace; the
    latter is whitened without time centering.
    """
    if isinstance(observed, ComponentSet):
        pca = whiten_components(observed.patterns, grid=observed.grid)
    else:
        if not isinstance(observed, Dataset):
            observed = Dataset(observed, grid=grid)
        k = observed.n_time if n_components is None else n_components
        pca = fit_pca(observed, k, center_time=center_time)
    ica = fastica(pca.components, contrast=contrast, max_iter=max_iter, tol=tol, seed=seed)
    return pca, ica


def global_system(pca: PcaFit, ica: IcaFit, truth: SimTruth) -> np.ndarray:
    """Map from true sources to estimates, ``unmixing @ whitening @ mixing``."""
    return ica.unmixing @ pca.transform @ truth.mixing.m


def unmixing_error(pca: PcaFit, ica: IcaFit, truth: SimTruth) -> float:
    """Amari index of the global system; 0 means perfect unmixing."""
    return amari_index(global_system(pca, ica, truth))


def _supports_for(b_hat: ComponentSet, method: str, param: float, null=None, mixtures=None):
    if method == "mixture":
        return np.stack([threshold_mixture(f, row, param) for f, row in zip(mixtures, b_hat.patterns)])
    return threshold_components(b_hat, param, null).supports


def roc_sweep(b_hat: ComponentSet, truth: SimTruth, alphas: Sequence[float],
              method: str = "isonull-gaussian", n_directions: int = DEFAULT_N_DIRECTIONS,
              seed: int = 0) -> RocCurve:
    """ROC of one thresholding method over a sweep of operating points.

    For the isonull methods ``alphas`` are p-values; for ``mixture`` they
    are posterior odds ratios.
    """
    if method not in ROC_METHODS:
        raise PreconditionError(f"unknown method {method!r}; choose from {ROC_METHODS}")
    params = [float(a) for a in alphas]
    if params != sorted(params):
        raise PreconditionError("operating points must be sorted")
    match = match_components(b_hat, truth.clean)
    null, mixtures = None, None
    if method == "isonull-gaussian":
        null = gaussian_null()
    elif method == "isonull-empirical":
        null = sample_null(b_hat, n_directions, seed)
    else:
        mixtures = [fit_mixture(row, seed=seed) for row in b_hat.patterns]
    points, non_monotone = [], []
    for a in params:
        s = _supports_for(b_hat, method, a, null, mixtures)
        if method == "mixture" and not all(
            selection_is_monotone(f, row, a) for f, row in zip(mixtures, b_hat.patterns)
        ):
            non_monotone.append(a)
        c = confusion(match.align(s), truth.supports)
        points.append((c.fpr, c.tpr, a))
    return roc_curve(points, method, non_monotone)


@dataclass
class RunScore:
    config: SimConfig
    seed: int
    fpr: np.ndarray
    tpr: np.ndarray
    amari: float
    converged: bool


def score_simulation(config: SimConfig, alphas: Sequence[float], contrast: str = "logcosh",
                     null_kind: str = "gaussian", n_directions: int = DEFAULT_N_DIRECTIONS) -> RunScore:
    """simulate -> whiten -> FastICA -> isonull threshold -> confusion."""
    truth = simulate(config)
    pca, ica = decompose(truth.observed, contrast=contrast, seed=config.seed)
    b_hat = ica.sources
    null = gaussian_null() if null_kind == "gaussian" else sample_null(b_hat, n_directions, config.seed)
    match = match_components(b_hat, truth.clean)
    fpr, tpr = [], []
    for a in alphas:
        c = confusion(match.align(threshold_components(b_hat, a, null).supports), truth.supports)
        fpr.append(c.fpr)
        tpr.append(c.tpr)
    return RunScore(config, config.seed, np.array(fpr), np.array(tpr),
                    unmixing_error(pca, ica, truth), ica.converged)


def _score_args(args):
    return score_simulation(*args)


def _map(fn, items, n_jobs):
    if n_jobs and n_jobs > 1:
        with ProcessPoolExecutor(max_workers=n_jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(it) for it in items]


def condition_label(config: SimConfig) -> str:
    kind = "gaussian" if config.target_kurtosis is None and config.theta == 0 else "super-gaussian"
    return f"{kind} sigma={config.sigma:.2f}"


def table_configs(sigmas=(0.15, 0.20, 0.30), kurtosis: float = 4.0, **overrides) -> List[SimConfig]:
    """The six simulated conditions: Gaussian and super-Gaussian at each sigma."""
    out = []
    for s in sigmas:
        out.append(SimConfig(sigma=s, **overrides))
        out.append(SimConfig(sigma=s, target_kurtosis=kurtosis, **overrides))
    return out


def seed_for(config_index: int, run: int, base_seed: int = 0) -> int:
    """Deterministic per-run seed; identical seeds yield identical tables."""
    return int(np.random.SeedSequence([base_seed, config_index, run]).generate_state(1, np.uint64)[0])


@dataclass
class FprTable:
    """Mean observed FPR, rows are conditions and columns specified alphas."""

    labels: List[str]
    alphas: Tuple[float, ...]
    values: np.ndarray
    tpr: np.ndarray
    n_seeds: int
    runs: List[List[RunScore]] = field(default_factory=list, repr=False)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# sica-version {__version__}\n")
        buf.write("condition," + ",".join(f"{a:.1e}" for a in self.alphas) + "\n")
        for label, row in zip(self.labels, self.values):
            buf.write(label + "," + ",".join(f"{v:.6e}" for v in row) + "\n")
        return buf.getvalue()


def fpr_table(configs: Sequence[SimConfig], alphas: Sequence[float] = TABLE_ALPHAS,
              n_seeds: int = 20, base_seed: int = 0, contrast: str = "logcosh",
              null_kind: str = "gaussian", n_jobs: int = 1) -> FprTable:
    """Observed voxel-wise FPR averaged over seeds for every condition."""
    alphas = tuple(float(a) for a in alphas)
    jobs = []
    for ci, cfg in enumerate(configs):
        for r in range(n_seeds):
            jobs.append((replace(cfg, seed=seed_for(ci, r, base_seed)), alphas, contrast, null_kind))
    results = _map(_score_args, jobs, n_jobs)
    runs = [results[ci * n_seeds:(ci + 1) * n_seeds] for ci in range(len(configs))]
    values = np.array([_pairwise_mean([r.fpr for r in rs]) for rs in runs])
    tpr = np.array([_pairwise_mean([r.tpr for r in rs]) for rs in runs])
    return FprTable([condition_label(c) for c in configs], alphas, values, tpr, n_seeds, runs)


def _pairwise_mean(rows) -> np.ndarray:
    # np.sum uses pairwise summation along a contiguous axis
    arr = np.ascontiguousarray(np.array(rows, dtype=np.float64).T)
    return arr.sum(axis=1) / arr.shape[1]


def roc_rows(curve: RocCurve, seed: int, label: str = "") -> List[str]:
    return [f"{f:.6e},{t:.6e},{p:.6e},{curve.method},{seed},{label}" for f, t, p in curve.points]


def roc_csv(rows: List[str]) -> str:
    header = f"# sica-version {__version__}\nfpr,tpr,alpha,method,seed,condition\n"
    return header + "".join(r + "\n" for r in rows)


# --- downsampling consistency ------------------------------------------------

def smooth_time_courses(n_time: int, n_components: int, seed, width: float = 2.0) -> np.ndarray:
    """Random smooth loadings: temporally smoothed white noise, unit variance."""
    rng = np.random.default_rng(seed)
    w = ndimage.gaussian_filter1d(rng.standard_normal((n_time, n_components)), width, axis=0, mode="wrap")
    w -= w.mean(axis=0)
    return w / w.std(axis=0)


def synthetic_timeseries(truth: SimTruth, n_time: int = 300, obs_noise: float = 0.05,
                         seed: int = 0, width: float = 2.0) -> Dataset:
    """Temporal extension of a simulation: ``Y = W C + F``."""
    k = truth.observed.n_components
    loadings = smooth_time_courses(n_time, k, np.random.SeedSequence([seed, 0]), width)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 1]))
    c = truth.observed.patterns
    y = loadings @ c + obs_noise * rng.standard_normal((n_time, c.shape[1]))
    return Dataset(y, grid=truth.config.grid, meta={"seed": str(seed)})


@dataclass(frozen=True)
class ConsistencyRow:
    run: int
    n_time: int
    fpr: float
    tpr: float
    converged: bool


@dataclass(frozen=True)
class ConsistencyReport:
    """Scores of each subsampled run against the full-data pseudo truth.

    ``fpr_correction`` is an annotation: errors in the pseudo ground truth
    roughly double the observed FPR. It is never applied to ``rows``.
    """

    rows: Tuple[ConsistencyRow, ...]
    alpha: float
    k: int
    fpr_correction: float = PSEUDO_TRUTH_FPR_FACTOR

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(f"# sica-version {__version__}\n")
        buf.write(f"# pseudo-ground-truth FPR correction factor (not applied): {self.fpr_correction}\n")
        buf.write("run,n_time,alpha,fpr,tpr,converged\n")
        for r in self.rows:
            buf.write(f"{r.run},{r.n_time},{self.alpha:.6e},{r.fpr:.6e},{r.tpr:.6e},{int(r.converged)}\n")
        return buf.getvalue()


def downsample_consistency(y: Dataset, k: int = 3, n_components: int = 9, alpha: float = 1e-2,
                           contrast: str = "logcosh", seed: int = 0, null_kind: str = "gaussian",
                           n_directions: int = DEFAULT_N_DIRECTIONS) -> ConsistencyReport:
    """Score ``k`` interleaved subsamplings against the full-data result."""
    if k < 1:
        raise PreconditionError("k must be positive")
    if y.n_time < 3 * k:
        raise PreconditionError(f"need at least {3 * k} time points for k={k}, got {y.n_time}")

    def threshold(ds):
        _, ica = decompose(ds, n_components=n_components, contrast=contrast, seed=seed)
        null = gaussian_null() if null_kind == "gaussian" else sample_null(ica.sources, n_directions, seed)
        return ica, threshold_components(ica.sources, alpha, null).supports

    ref_ica, ref_support = threshold(y)
    rows = []
    for j in range(k):
        sub = Dataset(y.data[j::k], grid=y.grid, meta=y.meta)
        ica, support = threshold(sub)
        match = match_components(ica.sources, ref_ica.sources.patterns)
        c = confusion(match.align(support), ref_support)
        rows.append(ConsistencyRow(j, sub.n_time, c.fpr, c.tpr, ica.converged))
    return ConsistencyReport(tuple(rows), alpha, k)
