"""Univariate mixture-model thresholding of ICs (melodic-like baseline).

Each IC histogram is modelled as a Gaussian null class plus a shifted Gamma
for positive activations and a mirrored shifted Gamma for negative
activations, fitted by generalized EM. A voxel is selected when the
posterior odds of the activation classes against the null exceed a ratio.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Tuple

import numpy as np
from scipy import optimize, special, stats

from .datamodel import PreconditionError

logger = logging.getLogger(__name__)

LABEL = "melodic-like"
COLLAPSE_WEIGHT = 1e-6
# activation classes may not be narrower than this fraction of the initial null std
MIN_CLASS_STD = 0.1
DEFAULT_RATIOS = tuple(np.geomspace(0.2, 50.0, 15))
_MIN_SHAPE = 1.0
_MAX_SHAPE = 1e6


@dataclass(frozen=True)
class MixtureFit:
    """Gaussian + shifted Gamma + mirrored shifted Gamma mixture.

    ``weights`` are ordered (null, positive, negative). A collapsed class has
    weight 0 and is listed in ``collapsed``. The positive class models
    ``x - pos_shift ~ Gamma(pos_shape, pos_scale)``, the negative class
    ``neg_shift - x ~ Gamma(neg_shape, neg_scale)``.
    """

    weights: Tuple[float, float, float]
    null_mean: float
    null_std: float
    pos_shape: float
    pos_scale: float
    pos_shift: float
    neg_shape: float
    neg_scale: float
    neg_shift: float
    log_likelihood: float
    n_em_iterations: int
    ll_trace: Tuple[float, ...] = ()
    collapsed: Tuple[str, ...] = ()
    label: str = LABEL

    def to_json(self) -> dict:
        d = asdict(self)
        d["weights"] = list(self.weights)
        d["ll_trace"] = list(self.ll_trace)
        d["collapsed"] = list(self.collapsed)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "MixtureFit":
        d = dict(d)
        d["weights"] = tuple(d["weights"])
        d["ll_trace"] = tuple(d.get("ll_trace", ()))
        d["collapsed"] = tuple(d.get("collapsed", ()))
        return cls(**d)

    def class_log_densities(self, values) -> np.ndarray:
        """Weighted log densities, one row per class (null, pos, neg)."""
        x = np.asarray(values, dtype=np.float64)
        return _weighted_logpdf(x, _Params.from_fit(self))


_CLASSES = ("null", "positive", "negative")


@dataclass
class _Params:
    w: np.ndarray
    mu: float
    sd: float
    gam: list = field(default_factory=list)  # [(shape, scale, shift)] for pos, neg

    @classmethod
    def from_fit(cls, f: MixtureFit) -> "_Params":
        return cls(
            np.array(f.weights, dtype=np.float64), f.null_mean, f.null_std,
            [(f.pos_shape, f.pos_scale, f.pos_shift), (f.neg_shape, f.neg_scale, f.neg_shift)],
        )


def _gamma_logpdf(y, shape, scale):
    out = np.full(y.shape, -np.inf)
    pos = y > 0
    yp = y[pos]
    out[pos] = (shape - 1.0) * np.log(yp) - yp / scale - shape * math.log(scale) - special.gammaln(shape)
    return out


def _class_arg(x, cls, shift):
    # distance from the shift, pointing into the support of the class
    return x - shift if cls == 1 else shift - x


def _weighted_logpdf(x, p: _Params) -> np.ndarray:
    with np.errstate(divide="ignore"):
        logw = np.log(p.w)
    out = np.empty((3, x.size))
    out[0] = logw[0] + stats.norm.logpdf(x, p.mu, p.sd)
    for cls in (1, 2):
        shape, scale, shift = p.gam[cls - 1]
        if p.w[cls] > 0:
            out[cls] = logw[cls] + _gamma_logpdf(_class_arg(x, cls, shift), shape, scale)
        else:
            out[cls] = -np.inf
    return out


def _solve_shape(s: float) -> float:
    # root of log(a) - digamma(a) = s, decreasing in a
    f = lambda a: math.log(a) - special.digamma(a) - s
    if f(_MIN_SHAPE) <= 0:
        return _MIN_SHAPE
    if f(_MAX_SHAPE) >= 0:
        return _MAX_SHAPE
    return optimize.brentq(f, _MIN_SHAPE, _MAX_SHAPE, xtol=1e-12, rtol=1e-12)


def _gamma_q_value(wsum, m, L, shape, scale):
    return wsum * ((shape - 1.0) * L - m / scale - shape * math.log(scale) - special.gammaln(shape))


def _gamma_mle_fixed_shift(y, r, min_std=0.0):
    """Weighted Gamma MLE with shape >= 1 and std >= ``min_std``.

    Returns ``(value, shape, scale)``. The std floor removes the unbounded
    likelihood of a class shrinking onto a single point.
    """
    wsum = r.sum()
    m = (r * y).sum() / wsum
    L = (r * np.log(y)).sum() / wsum
    shape = _solve_shape(max(math.log(m) - L, 0.0))
    scale = m / shape
    if math.sqrt(shape) * scale < min_std:
        # optimum lies on the boundary sqrt(shape) * scale = min_std
        def neg(a):
            return -_gamma_q_value(wsum, m, L, a, min_std / math.sqrt(a))
        res = optimize.minimize_scalar(neg, bounds=(_MIN_SHAPE, _MAX_SHAPE), method="bounded",
                                       options={"xatol": 1e-8})
        shape = float(res.x)
        scale = min_std / math.sqrt(shape)
    return _gamma_q_value(wsum, m, L, shape, scale), shape, scale


def _gamma_q(x, r, cls, params):
    shape, scale, shift = params
    y = _class_arg(x, cls, shift)
    act = r > 0
    if np.any(y[act] <= 0):
        return -np.inf
    return float((r[act] * _gamma_logpdf(y[act], shape, scale)).sum())


def _m_step_gamma(x, r, cls, current, spread, min_std):
    """Generalized M-step for one Gamma class; never decreases its Q term."""
    act = r > 0
    if not np.any(act):
        return current
    xa, ra = x[act], r[act]
    # every point with positive responsibility must stay inside the support
    edge = xa.min() if cls == 1 else xa.max()
    gap = 1e-9 * spread

    def neg_profile(offset):
        shift = edge - offset if cls == 1 else edge + offset
        return -_gamma_mle_fixed_shift(_class_arg(xa, cls, shift), ra, min_std)[0]

    res = optimize.minimize_scalar(neg_profile, bounds=(gap, 10.0 * spread), method="bounded",
                                   options={"xatol": 1e-6 * spread})
    offset = float(res.x)
    shift = edge - offset if cls == 1 else edge + offset
    _, shape, scale = _gamma_mle_fixed_shift(_class_arg(xa, cls, shift), ra, min_std)
    candidate = (shape, scale, shift)
    if _gamma_q(x, r, cls, candidate) >= _gamma_q(x, r, cls, current):
        return candidate
    return current


def _init_params(x, active) -> _Params:
    mu = float(np.median(x))
    mad = float(np.median(np.abs(x - mu))) * 1.4826
    sd = mad if mad > 0 else float(x.std())
    lo, hi = np.quantile(x, [0.05, 0.95])
    core = x[(x >= lo) & (x <= hi)]
    if core.size > 10 and core.std() > 0:
        # trimmed moments: std of a 90%-trimmed normal is 0.7906 of the full
        mu = float(core.mean())
        sd = float(core.std()) / 0.7906
    w = np.zeros(3)
    gam = []
    for cls in (1, 2):
        tail = x[x > mu + 2 * sd] if cls == 1 else x[x < mu - 2 * sd]
        if tail.size >= 3 and active[cls]:
            shift = (tail.min() - 1e-3 * sd) if cls == 1 else (tail.max() + 1e-3 * sd)
            y = _class_arg(tail, cls, shift)
            m, v = y.mean(), max(y.var(), 1e-12 * sd * sd)
            shape = min(max(m * m / v, _MIN_SHAPE), _MAX_SHAPE)
            gam.append((shape, m / shape, shift))
            w[cls] = max(tail.size / x.size - 0.0228, 0.01)
        else:
            shift = mu + 2 * sd if cls == 1 else mu - 2 * sd
            gam.append((_MIN_SHAPE, sd, shift))
            w[cls] = 0.0
    w[0] = 1.0 - w[1] - w[2]
    return _Params(w, mu, sd, gam)


def _em(x, active, max_iter, tol):
    p = _init_params(x, active)
    spread = float(x.max() - x.min())
    min_std = MIN_CLASS_STD * p.sd
    trace = []
    ll = -np.inf
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        logp = _weighted_logpdf(x, p)
        norm = special.logsumexp(logp, axis=0)
        ll_new = float(norm.sum())
        trace.append(ll_new)
        if n_iter > 1 and (ll_new - ll) <= tol * abs(ll):
            ll = ll_new
            break
        ll = ll_new
        r = np.exp(logp - norm)
        w = r.mean(axis=1)
        w[~active] = 0.0
        w /= w.sum()
        r0 = r[0]
        mu = float((r0 * x).sum() / r0.sum())
        sd = float(math.sqrt((r0 * (x - mu) ** 2).sum() / r0.sum()))
        gam = list(p.gam)
        for cls in (1, 2):
            if active[cls]:
                gam[cls - 1] = _m_step_gamma(x, r[cls], cls, gam[cls - 1], spread, min_std)
        p = _Params(w, mu, max(sd, 1e-12 * spread), gam)
    return p, ll, n_iter, trace


def fit_mixture(values, max_iter: int = 500, tol: float = 1e-7, seed: int = 0) -> MixtureFit:
    """Fit the null/activation mixture to IC values by EM.

    Parameters
    ----------
    values : array_like
        At least 100 finite values.
    max_iter : int
        Maximum EM iterations.
    tol : float
        Stop when the relative log-likelihood improvement falls below it.
    seed : int
        Accepted for interface symmetry; initialization is deterministic
        (trimmed moments).

    Returns
    -------
    MixtureFit
        Activation classes whose weight falls below 1e-6 are removed and the
        model refitted; they are reported in ``collapsed``.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    if x.size < 100:
        raise PreconditionError(f"need at least 100 values, got {x.size}")
    if not np.all(np.isfinite(x)):
        raise PreconditionError("values must be finite")
    if np.ptp(x) == 0:
        raise PreconditionError("values are constant")

    active = np.array([True, True, True])
    while True:
        p, ll, n_iter, trace = _em(x, active, max_iter, tol)
        dead = [c for c in (1, 2) if active[c] and p.w[c] < COLLAPSE_WEIGHT]
        if not dead:
            break
        for c in dead:
            logger.info("mixture class %s collapsed; refitting without it", _CLASSES[c])
            active[c] = False

    w = p.w.copy()
    w[~active] = 0.0
    w /= w.sum()
    (ps, pc, psh), (ns, nc, nsh) = p.gam
    return MixtureFit(
        weights=tuple(float(v) for v in w),
        null_mean=p.mu,
        null_std=p.sd,
        pos_shape=float(ps), pos_scale=float(pc), pos_shift=float(psh),
        neg_shape=float(ns), neg_scale=float(nc), neg_shift=float(nsh),
        log_likelihood=ll,
        n_em_iterations=n_iter,
        ll_trace=tuple(trace),
        collapsed=tuple(_CLASSES[c] for c in (1, 2) if not active[c]),
    )


def log_odds(fit: MixtureFit, values) -> np.ndarray:
    """Log of posterior(activation) / posterior(null) for each value."""
    logp = fit.class_log_densities(values)
    with np.errstate(invalid="ignore"):
        return np.logaddexp(logp[1], logp[2]) - logp[0]


def threshold_mixture(fit: MixtureFit, values, ratio: float) -> np.ndarray:
    """Select values whose activation-to-null posterior ratio exceeds ``ratio``."""
    if not ratio > 0:
        raise PreconditionError(f"ratio must be positive, got {ratio}")
    lo = log_odds(fit, values)
    if math.isinf(ratio):
        return np.zeros(lo.shape, dtype=bool)
    return lo > math.log(ratio)


def selection_is_monotone(fit: MixtureFit, values, ratio: float) -> bool:
    """True when, on each side of the null mean, selection is a single tail."""
    x = np.asarray(values, dtype=np.float64).ravel()
    sel = threshold_mixture(fit, x, ratio)
    for side in (x >= fit.null_mean, x < fit.null_mean):
        d = np.abs(x[side] - fit.null_mean)
        s = sel[side][np.argsort(d, kind="stable")]
        # once selected, every value further out must be selected too
        if s.size and np.any(np.diff(s.astype(np.int8)) < 0):
            return False
    return True
