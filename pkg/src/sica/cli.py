"""Command-line interface: ``sica <command> [options]``.

Every command that draws random numbers requires ``--seed``. Options may
also come from a JSON file given with ``--config``; command-line flags take
precedence. Exit codes: 0 success, 2 usage or configuration error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .datamodel import (
    ComponentSet,
    Dataset,
    PreconditionError,
    read_matrix,
    read_sidecar,
    write_matrix,
    write_sidecar,
)
from .evaluation import (
    DEFAULT_ALPHAS,
    TABLE_ALPHAS,
    confusion,
    decompose,
    downsample_consistency,
    fpr_table,
    match_components,
    roc_csv,
    roc_rows,
    roc_sweep,
    seed_for,
    synthetic_timeseries,
    table_configs,
)
from .fastica import CONTRASTS, DEFAULT_MAX_ITER, DEFAULT_TOL, amari_index
from .isonull import DEFAULT_N_DIRECTIONS, apply_threshold, gaussian_null, sample_null, threshold_for_pvalue
from .mixbase import DEFAULT_RATIOS, fit_mixture, threshold_mixture
from .simgen import SimConfig, load_truth, save_truth, simulate

logger = logging.getLogger("sica")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

NO_CORRECTION_NOTE = (
    "NOTE: thresholds control the per-voxel false-positive rate only; "
    "no correction for multiple comparisons across voxels or components is applied."
)


class UsageError(Exception):
    """Invalid or missing command-line configuration."""


def _grid(text):
    try:
        h, w = (int(v) for v in str(text).lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 80x80, got {text!r}") from None
    return (h, w)


def _floats(text):
    try:
        return [float(v) for v in str(text).split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _pair(text):
    vals = [int(v) for v in str(text).split(",")]
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two integers like 3,5, got {text!r}")
    return tuple(vals)


def _dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _add_sim_options(p):
    g = p.add_argument_group("simulation")
    g.add_argument("--grid", type=_grid, default=None, help="grid size HxW (default 80x80)")
    g.add_argument("--sources", type=int, default=None, help="number of sources (default 9)")
    g.add_argument("--sigma", type=float, default=None, help="noise standard deviation (default 0.15)")
    g.add_argument("--theta", type=float, default=None, help="Gaussian/super-Gaussian balance in radians")
    g.add_argument("--kurtosis", type=float, default=None, help="target noise kurtosis; theta is solved")
    g.add_argument("--fwhm", type=float, default=None, help="smoothing FWHM in pixels (default 2)")
    g.add_argument("--amplitude", type=float, default=None, help="rectangle amplitude (default 1)")
    g.add_argument("--side-range", type=_pair, default=None, help="rectangle side range, e.g. 3,5")
    g.add_argument("--fragmented", type=int, default=None, help="number of diffuse pure-noise sources")
    g.add_argument("--no-smooth-sources", action="store_true", default=None,
                   help="do not smooth the rectangle sources")


_SIM_FIELDS = {
    "grid": "grid", "sources": "n_sources", "sigma": "sigma", "theta": "theta",
    "kurtosis": "target_kurtosis", "fwhm": "fwhm", "amplitude": "rect_amplitude",
    "side_range": "side_range", "fragmented": "n_fragmented",
}


def _sim_config(args, seed) -> SimConfig:
    kw = {}
    for opt, name in _SIM_FIELDS.items():
        v = getattr(args, opt, None)
        if v is not None:
            kw[name] = tuple(v) if isinstance(v, list) else v
    if getattr(args, "no_smooth_sources", None):
        kw["smooth_sources"] = False
    return SimConfig(seed=seed, **kw)


def _require_seed(args) -> int:
    if args.seed is None:
        raise UsageError("--seed is required: all randomness flows from an explicit seed")
    if not 0 <= args.seed < 2 ** 64:
        raise UsageError("--seed must be a 64-bit unsigned integer")
    return int(args.seed)


def _out_dir(path) -> Path:
    if path is None:
        raise UsageError("--out is required")
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    return d


# --- commands ------------------------------------------------------------------

def cmd_simulate(args) -> int:
    seed = _require_seed(args)
    cfg = _sim_config(args, seed)
    truth = simulate(cfg)
    out = _out_dir(args.out)
    save_truth(truth, out)
    print(f"simulated {cfg.n_sources} sources on {cfg.grid[0]}x{cfg.grid[1]}, "
          f"sigma={cfg.sigma}, theta={truth.theta:.6f} -> {out}")
    return EXIT_OK


def _load_observed(path: Path, center_time):
    """Return (input, is_component_matrix, grid)."""
    if path.is_dir():
        m = read_matrix(path / "observed.sica")
        grid = json.loads((path / "config.json").read_text()).get("grid")
        return m, True if center_time is None else not center_time, tuple(grid) if grid else None
    m = read_matrix(path)
    grid = read_sidecar(path).get("grid")
    return m, False if center_time is None else not center_time, tuple(grid) if grid else None


def cmd_decompose(args) -> int:
    seed = _require_seed(args)
    if args.input is None:
        raise UsageError("--input is required")
    if args.components is not None and args.components < 1:
        raise UsageError("--components must be positive")
    m, components_given, grid = _load_observed(Path(args.input), args.center_time)
    k = args.components if args.components is not None else m.shape[0]
    if components_given and k != m.shape[0]:
        ds = Dataset(m, grid=grid)
        pca, ica = decompose(ds, n_components=k, contrast=args.contrast, seed=seed,
                             max_iter=args.max_iter, tol=args.tol, center_time=False)
    elif components_given:
        pca, ica = decompose(ComponentSet(m, grid=grid), contrast=args.contrast, seed=seed,
                             max_iter=args.max_iter, tol=args.tol)
    else:
        pca, ica = decompose(Dataset(m, grid=grid), n_components=k, contrast=args.contrast,
                             seed=seed, max_iter=args.max_iter, tol=args.tol, center_time=True)
    out = _out_dir(args.out)
    write_matrix(ica.sources.patterns, out / "B.sica")
    write_matrix(ica.mixing.m, out / "M.sica")
    write_matrix(pca.transform, out / "whitening.sica")
    write_matrix(pca.loadings, out / "loadings.sica")
    write_sidecar(out / "B.sica", seed=seed, created_by="sica decompose", grid=grid)
    fit = {
        "n_components": k,
        "contrast": args.contrast,
        "seed": seed,
        "max_iter": args.max_iter,
        "tol": args.tol,
        "converged": ica.converged,
        "n_iterations": ica.n_iterations,
        "n_restarts": ica.n_restarts,
        "contrast_init": ica.contrast_init,
        "contrast_final": ica.contrast_final,
        "residual_variance": pca.residual_variance,
        "singular_values": [float(s) for s in pca.singular_values],
        "rows": "components" if components_given else "time",
    }
    _dump(fit, out / "fit.json")
    print(f"{k} components, converged={ica.converged} after {ica.n_iterations} iterations -> {out}")
    return EXIT_OK


def _load_components(path: Path):
    b = read_matrix(path)
    grid = read_sidecar(path).get("grid")
    return ComponentSet(b, grid=tuple(grid) if grid else None, whitened=True)


def cmd_threshold(args) -> int:
    if args.input is None:
        raise UsageError("--input is required")
    path = Path(args.input)
    if path.is_dir():
        path = path / "B.sica"
    b = _load_components(path)
    out = _out_dir(args.out)
    if args.method == "mixture":
        if args.ratio is None:
            raise UsageError("--ratio is required for --method mixture")
        if not args.ratio > 0:
            raise UsageError("--ratio must be positive")
        seed = args.seed if args.seed is not None else 0
        fits = [fit_mixture(row, seed=seed) for row in b.patterns]
        supports = np.stack([threshold_mixture(f, row, args.ratio) for f, row in zip(fits, b.patterns)])
        write_matrix(supports.astype(np.float64), out / "supports.sica")
        _dump({"method": "mixture", "label": fits[0].label, "ratio": args.ratio,
               "fits": [f.to_json() for f in fits]}, out / "mixture.json")
        print(f"mixture baseline: {int(supports.sum())} voxels selected at ratio {args.ratio}")
        return EXIT_OK

    if args.alpha is None:
        raise UsageError("--alpha is required for isonull methods")
    if not 0 < args.alpha <= 0.5:
        raise UsageError("--alpha must lie in (0, 0.5]")
    if args.method == "empirical":
        seed = _require_seed(args)
        null = sample_null(b, args.directions, seed)
        n_dir = args.directions
    else:
        seed = args.seed
        null = gaussian_null()
        n_dir = 0
    tau = threshold_for_pvalue(null, args.alpha)
    res = apply_threshold(b, tau, args.alpha, method=null.kind)
    write_matrix(res.supports.astype(np.float64), out / "supports.sica")
    _dump({"alpha": res.alpha, "tau": res.tau, "method": res.method,
           "n_directions": n_dir, "seed": seed, "correction": "none (per-voxel FPR)"},
          out / "threshold.json")
    print(NO_CORRECTION_NOTE, file=sys.stderr)
    print(f"{res.method} null: alpha={res.alpha:g} tau={res.tau:.5f}, "
          f"{int(res.supports.sum())} voxels selected")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    if args.truth is None or args.fit is None:
        raise UsageError("--truth and --fit are required")
    truth = load_truth(args.truth)
    fit_dir = Path(args.fit)
    b = _load_components(fit_dir / "B.sica")
    match = match_components(b, truth.clean)
    lines = [f"# sica-version {__version__}", "alpha,fpr,tpr,tp,fp,tn,fn"]
    if args.supports is not None:
        s = read_matrix(args.supports) != 0
        c = confusion(match.align(s), truth.supports)
        # alpha of the supplied supports, when threshold wrote it alongside
        meta = Path(args.supports).with_name("threshold.json")
        alpha = json.loads(meta.read_text()).get("alpha") if meta.exists() else None
        label = "nan" if alpha is None else f"{alpha:.6e}"
        lines.append(f"{label},{c.fpr:.6e},{c.tpr:.6e},{c.tp},{c.fp},{c.tn},{c.fn}")
    for a in args.alphas or TABLE_ALPHAS:
        tau = threshold_for_pvalue(gaussian_null(), a)
        c = confusion(match.align(np.abs(b.patterns) > tau), truth.supports)
        lines.append(f"{a:.6e},{c.fpr:.6e},{c.tpr:.6e},{c.tp},{c.fp},{c.tn},{c.fn}")
    text = "\n".join(lines) + "\n"
    summary = {"correlations": [float(v) for v in match.correlations],
               "permutation": [int(v) for v in match.permutation]}
    whitening = fit_dir / "whitening.sica"
    if whitening.exists():
        m_hat = read_matrix(fit_dir / "M.sica")
        # global system: unmixing . whitening . true mixing
        g = m_hat.T @ read_matrix(whitening) @ truth.mixing.m
        summary["amari"] = amari_index(g)
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        _dump(summary, out.with_suffix(".json"))
    sys.stdout.write(text)
    if "amari" in summary:
        print(f"amari index {summary['amari']:.4f}", file=sys.stderr)
    return EXIT_OK


def cmd_roc(args) -> int:
    base = _require_seed(args)
    if args.out is None:
        raise UsageError("--out is required")
    sigmas = args.sigmas or [0.15, 0.20, 0.30]
    methods = args.methods.split(",")
    kinds = [None, args.kurtosis]
    rows, summary = [], []
    overrides = {}
    if args.side_range:
        overrides["side_range"] = tuple(args.side_range)
    for ci, (sigma, kurt) in enumerate((s, k) for s in sigmas for k in kinds):
        label = f"{'gaussian' if kurt is None else 'super-gaussian'} sigma={sigma:.2f}"
        for run in range(args.seeds):
            seed = seed_for(ci, run, base)
            truth = simulate(SimConfig(sigma=sigma, target_kurtosis=kurt, seed=seed, **overrides))
            _, ica = decompose(truth.observed, contrast=args.contrast, seed=seed)
            for method in methods:
                grid = args.ratios if method == "mixture" else args.alphas
                curve = roc_sweep(ica.sources, truth, sorted(grid), method, args.directions, seed)
                rows.extend(roc_rows(curve, seed, label))
                summary.append((label, method, seed, curve.auc))
    Path(args.out).write_text(roc_csv(rows))
    auc_path = Path(args.out).with_suffix(".auc.csv")
    auc_lines = [f"# sica-version {__version__}", "condition,method,seed,auc"]
    auc_lines += [f"{l},{m},{s},{a:.6f}" for l, m, s, a in summary]
    auc_path.write_text("\n".join(auc_lines) + "\n")
    print(f"{len(summary)} curves -> {args.out}")
    return EXIT_OK


def cmd_table1(args) -> int:
    base = _require_seed(args)
    if args.out is None:
        raise UsageError("--out is required")
    overrides = {}
    if args.side_range:
        overrides["side_range"] = tuple(args.side_range)
    table = fpr_table(table_configs(**overrides), args.alphas or TABLE_ALPHAS, args.seeds,
                      base_seed=base, contrast=args.contrast, null_kind=args.null, n_jobs=args.jobs)
    Path(args.out).write_text(table.to_csv())
    print(NO_CORRECTION_NOTE, file=sys.stderr)
    sys.stdout.write(table.to_csv())
    return EXIT_OK


def cmd_consistency(args) -> int:
    seed = _require_seed(args)
    if args.input:
        m = read_matrix(args.input)
        grid = read_sidecar(args.input).get("grid")
        y = Dataset(m, grid=tuple(grid) if grid else None)
    else:
        truth = simulate(_sim_config(args, seed))
        y = synthetic_timeseries(truth, n_time=args.n_time, obs_noise=args.obs_noise, seed=seed)
    report = downsample_consistency(y, k=args.k, n_components=args.components, alpha=args.alpha,
                                    contrast=args.contrast, seed=seed)
    text = report.to_csv()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# --- parser --------------------------------------------------------------------

def _common(p, seed_help="random seed (required)"):
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--seed", type=int, default=None, help=seed_help)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sica",
        description="Sparse-source recovery with isotropy-null thresholding of ICs.",
    )
    parser.add_argument("--version", action="version", version=f"sica {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with ground truth")
    _common(p)
    _add_sim_options(p)
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("decompose", help="PCA whitening followed by FastICA")
    _common(p)
    p.add_argument("--input", help="SICA1 matrix (time x voxels) or a simulate directory")
    p.add_argument("--components", type=int, default=None, help="number of components")
    p.add_argument("--contrast", choices=CONTRASTS, default="logcosh", help="FastICA contrast")
    p.add_argument("--max-iter", type=int, default=DEFAULT_MAX_ITER, help="FastICA iterations")
    p.add_argument("--tol", type=float, default=DEFAULT_TOL, help="FastICA tolerance")
    p.add_argument("--center-time", dest="center_time", action="store_true", default=None,
                   help="treat rows as time frames and remove voxel means")
    p.add_argument("--no-center-time", dest="center_time", action="store_false",
                   help="treat rows as components")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_decompose)

    p = sub.add_parser("threshold", help="threshold ICs with the isotropy null or the mixture baseline")
    _common(p, "seed for the empirical null or the mixture fit")
    p.add_argument("--input", help="B.sica or a decompose directory")
    p.add_argument("--method", choices=("gaussian", "empirical", "mixture"), default="gaussian",
                   help="thresholding method")
    p.add_argument("--alpha", type=float, default=None, help="specified p-value (isonull methods)")
    p.add_argument("--ratio", type=float, default=None, help="posterior odds ratio (mixture)")
    p.add_argument("--directions", type=int, default=DEFAULT_N_DIRECTIONS,
                   help="random directions for the empirical null")
    p.add_argument("--out", help="output directory")
    p.set_defaults(func=cmd_threshold)

    p = sub.add_parser("evaluate", help="score a decomposition against simulated ground truth")
    _common(p, "unused; accepted for uniformity")
    p.add_argument("--truth", help="simulate output directory")
    p.add_argument("--fit", help="decompose output directory")
    p.add_argument("--supports", help="optional supports.sica to score as well; its alpha is read from a neighbouring threshold.json (nan otherwise)")
    p.add_argument("--alphas", type=_floats, default=None, help="p-values to score")
    p.add_argument("--out", help="CSV output path (default stdout)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("roc", help="ROC curves over noise conditions")
    _common(p)
    p.add_argument("--sigmas", type=_floats, default=None, help="noise levels (default 0.15,0.20,0.30)")
    p.add_argument("--kurtosis", type=float, default=4.0, help="super-Gaussian noise kurtosis")
    p.add_argument("--seeds", type=int, default=10, help="runs per condition")
    p.add_argument("--methods", default="isonull-gaussian,mixture", help="comma-separated methods")
    p.add_argument("--alphas", type=_floats, default=list(DEFAULT_ALPHAS), help="p-value sweep")
    p.add_argument("--ratios", type=_floats, default=list(DEFAULT_RATIOS), help="mixture ratio sweep")
    p.add_argument("--directions", type=int, default=DEFAULT_N_DIRECTIONS, help="empirical null directions")
    p.add_argument("--contrast", choices=CONTRASTS, default="logcosh", help="FastICA contrast")
    p.add_argument("--side-range", type=_pair, default=None, help="rectangle side range")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_roc)

    p = sub.add_parser("table1", help="observed FPR versus specified p-value")
    _common(p)
    p.add_argument("--seeds", type=int, default=20, help="runs per condition")
    p.add_argument("--alphas", type=_floats, default=None, help="p-values (default 5e-2,1e-2,5e-3)")
    p.add_argument("--null", choices=("gaussian", "empirical"), default="gaussian", help="null model")
    p.add_argument("--contrast", choices=CONTRASTS, default="logcosh", help="FastICA contrast")
    p.add_argument("--side-range", type=_pair, default=None, help="rectangle side range")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="CSV output path")
    p.set_defaults(func=cmd_table1)

    p = sub.add_parser("consistency", help="downsampling consistency against full-data pseudo truth")
    _common(p)
    p.add_argument("--input", help="SICA1 time x voxels matrix; synthesized when omitted")
    p.add_argument("--k", type=int, default=3, help="subsampling factor")
    p.add_argument("--components", type=int, default=9, help="number of components")
    p.add_argument("--alpha", type=float, default=1e-2, help="specified p-value")
    p.add_argument("--contrast", choices=CONTRASTS, default="logcosh", help="FastICA contrast")
    p.add_argument("--n-time", type=int, default=300, help="synthetic series length")
    p.add_argument("--obs-noise", type=float, default=0.05, help="synthetic observation noise")
    _add_sim_options(p)
    p.add_argument("--out", help="CSV output path (default stdout only)")
    p.set_defaults(func=cmd_consistency)
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so flags override the file."""
    args = parser.parse_args(argv)
    if not getattr(args, "config", None):
        return args
    try:
        values = json.loads(Path(args.config).read_text())
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {args.config}: {exc}") from None
    if not isinstance(values, dict):
        raise UsageError("config file must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(k.replace("-", "_") for k in values) - known)
    if unknown:
        raise UsageError(f"unknown config keys: {', '.join(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in values.items()})
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"sica: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, PreconditionError) as exc:
        print(f"sica: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        logger.debug("runtime failure", exc_info=True)
        print(f"sica: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
