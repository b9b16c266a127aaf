"""Command line entry point: ``surrmeta <subcommand> ...``.

Settings are resolved as built-in defaults < JSON ``--config`` file < flags.
Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np
import pandas as pd

from . import data as dio
from . import simulate as sim
from .metrics import BootstrapError
from .pipeline import forest_table, parse_meta, power_epsilon, screen
from .signature import SignatureSpec, ZeroVarianceError, evaluate_signature
from .validation import InsufficientDataError, SingularityError

logger = logging.getLogger("surrmeta")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
THREADS_ENV = "SURRMETA_THREADS"

DEFAULTS = {
    "common": {
        "epsilon": None,
        "epsilon_power": [0.05, 0.80],
        "alpha": 0.05,
        "meta": "re-hksj",
        "split_fraction": None,
        "seed": 0,
        "min_n": 2,
        "out": ".",
        "threads": None,
        "verbose": 0,
    },
    "screen": {"top_k": 10, "svg": False},
    "evaluate": {"n_boot": 2000, "signature": None},
    "simulate": {
        "scenario": "calibration",
        "j": 20_000,
        "alphas": [0.01, 0.025, 0.05, 0.1],
        "epsilon": 0.1,
        "M": 10,
        "n": 10,
        "u_tau2_max": None,
        "u_nu_max": None,
        "mu_regime": "LFC",
        "mu_fixed": 0.0,
        "data": None,
        "n_reps": 500,
        "n_per_study": None,
        "n_studies": None,
    },
    "aggregate-genesets": {"catalog": None},
    "split": {"split_fraction": 0.66},
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _common(p: argparse.ArgumentParser, data_arg=True):
    if data_arg:
        p.add_argument("data", help="long-format study CSV (study,subject,arm,y,<markers>)")
    p.add_argument("--config", help="JSON file with default settings")
    eps = p.add_mutually_exclusive_group()
    eps.add_argument("--epsilon", type=float, help="fixed equivalence bound")
    eps.add_argument("--epsilon-power", type=float, nargs=2, metavar=("ALPHA", "POWER"),
                     help="derive the bound from the endpoint's standard errors")
    p.add_argument("--alpha", type=float)
    p.add_argument("--meta", choices=sorted(["re-hksj", "re-conv", "fe"]))
    p.add_argument("--split-fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--min-n", type=int, help="minimum complete subjects per study")
    p.add_argument("--out", help="output directory")
    p.add_argument("--threads", type=int, help=f"worker threads (default ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="count")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="surrmeta", description="Trial-level surrogate screening with random-effects meta-analysis.")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    kw = {"argument_default": argparse.SUPPRESS}

    p = sub.add_parser("screen", help="screen markers and build a signature", **kw)
    _common(p)
    p.add_argument("--top-k", type=int, help="forest-plot tables for the K smallest p-values")
    p.add_argument("--svg", action="store_true", help="also draw forest plots (needs matplotlib)")

    p = sub.add_parser("evaluate", help="evaluate a signature on held-out data", **kw)
    _common(p)
    p.add_argument("--signature", help="signature.json from `screen`")
    p.add_argument("--n-boot", type=int, help="bootstrap replicates for the metric intervals")

    p = sub.add_parser("simulate", help="Monte Carlo calibration, power and permutation studies", **kw)
    _common(p, data_arg=False)
    p.add_argument("--scenario", choices=["calibration", "heterogeneity", "power", "variants", "custom", "permutation"])
    p.add_argument("--j", type=int, help="markers per configuration")
    p.add_argument("--alphas", type=float, nargs="+")
    p.add_argument("--M", type=int)
    p.add_argument("--n", type=int)
    p.add_argument("--u-tau2-max", type=float)
    p.add_argument("--u-nu-max", type=float)
    p.add_argument("--mu-regime", choices=list(sim.MU_REGIMES))
    p.add_argument("--mu-fixed", type=float)
    p.add_argument("--data", help="paired study CSV (permutation scenario)")
    p.add_argument("--n-reps", type=int)
    p.add_argument("--n-per-study", type=int)
    p.add_argument("--n-studies", type=int)

    p = sub.add_parser("aggregate-genesets", help="average member features into geneset scores", **kw)
    _common(p)
    p.add_argument("--catalog", help="CSV with columns geneset,member")

    p = sub.add_parser("split", help="split subjects into screening and holdout parts", **kw)
    _common(p)
    return parser


def resolve_settings(ns: argparse.Namespace) -> dict:
    """Merge defaults, the config file and explicit flags."""
    cmd = ns.command
    given = {k: v for k, v in vars(ns).items() if k not in ("command", "config")}
    cfg = {}
    path = getattr(ns, "config", None)
    if path:
        try:
            with open(path, encoding="utf-8") as fh:
                cfg = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {path}: {exc}") from None
        if not isinstance(cfg, dict):
            raise UsageError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
    settings = {**DEFAULTS["common"], **DEFAULTS.get(cmd, {})}
    unknown = set(cfg) - set(settings)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    settings.update(cfg)
    # the two epsilon forms are exclusive: a flag for one clears the other
    if "epsilon" in given:
        settings["epsilon_power"] = None
    if "epsilon_power" in given:
        settings["epsilon"] = None
    settings.update(given)
    if settings["threads"] is None:
        env = os.environ.get(THREADS_ENV)
        try:
            settings["threads"] = int(env) if env else 1
        except ValueError:
            raise UsageError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if settings["threads"] < 1:
        raise UsageError("threads must be at least 1")
    if not 0 < settings["alpha"] < 0.5:
        raise UsageError("alpha must lie in (0, 0.5)")
    parse_meta(settings["meta"])
    return settings


def _epsilon_arg(settings):
    if settings.get("epsilon") is not None:
        if not settings["epsilon"] > 0:
            raise UsageError("epsilon must be positive")
        return float(settings["epsilon"])
    if settings.get("epsilon_power"):
        a, pw = settings["epsilon_power"]
        if not (0 < a < 1 and 0 < pw < 1):
            raise UsageError("--epsilon-power needs ALPHA and POWER in (0, 1)")
        return ("power", float(a), float(pw))
    raise UsageError("either --epsilon or --epsilon-power is required")


def _write_csv(frame: pd.DataFrame, path: Path):
    frame.to_csv(path, index=False, lineterminator="\n", encoding="utf-8")
    logger.info("wrote %s", path)


def _write_json(obj, path: Path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    logger.info("wrote %s", path)


def _safe_name(marker: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]+", "_", marker)


def _load(settings, path=None):
    studies = dio.parse_study_csv(path or settings["data"])
    return dio.filter_studies(studies, settings["min_n"])


def _maybe_split(studies, settings, out: Path):
    frac = settings.get("split_fraction")
    if frac is None:
        return studies
    screen_part, holdout = dio.split_studies(studies, frac, settings["seed"])
    dio.write_study_csv(holdout, out / "holdout.csv")
    dio.write_study_csv(screen_part, out / "screen.csv")
    return screen_part


# ------------------------------------------------------------ subcommands


def cmd_screen(settings) -> int:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    studies = _maybe_split(_load(settings), settings, out)
    if len(studies) < 2:
        raise InsufficientDataError(f"screening needs at least 2 studies for the meta-analysis, found {len(studies)}")
    res = screen(studies, _epsilon_arg(settings), settings["alpha"], meta_method=settings["meta"], threads=settings["threads"])
    cols = ["marker", "mu", "tau2", "se", "q", "df", "n_studies", "ci_low", "ci_high", "pi_low", "pi_high",
            "p_lower", "p_upper", "p", "p_adjusted", "significant"]
    _write_csv(res.table[cols], out / "screen_results.csv")
    res.signature.to_json(out / "signature.json")
    if res.signature.is_empty:
        logger.warning("no marker passed screening at alpha=%g; signature.json has no members", settings["alpha"])
    for marker in res.table["marker"].head(settings["top_k"]):
        ft = forest_table(res, marker)
        _write_csv(ft, out / f"forest_{_safe_name(marker)}.csv")
        if settings.get("svg"):
            _forest_svg(ft, marker, out / f"forest_{_safe_name(marker)}.svg", res.epsilon)
    _write_json({"command": "screen", "epsilon": res.epsilon, **_jsonable(settings)}, out / "run_config.json")
    print(f"screened {len(res.table)} markers across {len(studies)} studies; epsilon={res.epsilon:.6g}; "
          f"{len(res.selected)} selected")
    return EXIT_OK


def _forest_svg(ft: pd.DataFrame, marker: str, path: Path, epsilon: float):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        logger.warning("matplotlib is not installed; skipping %s", path.name)
        return
    plt.rcParams["svg.hashsalt"] = "surrmeta"
    fig, ax = plt.subplots(figsize=(6, 0.4 * len(ft) + 1))
    ypos = np.arange(len(ft))[::-1]
    ax.errorbar(ft["estimate"], ypos, xerr=[ft["estimate"] - ft["ci_low"], ft["ci_high"] - ft["estimate"]],
                fmt="o", color="black", capsize=2)
    ax.axvline(0, color="grey", lw=0.8)
    for e in (-epsilon, epsilon):
        ax.axvline(e, color="grey", ls="--", lw=0.8)
    ax.set_yticks(ypos)
    ax.set_yticklabels(ft["label"])
    ax.set_xlabel("U_Y - U_S")
    ax.set_title(marker)
    fig.tight_layout()
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)


def cmd_evaluate(settings) -> int:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    if not settings.get("signature"):
        raise UsageError("evaluate requires --signature <signature.json>")
    spec = SignatureSpec.from_json(settings["signature"])
    if spec.is_empty:
        raise UsageError("the signature has no members; nothing to evaluate")
    holdout = dio.parse_study_csv(settings["data"])
    eps_arg = _epsilon_arg(settings)
    eps = power_epsilon(holdout, eps_arg[1], eps_arg[2]) if isinstance(eps_arg, tuple) else eps_arg
    method, variance_method = parse_meta(settings["meta"])
    ev = evaluate_signature(holdout, spec, eps, settings["alpha"], method=method, variance_method=variance_method,
                            min_n=settings["min_n"], n_boot=settings["n_boot"], seed=settings["seed"])
    _write_csv(evaluation_table(ev), out / "evaluate_results.csv")
    metrics = ev.metrics.copy()
    metrics["level"] = 0.95
    metrics["n_boot"] = settings["n_boot"]
    _write_csv(metrics, out / "metrics.csv")
    _write_json({"command": "evaluate", "epsilon": eps, "skipped": ev.skipped, **_jsonable(settings)},
                out / "run_config.json")
    print(f"pooled delta={ev.pooled.mu_hat:.6g} se={ev.pooled.se_pooled:.6g} p_tost={ev.p_tost:.6g} "
          f"epsilon={eps:.6g} over {ev.pooled.n_studies} studies")
    return EXIT_OK


def evaluation_table(ev) -> pd.DataFrame:
    """Per-study rows, then the pooled row and the prediction-interval row."""
    ps = ev.per_study
    pooled = ev.pooled
    rows = pd.DataFrame(
        {
            "row": "study",
            "study": ps["study"],
            "n": ps["n"],
            "u_y": ps["u_y"],
            "u_s": ps["u_s"],
            "delta": ps["delta"],
            "se": np.sqrt(ps["var_delta"]),
            "weight": ps["weight"],
            "ci_low": math.nan,
            "ci_high": math.nan,
        }
    )
    n_total = int(ps["n"].sum())
    summary = pd.DataFrame(
        [
            {"row": "pooled", "study": "", "n": n_total, "u_y": math.nan, "u_s": math.nan, "delta": pooled.mu_hat,
             "se": pooled.se_pooled, "weight": 1.0, "ci_low": pooled.ci_low, "ci_high": pooled.ci_high},
            {"row": "prediction", "study": "", "n": n_total, "u_y": math.nan, "u_s": math.nan, "delta": pooled.mu_hat,
             "se": math.sqrt(pooled.se_pooled**2 + pooled.tau2_hat), "weight": math.nan,
             "ci_low": pooled.pi_low, "ci_high": pooled.pi_high},
        ]
    )
    table = pd.concat([rows, summary], ignore_index=True)
    table["tau2"] = pooled.tau2_hat
    table["epsilon"] = ev.epsilon
    table["p_lower"] = ev.p_lower
    table["p_upper"] = ev.p_upper
    table["p_tost"] = ev.p_tost
    table["significant"] = ev.significant
    return table


def cmd_simulate(settings) -> int:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    scenario = settings["scenario"]
    if scenario == "permutation":
        return _simulate_permutation(settings, out)
    eps = settings["epsilon"]
    if eps is None or not eps > 0:
        raise UsageError("simulate needs a positive --epsilon")
    J, seed, meta = settings["j"], settings["seed"], settings["meta"]
    alphas = settings["alphas"]
    if scenario == "calibration":
        configs = [(c, "calibration") for c in sim.samples_grid(eps, J, seed, meta)]
    elif scenario == "heterogeneity":
        configs = [(c, "calibration") for c in sim.heterogeneity_grid(eps, J, seed, meta)]
    elif scenario == "power":
        configs = [(c, "power") for c in sim.power_grid(eps, J, seed, meta)]
    elif scenario == "variants":
        configs = [(c, "calibration") for m in ("fe", "re-conv", "re-hksj") for c in sim.heterogeneity_grid(eps, J, seed, m)]
    else:
        ut = settings["u_tau2_max"] if settings["u_tau2_max"] is not None else eps / 10
        un = settings["u_nu_max"] if settings["u_nu_max"] is not None else 100 * eps
        c = sim.SimConfig(J=J, M=settings["M"], n_m=settings["n"], epsilon=eps, alpha=settings["alpha"],
                          u_tau2_max=ut, u_nu_max=un, mu_regime=settings["mu_regime"],
                          mu_fixed=settings["mu_fixed"], meta_method=meta, seed=seed)
        configs = [(c, "calibration" if c.mu_regime == sim.LFC else "power")]
    parts = []
    for c, kind in configs:
        if kind == "calibration":
            parts.append(sim.run_calibration(c, alphas, threads=settings["threads"]))
        else:
            parts.append(sim.summarize(c, sim.simulate_pvalues(c, settings["threads"]), alphas, "power"))
    summary = sim.SimSummary.concat(parts)
    summary.to_csv(out / "sim_summary.csv")
    _write_json([json.loads(c.to_json()) for c, _ in configs], out / "sim_config.json")
    print(f"simulated {len(configs)} configuration(s) x {len(alphas)} level(s), J={J}")
    return EXIT_OK


def _simulate_permutation(settings, out: Path) -> int:
    if not settings.get("data"):
        raise UsageError("the permutation scenario needs --data <paired study CSV>")
    studies = dio.parse_study_csv(settings["data"])
    eps = _epsilon_arg(settings)
    res = sim.run_permutation_fpr(studies, settings["n_reps"], settings["n_per_study"], settings["n_studies"],
                                  settings["alpha"], settings["seed"], epsilon=eps, meta=settings["meta"])
    _write_csv(res.to_frame(), out / "permutation_fpr.csv")
    _write_json({"command": "simulate", **_jsonable(settings)}, out / "sim_config.json")
    print(f"mean FPR {res.mean:.4g} (max {res.max:.4g}) over {settings['n_reps']} replicates")
    return EXIT_OK


def cmd_aggregate(settings) -> int:
    if not settings.get("catalog"):
        raise UsageError("aggregate-genesets requires --catalog <geneset,member CSV>")
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    catalog = dio.read_geneset_catalog(settings["catalog"])
    studies = dio.parse_study_csv(settings["data"])
    agg = [dio.aggregate_genesets(s, catalog) for s in studies]
    dio.write_study_csv(agg, out / "genesets.csv")
    print(f"aggregated {studies[0].n_markers} features into {agg[0].n_markers} genesets")
    return EXIT_OK


def cmd_split(settings) -> int:
    out = Path(settings["out"])
    out.mkdir(parents=True, exist_ok=True)
    frac = settings["split_fraction"]
    if frac is None or not 0 < frac < 1:
        raise UsageError("--split-fraction must lie in (0, 1)")
    studies = _load(settings)
    a, b = dio.split_studies(studies, frac, settings["seed"])
    dio.write_study_csv(a, out / "screen.csv")
    dio.write_study_csv(b, out / "holdout.csv")
    print(f"split {len(studies)} studies into screen.csv and holdout.csv")
    return EXIT_OK


COMMANDS = {
    "screen": cmd_screen,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "aggregate-genesets": cmd_aggregate,
    "split": cmd_split,
}

DATA_ERRORS = (
    dio.SchemaError,
    dio.DataParseError,
    dio.IntegrityError,
    dio.NoStudiesError,
    InsufficientDataError,
    ZeroVarianceError,
    FileNotFoundError,
    KeyError,
)


def _jsonable(settings) -> dict:
    return {k: v for k, v in sorted(settings.items()) if k not in ("out", "threads", "verbose")}


def main(argv=None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    if ns.command is None:
        parser.print_help(sys.stderr)
        return EXIT_USAGE
    try:
        settings = resolve_settings(ns)
    except (UsageError, ValueError) as exc:
        print(f"surrmeta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = logging.WARNING - 10 * min(settings["verbose"] or 0, 1)
    logging.basicConfig(level=level, format="%(levelname)s: %(message)s", stream=sys.stderr)
    try:
        return COMMANDS[ns.command](settings)
    except UsageError as exc:
        print(f"surrmeta: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (SingularityError, ArithmeticError, BootstrapError) as exc:
        print(f"surrmeta: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except DATA_ERRORS as exc:
        print(f"surrmeta: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"surrmeta: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
