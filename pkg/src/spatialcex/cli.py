"""Command-line pipeline: transform, explore, deform, fit, refit-z, simulate, diagnose, bootstrap.

Every subcommand reads a configuration (``key = value`` lines or JSON),
optionally overridden by ``--set key=value``, and writes its outputs plus a
``manifest.json`` into the output directory.  Outputs are staged in a
temporary directory and only moved into place once the run succeeds.

Exit codes: 0 success, 2 configuration or input error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import shutil
import sys
import tempfile
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from spatialcex import __version__
from spatialcex.datasets import demo_dataset
from spatialcex.deform import DeformConfig, tau_apply, tau_fit
from spatialcex.depmodel import NumericalError
from spatialcex.diagnostics import (
    bootstrap_fit,
    bootstrap_summary,
    chi_table,
    expected_exceedances,
    kendall_independence_check,
    model_vs_data_pairs,
)
from spatialcex.likelihood import (
    ConditionalModelParams,
    FitConfig,
    FittedModel,
    extract_residuals,
    fit,
    pairwise_fit,
    refit_residuals,
)
from spatialcex.margins import (
    CSVSchemaError,
    MarginalTransform,
    MarginTag,
    SpatialDataset,
    laplace_threshold,
    read_dataset,
    to_laplace,
    write_locations,
    write_observations,
)
from spatialcex.simulate import importance_sample, importance_subsample, unconditional_prob, weighted_estimate

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MANIFEST_SCHEMA = 1
SUBCOMMANDS = ("demo", "transform", "explore", "deform", "fit", "refit-z", "simulate", "diagnose", "bootstrap")


class ConfigError(ValueError):
    """Invalid configuration; the message names the source and line when known."""


# Configuration schema


def _str(x):
    return str(x)


def _int(x):
    if isinstance(x, bool):
        raise ValueError("expected an integer")
    if isinstance(x, float) and not x.is_integer():
        raise ValueError("expected an integer")
    return int(x)


def _float(x):
    v = float(x)
    if not np.isfinite(v):
        raise ValueError("expected a finite number")
    return v


def _bool(x):
    if isinstance(x, bool):
        return x
    s = str(x).strip().lower()
    if s in ("1", "true", "yes", "on"):
        return True
    if s in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected a boolean")


def _list(item):
    def parse(x):
        seq = x if isinstance(x, (list, tuple)) else [t for t in str(x).split(",") if t.strip()]
        return [item(t.strip() if isinstance(t, str) else t) for t in seq]

    return parse


def _choice(*options):
    def parse(x):
        if str(x) not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return str(x)

    return parse


def _pairs(x):
    seq = x if isinstance(x, (list, tuple)) else [t for t in str(x).split(",") if t.strip()]
    out = []
    for t in seq:
        a, b = (t.split(":") if isinstance(t, str) else t)
        out.append([str(a).strip(), str(b).strip()])
    return out


# name -> (parser, default); a default of ... marks a required key
SCHEMA = {
    "output": (_str, ...),
    "seed": (_int, ...),
    "locations": (_str, None),
    "observations": (_str, None),
    "margins": (_choice("raw", "laplace"), "raw"),
    "margin_transform": (_str, None),
    "model": (_str, None),
    "subset": (_str, None),
    "threshold_q": (_float, 0.95),
    "b_variant": (_choice("model1", "model2", "model3"), "model3"),
    "residual_variant": (_choice("conditioned", "increments"), "conditioned"),
    "Delta_grid": (_list(_float), [0.0]),
    "shape": (_choice("function", "constant"), "function"),
    "scale_match": (_choice("sd", "variance"), "sd"),
    "n_starts": (_int, 3),
    "screen_maxfev": (_int, 300),
    "maxiter": (_int, 4000),
    "polish": (_bool, False),
    "chi_q": (_float, 0.95),
    "explore_site": (_str, None),
    "anchors": (_list(_str), None),
    "deform_statistic": (_choice("correlation", "chi"), "correlation"),
    "v_quantiles": (_list(_float), [0.975, 0.99, 0.995, 0.999, 0.9999]),
    "nsims": (_int, 10000),
    "sites": (_list(_str), None),
    "save_draws": (_int, 0),
    "min_exceedances": (_int, 20),
    "kendall_null": (_int, 1000),
    "diag_site": (_str, None),
    "diag_pairs": (_pairs, []),
    "n_boot": (_int, 100),
    "mean_block": (_float, 10.0),
    "n_jobs": (_int, 1),
    "demo_n": (_int, 2000),
}

# keys that name where results go rather than what is computed
_NOT_HASHED = ("output", "n_jobs")


def _parse_text(text: str, source: str) -> dict:
    out: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}:1: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{source}:{lineno}:1: unknown key {key!r}")
        out[key] = (value, f"{source}:{lineno}:{raw.index('=') + 2}")
    return out


def _parse_json(text: str, source: str) -> dict:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{source}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(obj, dict):
        raise ConfigError(f"{source}: top level must be an object")
    for key in obj:
        if key not in SCHEMA:
            raise ConfigError(f"{source}: unknown key {key!r}")
    return {k: (v, f"{source}: key {k!r}") for k, v in obj.items()}


def load_config(path=None, overrides=()) -> dict:
    """Resolve a configuration from a file and ``key=value`` overrides."""
    raw: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        text = p.read_text()
        raw = _parse_json(text, str(p)) if p.suffix == ".json" or text.lstrip().startswith("{") else _parse_text(text, str(p))
    for k, item in enumerate(overrides, start=1):
        raw.update(_parse_text(item, f"--set[{k}]"))
    cfg = {}
    for key, (parser, default) in SCHEMA.items():
        if key in raw:
            value, where = raw[key]
            try:
                cfg[key] = parser(value)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"{where}: invalid value for {key}: {exc}") from None
        elif default is ...:
            raise ConfigError(f"missing required key {key!r}")
        else:
            cfg[key] = default
    return cfg


def config_hash(cfg: dict) -> str:
    canon = json.dumps({k: v for k, v in cfg.items() if k not in _NOT_HASHED}, sort_keys=True)
    return hashlib.sha256(canon.encode()).hexdigest()


def _require(cfg, *keys):
    missing = [k for k in keys if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    for k in keys:
        if k in ("locations", "observations", "model", "margin_transform") and not Path(cfg[k]).is_file():
            raise ConfigError(f"{k}: file not found: {cfg[k]}")


# Inputs


def _apply_subset(data: SpatialDataset, spec: str | None) -> SpatialDataset:
    """Restrict replicates by ``index:START:STOP`` or ``times:T1,T2,...`` / ``times:@FILE``."""
    if spec is None:
        return data
    kind, _, arg = spec.partition(":")
    if kind == "index":
        parts = arg.split(":")
        try:
            bounds = [int(p) if p.strip() else None for p in parts]
        except ValueError:
            raise ConfigError(f"subset: bad index range {arg!r}") from None
        rows = np.arange(data.n_replicates)[slice(*bounds)]
    elif kind == "times":
        if data.replicate_times is None:
            raise ConfigError("subset: observations have no time column")
        if arg.startswith("@"):
            fp = Path(arg[1:])
            if not fp.is_file():
                raise ConfigError(f"subset: file not found: {fp}")
            wanted = {t.strip() for t in fp.read_text().splitlines() if t.strip()}
        else:
            wanted = {t.strip() for t in arg.split(",") if t.strip()}
        rows = np.flatnonzero([t in wanted for t in data.replicate_times])
    else:
        raise ConfigError(f"subset: expected 'index:' or 'times:' prefix, got {spec!r}")
    if rows.size == 0:
        raise ConfigError("subset selects no replicates")
    return data.subset(rows)


def _load_data(cfg) -> SpatialDataset:
    _require(cfg, "locations", "observations")
    data = read_dataset(cfg["locations"], cfg["observations"])
    if cfg["margins"] == "laplace":
        data = SpatialDataset(data.locations, data.observations, MarginTag.LAPLACE, data.site_ids,
                              data.replicate_times)
    return _apply_subset(data, cfg["subset"])


def _laplace_data(cfg):
    data = _load_data(cfg)
    if data.margin_tag is MarginTag.LAPLACE:
        tr = None
        if cfg["margin_transform"] is not None:
            _require(cfg, "margin_transform")
            tr = MarginalTransform.from_dict(json.loads(Path(cfg["margin_transform"]).read_text()))
        return data, tr
    return to_laplace(data)


def _load_model(cfg) -> FittedModel:
    _require(cfg, "model")
    try:
        return FittedModel.from_json(Path(cfg["model"]).read_text())
    except (KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"model: not a fitted-model file ({exc})") from None


def _site_index(ids, name, key):
    ids = list(ids)
    if name not in ids:
        raise ConfigError(f"{key}: unknown site id {name!r}")
    return ids.index(name)


def _sites(cfg, ids, key="sites"):
    if cfg[key] is None:
        return np.arange(len(ids))
    return np.array([_site_index(ids, s, key) for s in cfg[key]])


def _fit_config(cfg) -> FitConfig:
    return FitConfig(b_variant=cfg["b_variant"], residual_variant=cfg["residual_variant"],
                     Delta_grid=tuple(cfg["Delta_grid"]), shape=cfg["shape"], scale_match=cfg["scale_match"],
                     n_starts=cfg["n_starts"],
                     screen_maxfev=cfg["screen_maxfev"], maxiter=cfg["maxiter"], polish=cfg["polish"],
                     seed=cfg["seed"])


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def _write_json(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n")


# Subcommands; each writes into ``out`` and returns nothing


def run_demo(cfg, out: Path):
    data = demo_dataset(n=cfg["demo_n"], seed=cfg["seed"])
    write_locations(out / "locations.csv", data.locations, data.site_ids)
    write_observations(out / "observations.csv", data.observations, data.site_ids, data.replicate_times)


def run_transform(cfg, out: Path):
    data = _load_data(cfg)
    if data.margin_tag is MarginTag.LAPLACE:
        raise ConfigError("transform expects raw-scale observations (margins = raw)")
    lap, tr = to_laplace(data)
    write_locations(out / "locations.csv", lap.locations, lap.site_ids)
    write_observations(out / "laplace_observations.csv", lap.observations, lap.site_ids, lap.replicate_times)
    _write_json({"schema_version": 1, **tr.to_dict()}, out / "margins.json")


def run_explore(cfg, out: Path):
    data, _ = _laplace_data(cfg)
    tab = chi_table(data, cfg["chi_q"])
    tab.insert(2, "site_j", [data.site_ids[j] for j in tab["j"]])
    tab.insert(1, "site_i", [data.site_ids[i] for i in tab["i"]])
    _write_csv(tab, out / "chi.csv")
    j = 0 if cfg["explore_site"] is None else _site_index(data.site_ids, cfg["explore_site"], "explore_site")
    pairs = [(j, k) for k in range(data.n_sites) if k != j]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        pf = pairwise_fit(data, laplace_threshold(cfg["threshold_q"]), pairs, b_variant=cfg["b_variant"])
    _write_csv(pf, out / "pairwise.csv")


def run_deform(cfg, out: Path):
    _require(cfg, "anchors")
    data, _ = _laplace_data(cfg)
    anchors = [_site_index(data.site_ids, a, "anchors") for a in cfg["anchors"]]
    res = tau_fit(data, anchors, DeformConfig(statistic=cfg["deform_statistic"], chi_q=cfg["chi_q"],
                                              maxiter=cfg["maxiter"]))
    if not res.converged:
        warnings.warn("deformation fit did not converge", RuntimeWarning, stacklevel=2)
    write_locations(out / "deformed_locations.csv", tau_apply(data.locations, res.params), data.site_ids)
    doc = {"schema_version": 1, "params": res.params.to_dict(), "curve": res.curve.tolist(),
           "objective": res.objective, "objective_identity": res.objective_identity,
           "converged": res.converged, "statistic": cfg["deform_statistic"]}
    _write_json(doc, out / "deformation.json")


def run_fit(cfg, out: Path):
    data, tr = _laplace_data(cfg)
    fm = fit(data, laplace_threshold(cfg["threshold_q"]), _fit_config(cfg), transforms=tr)
    (out / "fit.json").write_text(fm.to_json() + "\n")


def run_refit_z(cfg, out: Path):
    fm = _load_model(cfg)
    data, _ = _laplace_data(cfg)
    if data.n_sites != fm.locations.shape[0] or not np.allclose(data.locations, fm.locations):
        raise ConfigError("observations and model have different site sets")
    resid = extract_residuals(data, fm)
    spec = refit_residuals(resid, fm.locations, fm.params.residual, min_exceedances=cfg["min_exceedances"],
                           maxiter=cfg["maxiter"])
    fm.params = ConditionalModelParams(fm.params.alpha, fm.params.b, spec)
    fm.fit_info = {**fm.fit_info, "residual_refit": {"min_exceedances": cfg["min_exceedances"]}}
    (out / "refit_z.json").write_text(fm.to_json() + "\n")
    ids = fm.site_ids or [str(i) for i in range(fm.locations.shape[0])]
    E = pd.DataFrame(spec.empirical_means, columns=ids)
    E.insert(0, "conditioning_site", ids)
    _write_csv(E, out / "residual_means.csv")


def run_simulate(cfg, out: Path):
    fm = _load_model(cfg)
    ids = fm.site_ids or [str(i) for i in range(fm.locations.shape[0])]
    sites = _sites(cfg, ids)
    qs = cfg["v_quantiles"]
    vs = [laplace_threshold(q) for q in qs]
    for v in vs:
        if v < fm.threshold_u:
            raise ConfigError(f"v_quantiles: level {v:.4g} is below the fitted threshold {fm.threshold_u:.4g}")
    samples = importance_sample(fm, sites, vs, cfg["nsims"], cfg["seed"])
    rows, urows = [], []
    for q, v, smp in zip(qs, vs, samples):
        est, se = weighted_estimate(smp, lambda X, v=v: np.sum(X > v, axis=1).astype(float))
        rows.append({"q": q, "v": v, "estimate": float(est), "se": float(se)})
        prob, pse = unconditional_prob(fm, sites, v, cfg["nsims"], cfg["seed"])
        urows.append({"q": q, "v": v, "prob_max_exceeds": prob, "se": pse})
        if cfg["save_draws"] > 0:
            sub = importance_subsample(smp, min(cfg["save_draws"], smp.n - 1), cfg["seed"])
            draws = pd.DataFrame(sub, columns=[ids[s] for s in sites])
            _write_csv(draws, out / f"draws_q{q:g}.csv")
    _write_csv(pd.DataFrame(rows), out / "expected_exceedances.csv")
    _write_csv(pd.DataFrame(urows), out / "unconditional.csv")


def run_diagnose(cfg, out: Path):
    fm = _load_model(cfg)
    data, _ = _laplace_data(cfg)
    if data.n_sites != fm.locations.shape[0] or not np.allclose(data.locations, fm.locations):
        raise ConfigError("observations and model have different site sets")
    ids = data.site_ids
    kt = kendall_independence_check(fm, data, n_null=cfg["kendall_null"], seed=cfg["seed"])
    kt.insert(1, "site_id", [ids[j] for j in kt["site"]])
    _write_csv(kt, out / "kendall.csv")
    sites = _sites(cfg, ids)
    qs = [q for q in cfg["v_quantiles"] if laplace_threshold(q) >= fm.threshold_u]
    ee = expected_exceedances(fm, sites, qs, cfg["nsims"], cfg["seed"], data=data)
    _write_csv(ee, out / "expected_exceedances.csv")
    if cfg["diag_site"] is not None:
        j = _site_index(ids, cfg["diag_site"], "diag_site")
        pairs = [(_site_index(ids, a, "diag_pairs"), _site_index(ids, b, "diag_pairs")) for a, b in cfg["diag_pairs"]]
        try:
            mv = model_vs_data_pairs(fm, data, j, pairs, cfg["nsims"], cfg["seed"])
        except ValueError as exc:
            raise ConfigError(f"diag_pairs: {exc}") from None
        _write_csv(mv, out / "model_vs_data.csv")


def run_bootstrap(cfg, out: Path):
    fm = _load_model(cfg)
    data = _load_data(cfg)
    config = fm.config if fm.config is not None else _fit_config(cfg)
    start = {k: v for k, v in fm.params.values().items() if k not in config.fixed}
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        boot = bootstrap_fit(data, fm.threshold_u, config, cfg["n_boot"], cfg["seed"], mean_block=cfg["mean_block"],
                             start=start, n_jobs=cfg["n_jobs"])
    _write_csv(boot, out / "bootstrap.csv")
    _write_csv(bootstrap_summary(boot, truth=fm.params.values()), out / "bootstrap_summary.csv")


RUNNERS = {
    "demo": run_demo,
    "transform": run_transform,
    "explore": run_explore,
    "deform": run_deform,
    "fit": run_fit,
    "refit-z": run_refit_z,
    "simulate": run_simulate,
    "diagnose": run_diagnose,
    "bootstrap": run_bootstrap,
}


@dataclass
class RunResult:
    status: int
    output: Path | None
    files: list


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def run(subcommand: str, cfg: dict) -> RunResult:
    """Run one subcommand with a resolved configuration.

    Outputs are written to a staging directory next to ``cfg["output"]`` and
    moved into place only on success, together with ``manifest.json``.
    """
    if subcommand not in RUNNERS:
        raise ConfigError(f"unknown subcommand {subcommand!r}")
    out = Path(cfg["output"])
    out.parent.mkdir(parents=True, exist_ok=True)
    stage = Path(tempfile.mkdtemp(prefix=f".{out.name}-", dir=out.parent))
    try:
        with np.errstate(over="ignore", under="ignore"):
            RUNNERS[subcommand](cfg, stage)
        files = sorted(p.name for p in stage.iterdir())
        manifest = {
            "schema_version": MANIFEST_SCHEMA,
            "subcommand": subcommand,
            "version": __version__,
            "config": {k: v for k, v in cfg.items() if k not in _NOT_HASHED},
            "config_hash": config_hash(cfg),
            "outputs": {name: _sha256(stage / name) for name in files},
        }
        _write_json(manifest, stage / "manifest.json")
        out.mkdir(parents=True, exist_ok=True)
        for name in files + ["manifest.json"]:
            os.replace(stage / name, out / name)
    finally:
        shutil.rmtree(stage, ignore_errors=True)
    return RunResult(EXIT_OK, out, files)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="spatialcex", description="Conditional spatial extremes pipeline.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="key = value or JSON configuration file")
        p.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key (repeatable)")
        p.add_argument("--output", "-o", help="output directory")
        p.add_argument("--seed", type=int, help="random seed")
        p.add_argument("--subset", help="replicate filter: index:START:STOP, times:T1,T2 or times:@FILE")
        if name == "simulate":
            p.add_argument("--v-quantile", type=float, action="append", dest="v_quantile",
                           help="quantile level of v (repeatable)")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    overrides = list(args.set)
    if args.output is not None:
        overrides.append(f"output={args.output}")
    if args.seed is not None:
        overrides.append(f"seed={args.seed}")
    if args.subset is not None:
        overrides.append(f"subset={args.subset}")
    if getattr(args, "v_quantile", None):
        overrides.append("v_quantiles=" + ",".join(repr(q) for q in args.v_quantile))
    try:
        cfg = load_config(args.config, overrides)
        res = run(args.subcommand, cfg)
    except (NumericalError, np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, CSVSchemaError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(f"{args.subcommand}: wrote {', '.join(res.files)} to {res.output}")
    return res.status


if __name__ == "__main__":
    sys.exit(main())
