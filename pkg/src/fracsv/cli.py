"""Command-line entry point: ``fracsv <command> [--config FILE] [--set key=value ...]``.

Settings are resolved in increasing precedence: built-in defaults, the YAML
config file, then ``--set`` overrides and the shortcut flags.  Every command
writes the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import copy
import logging
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np
import yaml

from . import diagnostics, io
from .errors import (
    DataError,
    EmptyChain,
    FracSVError,
    InvalidParameter,
    MismatchedRuns,
    NumericalError,
)
from .fbm import GridSpec, sample_fgn
from .sampler import (
    HmcConfig,
    MassMatrix,
    autotune,
    run_chain,
    warmup,
)
from .sv_model import (
    PARAM_NAMES,
    PriorSpec,
    SVModel,
    Theta,
    log_jacobian_grad,
    log_prior_grad,
    log_prior_terms,
    loglik,
    simulate_dataset,
    theta_jacobian,
)

logger = logging.getLogger("fracsv")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERICAL, EXIT_THRESHOLD = 0, 1, 2, 3, 4
WORKERS_ENV = "FRACSV_WORKERS"

DEFAULTS = {
    "seed": 0,
    "output": {"dir": "out", "formats": ["csv", "text"]},
    "fbm": {"hurst": 0.7, "n_steps": 1000, "mesh": 1.0},
    "truth": {"mu": 0.25, "kappa": 4.0, "mu_x": -5.0, "sigma_x": 2.0, "hurst": 0.3,
              "rho": -0.75, "x0": -5.0},
    "simulate": {"regime": "A", "n_obs": 50, "substeps": 10, "obs_per_day": 1,
                 "day_length": 1.0, "y0": 0.0},
    "model": {
        "tau": 0.05,
        "prior": {
            "mu_sd": 1e3, "mu_x_mean": 0.0, "mu_x_sd": 10.0, "mu_x_range": None,
            "ig_shape": 2.0, "ig_scale": 2.0 * 0.03 * math.sqrt(252.0),
            "x0_mean": None, "x0_sd": 2.0, "hurst_beta": [1.0, 1.0], "rho_beta": [1.0, 1.0],
            "kappa_gamma": None,
        },
    },
    "data": {"path": None, "time_unit": "absolute",
             "columns": {"t": "t", "log_price": "log_price", "vol_proxy": "vol_proxy"}},
    "grid": {"mesh": None, "substeps": 1, "n_steps": None},
    "sampler": {"variant": "advanced", "update_mode": "joint", "step_size": 0.1,
                "horizon": 0.9, "iterations": 1000, "thin": 1, "seed": None, "mass": "auto",
                "pilot_iterations": 200, "pilot_passes": 2, "pilot_step_size": None,
                "pilot_horizon": None,
                "mass_omega": 40.0, "autotune": False, "autotune_fix": "horizon",
                "autotune_candidates": [5, 10, 15, 20, 30, 40, 50], "chains": 1,
                "keep_z": False},
    "gradcheck": {"n_obs": 4, "substeps": 8, "regime": "B", "eps": 1e-6, "threshold": 1e-4,
                  "point": "truth", "perturb": 0.0},
    "summary": {"burn_in": 0.2},
}


class ConfigError(FracSVError):
    pass


# --- configuration --------------------------------------------------------

def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in (extra or {}).items():
        if k not in out:
            raise ConfigError(f"unknown config key {where}{k}")
        if isinstance(out[k], dict) and out[k] is not None:
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k} must be a mapping")
            out[k] = _merge(out[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


def _set_path(cfg: dict, dotted: str, value):
    keys = dotted.split(".")
    node = cfg
    for k in keys[:-1]:
        if not isinstance(node.get(k), dict):
            raise ConfigError(f"unknown config key {dotted}")
        node = node[k]
    if keys[-1] not in node:
        raise ConfigError(f"unknown config key {dotted}")
    if isinstance(node[keys[-1]], dict):
        raise ConfigError(f"{dotted} is a section; set one of its keys")
    node[keys[-1]] = value


def resolve_config(path=None, overrides=()) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            cfg = _merge(cfg, io.load_config(path))
        except InvalidParameter as exc:
            raise ConfigError(str(exc)) from exc
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            value = io.parse_yaml(raw)
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse override {item!r}") from exc
        _set_path(cfg, key.strip(), value)
    if cfg["sampler"]["seed"] is None:
        cfg["sampler"]["seed"] = cfg["seed"]
    return cfg


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _theta(block: dict) -> Theta:
    try:
        return Theta(**{k: block[k] for k in PARAM_NAMES})
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"truth block must give all of {PARAM_NAMES}") from exc


def prior_from_config(cfg) -> PriorSpec:
    p = dict(cfg["model"]["prior"])
    rng = p.pop("mu_x_range")
    if rng is not None:
        p.pop("mu_x_mean"), p.pop("mu_x_sd")
    try:
        return PriorSpec.from_mu_x_range(*rng, **p) if rng is not None else PriorSpec(**p)
    except TypeError as exc:
        raise ConfigError(f"bad prior block: {exc}") from exc


# --- commands -------------------------------------------------------------

def cmd_fbm_sample(cfg) -> int:
    f = cfg["fbm"]
    grid = GridSpec(f["n_steps"], f["mesh"])
    _, db = sample_fgn(f["hurst"], grid, rng=cfg["seed"])
    out = _outdir(cfg)
    io.write_fbm_csv(out / "fbm.csv", grid.mesh, db)
    io.write_yaml(out / "config.resolved.yaml", cfg)
    r1 = float(np.corrcoef(db[:-1], db[1:])[0, 1]) if db.size > 2 else math.nan
    print(f"wrote {out / 'fbm.csv'}: N={grid.n_steps}, H={f['hurst']}, lag-1 corr {r1:.4f}")
    return EXIT_OK


def cmd_simulate(cfg) -> int:
    s = cfg["simulate"]
    regime = str(s["regime"]).upper()
    per_day = int(s["obs_per_day"]) if regime == "C" else 1
    n_prices = int(s["n_obs"]) * per_day
    n_steps = n_prices * int(s["substeps"])
    grid = GridSpec(n_steps, s["n_obs"] * s["day_length"] / n_steps)
    sim = simulate_dataset(_theta(cfg["truth"]), int(s["n_obs"]), grid, seed=cfg["seed"],
                           regime=regime, obs_per_day=per_day, tau=cfg["model"]["tau"],
                           y0=s["y0"])
    out = _outdir(cfg)
    io.write_dataset_csv(out / "data.csv", sim.data, "absolute")
    io.write_truth_csv(out / "truth.csv", sim)
    io.write_json(out / "truth_theta.json", dict(zip(PARAM_NAMES, sim.theta.as_array())))
    io.write_yaml(out / "config.resolved.yaml", cfg)
    print(f"wrote {out / 'data.csv'}: regime {regime}, {sim.data.n_obs} prices, "
          f"N={grid.n_steps}, latent dimension {grid.latent_dim}, mesh {grid.mesh:g}")
    return EXIT_OK


def _smallest_gap(path, t_col) -> float:
    # default mesh: one grid step per smallest observation spacing
    header, rows = io.read_rows(path)
    if t_col not in header:
        raise DataError(f"{path}: missing column {t_col}")
    it = header.index(t_col)
    t = np.unique([io.to_float(r[it], "t") for r in rows])
    gaps = np.diff(t)
    if gaps.size == 0:
        raise DataError("cannot infer the grid mesh from a single observation time")
    return float(gaps.min())


def load_dataset(cfg):
    d = cfg["data"]
    if not d["path"]:
        raise ConfigError("data.path is required")
    g = cfg["grid"]
    mesh = g["mesh"]
    if mesh is None:
        mesh = 1.0 if d["time_unit"] == "grid" else _smallest_gap(d["path"], d["columns"]["t"])
    base = io.read_dataset_csv(d["path"], mesh, d["time_unit"], tau=cfg["model"]["tau"],
                               columns=d["columns"])
    data = base.refine(int(g["substeps"])) if int(g["substeps"]) > 1 else base
    if g["n_steps"]:
        if g["n_steps"] < data.obs_index[-1]:
            raise DataError("grid.n_steps is shorter than the last observation")
        data = type(data)(GridSpec(g["n_steps"], data.grid.mesh), data.obs_index, data.y,
                          data.y0, data.proxies, data.tau)
    return data


def _sampler_config(s, seed) -> HmcConfig:
    return HmcConfig(step_size=s["step_size"], horizon=s["horizon"], variant=s["variant"],
                     update_mode=s["update_mode"], n_iterations=int(s["iterations"]),
                     thin=int(s["thin"]), seed=seed)


def _run_one(job):
    """Run one chain; returns ``(chain, info)``.  Top-level so it pickles."""
    data, prior, s, seed = job
    model = SVModel(data, prior)
    rng = np.random.default_rng(seed)
    config = _sampler_config(s, int(seed.generate_state(1)[0]))
    z0 = rng.standard_normal(model.dim_z)
    u0 = prior.center().to_unconstrained()
    info = {"pilot_iterations": 0}
    t0 = time.perf_counter()
    if isinstance(s["mass"], str):
        if s["mass"] != "auto":
            raise ConfigError("sampler.mass must be 'auto' or a list of 7 positive numbers")
        n_pilot = int(s["pilot_iterations"])
        w = warmup(model, config, init=(z0, u0), rng=rng, n_pilot=n_pilot,
                   passes=int(s["pilot_passes"]), omega=s["mass_omega"],
                   pilot_step_size=s["pilot_step_size"], pilot_horizon=s["pilot_horizon"])
        mass, (z0, u0) = w.mass, w.init
        info["pilot_iterations"] = n_pilot * len(w.acceptance)
        info["pilot_acceptance"] = w.acceptance
    else:
        mass = MassMatrix(s["mass"])
    if s["autotune"]:
        tuned = autotune(model, config, mass, init=(z0, u0),
                         candidates=tuple(s["autotune_candidates"]), fix=s["autotune_fix"])
        config = tuned.config
        z0, u0 = tuned.init
        info["autotune"] = {str(k): v for k, v in tuned.acceptance.items()}
    info["warmup_seconds"] = time.perf_counter() - t0
    t1 = time.perf_counter()
    chain = run_chain(model, config, mass, init=(z0, u0), rng=rng, keep_z=s["keep_z"])
    info["sampling_seconds"] = time.perf_counter() - t1
    return chain, info


def cmd_infer(cfg) -> int:
    data = load_dataset(cfg)
    prior = prior_from_config(cfg)
    s = cfg["sampler"]
    _sampler_config(s, 0)  # validate before any work
    n_chains = int(s["chains"])
    if n_chains < 1:
        raise ConfigError("sampler.chains must be at least 1")
    seeds = np.random.SeedSequence(int(s["seed"])).spawn(n_chains)
    jobs = [(data, prior, s, sq) for sq in seeds]
    workers = max(1, int(os.environ.get(WORKERS_ENV, "1")))
    t0 = time.perf_counter()
    if workers > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(workers, n_chains)) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [_run_one(j) for j in jobs]
    wall = time.perf_counter() - t0

    out = _outdir(cfg)
    io.write_yaml(out / "config.resolved.yaml", cfg)
    storm = False
    chains_meta = []
    for k, (chain, info) in enumerate(results):
        stem = "chain" if n_chains == 1 else f"chain_{k}"
        meta = {
            "chain": k, "seed": int(s["seed"]), "dataset_id": chain.dataset_id,
            "n_steps": data.grid.n_steps, "mesh": data.grid.mesh, "n_obs": data.n_obs,
            "iterations": chain.n_iterations, "acceptance_rate": chain.acceptance_rate,
            "acceptance_by_block": chain.accept.mean(axis=0).tolist() if chain.n_iterations else [],
            "sampler": {"variant": chain.config.variant, "update_mode": chain.config.update_mode,
                        "step_size": chain.config.step_size, "horizon": chain.config.horizon,
                        "n_leapfrog": chain.config.n_leapfrog, "seed": chain.config.seed,
                        "thin": chain.config.thin},
            "mass": chain.mass.a.tolist(), "n_grad": chain.n_grad, **info,
        }
        if chain.n_iterations:
            io.write_chain_csv(out / f"{stem}.csv", chain)
            if s["keep_z"] and chain.z_draws is not None and chain.z_draws.size:
                io.write_z_sidecar(out / f"{stem}.z", chain.z_draws, chain.config.thin)
            nonfinite = float(np.mean(np.isinf(chain.delta_h)))
            meta["nonfinite_reject_fraction"] = nonfinite
            storm |= nonfinite > 0.5
            print(f"chain {k}: {chain.n_iterations} iterations, acceptance "
                  f"{chain.acceptance_rate:.3f}, {info['sampling_seconds']:.1f} s")
        io.write_json(out / f"{stem}.json", meta)
        chains_meta.append(meta)
    io.write_json(out / "manifest.json", {"wall_seconds": wall, "chains": chains_meta,
                                          "dataset_id": data.fingerprint()})
    if storm:
        print("error: more than half of the proposals failed numerically", file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


def _central(f, x, eps):
    out = np.empty_like(x)
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps
        out[i] = (f(x + e) - f(x - e)) / (2 * eps)
    return out


def _rel_err(analytic, numeric, floor):
    return np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)),
                                                   floor)


def gradcheck_report(model, z, u, eps=1e-6):
    """Max relative error of the analytic gradient of ``phi`` against central differences.

    The likelihood term is checked through ``z`` and every ``u`` coordinate; the
    prior and Jacobian terms, each a function of one coordinate only, are checked
    one coordinate at a time.  Splitting keeps a very large prior term (e.g. tiny
    ``sigma_x``) from swamping the differences of the others.  Errors are taken
    relative to ``max(|analytic|, |numeric|, 1e-4 max(1, |term|))``.
    """
    _, _, gu = model.potential(z, u)
    theta = Theta.from_unconstrained(u)
    jac = theta_jacobian(theta)
    g_prior = -(log_prior_grad(theta, model.prior) * jac + log_jacobian_grad(theta))
    _, gz_lik, gu_lik = model.loglik_grad(z, u)
    gz_lik, gu_lik = -gz_lik, -gu_lik

    def lik(zz, uu):
        return -loglik(zz, Theta.from_unconstrained(uu), model.data)

    f0 = abs(lik(z, u))
    floor = 1e-4 * max(1.0, f0)
    fz = _central(lambda v: lik(v, u), z, eps)
    fu = _central(lambda v: lik(z, v), u, eps)
    report = {"z": float(_rel_err(gz_lik, fz, floor).max())}
    for j, name in enumerate(PARAM_NAMES):
        report[name] = float(_rel_err(gu_lik[j], fu[j], floor))

    def prior_term(j, uj):
        uu = u.copy()
        uu[j] = uj
        t = Theta.from_unconstrained(uu)
        return -(log_prior_terms(t, model.prior)[PARAM_NAMES[j]] + math.log(theta_jacobian(t)[j]))

    prior_err = 0.0
    for j in range(u.size):
        num = (prior_term(j, u[j] + eps) - prior_term(j, u[j] - eps)) / (2 * eps)
        fl = 1e-4 * max(1.0, abs(prior_term(j, u[j])))
        prior_err = max(prior_err, float(_rel_err(g_prior[j], num, fl)))
    report["prior"] = prior_err
    return report, gu, gu_lik


def cmd_gradcheck(cfg) -> int:
    g = cfg["gradcheck"]
    truth = _theta(cfg["truth"])
    n_steps = int(g["n_obs"]) * int(g["substeps"])
    grid = GridSpec(n_steps, 1.0 / int(g["substeps"]))
    sim = simulate_dataset(truth, int(g["n_obs"]), grid, seed=cfg["seed"], regime=g["regime"],
                           tau=cfg["model"]["tau"])
    model = SVModel(sim.data, prior_from_config(cfg))
    if g["point"] == "truth":
        u = truth.to_unconstrained()
    elif g["point"] == "prior":
        u = model.prior.center().to_unconstrained()
    else:
        raise ConfigError("gradcheck.point must be 'truth' or 'prior'")
    if g["perturb"]:
        # fault injection: scale the analytic gradient
        base, k = model.loglik_grad, 1.0 + g["perturb"]

        def perturbed(z, uu):
            ll, gz, gu = base(z, uu)
            return ll, k * gz, k * gu

        model.loglik_grad = perturbed
    report, gu, gu_lik = gradcheck_report(model, sim.z, u, g["eps"])
    rows = [(k, f"{v:.3e}") for k, v in report.items()]
    print(diagnostics.format_table(("block", "max rel err"), rows))
    out = _outdir(cfg)
    io.write_json(out / "gradcheck.json", {"max_relative_error": report, "grad_u": gu.tolist(),
                                           "grad_u_likelihood": gu_lik.tolist(),
                                           "threshold": g["threshold"]})
    io.write_yaml(out / "config.resolved.yaml", cfg)
    worst = max(report.values())
    if worst > g["threshold"]:
        print(f"gradcheck failed: {worst:.3e} > {g['threshold']:.1e}", file=sys.stderr)
        return EXIT_THRESHOLD
    return EXIT_OK


def _chain_paths(paths):
    found = []
    for p in paths:
        p = Path(p)
        if p.is_dir():
            found += sorted(q for q in p.glob("chain*.csv"))
        else:
            found.append(p)
    if not found:
        raise EmptyChain("no chain files found")
    return found


def cmd_summarize(cfg, paths) -> int:
    burn = cfg["summary"]["burn_in"]
    out = _outdir(cfg)
    for path in _chain_paths(paths):
        chain = io.load_chain(path)
        summ = diagnostics.summarize(chain, burn)
        rep = diagnostics.ess_report(chain, burn)
        print(f"# {path}  ({summ.n_draws} draws after burn-in)")
        text = summ.to_text()
        ess_col = dict(zip(rep.names, rep.ess))
        lines = text.splitlines()
        lines[0] += "       ESS"
        lines[1:] = [ln + f"  {ess_col[name]:8.1f}" for ln, name in zip(lines[1:], rep.names)]
        print("\n".join(lines))
        print(f"min ESS theta {rep.min_theta:.1f}, min ESS z {rep.min_z:.1f}")
        rows = [(n, lo, hi, m, med, ess_col[n]) for n, lo, hi, m, med in summ.rows()]
        io.write_rows(out / f"{path.stem}_summary.csv",
                       ["param", "q2.5", "q97.5", "mean", "median", "ess"], rows)
    return EXIT_OK


def cmd_compare(cfg, paths) -> int:
    runs = []
    for item in paths:
        label, _, p = item.rpartition("=")
        p = Path(p)
        if not label:
            label = p.parent.name if p.stem == "chain" else p.stem
        chain = io.load_chain(p)
        wall = float(np.sum(chain.timing)) if np.all(np.isfinite(chain.timing)) else None
        if wall is None:
            raise DataError(f"{p}: no timing available (manifest missing)")
        runs.append((label, chain, wall))
    table = diagnostics.compare(runs, cfg["summary"]["burn_in"])
    print(table.to_text())
    out = _outdir(cfg)
    io.write_rows(out / "compare.csv", list(diagnostics.Comparison.HEADER), table.records())
    return EXIT_OK


# --- entry point ----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fracsv", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("fbm-sample", "simulate", "infer", "gradcheck", "summarize", "compare"):
        p = sub.add_parser(name)
        p.add_argument("--config", "-c", help="YAML configuration file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config entry, e.g. sampler.step_size=0.05")
        p.add_argument("--out", help="output directory (output.dir)")
        p.add_argument("--seed", type=int, help="top-level seed")
        if name == "infer":
            p.add_argument("--data", help="dataset CSV (data.path)")
            p.add_argument("--variant", choices=("advanced", "standard"))
            p.add_argument("--mode", choices=("joint", "gibbs"))
            p.add_argument("--iterations", type=int)
        if name in ("summarize", "compare"):
            p.add_argument("paths", nargs="+", help="chain CSV files or run directories"
                           + ("; use label=path to name runs" if name == "compare" else ""))
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = list(args.set)
        for flag, key in (("out", "output.dir"), ("seed", "seed"), ("data", "data.path"),
                          ("variant", "sampler.variant"), ("mode", "sampler.update_mode"),
                          ("iterations", "sampler.iterations")):
            value = getattr(args, flag, None)
            if value is not None:
                overrides.append(f"{key}={value}")
        cfg = resolve_config(args.config, overrides)
        if args.command == "fbm-sample":
            return cmd_fbm_sample(cfg)
        if args.command == "simulate":
            return cmd_simulate(cfg)
        if args.command == "infer":
            return cmd_infer(cfg)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "summarize":
            return cmd_summarize(cfg, args.paths)
        return cmd_compare(cfg, args.paths)
    except (ConfigError, InvalidParameter) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, EmptyChain, MismatchedRuns, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
