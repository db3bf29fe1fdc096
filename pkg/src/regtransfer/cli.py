"""Command-line experiment runner.

Every subcommand reads an optional config file, writes ``<experiment>.csv``
(plus auxiliary CSVs) and ``manifest.json`` into ``--out`` and exits with
0 (all checks passed), 1 (some check failed) or 2 (invalid config).

Config files are INI text. Keys may sit in a section named after the
subcommand or in ``[run]`` (``seed``); keys before any section header belong
to the subcommand. A ``manifest.json`` from an earlier run is accepted as
a config too, which makes every run reproducible from its manifest.
"""

from __future__ import annotations

import argparse
import configparser
import io
import json
import math
import os
import platform
import sys
from dataclasses import dataclass

import numpy as np
import scipy
import sympy as sp

from . import __version__
from .errors import ConfigError, DivergentBoundError

MANIFEST = "manifest.json"


def _floats(text) -> tuple[float, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(float(v) for v in text)
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text) -> tuple[int, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(int(v) for v in text)
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    default: object
    kind: type | str
    help: str
    choices: tuple = ()

    def parse(self, name, raw):
        try:
            if self.kind == "floats":
                val = _floats(raw)
            elif self.kind == "ints":
                val = _ints(raw)
            elif self.kind is bool:
                val = raw if isinstance(raw, bool) else str(raw).strip().lower() in ("1", "true", "yes", "on")
            elif self.kind is int:
                val = int(raw)
            elif self.kind is float:
                val = float(raw)
            else:
                val = str(raw).strip()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid value {raw!r} for key {name!r}: {exc}", name) from None
        if self.choices and val not in self.choices:
            raise ConfigError(f"key {name!r} must be one of {self.choices}, got {val!r}", name)
        return val


MODELS = ("stable1d", "one_sided_stable1d", "tempered_stable1d")

SCHEMAS: dict[str, dict[str, Key]] = {
    "approx-rates": {
        "model": Key("stable1d", str, "jump model", MODELS),
        "alpha": Key(1.5, float, "stable index"),
        "beta": Key(1.0, float, "tempering rate (tempered model)"),
        "n_min": Key(0, int, "first ladder level"),
        "n_max": Key(8, int, "last ladder level"),
        "r0": Key(1.0, float, "cutoff at level 0; r_n = r0 2^-n"),
        "theta0": Key(0.5, float, "regularisation exponent theta0"),
        "a": Key(3.0, float, "Taylor order a"),
        "b": Key(0.0, float, "growth exponent b"),
        "delta": Key(0.1, float, "balance slack delta"),
    },
    "simulate": {
        "kind": Key("approx", str, "approx (small jumps substituted) or perturbed", ("approx", "perturbed")),
        "model": Key("stable1d", str, "jump model (approx)", MODELS),
        "alpha": Key(1.5, float, "stable index"),
        "beta": Key(1.0, float, "tempering rate"),
        "level": Key(4, int, "ladder level n, cutoff 2^-n"),
        "x0": Key(0.0, float, "start point"),
        "t": Key(1.0, float, "time horizon"),
        "dt": Key(0.01, float, "Euler step (approx)"),
        "N": Key(10_000, int, "number of paths"),
        "compensation": Key("auto", str, "big-jump compensation", ("auto", "compensated", "none")),
        "rate": Key(2.0, float, "Poisson rate of the perturbation (perturbed)"),
        "shift_scale": Key(1.0, float, "standard deviation of the normal shifts (perturbed)"),
        "base_sigma2": Key(1.0, float, "Brownian variance per unit time (perturbed)"),
    },
    "density-bounds": {
        "oracle": Key("heat", str, "density oracle", ("heat", "ou", "stable")),
        "alpha": Key(1.5, float, "stable index"),
        "theta": Key(1.0, float, "OU mean reversion"),
        "sigma2": Key(1.0, float, "diffusion variance"),
        "q": Key(1, int, "total derivative order"),
        "x_order": Key(0, int, "number of derivatives in x"),
        "kappa": Key(0.0, float, "weight exponent on x - y"),
        "t_min": Key(0.01, float, "smallest time"),
        "t_max": Key(1.0, float, "largest time"),
        "t_points": Key(7, int, "number of times (log spaced)"),
        "a": Key(3.0, float, "Taylor order a"),
        "b": Key(0.0, float, "growth exponent b"),
        "delta": Key(1.0, float, "balance slack delta"),
        "theta0": Key(0.5, float, "regularisation exponent theta0"),
        "epsilon": Key(0.0, float, "exponent slack epsilon"),
    },
    "distance": {
        "mu_mean": Key(0.0, float, "mean of mu"),
        "mu_var": Key(1.0, float, "variance of mu"),
        "nu_mean": Key(1.0, float, "mean of nu"),
        "nu_var": Key(1.0, float, "variance of nu"),
        "ks": Key((0, 1, 2), "ints", "orders k"),
        "N": Key(0, int, "sample mu with N paths (0: exact density)"),
    },
    "interp-bound": {
        "ladder": Key("all", str, "ladder name from the built-in matrix, or all"),
        "delta_star": Key(1.0, float, "balance slack delta*"),
        "q": Key(0, int, "Sobolev order"),
        "d": Key(1, int, "dimension"),
        "p": Key(2.0, float, "integrability p (inf allowed)"),
        "theta1": Key(1.0, float, "regularisation shift theta1"),
        "t": Key(1.0, float, "time"),
        "n_star": Key(0, int, "first schedule level"),
        "delta": Key(0.1, float, "schedule slack delta"),
        "epsilon": Key(0.1, float, "geometric tail epsilon"),
        "mass": Key(1.0, float, "mass of the target measure"),
    },
    "lindeberg": {
        "pair": Key("ou", str, "semigroup pair", ("ou", "commuting")),
        "t": Key(1.0, float, "time"),
        "m0": Key(1, int, "expansion order"),
        "couplings": Key((0.2, 0.1, 0.05, 0.025, 0.0125), "floats", "coupling ladder"),
        "normalise": Key("sup", str, "remainder norm", ("sup", "l2")),
        "order": Key(16, int, "simplex quadrature order"),
    },
    "compose": {
        "oracle": Key("heat", str, "link oracle", ("heat", "ou")),
        "theta": Key(1.0, float, "OU mean reversion"),
        "m": Key(2, int, "number of links"),
        "t_min": Key(0.05, float, "smallest total time"),
        "t_max": Key(1.0, float, "largest total time"),
        "t_points": Key(4, int, "number of times"),
        "q1": Key(0, int, "y-derivative order"),
        "q2": Key(0, int, "x-derivative order"),
        "kappa": Key(0.0, float, "weight exponent"),
        "p": Key(2.0, float, "integrability p"),
        "theta0": Key(0.5, float, "regularisation exponent theta0"),
        "theta1": Key(1.0, float, "regularisation shift theta1"),
    },
    "ibp-verify": {
        "phi": Key("sine", str, "diffeomorphism", ("identity", "sine", "scale", "shift")),
        "c": Key(2.0, float, "scale factor or shift"),
        "max_order": Key(2, int, "largest |alpha| checked"),
        "q": Key(1, int, "Sobolev order of the probes"),
        "kappa": Key(1.0, float, "weight exponent of the probes"),
        "p": Key(2.0, float, "integrability p"),
        "tol": Key(1e-6, float, "residual tolerance"),
    },
    "weights-verify": {
        "kappa": Key(1.0, float, "weight exponent"),
        "q": Key(1, int, "derivative order"),
        "p": Key(2.0, float, "integrability p"),
        "radius": Key(6.0, float, "grid radius"),
        "n": Key(601, int, "grid nodes"),
    },
}

RUN_KEYS = {"seed": Key(0, int, "64-bit seed")}


# ---------------------------------------------------------------------------
# config handling


def load_config(experiment: str, path: str | None) -> tuple[dict, int | None]:
    """Validated config (defaults filled in) and the seed found in the file."""
    schema = SCHEMAS[experiment]
    raw: dict[str, object] = {}
    seed = None
    if path:
        if path.endswith(".json"):
            with open(path) as fh:
                man = json.load(fh)
            if man.get("experiment", experiment) != experiment:
                raise ConfigError(f"manifest is for {man['experiment']!r}, not {experiment!r}", "experiment")
            raw = dict(man.get("config", {}))
            seed = man.get("seed")
        else:
            raw, seed = _read_ini(experiment, path)
    for key in raw:
        if key not in schema:
            raise ConfigError(f"unknown config key {key!r} for {experiment}", key)
    cfg = {k: spec.parse(k, raw[k]) if k in raw else spec.default for k, spec in schema.items()}
    if seed is not None:
        seed = RUN_KEYS["seed"].parse("seed", seed)
    return cfg, seed


def _read_ini(experiment, path):
    with open(path) as fh:
        text = fh.read()
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    try:
        parser.read_string(f"[{experiment}]\n" + text)
    except configparser.DuplicateSectionError:
        # the file names the experiment section itself
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        parser.optionxform = str
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}", "config") from None
    raw, seed = {}, None
    for section in parser.sections():
        if section == "run":
            for key, val in parser[section].items():
                if key not in RUN_KEYS:
                    raise ConfigError(f"unknown config key {key!r} in [run]", key)
                seed = val
        elif section == experiment:
            raw.update(parser[section])
        else:
            raise ConfigError(f"unknown config section [{section}]", section)
    return raw, seed


def _jsonable(v):
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def manifest(experiment: str, cfg: dict, seed: int, outputs: list[str], status: str) -> str:
    data = {
        "experiment": experiment,
        "config": {k: _jsonable(v) for k, v in cfg.items()},
        "seed": seed,
        "outputs": outputs,
        "status": status,
        "versions": {
            "regtransfer": __version__,
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "sympy": sp.__version__,
            "python": platform.python_version(),
        },
    }
    return json.dumps(data, indent=2, sort_keys=True) + "\n"


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if v is None:
        return ""
    return str(v)


def to_csv(header, rows) -> str:
    buf = io.StringIO()
    buf.write(",".join(header) + "\n")
    for r in rows:
        buf.write(",".join(_fmt(v) for v in r) + "\n")
    return buf.getvalue()


# ---------------------------------------------------------------------------
# experiments: each returns ({filename: csv text}, all_checks_passed)


def _model(cfg):
    from .jump_models import one_sided_stable1d, stable1d, tempered_stable1d

    if cfg["model"] == "stable1d":
        return stable1d(cfg["alpha"])
    if cfg["model"] == "one_sided_stable1d":
        return one_sided_stable1d(cfg["alpha"])
    return tempered_stable1d(cfg["alpha"], cfg["beta"])


def run_approx_rates(cfg, seed, workers):
    from .jump_models import balance_report, build_ladder

    ladder = build_ladder(_model(cfg), range(cfg["n_min"], cfg["n_max"] + 1), r0=cfg["r0"])
    rep = balance_report(ladder, cfg["theta0"], cfg["a"], cfg["b"], cfg["delta"])
    rows = [(p.level, p.r, p.eps, p.lam, phi, rep.slope) for p, phi in zip(ladder, rep.phi)]
    header = ("n", "r_n", "eps_n", "lambda_n", "phi_delta", "slope")
    summary = to_csv(("verdict", "slope", "slope_se", "gamma", "growth_ok"),
                     [(rep.verdict, rep.slope, rep.slope_se, rep.gamma, rep.growth_ok)])
    return {"approx-rates.csv": to_csv(header, rows), "balance.csv": summary}, True


def run_simulate(cfg, seed, workers):
    from .simulator import BrownianBase, PerturbationSpec, SimConfig, normal_marks, simulate_approx_paths, simulate_perturbed

    if cfg["kind"] == "approx":
        sc = SimConfig(t=cfg["t"], dt=cfg["dt"], N=cfg["N"], seed=seed, compensation=cfg["compensation"],
                       workers=workers)
        cloud = simulate_approx_paths(_model(cfg), cfg["level"], [cfg["x0"]], sc)
    else:
        sc = SimConfig(t=cfg["t"], dt=cfg["t"] or 1.0, N=cfg["N"], seed=seed, workers=workers)
        spec = PerturbationSpec(cfg["rate"], lambda z, x: x + z, normal_marks(cfg["shift_scale"]),
                                BrownianBase(cfg["base_sigma2"]))
        cloud = simulate_perturbed(spec, [cfg["x0"]], sc)
    e = cloud.endpoints[:, 0]
    stats = to_csv(("N", "mean", "variance"), [(cloud.N, float(np.mean(e)), float(np.var(e, ddof=1)))])
    return {"simulate.csv": cloud.to_csv(), "moments.csv": stats}, True


def _oracle(cfg):
    from .density_lab import HeatKernel, OUKernel, StableKernel

    if cfg["oracle"] == "heat":
        return HeatKernel(sigma2=cfg["sigma2"])
    if cfg["oracle"] == "ou":
        return OUKernel(theta=cfg["theta"], sigma2=cfg["sigma2"])
    return StableKernel.from_model(cfg["alpha"])


def run_density_bounds(cfg, seed, workers):
    from .density_lab import blowup_fit, transfer_exponent_check

    if cfg["t_points"] < 2 or not 0 < cfg["t_min"] < cfg["t_max"]:
        raise ConfigError("need t_points >= 2 and 0 < t_min < t_max", "t_points")
    t_grid = np.geomspace(cfg["t_min"], cfg["t_max"], cfg["t_points"])
    fit = blowup_fit(_oracle(cfg), cfg["q"], cfg["kappa"], t_grid, alpha=cfg["x_order"])
    header = ("t", "q", "kappa", "pi", "M_q", "slope", "R2")
    verdict = transfer_exponent_check(fit, cfg["a"], cfg["b"], cfg["delta"], cfg["theta0"], cfg["epsilon"],
                                      no_jumps=cfg["oracle"] in ("heat", "ou"))
    transfer = to_csv(("verdict", "measured", "predicted", "slack"),
                      [(verdict.verdict, verdict.measured, verdict.predicted, verdict.slack)])
    return {"density-bounds.csv": to_csv(header, fit.rows()), "transfer.csv": transfer}, verdict.verdict != "fail"


def run_distance(cfg, seed, workers):
    from .density_lab import HeatKernel
    from .distance_lab import distance_table, rows_to_csv
    from .simulator import BrownianBase, PerturbationSpec, SimConfig, simulate_perturbed

    for key in ("mu_var", "nu_var"):
        if cfg[key] <= 0:
            raise ConfigError(f"{key} must be positive", key)
    nu = HeatKernel(t=cfg["nu_var"], x=cfg["nu_mean"])
    if cfg["N"] > 0:
        spec = PerturbationSpec(0.0, lambda z, x: x, base=BrownianBase(cfg["mu_var"]))
        mu = simulate_perturbed(spec, [cfg["mu_mean"]], SimConfig(t=1.0, dt=1.0, N=cfg["N"], seed=seed,
                                                                    workers=workers))
    else:
        mu = HeatKernel(t=cfg["mu_var"], x=cfg["mu_mean"])
    rows = distance_table(mu, nu, cfg["ks"])
    ok = all(r.lower <= r.oracle_upper * (1 + 1e-9) for r in rows if np.isfinite(r.oracle_upper))
    return {"distance.csv": rows_to_csv(rows)}, ok


def run_interp_bound(cfg, seed, workers):
    from .interpolation import ladder_matrix, transfer_pipeline

    entries = ladder_matrix()
    if cfg["ladder"] != "all":
        entries = [e for e in entries if e[0] == cfg["ladder"]]
        if not entries:
            raise ConfigError(f"unknown ladder {cfg['ladder']!r}", "ladder")
    rows, ok = [], True
    for name, ladder, theta0 in entries:
        res = transfer_pipeline(ladder, theta0, delta_star=cfg["delta_star"], q=cfg["q"], d=cfg["d"], p=cfg["p"],
                                theta1=cfg["theta1"], t=cfg["t"], n_star=cfg["n_star"], delta=cfg["delta"],
                                epsilon=cfg["epsilon"], mass=cfg["mass"])
        b = res.bound
        total = b.total if b is not None else math.inf
        rows.append((name, res.verdict, res.finite, res.m0, res.h, res.rho,
                     b.A if b else math.nan, b.B if b else math.nan, b.C if b else math.inf, total))
        # finiteness must track the balance verdict
        ok = ok and (res.finite == (res.verdict == "bounded"))
    header = ("ladder", "verdict", "finite", "m0", "h", "rho", "A", "B", "C_hn", "total")
    return {"interp-bound.csv": to_csv(header, rows)}, ok


def run_lindeberg(cfg, seed, workers):
    from .composition import commuting_pair, default_lindeberg_corpus, fits_to_csv, ou_brownian_pair, remainder_order

    if not 1 <= cfg["m0"] <= 3:
        raise ConfigError("m0 must lie in 1..3", "m0")
    family = ou_brownian_pair if cfg["pair"] == "ou" else (lambda c: commuting_pair(1.0, 1.0 - c))
    fits = remainder_order(family, cfg["couplings"], cfg["t"], cfg["m0"], default_lindeberg_corpus(),
                           normalise=cfg["normalise"])
    ok = all(abs(f.order - cfg["m0"]) <= 0.2 for f in fits)
    return {"lindeberg.csv": fits_to_csv(fits)}, ok


def run_compose(cfg, seed, workers):
    from .composition import KernelChain, composed_bound_probe
    from .density_lab import HeatKernel, OUKernel

    if not 1 <= cfg["m"] <= 3:
        raise ConfigError("m must lie in 1..3", "m")
    oracle = HeatKernel() if cfg["oracle"] == "heat" else OUKernel(theta=cfg["theta"])
    chain = KernelChain(oracle, [1.0 / cfg["m"]] * cfg["m"])
    t_grid = np.geomspace(cfg["t_min"], cfg["t_max"], cfg["t_points"])
    res = composed_bound_probe(chain, cfg["q1"], cfg["q2"], cfg["kappa"], cfg["p"], t_grid,
                               theta0=cfg["theta0"], theta1=cfg["theta1"])
    rows = [(t, m, res.slope, res.budget, res.within) for t, m in res.rows()]
    return {"compose.csv": to_csv(("t", "M", "slope", "budget", "within"), rows)}, res.within


def run_ibp_verify(cfg, seed, workers):
    from .fields import Grid, SampledField
    from .ibp_engine import DiffeoField, complexity_constant, pullback_norm_probe, verify_ibp

    x = sp.Symbol("x1")
    expr = {"identity": x, "sine": x + sp.sin(x) / 10, "scale": cfg["c"] * x, "shift": x + cfg["c"]}[cfg["phi"]]
    phi = DiffeoField([expr], (x,))
    if not 1 <= cfg["max_order"] <= 3:
        raise ConfigError("max_order must lie in 1..3", "max_order")
    grid = Grid.cube(10.0, 4001)
    f = SampledField.from_expr(sp.exp(-(x - sp.Rational(1, 2)) ** 2 / 2), (x,), grid)
    g = SampledField.from_expr(sp.exp(-x**2) * (1 + x), (x,), grid)
    rows = []
    for m in range(1, cfg["max_order"] + 1):
        r = verify_ibp(phi, f, g, (1,) * m)
        rows.append((f"residual-order{m}", r.residual, cfg["tol"], r.residual < cfg["tol"]))
    cq = complexity_constant(phi, cfg["q"])
    rows.append(("complexity-constant", cq, math.inf, math.isfinite(cq)))
    for mode in ("ip6", "ip10", "ip12"):
        rep = pullback_norm_probe(phi, q=cfg["q"], kappa=cfg["kappa"], p=cfg["p"], mode=mode)
        rows.append((f"{mode}-ratio", rep.ratio, math.inf, rep.finite))
    ok = all(r[-1] for r in rows)
    return {"ibp-verify.csv": to_csv(("check", "value", "threshold", "passed"), rows)}, ok


def run_weights_verify(cfg, seed, workers):
    from .fields import Grid
    from .weights import weight_suite

    res = weight_suite(grid=Grid.cube(cfg["radius"], cfg["n"]), kappa=cfg["kappa"], q=cfg["q"], p=cfg["p"])
    rows = [(r.tag, r.detail["member"], r.constant, r.refined_constant, r.lower, r.passed) for r in res]
    header = ("tag", "member", "constant", "refined_constant", "lower", "passed")
    return {"weights-verify.csv": to_csv(header, rows)}, all(r.passed for r in res)


RUNNERS = {
    "approx-rates": run_approx_rates,
    "simulate": run_simulate,
    "density-bounds": run_density_bounds,
    "distance": run_distance,
    "interp-bound": run_interp_bound,
    "lindeberg": run_lindeberg,
    "compose": run_compose,
    "ibp-verify": run_ibp_verify,
    "weights-verify": run_weights_verify,
}


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="regtransfer", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="experiment", required=True)
    for name, schema in SCHEMAS.items():
        keys = ", ".join(f"{k}={_fmt_default(s.default)}" for k, s in schema.items())
        p = sub.add_parser(name, help=f"run the {name} experiment", epilog=f"config keys: {keys}")
        p.add_argument("--config", help="INI config or manifest.json of an earlier run")
        p.add_argument("--seed", type=int, help="64-bit seed (overrides the config)")
        p.add_argument("--out", default=None, help="output directory (default: out/<experiment>)")
        p.add_argument("--check", action="store_true", help="validate the config and exit")
        p.add_argument("--workers", type=int, default=1, help="worker threads (results do not depend on it)")
    return parser


def _fmt_default(v):
    if isinstance(v, tuple):
        return ",".join(_fmt_default(x) for x in v)
    return repr(v) if isinstance(v, float) else _fmt(v)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    name = args.experiment
    try:
        cfg, file_seed = load_config(name, args.config)
        if args.workers < 1:
            raise ConfigError("--workers must be positive", "workers")
        seed = args.seed if args.seed is not None else (file_seed if file_seed is not None else 0)
        if not 0 <= seed < 2**64:
            raise ConfigError("seed must be an unsigned 64-bit integer", "seed")
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return 2
    except OSError as exc:
        print(json.dumps({"error": "config", "key": "config", "message": str(exc)}), file=sys.stderr)
        return 2
    if args.check:
        print(json.dumps({"experiment": name, "config": {k: _jsonable(v) for k, v in cfg.items()}, "seed": seed},
                         sort_keys=True))
        return 0
    try:
        files, ok = RUNNERS[name](cfg, seed, args.workers)
    except ConfigError as exc:
        print(json.dumps({"error": "config", "key": exc.key, "message": str(exc)}), file=sys.stderr)
        return 2
    except (ValueError, DivergentBoundError) as exc:
        print(json.dumps({"error": "run", "message": str(exc)}), file=sys.stderr)
        return 1
    out = args.out or os.path.join("out", name)
    os.makedirs(out, exist_ok=True)
    status = "pass" if ok else "fail"
    for fname, text in files.items():
        with open(os.path.join(out, fname), "w", newline="\n") as fh:
            fh.write(text)
    with open(os.path.join(out, MANIFEST), "w", newline="\n") as fh:
        fh.write(manifest(name, cfg, seed, sorted(files), status))
    print(f"{name}: {status} -> {out}")
    return 0 if ok else 1


if __name__ == "__main__":
    sys.exit(main())
