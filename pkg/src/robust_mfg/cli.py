"""Command-line driver: one subcommand per experiment, JSON/CSV artifacts, manifest-based reruns."""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__

EXPERIMENTS = ("validate", "saddle", "equilibrium", "monotonicity", "nplayer", "duality")
EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGED = 0, 1, 2

# substream labels: every random input is drawn from (root seed, label)
STREAM_PATHS, STREAM_HOLDOUT, STREAM_SAMPLERS, STREAM_DUALITY, STREAM_GAME = 0, 1, 2, 3, 4


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunOptions:
    paths: int = 20000
    steps: int = 50
    seed: int = 0
    damping: float = 0.5
    tol: Optional[float] = None  # experiment-specific default, resolved before the manifest is written
    n_list: tuple = (2, 8, 32, 128)
    max_iters: int = 30
    samples: int = 20  # draws per monotonicity sampler
    instances: int = 200  # randomised duality instances
    gamma: Optional[float] = None  # Nature's penalty; the driver's own by default
    game_samples: int = 1 << 17

    def resolved(self, experiment: str) -> "RunOptions":
        if self.tol is not None:
            return self
        tol = {"saddle": 1e-3, "equilibrium": 5e-3, "nplayer": 1e-4}.get(experiment, 0.0)
        return RunOptions(**{**asdict(self), "tol": tol})

    def check(self) -> None:
        if self.paths < 2 or self.steps < 1:
            raise ConfigError("--paths must be >= 2 and --steps >= 1")
        if not 0.0 < self.damping <= 1.0:
            raise ConfigError("--damping must lie in (0, 1]")
        if self.tol is not None and not self.tol >= 0:
            raise ConfigError("--tol must be non-negative")
        if not self.n_list or any(N < 1 for N in self.n_list) or list(self.n_list) != sorted(set(self.n_list)):
            raise ConfigError("--n-list must be strictly increasing positive integers")
        if self.gamma is not None and not self.gamma > 0:
            raise ConfigError("--gamma must be positive")

    def to_json(self) -> dict:
        d = asdict(self)
        d["n_list"] = list(self.n_list)
        return d


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str
    model_doc: dict
    options: RunOptions = field(default_factory=RunOptions)

    def manifest(self) -> dict:
        return {"experiment": self.experiment, "model": self.model_doc, "options": self.options.to_json(),
                "version": __version__}


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to strings."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else repr(v)
    return obj


def _dump(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), sort_keys=True, indent=1) + "\n", encoding="utf-8")


def _write_csv(path: Path, header: list, rows) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# schema=1\n")
        fh.write(",".join(header) + "\n")
        for r in rows:
            fh.write(",".join(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v) for v in r) + "\n")


# ---------------------------------------------------------------------------
# experiments; each returns (results dict, {csv name: (header, rows)}, converged flag)


def _pathset(model, o: RunOptions, stream: int = STREAM_PATHS):
    from .saddle import make_pathset

    seed = int(np.random.SeedSequence([o.seed, stream]).generate_state(1)[0])
    return make_pathset(model, o.paths, o.steps, seed)


def _exp_validate(model, o):
    from .model import validate_model

    rep = validate_model(model.coeffs, model.driver, model.ell, model.g, seed=o.seed)
    res = rep.to_json()
    res["ok"] = rep.ok
    return res, {}, True


def _exp_saddle(model, o):
    from .measure import WeightedMeasure
    from .saddle import SaddleOptions, pontryagin_residual, solve_saddle

    ps = _pathset(model, o)
    mu = WeightedMeasure.empirical(ps.x0)
    s = solve_saddle(mu, model, ps, SaddleOptions(damping=o.damping, tol=o.tol, gamma=o.gamma))
    res = s.summary()
    res["residuals_recomputed"] = pontryagin_residual(s, model).to_json()
    rows = [(h["iteration"], h["J"], h["residual"], h["damping"]) for h in s.history]
    return res, {"saddle_log.csv": (["iteration", "J", "residual", "damping"], rows)}, s.converged


def _equilibrium(model, o):
    from .mfg import EquilibriumOptions, solve_equilibrium
    from .saddle import SaddleOptions

    ps = _pathset(model, o)
    sopts = SaddleOptions(gamma=o.gamma, tol=min(1e-3, max(o.tol, 1e-5)))
    rep = solve_equilibrium(model, ps, EquilibriumOptions(damping=o.damping, max_iters=o.max_iters, tol=o.tol,
                                                          particles=o.paths, saddle=sopts))
    return rep, ps, sopts


def _exp_equilibrium(model, o):
    from .mfg import fm_distance, phi_map

    rep, ps, sopts = _equilibrium(model, o)
    res = rep.summary()
    hold = _pathset(model, o, STREAM_HOLDOUT)
    img, _ = phi_map(rep.mu_star, model, hold, sopts)
    res["out_of_sample_consistency"] = fm_distance(rep.mu_star, img)
    it_rows = [(k + 1, d, m[0], w) for k, (d, m, w) in enumerate(zip(rep.iterates, rep.means, rep.masses))]
    mu_rows = [tuple(p) + (w,) for p, w in zip(rep.mu_star.points.tolist(), rep.mu_star.weights.tolist())]
    csvs = {"fm_iterates.csv": (["iteration", "fm_distance", "mean", "mass"], it_rows),
            "mu_star.csv": ([f"x{i}" for i in range(rep.mu_star.dim)] + ["weight"], mu_rows)}
    return res, csvs, rep.converged


def _exp_monotonicity(model, o):
    from .measure import WeightedMeasure
    from .monotone import default_samplers, displacement_monotone_test, flat_antimonotone_test, flat_displacement_test

    n = model.coeffs.n
    samplers = default_samplers(10, 2000, n, o.seed)
    reports = []
    for k, smp in enumerate(samplers):
        for test in (flat_displacement_test, displacement_monotone_test):
            r = test(model.g, smp, o.samples, seed=int(o.seed) * 1000 + k)
            reports.append((k, r))
    rng = np.random.default_rng([o.seed, STREAM_SAMPLERS])
    pairs = []
    for _ in range(20):
        a, b = rng.normal(size=(200, n)), rng.normal(loc=rng.uniform(-1, 1), size=(200, n))
        pairs.append((WeightedMeasure(a, rng.dirichlet(np.ones(200))), WeightedMeasure(b, rng.dirichlet(np.ones(200)))))
    reports.append((-1, flat_antimonotone_test(model.g, pairs)))
    verdicts = {}
    for _, r in reports:
        verdicts[r.test] = verdicts.get(r.test, "passed") if r.passed else "failed"
    res = {"verdicts": verdicts, "reports": [dict(r.to_json(), sampler=k) for k, r in reports]}
    rows = [(k, r.test, r.worst_lhs, r.worst_se, r.verdict) for k, r in reports]
    return res, {"monotonicity.csv": (["sampler", "test", "worst_lhs", "worst_se", "verdict"], rows)}, True


def _exp_nplayer(model, o):
    from .nplayer import FiniteGameConfig, epsilon_curve

    rep, ps, sopts = _equilibrium(model, o)
    cfg = FiniteGameConfig(model, samples=o.game_samples, seed=int(o.seed) * 7919 + STREAM_GAME, saddle=sopts)
    kinds = ["player", "nature_local"]
    if model.g.potential is not None:
        kinds.append("nature_global_potential")
    res = {"equilibrium": rep.summary(), "curves": {}}
    csvs = {}
    for kind in kinds:
        c = epsilon_curve(kind, o.n_list, rep.saddle, model, ps, cfg)
        res["curves"][kind] = c.to_json()
        csvs[f"epsilon_{kind}.csv"] = (["N", "mean", "se", "seed", "member"],
                                       [(N, m, s, sd, mem) for N, (m, s), sd, mem in zip(c.Ns, c.gains, c.seeds, c.members)])
    return res, csvs, rep.converged


def _exp_duality(model, o):
    from .model import quadratic_benchmark
    from .saddle import gibbs_maximizer
    from .simulate import ControlField, NatureControl, TimeGrid, duality_gap, sample_brownian, simulate_density

    if model.driver.kind != "quadratic_benchmark":
        raise ConfigError("the duality experiment needs the quadratic driver")
    grid = TimeGrid(o.steps, model.coeffs.T)
    seed = int(np.random.SeedSequence([o.seed, STREAM_DUALITY]).generate_state(1)[0])
    W = sample_brownian(grid, o.paths, model.coeffs.d, seed)
    Wl = W.paths()[:, :-1, :]
    ent = quadratic_benchmark(1.0)  # S is the relative entropy
    gamma = model.driver.penalty if o.gamma is None else o.gamma
    rng = np.random.default_rng([o.seed, STREAM_DUALITY])
    rows, worst = [], math.inf
    for i in range(o.instances):
        a, b, c, e = rng.uniform(-1, 1, 4) * np.array([1.0, 1.0, 0.8, 0.8])
        zeta = ControlField(a + b * Wl, "open_loop_table", None, "zeta")
        z = c + e * Wl
        q = simulate_density(NatureControl(np.zeros(z.shape[:2]), z), W)
        dg = duality_gap(q, zeta, gamma, ent, grid)
        z_score = dg.gap / dg.se if dg.se > 0 else math.inf
        worst = min(worst, z_score)
        rows.append((i, a, b, c, e, dg.gap, dg.se))
    zeta = ControlField(0.3 + 0.8 * Wl, "open_loop_table", None, "zeta")
    gq = gibbs_maximizer(zeta, W, gamma)
    g = duality_gap(gq, zeta, gamma, ent, grid)
    res = {"instances": o.instances, "gamma": gamma, "min_z": worst, "all_nonnegative_3se": bool(worst >= -3.0),
           "gibbs": {"gap": g.gap, "se": g.se, "S_q": g.S_q, "S_star": g.S_star, "rhs": g.rhs,
                     "within_3se": bool(abs(g.gap) <= 3 * g.se)}}
    return res, {"duality.csv": (["instance", "a", "b", "c", "e", "gap", "se"], rows)}, True


RUNNERS = {"validate": _exp_validate, "saddle": _exp_saddle, "equilibrium": _exp_equilibrium,
           "monotonicity": _exp_monotonicity, "nplayer": _exp_nplayer, "duality": _exp_duality}


# ---------------------------------------------------------------------------
# orchestration


def load_config(experiment: str, model_path, options: RunOptions) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {experiment!r}")
    try:
        doc = json.loads(Path(model_path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read model document: {exc}") from exc
    options.check()
    return ExperimentConfig(experiment, doc, options.resolved(experiment))


def run(config: ExperimentConfig, out) -> int:
    """Run one experiment and write its artifacts under ``out``; returns the exit status."""
    from .model import AssumptionError, model_from_json, validate_model

    try:
        model = model_from_json(config.model_doc)
    except (ValueError, KeyError, TypeError) as exc:
        raise ConfigError(f"invalid model document: {exc}") from exc
    if config.experiment != "validate":
        rep = validate_model(model.coeffs, model.driver, model.ell, model.g, seed=config.options.seed)
        if not rep.ok:
            raise ConfigError(f"model violates the standing assumptions: {rep.to_json()['violations']}")
    try:
        results, csvs, ok = RUNNERS[config.experiment](model, config.options)
    except AssumptionError as exc:
        raise ConfigError(str(exc)) from exc
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    _dump(out / "manifest.json", config.manifest())
    _dump(out / "results.json", {"experiment": config.experiment, "converged": bool(ok), "results": results})
    for name, (header, rows) in csvs.items():
        _write_csv(out / name, header, rows)
    return EXIT_OK if ok else EXIT_NONCONVERGED


def config_from_manifest(path) -> ExperimentConfig:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
        opts = dict(doc["options"])
        opts["n_list"] = tuple(opts["n_list"])
        o = RunOptions(**opts)
        exp = doc["experiment"]
        model_doc = doc["model"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise ConfigError(f"unusable manifest: {exc}") from exc
    if exp not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {exp!r}")
    o.check()
    return ExperimentConfig(exp, model_doc, o)


def _summary_lines(res: dict) -> list:
    exp, r = res.get("experiment"), res.get("results", {})
    lines = [f"experiment: {exp}   converged: {res.get('converged')}"]
    if exp == "validate":
        lines.append(f"gamma = {r.get('gamma')}   ok = {r.get('ok')}   violations = {len(r.get('violations', []))}")
    if exp == "saddle":
        d = r.get("decomposition", {})
        lines.append(f"J = {r.get('J')} (se {r.get('J_se')})")
        lines += [f"  {k:>12s} = {v}" for k, v in sorted(d.items())]
        lines += [f"  residual {k:>12s} = {v}" for k, v in sorted(r.get("residuals", {}).items())]
    if exp in ("equilibrium", "nplayer"):
        eq = r if exp == "equilibrium" else r.get("equilibrium", {})
        lines.append(f"{'iteration':>9s}  {'FM distance':>12s}")
        lines += [f"{k + 1:9d}  {d:12.6g}" for k, d in enumerate(eq.get("iterates", []))]
        if "out_of_sample_consistency" in eq:
            lines.append(f"out-of-sample FM = {eq['out_of_sample_consistency']}")
    if exp == "nplayer":
        for kind, c in r.get("curves", {}).items():
            lines.append(f"{kind}: spearman rho = {c.get('spearman_rho')}  p = {c.get('spearman_p')}")
            lines.append(f"{'N':>6s}  {'eps_N':>12s}  {'se':>10s}  member")
            lines += [f"{N:6d}  {g[0]:12.4e}  {g[1]:10.3e}  {m}" for N, g, m in zip(c["Ns"], c["gains"], c["members"])]
    if exp == "monotonicity":
        lines += [f"  {k:>22s}: {v}" for k, v in sorted(r.get("verdicts", {}).items())]
    if exp == "duality":
        lines.append(f"instances = {r.get('instances')}  min gap/se = {r.get('min_z')}")
        lines.append(f"gibbs gap = {r['gibbs']['gap']} (se {r['gibbs']['se']})")
    return lines


def report_summary(directory) -> int:
    path = Path(directory) / "results.json"
    try:
        res = json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print("\n".join(_summary_lines(res)))
    return EXIT_OK


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="robust-mfg", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment on a model document")
    r.add_argument("experiment", choices=EXPERIMENTS)
    r.add_argument("model")
    d = RunOptions()
    r.add_argument("--paths", type=int, default=d.paths)
    r.add_argument("--steps", type=int, default=d.steps)
    r.add_argument("--seed", type=int, default=d.seed)
    r.add_argument("--damping", type=float, default=d.damping)
    r.add_argument("--tol", type=float, default=None)
    r.add_argument("--n-list", default=",".join(map(str, d.n_list)))
    r.add_argument("--max-iters", type=int, default=d.max_iters)
    r.add_argument("--samples", type=int, default=d.samples)
    r.add_argument("--instances", type=int, default=d.instances)
    r.add_argument("--gamma", type=float, default=d.gamma)
    r.add_argument("--game-samples", type=int, default=d.game_samples)
    r.add_argument("--out", default="results")
    rr = sub.add_parser("rerun", help="re-run the experiment recorded in a manifest")
    rr.add_argument("manifest")
    rr.add_argument("--out", required=True)
    s = sub.add_parser("summary", help="print a results directory as a table")
    s.add_argument("directory")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "summary":
            return report_summary(args.directory)
        if args.command == "rerun":
            cfg = config_from_manifest(args.manifest)
        else:
            try:
                n_list = tuple(int(v) for v in args.n_list.split(",") if v.strip())
            except ValueError as exc:
                raise ConfigError(f"bad --n-list: {exc}") from exc
            o = RunOptions(paths=args.paths, steps=args.steps, seed=args.seed, damping=args.damping, tol=args.tol,
                           n_list=n_list, max_iters=args.max_iters, samples=args.samples, instances=args.instances,
                           gamma=args.gamma, game_samples=args.game_samples)
            cfg = load_config(args.experiment, args.model, o)
        status = run(cfg, args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(os.path.join(str(args.out), "results.json"))
    return status


if __name__ == "__main__":
    sys.exit(main())
