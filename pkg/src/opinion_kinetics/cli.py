"""Command-line entry point.

Each subcommand reads an optional JSON config, applies flag overrides,
validates everything up front and then writes its outputs plus a
``manifest.json`` into ``--out``.  Exit codes: 0 success, 2 config error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import tempfile
from importlib import metadata
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import calibration, data, fokker_planck as fp, particles, seir
from .core import (ContactKernel, DomainError, KineticParams, MixtureFit, OpinionGrid,
                   beta_from_mean_spread, beta_pdf, mixture_pdf)

log = logging.getLogger("opinion_kinetics")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

Rate = Union[float, list[float]]


class ConfigError(Exception):
    pass


class _Block(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ParamsBlock(_Block):
    lambda_pos: Rate = 1.0
    lambda_neg: Rate = 1.0
    sigma_pos: Rate = 0.5
    sigma_neg: Rate = 0.5
    beta: float = 0.0
    zeta: float = 0.5
    gamma: float = 0.2
    alpha: float = 1.0
    eta: float = 0.0
    confidence_pos: float = 1.0
    confidence_neg: float = 1.0

    def build(self) -> KineticParams:
        d = self.model_dump()
        beta = d.pop("beta")
        return KineticParams(kernel=ContactKernel(beta), **d)


class ParticlesConfig(_Block):
    params: ParamsBlock = Field(default_factory=lambda: ParamsBlock(
        lambda_pos=0.05, lambda_neg=0.05, sigma_pos=0.05, sigma_neg=0.05))
    n_agents: int = Field(256, ge=1)
    init: Literal["uniform", "beta"] = "uniform"
    init_mean: tuple[float, float] = (0.5, 0.5)
    init_spread: tuple[float, float] = (0.5, 0.5)
    dt: float = 0.1
    steps: int = 1000
    every: int = Field(100, ge=1)
    mode: Literal["pairwise", "mckean"] = "pairwise"
    diffusion: Literal["beta_root", "abs_deviation"] = "beta_root"
    seed: int = Field(0, ge=0, lt=2**64)


class FpConfig(_Block):
    params: ParamsBlock = Field(default_factory=ParamsBlock)
    grid: int = Field(20, ge=2)
    dt: float = 0.05
    order: Literal["lie", "strang"] = "lie"
    fixed_means: Optional[tuple[float, float]] = None
    profile: Literal["cell", "point"] = "cell"
    init: Literal["uniform", "beta"] = "uniform"
    init_mean: tuple[float, float] = (0.5, 0.5)
    init_spread: tuple[float, float] = (0.5, 0.5)
    masses: tuple[float, float, float, float] = (1.0, 0.0, 0.0, 0.0)
    t_end: float = Field(10.0, gt=0)
    steady: bool = False
    tol: float = Field(1e-10, gt=0)
    max_steps: int = Field(100_000, ge=1)
    every: int = Field(0, ge=0)
    seed: int = Field(0, ge=0, lt=2**64)


class SeirConfig(_Block):
    params: ParamsBlock = Field(default_factory=lambda: ParamsBlock(beta=0.4, zeta=1.0, gamma=0.2))
    rho0: tuple[float, float, float, float] = (0.99, 0.0, 0.01, 0.0)
    means0: Optional[tuple[float, float]] = None
    t_end: float = Field(200.0, gt=0)
    dt: float = Field(0.05, gt=0)
    seed: int = Field(0, ge=0, lt=2**64)


class SteadyConfig(_Block):
    mean: float = 4 / 25
    spread: float = 1 / 5
    mixture: Optional[dict] = None
    points: int = Field(201, ge=2)
    grid: int = Field(20, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class FitConfig(_Block):
    histogram: Optional[str] = None
    field: Optional[str] = None
    axis: Literal["pos", "neg"] = "neg"
    starts: int = Field(8, ge=1)
    relaxed: bool = False
    model: Literal["cell", "point"] = "cell"
    brute_force: bool = False
    grid: int = Field(20, ge=2)
    seed: int = Field(0, ge=0, lt=2**64)


class SynthConfig(_Block):
    generator: dict = Field(default_factory=dict)
    n: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)


class PipelineConfig(SynthConfig):
    windows: int = Field(4, ge=1)
    grid: int = Field(20, ge=2)
    starts: int = Field(8, ge=1)
    model: Literal["cell", "point"] = "cell"


CONFIGS = {"particles": ParticlesConfig, "fp": FpConfig, "seir": SeirConfig, "steady": SteadyConfig,
           "fit": FitConfig, "synth": SynthConfig, "pipeline": PipelineConfig}


# --- output handling ------------------------------------------------------------

class Outputs:
    """Stage files in a temp dir beside ``out`` and move them in on success."""

    def __init__(self, out: Path):
        self.out = out
        self.names: list[str] = []
        self._tmp: Path | None = None

    def __enter__(self):
        self.out.mkdir(parents=True, exist_ok=True)
        self._tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))
        return self

    def path(self, name: str) -> Path:
        self.names.append(name)
        return self._tmp / name

    def write_json(self, name: str, obj) -> None:
        with open(self.path(name), "w") as fh:
            json.dump(obj, fh, indent=2, sort_keys=True, default=_jsonable)
            fh.write("\n")

    def __exit__(self, exc_type, exc, tb):
        try:
            if exc_type is None:
                for name in self.names:
                    os.replace(self._tmp / name, self.out / name)
        finally:
            shutil.rmtree(self._tmp, ignore_errors=True)
        return False


def _jsonable(x):
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return x.tolist()
    raise TypeError(f"cannot serialize {type(x).__name__}")


def _version() -> str:
    try:
        return metadata.version("opinion-kinetics")
    except metadata.PackageNotFoundError:
        from . import __version__
        return __version__


# --- commands ---------------------------------------------------------------------
# each cmd_* is split into a validation phase (errors -> exit 2) returning a runner

def _initial_field(cfg: FpConfig, grid: OpinionGrid) -> fp.DensityField:
    if cfg.init == "uniform":
        return fp.DensityField.uniform(grid, cfg.masses)
    profiles = []
    for k, n in enumerate(grid.shape):
        logt, _ = fp.matched_target(cfg.init_mean[k], cfg.init_spread[k], n, cfg.profile)
        profiles.append(np.exp(logt))
    return fp.DensityField.from_product(grid, *profiles, masses=cfg.masses)


def cmd_particles(cfg: ParticlesConfig):
    p = cfg.params.build()
    sim = particles.SimConfig(cfg.dt, cfg.steps, cfg.seed, cfg.mode, cfg.diffusion)
    sim.check(p)
    if cfg.mode == "mckean" and (p.confidence_pos != 1 or p.confidence_neg != 1):
        raise DomainError("mckean mode needs confidence levels equal to 1")
    if cfg.init == "uniform":
        ens = particles.Ensemble.uniform(cfg.n_agents, cfg.seed)
    else:
        ens = particles.Ensemble.from_beta(cfg.n_agents, cfg.init_mean, cfg.init_spread, cfg.seed)

    def execute(out: Outputs) -> dict:
        hist = particles.simulate(ens, p, sim, every=cfg.every)
        particles.write_snapshots_csv(hist, out.path("snapshots.csv"))
        particles.write_summary_csv(hist, out.path("summary.csv"))
        v = particles.variance_trajectory(hist)
        return {"variance_initial": v[0], "variance_final": v[-1],
                "means_final": particles.ensemble_means(hist[-1])}
    return execute


def cmd_fp(cfg: FpConfig):
    p = cfg.params.build()
    grid = OpinionGrid(cfg.grid, cfg.grid)
    plan = fp.SplitStepPlan(cfg.dt, cfg.order, fixed_means=cfg.fixed_means, profile=cfg.profile)
    plan.check(grid)
    if abs(sum(cfg.masses) - 1.0) > 1e-12 or min(cfg.masses) < 0:
        raise DomainError("masses must be nonnegative and sum to 1")
    field0 = _initial_field(cfg, grid)
    if not cfg.steady:
        nsteps = round(cfg.t_end / cfg.dt)
        if abs(nsteps * cfg.dt - cfg.t_end) > 1e-9 * max(1.0, cfg.t_end):
            raise DomainError("t_end must be a multiple of dt")

    def execute(out: Outputs) -> dict:
        info = {}
        if cfg.steady:
            snaps = [field0]
            res = fp.solve_to_steady(field0, p, plan, cfg.tol, cfg.max_steps)
            if not res.converged:
                raise fp.SolverError(f"no steady state after {res.steps} steps "
                                     f"(residual {res.residual:.3e})")
            snaps.append(res.field)
            info = {"steps": res.steps, "residual": res.residual}
        else:
            snaps = fp.run(field0, p, plan, cfg.t_end, every=cfg.every)
        final = snaps[-1]
        fp.write_field_csv(final, out.path("field.csv"))
        fp.write_field_header(final, out.path("field.json"))
        fp.write_marginals_csv(snaps, out.path("marginals_pos.csv"), "pos")
        fp.write_marginals_csv(snaps, out.path("marginals_neg.csv"), "neg")
        info.update(fp.field_header(final))
        return info
    return execute


def cmd_seir(cfg: SeirConfig):
    p = cfg.params.build()
    s0 = seir.SeirState(*cfg.rho0)
    m0 = None if cfg.means0 is None else seir.MomentState.from_means(s0, cfg.means0)
    rate = max(p.beta, p.zeta, p.gamma)
    if cfg.dt * rate > 0.1:
        raise seir.StepSizeError(f"dt*max(beta, zeta, gamma) = {cfg.dt * rate:.3g} exceeds 0.1")

    def execute(out: Outputs) -> dict:
        traj = seir.integrate_seir(s0, p, cfg.t_end, cfg.dt, m0)
        traj.to_csv(out.path("trajectory.csv"))
        info = {"final": traj.states[-1], "mass_drift": float(np.abs(traj.states.sum(axis=1) - 1).max())}
        if p.alpha == 1 and p.eta == 0 and cfg.rho0[3] == 0 and p.beta > 0 and p.gamma > 0:
            info["final_size"] = seir.final_size(p, cfg.rho0[0])
        return info
    return execute


def cmd_steady(cfg: SteadyConfig):
    w = np.linspace(0.0, 1.0, cfg.points)
    if cfg.mixture is not None:
        fit = MixtureFit.from_dict(cfg.mixture)
        curve = mixture_pdf(fit, w)
        cells = calibration.mixture_bins(calibration._as_vector(fit), cfg.grid)
    else:
        spec = beta_from_mean_spread(cfg.mean, cfg.spread)
        curve = beta_pdf(spec, w)
        cells = calibration.component_bins(cfg.mean, cfg.spread, cfg.grid)

    def execute(out: Outputs) -> dict:
        with open(out.path("curve.csv"), "w") as fh:
            fh.write("w,density\n")
            for x, y in zip(w, curve):
                fh.write(f"{float(x)!r},{float(y)!r}\n")
        with open(out.path("cells.csv"), "w") as fh:
            fh.write("w_center,cell_average\n")
            for x, y in zip((np.arange(cfg.grid) + 0.5) / cfg.grid, cells):
                fh.write(f"{float(x)!r},{float(y)!r}\n")
        return {}
    return execute


def _load_histogram(cfg: FitConfig) -> calibration.MarginalHistogram:
    if (cfg.histogram is None) == (cfg.field is None):
        raise DomainError("give exactly one of histogram or field")
    src = cfg.histogram or cfg.field
    if not Path(src).is_file():
        raise DomainError(f"input file {src!r} does not exist")
    if cfg.histogram:
        return calibration.MarginalHistogram.from_csv(src)
    field = fp.read_field_csv(src)
    return calibration.MarginalHistogram.from_field(field, cfg.axis)


def cmd_fit(cfg: FitConfig):
    hist = _load_histogram(cfg)

    def execute(out: Outputs) -> dict:
        fit = calibration.fit_mixture(hist, cfg.starts, cfg.seed, cfg.relaxed, cfg.model)
        result = {"fit": fit.to_dict()}
        if cfg.brute_force:
            result["brute_force"] = calibration.brute_force_fit(hist, model=cfg.model).to_dict()
        out.write_json("fit.json", result)
        calibration.write_fit_table(fit, hist, out.path("fit_table.csv"), cfg.model)
        return {"residual": fit.residual}
    return execute


def cmd_synth(cfg: SynthConfig):
    spec = data.GeneratorSpec.from_json(cfg.generator)

    def execute(out: Outputs) -> dict:
        recs = data.generate_synthetic(spec, cfg.n, cfg.seed)
        data.write_records(recs, out.path("records.csv"))
        spec.to_json(out.path("generator.json"))
        return {"records": len(recs)}
    return execute


def cmd_pipeline(cfg: PipelineConfig):
    spec = data.GeneratorSpec.from_json(cfg.generator)
    grid = OpinionGrid(cfg.grid, cfg.grid)

    def execute(out: Outputs) -> dict:
        recs = data.generate_synthetic(spec, cfg.n, cfg.seed)
        data.write_records(recs, out.path("records.csv"))
        spec.to_json(out.path("generator.json"))
        windows = data.snapshot_windows(recs, cfg.windows)
        for k, win in enumerate(windows):
            _, hneg, field = data.bin_snapshot(recs, win, grid)
            hneg.to_csv(out.path(f"snapshot_{k}_neg.csv"))
            fp.write_field_csv(field, out.path(f"snapshot_{k}_field.csv"))
        fit = calibration.fit_mixture(hneg, cfg.starts, cfg.seed, model=cfg.model)
        out.write_json("fit.json", {"window": windows[-1], "fit": fit.to_dict()})
        calibration.write_fit_table(fit, hneg, out.path("fit_table.csv"), cfg.model)
        traj = data.mean_trajectory(recs, (windows[-1][1] - windows[0][0]) / cfg.windows)
        with open(out.path("mean_trajectory.csv"), "w") as fh:
            fh.write("t_mid,mean_pos,mean_neg,count\n")
            for row in traj:
                fh.write(f"{row[0]!r},{row[1]!r},{row[2]!r},{int(row[3])}\n")
        return {"records": len(recs), "fit": fit.to_dict()}
    return execute


HELP = {"particles": "agent simulation (snapshots + summary CSV)",
        "fp": "mean-field density solver (field + marginals)",
        "seir": "compartment ODE trajectory and final size",
        "steady": "analytic Beta / mixture equilibrium curves",
        "fit": "two-Beta mixture fit of a marginal histogram",
        "synth": "synthetic scored-post records",
        "pipeline": "synth -> bin -> fit chain"}

COMMANDS = {"particles": cmd_particles, "fp": cmd_fp, "seir": cmd_seir, "steady": cmd_steady,
            "fit": cmd_fit, "synth": cmd_synth, "pipeline": cmd_pipeline}

NUMERIC_ERRORS = (fp.SolverError, calibration.FitError, FloatingPointError, np.linalg.LinAlgError,
                  ArithmeticError)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="opinion-kinetics", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON config file")
    common.add_argument("--out", type=Path, default=Path("out"), help="output directory")
    common.add_argument("--seed", type=int, help="64-bit seed (overrides config)")
    common.add_argument("--grid", type=int, help="cells per axis (overrides config)")
    common.add_argument("--quiet", action="store_true")
    common.add_argument("--set", action="append", default=[], metavar="KEY=JSON",
                        help="override one config entry, dotted keys allowed")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=HELP[name])
    return ap


def _apply_override(raw: dict, key: str, value) -> None:
    parts = key.split(".")
    d = raw
    for k in parts[:-1]:
        d = d.setdefault(k, {})
    d[parts[-1]] = value


def resolve_config(args) -> BaseModel:
    raw: dict = {}
    if args.config is not None:
        try:
            with open(args.config) as fh:
                raw = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{args.config}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{args.config}: top level must be an object")
        if "config" in raw and "command" in raw:
            # a manifest from an earlier run
            if raw["command"] != args.command:
                raise ConfigError(f"manifest is for {raw['command']!r}, not {args.command!r}")
            raw = raw["config"]
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects KEY=JSON, got {item!r}")
        try:
            _apply_override(raw, key, json.loads(val))
        except json.JSONDecodeError:
            _apply_override(raw, key, val)
    model = CONFIGS[args.command]
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.grid is not None:
        if "grid" not in model.model_fields:
            raise ConfigError(f"--grid does not apply to {args.command}")
        raw["grid"] = args.grid
    try:
        return model.model_validate(raw)
    except ValidationError as exc:
        first = exc.errors()[0]
        loc = ".".join(str(x) for x in first["loc"])
        raise ConfigError(f"config field {loc}: {first['msg']}") from None


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        runner = COMMANDS[args.command](cfg)
    except (ConfigError, DomainError, ValueError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG

    try:
        with Outputs(args.out) as out:
            info = runner(out)
            manifest = {"command": args.command, "version": _version(), "seed": cfg.seed,
                        "config": cfg.model_dump(mode="json"), "outputs": sorted(out.names),
                        "result": info}
            out.write_json("manifest.json", manifest)
    except NUMERIC_ERRORS as exc:
        log.error("numerical failure in %s: %s", args.command, exc)
        return EXIT_NUMERIC
    except DomainError as exc:
        log.error("%s: %s", args.command, exc)
        return EXIT_CONFIG
    log.info("%s: wrote %d files to %s", args.command, len(out.names), args.out)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
