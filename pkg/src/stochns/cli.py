"""Command-line front end.

Every subcommand reads a config (``--config``), runs one experiment and
appends result lines to ``--out``.  Exit status: 0 success, 1 invalid
configuration, 2 numerical failure, 3 threshold breach (``check`` and
``oracle``).
"""

from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np
from pydantic import ValidationError

from . import __version__
from .action import ReplayMissError, action_IT, action_JT, control_for_target, minimize_action, reversed_flow_path
from .config import ENV_PREFIX, ConfigDocument, load_config
from .dynamics import BlowUpError, DiscretePath, SolverConfig, replay_controls, simulate
from .experiments import (
    Estimate,
    ExperimentPlan,
    ball_probability,
    default_burn_in,
    energy_balance_check,
    ergodic_sampler,
    run_ensemble,
    tail_probability,
)
from .noise import NoiseSchedule, RngStream, ou_transition, sigma_array
from .records import ResultLine, append_records, export_plot_data, merge_records
from .spectral import SpectralField, Truncation, identity_suite, single_mode, sobolev_norm

log = logging.getLogger("stochns")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_BREACH = 0, 1, 2, 3
# paths fed to the action minimiser use at most this many nodes per time unit
MAX_NODES_PER_UNIT = 100
STREAM_SAMPLE_PATH, STREAM_ORACLE = 2, 3


# ---------------------------------------------------------------------------
# Config -> domain objects


def truncation_of(cfg: ConfigDocument) -> Truncation:
    return Truncation(cfg.truncation.n_max, cfg.truncation.grid_size)


def schedule_of(cfg: ConfigDocument) -> NoiseSchedule:
    law = cfg.noise.delta_law
    return NoiseSchedule(theta=law.theta, c_delta=law.c)


def solver_of(cfg: ConfigDocument) -> SolverConfig:
    s = cfg.solver
    return SolverConfig(dt=s.dt, t_final=s.t_final, scheme=s.scheme, record_stride=s.record_stride)


def plan_of(cfg: ConfigDocument, threads: int = 1, burn_in: float | None = None, **changes) -> ExperimentPlan:
    e = cfg.experiment
    kwargs = dict(
        epsilon_list=list(e.epsilon_list),
        trunc=truncation_of(cfg),
        solver=solver_of(cfg),
        schedule=schedule_of(cfg),
        beta=cfg.noise.beta,
        trajectories=e.trajectories,
        burn_in=e.burn_in if burn_in is None else burn_in,
        seed=cfg.seed,
        nonlinear=e.nonlinear,
        sample_every=e.sample_every,
        workers=threads,
        chunk_size=e.chunk_size,
    )
    kwargs.update(changes)
    return ExperimentPlan(**kwargs)


def targets_of(cfg: ConfigDocument, trunc: Truncation) -> list[SpectralField]:
    """Configured targets, or the slowest mode with ``||x||_V^2 = 1``."""
    if not cfg.experiment.targets:
        return [single_mode(trunc, (1, 0), 1.0 / math.sqrt(2.0))]
    out = []
    for t in cfg.experiment.targets:
        x = SpectralField.zeros(trunc)
        for m in t.modes:
            x = x + single_mode(trunc, tuple(m.k), complex(m.re, m.im))
        if t.v_energy is not None:
            norm = x.norm(1.0)
            if norm == 0:
                raise ValueError("cannot rescale a zero target")
            x = x * (math.sqrt(t.v_energy) / norm)
        out.append(x)
    return out


def stationary_burn_in(cfg: ConfigDocument) -> float:
    if cfg.experiment.burn_in is not None:
        return cfg.experiment.burn_in
    return default_burn_in(1.0, trunc=truncation_of(cfg), seed=cfg.seed)


# ---------------------------------------------------------------------------
# Subcommands: each returns a list of ResultLine-ready dicts


def _line(observable: str, est: float, se: float = 0.0, n: int = 1, **params) -> dict:
    return {
        "observable": observable,
        "estimate": float(est),
        "std_error": float(se) if math.isfinite(se) else 0.0,
        "n_samples": int(n),
        "params": {k: float(v) for k, v in params.items() if v is not None},
    }


def _from_estimate(observable: str, e: Estimate, **params) -> dict:
    return _line(observable, e.estimate, e.std_error, e.n_samples, **params)


def cmd_check(cfg: ConfigDocument, args) -> list[dict]:
    tol = cfg.experiment.tolerance
    defects = identity_suite(max(cfg.truncation.n_max, 8), 100, 4, seed=cfg.seed)
    lines = [_line(f"identity.{name}", d, tolerance=tol) for name, d in defects.items()]
    bad = [name for name, d in defects.items() if not d <= tol]
    if bad:
        args._breach = f"identity defects above {tol:g}: {', '.join(bad)}"
    return lines


def cmd_simulate(cfg: ConfigDocument, args) -> list[dict]:
    plan = plan_of(cfg, args.threads)
    tr = plan.trunc
    x0 = targets_of(cfg, tr)[0] if cfg.experiment.targets else SpectralField.zeros(tr)
    plan = plan_of(cfg, args.threads, x0=x0)
    lines = []
    for eps in plan.epsilon_list:
        n_steps = plan.solver.n_steps

        def make(ids):
            out = {}

            def observe(a, j, _t):
                if j == n_steps:
                    out["H"] = sobolev_norm(a, tr, 0.0)
                    out["V"] = sobolev_norm(a, tr, 1.0)

            return observe, lambda: out

        res = run_ensemble(plan, eps, n_steps, make)
        lines.append(_from_estimate("simulate.H2_final", Estimate.from_samples(res["H"] ** 2), epsilon=eps))
        lines.append(_from_estimate("simulate.V2_final", Estimate.from_samples(res["V"] ** 2), epsilon=eps))
    if args.save:
        eps = plan.epsilon_list[0]
        path = simulate(x0, plan.solver, plan.spec(eps), eps, RngStream(cfg.seed, STREAM_SAMPLE_PATH), 0, plan.nonlinear)
        save_path(args.save, path)
        log.info("saved a sample trajectory at epsilon=%g to %s", eps, args.save)
    return lines


def cmd_energy(cfg: ConfigDocument, args) -> list[dict]:
    plan = plan_of(cfg, args.threads, x0=targets_of(cfg, truncation_of(cfg))[0])
    lines = []
    for eps in plan.epsilon_list:
        r = energy_balance_check(plan, eps)
        lines.append(_from_estimate("energy_balance.lhs", r["lhs"], epsilon=eps, rhs=r["rhs"]))
        lo, hi = r["relative_ci"]
        lines.append(_line("energy_balance.relative_discrepancy", r["relative_discrepancy"],
                           r["lhs"].std_error / r["rhs"], r["lhs"].n_samples, epsilon=eps, ci_lo=lo, ci_hi=hi))
        if "energy_oracle" in r:
            lines.append(_from_estimate("energy_balance.energy_final", r["energy_final"], epsilon=eps,
                                        oracle=r["energy_oracle"]))
    return lines


def cmd_invariant(cfg: ConfigDocument, args) -> list[dict]:
    plan = plan_of(cfg, args.threads, burn_in=stationary_burn_in(cfg))
    radii = tuple(cfg.experiment.radii) or (0.1, 0.25, 0.5)
    out = ergodic_sampler(plan, radii_h=radii)
    lines = []
    for row in out["per_epsilon"]:
        eps = row["epsilon"]
        for key in ("H2", "V2", "V2_2"):
            lines.append(_from_estimate(f"invariant.{key}", row[key], epsilon=eps, exact_linear=row["exact"][key],
                                        non_stationary=float(row["non_stationary"])))
        for r, e in row["mass_in_ball"].items():
            lines.append(_from_estimate("invariant.mass_in_ball", e, epsilon=eps, R=r))
    lines.append(_line("invariant.sup_V2", out["sup_V2"], 0.0, len(out["per_epsilon"]), bound=out["V2_bound"]))
    return lines


def cmd_tails(cfg: ConfigDocument, args) -> list[dict]:
    if not cfg.experiment.radii:
        raise ValueError("tails needs experiment.radii")
    plan = plan_of(cfg, args.threads, burn_in=stationary_burn_in(cfg))
    out = tail_probability(plan, cfg.experiment.radii)
    lines = []
    for row in out["per_epsilon"]:
        eps = row["epsilon"]
        for c in row["cells"]:
            lines.append(_line("tail_probability", c["p_hat"], c["std_error"], int(c["n_eff"]), epsilon=eps, R=c["R"],
                               wilson_lo=c["wilson"][0], wilson_hi=c["wilson"][1], censored=float(c["censored"]),
                               oracle=c.get("oracle")))
        if row["fit"]:
            lines.append(_line("tail_fit.slope", row["fit"]["slope"], 0.0, len(row["fit"]["R2"]), epsilon=eps,
                               intercept=row["fit"]["intercept"]))
    return lines


def cmd_action(cfg: ConfigDocument, args) -> list[dict]:
    if not args.path:
        raise ValueError("action needs --path to a stored trajectory (.npz)")
    path = load_path(args.path)
    it = action_IT(path, cfg.experiment.nonlinear)
    jt = action_JT(path)
    n = len(path)
    return [
        _line("action.IT", it.value, 0.0, n, t_final=path.t_final, dt=path.dt),
        _line("action.JT", jt.value, 0.0, n, t_final=path.t_final, dt=path.dt),
    ]


def cmd_quasipotential(cfg: ConfigDocument, args) -> list[dict]:
    tr = truncation_of(cfg)
    T = cfg.experiment.horizon
    lines = []
    for i, x in enumerate(targets_of(cfg, tr)):
        exact = float(x.norm(1.0) ** 2)
        rev = reversed_flow_path(x, T, cfg.solver.dt, nonlinear=cfg.experiment.nonlinear)
        val = action_IT(rev, cfg.experiment.nonlinear).value
        start_v = float(rev.start.norm(1.0) ** 2)
        lines.append(_line("quasipotential.reversed_flow", val, 0.0, len(rev), target=i, exact=exact,
                           defect=abs(val - (exact - start_v))))
        n_nodes = int(round(T * min(MAX_NODES_PER_UNIT, 1.0 / cfg.solver.dt))) + 1
        path, res = minimize_action(x, T, n_nodes, nonlinear=cfg.experiment.nonlinear)
        lines.append(_line("quasipotential.minimized", res.value, 0.0, n_nodes, target=i, exact=exact,
                           converged=float(res.converged), relative_gap=(res.value - exact) / exact))
    return lines


def cmd_ldp(cfg: ConfigDocument, args) -> list[dict]:
    tr = truncation_of(cfg)
    x = targets_of(cfg, tr)[0]
    dt = cfg.solver.dt
    T = cfg.experiment.horizon
    cp = control_for_target(x, lam=0.05, T1=0.0, T2=T, dt=dt, scheme=cfg.solver.scheme)
    zero = np.zeros(tr.shape, dtype=complex)
    _, states = replay_controls(zero, cp.controls, dt, tr, cfg.solver.scheme, cfg.experiment.nonlinear, keep=True)
    phi = DiscretePath(dt * np.arange(len(states)), states, tr)
    action = action_IT(phi, cfg.experiment.nonlinear).value
    solver = SolverConfig(dt=dt, t_final=len(cp.controls) * dt, scheme=cfg.solver.scheme)
    plan = plan_of(cfg, args.threads, solver=solver, x0=None)
    out = ball_probability(plan, states, cfg.experiment.ball_radius, action=action)
    lines = []
    for row in out["per_epsilon"]:
        lines.append(_line("ball_probability", row["p_hat"], row["std_error"], int(row["n_eff"]),
                           epsilon=row["epsilon"], delta=out["delta"], action=action, censored=float(row["censored"])))
        if row["rate"] is not None:
            lines.append(_line("ldp.rate", row["rate"], 0.0, int(row["n_eff"]), epsilon=row["epsilon"], action=action))
    return lines


def cmd_oracle(cfg: ConfigDocument, args) -> list[dict]:
    """Linear-model Monte Carlo against closed forms; breach if any |z| > 3."""
    tr = truncation_of(cfg)
    lines, worst = [], 0.0
    n_traj = cfg.experiment.trajectories
    ri, rj = tr.rep_index
    lowest = np.argsort(tr.ksq[ri, rj], kind="stable")[:4]
    for i, eps in enumerate(cfg.experiment.epsilon_list):
        spec = schedule_of(cfg).spec(eps, cfg.noise.beta)
        # one exact OU step of length 20 from 0 is stationary to e^-40
        decay, var = ou_transition(tr, spec, eps, 20.0)
        g = RngStream(cfg.seed, STREAM_ORACLE).complex_normals(np.arange(n_traj), i, len(ri))
        samples = np.abs(g * np.sqrt(var[ri, rj])) ** 2
        target = eps * (sigma_array(spec, tr)[ri, rj] ** 2) / (2 * tr.ksq[ri, rj])
        for m in lowest:
            e = Estimate.from_samples(samples[:, m])
            z = (e.estimate - target[m]) / e.std_error
            worst = max(worst, abs(z))
            lines.append(_from_estimate("oracle.mode_variance", e, epsilon=eps, k1=ri[m] - tr.n_max,
                                        k2=rj[m] - tr.n_max, oracle=target[m], z=z))
    plan = plan_of(cfg, args.threads, nonlinear=False, x0=targets_of(cfg, tr)[0])
    for eps in plan.epsilon_list:
        r = energy_balance_check(plan, eps)
        e = r["energy_final"]
        z = (e.estimate - r["energy_oracle"]) / e.std_error
        worst = max(worst, abs(z))
        lines.append(_from_estimate("oracle.energy_final", e, epsilon=eps, oracle=r["energy_oracle"], z=z))
    if worst > 3.0:
        args._breach = f"linear-model oracle mismatch: max |z| = {worst:.2f} > 3"
    return lines


COMMANDS = {
    "check": cmd_check,
    "simulate": cmd_simulate,
    "energy": cmd_energy,
    "invariant": cmd_invariant,
    "tails": cmd_tails,
    "action": cmd_action,
    "quasipotential": cmd_quasipotential,
    "ldp": cmd_ldp,
    "oracle": cmd_oracle,
}


# ---------------------------------------------------------------------------
# Path files


def save_path(file: str | Path, path: DiscretePath) -> None:
    np.savez(file, times=path.times, states=path.states, n_max=path.trunc.n_max, grid_size=path.trunc.grid_size)


def load_path(file: str | Path) -> DiscretePath:
    with np.load(file) as data:
        tr = Truncation(int(data["n_max"]), int(data["grid_size"]))
        return DiscretePath(np.array(data["times"]), np.array(data["states"]), tr)


# ---------------------------------------------------------------------------
# Entry point


def _env(name: str, default=None):
    return os.environ.get(ENV_PREFIX + name, default)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=_env("CONFIG"), help="YAML/JSON config file (default: built-in defaults)")
    common.add_argument("--out", default=_env("OUT", "results.jsonl"), help="result file to append to")
    common.add_argument("--seed", type=int, default=_env("SEED"), help="override the config seed (unsigned 64-bit)")
    common.add_argument("--threads", type=int, default=int(_env("THREADS", "1")), help="Monte-Carlo worker threads")
    common.add_argument("-v", "--verbose", action="store_true", default=bool(_env("VERBOSE")))

    parser = argparse.ArgumentParser(
        prog="stochns",
        description="Small-noise stochastic Navier-Stokes on the 2-torus: simulations, actions and rare-event checks.",
        epilog=f"Config leaves can be overridden with {ENV_PREFIX}<SECTION>__<KEY>=value.",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "check": "operator identity suite",
        "simulate": "stochastic trajectories; --save stores one sample path",
        "energy": "Ito energy balance",
        "invariant": "invariant-measure moments and ball masses",
        "tails": "tail probabilities of ||x||_V with a rate fit",
        "action": "actions of a stored path (--path)",
        "quasipotential": "reversed-flow and minimised action versus ||x||_V^2",
        "ldp": "ball probabilities around a controlled path",
        "oracle": "linear-model Monte Carlo against closed forms",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, parents=[common], help=text)
        if name == "simulate":
            p.add_argument("--save", help="write a sample path at the first epsilon to this .npz file")
        if name == "action":
            p.add_argument("--path", help="trajectory .npz written by simulate --save")
    m = sub.add_parser("merge", help="merge shard result files")
    m.add_argument("inputs", nargs="+")
    m.add_argument("--out", required=True)
    m.add_argument("-v", "--verbose", action="store_true")
    e = sub.add_parser("export", help="write a CSV table of one observable")
    e.add_argument("records")
    e.add_argument("--observable", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("-v", "--verbose", action="store_true")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")

    if args.command == "merge":
        n = merge_records(args.inputs, args.out)
        print(f"merged {n} records into {args.out}")
        return EXIT_OK
    if args.command == "export":
        try:
            n = export_plot_data(args.records, args.observable, args.out)
        except KeyError as exc:
            print(f"error: {exc.args[0]}", file=sys.stderr)
            return EXIT_CONFIG
        print(f"wrote {n} rows to {args.out}")
        return EXIT_OK

    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_overrides(seed=int(args.seed))
        if args.threads < 1:
            raise ValueError("--threads must be at least 1")
    except ValidationError as exc:
        for err in exc.errors():
            loc = ".".join(str(p) for p in err["loc"])
            print(f"config error: {loc}: {err['msg']}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, ValueError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    args._breach = None
    t0 = time.perf_counter()
    try:
        raw = COMMANDS[args.command](cfg, args)
    except (BlowUpError, FloatingPointError, ReplayMissError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    wall = 1000.0 * (time.perf_counter() - t0)

    h = cfg.config_hash()
    records = [ResultLine(config_hash=h, wall_ms=wall, **r) for r in raw]
    append_records(args.out, records)
    for r in records:
        extras = " ".join(f"{k}={v:.6g}" for k, v in r.params.items())
        print(f"{r.observable:36s} {r.estimate:.6g} +/- {r.std_error:.2g}  {extras}")
    print(f"{len(records)} records appended to {args.out} (config {h[:12]}, {wall / 1000:.1f} s)")
    if args._breach:
        print(f"threshold breach: {args._breach}", file=sys.stderr)
        return EXIT_BREACH
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
