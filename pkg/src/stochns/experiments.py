"""Monte-Carlo harness: energy balance, invariant-measure statistics, tails and
path ball probabilities.

Trajectories are split into fixed-size chunks.  Every Gaussian draw is
addressed by ``(seed, stream, trajectory, step)`` and per-trajectory results
are reassembled in trajectory order before any reduction, so estimates do not
depend on the number of worker threads.  Reductions use ``math.fsum``.
"""

from __future__ import annotations

import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np
from scipy import integrate, optimize

from .action import action_IT, minimize_action
from .dynamics import DiscretePath, Integrator, NoiseSource, SolverConfig, decay_time, replay_controls
from .noise import (
    CovarianceSpec,
    NoiseSchedule,
    RngStream,
    noise_from_normals,
    ou_transition,
    p_epsilon,
    sigma_array,
    trace_Q,
)
from .spectral import SpectralField, Truncation, sobolev_norm

log = logging.getLogger(__name__)

__all__ = [
    "Estimate",
    "ExperimentPlan",
    "run_ensemble",
    "energy_balance_check",
    "linear_energy_oracle",
    "ergodic_sampler",
    "stationary_moments",
    "weighted_exponential_tail",
    "stationary_tail_oracle",
    "wilson_interval",
    "radius_for_tail",
    "tail_probability",
    "ball_probability",
    "uniformity_probe",
    "linear_ball_oracle",
    "default_burn_in",
    "held_outside_growth",
    "RunRecord",
]

# stream ids keep unrelated experiments on disjoint draws
STREAM_DYNAMICS = 1


@dataclass
class Estimate:
    estimate: float
    std_error: float
    n_samples: int
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_samples(cls, samples, **extra) -> "Estimate":
        s = np.asarray(samples, dtype=float).ravel()
        n = len(s)
        mean = math.fsum(s) / n
        var = math.fsum((s - mean) ** 2) / (n - 1) if n > 1 else float("inf")
        return cls(mean, math.sqrt(var / n), n, dict(extra))

    def within(self, value: float, n_sigma: float = 3.0) -> bool:
        return abs(self.estimate - value) <= n_sigma * self.std_error


@dataclass
class ExperimentPlan:
    epsilon_list: list[float]
    trunc: Truncation
    solver: SolverConfig
    schedule: NoiseSchedule = field(default_factory=NoiseSchedule)
    beta: float = 3.0
    trajectories: int = 1000
    burn_in: float = 0.0
    seed: int = 0
    x0: SpectralField | None = None
    nonlinear: bool = True
    sample_every: int = 1
    workers: int = 1
    chunk_size: int = 1000

    def __post_init__(self) -> None:
        eps = list(self.epsilon_list)
        if any(e < 0 for e in eps):
            raise ValueError("epsilon values must be nonnegative")
        if any(eps[i] <= eps[i + 1] for i in range(len(eps) - 1)):
            raise ValueError("epsilon_list must be strictly decreasing")
        if self.trajectories < 1 or self.chunk_size < 1 or self.workers < 1:
            raise ValueError("trajectories, chunk_size and workers must be positive")

    def spec(self, epsilon: float) -> CovarianceSpec:
        return self.schedule.spec(epsilon, self.beta) if epsilon > 0 else CovarianceSpec(self.beta, 0.0)

    def initial(self) -> np.ndarray:
        if self.x0 is None:
            return np.zeros(self.trunc.shape, dtype=complex)
        return self.x0.coeffs

    def hypotheses(self) -> dict[str, bool]:
        return self.schedule.hypotheses(self.beta)

    def describe(self) -> dict:
        return {
            "epsilon_list": list(self.epsilon_list),
            "n_max": self.trunc.n_max,
            "grid_size": self.trunc.grid_size,
            "solver": asdict(self.solver),
            "schedule": asdict(self.schedule),
            "beta": self.beta,
            "trajectories": self.trajectories,
            "burn_in": self.burn_in,
            "seed": self.seed,
            "nonlinear": self.nonlinear,
            "sample_every": self.sample_every,
            "chunk_size": self.chunk_size,
            "hypotheses": self.hypotheses(),
        }


Observer = Callable[[np.ndarray, int, float], None]


def run_ensemble(
    plan: ExperimentPlan,
    epsilon: float,
    n_steps: int,
    make_observer: Callable[[np.ndarray], tuple[Observer, Callable[[], dict]]],
    x0: np.ndarray | None = None,
    stream: int = STREAM_DYNAMICS,
    trajectories: int | None = None,
) -> dict[str, np.ndarray]:
    """Advance ``trajectories`` copies of the stochastic system by ``n_steps``.

    ``make_observer(traj_ids)`` returns ``(observe, finish)``: ``observe`` is
    called with the chunk state after every step (and once with step 0 before
    the first), ``finish`` returns a dict of per-trajectory arrays.  Results
    are concatenated in trajectory order.
    """
    tr, cfg = plan.trunc, plan.solver
    n_traj = trajectories or plan.trajectories
    start = plan.initial() if x0 is None else np.asarray(x0, dtype=complex)
    spec = plan.spec(epsilon)
    rng = RngStream(plan.seed, stream)
    integ = Integrator(tr, cfg.dt, cfg.scheme, plan.nonlinear)
    noise = NoiseSource(tr, spec, epsilon, cfg.dt, rng)
    # salt the trajectory coordinate with epsilon so different noise levels
    # never reuse draws
    salt = int(round(epsilon * 1e9)) << 32

    def run_chunk(lo: int, hi: int) -> dict[str, np.ndarray]:
        ids = np.arange(lo, hi)
        keys = ids + salt
        a = np.broadcast_to(start, (hi - lo,) + start.shape[-2:]).copy() if start.ndim == 2 else start[lo:hi].copy()
        observe, finish = make_observer(ids)
        observe(a, 0, 0.0)
        # overflow between checks surfaces as a BlowUpError at the next check
        with np.errstate(over="ignore", invalid="ignore"):
            for j in range(n_steps):
                a = integ.advance(a, noise=noise(keys, j))
                if (j + 1) % 50 == 0 or j == n_steps - 1:
                    integ.check(a, (j + 1) * cfg.dt)
                observe(a, j + 1, (j + 1) * cfg.dt)
        return finish()

    bounds = [(lo, min(lo + plan.chunk_size, n_traj)) for lo in range(0, n_traj, plan.chunk_size)]
    if plan.workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(plan.workers) as pool:
            parts = list(pool.map(lambda b: run_chunk(*b), bounds))
    else:
        parts = [run_chunk(*b) for b in bounds]
    return {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}


# ---------------------------------------------------------------------------
# Energy balance


def linear_energy_oracle(x: np.ndarray, trunc: Truncation, spec: CovarianceSpec, epsilon: float, t: float) -> float:
    """Closed-form ``E||z(t)||_H^2`` for the linear (B = 0) equation from ``x``."""
    lam = trunc.ksq[trunc.mask]
    s2 = (sigma_array(spec, trunc) ** 2)[trunc.mask]
    x2 = np.abs(x[trunc.mask]) ** 2
    return math.fsum(np.exp(-2 * lam * t) * x2 + epsilon * s2 * (-np.expm1(-2 * lam * t)) / (2 * lam))


def energy_balance_check(plan: ExperimentPlan, epsilon: float | None = None) -> dict:
    """Compare ``E||u(t)||_H^2 + 2 int_0^t E||u||_V^2`` with ``||x||_H^2 + t eps Tr Q``.

    The time integral uses the trapezoidal rule on the solver grid.  The
    returned dict holds the two sides, their relative discrepancy with a
    3-sigma band, and (for ``nonlinear=False``) the closed-form
    ``E||u(t)||^2`` check.
    """
    eps = plan.epsilon_list[0] if epsilon is None else epsilon
    tr, cfg = plan.trunc, plan.solver
    n_steps = cfg.n_steps
    t = n_steps * cfg.dt
    v_weight = tr.power(1.0)

    def make(ids):
        acc = {"vint": np.zeros(len(ids)), "h_final": np.zeros(len(ids))}

        def observe(a, j, _t):
            v2 = np.sum(v_weight * (a.real**2 + a.imag**2), axis=(-2, -1))
            w = 0.5 if j in (0, n_steps) else 1.0
            acc["vint"] += w * cfg.dt * v2
            if j == n_steps:
                acc["h_final"] = sobolev_norm(a, tr, 0.0) ** 2

        return observe, lambda: acc

    res = run_ensemble(plan, eps, n_steps, make)
    x = plan.initial()
    spec = plan.spec(eps)
    lhs = Estimate.from_samples(res["h_final"] + 2 * res["vint"])
    rhs = float(np.sum(np.abs(x) ** 2)) + t * eps * trace_Q(spec, tr)
    rel = (lhs.estimate - rhs) / rhs
    rel_err = lhs.std_error / rhs
    report = {
        "epsilon": eps,
        "t": t,
        "lhs": lhs,
        "rhs": rhs,
        "relative_discrepancy": rel,
        "relative_ci": (rel - 3 * rel_err, rel + 3 * rel_err),
        "energy_final": Estimate.from_samples(res["h_final"]),
        "insufficient_samples": plan.trajectories < 100,
    }
    if not plan.nonlinear:
        oracle = linear_energy_oracle(x, tr, spec, eps, t)
        report["energy_oracle"] = oracle
        report["oracle_within_3sigma"] = report["energy_final"].within(oracle)
    return report


# ---------------------------------------------------------------------------
# Invariant measure


def stationary_moments(trunc: Truncation, spec: CovarianceSpec, epsilon: float) -> dict[str, float]:
    """Exact stationary moments.

    ``E||x||_V^2 = (eps/2) Tr Q`` holds for the full nonlinear model as well
    (Ito balance at stationarity with ``<B(u), u> = 0``); the other two are
    Gaussian (linear model) values.
    """
    lam = trunc.ksq[trunc.mask]
    s2 = (sigma_array(spec, trunc) ** 2)[trunc.mask]
    return {
        "H2": math.fsum(epsilon * s2 / (2 * lam)),
        "V2": 0.5 * epsilon * trace_Q(spec, trunc),
        "V2_2": 0.5 * epsilon * p_epsilon(spec, trunc),
    }


def _snapshot_steps(plan: ExperimentPlan) -> tuple[int, int]:
    cfg = plan.solver
    burn = int(round(plan.burn_in / cfg.dt))
    total = cfg.n_steps
    if burn >= total:
        raise ValueError("burn_in must be shorter than t_final")
    return burn, total


def _stationary_run(plan: ExperimentPlan, eps: float, radii_v=(), radii_h=(), hist_bins=None):
    tr = plan.trunc
    burn, total = _snapshot_steps(plan)
    v_w, v2_w = tr.power(1.0), tr.power(2.0)
    mid = burn + (total - burn) // 2

    def make(ids):
        n = len(ids)
        acc = {
            "H2": np.zeros(n), "V2": np.zeros(n), "V2_2": np.zeros(n),
            "V2_first": np.zeros(n), "V2_second": np.zeros(n),
            "count": np.zeros(n), "count_first": np.zeros(n),
        }
        for i in range(len(radii_v)):
            acc[f"exceed_v_{i}"] = np.zeros(n)
        for i in range(len(radii_h)):
            acc[f"inside_h_{i}"] = np.zeros(n)
        if hist_bins is not None:
            acc["hist_h"] = np.zeros((n, len(hist_bins[0]) - 1))
            acc["hist_v"] = np.zeros((n, len(hist_bins[1]) - 1))

        def observe(a, j, _t):
            if j <= burn or (j - burn) % plan.sample_every:
                return
            p2 = a.real**2 + a.imag**2
            h2 = np.sum(p2, axis=(-2, -1))
            v2 = np.sum(v_w * p2, axis=(-2, -1))
            acc["H2"] += h2
            acc["V2"] += v2
            acc["V2_2"] += np.sum(v2_w * p2, axis=(-2, -1))
            acc["count"] += 1
            if j <= mid:
                acc["V2_first"] += v2
                acc["count_first"] += 1
            else:
                acc["V2_second"] += v2
            for i, r in enumerate(radii_v):
                acc[f"exceed_v_{i}"] += v2 > r * r
            for i, r in enumerate(radii_h):
                acc[f"inside_h_{i}"] += h2 < r * r
            if hist_bins is not None:
                for key, vals, edges in (("hist_h", np.sqrt(h2), hist_bins[0]), ("hist_v", np.sqrt(v2), hist_bins[1])):
                    idx = np.clip(np.searchsorted(edges, vals, side="right") - 1, 0, len(edges) - 2)
                    acc[key][np.arange(len(vals)), idx] += 1

        return observe, lambda: acc

    return run_ensemble(plan, eps, total, make)


def ergodic_sampler(
    plan: ExperimentPlan,
    radii_h=(0.1, 0.25, 0.5),
    hist_edges: tuple[np.ndarray, np.ndarray] | None = None,
) -> dict:
    """Time-averaged statistics of post-burn-in snapshots for each epsilon.

    Per-trajectory time averages are treated as independent samples, which
    gives honest standard errors despite correlation along a trajectory.
    """
    out = {"per_epsilon": [], "hypotheses": plan.hypotheses()}
    for eps in plan.epsilon_list:
        spec = plan.spec(eps)
        res = _stationary_run(plan, eps, radii_h=radii_h, hist_bins=hist_edges)
        cnt = res["count"]
        exact = stationary_moments(plan.trunc, spec, eps)
        first = res["V2_first"] / res["count_first"]
        second = res["V2_second"] / (cnt - res["count_first"])
        e_first, e_second = Estimate.from_samples(first), Estimate.from_samples(second)
        gap = abs(e_first.estimate - e_second.estimate)
        sigma = math.hypot(e_first.std_error, e_second.std_error)
        row = {
            "epsilon": eps,
            "delta": spec.delta,
            "H2": Estimate.from_samples(res["H2"] / cnt),
            "V2": Estimate.from_samples(res["V2"] / cnt),
            "V2_2": Estimate.from_samples(res["V2_2"] / cnt),
            "exact": exact,
            "mass_in_ball": {
                r: Estimate.from_samples(res[f"inside_h_{i}"] / cnt) for i, r in enumerate(radii_h)
            },
            "non_stationary": bool(gap > 5 * sigma) if sigma > 0 else False,
        }
        if hist_edges is not None:
            row["hist_h"] = res["hist_h"].sum(axis=0)
            row["hist_v"] = res["hist_v"].sum(axis=0)
        out["per_epsilon"].append(row)
    v2 = [r["V2"].estimate for r in out["per_epsilon"]]
    out["sup_V2"] = max(v2)
    out["V2_bound"] = max(0.5 * e * trace_Q(plan.spec(e), plan.trunc) for e in plan.epsilon_list)
    return out


# ---------------------------------------------------------------------------
# Tails of the invariant measure


def weighted_exponential_tail(weights, x: float) -> float:
    """``P(sum_i w_i E_i > x)`` for independent standard exponentials ``E_i``.

    Gil-Pelaez inversion of the characteristic function
    ``prod_i (1 - i w_i u)^-1``. The error is absolute (about 1e-12), so
    probabilities far below that carry no relative accuracy.
    """
    w = np.asarray(weights, dtype=float)
    w = w[w > 0]
    if x <= 0:
        return 1.0

    def phi(u: float) -> complex:
        return complex(np.exp(-np.sum(np.log1p(-1j * w * u))))

    def integrand(u: float) -> float:
        if u == 0.0:
            return math.fsum(w) - x
        return (phi(u) * complex(math.cos(u * x), -math.sin(u * x))).imag / u

    scale = 1.0 / w.max()
    cut = 50.0 * scale
    # the oscillatory finite part segment by segment, then the tail with a Fourier-weighted rule
    edges = np.concatenate([[0.0], np.geomspace(1e-3 * scale, cut, 120)])
    total = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        total += integrate.quad(integrand, lo, hi, limit=200, epsabs=1e-15, epsrel=1e-12)[0]
    total += integrate.quad(lambda u: phi(u).imag / u, cut, np.inf, weight="cos", wvar=x, limlst=100)[0]
    total -= integrate.quad(lambda u: phi(u).real / u, cut, np.inf, weight="sin", wvar=x, limlst=100)[0]
    return float(0.5 + total / math.pi)


def stationary_tail_oracle(
    trunc: Truncation, spec: CovarianceSpec, epsilon: float, radius: float, t: float | None = None
) -> float:
    """``P(||z||_V > R)`` for the linear model at stationarity (or at time ``t`` from 0).

    Each representative mode contributes ``2|k|^2 |z_k|^2`` with
    ``|z_k|^2 ~ eps sigma_k^2 (1 - e^{-2|k|^2 t}) / (2|k|^2) * Exp(1)``.
    """
    ri, rj = trunc.rep_index
    lam = trunc.ksq[ri, rj]
    s2 = sigma_array(spec, trunc)[ri, rj] ** 2
    w = epsilon * s2
    if t is not None:
        w = w * (-np.expm1(-2 * lam * t))
    return weighted_exponential_tail(w, radius * radius)


def radius_for_tail(trunc: Truncation, spec: CovarianceSpec, epsilon: float, level: float) -> float:
    """Radius ``R`` with linear-model stationary tail ``P(||z||_V > R) = level``."""
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    f = lambda r: stationary_tail_oracle(trunc, spec, epsilon, r) - level
    hi = 1.0
    while f(hi) > 0:
        hi *= 2.0
    return float(optimize.brentq(f, 0.0, hi, xtol=1e-12))


def wilson_interval(p_hat: float, n: float, z: float = 1.96) -> tuple[float, float]:
    if n <= 0:
        return (0.0, 1.0)
    denom = 1 + z * z / n
    centre = (p_hat + z * z / (2 * n)) / denom
    half = z * math.sqrt(p_hat * (1 - p_hat) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def _proportion(per_traj_fraction: np.ndarray, snapshots: float) -> dict:
    est = Estimate.from_samples(per_traj_fraction)
    n_traj = len(per_traj_fraction)
    p = est.estimate
    if 0 < p < 1 and est.std_error > 0:
        n_eff = min(max(p * (1 - p) / est.std_error**2, n_traj), n_traj * snapshots)
    else:
        n_eff = n_traj * snapshots
    lo, hi = wilson_interval(p, n_eff)
    return {"p_hat": p, "std_error": est.std_error, "n_eff": n_eff, "wilson": (lo, hi), "censored": p == 0.0}


def tail_probability(plan: ExperimentPlan, radii) -> dict:
    """Estimate ``nu_eps(||x||_V > R)`` for each epsilon and radius.

    Zero-hit cells are reported with ``censored=True`` and the Wilson upper
    bound.  For every epsilon, ``-eps log p`` is fitted linearly against
    ``R^2`` over uncensored radii.
    """
    radii = sorted(float(r) for r in radii)
    rows = []
    for eps in plan.epsilon_list:
        spec = plan.spec(eps)
        res = _stationary_run(plan, eps, radii_v=radii)
        cnt = res["count"]
        cells = []
        for i, r in enumerate(radii):
            cell = _proportion(res[f"exceed_v_{i}"] / cnt, float(np.mean(cnt)))
            cell["R"] = r
            if cell["p_hat"] * cell["n_eff"] < 10:
                log.warning("eps=%g R=%g: fewer than 10 expected hits", eps, r)
            if not plan.nonlinear:
                cell["oracle"] = stationary_tail_oracle(plan.trunc, spec, eps, r)
            cells.append(cell)
        good = [c for c in cells if not c["censored"]]
        fit = None
        if len(good) >= 2:
            x = np.array([c["R"] ** 2 for c in good])
            y = np.array([-eps * math.log(c["p_hat"]) for c in good])
            slope, intercept = np.polyfit(x, y, 1)
            fit = {"slope": float(slope), "intercept": float(intercept), "rate": y.tolist(), "R2": x.tolist()}
        rows.append({"epsilon": eps, "delta": spec.delta, "cells": cells, "fit": fit})
    return {"per_epsilon": rows, "hypotheses": plan.hypotheses()}


# ---------------------------------------------------------------------------
# Path ball probabilities


def ball_probability(plan: ExperimentPlan, target: np.ndarray, delta: float, action: float | None = None,
                     x0: np.ndarray | None = None) -> dict:
    """Estimate ``P(sup_t ||u_eps(t) - phi(t)||_H < delta)``.

    ``target`` holds ``phi`` at every solver step (shape ``(n_steps+1, W, W)``);
    trajectories start from ``target[0]`` unless ``x0`` is given.  If
    ``action`` is given, ``-eps log P`` is regressed on it across epsilons.
    """
    target = np.asarray(target, dtype=complex)
    n_steps = len(target) - 1
    if n_steps != plan.solver.n_steps:
        raise ValueError(f"target has {n_steps} steps, solver expects {plan.solver.n_steps}")
    start = target[0] if x0 is None else x0
    rows = []
    for eps in plan.epsilon_list:

        def make(ids):
            worst = np.zeros(len(ids))

            def observe(a, j, _t):
                d = sobolev_norm(a - target[j], plan.trunc, 0.0)
                np.maximum(worst, d, out=worst)

            return observe, lambda: {"sup": worst}

        res = run_ensemble(plan, eps, n_steps, make, x0=start)
        hits = (res["sup"] < delta).astype(float)
        cell = _proportion(hits, 1.0)
        cell["epsilon"] = eps
        cell["rate"] = -eps * math.log(cell["p_hat"]) if cell["p_hat"] > 0 else None
        rows.append(cell)
    out = {"per_epsilon": rows, "delta": delta, "action": action}
    rates = [(r["epsilon"], r["rate"]) for r in rows if r["rate"] is not None]
    if action is not None and rates:
        out["rate_over_action"] = [r / action if action > 0 else None for _, r in rates]
    return out


def uniformity_probe(plan: ExperimentPlan, starts: list[SpectralField], controls: np.ndarray,
                     delta: float) -> dict:
    """Ball probabilities around ``v^y`` (the controlled path from each start ``y``).

    Reports, per epsilon, the spread of estimates across starts and the
    ratio of final-state separation to initial separation for the target
    paths themselves.
    """
    tr = plan.trunc
    if len(controls) != plan.solver.n_steps:
        raise ValueError("controls must cover every solver step")
    a0 = np.array([y.coeffs for y in starts])
    _, paths = replay_controls(a0, controls, plan.solver.dt, tr, plan.solver.scheme, plan.nonlinear, keep=True)
    paths = np.moveaxis(paths, 1, 0)  # (start, time, W, W)
    per_start = [ball_probability(plan, paths[i], delta) for i in range(len(starts))]
    spread = []
    for j, eps in enumerate(plan.epsilon_list):
        ps = [ps_["per_epsilon"][j]["p_hat"] for ps_ in per_start]
        rates = [ps_["per_epsilon"][j]["rate"] for ps_ in per_start]
        finite = [r for r in rates if r is not None]
        spread.append({
            "epsilon": eps,
            "p_min": min(ps),
            "p_max": max(ps),
            "p_spread": max(ps) - min(ps),
            "rate_spread": (max(finite) - min(finite)) if finite else None,
        })
    separation = []
    for i in range(len(starts)):
        for j in range(i + 1, len(starts)):
            d0 = float(sobolev_norm(a0[i] - a0[j], tr, 0.0))
            d1 = float(np.max(sobolev_norm(paths[i] - paths[j], tr, 0.0)))
            separation.append({"initial": d0, "sup_path": d1, "ratio": d1 / d0 if d0 > 0 else 0.0})
    return {"spread": spread, "per_start": per_start, "separation": separation}


def linear_ball_oracle(
    trunc: Truncation,
    spec: CovarianceSpec,
    epsilon: float,
    dt: float,
    target: np.ndarray,
    delta: float,
    n_samples: int,
    seed: int = 0,
    stream: int = 7,
    chunk: int = 5000,
) -> Estimate:
    """Ball probability for the linear model, sampled mode by mode.

    Writes ``u = e^{-tA} u(0) + z`` with ``z`` the OU convolution from 0 and
    samples ``z`` exactly on the grid, independent of the solver.  Use a
    sample count well above the Monte-Carlo run it is checked against.
    """
    target = np.asarray(target, dtype=complex)
    n_steps = len(target) - 1
    lam = trunc.ksq
    times = dt * np.arange(n_steps + 1)
    mean = np.exp(-lam[None] * times[:, None, None]) * target[0][None]
    offset = mean - target
    decay, var = ou_transition(trunc, spec, epsilon, dt)
    src = RngStream(seed, stream)
    n_rep = len(trunc.rep_index[0])
    hits = []
    for lo in range(0, n_samples, chunk):
        ids = np.arange(lo, min(lo + chunk, n_samples))
        z = np.zeros((len(ids),) + trunc.shape, dtype=complex)
        worst = sobolev_norm(z + offset[0], trunc, 0.0)
        for j in range(n_steps):
            g = src.complex_normals(ids, j, n_rep)
            z = decay * z + noise_from_normals(trunc, np.sqrt(var), g)
            np.maximum(worst, sobolev_norm(z + offset[j + 1], trunc, 0.0), out=worst)
        hits.append(worst < delta)
    return Estimate.from_samples(np.concatenate(hits).astype(float))


def default_burn_in(radius: float, n_samples: int = 20, trunc: Truncation | None = None, seed: int = 0) -> float:
    """Five times the time for unforced solutions from ``B_H(0, r)`` to reach ``B_H(0, r/100)``."""
    return 5.0 * decay_time(radius, 0.01 * radius, n_samples, trunc=trunc, seed=seed)


def held_outside_growth(
    trunc: Truncation,
    lam: float,
    horizons,
    nodes_per_unit: int = 40,
    nonlinear: bool = True,
) -> dict:
    """Empirical growth of the least action among paths that start and end on
    the sphere ``||u||_H = lam`` and stay outside ``B_H(0, lam)``.

    For each horizon ``T`` two candidates are evaluated: the steady path
    parked on the slowest mode, and the action minimiser between two
    orthogonal points of the sphere (kept only if it stays outside the ball).
    The fitted slope of the minimum against ``T`` is the quantity an ``N``
    large enough must exceed; no particular ``N`` is asserted.
    """
    n = trunc.n_max
    e1 = np.zeros(trunc.shape, dtype=complex)
    e1[n + 1, n], e1[n - 1, n] = lam / math.sqrt(2), -lam / math.sqrt(2)
    e2 = np.zeros(trunc.shape, dtype=complex)
    e2[n, n + 1], e2[n, n - 1] = lam / math.sqrt(2), -lam / math.sqrt(2)
    x0, x1 = SpectralField(e1, trunc), SpectralField(e2, trunc)
    rows = []
    for T in horizons:
        n_nodes = max(int(round(T * nodes_per_unit)) + 1, 3)
        steady = DiscretePath(np.linspace(0, T, n_nodes), np.repeat(e1[None], n_nodes, axis=0), trunc)
        parked = action_IT(steady, nonlinear).value
        path, res = minimize_action(x1, T, n_nodes, x_start=x0, nonlinear=nonlinear)
        min_norm = float(np.min(path.norms(0.0)))
        candidates = [parked] + ([res.value] if min_norm >= lam * (1 - 1e-9) else [])
        rows.append({"T": float(T), "parked": parked, "minimiser": res.value,
                     "minimiser_min_norm": min_norm, "least": min(candidates)})
    ts = np.array([r["T"] for r in rows])
    least = np.array([r["least"] for r in rows])
    slope = float(np.polyfit(ts, least, 1)[0]) if len(rows) > 1 else float("nan")
    return {"lam": lam, "rows": rows, "growth_slope": slope}


# ---------------------------------------------------------------------------
# Run records


SCHEMA_VERSION = 1


def code_version() -> str:
    from . import __version__

    return __version__


def _to_jsonable(obj):
    if isinstance(obj, Estimate):
        return {"estimate": obj.estimate, "std_error": obj.std_error, "n_samples": obj.n_samples,
                **({"extra": _to_jsonable(obj.extra)} if obj.extra else {})}
    if isinstance(obj, dict):
        return {str(k): _to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _to_jsonable(obj.tolist())
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj


@dataclass
class RunRecord:
    """Everything needed to rerun an experiment plus what it produced."""

    kind: str
    plan: dict
    estimates: dict
    wall_ms: float
    code_version: str = field(default_factory=code_version)
    schema_version: int = SCHEMA_VERSION

    def to_json(self) -> str:
        return json.dumps(_to_jsonable(asdict(self)), sort_keys=True, allow_nan=True)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls(**json.loads(text))

    @staticmethod
    def encode_plan(plan: ExperimentPlan) -> dict:
        d = plan.describe()
        d["workers"] = plan.workers
        d["x0"] = None if plan.x0 is None else [[c.real, c.imag] for c in plan.x0.coeffs.ravel()]
        return d

    @staticmethod
    def decode_plan(d: dict) -> ExperimentPlan:
        tr = Truncation(d["n_max"], d["grid_size"])
        x0 = None
        if d.get("x0") is not None:
            c = np.array([complex(re, im) for re, im in d["x0"]]).reshape(tr.shape)
            x0 = SpectralField(c, tr)
        return ExperimentPlan(
            epsilon_list=list(d["epsilon_list"]),
            trunc=tr,
            solver=SolverConfig(**d["solver"]),
            schedule=NoiseSchedule(**d["schedule"]),
            beta=d["beta"],
            trajectories=d["trajectories"],
            burn_in=d["burn_in"],
            seed=d["seed"],
            x0=x0,
            nonlinear=d["nonlinear"],
            sample_every=d["sample_every"],
            workers=d.get("workers", 1),
            chunk_size=d["chunk_size"],
        )


def timed(fn, *args, **kwargs):
    t0 = time.perf_counter()
    out = fn(*args, **kwargs)
    return out, 1000.0 * (time.perf_counter() - t0)
