"""Exact stochastic simulation of reaction networks, deterministic
integration, ensemble statistics, and Bhattacharyya distances between the
observable distributions of an original and a reduced system.

The simulator is the direct method: two uniform draws per event, one for the
exponential waiting time and one for the reaction choice.  Random streams are
counter-based (Philox, keyed by ``[seed, tag << 32 | run_index]``), so every
run of an ensemble is an independent, reproducible stream and ensembles are
embarrassingly parallel in principle.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as rexpr
from . import kappa
from .kappa import KappaError
from .reduce import ReductionConfig, detect_enzymatic, reduce_all
from .semantics import (
    Closed,
    KappaSystem,
    MassAction,
    ReactionNetwork,
    Rule,
    expand,
    ode_rhs,
)


class SimulationError(KappaError):
    """A run aborted: non-finite or negative propensity, or stiffness."""


@dataclass
class SimConfig:
    t_end: float
    sample_grid: list[float]
    n_runs: int = 1
    seed: int = 0
    volume: float = 1.0
    max_species: int = 1000
    max_reactions: int = 5000

    def __post_init__(self):
        if self.n_runs < 1:
            raise ValueError("n_runs must be >= 1")
        if self.volume <= 0:
            raise ValueError("volume must be positive")
        grid = list(self.sample_grid)
        if grid != sorted(grid) or (grid and (grid[0] < 0 or grid[-1] > self.t_end)):
            raise ValueError("sample_grid must be sorted and within [0, t_end]")
        self.sample_grid = grid

    @classmethod
    def on_grid(cls, t_end: float, points: int, **kw) -> "SimConfig":
        return cls(t_end, list(np.linspace(0.0, t_end, points)), **kw)


@dataclass
class Trajectory:
    times: np.ndarray
    states: np.ndarray  # (n_grid, n_species), last state before each grid time


def stream(seed: int, tag: int, run_index: int) -> np.random.Generator:
    """Independent Philox stream for (seed, tag, run_index)."""
    mask = (1 << 64) - 1
    key = np.array([seed & mask, ((tag << 32) | run_index) & mask], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


# --- propensity compilation -----------------------------------------------------


def _expr_source(e: rexpr.RateExpr, index: dict[str, int], constants: dict[str, float]) -> str:
    if isinstance(e, rexpr.Num):
        return repr(e.value)
    if isinstance(e, rexpr.Const):
        if e.name not in constants:
            raise SimulationError(f"unbound constant {e.name!r} in rate law")
        return repr(constants[e.name])
    if isinstance(e, rexpr.SpeciesVar):
        i = index.get(e.key)
        return "0.0" if i is None else f"x[{i}]"
    if isinstance(e, rexpr.Sqrt):
        return f"sqrt({_expr_source(e.arg, index, constants)})"
    a = _expr_source(e.left, index, constants)
    b = _expr_source(e.right, index, constants)
    return f"({a} {e.op} {b})"


def compile_propensities(net: ReactionNetwork):
    """Build a specialized ``props(x, out)`` evaluator for the network."""
    index = {sp.key: i for i, sp in enumerate(net.species)}
    lines = ["def props(x, out):"]
    if not net.reactions:
        lines.append("    pass")
    for j, rx in enumerate(net.reactions):
        if isinstance(rx.law, MassAction):
            terms = [repr(rx.law.k)]
            for i, a in sorted(rx.consume.items()):
                for step in range(a):
                    terms.append(f"x[{i}]" if step == 0 else f"(x[{i}] - {step})")
                if a > 1:
                    terms.append(repr(1.0 / math.factorial(a)))
            body = " * ".join(terms)
            guards = [f"x[{i}] >= {a}" for i, a in sorted(rx.consume.items()) if a > 1]
        else:
            body = _expr_source(rx.law.expr, index, net.constants)
            guards = [f"x[{i}] >= {a}" for i, a in sorted(rx.consume.items())]
        if guards:
            lines.append(f"    out[{j}] = ({body}) if ({' and '.join(guards)}) else 0.0")
        else:
            lines.append(f"    out[{j}] = {body}")
    namespace: dict = {"sqrt": math.sqrt}
    exec(compile("\n".join(lines), "<propensities>", "exec"), namespace)
    return namespace["props"]


# --- exact simulation ---------------------------------------------------------------


def ssa_run(
    net: ReactionNetwork,
    cfg: SimConfig,
    run_index: int = 0,
    tag: int = 0,
    _props=None,
) -> Trajectory:
    """One statistically exact trajectory of the network's CTMC, sampled on
    the configuration grid; deterministic given (seed, tag, run_index)."""
    props = _props or compile_propensities(net)
    rng = stream(cfg.seed, tag, run_index)
    rand = rng.random
    log = math.log
    grid = cfg.sample_grid
    n_grid = len(grid)
    n_rx = len(net.reactions)
    deltas = [sorted(rx.stoich().items()) for rx in net.reactions]
    x = [int(v) for v in net.init_state]
    out = [0.0] * n_rx
    states = np.empty((n_grid, len(x)), dtype=np.int64)
    t = 0.0
    gi = 0
    while gi < n_grid:
        props(x, out)
        total = 0.0
        for v in out:
            total += v
        if not (0.0 <= total < math.inf):
            bad = next((j for j, v in enumerate(out) if not (0.0 <= v < math.inf)), -1)
            raise SimulationError(
                f"run {run_index}: propensity of reaction {bad} "
                f"({net.reactions[bad].source_rule}) is {out[bad]!r} at state {x}"
            )
        if total == 0.0:
            while gi < n_grid:
                states[gi] = x
                gi += 1
            break
        u1 = rand()
        t_next = t + (-log(u1) / total if u1 > 0.0 else math.inf)
        while gi < n_grid and grid[gi] < t_next:
            states[gi] = x
            gi += 1
        if gi == n_grid:
            break
        t = t_next
        r = rand() * total
        acc = 0.0
        j = n_rx - 1
        for k in range(n_rx):
            acc += out[k]
            if r < acc:
                j = k
                break
        for i, dv in deltas[j]:
            x[i] += dv
    return Trajectory(np.array(grid), states)


# --- ensembles ------------------------------------------------------------------


@dataclass
class ObsSeries:
    mean: np.ndarray
    std: np.ndarray
    histograms: list[dict[float, int]]
    values: np.ndarray = field(repr=False)  # (n_runs, n_grid)
    integer_valued: bool = True


@dataclass
class EnsembleSummary:
    times: np.ndarray
    n_runs: int
    observables: dict[str, ObsSeries]

    def to_json(self) -> dict:
        out = {"times": list(map(float, self.times)), "n_runs": self.n_runs, "observables": {}}
        for name, series in self.observables.items():
            out["observables"][name] = {
                "mean": list(map(float, series.mean)),
                "std": list(map(float, series.std)),
                "histograms": [
                    {_num_key(v): c for v, c in sorted(h.items())} for h in series.histograms
                ],
            }
        return out


def _num_key(v: float) -> str:
    return repr(int(v)) if float(v).is_integer() else repr(float(v))


def ensemble(net: ReactionNetwork, cfg: SimConfig, tag: int = 0) -> EnsembleSummary:
    """n_runs independent trajectories with derived per-run streams; per
    observable and grid point: mean, standard deviation, and value histogram."""
    props = compile_propensities(net)
    n_grid = len(cfg.sample_grid)
    values = {obs.name: np.empty((cfg.n_runs, n_grid)) for obs in net.observables}
    weights = [(obs.name, obs.weights, obs.closed) for obs in net.observables]
    for run in range(cfg.n_runs):
        traj = ssa_run(net, cfg, run, tag, _props=props)
        for name, w, closed in weights:
            if w is not None:
                values[name][run] = traj.states @ w
            else:
                env = None
                col = np.empty(n_grid)
                for g in range(n_grid):
                    env = {sp.key: float(traj.states[g, i]) for i, sp in enumerate(net.species)}
                    col[g] = rexpr.evaluate(closed, _zero_default(env), net.constants)
                values[name][run] = col
    observables = {}
    for obs in net.observables:
        vals = values[obs.name]
        hists = []
        for g in range(n_grid):
            hist: dict[float, int] = {}
            for v in vals[:, g]:
                hist[v] = hist.get(v, 0) + 1
            hists.append(hist)
        observables[obs.name] = ObsSeries(
            mean=vals.mean(axis=0),
            std=vals.std(axis=0),
            histograms=hists,
            values=vals,
            integer_valued=obs.weights is not None,
        )
    return EnsembleSummary(np.array(cfg.sample_grid), cfg.n_runs, observables)


class _zero_default(dict):
    def __missing__(self, key):
        return 0.0


# --- distribution distance ----------------------------------------------------------


def bhattacharyya(p: dict, q: dict) -> float:
    """D_B = -ln sum_x sqrt(p(x) q(x)) over the union support; zero iff the
    normalized histograms coincide, infinity on disjoint supports."""
    if not p or not q:
        raise ValueError("empty histogram")
    np_total = float(sum(p.values()))
    nq_total = float(sum(q.values()))
    bc = 0.0
    for key in set(p) | set(q):
        bc += math.sqrt((p.get(key, 0) / np_total) * (q.get(key, 0) / nq_total))
    if bc <= 0.0:
        return math.inf
    return max(0.0, -math.log(min(bc, 1.0)))


def freedman_diaconis_bins(samples_p: np.ndarray, samples_q: np.ndarray) -> tuple[dict, dict]:
    """Histogram two real-valued samples on a shared grid whose width is the
    Freedman-Diaconis choice computed on the pooled sample."""
    pooled = np.concatenate([samples_p, samples_q])
    q75, q25 = np.percentile(pooled, [75, 25])
    width = 2.0 * (q75 - q25) * len(pooled) ** (-1.0 / 3.0)
    if width <= 0.0:
        # degenerate IQR (e.g. one sample is a point mass): fall back to a
        # range-based width so overlapping spreads still compare finitely
        span = float(pooled.max() - pooled.min())
        width = span / max(1.0, math.ceil(math.sqrt(len(pooled))))
    if width <= 0.0:
        return _exact_hist(samples_p), _exact_hist(samples_q)
    lo = float(pooled.min())

    def binned(samples: np.ndarray) -> dict:
        hist: dict[int, int] = {}
        for v in samples:
            b = int(math.floor((v - lo) / width))
            hist[b] = hist.get(b, 0) + 1
        return hist

    return binned(samples_p), binned(samples_q)


def _exact_hist(samples: np.ndarray) -> dict:
    hist: dict[float, int] = {}
    for v in samples:
        hist[v] = hist.get(v, 0) + 1
    return hist


# --- system comparison ----------------------------------------------------------------


@dataclass
class ObsComparison:
    mean_orig: np.ndarray
    std_orig: np.ndarray
    mean_red: np.ndarray
    std_red: np.ndarray
    distance: list[float]

    def time_averaged_distance(self) -> float:
        return float(np.mean(self.distance))


@dataclass
class ComparisonResult:
    times: np.ndarray
    observables: dict[str, ObsComparison]

    def csv_rows(self, name: str) -> list[list]:
        obs = self.observables[name]
        rows = [["time", "mean_orig", "std_orig", "mean_red", "std_red", "bhattacharyya"]]
        for g, t in enumerate(self.times):
            d = obs.distance[g]
            rows.append(
                [
                    float(t),
                    float(obs.mean_orig[g]),
                    float(obs.std_orig[g]),
                    float(obs.mean_red[g]),
                    float(obs.std_red[g]),
                    "inf" if math.isinf(d) else d,
                ]
            )
        return rows


def compare_networks(net_o: ReactionNetwork, net_r: ReactionNetwork, cfg: SimConfig, tag_base: int = 0) -> ComparisonResult:
    names_o = {o.name for o in net_o.observables}
    names_r = {o.name for o in net_r.observables}
    if names_o != names_r:
        odd = names_o ^ names_r
        raise ValueError(f"observables present in only one system: {sorted(odd)}")
    ens_o = ensemble(net_o, cfg, tag=tag_base)
    ens_r = ensemble(net_r, cfg, tag=tag_base + 1)
    out: dict[str, ObsComparison] = {}
    for name in [o.name for o in net_o.observables]:
        so, sr = ens_o.observables[name], ens_r.observables[name]
        exact_bins = so.integer_valued and sr.integer_valued
        distance = []
        for g in range(len(cfg.sample_grid)):
            if exact_bins:
                distance.append(bhattacharyya(so.histograms[g], sr.histograms[g]))
            else:
                hp, hq = freedman_diaconis_bins(so.values[:, g], sr.values[:, g])
                distance.append(bhattacharyya(hp, hq))
        out[name] = ObsComparison(so.mean, so.std, sr.mean, sr.std, distance)
    return ComparisonResult(np.array(cfg.sample_grid), out)


def compare_systems(
    original: KappaSystem,
    reduced: KappaSystem,
    cfg: SimConfig,
    tag_base: int = 0,
) -> ComparisonResult:
    """Expand both systems and compare observable distributions over time;
    the two ensembles use independent stream tags."""
    net_o = expand(original, cfg.max_species, cfg.max_reactions)
    net_r = expand(reduced, cfg.max_species, cfg.max_reactions)
    return compare_networks(net_o, net_r, cfg, tag_base)


# --- deterministic integration ---------------------------------------------------------


def ode_solve(net: ReactionNetwork, z0: np.ndarray, cfg: SimConfig, rel_tol: float = 1e-8) -> np.ndarray:
    """Fixed-step RK4 on the sample grid; the step count doubles until halving
    it changes grid values by less than `rel_tol` relative."""
    grid = np.array(cfg.sample_grid, dtype=float)
    steps = 64
    prev = _rk4(net, np.asarray(z0, dtype=float), grid, steps, cfg.volume)
    for _ in range(16):
        steps *= 2
        cur = _rk4(net, np.asarray(z0, dtype=float), grid, steps, cfg.volume)
        scale = np.maximum(np.abs(cur), 1e-30)
        if float(np.max(np.abs(cur - prev) / scale)) < rel_tol:
            return cur
        prev = cur
    raise SimulationError("RK4 step refinement did not converge; system too stiff")


def _rk4(net: ReactionNetwork, z0: np.ndarray, grid: np.ndarray, total_steps: int, volume: float) -> np.ndarray:
    t_end = grid[-1] if len(grid) else 0.0
    out = np.empty((len(grid), len(z0)))
    z = z0.copy()
    t = 0.0
    gi = 0
    while gi < len(grid) and grid[gi] <= t:
        out[gi] = z
        gi += 1
    if t_end <= 0 or gi == len(grid):
        for g in range(gi, len(grid)):
            out[g] = z
        return out
    h = t_end / total_steps
    for step in range(total_steps):
        k1 = ode_rhs(net, z, volume)
        k2 = ode_rhs(net, z + 0.5 * h * k1, volume)
        k3 = ode_rhs(net, z + 0.5 * h * k2, volume)
        k4 = ode_rhs(net, z + h * k3, volume)
        z = z + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if float(z.min()) < -1e-9:
            raise SimulationError(f"negative concentration at t={t + h:g}; system too stiff for RK4")
        t = (step + 1) * h
        while gi < len(grid) and grid[gi] <= t + 1e-12 * t_end:
            out[gi] = z
            gi += 1
    while gi < len(grid):
        out[gi] = z
        gi += 1
    return out


# --- scaling experiments ----------------------------------------------------------------


@dataclass
class ScalingExperiment:
    factors: list[float]

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.factors, self.factors[1:])):
            raise ValueError("scale factors must be strictly increasing")


@dataclass
class ScalingResult:
    factors: list[float]
    recipe: dict
    averaged_distance: dict[float, dict[str, float]]  # N -> obs -> time-averaged D_B
    comparisons: dict[float, ComparisonResult]

    def monotone_decreasing(self, name: str) -> bool:
        series = [self.averaged_distance[n][name] for n in self.factors]
        return all(b < a for a, b in zip(series, series[1:]))


def rescale_for_limit(sys: KappaSystem, factor: float, rcfg: ReductionConfig | None = None) -> KappaSystem:
    """Scale every detected enzymatic group toward its deterministic limit:
    unbinding and catalytic rates by N, substrate initial counts by N."""
    rcfg = rcfg or ReductionConfig()
    groups, _ = detect_enzymatic(sys, rcfg)
    if not groups:
        raise ValueError("no enzymatic group found; nothing to scale")
    scaled_rules: dict[str, float] = {}
    scaled_species: set[str] = set()
    for group in groups:
        for b in group.branches:
            scaled_rules[b.unbind.name] = factor
            scaled_rules[b.produce.name] = factor
            scaled_species.update(s.key for s in b.substrates)
    rules = [
        Rule(r.name, r.lhs, r.rhs, r.rate * scaled_rules.get(r.name, 1.0), r.origin)
        for r in sys.rules
    ]
    init = {
        sp: int(round(c * factor)) if sp.key in scaled_species else c
        for sp, c in sys.init.items()
    }
    return KappaSystem(sys.signature, rules, init, list(sys.observables), dict(sys.constants))


def scaling_recipe(sys: KappaSystem, rcfg: ReductionConfig | None = None) -> dict:
    rcfg = rcfg or ReductionConfig()
    groups, _ = detect_enzymatic(sys, rcfg)
    return {
        "scaled_rule_rates": sorted(
            {b.unbind.name for g in groups for b in g.branches}
            | {b.produce.name for g in groups for b in g.branches}
        ),
        "scaled_initial_counts": sorted({s.key for g in groups for b in g.branches for s in b.substrates}),
    }


def scaling_experiment(
    sys: KappaSystem,
    exp: ScalingExperiment,
    cfg: SimConfig,
    rcfg: ReductionConfig | None = None,
) -> ScalingResult:
    """For each factor N: rescale, reduce, and compare original vs reduced;
    reports per-observable time-averaged distances across N."""
    rcfg = rcfg or ReductionConfig()
    recipe = scaling_recipe(sys, rcfg)
    averaged: dict[float, dict[str, float]] = {}
    comparisons: dict[float, ComparisonResult] = {}
    for idx, factor in enumerate(exp.factors):
        scaled = rescale_for_limit(sys, factor, rcfg)
        red, _ = reduce_all(scaled, rcfg)
        comp = compare_systems(scaled, red, cfg, tag_base=2 * idx)
        comparisons[factor] = comp
        averaged[factor] = {
            name: obs.time_averaged_distance() for name, obs in comp.observables.items()
        }
    return ScalingResult(list(exp.factors), recipe, averaged, comparisons)
