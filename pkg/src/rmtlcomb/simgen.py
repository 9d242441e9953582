"""Simulation scenarios and the Monte Carlo driver for size and power.

Four data-generating situations for two groups, all with the event of
interest reaching cumulative incidence ``p1`` at infinity:

A   identical CIFs ``p1 (1 - exp(-t))``.
B   proportional subdistribution hazards with log ratio ``beta``.
C   piecewise Weibull CIFs, equal before t = 2 and different after.
D   piecewise Weibull CIFs, different before t = 2 and equal after.

Censoring times are uniform on ``(0, bound)`` per group, with the bound
solved so that the expected censored fraction hits the target.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
import time as _time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import integrate, optimize

from . import _kernels
from .estimators import Sample, select_tau
from .inference import combine, diff_star_test, permuted_labels, rmst_diff_test

log = logging.getLogger(__name__)

SCENARIOS = ("A", "B", "C", "D")
CORE_METHODS = ("Gray", "Diff", "PComb", "FComb", "TComb")
EXTENDED_METHODS = ("DiffStar", "RMSTi", "RMSTc")
CENSORING_LEVELS = (0.0, 0.15, 0.30, 0.45, 0.60)
SAMPLE_SIZES = ((50, 50), (100, 100), (150, 150), (50, 100), (50, 150), (50, 200))
DEFAULT_BETA = math.log(2.0)

# Weibull shape before/after t = 2 for (scenario, group)
_SHAPES = {
    ("C", 1): (2.0, 0.1),
    ("C", 2): (2.0, 4.0),
    ("D", 1): (0.1, 2.0),
    ("D", 2): (4.0, 2.0),
}
_KNEE = 1.0 - math.exp(-1.0)  # conditional CDF value at t = 2


@dataclass(frozen=True)
class ScenarioConfig:
    """One cell of the simulation design."""

    scenario: str = "A"
    n1: int = 50
    n2: int = 50
    target_censoring: float = 0.0
    p1: float = 0.7
    beta: float | None = None
    replications: int = 5000
    permutations: int = 200
    alpha: float = 0.05
    seed: int = 2020
    extended: bool = False
    fixed_tau: bool = False

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.scenario == "B":
            if self.beta is None:
                object.__setattr__(self, "beta", DEFAULT_BETA)
        elif self.beta is not None:
            raise ValueError("beta applies to scenario B only")
        if self.n1 < 1 or self.n2 < 1:
            raise ValueError("group sizes must be positive")
        if not 0.0 <= self.target_censoring < 0.9:
            raise ValueError("target censoring must lie in [0, 0.9)")
        if not 0.0 < self.p1 < 1.0:
            raise ValueError("p1 must lie in (0, 1)")
        if self.replications < 1 or self.permutations < 1:
            raise ValueError("replications and permutations must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")

    @property
    def methods(self) -> tuple[str, ...]:
        return CORE_METHODS + (EXTENDED_METHODS if self.extended else ())

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "ScenarioConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = set(data) - set(names)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**{k: _coerce(names[k], v) for k, v in data.items()})

    @classmethod
    def from_file(cls, path) -> "ScenarioConfig":
        """Read ``key = value`` lines (``#`` comments allowed) or a JSON object."""
        text = Path(path).read_text()
        if text.lstrip().startswith("{"):
            return cls.from_dict(json.loads(text))
        data = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"line {lineno}: expected key = value")
            key, value = (s.strip() for s in line.split("=", 1))
            data[key] = value
        return cls.from_dict(data)


def _coerce(f: dataclasses.Field, value):
    if not isinstance(value, str):
        return value
    kind = str(f.type)
    if value.lower() in ("none", "null", ""):
        return None
    if "bool" in kind:
        return value.lower() in ("1", "true", "yes", "on")
    if "int" in kind:
        return int(value)
    if "float" in kind:
        return float(value)
    return value


# -- event-time laws ---------------------------------------------------------


def _theta(scenario, group, beta):
    return math.exp(beta) if scenario == "B" and group == 2 else 1.0


def interest_probability(scenario: str, group: int, p1: float = 0.7, beta: float | None = None) -> float:
    """``I_1(inf)`` for the group, i.e. the chance of the event of interest."""
    theta = _theta(scenario, group, beta or 0.0)
    return 1.0 - (1.0 - p1) ** theta


def cif(scenario: str, group: int, t, event: int = 1, p1: float = 0.7, beta: float | None = None):
    """Analytic cumulative incidence of ``event`` at times ``t``."""
    t = np.asarray(t, dtype=float)
    if scenario in ("A", "B"):
        theta = _theta(scenario, group, beta or 0.0)
        if event == 1:
            return 1.0 - (1.0 - p1 * (1.0 - np.exp(-t))) ** theta
        return (1.0 - p1) ** theta * (1.0 - np.exp(-t * theta))
    early, late = _SHAPES[(scenario, group)]
    shape = np.where(t <= 2.0, early, late)
    base = 1.0 - np.exp(-((t / 2.0) ** shape))
    return (p1 if event == 1 else 1.0 - p1) * base


def survival(scenario: str, group: int, t, p1: float = 0.7, beta: float | None = None):
    """Probability of being free of both events at ``t``."""
    return 1.0 - cif(scenario, group, t, 1, p1, beta) - cif(scenario, group, t, 2, p1, beta)


def draw_events(scenario: str, group: int, size: int, p1: float, beta: float | None, rng):
    """Event times and types by inverse CDF of each type's conditional law."""
    u_type = rng.random(size)
    u_time = rng.random(size)
    pi1 = interest_probability(scenario, group, p1, beta)
    etype = np.where(u_type < pi1, 1, 2)
    if scenario == "A" or (scenario == "B" and group == 1):
        t = -np.log1p(-u_time)
    elif scenario == "B":
        theta = math.exp(beta)
        # type 1: solve I_1(t) = u * I_1(inf); type 2: exponential, rate theta
        inner = 1.0 - (1.0 - u_time * pi1) ** (1.0 / theta)
        t1 = -np.log1p(-inner / p1)
        t2 = -np.log1p(-u_time) / theta
        t = np.where(etype == 1, t1, t2)
    else:
        early, late = _SHAPES[(scenario, group)]
        shape = np.where(u_time <= _KNEE, early, late)
        t = 2.0 * (-np.log1p(-u_time)) ** (1.0 / shape)
    return t, etype


def sample_event(scenario: str, group: int, config: ScenarioConfig, rng) -> tuple[float, int]:
    t, j = draw_events(scenario, group, 1, config.p1, config.beta, rng)
    return float(t[0]), int(j[0])


# -- censoring ---------------------------------------------------------------


def censoring_rate(scenario: str, group: int, bound: float, p1: float = 0.7, beta: float | None = None) -> float:
    """``P(T > C)`` for ``C ~ U(0, bound)``: the mean of ``S`` over ``(0, bound)``."""
    if not np.isfinite(bound):
        return 0.0
    points = [2.0] if scenario in ("C", "D") and bound > 2.0 else None
    area, _ = integrate.quad(
        lambda t: float(survival(scenario, group, t, p1, beta)), 0.0, bound, points=points, limit=200
    )
    return area / bound


@lru_cache(maxsize=None)
def _solve_bound(scenario, group, target, p1, beta):
    if target == 0.0:
        return math.inf
    if not 0.0 < target < 0.9:
        raise ValueError(f"censoring target {target} unattainable")
    hi = 1.0
    while censoring_rate(scenario, group, hi, p1, beta) > target:
        hi *= 2.0
        if hi > 1e8:
            raise ValueError(f"censoring target {target} unattainable")
    lo = hi / 2.0
    while censoring_rate(scenario, group, lo, p1, beta) < target:
        lo /= 2.0
        if lo < 1e-12:
            raise ValueError(f"censoring target {target} unattainable")
    return optimize.brentq(
        lambda b: censoring_rate(scenario, group, b, p1, beta) - target, lo, hi, xtol=1e-10, rtol=1e-12
    )


def calibrate_censoring_bound(scenario: str, group: int, config: ScenarioConfig, target: float | None = None) -> float:
    """Upper limit of the uniform censoring law giving the target rate.

    Returns ``inf`` (no censoring) for a zero target.
    """
    target = config.target_censoring if target is None else float(target)
    beta = config.beta if scenario == "B" else None
    return _solve_bound(scenario, group, round(target, 12), config.p1, beta)


def simulate_dataset(config: ScenarioConfig, rng, bounds: tuple[float, float] | None = None) -> Sample:
    """Both groups' observed times ``min(T, C)`` and statuses."""
    if bounds is None:
        bounds = tuple(calibrate_censoring_bound(config.scenario, g, config) for g in (1, 2))
    times, statuses = [], []
    for g, size in ((1, config.n1), (2, config.n2)):
        t, j = draw_events(config.scenario, g, size, config.p1, config.beta, rng)
        if np.isfinite(bounds[g - 1]):
            c = bounds[g - 1] * (1.0 - rng.random(size))
            status = np.where(t <= c, j, 0)
            t = np.minimum(t, c)
        else:
            status = j
        times.append(t)
        statuses.append(status)
    group = np.repeat([1, 2], [config.n1, config.n2])
    return Sample(np.concatenate(times), np.concatenate(statuses), group)


# -- Monte Carlo -------------------------------------------------------------


@dataclass
class MonteCarloReport:
    config: ScenarioConfig
    rejection_rate: dict
    valid_replicates: int
    regenerated: int = 0
    mean_abs_deviation: dict = field(default_factory=dict)
    wall_time: float = 0.0
    censoring_bounds: tuple = (math.inf, math.inf)
    realized_censoring: float = 0.0
    warnings: list = field(default_factory=list)

    def mc_stderr(self, method: str) -> float:
        r = self.rejection_rate[method]
        return math.sqrt(r * (1.0 - r) / self.valid_replicates)

    def to_tsv(self) -> str:
        lines = ["method\trejection_rate\tmc_stderr"]
        for m, r in self.rejection_rate.items():
            lines.append(f"{m}\t{r:.4f}\t{self.mc_stderr(m):.4f}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "rejection_rate": dict(self.rejection_rate),
            "mc_stderr": {m: self.mc_stderr(m) for m in self.rejection_rate},
            "valid_replicates": self.valid_replicates,
            "regenerated": self.regenerated,
            "mean_abs_deviation": dict(self.mean_abs_deviation),
            "wall_time": self.wall_time,
            "censoring_bounds": [_json_float(b) for b in self.censoring_bounds],
            "realized_censoring": self.realized_censoring,
            "warnings": list(self.warnings),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "MonteCarloReport":
        return cls(
            config=ScenarioConfig.from_dict(data["config"]),
            rejection_rate=dict(data["rejection_rate"]),
            valid_replicates=data["valid_replicates"],
            regenerated=data.get("regenerated", 0),
            mean_abs_deviation=dict(data.get("mean_abs_deviation", {})),
            wall_time=data.get("wall_time", 0.0),
            censoring_bounds=tuple(math.inf if b is None else b for b in data["censoring_bounds"]),
            realized_censoring=data.get("realized_censoring", 0.0),
            warnings=list(data.get("warnings", [])),
        )


def _json_float(x):
    return None if not np.isfinite(x) else float(x)


def _replicate_seeds(seed: int, rep: int):
    data_ss, perm_ss = np.random.SeedSequence(seed, spawn_key=(rep,)).spawn(2)
    return np.random.default_rng(data_ss), np.random.default_rng(perm_ss)


def _one_replicate(config: ScenarioConfig, rep: int, bounds, gray_only: bool = False):
    """Rejection indicators for one replicate, regenerating unusable data.

    Returns ``(decisions, attempts, censored_fraction)``.
    """
    data_rng, perm_rng = _replicate_seeds(config.seed, rep)
    alpha = config.alpha
    for attempt in range(1, 101):
        sample = simulate_dataset(config, data_rng, bounds)
        try:
            tau = select_tau(sample)
        except ValueError:
            continue
        censored = float(np.mean(sample.status == 0))
        obs = sample.group.astype(np.int8)[None, :]
        if gray_only:
            row = _kernels.evaluate_rows(sample.time, sample.status, obs, tau)[0]
            p = row[_kernels.GRAY_P]
            if not np.isfinite(p):
                continue
            return {"Gray": p <= alpha}, attempt, censored
        perms = permuted_labels(sample, config.permutations, perm_rng)
        tau_perm = tau if config.fixed_tau else -1.0
        if config.fixed_tau:
            table = np.vstack(
                (
                    _kernels.evaluate_rows(sample.time, sample.status, obs, tau),
                    _kernels.evaluate_rows(sample.time, sample.status, perms, tau_perm),
                )
            )
        else:
            table = _kernels.evaluate_rows(sample.time, sample.status, np.vstack((obs, perms)), -1.0)
        try:
            res = combine(table[:, _kernels.GRAY_P], table[:, _kernels.DIFF_P], alpha)
        except ValueError:
            continue
        out = {
            "Gray": table[0, _kernels.GRAY_P] <= alpha,
            "Diff": table[0, _kernels.DIFF_P] <= alpha,
            "PComb": res.pcomb <= alpha,
            "FComb": res.fcomb <= alpha,
            "TComb": res.tcomb <= alpha,
        }
        if config.extended:
            try:
                out["DiffStar"] = diff_star_test(sample, tau, alpha).p_value <= alpha
                out["RMSTi"] = rmst_diff_test(sample, tau, alpha, "interest").p_value <= alpha
                out["RMSTc"] = rmst_diff_test(sample, tau, alpha, "composite").p_value <= alpha
            except ValueError:
                continue
        return out, attempt, censored
    raise RuntimeError(f"replicate {rep}: no usable dataset after 100 attempts")


def _run(config: ScenarioConfig, methods, n_jobs: int, gray_only: bool):
    bounds = tuple(calibrate_censoring_bound(config.scenario, g, config) for g in (1, 2))
    reps = range(config.replications)

    def chunk(idx):
        return [_one_replicate(config, r, bounds, gray_only) for r in idx]

    if n_jobs > 1:
        parts = np.array_split(np.arange(config.replications), n_jobs)
        with ThreadPoolExecutor(n_jobs) as pool:
            results = [x for part in pool.map(chunk, parts) for x in part]
    else:
        results = chunk(reps)
    decisions = np.array([[res[m] for m in methods] for res, _, _ in results], dtype=bool)
    regenerated = sum(a - 1 for _, a, _ in results)
    censored = float(np.mean([c for _, _, c in results]))
    return decisions, regenerated, censored, bounds


def run_monte_carlo(config: ScenarioConfig, n_jobs: int = 1) -> MonteCarloReport:
    """Rejection rates of every method over ``config.replications`` datasets.

    Replicate ``r`` draws its data and permutations from generators seeded
    by ``(config.seed, r)``, so results do not depend on ``n_jobs``.
    """
    start = _time.perf_counter()
    methods = config.methods
    decisions, regenerated, censored, bounds = _run(config, methods, n_jobs, gray_only=False)
    rates = {m: float(decisions[:, i].mean()) for i, m in enumerate(methods)}
    warn = []
    frac = regenerated / config.replications
    if frac > 0.10:
        raise RuntimeError(f"{regenerated} replicates regenerated ({frac:.1%})")
    if frac > 0.01:
        warn.append(f"{regenerated} replicates regenerated ({frac:.1%})")
        log.warning(warn[-1])
    report = MonteCarloReport(
        config=config,
        rejection_rate=rates,
        valid_replicates=int(decisions.shape[0]),
        regenerated=regenerated,
        wall_time=_time.perf_counter() - start,
        censoring_bounds=bounds,
        realized_censoring=censored,
        warnings=warn,
    )
    if config.scenario == "A":
        report.mean_abs_deviation = {m: abs(r - config.alpha) for m, r in rates.items()}
    return report


def gray_power(config: ScenarioConfig, n_jobs: int = 1) -> float:
    """Rejection rate of Gray's test alone (no permutations needed)."""
    decisions, *_ = _run(config, ("Gray",), n_jobs, gray_only=True)
    return float(decisions.mean())


def calibrate_beta(
    target_power: float = 0.795,
    n1: int = 50,
    n2: int = 50,
    censoring: float = 0.0,
    replications: int = 5000,
    seed: int = 2020,
    tol: float = 0.005,
    bracket: tuple[float, float] = (0.0, 3.0),
    max_iter: int = 30,
) -> tuple[float, float]:
    """Scenario-B log ratio whose Gray power matches ``target_power``.

    Bisection with common random numbers across evaluations. Returns
    ``(beta, achieved_power)``.
    """

    def power(beta):
        cfg = ScenarioConfig("B", n1, n2, censoring, beta=beta, replications=replications, seed=seed)
        return gray_power(cfg)

    lo, hi = bracket
    best = (hi, power(hi))
    if best[1] < target_power:
        raise ValueError("target power not reached inside the bracket")
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        p = power(mid)
        if abs(p - target_power) < abs(best[1] - target_power):
            best = (mid, p)
        if abs(p - target_power) <= tol:
            return mid, p
        if p < target_power:
            lo = mid
        else:
            hi = mid
    return best


def summarize_deviation(reports) -> dict:
    """Mean absolute deviation of each method's rate from its nominal level."""
    reports = list(reports)
    if not reports:
        raise ValueError("empty input")
    if any(r.config.scenario != "A" for r in reports):
        raise ValueError("deviation summaries apply to null (scenario A) cells only")
    methods = reports[0].rejection_rate.keys()
    return {
        m: float(np.mean([abs(r.rejection_rate[m] - r.config.alpha) for r in reports]))
        for m in methods
    }


def run_grid(
    scenario: str,
    sizes=SAMPLE_SIZES,
    censoring=CENSORING_LEVELS,
    n_jobs: int = 1,
    **overrides,
) -> list[MonteCarloReport]:
    """Every (group sizes x censoring) cell of one scenario's table."""
    reports = []
    for n1, n2 in sizes:
        for c in censoring:
            cfg = ScenarioConfig(scenario, n1, n2, c, **overrides)
            reports.append(run_monte_carlo(cfg, n_jobs))
            log.info("scenario %s n=%d/%d censoring=%.2f done", scenario, n1, n2, c)
    return reports


def format_grid(reports) -> str:
    """Tab-separated table, one row per cell, in the published layout."""
    methods = reports[0].config.methods
    lines = ["n1\tn2\tcensoring\t" + "\t".join(methods)]
    for r in reports:
        c = r.config
        cells = "\t".join(f"{r.rejection_rate[m]:.4f}" for m in methods)
        lines.append(f"{c.n1}\t{c.n2}\t{c.target_censoring:.2f}\t{cells}")
    return "\n".join(lines) + "\n"
