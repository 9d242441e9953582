"""Two-sample tests for competing-risks data.

Gray's test, the RMTL-difference Z test and three combinations of the two
(minimum P, Fisher, two-stage), plus Z tests on RC and RMST differences.
The combinations are calibrated by permuting group labels.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.stats import norm

from . import _kernels
from .estimators import Sample, aalen_johansen, rc, rmst, rmtl, select_tau

log = logging.getLogger(__name__)

METHODS = ("Gray", "Diff", "PComb", "FComb", "TComb", "DiffStar", "RMSTi", "RMSTc")
P_FLOOR = 1e-300
MAX_INVALID_FRACTION = 0.10


@dataclass(frozen=True)
class Effect:
    point: float
    ci_lower: float
    ci_upper: float
    label: str


@dataclass(frozen=True)
class TestOutcome:
    method: str
    statistic: float
    p_value: float
    effect: Effect | None = None
    meta: dict = field(default_factory=dict)

    __test__ = False  # not a pytest class


@dataclass(frozen=True)
class PermutationPlan:
    """Number of label permutations and the seed that generates them."""

    count: int = 200
    seed: int = 0
    fixed_tau: bool = False
    n_jobs: int = 1

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("permutation count must be >= 1")

    def rng(self) -> np.random.Generator:
        return np.random.default_rng(np.random.SeedSequence(self.seed))


def stage_one_level(alpha: float) -> float:
    """Level for the first stage so the two stages split ``alpha`` evenly."""
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    return 1.0 - math.sqrt(1.0 - alpha)


def _z_outcome(method, delta, var, alpha, label):
    if var <= 0:
        if delta == 0:
            return TestOutcome(method, 0.0, 1.0, Effect(0.0, 0.0, 0.0, label))
        raise ValueError("degenerate variance")
    se = math.sqrt(var)
    z = delta / se
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    half = norm.ppf(1 - alpha / 2) * se
    return TestOutcome(method, z, p, Effect(delta, delta - half, delta + half, label))


def diff_test(sample: Sample, tau: float, alpha: float = 0.05) -> TestOutcome:
    """Z test on the group 1 minus group 2 RMTL difference."""
    sample.require_two_groups()
    est = [rmtl(aalen_johansen(sample.subset(g), 1), tau) for g in (1, 2)]
    delta = est[0].point - est[1].point
    var = est[0].per_subject_variance / est[0].n + est[1].per_subject_variance / est[1].n
    return _z_outcome("Diff", delta, var, alpha, "RMTL difference (group 1 - group 2)")


def diff_star_test(sample: Sample, tau: float, alpha: float = 0.05) -> TestOutcome:
    """Z test on the RC difference (time free of either event)."""
    sample.require_two_groups()
    est = [rc(sample.subset(g), tau) for g in (1, 2)]
    delta = est[0].point - est[1].point
    var = est[0].per_subject_variance / est[0].n + est[1].per_subject_variance / est[1].n
    return _z_outcome("DiffStar", delta, var, alpha, "RC difference (group 1 - group 2)")


def rmst_diff_test(
    sample: Sample, tau: float, alpha: float = 0.05, variant: str = "interest"
) -> TestOutcome:
    """Z test on an RMST difference with Greenwood-type variances.

    ``variant="interest"`` censors competing events; ``"composite"`` counts
    both event types.
    """
    counted = {"interest": (1,), "composite": (1, 2)}.get(variant)
    if counted is None:
        raise ValueError(f"unknown variant {variant!r}")
    sample.require_two_groups()
    est = [rmst(sample.subset(g), tau, counted) for g in (1, 2)]
    delta = est[0].point - est[1].point
    var = est[0].variance_of_point + est[1].variance_of_point
    method = "RMSTi" if variant == "interest" else "RMSTc"
    out = _z_outcome(method, delta, var, alpha, f"{method} difference (group 1 - group 2)")
    if est[0].unstable_variance or est[1].unstable_variance:
        out.meta["unstable_variance"] = True
    return out


def _labels(sample: Sample) -> np.ndarray:
    return sample.group.astype(np.int8)


def gray_test(sample: Sample) -> TestOutcome:
    """Gray's two-sample test of equal cumulative incidence (rho = 0)."""
    sample.require_two_groups()
    if not np.any(sample.status == 1):
        raise ValueError("no events of interest")
    row = _kernels.evaluate_rows(sample.time, sample.status, _labels(sample)[None, :], -1.0)[0]
    u, v, p = row[_kernels.U], row[_kernels.V], row[_kernels.GRAY_P]
    if not np.isfinite(p):
        raise ValueError("degenerate variance")
    stat = u * u / v if v > 0 else 0.0
    return TestOutcome("Gray", stat, float(p), meta={"score": u, "variance": v})


def permuted_labels(sample: Sample, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` uniform relabelings preserving group sizes (row per draw)."""
    rows = np.tile(_labels(sample), (count, 1))
    return rng.permuted(rows, axis=1, out=rows)


def permutation_distribution(
    sample: Sample, statistic: Callable[[Sample], object], plan: PermutationPlan
) -> np.ndarray:
    """Evaluate ``statistic`` on ``plan.count`` label-permuted copies.

    Rows whose evaluation raises ``ValueError`` or ``ArithmeticError`` come
    back as NaN. More than 10% invalid rows is an error.

    Returns
    -------
    ndarray of shape (count, k)
    """
    labels = permuted_labels(sample, plan.count, plan.rng())

    def one(b):
        try:
            return np.atleast_1d(np.asarray(statistic(sample.relabel(labels[b])), dtype=float))
        except (ValueError, ArithmeticError):
            return None

    if plan.n_jobs > 1:
        with ThreadPoolExecutor(plan.n_jobs) as pool:
            results = list(pool.map(one, range(plan.count)))
    else:
        results = [one(b) for b in range(plan.count)]
    width = max((r.size for r in results if r is not None), default=1)
    out = np.full((plan.count, width), np.nan)
    for b, r in enumerate(results):
        if r is not None:
            out[b] = r
    _check_invalid(np.isnan(out).any(axis=1))
    return out


def _check_invalid(invalid: np.ndarray):
    frac = float(np.mean(invalid)) if invalid.size else 0.0
    if frac > MAX_INVALID_FRACTION:
        raise ValueError(f"{frac:.1%} of permutations could not be evaluated")


def component_table(sample: Sample, plan: PermutationPlan, tau: float | None = None) -> np.ndarray:
    """Kernel results for the observed labels (row 0) and each permutation.

    ``tau`` is used for the observed row; permuted rows recompute it unless
    ``plan.fixed_tau`` is set.
    """
    sample.require_two_groups()
    obs = _labels(sample)[None, :]
    perms = permuted_labels(sample, plan.count, plan.rng())
    tau_obs = select_tau(sample) if tau is None else float(tau)
    tau_perm = tau_obs if plan.fixed_tau else -1.0
    head = _kernels.evaluate_rows(sample.time, sample.status, obs, tau_obs)
    if plan.n_jobs > 1:
        chunks = np.array_split(perms, plan.n_jobs)
        with ThreadPoolExecutor(plan.n_jobs) as pool:
            parts = list(
                pool.map(
                    lambda c: _kernels.evaluate_rows(sample.time, sample.status, c, tau_perm),
                    chunks,
                )
            )
        tail = np.vstack(parts)
    else:
        tail = _kernels.evaluate_rows(sample.time, sample.status, perms, tau_perm)
    return np.vstack((head, tail))


@dataclass(frozen=True)
class CombinedPValues:
    pcomb: float
    fcomb: float
    tcomb: float
    min_p: float
    fisher: float
    stage: int
    q_hat: float
    valid_permutations: int
    conditional_permutations: int


def combine(gray_p: np.ndarray, diff_p: np.ndarray, alpha: float) -> CombinedPValues:
    """Permutation P-values of the three combined tests.

    Entry 0 of each array is the observed component P-value; the rest come
    from permuted labels. NaN entries mark invalid permutations.
    """
    gray_p = np.asarray(gray_p, dtype=float)
    diff_p = np.asarray(diff_p, dtype=float)
    g0, d0 = gray_p[0], diff_p[0]
    if not (np.isfinite(g0) and np.isfinite(d0)):
        raise ValueError("component test undefined on the observed sample")
    gb, db = gray_p[1:], diff_p[1:]
    valid = np.isfinite(gb) & np.isfinite(db)
    _check_invalid(~valid)
    gb, db = gb[valid], db[valid]
    nb = gb.size

    m0 = min(g0, d0)
    mb = np.minimum(gb, db)
    pcomb = (1 + np.count_nonzero(mb <= m0)) / (nb + 1)

    f0 = -2.0 * (math.log(max(g0, P_FLOOR)) + math.log(max(d0, P_FLOOR)))
    fb = -2.0 * (np.log(np.maximum(gb, P_FLOOR)) + np.log(np.maximum(db, P_FLOOR)))
    fcomb = (1 + np.count_nonzero(fb >= f0)) / (nb + 1)

    a1 = stage_one_level(alpha)
    cond = gb > a1
    ncond = int(np.count_nonzero(cond))
    if g0 <= a1:
        stage, q_hat, tcomb = 1, float("nan"), g0
    else:
        stage = 2
        q_hat = np.count_nonzero(db[cond] <= d0) / ncond if ncond else 0.0
        tcomb = a1 + q_hat * (1.0 - a1)
    return CombinedPValues(
        float(pcomb), float(fcomb), float(tcomb), m0, f0, stage, float(q_hat), nb, ncond
    )


def _combined(sample, tau, alpha, plan):
    table = component_table(sample, plan, tau)
    return combine(table[:, _kernels.GRAY_P], table[:, _kernels.DIFF_P], alpha), table


def pcomb_test(sample: Sample, tau: float, plan: PermutationPlan, alpha: float = 0.05) -> TestOutcome:
    """Minimum of the Gray and Diff P-values, calibrated by permutation."""
    res, _ = _combined(sample, tau, alpha, plan)
    return TestOutcome(
        "PComb", res.min_p, res.pcomb, meta={"permutations": res.valid_permutations, "seed": plan.seed}
    )


def fcomb_test(sample: Sample, tau: float, plan: PermutationPlan, alpha: float = 0.05) -> TestOutcome:
    """Fisher's ``-2 sum log p`` of the Gray and Diff P-values, by permutation."""
    res, _ = _combined(sample, tau, alpha, plan)
    return TestOutcome(
        "FComb", res.fisher, res.fcomb, meta={"permutations": res.valid_permutations, "seed": plan.seed}
    )


def tcomb_test(sample: Sample, tau: float, plan: PermutationPlan, alpha: float = 0.05) -> TestOutcome:
    """Two-stage test: Gray at level ``1 - sqrt(1 - alpha)``, then Diff.

    In stage two the conditional rejection probability of Diff given a
    non-significant Gray result is estimated from the permutations whose
    Gray P-value exceeds the stage-one level.
    """
    a1 = stage_one_level(alpha)
    res, table = _combined(sample, tau, alpha, plan)
    meta = {
        "stage": res.stage,
        "alpha1": a1,
        "permutations": res.valid_permutations,
        "conditional_permutations": res.conditional_permutations,
        "seed": plan.seed,
    }
    if res.stage == 1:
        # identical to gray_test: same kernel, same row
        return TestOutcome("TComb", float(table[0, _kernels.GRAY_P]), res.tcomb, meta=meta)
    meta["q_hat"] = res.q_hat
    if res.conditional_permutations == 0:
        log.warning("no permutation passed stage one; q_hat set to 0")
        meta["warning"] = "no conditional permutations"
    return TestOutcome("TComb", float(table[0, _kernels.DIFF_P]), res.tcomb, meta=meta)


def combined_tests(
    sample: Sample, tau: float, plan: PermutationPlan, alpha: float = 0.05
) -> dict[str, TestOutcome]:
    """PComb, FComb and TComb from one shared set of permutations."""
    a1 = stage_one_level(alpha)
    res, table = _combined(sample, tau, alpha, plan)
    common = {"permutations": res.valid_permutations, "seed": plan.seed}
    tmeta = dict(common, stage=res.stage, alpha1=a1, conditional_permutations=res.conditional_permutations)
    if res.stage == 2:
        tmeta["q_hat"] = res.q_hat
        if res.conditional_permutations == 0:
            tmeta["warning"] = "no conditional permutations"
    tstat = table[0, _kernels.GRAY_P] if res.stage == 1 else table[0, _kernels.DIFF_P]
    return {
        "PComb": TestOutcome("PComb", res.min_p, res.pcomb, meta=dict(common)),
        "FComb": TestOutcome("FComb", res.fisher, res.fcomb, meta=dict(common)),
        "TComb": TestOutcome("TComb", float(tstat), res.tcomb, meta=tmeta),
    }
