import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from rmtlcomb import _kernels
from rmtlcomb.estimators import Sample, select_tau
from rmtlcomb.inference import (
    PermutationPlan,
    combine,
    combined_tests,
    component_table,
    diff_star_test,
    diff_test,
    fcomb_test,
    gray_test,
    pcomb_test,
    permutation_distribution,
    permuted_labels,
    rmst_diff_test,
    stage_one_level,
    tcomb_test,
)
from rmtlcomb.simgen import ScenarioConfig, simulate_dataset


def scenario_sample(seed, scenario="A", n1=40, n2=40, censoring=0.3, **kw):
    cfg = ScenarioConfig(scenario, n1, n2, censoring, **kw)
    return simulate_dataset(cfg, np.random.default_rng(seed))


def duplicated(seed=1, n=30):
    base = scenario_sample(seed, n1=n, n2=n).subset(1)
    return Sample(
        np.concatenate((base.time, base.time)),
        np.concatenate((base.status, base.status)),
        np.repeat([1, 2], len(base)),
    )


def swapped(s):
    return s.relabel(3 - s.group)


@st.composite
def tied_samples(draw):
    n = draw(st.integers(4, 30))
    t = draw(st.lists(st.integers(1, 8), min_size=n, max_size=n))
    s = draw(st.lists(st.sampled_from([0, 1, 1, 2]), min_size=n, max_size=n))
    g = draw(st.lists(st.sampled_from([1, 2]), min_size=n, max_size=n))
    if len(set(g)) < 2:
        g[0] = 3 - g[0]
    return Sample(np.array(t, float), s, g)


# -- Gray --------------------------------------------------------------------


@settings(max_examples=150, deadline=None)
@given(tied_samples())
def test_gray_score_and_variance_match_oracles(s):
    row = _kernels.evaluate_rows(s.time, s.status, s.group.astype(np.int8)[None, :], -1.0)[0]
    if not np.any(s.status == 1):
        assert np.isnan(row[_kernels.U])
        return
    assert row[_kernels.U] == pytest.approx(oracles.gray_score_ipcw(s), abs=1e-9)
    assert row[_kernels.V] == pytest.approx(oracles.gray_variance(s), rel=1e-9, abs=1e-12)


def test_gray_identical_groups():
    out = gray_test(duplicated())
    assert out.meta["score"] == 0.0 and out.p_value == 1.0


def test_gray_requires_events():
    with pytest.raises(ValueError):
        gray_test(Sample([1, 2, 3], [0, 2, 0], [1, 2, 2]))


def test_gray_variance_matches_null_spread():
    # the variance estimate should track the actual spread of the score
    u, v = [], []
    cfg = ScenarioConfig("A", 40, 40, 0.3)
    for r in range(1500):
        s = simulate_dataset(cfg, np.random.default_rng(r))
        row = _kernels.evaluate_rows(s.time, s.status, s.group.astype(np.int8)[None, :], -1.0)[0]
        u.append(row[_kernels.U])
        v.append(row[_kernels.V])
    ratio = np.var(u) / np.mean(v)
    assert 0.9 < ratio < 1.1


def test_gray_p_is_chi_square():
    s = scenario_sample(4, "B", beta=math.log(2))
    out = gray_test(s)
    stat = out.meta["score"] ** 2 / out.meta["variance"]
    from scipy.stats import chi2

    assert out.statistic == pytest.approx(stat)
    assert out.p_value == pytest.approx(chi2.sf(stat, 1), rel=1e-10)


# -- Diff and the Z tests ----------------------------------------------------


def test_diff_matches_loop_oracle():
    for seed in range(20):
        s = scenario_sample(seed, "D", n1=10, n2=10, censoring=0.3 if seed % 2 else 0.0)
        try:
            tau = select_tau(s)
        except ValueError:
            continue
        delta, var, p = oracles.diff_by_loops(s, tau)
        out = diff_test(s, tau)
        assert out.effect.point == pytest.approx(delta, abs=1e-12)
        assert out.p_value == pytest.approx(p, abs=1e-12)


def test_kernel_diff_agrees_with_estimator_path():
    for seed in range(10):
        s = scenario_sample(seed, "C")
        tau = select_tau(s)
        row = _kernels.evaluate_rows(s.time, s.status, s.group.astype(np.int8)[None, :], -1.0)[0]
        out = diff_test(s, tau)
        assert row[_kernels.TAU] == tau
        assert row[_kernels.DELTA] == pytest.approx(out.effect.point, abs=1e-12)
        assert row[_kernels.DIFF_P] == pytest.approx(out.p_value, abs=1e-12)


def test_diff_effect_interval():
    s = scenario_sample(2, "D")
    out = diff_test(s, select_tau(s), alpha=0.1)
    e = out.effect
    assert e.ci_lower < e.point < e.ci_upper
    half = 1.6448536269514722 * e.point / out.statistic
    assert e.ci_upper - e.point == pytest.approx(abs(half))


def test_degenerate_variance_guard():
    # valid data cannot reach this branch: a 0/1 CIF ends its group's data
    # at the jump, so any admissible tau gives zero area
    from rmtlcomb.inference import _z_outcome

    with pytest.raises(ValueError, match="degenerate variance"):
        _z_outcome("Diff", 0.5, 0.0, 0.05, "x")
    out = _z_outcome("Diff", 0.0, 0.0, 0.05, "x")
    assert out.p_value == 1.0 and out.statistic == 0.0
    s = Sample([1, 1, 1, 3], [1, 1, 2, 0], [1, 1, 2, 2])
    assert diff_test(s, 1.0).p_value == 1.0


def test_identical_groups_all_z_tests_give_one():
    s = duplicated()
    tau = select_tau(s)
    for out in (
        diff_test(s, tau),
        diff_star_test(s, tau),
        rmst_diff_test(s, tau, variant="interest"),
        rmst_diff_test(s, tau, variant="composite"),
    ):
        assert out.p_value == 1.0
        assert out.effect.point == 0.0


def test_rmst_variant_validation():
    s = scenario_sample(1)
    with pytest.raises(ValueError):
        rmst_diff_test(s, select_tau(s), variant="other")


# -- invariances -------------------------------------------------------------


def test_label_swap_invariance():
    for seed in range(5):
        s = scenario_sample(seed, "B", beta=0.5)
        w = swapped(s)
        tau = select_tau(s)
        a, b = diff_test(s, tau), diff_test(w, tau)
        assert b.effect.point == pytest.approx(-a.effect.point, abs=1e-12)
        assert b.p_value == pytest.approx(a.p_value, abs=1e-12)
        assert gray_test(w).p_value == pytest.approx(gray_test(s).p_value, abs=1e-12)
        for fn in (diff_star_test,):
            assert fn(w, tau).p_value == pytest.approx(fn(s, tau).p_value, abs=1e-12)
        for v in ("interest", "composite"):
            assert rmst_diff_test(w, tau, variant=v).p_value == pytest.approx(
                rmst_diff_test(s, tau, variant=v).p_value, abs=1e-12
            )


def test_time_scale_invariance():
    for seed in range(5):
        s = scenario_sample(seed, "D")
        c = 7.3
        z = Sample(s.time * c, s.status, s.group)
        tau = select_tau(s)
        a, b = diff_test(s, tau), diff_test(z, tau * c)
        assert b.effect.point == pytest.approx(c * a.effect.point, rel=1e-10)
        assert b.statistic == pytest.approx(a.statistic, rel=1e-10)
        assert b.p_value == pytest.approx(a.p_value, rel=1e-9, abs=1e-14)
        assert gray_test(z).statistic == pytest.approx(gray_test(s).statistic, rel=1e-10)
        plan = PermutationPlan(count=50, seed=seed)
        ca, cb = combined_tests(s, tau, plan), combined_tests(z, tau * c, plan)
        for m in ca:
            assert ca[m].p_value == cb[m].p_value


# -- permutation engine ------------------------------------------------------


def test_permuted_labels_preserve_sizes_and_are_seeded():
    s = scenario_sample(1, n1=20, n2=35)
    a = permuted_labels(s, 50, PermutationPlan(seed=9).rng())
    b = permuted_labels(s, 50, PermutationPlan(seed=9).rng())
    assert np.array_equal(a, b)
    assert np.all((a == 1).sum(axis=1) == 20)
    assert not np.array_equal(a[0], a[1])


def test_permutation_distribution_examples():
    s = scenario_sample(1)
    one = PermutationPlan(count=1, seed=3)
    first = permutation_distribution(s, lambda x: x.group[:5], one)
    assert np.array_equal(first, permutation_distribution(s, lambda x: x.group[:5], one))
    plan = PermutationPlan(count=30, seed=3)
    const = permutation_distribution(s, lambda x: 4.2, plan)
    assert np.all(const == 4.2)
    sizes = permutation_distribution(s, lambda x: x.group_sizes()[0], plan)
    assert np.all(sizes == 40)


def test_permutation_distribution_invalid_rows():
    s = scenario_sample(1)
    calls = {"n": 0}

    def flaky(x):
        calls["n"] += 1
        if x.group[0] == 1:
            raise ValueError("boom")
        return 1.0

    with pytest.raises(ValueError, match="could not be evaluated"):
        permutation_distribution(s, flaky, PermutationPlan(count=40, seed=1))

    def rare(x):
        if np.array_equal(x.group, x.group[::-1]):
            raise ValueError("never")
        return float(x.time[x.group == 1].sum())

    out = permutation_distribution(s, rare, PermutationPlan(count=20, seed=1))
    assert out.shape == (20, 1) and not np.isnan(out).any()


def test_determinism_across_thread_counts():
    s = scenario_sample(8, "C", n1=60, n2=60)
    tau = select_tau(s)
    tables = [component_table(s, PermutationPlan(count=300, seed=11, n_jobs=j), tau) for j in (1, 2, 5)]
    for t in tables[1:]:
        assert np.array_equal(t, tables[0], equal_nan=True)
    stat = lambda x: diff_test(x, tau).p_value
    d1 = permutation_distribution(s, stat, PermutationPlan(count=40, seed=2, n_jobs=1))
    d4 = permutation_distribution(s, stat, PermutationPlan(count=40, seed=2, n_jobs=4))
    assert np.array_equal(d1, d4, equal_nan=True)


def test_fixed_tau_mode():
    s = scenario_sample(3)
    tau = select_tau(s)
    t = component_table(s, PermutationPlan(count=20, seed=1, fixed_tau=True), tau)
    valid = ~np.isnan(t[:, _kernels.TAU])
    assert valid[0] and np.all(t[valid, _kernels.TAU] == tau)
    # a permuted group ending before tau cannot use it
    assert np.all(np.isnan(t[~valid, _kernels.DIFF_P]))
    r = component_table(s, PermutationPlan(count=20, seed=1), tau)
    assert np.array_equal(r[:, _kernels.GRAY_P], t[:, _kernels.GRAY_P])


# -- combined tests ----------------------------------------------------------


def test_stage_one_level():
    assert stage_one_level(0.05) == pytest.approx(1 - math.sqrt(0.95))
    assert round(stage_one_level(0.05), 6) == 0.025321
    a1 = stage_one_level(0.05)
    assert a1 + a1 * (1 - a1) == pytest.approx(0.05)
    with pytest.raises(ValueError):
        stage_one_level(1.0)


def test_beta_bound_for_independent_components():
    # independent uniforms: P(min <= 0.05) is the Beta(1, 2) CDF
    assert 1 - (1 - 0.05) ** 2 == pytest.approx(0.0975)
    rng = np.random.default_rng(0)
    g, d = rng.random(200001), rng.random(200001)
    res = combine(g, d, 0.05)
    assert res.min_p == min(g[0], d[0])
    frac = np.mean(np.minimum(g, d) <= 0.05)
    assert frac == pytest.approx(0.0975, abs=0.003)


def test_fisher_arithmetic():
    res = combine(np.array([0.05, 0.5]), np.array([0.05, 0.5]), 0.05)
    assert res.fisher == pytest.approx(-4 * math.log(0.05))
    assert round(res.fisher, 3) == 11.983
    tiny = combine(np.array([0.0, 0.5]), np.array([1.0, 0.5]), 0.05)
    assert tiny.fisher == pytest.approx(-2 * math.log(1e-300))


def test_combine_by_hand():
    gray = np.array([0.30, 0.01, 0.50, 0.20, 0.90])
    diff = np.array([0.04, 0.60, 0.03, 0.10, 0.05])
    res = combine(gray, diff, 0.05)
    # minimum P: 0.04 observed; permuted minima 0.01, 0.03, 0.10, 0.05
    assert res.pcomb == pytest.approx(3 / 5)
    # stage two; permutations with gray > alpha1: rows 2, 3, 4
    assert res.stage == 2 and res.conditional_permutations == 3
    assert res.q_hat == pytest.approx(1 / 3)
    a1 = stage_one_level(0.05)
    assert res.tcomb == pytest.approx(a1 + (1 - a1) / 3)
    f = lambda g, d: -2 * (math.log(g) + math.log(d))
    f0 = f(0.30, 0.04)
    count = sum(f(g, d) >= f0 for g, d in zip(gray[1:], diff[1:]))
    assert res.fcomb == pytest.approx((1 + count) / 5)


def test_tcomb_stage_one_equals_gray():
    gray = np.array([0.01, 0.3, 0.4])
    res = combine(gray, np.array([0.9, 0.1, 0.2]), 0.05)
    assert res.stage == 1 and res.tcomb == 0.01


def test_tcomb_without_conditional_permutations():
    res = combine(np.array([0.5, 0.01, 0.02]), np.array([0.3, 0.1, 0.2]), 0.05)
    assert res.stage == 2 and res.conditional_permutations == 0
    assert res.q_hat == 0.0 and res.tcomb == pytest.approx(stage_one_level(0.05))


def test_combine_rejects_undefined_observation():
    with pytest.raises(ValueError):
        combine(np.array([np.nan, 0.1]), np.array([0.1, 0.1]), 0.05)
    bad = np.full(11, np.nan)
    bad[0] = 0.2
    with pytest.raises(ValueError):
        combine(bad, np.full(11, 0.5), 0.05)


def test_combined_tests_on_identical_groups():
    s = duplicated()
    tau = select_tau(s)
    out = combined_tests(s, tau, PermutationPlan(count=99, seed=4))
    assert out["PComb"].p_value == 1.0
    assert out["FComb"].p_value == 1.0
    assert out["TComb"].p_value == 1.0
    assert out["TComb"].meta["stage"] == 2


def test_combined_test_properties():
    plan = PermutationPlan(count=199, seed=12)
    a1 = stage_one_level(0.05)
    for seed in range(6):
        s = scenario_sample(seed, "BD"[seed % 2], beta=0.7 if seed % 2 == 0 else None)
        tau = select_tau(s)
        p = pcomb_test(s, tau, plan)
        f = fcomb_test(s, tau, plan)
        t = tcomb_test(s, tau, plan)
        g = gray_test(s)
        for out in (p, f):
            assert 1 / 200 <= out.p_value <= 1
        assert min(g.p_value, a1) <= t.p_value <= 1
        if t.meta["stage"] == 1:
            assert t.p_value == g.p_value
        both = combined_tests(s, tau, plan)
        assert both["PComb"].p_value == p.p_value
        assert both["FComb"].p_value == f.p_value
        assert both["TComb"].p_value == t.p_value


def test_permutation_p_monotone_in_observed_statistic():
    rng = np.random.default_rng(1)
    g, d = rng.random(201), rng.random(201)
    last = 0.0
    for m in np.linspace(0.001, 0.999, 50):
        g[0] = d[0] = m
        res = combine(g, d, 0.05)
        assert res.pcomb >= last
        last = res.pcomb
