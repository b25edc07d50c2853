import numpy as np
import pytest
from hypothesis import given, strategies as st

from oasis.allocation import (allocation_data, benchmark_instance, build_full_problem,
                              evaluate_allocation_objective, make_block_plan,
                              repair_feasibility, solve_allocation, solve_blocks, solve_full)
from oasis.errors import InputError
from oasis.partition import RiskConfig, compute_sum_bounds, sample_partition
from oasis.qp import solve_qp

from conftest import toy_graph, toy_partition


def toy_problem():
    g, t = toy_graph()
    part = toy_partition()
    bounds = compute_sum_bounds(g, part, RiskConfig())
    return g, t, part, bounds


def test_toy_problem_has_two_variables():
    g, t, part, bounds = toy_problem()
    qp, var_edges = build_full_problem(g, t, part, bounds)
    pairs = [(int(g.src[e]), int(g.dst[e])) for e in var_edges]
    assert pairs == [(1, 3), (6, 3)]
    # (p12^0 + p13^0 - p12^1 - p13)^2 + (p63^1 - p63)^2 with the toy weights
    for x in ([0.0, 0.0], [0.3, 0.2], [1.0, 0.7], [0.25, 0.5]):
        want = (1.0 + 0.3 - 1.0 - x[0]) ** 2 + (0.2 - x[1]) ** 2
        assert qp.objective(np.array(x)) == pytest.approx(want, abs=1e-12)


@given(st.floats(0, 3), st.floats(0, 3))
def test_toy_independent_objective(a, b):
    g, t, part, bounds = toy_problem()
    qp, var_edges = build_full_problem(g, t, part, bounds)
    w = {(1, 3): a, (6, 3): b}
    j = evaluate_allocation_objective(g, t, part, w)
    assert j == pytest.approx((0.3 - a) ** 2 + (0.2 - b) ** 2, abs=1e-12)
    assert j == pytest.approx(qp.objective(np.array([a, b])), abs=1e-8)


def test_missing_weight_is_an_error():
    g, t, part, _ = toy_problem()
    with pytest.raises(InputError):
        evaluate_allocation_objective(g, t, part, {(1, 3): 0.2})


def test_objective_agrees_on_generated_design(small_setting):
    cfg, s = small_setting
    part = sample_partition(s.graph, 2, 0.1, 0.1, 0.5, seed=4)
    bounds = compute_sum_bounds(s.graph, part, RiskConfig())
    res = solve_allocation(s.graph, s.treatments, part, bounds, alpha_override=1.0)
    w = np.full(s.graph.n_edges, np.nan)
    w[res.var_edges] = res.x
    j = evaluate_allocation_objective(s.graph, s.treatments, part, w, alpha_override=1.0)
    qp, _ = build_full_problem(s.graph, s.treatments, part, bounds, alpha_override=1.0)
    assert j == pytest.approx(qp.objective(res.x), abs=1e-8)
    assert j == pytest.approx(res.trace[-1], abs=1e-8)


def test_block_plan_round_robin():
    plan = make_block_plan([9, 3, 5, 1, 7], k_blocks=2, max_outer=4)
    assert [b.tolist() for b in plan.blocks] == [[1, 5, 9], [3, 7]]
    assert plan.K == 2 and plan.max_outer == 4
    assert make_block_plan(np.arange(2500)).K == 2
    assert make_block_plan(np.arange(3), k_blocks=10).K == 3


@given(st.integers(0, 2**31), st.sampled_from([2, 5, 10]))
def test_block_trace_monotone_and_feasible(seed, k):
    d = benchmark_instance(400, seed)
    res = solve_blocks(d, make_block_plan(d.consumers, k, 4))
    tr = np.array(res.block_trace)
    assert np.all(np.diff(tr) <= 1e-6)
    x = res.x
    assert np.all(x >= d.box_lo - 1e-6) and np.all(x <= d.box_hi + 1e-6)
    s = np.bincount(d.var_consumer, weights=x, minlength=d.consumers.size)
    assert np.all(s >= d.lower - 1e-6) and np.all(s <= d.upper + 1e-6)


def test_blocks_close_to_full_solve():
    d = benchmark_instance(1000, 2)
    full = solve_full(d)
    res = solve_blocks(d, make_block_plan(d.consumers, 10, 2))
    assert res.trace[-1] <= 1.05 * d.objective(full.x)


def test_single_block_matches_full_solve():
    d = benchmark_instance(300, 8)
    full = solve_full(d)
    res = solve_blocks(d, make_block_plan(d.consumers, 1, 1))
    assert res.trace[-1] == pytest.approx(d.objective(full.x), rel=1e-5, abs=1e-6)


def test_allocation_is_deterministic(small_setting):
    _, s = small_setting
    part = sample_partition(s.graph, 2, 0.1, 0.1, 0.5, seed=9)
    bounds = compute_sum_bounds(s.graph, part, RiskConfig())
    a = solve_allocation(s.graph, s.treatments, part, bounds, make_block_plan(bounds.consumers, 3))
    b = solve_allocation(s.graph, s.treatments, part, bounds, make_block_plan(bounds.consumers, 3))
    assert a.x.tobytes() == b.x.tobytes()


@given(st.integers(0, 2**31))
def test_repair_reaches_feasibility(seed):
    rng = np.random.default_rng(seed)
    n, c = 30, 5
    vc = rng.integers(0, c, n)
    lo = rng.uniform(0, 0.5, n)
    hi = lo + rng.uniform(0, 1, n)
    smin = np.bincount(vc, weights=lo, minlength=c)
    smax = np.bincount(vc, weights=hi, minlength=c)
    a = smin + rng.uniform(0, 1, c) * (smax - smin)
    b = a + rng.uniform(0, 1, c) * (smax - a)
    x = repair_feasibility(rng.normal(size=n) * 2, lo, hi, vc, a, b)
    s = np.bincount(vc, weights=x, minlength=c)
    assert np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12)
    assert np.all(s >= a - 1e-9) and np.all(s <= b + 1e-9)


def test_data_targets_use_fixed_edges():
    g, t, part, bounds = toy_problem()
    d = allocation_data(g, t, part, bounds)
    assert d.target.tolist() == pytest.approx([0.3, 0.2])
