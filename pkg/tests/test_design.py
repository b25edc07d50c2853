import numpy as np
import pytest
from hypothesis import given, strategies as st

from oasis.design import (PROVENANCE, BoostTable, DesignOutput, assemble_design,
                          compute_boost_factors)
from oasis.errors import DegenerateScoreError, DivisionByZeroError, ParameterError
from oasis.graph import MarketplaceGraph, TreatmentSet
from oasis.partition import (ROLE_CPRIME, ROLE_LAMBDA, ROLE_OMEGA, Partition, RiskConfig,
                             compute_sum_bounds, sample_partition)
from oasis.qp import QpConfig

from conftest import TOY_TREAT, toy_graph, toy_partition


def edge(g, a, b):
    return int(g.edge_index(a, b))


def test_partition_sizes_at_scale():
    n = 50000
    ring = MarketplaceGraph.from_edges(n, np.arange(n), (np.arange(n) + 1) % n)
    part = sample_partition(ring, 2, 0.1, 0.1, 0.5, seed=1)
    assert [a.size for a in part.omega] == [5000, 5000]
    assert [a.size for a in part.lambda_] == [5000, 5000]


@given(st.integers(0, 2**31), st.floats(0, 1))
def test_partition_disjoint_and_cprime_eligible(seed, q):
    from oasis.graph import generate_clustered_graph
    g = generate_clustered_graph(2, 40, 4, 0.25, 1, 3)
    part = sample_partition(g, 2, 0.1, 0.15, q, seed)
    sets = [*part.omega, *part.lambda_, part.c_prime]
    allv = np.concatenate(sets)
    assert np.unique(allv).size == allv.size
    assert set(part.c_prime.tolist()) <= set(part.eligible_children(g).tolist())


def test_partition_rejects_bad_fractions(toy):
    g, _, _ = toy
    with pytest.raises(ParameterError):
        sample_partition(g, 2, 0.3, 0.25, 0.5, 1)
    with pytest.raises(ParameterError):
        sample_partition(g, 1, 0.2, 0.2, 1.5, 1)
    with pytest.raises(ParameterError):
        Partition(7, ([1],), ([1],), [], 0.5)


def test_gamma_mode_selects_subset():
    from oasis.graph import generate_clustered_graph
    g = generate_clustered_graph(2, 100, 4, 0.25, 1, 3)
    part = sample_partition(g, 2, 0.1, 0.1, 0.5, 7, mode="gamma", frac_gamma=0.3)
    assert part.c_prime.size <= 60
    assert set(part.c_prime.tolist()) <= set(part.eligible_children(g).tolist())


def test_sum_bounds_arithmetic():
    # consumer 2 receives 0.9 from the measurement node 0 and 0.1 from node 1
    g = MarketplaceGraph.from_edges(3, [0, 1], [2, 2], p_base=[0.9, 0.1], alpha=[1, 1])
    part = Partition(3, ([0],), ([],), [2], 0.5)
    b = compute_sum_bounds(g, part, RiskConfig(0, 10, 0.2, 5))
    assert b.consumers.tolist() == [2]
    assert b.lower[0] == pytest.approx(0.5)
    assert b.upper[0] == pytest.approx(0.98)


def test_risk_config_validation():
    with pytest.raises(ParameterError):
        RiskConfig(r_min=1.5)
    with pytest.raises(ParameterError):
        RiskConfig(s_max=0.5)


def test_toy_design():
    g, t = toy_graph()
    d = assemble_design(g, t, toy_partition(), RiskConfig())
    p = d.p_star
    assert p[edge(g, 1, 3)] == pytest.approx(0.3, abs=1e-6)
    assert p[edge(g, 6, 3)] == pytest.approx(0.2, abs=1e-6)
    ratio = (1 - p[edge(g, 1, 3)] - p[edge(g, 6, 3)]) / (1 - 0.3 - 0.3)
    assert p[edge(g, 2, 3)] == pytest.approx(0.4 * ratio, abs=1e-12)
    labels = dict(zip(zip(g.src.tolist(), g.dst.tolist()), d.provenance_labels()))
    assert labels[(1, 3)] == "optimized" and labels[(2, 3)] == "renormalized"
    assert labels[(4, 1)] == "consumer-exact" and labels[(3, 6)] == "consumer-exact"
    assert labels[(5, 4)] == "base"
    # consumers in omega/lambda see their arm's weights exactly
    for (a, b), lab in labels.items():
        if lab == "consumer-exact":
            arm = 0 if b in (1, 5) else 1
            assert p[edge(g, a, b)] == t.arm(arm)[edge(g, a, b)]


def test_toy_design_with_active_box():
    treat = dict(TOY_TREAT)
    treat.update({(1, 3): 0.5, (6, 3): 0.05, (2, 3): 0.45})
    g, t = toy_graph(treat)
    d = assemble_design(g, t, toy_partition(), RiskConfig(r_min=0.5, r_max=1.0))
    assert d.p_star[edge(g, 6, 3)] == pytest.approx(0.15, abs=1e-6)
    assert d.p_star[edge(g, 1, 3)] == pytest.approx(0.3, abs=1e-6)
    assert d.p_star[edge(g, 2, 3)] == pytest.approx(0.55, abs=1e-6)


def test_toy_design_with_active_sum_bound():
    g, t = toy_graph()
    d = assemble_design(g, t, toy_partition(), RiskConfig(s_min=0.2, s_max=1.0))
    assert d.p_star[edge(g, 1, 3)] == pytest.approx(0.35, abs=1e-6)
    assert d.p_star[edge(g, 6, 3)] == pytest.approx(0.25, abs=1e-6)
    assert d.p_star[edge(g, 2, 3)] == pytest.approx(0.4, abs=1e-6)


def test_identical_arms_reproduce_base(small_setting):
    _, s = small_setting
    g = s.graph
    t = TreatmentSet.from_graph(g, g.p_base)
    part = sample_partition(g, 2, 0.1, 0.1, 0.5, seed=2)
    d = assemble_design(g, t, part, RiskConfig(), alpha_override=1.0)
    assert np.max(np.abs(d.p_star - g.p_base)) <= 1e-6
    assert d.objective_trace[0] == pytest.approx(0.0, abs=1e-20)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_design_invariants(small_setting, seed):
    _, s = small_setting
    g, t = s.graph, s.treatments
    part = sample_partition(g, 2, 0.1, 0.1, 0.5, seed=seed)
    risk = RiskConfig()
    d = assemble_design(g, t, part, risk, QpConfig(k_blocks=3), alpha_override=1.0)
    assert np.max(np.abs(g.consumer_sums(d.p_star) - 1)[g.in_degree > 0]) <= 1e-9
    role = part.role
    dst_role = role[g.dst]
    untouched = ~np.isin(dst_role, [ROLE_OMEGA, ROLE_LAMBDA, ROLE_CPRIME])
    assert np.array_equal(d.p_star[untouched], g.p_base[untouched])
    exact = np.isin(dst_role, [ROLE_OMEGA, ROLE_LAMBDA])
    arms = part.arm[g.dst[exact]]
    assert np.array_equal(d.p_star[exact], t.weights[arms, np.flatnonzero(exact)])
    opt = d.provenance == PROVENANCE.index("optimized")
    assert np.all(d.p_star[opt] >= risk.r_min * g.p_base[opt] - 1e-6)
    assert np.all(d.p_star[opt] <= risk.r_max * g.p_base[opt] + 1e-6)
    sums = np.bincount(g.dst[opt], weights=d.p_star[opt], minlength=g.n_nodes)
    b = d.bounds
    assert np.all(sums[b.consumers] >= b.lower - 1e-6)
    assert np.all(sums[b.consumers] <= b.upper + 1e-6)
    trace = np.array(d.block_trace)
    assert np.all(np.diff(trace) <= 1e-6)


def boost_case(pstar_op, scores):
    g = MarketplaceGraph.from_edges(3, [0, 1], [2, 2], p_base=[0.2, 0.8], alpha=[1, 1])
    part = Partition(3, ([0],), ([],), [2], 0.5)
    bounds = compute_sum_bounds(g, part, RiskConfig())
    p = np.array([pstar_op, 1 - pstar_op])
    d = DesignOutput(p, np.array([2, 3], dtype=np.int8), part, bounds, [], [])
    return g, d, compute_boost_factors(g, d, np.asarray(scores, dtype=float))


def test_boost_factor_arithmetic():
    g, d, table = boost_case(0.4, [0.2, 0.8])
    assert table.b[0] == pytest.approx(8 / 3, rel=1e-12)
    assert table.b[1] == 1.0
    assert table.apply(g, np.array([0.2, 0.8])) == pytest.approx(d.p_star, abs=1e-12)


def test_boost_errors():
    with pytest.raises(DegenerateScoreError):
        boost_case(0.4, [0.0, 0.8])
    with pytest.raises(DivisionByZeroError) as exc:
        boost_case(1.0, [0.2, 0.8])
    assert exc.value.consumers == [2]


@given(st.integers(0, 2**31))
def test_boost_round_trip(seed):
    g, t = toy_graph()
    d = assemble_design(g, t, toy_partition(), RiskConfig())
    scores = np.random.default_rng(seed).uniform(0.1, 5, g.n_edges)
    table = compute_boost_factors(g, d, scores)
    assert np.max(np.abs(table.apply(g, scores) - d.p_star[table.edges])) <= 1e-9


def test_boost_round_trip_generated(small_setting):
    _, s = small_setting
    g = s.graph
    part = sample_partition(g, 2, 0.1, 0.1, 0.5, seed=5)
    d = assemble_design(g, s.treatments, part, RiskConfig(), alpha_override=1.0)
    rng = np.random.default_rng(1)
    # arbitrary scores: optimised edges are reproduced exactly
    scores = rng.lognormal(size=g.n_edges)
    table = compute_boost_factors(g, d, scores)
    assert isinstance(table, BoostTable)
    op = part.in_omega_prime[g.src[table.edges]]
    got = table.apply(g, scores)
    assert np.max(np.abs(got[op] - d.p_star[table.edges][op])) <= 1e-9
    # scores proportional to the base weights: every exposure-set edge matches
    scores = g.p_base * rng.uniform(0.5, 3, g.n_nodes)[g.dst]
    table = compute_boost_factors(g, d, scores)
    assert np.max(np.abs(table.apply(g, scores) - d.p_star[table.edges])) <= 1e-9
