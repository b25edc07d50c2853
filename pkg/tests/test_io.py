import numpy as np
import pytest

from oasis import io as oio
from oasis.design import assemble_design, compute_boost_factors
from oasis.errors import IoError, ParseError
from oasis.partition import RiskConfig
from oasis.sim import TrialResult

from conftest import toy_graph, toy_partition


def test_graph_round_trip(tmp_path):
    g, t = toy_graph()
    path = str(tmp_path / "g.tsv")
    oio.save(g, t, path)
    g2, t2 = oio.load(path)
    assert g2.n_nodes == 7
    assert np.array_equal(g.src, g2.src) and np.array_equal(g.dst, g2.dst)
    assert g.p_base.tobytes() == g2.p_base.tobytes()
    assert g.alpha.tobytes() == g2.alpha.tobytes()
    assert t.weights.tobytes() == t2.weights.tobytes()
    assert np.array_equal(g.cluster_of, g2.cluster_of)


def test_full_precision_reals(tmp_path):
    g, _ = toy_graph()
    odd = g.p_base + np.arange(g.n_edges) * 1e-16 + 1 / 3
    g = g.with_attributes(p_base=odd)
    path = str(tmp_path / "g.tsv")
    oio.write_graph(g, path)
    assert oio.read_graph(path).p_base.tobytes() == g.p_base.tobytes()


def _write(tmp_path, text, name="g.tsv"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_non_numeric_value(tmp_path):
    path = _write(tmp_path, "src\tdst\tp_base\talpha\n0\t1\t1\t1\n1\t0\tabc\t1\n")
    with pytest.raises(ParseError) as exc:
        oio.read_graph(path)
    assert exc.value.line == 3


def test_duplicate_edge_named(tmp_path):
    path = _write(tmp_path, "src\tdst\tp_base\talpha\n0\t1\t1\t1\n1\t0\t1\t1\n0\t1\t1\t1\n")
    with pytest.raises(ParseError, match=r"\(0, 1\)") as exc:
        oio.read_graph(path)
    assert exc.value.line == 4


def test_bad_header_and_missing_file(tmp_path):
    path = _write(tmp_path, "a\tb\n")
    with pytest.raises(ParseError):
        oio.read_graph(path)
    with pytest.raises(IoError):
        oio.read_graph(str(tmp_path / "nope.tsv"))


def test_partition_round_trip(tmp_path):
    part = toy_partition()
    path = str(tmp_path / "p.tsv")
    oio.write_partition(part, path)
    text = open(path).read().splitlines()
    assert text[1] == "0\trest" and text[1 + 1] == "1\tomega:0" and text[1 + 3] == "3\tcprime"
    back = oio.read_partition(path)
    assert [a.tolist() for a in back.omega] == [[1], [6]]
    assert [a.tolist() for a in back.lambda_] == [[5], [2]]
    assert back.c_prime.tolist() == [3]


def test_design_and_boost_round_trip(tmp_path):
    g, t = toy_graph()
    part = toy_partition()
    d = assemble_design(g, t, part, RiskConfig())
    path = str(tmp_path / "d.tsv")
    oio.write_design(g, d, path)
    p, prov = oio.read_design(g, path)
    assert p.tobytes() == d.p_star.tobytes()
    assert np.array_equal(prov, d.provenance)
    table = compute_boost_factors(g, d, g.p_base)
    bpath = str(tmp_path / "b.tsv")
    oio.write_boost(g, table, bpath)
    back = oio.read_boost(g, bpath)
    assert np.array_equal(back.edges, table.edges)
    assert back.b.tobytes() == table.b.tobytes()


def test_edge_values_unknown_edge(tmp_path):
    g, _ = toy_graph()
    path = _write(tmp_path, "src\tdst\tarm\tz\n1\t6\t0\t0.5\n", "z.tsv")
    with pytest.raises(ParseError, match="not in the graph"):
        oio.read_edge_values(g, path)


def test_results_round_trip(tmp_path):
    rs = [TrialResult(0, "oasis", 0.1, 0.2, -0.1, 0.3, 0.5, 10, 1),
          TrialResult(0, "cb", 0.5, 0.2, 0.4, 0.6, 0.5, 10, 1)]
    path = str(tmp_path / "r.csv")
    oio.write_results(rs, path)
    header = open(path).readline().strip().split(",")
    assert header[:8] == ["repeat", "method", "estimate", "truth", "error", "ci_lo", "ci_hi",
                          "covered"]
    assert oio.read_results(path) == rs
