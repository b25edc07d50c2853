"""Tab-separated file formats for graphs, treatments, designs and measurements.

All reals are written with 17 significant digits so a load after a save
reproduces the in-memory values exactly.
"""

import csv
import math
import os

import numpy as np

from .errors import IoError, ParseError
from .graph import MarketplaceGraph, TreatmentSet
from .partition import Partition

__all__ = [
    "save",
    "load",
    "write_graph",
    "read_graph",
    "write_treatments",
    "read_treatments",
    "write_design",
    "read_design",
    "write_partition",
    "read_partition",
    "write_boost",
    "read_boost",
    "write_node_values",
    "read_node_values",
    "write_edge_values",
    "read_edge_values",
    "read_edge_column",
    "write_results",
    "read_results",
    "companion_paths",
]

RESULT_COLUMNS = ("repeat", "method", "estimate", "truth", "error", "ci_lo", "ci_hi", "covered")
CELL_COLUMNS = ("delta", "d_ba", "d_er")


def fmt(x):
    return format(float(x), ".17g")


def companion_paths(path):
    path = os.fspath(path)
    stem = path[:-4] if path.endswith(".tsv") else path
    return {"nodes": stem + ".nodes.tsv", "treatments": stem + ".treatments.tsv"}


class _Writer:
    def __init__(self, path, header):
        self.path = path
        try:
            self.fh = open(path, "w")
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
        self.fh.write("\t".join(header) + "\n")

    def rows(self, columns):
        self.fh.writelines("\t".join(r) + "\n" for r in zip(*columns))

    def close(self):
        self.fh.close()


def _write(path, header, columns):
    w = _Writer(path, header)
    try:
        w.rows(columns)
    finally:
        w.close()


def _read(path, header):
    """Rows of a TSV file as lists of strings, with 1-based line numbers."""
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not lines:
        raise ParseError("empty file", path, 1)
    got = lines[0].rstrip("\r").split("\t")
    if got != list(header):
        raise ParseError(f"expected header {'|'.join(header)}, got {'|'.join(got)}", path, 1)
    out = []
    for k, line in enumerate(lines[1:], start=2):
        line = line.rstrip("\r")
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != len(header):
            raise ParseError(f"expected {len(header)} fields, got {len(parts)}", path, k)
        out.append((k, parts))
    return out


def _int(s, path, line, name):
    try:
        v = int(s)
    except ValueError:
        raise ParseError(f"{name} is not an integer: {s!r}", path, line) from None
    if v < 0:
        raise ParseError(f"{name} must be non-negative: {s!r}", path, line)
    return v


def _float(s, path, line, name):
    try:
        return float(s)
    except ValueError:
        raise ParseError(f"{name} is not a number: {s!r}", path, line) from None


def _parse_edges(rows, path, value_names):
    n = len(rows)
    src = np.empty(n, dtype=np.int64)
    dst = np.empty(n, dtype=np.int64)
    vals = np.empty((len(value_names), n))
    lines = np.empty(n, dtype=np.int64)
    for k, (line, parts) in enumerate(rows):
        src[k] = _int(parts[0], path, line, "src")
        dst[k] = _int(parts[1], path, line, "dst")
        for c, name in enumerate(value_names):
            vals[c, k] = _float(parts[2 + c], path, line, name)
        lines[k] = line
    return src, dst, vals, lines


def _edge_ids(graph, src, dst, lines, path):
    idx = np.array([graph.edge_index(int(a), int(b)) for a, b in zip(src, dst)], dtype=np.int64)
    bad = np.flatnonzero(idx < 0)
    if bad.size:
        k = bad[0]
        raise ParseError(f"edge ({src[k]}, {dst[k]}) is not in the graph", path, int(lines[k]))
    return idx


# -- graph -------------------------------------------------------------------------

def write_graph(graph, path):
    _write(path, ("src", "dst", "p_base", "alpha"),
           [map(str, graph.src), map(str, graph.dst), map(fmt, graph.p_base), map(fmt, graph.alpha)])
    nodes = companion_paths(path)["nodes"]
    clusters = graph.cluster_of if graph.cluster_of is not None else np.full(graph.n_nodes, -1)
    _write(nodes, ("node", "cluster"), [map(str, range(graph.n_nodes)), map(str, clusters)])


def read_graph(path):
    rows = _read(path, ("src", "dst", "p_base", "alpha"))
    src, dst, vals, lines = _parse_edges(rows, path, ("p_base", "alpha"))
    key = src * (int(max(src.max(initial=0), dst.max(initial=0))) + 1) + dst
    order = np.argsort(key, kind="stable")
    dup = np.flatnonzero(np.diff(key[order]) == 0)
    if dup.size:
        k = order[dup[0] + 1]
        raise ParseError(f"duplicate edge ({src[k]}, {dst[k]})", path, int(lines[k]))
    loops = np.flatnonzero(src == dst)
    if loops.size:
        k = loops[0]
        raise ParseError(f"self-loop at node {src[k]}", path, int(lines[k]))
    n_nodes = int(max(src.max(initial=-1), dst.max(initial=-1))) + 1
    cluster_of = None
    nodes_path = companion_paths(path)["nodes"]
    if os.path.exists(nodes_path):
        nrows = _read(nodes_path, ("node", "cluster"))
        ids = np.array([_int(p[0], nodes_path, ln, "node") for ln, p in nrows], dtype=np.int64)
        cl = np.array([int(_float(p[1], nodes_path, ln, "cluster")) for ln, p in nrows],
                      dtype=np.int64)
        if ids.size and (np.any(np.sort(ids) != np.arange(ids.size))):
            raise ParseError("node ids must be 0..n-1 without gaps", nodes_path, 2)
        if ids.size < n_nodes:
            raise ParseError(f"node file lists {ids.size} nodes but edges use {n_nodes}",
                             nodes_path, 2)
        n_nodes = int(ids.size)
        clusters = np.empty(n_nodes, dtype=np.int64)
        clusters[ids] = cl
        if np.any(clusters >= 0):
            cluster_of = clusters
    p_base = vals[0] if not np.all(np.isnan(vals[0])) else None
    alpha = vals[1] if not np.all(np.isnan(vals[1])) else None
    return MarketplaceGraph.from_edges(n_nodes, src, dst, p_base=p_base, alpha=alpha,
                                       cluster_of=cluster_of)


def write_treatments(graph, treatments, path):
    m, E = treatments.weights.shape
    _write(path, ("src", "dst", "arm", "p"),
           [map(str, np.tile(graph.src, m)), map(str, np.tile(graph.dst, m)),
            map(str, np.repeat(np.arange(m), E)), map(fmt, treatments.weights.ravel())])


def read_treatments(graph, path):
    rows = _read(path, ("src", "dst", "arm", "p"))
    if not rows:
        raise ParseError("no treatment rows", path, 2)
    arms = np.array([_int(p[2], path, ln, "arm") for ln, p in rows], dtype=np.int64)
    src, dst, vals, lines = _parse_edges([(ln, [p[0], p[1], p[3]]) for ln, p in rows], path, ("p",))
    idx = _edge_ids(graph, src, dst, lines, path)
    n_arms = int(arms.max()) + 1
    w = np.full((n_arms, graph.n_edges), np.nan)
    seen = np.zeros((n_arms, graph.n_edges), dtype=bool)
    for k in range(idx.size):
        if seen[arms[k], idx[k]]:
            raise ParseError(f"duplicate weight for edge ({src[k]}, {dst[k]}) arm {arms[k]}",
                             path, int(lines[k]))
        seen[arms[k], idx[k]] = True
    w[arms, idx] = vals[0]
    missing = np.argwhere(~seen)
    if missing.size:
        r, e = missing[0]
        raise ParseError(f"arm {r} has no weight for edge ({graph.src[e]}, {graph.dst[e]})",
                         path, len(rows) + 1)
    return TreatmentSet(w)


def save(graph, treatments, path):
    """Graph TSV at ``path`` plus node and treatment companions."""
    write_graph(graph, path)
    if treatments is not None:
        write_treatments(graph, treatments, companion_paths(path)["treatments"])


def load(path):
    graph = read_graph(path)
    tpath = companion_paths(path)["treatments"]
    treatments = read_treatments(graph, tpath) if os.path.exists(tpath) else None
    return graph, treatments


# -- design, partition, boost -----------------------------------------------------

def write_design(graph, design, path):
    _write(path, ("src", "dst", "p_star", "provenance"),
           [map(str, graph.src), map(str, graph.dst), map(fmt, design.p_star),
            design.provenance_labels()])


def read_design(graph, path):
    """Returns ``(p_star, provenance_codes)`` aligned with the graph's edges."""
    from .design import PROVENANCE
    rows = _read(path, ("src", "dst", "p_star", "provenance"))
    src, dst, vals, lines = _parse_edges([(ln, p[:3]) for ln, p in rows], path, ("p_star",))
    idx = _edge_ids(graph, src, dst, lines, path)
    p = np.full(graph.n_edges, np.nan)
    prov = np.zeros(graph.n_edges, dtype=np.int8)
    for k, (ln, parts) in enumerate(rows):
        if parts[3] not in PROVENANCE:
            raise ParseError(f"unknown provenance {parts[3]!r}", path, ln)
        prov[idx[k]] = PROVENANCE.index(parts[3])
    p[idx] = vals[0]
    if np.any(np.isnan(p)):
        e = int(np.flatnonzero(np.isnan(p))[0])
        raise ParseError(f"design has no weight for edge ({graph.src[e]}, {graph.dst[e]})",
                         path, len(rows) + 1)
    return p, prov


def _role_labels(partition):
    labels = np.array(["rest"] * partition.n_nodes, dtype=object)
    for r, (om, la) in enumerate(zip(partition.omega, partition.lambda_)):
        labels[om] = f"omega:{r}"
        labels[la] = f"lambda:{r}"
    labels[partition.c_prime] = "cprime"
    return labels


def write_partition(partition, path):
    _write(path, ("node", "role"), [map(str, range(partition.n_nodes)), _role_labels(partition)])


def read_partition(path, n_nodes=None, q=float("nan")):
    rows = _read(path, ("node", "role"))
    n = len(rows) if n_nodes is None else int(n_nodes)
    omega, lam, c_prime = {}, {}, []
    seen = set()
    for ln, (node_s, role) in rows:
        node = _int(node_s, path, ln, "node")
        if node >= n:
            raise ParseError(f"node {node} out of range", path, ln)
        if node in seen:
            raise ParseError(f"node {node} listed twice", path, ln)
        seen.add(node)
        if role == "rest":
            continue
        if role == "cprime":
            c_prime.append(node)
            continue
        kind, _, arm = role.partition(":")
        if kind not in ("omega", "lambda") or not arm.isdigit():
            raise ParseError(f"unknown role {role!r}", path, ln)
        (omega if kind == "omega" else lam).setdefault(int(arm), []).append(node)
    n_arms = max([*omega, *lam], default=-1) + 1
    return Partition(n, tuple(omega.get(r, []) for r in range(n_arms)),
                     tuple(lam.get(r, []) for r in range(n_arms)), c_prime, q)


def write_boost(graph, table, path):
    _write(path, ("src", "dst", "b"),
           [map(str, graph.src[table.edges]), map(str, graph.dst[table.edges]), map(fmt, table.b)])


def read_boost(graph, path):
    from .design import BoostTable
    rows = _read(path, ("src", "dst", "b"))
    src, dst, vals, lines = _parse_edges(rows, path, ("b",))
    idx = _edge_ids(graph, src, dst, lines, path)
    order = np.argsort(idx)
    return BoostTable(idx[order], vals[0][order])


# -- measurements -------------------------------------------------------------------

def write_node_values(path, header, nodes, *columns):
    _write(path, header, [map(str, nodes), *[map(fmt, c) if np.asarray(c).dtype.kind == "f"
                                              else map(str, c) for c in columns]])


def read_node_values(path, header, n_nodes):
    """Per-node values; for a ``node arm value`` layout returns an (n_arms, n_nodes) array."""
    rows = _read(path, header)
    has_arm = len(header) == 3
    nodes = np.array([_int(p[0], path, ln, header[0]) for ln, p in rows], dtype=np.int64)
    arms = (np.array([_int(p[1], path, ln, "arm") for ln, p in rows], dtype=np.int64)
            if has_arm else np.zeros(len(rows), dtype=np.int64))
    vals = np.array([_float(p[-1], path, ln, header[-1]) for ln, p in rows])
    bad = np.flatnonzero(nodes >= n_nodes)
    if bad.size:
        raise ParseError(f"node {nodes[bad[0]]} out of range", path, rows[bad[0]][0])
    out = np.full((int(arms.max(initial=0)) + 1, n_nodes), np.nan)
    out[arms, nodes] = vals
    return out if has_arm else out[0]


def write_edge_values(graph, path, edges, arms, values):
    _write(path, ("src", "dst", "arm", "z"),
           [map(str, graph.src[edges]), map(str, graph.dst[edges]), map(str, arms),
            map(fmt, values)])


def read_edge_values(graph, path, n_arms=None):
    """(n_arms, n_edges) array of per-edge values, NaN where absent."""
    rows = _read(path, ("src", "dst", "arm", "z"))
    arms = np.array([_int(p[2], path, ln, "arm") for ln, p in rows], dtype=np.int64)
    src, dst, vals, lines = _parse_edges([(ln, [p[0], p[1], p[3]]) for ln, p in rows], path, ("z",))
    idx = _edge_ids(graph, src, dst, lines, path)
    m = int(arms.max(initial=-1)) + 1 if n_arms is None else int(n_arms)
    out = np.full((m, graph.n_edges), np.nan)
    out[arms, idx] = vals[0]
    return out


def read_edge_column(graph, path, name):
    """One value per graph edge from a ``src dst <name>`` TSV; NaN where absent."""
    rows = _read(path, ("src", "dst", name))
    src, dst, vals, lines = _parse_edges(rows, path, (name,))
    idx = _edge_ids(graph, src, dst, lines, path)
    out = np.full(graph.n_edges, np.nan)
    out[idx] = vals[0]
    return out


# -- results ---------------------------------------------------------------------

def write_results(results, path):
    try:
        fh = open(path, "w", newline="")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
    with fh:
        w = csv.writer(fh)
        w.writerow(RESULT_COLUMNS + CELL_COLUMNS)
        for r in results:
            row = r.row()
            w.writerow([row["repeat"], row["method"], *(fmt(row[c]) for c in RESULT_COLUMNS[2:7]),
                        row["covered"], *(fmt(row[c]) for c in CELL_COLUMNS)])


def read_results(path):
    from .sim import TrialResult
    try:
        fh = open(path, newline="")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header[:len(RESULT_COLUMNS)]) != RESULT_COLUMNS:
            raise ParseError("missing results header", path, 1)
        cols = {name: k for k, name in enumerate(header)}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"expected {len(header)} fields, got {len(row)}", path, line)
            get = lambda c: _float(row[cols[c]], path, line, c)
            cell = [get(c) if c in cols else math.nan for c in CELL_COLUMNS]
            out.append(TrialResult(int(get("repeat")), row[cols["method"]], get("estimate"),
                                   get("truth"), get("ci_lo"), get("ci_hi"), *cell))
    return out
