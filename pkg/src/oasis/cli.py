"""Command-line interface: ``oasis <command> [options]``.

Every option can also come from a JSON file passed with ``--config``; flags
given on the command line win.  Each run writes the resolved options to
``config-resolved.json`` next to its outputs.
"""

import argparse
import json
import logging
import os
import sys
import time
import warnings

import numpy as np

from . import io as oio
from .errors import IoError, OasisError, ParameterError, ParseError, InputError, NoDataError
from .rng import ALGORITHM

log = logging.getLogger("oasis")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
VALIDATION_ERRORS = (ParameterError, ParseError, InputError, IoError, NoDataError)

DEFAULTS = {
    "gen-graph": {
        "n_clusters": 10, "cluster_size": 500, "d_ba": 10.0, "d_er": 1.0, "ba_power": 0.25,
        "attributes": True, "seed": None, "out": None,
    },
    "design": {
        "graph": None, "treatments": None, "frac_omega": 0.1,
        "frac_lambda": 0.1, "q": 0.5, "exposure_mode": "sample", "frac_gamma": 0.0,
        "r_min": 0.0, "r_max": 10.0, "s_min": 0.2, "s_max": 5.0, "k_blocks": 0,
        "max_outer": 10, "solver": {}, "alpha_override": None, "seed": None, "out": None,
        "partition_out": None, "dump_qp": None,
    },
    "measure": {
        "graph": None, "treatments": None, "design": None, "partition": None, "delta": 0.5,
        "noise_sd": 1.0, "seed": None, "out": None,
    },
    "estimate": {
        "graph": None, "partition": None, "exposures": None, "targets": None,
        "responses": None, "bootstrap": 1000, "alpha": 0.05, "clip": 50.0,
        "mode": "self_normalized", "density": "kde", "kde_method": "binned", "seed": None,
        "out": None,
    },
    "boost": {
        "graph": None, "design": None, "partition": None, "scores": None, "out": None,
    },
    "simulate": {
        "repeats": None, "seed": None, "threads": None, "out": None, "plots": True,
        "preset": None,
    },
    "report": {"results": None, "out": None},
}


REQUIRED = {
    "gen-graph": ("out",),
    "design": ("graph", "out"),
    "measure": ("graph", "design", "partition", "out"),
    "estimate": ("graph", "partition", "exposures", "targets", "responses", "out"),
    "boost": ("graph", "design", "partition", "out"),
    "simulate": ("out",),
    "report": ("results", "out"),
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_INVALID)


def _add(p, *flags, **kw):
    kw.setdefault("default", argparse.SUPPRESS)
    p.add_argument(*flags, **kw)


def build_parser():
    parser = _Parser(prog="oasis", description="Allocation designs and estimators for "
                     "marketplace A/B tests under network interference.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", parser_class=_Parser, metavar="command")
    sub.required = True

    def command(name, help_):
        p = sub.add_parser(name, help=help_, description=help_)
        p.add_argument("--config", help="JSON file with option values")
        _add(p, "--seed", type=int, help="master seed (falls back to $OASIS_SEED, then 0)")
        p.add_argument("-v", "--verbose", action="count", default=0)
        return p

    p = command("gen-graph", "generate a clustered marketplace graph")
    _add(p, "--n-clusters", type=int)
    _add(p, "--cluster-size", type=int)
    _add(p, "--d-ba", type=float, help="mean degree of the per-cluster attachment graphs")
    _add(p, "--d-er", type=float, help="mean degree of the random overlay")
    _add(p, "--ba-power", type=float)
    _add(p, "--no-attributes", dest="attributes", action="store_false",
         help="leave p_base/alpha unset and write no treatments")
    _add(p, "--out", help="graph TSV path")

    p = command("design", "build an allocation design")
    _add(p, "--graph")
    _add(p, "--treatments", help="treatment TSV (default: graph companion)")
    _add(p, "--frac-omega", type=float)
    _add(p, "--frac-lambda", type=float)
    _add(p, "--q", type=float)
    _add(p, "--exposure-mode", choices=("sample", "gamma"))
    _add(p, "--frac-gamma", type=float)
    _add(p, "--r-min", type=float)
    _add(p, "--r-max", type=float)
    _add(p, "--s-min", type=float)
    _add(p, "--s-max", type=float)
    _add(p, "--k-blocks", type=int, help="number of consumer blocks (0: ~1000 consumers each)")
    _add(p, "--max-outer", type=int)
    _add(p, "--solver-config", dest="solver_config", help="JSON file with solver settings")
    _add(p, "--alpha-override", type=float, help="use this constant for every alpha in the QP")
    _add(p, "--out", help="design TSV path")
    _add(p, "--partition-out")
    _add(p, "--dump-qp", help="write the full QP as text")

    p = command("measure", "simulate measurements under a design (synthetic responses)")
    _add(p, "--graph")
    _add(p, "--treatments")
    _add(p, "--design")
    _add(p, "--partition")
    _add(p, "--delta", type=float)
    _add(p, "--noise-sd", type=float)
    _add(p, "--out", help="output directory")

    p = command("estimate", "importance-sampling estimates with bootstrap intervals")
    _add(p, "--graph")
    _add(p, "--partition")
    _add(p, "--exposures", help="TSV node, arm, z_star")
    _add(p, "--targets", help="TSV src, dst, arm, z")
    _add(p, "--responses", help="TSV node, y")
    _add(p, "--bootstrap", type=int)
    _add(p, "--alpha", type=float)
    _add(p, "--clip", type=float, help="weight cap; 0 disables")
    _add(p, "--mode", choices=("self_normalized", "plain"))
    _add(p, "--density", choices=("kde", "gaussian"))
    _add(p, "--kde-method", choices=("binned", "exact"))
    _add(p, "--out", help="report JSON path")

    p = command("boost", "convert a design into multiplicative score boosts")
    _add(p, "--graph")
    _add(p, "--design")
    _add(p, "--partition")
    _add(p, "--scores", help="TSV src, dst, score of baseline scores (default: p_base)")
    _add(p, "--out")

    p = command("simulate", "run the simulation study")
    _add(p, "--repeats", type=int)
    _add(p, "--threads", type=int, help="worker processes (default: available cores)")
    _add(p, "--preset", choices=("desk", "full"),
         help="desk: three density settings at 10x500 nodes; full: 10x5000 nodes")
    for flag, typ in (("--delta", float), ("--d-ba", float), ("--d-er", float),
                      ("--n-clusters", int), ("--cluster-size", int), ("--bootstrap", int),
                      ("--q", float), ("--alpha", float)):
        _add(p, flag, type=typ)
    _add(p, "--methods", help="comma separated subset of oasis,cb")
    _add(p, "--no-plots", dest="plots", action="store_false")
    _add(p, "--out", help="output directory")

    p = command("report", "plot a results CSV")
    _add(p, "--results")
    _add(p, "--out", help="output directory")
    return parser


# -- option resolution ----------------------------------------------------------

def _load_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ParseError(str(exc), path, exc.lineno) from exc


def resolve(args):
    """Defaults < config file < flags; seed falls back to $OASIS_SEED."""
    flags = {k: v for k, v in vars(args).items() if k not in ("command", "config", "verbose")}
    base = dict(DEFAULTS[args.command])
    file_opts = {}
    if args.config:
        file_opts = _load_json(args.config)
        if not isinstance(file_opts, dict):
            raise ParseError("config must be a JSON object", args.config, 1)
        # bookkeeping keys written into config-resolved.json
        for key in ("schema_version", "command", "rng"):
            file_opts.pop(key, None)
    if args.command == "simulate":
        opts = {**base, **file_opts, **flags}
    else:
        unknown = set(file_opts) - set(base)
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        opts = {**base, **file_opts, **flags}
    missing = [k for k in REQUIRED[args.command] if not opts.get(k)]
    if missing:
        raise ParameterError("missing required option(s): "
                             + ", ".join("--" + k.replace("_", "-") for k in missing))
    if opts.get("seed") is None:
        env = os.environ.get("OASIS_SEED")
        try:
            opts["seed"] = int(env) if env not in (None, "") else 0
        except ValueError:
            raise ParameterError(f"OASIS_SEED must be an integer, got {env!r}") from None
    return opts


def _out_dir(path, is_dir=False):
    d = path if is_dir else (os.path.dirname(path) or ".")
    os.makedirs(d, exist_ok=True)
    return d


def _write_resolved(out_dir, command, opts, extra=None):
    payload = {"schema_version": SCHEMA_VERSION, "command": command, "rng": ALGORITHM,
               **opts, **(extra or {})}
    path = os.path.join(out_dir, "config-resolved.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True, default=str)
        fh.write("\n")
    return path


def _load_graph(opts):
    graph, treatments = oio.load(opts["graph"])
    if opts.get("treatments"):
        treatments = oio.read_treatments(graph, opts["treatments"])
    return graph, treatments


def _require_attributes(graph):
    if graph.p_base is None or np.any(np.isnan(graph.p_base)) or graph.alpha is None \
            or np.any(np.isnan(graph.alpha)):
        raise InputError("graph has no p_base/alpha attributes")


# -- commands -------------------------------------------------------------------

def cmd_gen_graph(opts):
    from .graph import generate_clustered_graph
    from .sim import generate_attributes
    graph = generate_clustered_graph(opts["n_clusters"], opts["cluster_size"], opts["d_ba"],
                                     opts["ba_power"], opts["d_er"], opts["seed"])
    treatments = None
    if opts["attributes"]:
        graph, treatments = generate_attributes(graph, opts["seed"])
    out_dir = _out_dir(opts["out"])
    oio.save(graph, treatments, opts["out"])
    _write_resolved(out_dir, "gen-graph", opts)
    log.info("wrote %d nodes, %d edges to %s", graph.n_nodes, graph.n_edges, opts["out"])


def cmd_design(opts):
    from .design import assemble_design
    from .graph import validate
    from .partition import RiskConfig, sample_partition
    from .qp import QpConfig
    graph, treatments = _load_graph(opts)
    _require_attributes(graph)
    if treatments is None:
        raise InputError("no treatments given and no companion treatment file found")
    problems = validate(graph, treatments)
    if problems:
        raise InputError(f"{len(problems)} validation problems, first: {problems[0].message}")
    solver = dict(opts.get("solver") or {})
    if opts.get("solver_config"):
        solver.update(_load_json(opts["solver_config"]))
    solver.update(k_blocks=opts["k_blocks"], max_outer=opts["max_outer"])
    try:
        qp_cfg = QpConfig.from_dict(solver)
    except (TypeError, ValueError) as exc:
        raise ParameterError(str(exc)) from None
    risk = RiskConfig(opts["r_min"], opts["r_max"], opts["s_min"], opts["s_max"])
    partition = sample_partition(graph, treatments.n_arms, opts["frac_omega"],
                                 opts["frac_lambda"], opts["q"], opts["seed"],
                                 mode=opts["exposure_mode"], frac_gamma=opts["frac_gamma"])
    if opts.get("dump_qp"):
        from .allocation import build_full_problem
        from .partition import compute_sum_bounds
        from .qp import dump_problem
        problem, _ = build_full_problem(graph, treatments, partition,
                                        compute_sum_bounds(graph, partition, risk),
                                        opts["alpha_override"])
        dump_problem(problem, opts["dump_qp"])
    t0 = time.perf_counter()
    design = assemble_design(graph, treatments, partition, risk, qp_cfg,
                             alpha_override=opts["alpha_override"])
    elapsed = time.perf_counter() - t0
    out_dir = _out_dir(opts["out"])
    oio.write_design(graph, design, opts["out"])
    stem = opts["out"][:-4] if opts["out"].endswith(".tsv") else opts["out"]
    ppath = opts.get("partition_out") or stem + ".partition.tsv"
    oio.write_partition(partition, ppath)
    trace = {"objective_trace": design.objective_trace, "block_trace": design.block_trace,
             "rejected_blocks": design.rejected_blocks, "seconds": elapsed,
             "n_optimized": int((design.provenance == 2).sum()),
             "n_consumers": int(design.bounds.consumers.size)}
    with open(stem + ".trace.json", "w") as fh:
        json.dump(trace, fh, indent=2)
        fh.write("\n")
    _write_resolved(out_dir, "design", opts)
    log.info("design: %d optimised edges, J %s", trace["n_optimized"],
             design.objective_trace[-1] if design.objective_trace else "n/a")


def cmd_measure(opts):
    from .partition import ROLE_LAMBDA, ROLE_OMEGA
    from .rng import make_rng
    from .sim import ResponseModel, compute_exposures, edge_mediators, generate_responses
    graph, treatments = _load_graph(opts)
    _require_attributes(graph)
    p_star, _ = oio.read_design(graph, opts["design"])
    partition = oio.read_partition(opts["partition"], graph.n_nodes)
    delta = opts["delta"]
    W, Z = compute_exposures(graph, p_star, delta)
    Y = generate_responses(W, Z, ResponseModel(noise_sd=opts["noise_sd"]),
                           rng=make_rng(opts["seed"], "measure"))
    out = _out_dir(opts["out"], is_dir=True)
    nodes, arms = [], []
    for r, om in enumerate(partition.omega):
        nodes.append(om)
        arms.append(np.full(om.size, r))
    nodes, arms = np.concatenate(nodes), np.concatenate(arms)
    oio.write_node_values(os.path.join(out, "exposures.tsv"), ("node", "arm", "z_star"),
                          nodes, arms, Z[nodes])
    role, arm_of = partition.role, partition.arm
    src_arm = np.where(role[graph.src] == ROLE_OMEGA, arm_of[graph.src], -1)
    dst_ok = (role[graph.dst] == ROLE_OMEGA) | (role[graph.dst] == ROLE_LAMBDA)
    edges = np.flatnonzero((src_arm >= 0) & dst_ok & (arm_of[graph.dst] == src_arm))
    e_arm = src_arm[edges]
    zt = np.empty(edges.size)
    for r in range(treatments.n_arms):
        sel = e_arm == r
        zt[sel] = edge_mediators(graph, treatments.arm(r), delta)[edges[sel]]
    oio.write_edge_values(graph, os.path.join(out, "targets.tsv"), edges, e_arm, zt)
    oio.write_node_values(os.path.join(out, "responses.tsv"), ("node", "y"),
                          np.arange(graph.n_nodes), Y)
    _write_resolved(out, "measure", opts)


def cmd_estimate(opts):
    from .estimator import EstimatorConfig, bootstrap_ci, collect_exposures
    graph = oio.read_graph(opts["graph"])
    partition = oio.read_partition(opts["partition"], graph.n_nodes)
    z_node = oio.read_node_values(opts["exposures"], ("node", "arm", "z_star"), graph.n_nodes)
    z_star = np.nanmax(np.where(np.isnan(z_node), -np.inf, z_node), axis=0)
    z_star[np.isneginf(z_star)] = np.nan
    targets = oio.read_edge_values(graph, opts["targets"], partition.n_arms)
    y = oio.read_node_values(opts["responses"], ("node", "y"), graph.n_nodes)
    sample = collect_exposures(graph, partition, None, targets, z_star_node=z_star)
    responses = []
    for r in range(sample.n_arms):
        yr = y[sample[r].nodes]
        if np.any(np.isnan(yr)):
            raise InputError(f"missing response for node {sample[r].nodes[np.isnan(yr)][0]}")
        responses.append(yr)
    shadow = [y[lam] for lam in partition.lambda_]
    shadow = None if any(np.any(np.isnan(s)) for s in shadow) else shadow
    clip = opts["clip"]
    cfg = EstimatorConfig(mode=opts["mode"], clip=None if not clip else float(clip),
                          density=opts["density"], kde_method=opts["kde_method"],
                          bootstrap=opts["bootstrap"], alpha=opts["alpha"])
    report = bootstrap_ci(sample, responses, shadow, seed=opts["seed"], config=cfg)
    out_dir = _out_dir(opts["out"])
    report.to_json(opts["out"])
    _write_resolved(out_dir, "estimate", opts)
    for e in report.effects:
        log.info("arm %d - arm 0: %.6g  CI [%.6g, %.6g]", e["r"], e["diff"], *e["ci"])


def _design_from_files(graph, opts):
    from .design import DesignOutput
    from .partition import RiskConfig, compute_sum_bounds
    p_star, prov = oio.read_design(graph, opts["design"])
    partition = oio.read_partition(opts["partition"], graph.n_nodes)
    bounds = compute_sum_bounds(graph, partition, RiskConfig())
    return DesignOutput(p_star, prov, partition, bounds, [], [])


def cmd_boost(opts):
    from .design import compute_boost_factors
    graph = oio.read_graph(opts["graph"])
    design = _design_from_files(graph, opts)
    if opts.get("scores"):
        scores = oio.read_edge_column(graph, opts["scores"], "score")
    else:
        _require_attributes(graph)
        scores = graph.p_base
    table = compute_boost_factors(graph, design, scores)
    out_dir = _out_dir(opts["out"])
    oio.write_boost(graph, table, opts["out"])
    _write_resolved(out_dir, "boost", opts)


def _sim_config(opts):
    from .sim import DESK_GRID, FULL_SCALE, SimConfig
    skip = set(DEFAULTS["simulate"]) | {"methods"}
    fields = {k: v for k, v in opts.items() if k not in skip and v is not None}
    preset = opts.get("preset")
    if preset == "desk":
        fields.setdefault("grid", list(DESK_GRID))
    elif preset == "full":
        for k, v in FULL_SCALE.items():
            fields.setdefault(k, v)
    if opts.get("methods"):
        m = opts["methods"]
        fields["methods"] = m.split(",") if isinstance(m, str) else list(m)
    if opts.get("repeats") is not None:
        fields["repeats"] = opts["repeats"]
    fields["seed"] = opts["seed"]
    try:
        return SimConfig.from_dict(fields)
    except TypeError as exc:
        raise ParameterError(str(exc)) from None


def cmd_simulate(opts):
    from .sim import run_simulation, summarize
    cfg = _sim_config(opts)
    threads = opts.get("threads") or os.cpu_count() or 1
    out = _out_dir(opts["out"], is_dir=True)
    t0 = time.perf_counter()
    results = run_simulation(cfg, threads=threads)
    elapsed = time.perf_counter() - t0
    oio.write_results(results, os.path.join(out, "results.csv"))
    with open(os.path.join(out, "summary.json"), "w") as fh:
        json.dump(summarize(results), fh, indent=2)
        fh.write("\n")
    if opts.get("plots", True):
        from .plotting import emit_plots
        emit_plots(results, out)
    resolved = cfg.to_dict()
    resolved.update(threads=threads, plots=opts.get("plots", True))
    payload = {"schema_version": SCHEMA_VERSION, "command": "simulate", "rng": ALGORITHM,
               **resolved}
    with open(os.path.join(out, "config-resolved.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.info("%d trials in %.1fs", len(results), elapsed)


def cmd_report(opts):
    from .plotting import emit_plots
    results = oio.read_results(opts["results"])
    emit_plots(results, opts["out"])
    _write_resolved(_out_dir(opts["out"], is_dir=True), "report", opts)


COMMANDS = {
    "gen-graph": cmd_gen_graph,
    "design": cmd_design,
    "measure": cmd_measure,
    "estimate": cmd_estimate,
    "boost": cmd_boost,
    "simulate": cmd_simulate,
    "report": cmd_report,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_INVALID
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    if args.verbose == 0:
        warnings.simplefilter("ignore", RuntimeWarning)
    try:
        opts = resolve(args)
        COMMANDS[args.command](opts)
    except VALIDATION_ERRORS as exc:
        print(f"oasis {args.command}: {exc.module}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OasisError as exc:
        print(f"oasis {args.command}: {exc.module}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (ValueError, TypeError) as exc:
        print(f"oasis {args.command}: invalid input: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"oasis {args.command}: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
