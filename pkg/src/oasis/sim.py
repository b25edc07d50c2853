"""Simulation study: clustered marketplace graphs, a logistic response model,
the allocation design against an oracle cluster-based baseline.

A setting fixes the graph, edge attributes and ground truth; repeats redraw the
partition, cluster choice and response noise from per-repeat streams.
"""

from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict, fields, replace
import json
import math

import numpy as np

from .design import assemble_design
from .errors import ParameterError
from .estimator import EstimatorConfig, bootstrap_ci, collect_exposures, normal_quantile
from .graph import TreatmentSet, generate_clustered_graph
from .partition import RiskConfig, sample_partition
from .qp import QpConfig
from .rng import derive_seed, make_rng

__all__ = [
    "SimConfig",
    "ResponseModel",
    "Setting",
    "TrialResult",
    "generate_attributes",
    "attributes_from_draws",
    "compute_exposures",
    "generate_responses",
    "ground_truth",
    "build_setting",
    "run_oasis_trial",
    "run_cb_trial",
    "run_simulation",
    "summarize",
    "SCHEMA_VERSION",
]

SCHEMA_VERSION = 1

DESK_GRID = (
    {"delta": 0.5, "d_ba": 10, "d_er": 1},
    {"delta": 0.5, "d_ba": 24, "d_er": 3},
    {"delta": 0.5, "d_ba": 16, "d_er": 8},
)
FULL_SCALE = {"n_clusters": 10, "cluster_size": 5000}


@dataclass(frozen=True)
class ResponseModel:
    """``Y = g(W + Z (1 + W)) + noise`` with ``g(x) = scale / (1 + exp(-x / scale))``."""

    scale: float = 10.0
    noise_sd: float = 1.0

    def link(self, x):
        return self.scale / (1.0 + np.exp(-np.asarray(x, dtype=float) / self.scale))

    def mean(self, W, Z):
        return self.link(W + Z * (1.0 + W))


@dataclass(frozen=True)
class SimConfig:
    n_clusters: int = 10
    cluster_size: int = 500
    d_ba: float = 10
    d_er: float = 1
    ba_power: float = 0.25
    delta: float = 0.5
    frac_omega: float = 0.1
    frac_lambda: float = 0.1
    q: float = 0.5
    r_min: float = 0.0
    r_max: float = 10.0
    s_min: float = 0.2
    s_max: float = 5.0
    k_blocks: int = 0
    max_outer: int = 10
    solver: dict = field(default_factory=dict)
    bootstrap: int = 1000
    alpha: float = 0.05
    clip: float = 50.0
    kde_method: str = "binned"
    noise_sd: float = 1.0
    identical_arms: bool = False
    design_alpha: float = 1.0   # None: use the true alpha in the design
    methods: tuple = ("oasis", "cb")
    repeats: int = 200
    seed: int = 0
    grid: tuple = ()            # cells {"delta", "d_ba", "d_er"} overriding the fields above
    schema_version: int = SCHEMA_VERSION

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(self.methods))
        object.__setattr__(self, "grid", tuple(dict(c) for c in self.grid))
        object.__setattr__(self, "solver", dict(self.solver))
        if self.n_clusters < 1 or self.cluster_size < 2 or self.repeats < 1:
            raise ParameterError("counts must be positive")
        for cell in (self, *[_Cell(**c) for c in self.grid]):
            if not cell.delta > 0:
                raise ParameterError("delta must be positive")
        if not self.frac_omega > 0 or self.frac_lambda < 0 or 2 * (self.frac_omega + self.frac_lambda) >= 1:
            raise ParameterError("fractions are infeasible")
        unknown = set(self.methods) - {"oasis", "cb"}
        if unknown:
            raise ParameterError(f"unknown methods {sorted(unknown)}")
        if self.schema_version != SCHEMA_VERSION:
            raise ParameterError(f"unsupported schema_version {self.schema_version}")
        RiskConfig(self.r_min, self.r_max, self.s_min, self.s_max)
        QpConfig.from_dict(self.solver)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_dict(self):
        d = asdict(self)
        d["methods"] = list(self.methods)
        d["grid"] = [dict(c) for c in self.grid]
        return d

    def cells(self):
        if not self.grid:
            return [_Cell(self.delta, self.d_ba, self.d_er)]
        return [_Cell(**c) for c in self.grid]

    @property
    def risk(self):
        return RiskConfig(self.r_min, self.r_max, self.s_min, self.s_max)

    @property
    def qp_config(self):
        return QpConfig.from_dict({**self.solver, "k_blocks": self.k_blocks,
                                   "max_outer": self.max_outer})

    @property
    def estimator_config(self):
        return EstimatorConfig(clip=self.clip, bootstrap=self.bootstrap, alpha=self.alpha,
                               kde_method=self.kde_method)


@dataclass(frozen=True)
class _Cell:
    delta: float
    d_ba: float
    d_er: float

    @property
    def label(self):
        return f"delta={self.delta:g},d_ba={self.d_ba:g},d_er={self.d_er:g}"


@dataclass(frozen=True)
class TrialResult:
    repeat: int
    method: str
    estimate: float
    truth: float
    ci_lo: float
    ci_hi: float
    delta: float = float("nan")
    d_ba: float = float("nan")
    d_er: float = float("nan")

    @property
    def error(self):
        return self.estimate - self.truth

    @property
    def covered(self):
        return bool(self.ci_lo <= self.truth <= self.ci_hi)

    def row(self):
        d = asdict(self)
        d["error"] = self.error
        d["covered"] = int(self.covered)
        return d


# -- attributes, exposures, responses ----------------------------------------------

def attributes_from_draws(graph, U, V):
    """Edge attributes from uniform draws ``U`` (alpha scale) and ``V`` (base weight).

    Returns ``(graph_with_attributes, TreatmentSet(p_base, p_treat))``.
    """
    U = np.asarray(U, dtype=float)
    V = np.asarray(V, dtype=float)
    d_in = graph.in_degree.astype(float)
    d_out = graph.out_degree.astype(float)
    alpha = U / d_in[graph.dst]
    p_base = V / graph.consumer_sums(V)[graph.dst]
    raw = p_base * np.sqrt(alpha / np.log1p(d_out[graph.src] * d_in[graph.dst]))
    p_treat = raw / graph.consumer_sums(raw)[graph.dst]
    g = graph.with_attributes(p_base=p_base, alpha=alpha)
    return g, TreatmentSet.from_graph(g, p_treat)


def generate_attributes(graph, seed):
    rng = make_rng(seed, "attributes")
    U = rng.uniform(10.0, 100.0, size=graph.n_edges)
    V = rng.uniform(1.0, 2.0, size=graph.n_edges)
    return attributes_from_draws(graph, U, V)


def compute_exposures(graph, weights, delta, alpha=None):
    """Consumer-side ``W`` and producer-side ``Z(delta)`` per node."""
    a = graph.alpha if alpha is None else alpha
    p = np.asarray(weights, dtype=float)
    d_in = graph.in_degree
    inflow = np.bincount(graph.dst, weights=a * p, minlength=graph.n_nodes)
    W = np.divide(inflow, d_in, out=np.zeros(graph.n_nodes), where=d_in > 0)
    Z = np.bincount(graph.src, weights=a * p ** delta, minlength=graph.n_nodes)
    return W, Z


def edge_mediators(graph, weights, delta):
    return graph.alpha * np.asarray(weights, dtype=float) ** delta


def generate_responses(W, Z, model=None, seed=0, rng=None):
    model = model or ResponseModel()
    rng = make_rng(seed, "responses") if rng is None else rng
    mean = model.mean(W, Z)
    return mean + model.noise_sd * rng.standard_normal(np.shape(mean))


def ground_truth(graph, treatments, delta, model=None):
    """Population mean response under each arm's full treatment, and the diffs to arm 0."""
    model = model or ResponseModel()
    tau = np.array([model.mean(*compute_exposures(graph, treatments.arm(r), delta)).mean()
                    for r in range(treatments.n_arms)])
    return tau, tau[1:] - tau[0]


# -- trials ---------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class Setting:
    graph: object
    treatments: TreatmentSet
    cell: _Cell
    tau: np.ndarray
    truth: float


def build_setting(config, cell=None):
    cell = cell or config.cells()[0]
    gseed = derive_seed(config.seed, "graph", int(config.n_clusters), int(config.cluster_size),
                        f"{cell.d_ba:g}", f"{cell.d_er:g}", f"{config.ba_power:g}")
    graph = generate_clustered_graph(config.n_clusters, config.cluster_size, cell.d_ba,
                                     config.ba_power, cell.d_er, gseed)
    graph, treatments = generate_attributes(graph, gseed)
    if config.identical_arms:
        treatments = TreatmentSet.from_graph(graph, graph.p_base)
    model = ResponseModel(noise_sd=config.noise_sd)
    tau, diff = ground_truth(graph, treatments, cell.delta, model)
    return Setting(graph, treatments, cell, tau, float(diff[0]))


def _trial(setting, method, repeat, estimate, lo, hi):
    c = setting.cell
    return TrialResult(repeat, method, float(estimate), setting.truth, float(lo), float(hi),
                       c.delta, c.d_ba, c.d_er)


def run_oasis_trial(config, setting, repeat, details=False):
    graph, treatments, delta = setting.graph, setting.treatments, setting.cell.delta
    seed = derive_seed(config.seed, setting.cell.label, "oasis", int(repeat))
    partition = sample_partition(graph, treatments.n_arms, config.frac_omega,
                                 config.frac_lambda, config.q, seed)
    design = assemble_design(graph, treatments, partition, config.risk, config.qp_config,
                             alpha_override=config.design_alpha)
    model = ResponseModel(noise_sd=config.noise_sd)
    W, Z = compute_exposures(graph, design.p_star, delta)
    Y = generate_responses(W, Z, model, rng=make_rng(seed, "noise"))
    z_star_edge = edge_mediators(graph, design.p_star, delta)
    z_target = np.vstack([edge_mediators(graph, treatments.arm(r), delta)
                          for r in range(treatments.n_arms)])
    sample = collect_exposures(graph, partition, z_star_edge, z_target)
    responses = [Y[sample[r].nodes] for r in range(sample.n_arms)]
    shadow = [Y[lam] for lam in partition.lambda_]
    report = bootstrap_ci(sample, responses, shadow, seed=seed,
                          config=config.estimator_config)
    eff = report.effects[0]
    result = _trial(setting, "oasis", repeat, eff["diff"], *eff["ci"])
    if details:
        return result, {"design": design, "report": report, "sample": sample, "Y": Y}
    return result


def run_cb_trial(config, setting, repeat):
    graph, treatments, delta = setting.graph, setting.treatments, setting.cell.delta
    n_clusters = int(graph.cluster_of.max()) + 1 if graph.cluster_of is not None else 0
    if n_clusters < 2:
        raise ParameterError("cluster-based trials need at least two clusters")
    seed = derive_seed(config.seed, setting.cell.label, "cb", int(repeat))
    rng = make_rng(seed, "clusters")
    h0, h1 = rng.choice(n_clusters, size=2, replace=False)
    weights = graph.p_base.copy()
    dst_cluster = graph.cluster_of[graph.dst]
    for r, h in ((0, h0), (1, h1)):
        e = dst_cluster == h
        weights[e] = treatments.arm(r)[e]
    model = ResponseModel(noise_sd=config.noise_sd)
    W, Z = compute_exposures(graph, weights, delta)
    Y = generate_responses(W, Z, model, rng=make_rng(seed, "noise"))
    y0 = Y[graph.cluster_of == h0]
    y1 = Y[graph.cluster_of == h1]
    est = y1.mean() - y0.mean()
    se = math.sqrt(y1.var(ddof=1) / y1.size + y0.var(ddof=1) / y0.size)
    z = normal_quantile(1.0 - config.alpha / 2.0)
    return _trial(setting, "cb", repeat, est, est - z * se, est + z * se)


def _run_chunk(args):
    config, cell, repeats = args
    setting = build_setting(config, cell)
    out = []
    for t in repeats:
        if "oasis" in config.methods:
            out.append(run_oasis_trial(config, setting, t))
        if "cb" in config.methods:
            out.append(run_cb_trial(config, setting, t))
    return out


def run_simulation(config, threads=1, progress=None):
    """All cells and repeats of ``config``; results are ordered by cell, repeat, method."""
    results = []
    for cell in config.cells():
        reps = list(range(config.repeats))
        if threads > 1:
            chunks = [reps[k::threads] for k in range(threads)]
            with ProcessPoolExecutor(threads) as pool:
                for chunk in pool.map(_run_chunk, [(config, cell, c) for c in chunks]):
                    results.extend(chunk)
        else:
            setting = build_setting(config, cell)
            for t in reps:
                if "oasis" in config.methods:
                    results.append(run_oasis_trial(config, setting, t))
                if "cb" in config.methods:
                    results.append(run_cb_trial(config, setting, t))
                if progress is not None:
                    progress(cell, t)
    order = {m: k for k, m in enumerate(("oasis", "cb"))}
    key_cells = {c.label: k for k, c in enumerate(config.cells())}
    results.sort(key=lambda r: (key_cells[_Cell(r.delta, r.d_ba, r.d_er).label],
                                r.repeat, order[r.method]))
    return results


# -- summaries -------------------------------------------------------------------

def _box_stats(err, whis=1.5):
    q1, med, q3 = np.percentile(err, [25, 50, 75])
    iqr = q3 - q1
    lo_lim, hi_lim = q1 - whis * iqr, q3 + whis * iqr
    inside = err[(err >= lo_lim) & (err <= hi_lim)]
    wlo = float(inside.min()) if inside.size else float(q1)
    whi = float(inside.max()) if inside.size else float(q3)
    return {
        "q1": float(q1), "median": float(med), "q3": float(q3),
        "whislo": wlo, "whishi": whi,
        "fliers": err[(err < wlo) | (err > whi)].tolist(),
    }


def summarize(results):
    """Coverage and error distribution per (cell, method)."""
    groups = {}
    for r in results:
        key = (float(r.delta), float(r.d_ba), float(r.d_er), r.method)
        groups.setdefault(key, []).append(r)
    rows = []
    for (delta, d_ba, d_er, method), rs in groups.items():
        err = np.array([r.error for r in rs])
        cov = np.array([r.covered for r in rs], dtype=float)
        row = {
            "delta": delta, "d_ba": d_ba, "d_er": d_er, "method": method,
            "n": len(rs), "coverage": float(cov.mean()),
            "coverage_se": float(math.sqrt(cov.mean() * (1 - cov.mean()) / len(rs))),
            "truth": float(np.mean([r.truth for r in rs])),
            "mean_error": float(err.mean()),
            "sd_error": float(err.std(ddof=1)) if err.size > 1 else 0.0,
            "rmse": float(math.sqrt(np.mean(err ** 2))),
            "mean_width": float(np.mean([r.ci_hi - r.ci_lo for r in rs])),
        }
        row.update(_box_stats(err))
        rows.append(row)
    return rows
