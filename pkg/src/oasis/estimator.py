"""Importance-sampling adjustment for the allocation design.

Pipeline per arm ``r``:

1. source density of the observed exposures ``Z_i(T*)`` (Gaussian KDE),
2. target mean/variance of ``Z_i(T^(r))`` from the edge-level samples on
   consumer-exact children, with the degree-sampling correction,
3. target density by shifting/rescaling the source density to those moments,
4. weights ``f_target(z) / f_source(z)`` and a (self-normalised) weighted mean.

Confidence intervals come from a bootstrap over the measurement nodes.
"""

from dataclasses import dataclass, field, asdict
from functools import cached_property
import json
import math
import warnings

import numpy as np
from scipy.special import ndtri

from .errors import (DegenerateDensityError, ParameterError, EstimationError, InputError,
                     InsufficientOverlapError)
from .partition import ROLE_LAMBDA, ROLE_OMEGA
from .rng import make_rng

__all__ = [
    "ArmExposure",
    "ExposureSample",
    "DensityModel",
    "EstimatorConfig",
    "EstimateReport",
    "collect_exposures",
    "estimate_source_density",
    "estimate_target_moments",
    "target_density",
    "importance_weights",
    "estimate_effects",
    "estimate_arm",
    "bootstrap_ci",
    "normal_quantile",
]

SQRT_2PI = math.sqrt(2.0 * math.pi)
SILVERMAN = 1.06


def normal_quantile(p):
    return float(ndtri(p))


# -- exposures ------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ArmExposure:
    """Per-producer exposure data for one measurement arm."""

    arm: int
    nodes: np.ndarray
    z_star: np.ndarray
    n_children: np.ndarray
    n_obs: np.ndarray
    obs_sum: np.ndarray
    obs_sumsq: np.ndarray
    target_values: np.ndarray = field(repr=False)
    target_owner: np.ndarray = field(repr=False)

    @property
    def rho(self):
        return self.n_obs / self.n_children

    @property
    def rho_prime(self):
        d = self.n_children
        with np.errstate(divide="ignore", invalid="ignore"):
            rp = (self.n_obs - 1.0) / (d - 1.0)
        return np.where(d == 1, 1.0, rp)

    @property
    def size(self):
        return int(self.nodes.size)


@dataclass(frozen=True, eq=False)
class ExposureSample:
    arms: tuple

    def __getitem__(self, r):
        return self.arms[r]

    @property
    def n_arms(self):
        return len(self.arms)


def collect_exposures(graph, partition, z_star_edge, z_target_edge, z_star_node=None):
    """Gather ``Z_i(T*)`` and the edge-level target samples per measurement arm.

    ``z_star_edge`` holds ``Z_ij(T*)`` per edge and ``z_target_edge[r]`` holds
    ``Z_ij(T^(r))``; NaN marks values that were not recorded.  Per-producer
    totals may be passed instead as ``z_star_node`` (``z_star_edge=None``).
    Producers without children are left out.
    """
    if z_star_edge is None and z_star_node is None:
        raise InputError("need edge-level or node-level exposures")
    if z_star_edge is not None:
        z_star_edge = np.asarray(z_star_edge, dtype=float)
    z_target_edge = np.atleast_2d(np.asarray(z_target_edge, dtype=float))
    role, arm_of = partition.role, partition.arm
    arms = []
    for r, members in enumerate(partition.omega):
        deg = graph.out_degree[members]
        nodes = members[deg > 0]
        d = graph.out_degree[nodes]
        edges = np.concatenate([graph.children(i) for i in nodes]) if nodes.size else np.empty(0, np.int64)
        owner = np.repeat(np.arange(nodes.size), d)
        if z_star_edge is not None:
            zs = z_star_edge[edges]
            if np.any(np.isnan(zs)):
                e = edges[np.flatnonzero(np.isnan(zs))[0]]
                raise InputError(f"missing exposure value on edge ({graph.src[e]}, {graph.dst[e]})")
            z_star = np.bincount(owner, weights=zs, minlength=nodes.size)
        else:
            z_star = np.asarray(z_star_node, dtype=float)[nodes]
            if np.any(np.isnan(z_star)):
                raise InputError(f"missing exposure for node {nodes[np.isnan(z_star)][0]}")
        j = graph.dst[edges]
        observed = ((role[j] == ROLE_OMEGA) | (role[j] == ROLE_LAMBDA)) & (arm_of[j] == r)
        e_obs = edges[observed]
        vals = z_target_edge[r, e_obs] if e_obs.size else np.empty(0)
        if np.any(np.isnan(vals)):
            e = e_obs[np.flatnonzero(np.isnan(vals))[0]]
            raise InputError(f"missing target sample on edge ({graph.src[e]}, {graph.dst[e]})")
        own = owner[observed]
        arms.append(ArmExposure(
            arm=r, nodes=nodes, z_star=z_star, n_children=d.astype(float),
            n_obs=np.bincount(own, minlength=nodes.size).astype(float),
            obs_sum=np.bincount(own, weights=vals, minlength=nodes.size),
            obs_sumsq=np.bincount(own, weights=vals * vals, minlength=nodes.size),
            target_values=vals, target_owner=own,
        ))
    return ExposureSample(tuple(arms))


def _moments(exp, counts=None):
    c = np.ones(exp.size) if counts is None else counts
    rho = exp.rho
    rr = rho * exp.rho_prime
    s_rho = float(c @ rho)
    s_rr = float(c @ rr)
    if not s_rho > 0:
        raise InsufficientOverlapError(f"arm {exp.arm}: no producer has a consumer-exact child")
    v1 = float(c @ exp.obs_sum)
    v2 = float(c @ exp.obs_sumsq)
    v3 = float(c @ (exp.obs_sum ** 2))
    mu = v1 / s_rho
    cross = v3 - v2
    if s_rr > 0:
        m2 = v2 / s_rho + cross / s_rr
    elif abs(cross) <= 1e-12 * max(1.0, abs(v2)):
        m2 = v2 / s_rho
    else:
        raise InsufficientOverlapError(f"arm {exp.arm}: no producer has two observed children")
    return mu, m2 - mu * mu


def estimate_target_moments(sample, arm=None):
    """Mean and variance of ``Z_i(T^(r))``; the variance may be <= 0 at small n."""
    exp = sample if isinstance(sample, ArmExposure) else sample[arm]
    return _moments(exp)


# -- densities --------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class DensityModel:
    """Gaussian KDE (optionally with sample multiplicities) or a normal density.

    Evaluations are floored at ``floor``.  ``method="binned"`` evaluates the
    KDE through linear binning on ``grid_size`` points and an FFT convolution;
    ``"exact"`` sums every kernel.
    """

    kind: str
    bandwidth: float
    mean: float
    sd: float
    samples: np.ndarray = None
    weights: np.ndarray = None
    floor: float = 0.0
    method: str = "binned"
    grid_size: int = 1024

    @property
    def total_weight(self):
        return float(self.samples.size if self.weights is None else self.weights.sum())

    def raw(self, z):
        z = np.asarray(z, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-0.5 * ((z - self.mean) / self.sd) ** 2) / (self.sd * SQRT_2PI)
        if self.method == "exact":
            return self._exact(z)
        grid, dens = self._grid
        return np.interp(z, grid, dens, left=0.0, right=0.0)

    def evaluate(self, z):
        return np.maximum(self.raw(z), self.floor)

    __call__ = evaluate

    def _exact(self, z):
        h = self.bandwidth
        w = np.ones(self.samples.size) if self.weights is None else self.weights
        flat = np.atleast_1d(z).ravel()
        out = np.empty(flat.size)
        step = max(1, 2_000_000 // max(self.samples.size, 1))
        for s in range(0, flat.size, step):
            u = (flat[s:s + step, None] - self.samples[None, :]) / h
            out[s:s + step] = np.exp(-0.5 * u * u) @ w
        out /= self.total_weight * h * SQRT_2PI
        return out.reshape(np.shape(z))

    @cached_property
    def _grid(self):
        h, G = self.bandwidth, self.grid_size
        lo = float(self.samples.min()) - 8.0 * h
        hi = float(self.samples.max()) + 8.0 * h
        delta = (hi - lo) / (G - 1)
        pos = (self.samples - lo) / delta
        k = np.minimum(np.floor(pos).astype(np.int64), G - 2)
        frac = pos - k
        w = np.ones(self.samples.size) if self.weights is None else self.weights
        counts = (np.bincount(k, weights=w * (1.0 - frac), minlength=G)
                  + np.bincount(k + 1, weights=w * frac, minlength=G))
        # kernel truncated at 8 bandwidths, like the grid margin
        L = min(G - 1, int(np.ceil(8.0 * h / delta)))
        offsets = np.arange(-L, L + 1) * delta
        kern = np.exp(-0.5 * (offsets / h) ** 2) / (h * SQRT_2PI)
        nfft = 1 << int(np.ceil(np.log2(G + 2 * L)))
        conv = np.fft.irfft(np.fft.rfft(counts, nfft) * np.fft.rfft(kern, nfft), nfft)
        dens = np.maximum(conv[L:L + G], 0.0) / self.total_weight
        grid = lo + delta * np.arange(G)
        return grid, dens

    def peak(self):
        if self.kind == "gaussian":
            return 1.0 / (self.sd * SQRT_2PI)
        if self.method == "exact":
            return float(self._exact(self.samples).max())
        return float(self._grid[1].max())

    def transformed(self, shift_from, shift_to, scale):
        """Density of ``shift_to + scale * (Z - shift_from)`` for ``Z`` from this model."""
        if self.kind == "gaussian":
            return DensityModel("gaussian", 0.0, shift_to + scale * (self.mean - shift_from),
                                self.sd * scale, floor=self.floor / scale)
        out = DensityModel(
            "kde", self.bandwidth * scale, shift_to + scale * (self.mean - shift_from),
            self.sd * scale, samples=shift_to + scale * (self.samples - shift_from),
            weights=self.weights, floor=self.floor / scale, method=self.method,
            grid_size=self.grid_size,
        )
        if "_grid" in self.__dict__:
            # binning commutes with the affine map, so the grid carries over
            grid, dens = self._grid
            out.__dict__["_grid"] = (shift_to + scale * (grid - shift_from), dens / scale)
        return out


def _weighted_mean_sd(x, w):
    tot = w.sum()
    mean = float(w @ x) / tot
    var = float(w @ (x - mean) ** 2) / tot
    return mean, math.sqrt(max(var, 0.0))


def estimate_source_density(samples, kind="kde", method="binned", counts=None,
                            floor_rel=1e-12, bandwidth=None, grid_size=1024):
    """Fit the density of observed exposures; Silverman bandwidth by default."""
    x = np.asarray(samples, dtype=float).ravel()
    w = None if counts is None else np.asarray(counts, dtype=float).ravel()
    if w is not None:
        keep = w > 0
        x, w = x[keep], w[keep]
    ww = np.ones(x.size) if w is None else w
    n = float(ww.sum())
    if x.size < 2 or n < 2:
        raise DegenerateDensityError("need at least two samples")
    mean, sd = _weighted_mean_sd(x, ww)
    if not sd > 1e-12 * max(1.0, abs(mean)):
        raise DegenerateDensityError("samples have zero variance")
    if kind == "gaussian":
        model = DensityModel("gaussian", 0.0, mean, sd)
    elif kind == "kde":
        h = SILVERMAN * sd * n ** (-0.2) if bandwidth is None else float(bandwidth)
        model = DensityModel("kde", h, mean, sd, samples=x, weights=w, method=method,
                             grid_size=grid_size)
    else:
        raise ValueError(f"unknown density kind {kind!r}")
    return _with_floor(model, floor_rel)


def _with_floor(model, floor_rel):
    out = DensityModel(model.kind, model.bandwidth, model.mean, model.sd, model.samples,
                       model.weights, 0.0, model.method, model.grid_size)
    peak = out.peak()
    final = DensityModel(out.kind, out.bandwidth, out.mean, out.sd, out.samples, out.weights,
                         floor_rel * peak, out.method, out.grid_size)
    if "_grid" in out.__dict__:
        final.__dict__["_grid"] = out.__dict__["_grid"]
    return final


def target_density(source, source_moments, target_moments, warn=True):
    """Shift and rescale ``source`` so it has the target mean and standard deviation.

    ``source_moments`` and ``target_moments`` are ``(mean, sd)`` pairs.  A
    non-positive or non-finite target sd falls back to the source sd.
    """
    mu_s, sd_s = source_moments
    mu_t, sd_t = target_moments
    if not sd_s > 0:
        raise DegenerateDensityError("source standard deviation must be positive")
    if not (np.isfinite(sd_t) and sd_t > 0):
        if warn:
            warnings.warn("target variance estimate is not positive; using the source variance",
                          RuntimeWarning, stacklevel=2)
        sd_t = sd_s
    return source.transformed(mu_s, mu_t, sd_t / sd_s)


def importance_weights(z, target, source, clip=None):
    """Density-ratio weights; returns ``(weights, clipped_mask)``."""
    z = np.asarray(z, dtype=float)
    w = target.evaluate(z) / np.maximum(source.evaluate(z), source.floor)
    clipped = np.zeros(w.shape, dtype=bool)
    if clip is not None and np.isfinite(clip):
        clipped = w > clip
        w = np.minimum(w, clip)
    return w, clipped


def estimate_effects(responses, weights, mode="self_normalized", counts=None):
    """Weighted arm means and differences against arm 0.

    ``responses`` and ``weights`` are sequences with one array per arm.
    """
    taus = []
    for r, (y, w) in enumerate(zip(responses, weights)):
        y = np.asarray(y, dtype=float)
        w = np.asarray(w, dtype=float)
        c = np.ones(y.size) if counts is None else np.asarray(counts[r], dtype=float)
        if c.sum() < 2:
            raise EstimationError(f"arm {r} needs at least two measurements")
        if mode == "self_normalized":
            sw = float(c @ w)
            if not sw > 0:
                raise EstimationError(f"arm {r}: weights sum to zero")
            taus.append(float(c @ (w * y)) / sw)
        elif mode == "plain":
            taus.append(float(c @ (w * y)) / float(c.sum()))
        else:
            raise ValueError(f"unknown estimator mode {mode!r}")
    taus = np.asarray(taus)
    return taus, taus[1:] - taus[0]


# -- full pipeline -------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorConfig:
    mode: str = "self_normalized"
    clip: float = 50.0          # None disables clipping
    density: str = "kde"
    kde_method: str = "binned"
    grid_size: int = 1024
    floor_rel: float = 1e-12
    bootstrap: int = 1000
    alpha: float = 0.05


@dataclass
class ArmFit:
    tau: float
    weights: np.ndarray
    clipped: int
    fallback: bool
    target_mean: float
    target_sd: float


def estimate_arm(exp, y, config=None, counts=None, warn=True):
    """Weighted estimate of one arm's mean response under its full treatment."""
    cfg = config or EstimatorConfig()
    c = np.ones(exp.size) if counts is None else counts
    fallback = False
    try:
        src = estimate_source_density(exp.z_star, cfg.density, cfg.kde_method, counts,
                                      cfg.floor_rel, grid_size=cfg.grid_size)
        mu_s, sd_s = src.mean, src.sd
        mu_t, var_t = _moments(exp, counts)
        tgt = target_density(src, (mu_s, sd_s), (mu_t, math.sqrt(var_t) if var_t > 0 else float("nan")),
                             warn=warn)
        w, clipped = importance_weights(exp.z_star, tgt, src, cfg.clip)
        sd_t = tgt.sd
    except DegenerateDensityError:
        if warn:
            warnings.warn(f"arm {exp.arm}: degenerate exposure density, using unit weights",
                          RuntimeWarning, stacklevel=2)
        fallback = True
        w, clipped = np.ones(exp.size), np.zeros(exp.size, dtype=bool)
        mu_t, sd_t = float("nan"), float("nan")
    (tau,), _ = estimate_effects([y], [w], cfg.mode, counts=None if counts is None else [c])
    return ArmFit(tau, w, int((clipped * c).sum()), fallback, mu_t, sd_t)


@dataclass
class EstimateReport:
    arms: list
    effects: list
    diagnostics: dict
    shadow: dict = None

    def to_dict(self):
        return asdict(self)

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2, default=float)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def _ess(w, c):
    s1 = float(c @ w)
    s2 = float(c @ (w * w))
    return s1 * s1 / s2 if s2 > 0 else 0.0


def bootstrap_ci(sample, responses, shadow_responses=None, B=None, alpha=None, seed=0,
                 config=None):
    """Point estimates with bootstrap standard errors and normal intervals.

    ``responses[r]`` are the responses of ``sample[r].nodes`` (same order).
    ``shadow_responses[r]``, if given, are the responses of the shadow set of
    arm ``r``; their unweighted difference to arm 0 is reported as well.
    """
    cfg = config or EstimatorConfig()
    B = cfg.bootstrap if B is None else int(B)
    alpha = cfg.alpha if alpha is None else float(alpha)
    if B < 100:
        raise ParameterError("need at least 100 bootstrap replicates")
    n_arms = sample.n_arms
    ys = [np.asarray(responses[r], dtype=float) for r in range(n_arms)]
    for r in range(n_arms):
        if ys[r].size != sample[r].size:
            raise InputError(f"arm {r}: {ys[r].size} responses for {sample[r].size} producers")
    z = normal_quantile(1.0 - alpha / 2.0)

    fits = [estimate_arm(sample[r], ys[r], cfg) for r in range(n_arms)]
    tau = np.array([f.tau for f in fits])

    sizes = [sample[r].size for r in range(n_arms)]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    n_total = int(offsets[-1])
    reps = np.full((B, n_arms), np.nan)
    dropped = 0
    fallbacks = 0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        for t in range(B):
            rng = make_rng(seed, "bootstrap", t)
            counts = np.bincount(rng.integers(0, n_total, size=n_total), minlength=n_total)
            row = np.empty(n_arms)
            ok = True
            for r in range(n_arms):
                c = counts[offsets[r]:offsets[r + 1]].astype(float)
                if c.sum() < 2:
                    ok = False
                    break
                try:
                    fit = estimate_arm(sample[r], ys[r], cfg, counts=c, warn=False)
                except (EstimationError, InsufficientOverlapError):
                    ok = False
                    break
                fallbacks += fit.fallback
                row[r] = fit.tau
            if ok:
                reps[t] = row
            else:
                dropped += 1
    good = reps[~np.isnan(reps).any(axis=1)]
    if good.shape[0] < 2:
        raise EstimationError("fewer than two usable bootstrap replicates")
    sd_arm = good.std(axis=0, ddof=1)
    diffs = good[:, 1:] - good[:, :1]
    sd_diff = diffs.std(axis=0, ddof=1) if n_arms > 1 else np.empty(0)

    arms = [{"r": r, "tau_hat": float(tau[r]), "sigma_hat": float(sd_arm[r]),
             "ci": [float(tau[r] - z * sd_arm[r]), float(tau[r] + z * sd_arm[r])]}
            for r in range(n_arms)]
    effects = []
    for k in range(1, n_arms):
        d = float(tau[k] - tau[0])
        s = float(sd_diff[k - 1])
        effects.append({"r": k, "diff": d, "sigma_hat": s, "ci": [d - z * s, d + z * s]})
    ones = [np.ones(sample[r].size) for r in range(n_arms)]
    diagnostics = {
        "max_weight": [float(f.weights.max(initial=0.0)) for f in fits],
        "ess": [_ess(f.weights, o) for f, o in zip(fits, ones)],
        "n": sizes,
        "clipped": [f.clipped for f in fits],
        "target_mean": [f.target_mean for f in fits],
        "target_sd": [f.target_sd for f in fits],
        "density_fallback": [f.fallback for f in fits],
        "replicates": int(B),
        "dropped_replicates": int(dropped),
        "replicate_density_fallbacks": int(fallbacks),
    }
    shadow = None
    if shadow_responses is not None:
        shadow = _shadow(shadow_responses, B, z, seed)
    return EstimateReport(arms, effects, diagnostics, shadow)


def _shadow(shadow_responses, B, z, seed):
    ys = [np.asarray(y, dtype=float) for y in shadow_responses]
    if len(ys) < 2 or any(y.size < 2 for y in ys):
        return None
    sizes = [y.size for y in ys]
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    allv = np.concatenate(ys)
    n = allv.size
    point = np.array([y.mean() for y in ys])
    reps = []
    for t in range(B):
        rng = make_rng(seed, "shadow", t)
        c = np.bincount(rng.integers(0, n, size=n), minlength=n).astype(float)
        means = []
        for r in range(len(ys)):
            cr = c[offsets[r]:offsets[r + 1]]
            if cr.sum() < 1:
                break
            means.append(float(cr @ ys[r]) / cr.sum())
        if len(means) == len(ys):
            reps.append(means)
    reps = np.asarray(reps)
    diffs = reps[:, 1:] - reps[:, :1]
    sd = diffs.std(axis=0, ddof=1)
    out = []
    for k in range(1, len(ys)):
        d = float(point[k] - point[0])
        out.append({"r": k, "diff": d, "sigma_hat": float(sd[k - 1]),
                    "ci": [d - z * float(sd[k - 1]), d + z * float(sd[k - 1])]})
    first = dict(out[0])
    first["arms"] = out
    return first
