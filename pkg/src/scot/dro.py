"""Ambiguity sets: concentration radii, Monte-Carlo exploration of
classical / structural / G-causal balls, worst-case expected loss and the
empirical convergence-rate experiment.

All three samplers draw "rays": a random direction scaled to a fraction
``r = min(1, U(0, 2))`` of the radius, and each direction is used with
both signs.  Draw k only depends on ``(seed, k // 2)``, so streams are
order independent and the loss along a draw is convex in the radius for
convex losses, which makes the Monte-Carlo worst case nondecreasing in
the radius.
"""
from __future__ import annotations

import math
import os
from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np
from numpy.polynomial.hermite_e import hermegauss
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import linregress, norm

from . import scm as scm_mod
from .errors import ConfigError, Unsupported
from .ot import CostSpec, DiscreteDistribution, wasserstein_1d
from .relaxed import structural_wasserstein_exact

KINDS = ("classical", "structural", "gcausal_mc")


# --------------------------------------------------------------------------
# radii


@dataclass(frozen=True)
class RadiusParams:
    N: int
    eps_conf: float
    p: float = 1.0
    d: int = 1
    d_star: int = 1
    rho: float = 1.0
    C_const: float = 1.0
    c_const: float = 1.0
    n_blocks: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ConfigError("radius.N: must be >= 1")
        if not 0 < self.eps_conf <= 1:
            raise ConfigError("radius.eps_conf: must lie in (0, 1]")
        for name in ("p", "d", "d_star", "rho", "C_const", "c_const", "n_blocks"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"radius.{name}: must be positive")
        if self.p < 1:
            raise ConfigError("radius.p: must be >= 1")


def _h(x):
    return x * x / math.log(2.0 + 1.0 / x) ** 2


def h_inverse(y, tol=1e-10):
    """Inverse of x^2 / ln(2 + 1/x)^2 on x > 0 by bisection."""
    if y <= 0:
        return 0.0
    lo, hi = 0.0, 1.0
    while _h(hi) < y:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if mid > 0 and _h(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def radius_upper(params: RadiusParams) -> float:
    """Classical-ball radius, three cases by the sign of p - d/2."""
    log_term = math.log(params.C_const / params.eps_conf)
    if log_term <= 0:
        return 0.0
    p, d, N = params.p, params.d, params.N
    if p > d / 2:
        return (log_term / params.c_const) ** (1 / (2 * p)) * params.rho * N ** (-1 / (2 * p))
    if p == d / 2:
        return h_inverse(log_term / (params.c_const * N)) ** (1 / p) * params.rho
    return (log_term / params.c_const) ** (1 / d) * params.rho * N ** (-1 / d)


def radius_factored(params: RadiusParams) -> float:
    """Structural-ball radius from per-block bounds and a union bound."""
    n = params.n_blocks
    log_term = math.log(params.C_const * n / params.eps_conf)
    if log_term <= 0:
        return 0.0
    expo = 1.0 / max(params.d_star, 2 * params.p)
    return n * params.C_const * (log_term / params.N) ** expo


# --------------------------------------------------------------------------
# losses


@dataclass(frozen=True)
class LossFunction:
    name: str
    fn: Callable

    def __call__(self, atoms):
        return self.fn(np.asarray(atoms, dtype=float))

    @classmethod
    def tabulated(cls, name, grid, values):
        interp = RegularGridInterpolator([np.asarray(g, float) for g in grid], np.asarray(values, float))
        return cls(name, lambda a: interp(a))


LOSSES = {
    "abs_diff": LossFunction("abs_diff", lambda a: np.abs(a[:, 0] - a[:, 1])),
    "sq_diff": LossFunction("sq_diff", lambda a: (a[:, 0] - a[:, 1]) ** 2),
    "abs_sum": LossFunction("abs_sum", lambda a: np.abs(a[:, 0] + a[:, 1])),
    "sq_sum": LossFunction("sq_sum", lambda a: (a[:, 0] + a[:, 1]) ** 2),
    "sumsq": LossFunction("sumsq", lambda a: a[:, 0] ** 2 + a[:, 1] ** 2),
}


def get_loss(name) -> LossFunction:
    try:
        return LOSSES[name]
    except KeyError:
        raise ConfigError(f"unknown loss {name!r}; known: {sorted(LOSSES)}")


# --------------------------------------------------------------------------
# samplers


@dataclass(frozen=True)
class AmbiguityConfig:
    kind: str
    delta: float
    mc_count: int = 10000
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"ambiguity.kind: expected one of {KINDS}, got {self.kind!r}")
        if not (self.delta >= 0 and math.isfinite(self.delta)):
            raise ConfigError("ambiguity.delta: must be finite and >= 0")
        if self.mc_count < 1:
            raise ConfigError("ambiguity.mc_count: must be >= 1")


def _draw_rng(seed, k):
    return np.random.default_rng([int(seed), k // 2])


def _sign(k):
    return 1.0 if k % 2 == 0 else -1.0


def _fraction(rng):
    # half the draws sit on the boundary, the rest fill the interior
    return min(1.0, rng.uniform(0.0, 2.0))


def random_field(points, weights, rng):
    """Random displacement field on a weighted point cloud.

    One of three families, equally likely: independent Gaussian jitter,
    a random affine map, or a smooth Gaussian-bump field.
    """
    m, d = points.shape
    centred = points - weights @ points
    family = rng.integers(3)
    if family == 0:
        return rng.standard_normal((m, d))
    if family == 1:
        return centred @ rng.standard_normal((d, d)).T + rng.standard_normal(d)
    spread = math.sqrt(max(float(weights @ (centred**2).sum(axis=1)) / d, 1e-300))
    length = spread * math.exp(rng.uniform(math.log(0.3), math.log(3.0)))
    centres = points[rng.integers(m, size=8)]
    bumps = np.exp(-((points[:, None, :] - centres[None]) ** 2).sum(-1) / (2 * length**2))
    return bumps @ rng.standard_normal((8, d))


def displacement_cost(disp, weights, p):
    """(sum_k w_k * sum_i |disp_ki|^p)^(1/p): cost of moving atom k by disp_k."""
    return float(weights @ (np.abs(disp) ** p).sum(axis=1)) ** (1.0 / p)


def _scaled(disp, weights, p, target):
    c = displacement_cost(disp, weights, p)
    if c <= 0 or target <= 0:
        return np.zeros_like(disp)
    return disp * (target / c)


def sample_classical_ball(base: DiscreteDistribution, cfg: AmbiguityConfig, cost: CostSpec, model=None):
    """Stream of distributions within classical distance delta of ``base``.

    Atoms of ``base`` are moved by a random field scaled so the moving
    coupling costs at most delta.  With ``model`` given, ``base`` is read
    in exogenous coordinates and each draw is pushed through g, i.e. the
    ball is taken for the exogenous cost.
    """
    if cfg.kind != "classical":
        raise ConfigError("sample_classical_ball needs kind='classical'")
    for k in range(cfg.mc_count):
        rng = _draw_rng(cfg.seed, k)
        r = _fraction(rng)
        disp = _scaled(random_field(base.atoms, base.weights, rng), base.weights, cost.p, r * cfg.delta)
        atoms = base.atoms + _sign(k) * disp
        if model is not None:
            atoms = model.forward(atoms)
        yield DiscreteDistribution(atoms, base.weights)


def sample_structural_ball(base: scm_mod.SampleMatrix, model, cfg: AmbiguityConfig, cost: CostSpec):
    """Stream of feature-space distributions within structural distance delta.

    Each exogenous coordinate marginal of the base is moved on its own,
    with budgets delta_i^p drawn from a flat Dirichlet over delta^p; the
    product of the moved marginals is pushed through g.
    """
    if cfg.kind != "structural":
        raise ConfigError("sample_structural_ball needs kind='structural'")
    ex = base if base.space == scm_mod.EXOGENOUS else scm_mod.push_to_exogenous(model, base)
    margs = scm_mod.coordinate_marginals(ex)
    n = len(margs)
    p = cost.p
    for k in range(cfg.mc_count):
        rng = _draw_rng(cfg.seed, k)
        r = _fraction(rng)
        shares = rng.dirichlet(np.ones(n))
        moved = []
        for (vals, wts), share in zip(margs, shares):
            field1 = random_field(vals[:, None], wts, rng)
            disp = _scaled(field1, wts, p, r * cfg.delta * share ** (1.0 / p))[:, 0]
            moved.append((vals + _sign(k) * disp, wts))
        prod = scm_mod.product_distribution(moved)
        yield DiscreteDistribution(model.forward(prod.atoms), prod.weights)


@dataclass(frozen=True)
class GaussianBase:
    """Two-node linear-Gaussian demo: A = U_A, E = alpha * A + U_E."""

    alpha: float = 0.5
    grid_size: int = 10
    n: int = 2

    def mixing(self):
        return np.array([[1.0, 0.0], [self.alpha, 1.0]])

    def model(self, trunc=5.0):
        dag = scm_mod.DagSpec([[], [0]])
        eqs = [scm_mod.LinearEquation(), scm_mod.LinearEquation([self.alpha])]
        noise = [scm_mod.TruncatedGaussian(0.0, 1.0, -trunc, trunc)] * 2
        return scm_mod.ScmModel(dag, eqs, noise, ["A", "E"])

    def nodes(self):
        z, w = hermegauss(self.grid_size)
        return z, w / w.sum()

    def exogenous_grid(self):
        z, w = self.nodes()
        return scm_mod.product_distribution([(z, w), (z, w)])

    def base_sample(self):
        """Feature-space weighted sample: the Gauss-Hermite product grid pushed through g."""
        grid = self.exogenous_grid()
        return scm_mod.SampleMatrix(grid.atoms @ self.mixing().T, scm_mod.FEATURE, grid.weights)


def gaussian_plan_cost(theta, p):
    """Expected cost of the plan U' = U + M xi + mu, summed over coordinates.

    theta = (a1, a2, a3, e1, e2, e3, e4, e5): the A-shift has loadings a1
    on Z_A and a2 on V_A plus mean a3; the E-shift has loadings e1..e4 on
    Z_E, Z_A, V_A, V_E plus mean e5.
    """
    theta = np.asarray(theta, dtype=float)
    sd_a, mu_a = math.hypot(theta[0], theta[1]), theta[2]
    sd_e, mu_e = float(np.linalg.norm(theta[3:7])), theta[7]
    if p == 2:
        return math.sqrt(sd_a**2 + mu_a**2 + sd_e**2 + mu_e**2)
    if p == 1:
        return _folded_mean(mu_a, sd_a) + _folded_mean(mu_e, sd_e)
    raise Unsupported(f"closed-form Gaussian plan cost only for p in (1, 2), got {p}")


def _folded_mean(mu, sd):
    if sd == 0:
        return abs(mu)
    return sd * math.sqrt(2 / math.pi) * math.exp(-(mu**2) / (2 * sd**2)) + mu * (1 - 2 * norm.cdf(-mu / sd))


def _plan_maps(theta):
    # rows: U'_A, U'_E as linear maps of xi = (Z_A, Z_E, V_A, V_E) plus a mean
    M = np.array(
        [
            [1.0 + theta[0], 0.0, theta[1], 0.0],
            [theta[4], 1.0 + theta[3], theta[5], theta[6]],
        ]
    )
    return M, np.array([theta[2], theta[7]])


def sample_gcausal_mc(base: GaussianBase, cfg: AmbiguityConfig, cost: CostSpec | None = None):
    """Target marginals of random Gaussian plans that respect the causal order.

    The plan is U' = U + M xi + mu with xi = (Z_A, Z_E, V_A, V_E), where
    U = (Z_A, Z_E) is the base noise and V independent extra noise.  The
    shift of A never looks at Z_E, so given the source parents the source
    child is independent of the target parents.  Draws are scaled so the
    closed-form plan cost is at most delta.  The second marginal is
    returned on the image of a fixed Gauss-Hermite grid for xi.
    """
    if cfg.kind != "gcausal_mc":
        raise ConfigError("sample_gcausal_mc needs kind='gcausal_mc'")
    if base.n != 2:
        raise Unsupported("the Gaussian-plan sampler covers the two-node model only")
    cost = cost or CostSpec(2.0)
    z, w = base.nodes()
    xi = np.stack(np.meshgrid(z, z, z, z, indexing="ij"), axis=-1).reshape(-1, 4)
    wts = np.einsum("i,j,k,l->ijkl", w, w, w, w).ravel()
    B = base.mixing()
    for k in range(cfg.mc_count):
        rng = _draw_rng(cfg.seed, k)
        r = _fraction(rng)
        theta = rng.standard_normal(8)
        c = gaussian_plan_cost(theta, cost.p)
        theta = theta * (r * cfg.delta / c) if c > 0 else theta * 0
        M, mu = _plan_maps(_sign(k) * theta)
        u_new = xi @ M.T + mu
        yield DiscreteDistribution(u_new @ B.T, wts)


# --------------------------------------------------------------------------
# worst-case loss


@dataclass
class WorstCase:
    value: float
    index: int
    values: np.ndarray

    def standard_error(self, n_boot=200, seed=0):
        return bootstrap_max_se(self.values, n_boot, seed)


def evaluate_stream(stream: Iterable[DiscreteDistribution], psis):
    """Matrix of E_Q[psi] with one row per draw and one column per loss."""
    rows = [[float(q.weights @ psi(q.atoms)) for psi in psis] for q in stream]
    if not rows:
        raise ConfigError("empty sampler stream")
    return np.asarray(rows)


def worst_case_loss(stream, psi):
    """(max over draws of E_Q[psi], index of the maximising draw)."""
    vals = evaluate_stream(stream, [psi])[:, 0]
    idx = int(np.argmax(vals))
    return WorstCase(float(vals[idx]), idx, vals)


def worst_case_table(stream, psis):
    vals = evaluate_stream(stream, psis)
    idx = np.argmax(vals, axis=0)
    return [WorstCase(float(vals[i, j]), int(i), vals[:, j]) for j, i in enumerate(idx)]


def bootstrap_max_se(values, n_boot=200, seed=0):
    """Bootstrap standard error of the Monte-Carlo maximum."""
    values = np.asarray(values, dtype=float)
    rng = np.random.default_rng(seed)
    maxima = [values[rng.integers(values.size, size=values.size)].max() for _ in range(n_boot)]
    return float(np.std(maxima, ddof=1))


def sampler_stream(kind, delta, mc_count, seed, base: GaussianBase, cost: CostSpec):
    """Stream for one ball kind around the Gaussian demo base."""
    cfg = AmbiguityConfig(kind, delta, mc_count, seed)
    model = base.model()
    if kind == "classical":
        return sample_classical_ball(base.exogenous_grid(), cfg, cost, model=model)
    if kind == "structural":
        return sample_structural_ball(base.base_sample(), model, cfg, cost)
    return sample_gcausal_mc(base, cfg, cost)


# --------------------------------------------------------------------------
# rates


def _pot():
    # keep POT from importing optional deep-learning backends
    for name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
        os.environ.setdefault(f"POT_BACKEND_DISABLE_{name}", "1")
    import ot as pot

    return pot


def classical_distance_large(a: DiscreteDistribution, b: DiscreteDistribution, p):
    """Exact W_p for instances beyond the LP oracle, via network simplex."""
    if a.dim == 1:
        return wasserstein_1d(a, b, p)
    pot = _pot()
    C = (np.abs(a.atoms[:, None, :] - b.atoms[None, :, :]) ** p).sum(-1)
    value = pot.emd2(a.weights, b.weights, C, numItermax=10**7)
    return max(float(value), 0.0) ** (1.0 / p)


@dataclass
class RateResult:
    rows: list
    n_list: list
    mean_classical: list
    mean_factored: list
    slope_classical: float | None
    slope_factored: float | None
    se_classical: float | None
    se_factored: float | None
    n_ref: int

    @property
    def slopes_absent(self):
        return self.slope_classical is None


def rate_experiment(model, N_list, trials, p, seed, n_ref=None):
    """Empirical convergence of classical vs factored distances to a reference sample.

    Classical: exact W_p between the raw empirical measure and the
    reference, both in exogenous coordinates.  Factored: structural
    distance between the product reconstruction and the reference.
    """
    N_list = [int(v) for v in N_list]
    if not N_list or min(N_list) < 1:
        raise ConfigError("rates.N_list: need at least one positive N")
    if trials < 1:
        raise ConfigError("rates.trials: must be >= 1")
    cost = CostSpec(p)
    n_ref = int(n_ref or 20 * max(N_list))
    seeds = [int(v) for v in np.random.SeedSequence(seed).generate_state(1 + len(N_list) * trials)]
    ref = scm_mod.sample_noise(model, n_ref, seeds[0])
    ref_dist = ref.as_distribution()
    ref_feat = scm_mod.push_to_feature(model, ref)
    rows = []
    k = 1
    for N in N_list:
        for t in range(trials):
            s = scm_mod.sample(model, N, seeds[k])
            k += 1
            ex = scm_mod.push_to_exogenous(model, s)
            wc = classical_distance_large(ex.as_distribution(), ref_dist, p)
            wf = structural_wasserstein_exact(s, ref_feat, model, cost)
            rows.append((N, t, wc, wf))
    arr = np.asarray(rows)
    mc = [float(arr[arr[:, 0] == N, 2].mean()) for N in N_list]
    mf = [float(arr[arr[:, 0] == N, 3].mean()) for N in N_list]
    slopes = [None, None]
    ses = [None, None]
    if len(set(N_list)) >= 2:
        for j, means in enumerate((mc, mf)):
            fit = linregress(np.log(N_list), np.log(means))
            slopes[j], ses[j] = float(fit.slope), float(fit.stderr)
    return RateResult(rows, N_list, mc, mf, slopes[0], slopes[1], ses[0], ses[1], n_ref)


__all__ = [
    "RadiusParams",
    "radius_upper",
    "radius_factored",
    "h_inverse",
    "AmbiguityConfig",
    "LossFunction",
    "LOSSES",
    "sample_classical_ball",
    "sample_structural_ball",
    "sample_gcausal_mc",
    "GaussianBase",
    "gaussian_plan_cost",
    "worst_case_loss",
    "worst_case_table",
    "rate_experiment",
]
