"""Discrete optimal transport: costs, exact LP oracle, 1-D closed form,
entropic Sinkhorn (two-marginal and multi-marginal) and plan entropies.

Convention: ``H(m) = sum m log m`` (negentropy, 0 log 0 = 0).  With it the
divergence of a grid plan from the product of its coordinate-pair
marginals is ``H(plan) - sum_i H(pair_i) >= 0``.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import (
    AxisOutOfRange,
    ConfigError,
    CoordinateCountMismatch,
    DimensionMismatch,
    InstanceTooLarge,
    NonConvergence,
)

EXACT_OT_CAP = 64
LOG_DOMAIN_RATIO = 0.05


class DiscreteDistribution:
    """Weighted finite point set; atoms have shape (m, d)."""

    def __init__(self, atoms, weights=None):
        atoms = np.asarray(atoms, dtype=float)
        if atoms.ndim == 1:
            atoms = atoms[:, None]
        if atoms.ndim != 2 or atoms.shape[0] == 0:
            raise DimensionMismatch("atoms must have shape (m, d) with m >= 1")
        if weights is None:
            weights = np.full(atoms.shape[0], 1.0 / atoms.shape[0])
        weights = np.asarray(weights, dtype=float).ravel()
        if weights.shape[0] != atoms.shape[0]:
            raise DimensionMismatch("one weight per atom required")
        if (weights < 0).any() or abs(weights.sum() - 1.0) > 1e-12:
            raise ConfigError(f"weights must be nonnegative and sum to 1 (sum={weights.sum()!r})")
        self.atoms = atoms
        self.weights = weights

    @property
    def size(self):
        return self.atoms.shape[0]

    @property
    def dim(self):
        return self.atoms.shape[1]

    def expectation(self, fn):
        return float(self.weights @ fn(self.atoms))

    def __repr__(self):
        return f"DiscreteDistribution(size={self.size}, dim={self.dim})"


def as_1d(dist):
    """(values, weights) of a scalar distribution given in any accepted form."""
    if isinstance(dist, DiscreteDistribution):
        if dist.dim != 1:
            raise DimensionMismatch("expected scalar atoms")
        return dist.atoms[:, 0], dist.weights
    v, w = dist
    return np.asarray(v, dtype=float).ravel(), np.asarray(w, dtype=float).ravel()


@dataclass(frozen=True)
class CostSpec:
    """Exogenous ground cost ``c(u, v) = (sum_i |u_i - v_i|^p)^(1/p)``."""

    p: float = 1.0

    def __post_init__(self):
        if not (np.isfinite(self.p) and self.p >= 1):
            raise ConfigError(f"cost.p: must be >= 1, got {self.p}")

    def coordinate_power(self, diff):
        return np.abs(diff) ** self.p


@dataclass
class TransportPlan:
    """Mass array plus per-axis support values and marginal targets.

    ``layout`` is ``"matrix"`` for a two-marginal coupling or ``"grid"`` for
    the 2n-axis exogenous layout (axes 0..n-1 source coordinates, n..2n-1
    target coordinates).
    """

    mass: np.ndarray
    layout: str = "matrix"
    axis_values: list = field(default=None)
    axis_targets: list = field(default=None)

    @property
    def n_axes(self):
        return self.mass.ndim

    def axis_marginal(self, k):
        others = tuple(j for j in range(self.mass.ndim) if j != k)
        return self.mass.sum(axis=others)

    def marginal_residuals(self):
        if self.axis_targets is None:
            return []
        return [float(np.abs(self.axis_marginal(k) - t).sum()) for k, t in enumerate(self.axis_targets)]

    def to_csv(self, header_lines=(), min_mass=0.0):
        lines = [f"# {h}" for h in header_lines]
        cols = [f"i{k}" for k in range(self.mass.ndim)]
        lines.append(",".join(cols + ["mass"]))
        for idx in zip(*np.nonzero(self.mass > min_mass)):
            lines.append(",".join([str(int(i)) for i in idx] + [repr(float(self.mass[idx]))]))
        return "\n".join(lines) + "\n"

    def summary(self, **extra):
        out = {
            "layout": self.layout,
            "shape": list(self.mass.shape),
            "total_mass": float(self.mass.sum()),
            "marginal_residuals": self.marginal_residuals(),
        }
        out.update(extra)
        return out

    def to_json(self, **extra):
        return json.dumps(self.summary(**extra), indent=2, sort_keys=True)


# --------------------------------------------------------------------------
# costs


def cost_matrix(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec):
    """Entry (k, r) is c(a_k, b_r)^p."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"atom dimensions differ: {a.dim} vs {b.dim}")
    diff = a.atoms[:, None, :] - b.atoms[None, :, :]
    return cost.coordinate_power(diff).sum(axis=-1)


def grid_cost_tensor(src_axes, tgt_axes, p):
    """2n-axis tensor of sum_i |u_i - v_i|^p over the grid of axis values."""
    n = len(src_axes)
    if len(tgt_axes) != n:
        raise CoordinateCountMismatch("source and target need the same number of coordinates")
    shape = [len(v) for v in src_axes] + [len(v) for v in tgt_axes]
    C = np.zeros(shape)
    for i in range(n):
        block = np.abs(src_axes[i][:, None] - tgt_axes[i][None, :]) ** p
        view = [1] * (2 * n)
        view[i], view[i + n] = block.shape
        C = C + block.reshape(view)
    return C


# --------------------------------------------------------------------------
# exact and closed-form distances


def _transport_lp(C, wa, wb):
    N, M = C.shape
    rows = sparse.kron(sparse.eye(N), np.ones((1, M)))
    cols = sparse.kron(np.ones((1, N)), sparse.eye(M))
    A = sparse.vstack([rows, cols]).tocsr()
    res = linprog(
        C.ravel(),
        A_eq=A,
        b_eq=np.concatenate([wa, wb]),
        bounds=(0, None),
        method="highs",
        options={"primal_feasibility_tolerance": 1e-10, "dual_feasibility_tolerance": 1e-10},
    )
    if res.status != 0:
        raise RuntimeError(f"transport LP failed: {res.message}")
    return np.maximum(res.x.reshape(N, M), 0.0)


def exact_ot(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec):
    """Exact W_p by linear programming. Returns (distance, plan)."""
    if a.size > EXACT_OT_CAP or b.size > EXACT_OT_CAP:
        raise InstanceTooLarge(f"exact_ot handles at most {EXACT_OT_CAP} atoms per side ({a.size}, {b.size})")
    C = cost_matrix(a, b, cost)
    plan = _transport_lp(C, a.weights, b.weights)
    value = max(float((C * plan).sum()), 0.0)
    tp = TransportPlan(plan, "matrix", [a.atoms, b.atoms], [a.weights, b.weights])
    return value ** (1.0 / cost.p), tp


def wasserstein_1d_power(a, b, p):
    """sum |F_a^{-1} - F_b^{-1}|^p over the common weight partition."""
    va, wa = as_1d(a)
    vb, wb = as_1d(b)
    ia, ib = np.argsort(va, kind="stable"), np.argsort(vb, kind="stable")
    va, wa, vb, wb = va[ia], wa[ia], vb[ib], wb[ib]
    ca = np.cumsum(wa) / wa.sum()
    cb = np.cumsum(wb) / wb.sum()
    levels = np.union1d(ca, cb)
    levels = levels[levels <= 1.0]
    if levels.size == 0 or levels[-1] < 1.0:
        levels = np.append(levels, 1.0)
    dt = np.diff(np.concatenate([[0.0], levels]))
    mid = levels - dt / 2
    qa = va[np.minimum(np.searchsorted(ca, mid, side="left"), va.size - 1)]
    qb = vb[np.minimum(np.searchsorted(cb, mid, side="left"), vb.size - 1)]
    return float(dt @ (np.abs(qa - qb) ** p))


def wasserstein_1d(a, b, p):
    """W_p between scalar distributions via the monotone coupling."""
    return wasserstein_1d_power(a, b, p) ** (1.0 / p)


def factored_wasserstein(a_margs, b_margs, p):
    """W_p between product measures given by their coordinate marginals."""
    if len(a_margs) != len(b_margs):
        raise CoordinateCountMismatch(f"{len(a_margs)} vs {len(b_margs)} coordinates")
    return sum(wasserstein_1d(x, y, p) ** p for x, y in zip(a_margs, b_margs)) ** (1.0 / p)


# --------------------------------------------------------------------------
# entropic solvers


@dataclass
class SinkhornResult:
    plan: TransportPlan
    objective: float
    residual: float
    iterations: int
    converged: bool
    potentials: list

    def __iter__(self):
        return iter((self.plan, self.objective, self.residual))


def _log(w):
    with np.errstate(divide="ignore"):
        return np.log(w)


def sinkhorn(a: DiscreteDistribution, b: DiscreteDistribution, cost: CostSpec, eps, tol=1e-9, max_iter=10000):
    """Log-domain Sinkhorn for min <C, P> + eps * H(P).

    ``objective`` is the transport term <C, P>; ``residual`` is the L1
    error of the row marginal (columns are exact after each sweep).
    """
    C = cost_matrix(a, b, cost)
    return sinkhorn_matrix(C, a.weights, b.weights, eps, tol, max_iter, values=[a.atoms, b.atoms])


def sinkhorn_matrix(C, wa, wb, eps, tol=1e-9, max_iter=10000, values=None):
    if not eps > 0:
        raise ConfigError("sinkhorn needs eps > 0")
    la, lb = _log(wa), _log(wb)
    f = np.zeros(C.shape[0])
    g = np.zeros(C.shape[1])
    residual, it, converged = np.inf, 0, False
    with np.errstate(invalid="ignore"):
        for it in range(1, max_iter + 1):
            f = eps * (la - logsumexp((g[None, :] - C) / eps, axis=1))
            g = eps * (lb - logsumexp((f[:, None] - C) / eps, axis=0))
            logP = (f[:, None] + g[None, :] - C) / eps
            residual = float(np.abs(np.exp(logP).sum(axis=1) - wa).sum())
            if residual <= tol:
                converged = True
                break
    P = np.exp((f[:, None] + g[None, :] - C) / eps)
    if not converged:
        warnings.warn(NonConvergence(f"sinkhorn stopped after {it} iterations, residual {residual:.3e}", residual))
    tp = TransportPlan(P, "matrix", values, [wa, wb])
    return SinkhornResult(tp, float((C * P).sum()), residual, it, converged, [f, g])


def _axis_logmarginal(L, k):
    others = tuple(j for j in range(L.ndim) if j != k)
    return logsumexp(L, axis=others)


def _broadcast(vec, k, ndim):
    shape = [1] * ndim
    shape[k] = vec.shape[0]
    return vec.reshape(shape)


@dataclass
class MultiMarginalResult:
    plan: np.ndarray
    residuals: list
    iterations: int
    converged: bool
    potentials: list


def sinkhorn_multimarginal(cost_tensor, marginals, eps, tol=1e-8, max_iter=10000, init_potentials=None):
    """Entropic multi-marginal plan ``exp((sum_k f_k - C) / eps)``.

    Axis k is rescaled in turn so its marginal equals ``marginals[k]``; in
    the scaling form phi_k = P_k / sum_{others} exp(-C/eps) prod_{j!=k} phi_j.
    Iterates in the log domain.  Stops when every axis residual (L1) is
    at most ``tol``.
    """
    C = np.asarray(cost_tensor, dtype=float)
    m = C.ndim
    if len(marginals) != m:
        raise DimensionMismatch(f"{m} axes but {len(marginals)} marginals")
    margs = [np.asarray(t, dtype=float).ravel() for t in marginals]
    for k, t in enumerate(margs):
        if t.shape[0] != C.shape[k]:
            raise DimensionMismatch(f"marginal {k} has {t.shape[0]} entries for axis of size {C.shape[k]}")
        if abs(t.sum() - 1.0) > 1e-12:
            raise ConfigError(f"marginal {k} sums to {t.sum()!r}, not 1")
    if not eps > 0:
        raise ConfigError("sinkhorn needs eps > 0")
    logm = [_log(t) for t in margs]
    if init_potentials is None:
        f = [np.zeros(s) for s in C.shape]
    else:
        f = [np.array(v, dtype=float) for v in init_potentials]
    L = -C / eps
    for k in range(m):
        L = L + _broadcast(f[k], k, m) / eps
    residuals = [np.inf] * m
    converged, it = False, 0
    with np.errstate(invalid="ignore"):
        for it in range(1, max_iter + 1):
            proxy = 0.0
            for k in range(m):
                lm = _axis_logmarginal(L, k)
                proxy = max(proxy, float(np.abs(np.exp(lm) - margs[k]).sum()))
                # zero-target entries get -inf; unreachable entries are left alone
                step = np.where(np.isfinite(logm[k]), np.where(np.isfinite(lm), logm[k] - lm, 0.0), -np.inf)
                f[k] = f[k] + eps * step
                L = L + _broadcast(step, k, m)
            if proxy <= tol:
                P = np.exp(L)
                residuals = [float(np.abs(P.sum(axis=tuple(j for j in range(m) if j != k)) - margs[k]).sum()) for k in range(m)]
                if max(residuals) <= tol:
                    converged = True
                    break
    P = np.exp(L)
    if not converged:
        residuals = [float(np.abs(P.sum(axis=tuple(j for j in range(m) if j != k)) - margs[k]).sum()) for k in range(m)]
        warnings.warn(NonConvergence(f"multi-marginal sinkhorn stopped after {it} sweeps, residual {max(residuals):.3e}", max(residuals)))
    return MultiMarginalResult(P, residuals, it, converged, f)


def _axis_sums(P, keep):
    others = tuple(j for j in range(P.ndim) if j not in keep)
    out = P.sum(axis=others) if others else P
    return out if list(keep) == sorted(keep) else out.T


def refine_multimarginal(cost_tensor, marginals, eps, potentials, tol=1e-12, max_iter=60):
    """Newton refinement of multi-marginal potentials.

    Minimises the normalised dual ``eps * logsumexp((sum_k f_k - C)/eps) -
    sum_k <f_k, P_k>``, whose gradient is the vector of axis-marginal
    errors.  Sinkhorn sweeps stall at small eps; a few Newton steps from
    their potentials reach round-off level.  Steps are damped by
    backtracking on the gradient norm.
    """
    C = np.asarray(cost_tensor, dtype=float)
    m = C.ndim
    margs = [np.asarray(t, dtype=float).ravel() for t in marginals]
    offs = np.cumsum([0] + list(C.shape))

    def state(fs):
        L = -C / eps
        for k in range(m):
            L = L + _broadcast(fs[k], k, m) / eps
        P = np.exp(L - logsumexp(L))
        mk = [_axis_sums(P, (k,)) for k in range(m)]
        g = np.concatenate([mk[k] - margs[k] for k in range(m)])
        return P, mk, g

    def split(x):
        return [x[offs[k]:offs[k + 1]] for k in range(m)]

    x = np.concatenate([np.asarray(f, dtype=float) for f in potentials])
    P, mk, g = state(split(x))
    it = 0
    for it in range(1, max_iter + 1):
        if max(np.abs(g[offs[k]:offs[k + 1]]).sum() for k in range(m)) <= tol:
            it -= 1
            break
        H = np.zeros((offs[-1], offs[-1]))
        for k in range(m):
            H[offs[k]:offs[k + 1], offs[k]:offs[k + 1]] = np.diag(mk[k])
            for l in range(k + 1, m):
                B = _axis_sums(P, (k, l))
                H[offs[k]:offs[k + 1], offs[l]:offs[l + 1]] = B
                H[offs[l]:offs[l + 1], offs[k]:offs[k + 1]] = B.T
        mall = np.concatenate(mk)
        H = (H - np.outer(mall, mall)) / eps
        # constant shifts per axis are a null space; lstsq returns the min-norm step
        step = np.linalg.lstsq(H, -g, rcond=1e-14)[0]
        gnorm = np.linalg.norm(g)
        t = 1.0
        while True:
            P_new, mk_new, g_new = state(split(x + t * step))
            if np.linalg.norm(g_new) < (1 - 1e-4 * t) * gnorm or t < 1e-8:
                break
            t *= 0.5
        if t < 1e-8:
            break
        x = x + t * step
        P, mk, g = P_new, mk_new, g_new
    fs = split(x)
    # shift one potential so exp((sum f - C)/eps) itself has unit mass
    L = -C / eps
    for k in range(m):
        L = L + _broadcast(fs[k], k, m) / eps
    fs[0] = fs[0] - eps * logsumexp(L)
    plan = np.exp(L - logsumexp(L))
    residuals = [float(np.abs(_axis_sums(plan, (k,)) - margs[k]).sum()) for k in range(m)]
    return MultiMarginalResult(plan, residuals, it, max(residuals) <= tol, [f.copy() for f in fs])


# --------------------------------------------------------------------------
# entropies


def negentropy(m):
    m = np.asarray(m, dtype=float)
    pos = m[m > 0]
    return float((pos * np.log(pos)).sum())


def _grid_mass(plan):
    mass = plan.mass if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)
    if mass.ndim % 2:
        raise DimensionMismatch(f"grid plans have an even number of axes, got {mass.ndim}")
    return mass


def pair_marginal(plan, i):
    """Mass over axes (i, i + n) of a 2n-axis grid plan; i is 0-based."""
    mass = _grid_mass(plan)
    n = mass.ndim // 2
    if not 0 <= i < n:
        raise AxisOutOfRange(f"coordinate index {i} outside [0, {n})")
    others = tuple(k for k in range(2 * n) if k not in (i, i + n))
    return mass.sum(axis=others) if others else mass.copy()


def product_of_pairs(plan):
    """Tensor whose entries are prod_i pair_i(u_i, v_i)."""
    mass = _grid_mass(plan)
    n = mass.ndim // 2
    out = np.ones([1] * (2 * n))
    for i in range(n):
        m = pair_marginal(mass, i)
        shape = [1] * (2 * n)
        shape[i], shape[i + n] = m.shape
        out = out * m.reshape(shape)
    return out


@dataclass
class EntropyReport:
    H: float
    H_i: list
    kl_to_product: float


def entropy_report(plan) -> EntropyReport:
    mass = _grid_mass(plan)
    n = mass.ndim // 2
    H = negentropy(mass)
    Hi = [negentropy(pair_marginal(mass, i)) for i in range(n)]
    return EntropyReport(H, Hi, H - sum(Hi))


def kl_direct(plan):
    """sum plan * log(plan / product_of_pairs(plan)) evaluated entrywise."""
    mass = _grid_mass(plan)
    ref = product_of_pairs(mass)
    pos = mass > 0
    return float((mass[pos] * (np.log(mass[pos]) - np.log(ref[pos]))).sum())


__all__ = [
    "DiscreteDistribution",
    "CostSpec",
    "TransportPlan",
    "cost_matrix",
    "grid_cost_tensor",
    "exact_ot",
    "wasserstein_1d",
    "wasserstein_1d_power",
    "factored_wasserstein",
    "sinkhorn",
    "sinkhorn_matrix",
    "sinkhorn_multimarginal",
    "refine_multimarginal",
    "entropy_report",
    "pair_marginal",
    "product_of_pairs",
    "kl_direct",
    "negentropy",
]
