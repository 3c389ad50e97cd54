"""Relaxed structural-causal OT.

Plans live on the 2n-axis grid of observed exogenous coordinate values:
axes 0..n-1 index the source coordinates, axes n..2n-1 the target ones.
The relaxed cost of a plan is ``<C, plan> + eps * KL(plan || product of its
coordinate-pair marginals)``.  It is minimised by a difference-of-convex
loop: linearise ``-sum_i H(pair_i)`` at the current plan, then solve the
resulting entropic problem with multi-marginal Sinkhorn.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np

from . import scm as scm_mod
from .errors import ConfigError, GridTooLarge, NonConvergence
from .ot import (
    CostSpec,
    DiscreteDistribution,
    EXACT_OT_CAP,
    TransportPlan,
    entropy_report,
    exact_ot,
    factored_wasserstein,
    grid_cost_tensor,
    pair_marginal,
    product_of_pairs,
    refine_multimarginal,
    sinkhorn_multimarginal,
)

# warm-start schedule, as multiples of the mean grid cost
SCHEDULE_START = 0.1
SCHEDULE_FLOOR = 1e-7
SCHEDULE_FACTOR = 10.0
# Sinkhorn residual at which the inner solve hands over to Newton
NEWTON_HANDOFF = 1e-3
SMALLEST_EPS_RATIO = 1e-4


@dataclass
class RelaxedSolveConfig:
    eps: float = 1.0
    p: float | None = None
    outer_tol: float = 1e-6
    outer_max: int = 50
    inner_tol: float = 1e-10
    inner_max: int = 10000
    log_floor: float = 1e-300
    # one DC step per schedule value before iterating at eps itself
    warm_schedule: bool = True
    # polish each inner Sinkhorn solve with Newton steps on its dual
    newton_refine: bool = True

    def __post_init__(self):
        if not (self.eps >= 0 and math.isfinite(self.eps)):
            raise ConfigError(f"eps: must be finite and >= 0, got {self.eps}")
        for name in ("outer_tol", "inner_tol", "log_floor"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name}: must be > 0")
        for name in ("outer_max", "inner_max"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name}: must be >= 1")


@dataclass
class RelaxedSolveResult:
    plan: TransportPlan
    eps: float
    p: float
    transport_term: float
    kl_term: float
    objective: float
    distance: float
    trace: list
    converged: bool
    outer_iters: int = 0
    inner_iters_total: int = 0
    schedule: list = field(default_factory=list)
    # objective at eps after each warm-schedule step; these steps linearise
    # at other weights, so unlike ``trace`` this need not decrease
    warm_trace: list = field(default_factory=list)

    def to_dict(self):
        return {
            "eps": self.eps,
            "p": self.p,
            "distance": self.distance,
            "transport_term": self.transport_term,
            "kl_term": self.kl_term,
            "objective": self.objective,
            "outer_iters": self.outer_iters,
            "inner_iters_total": self.inner_iters_total,
            "converged": self.converged,
            "trace": list(self.trace),
            "warm_trace": list(self.warm_trace),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _mass(plan):
    return plan.mass if isinstance(plan, TransportPlan) else np.asarray(plan, dtype=float)


def pi_otimes(plan):
    """Project a grid plan onto the product of its coordinate-pair marginals.

    The grid is already in exogenous coordinates, so no change of variables
    is needed here.
    """
    out = product_of_pairs(_mass(plan))
    if isinstance(plan, TransportPlan):
        return TransportPlan(out, "grid", plan.axis_values, plan.axis_targets)
    return out


def relaxed_objective(plan, cost_tensor, eps, p=None):
    """(transport_term, kl_term, objective) for a grid plan."""
    mass = _mass(plan)
    transport = float((np.asarray(cost_tensor) * mass).sum())
    kl = entropy_report(mass).kl_to_product
    return transport, kl, transport + eps * kl


def dc_gradient(plan, log_floor=1e-300):
    """Gradient of sum_i H(pair_i) with respect to the plan entries.

    Entry at (u_1..u_n, v_1..v_n) is sum_i (1 + log pair_i(u_i, v_i)).
    """
    mass = _mass(plan)
    n = mass.ndim // 2
    G = np.zeros([1] * (2 * n))
    floor = math.log(log_floor)
    for i in range(n):
        m = pair_marginal(mass, i)
        with np.errstate(divide="ignore"):
            lm = np.maximum(np.log(m), floor)
        shape = [1] * (2 * n)
        shape[i], shape[i + n] = m.shape
        G = G + (1.0 + lm).reshape(shape)
    return np.broadcast_to(G, mass.shape).copy()


@dataclass
class GridProblem:
    src_axes: list
    tgt_axes: list
    src_weights: list
    tgt_weights: list
    cost_tensor: np.ndarray
    p: float

    @property
    def n(self):
        return len(self.src_axes)

    @property
    def marginals(self):
        return list(self.src_weights) + list(self.tgt_weights)

    @property
    def axis_values(self):
        return list(self.src_axes) + list(self.tgt_axes)

    def plan(self, mass):
        return TransportPlan(mass, "grid", self.axis_values, self.marginals)


def build_grid_problem(source, target, model, cost: CostSpec, cap=None):
    """Exogenous coordinate marginals and the 2n-axis cost tensor."""
    src = _to_exogenous(model, source)
    tgt = _to_exogenous(model, target)
    if src.n != tgt.n:
        raise ConfigError(f"source has {src.n} coordinates, target has {tgt.n}")
    sm = scm_mod.coordinate_marginals(src)
    tm = scm_mod.coordinate_marginals(tgt)
    cap = scm_mod.grid_cap() if cap is None else cap
    size = 1
    for v, _ in sm + tm:
        size *= len(v)
    if size > cap:
        raise GridTooLarge(f"plan grid has {size} entries, cap is {cap}")
    C = grid_cost_tensor([v for v, _ in sm], [v for v, _ in tm], cost.p)
    return GridProblem([v for v, _ in sm], [v for v, _ in tm], [w for _, w in sm], [w for _, w in tm], C, cost.p)


def _to_exogenous(model, s):
    if s.space == scm_mod.EXOGENOUS:
        return s
    return scm_mod.push_to_exogenous(model, s)


def _initial_plan(prob: GridProblem):
    mass = np.ones([1] * (2 * prob.n))
    for k, w in enumerate(prob.marginals):
        shape = [1] * (2 * prob.n)
        shape[k] = w.shape[0]
        mass = mass * w.reshape(shape)
    return mass


def warm_schedule(mean_cost):
    """Descending linearisation weights for the first DC steps.

    With a separable cost every DC step keeps the plan a product of pair
    couplings, and a step with weight e is a KL-proximal step of length e
    on the transport cost.  Steps of geometrically shrinking length reach
    a small effective regularisation in a handful of iterations; iterating
    at a large eps alone needs a number of steps proportional to eps.
    """
    if mean_cost <= 0:
        return []
    out = []
    e = SCHEDULE_START * mean_cost
    while e >= SCHEDULE_FLOOR * mean_cost * (1 - 1e-9):
        out.append(e)
        e /= SCHEDULE_FACTOR
    return out


def _inner_solve(kernel_cost, margs, eps, cfg, potentials):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", NonConvergence)
        first_tol = max(cfg.inner_tol, NEWTON_HANDOFF) if cfg.newton_refine else cfg.inner_tol
        sub = sinkhorn_multimarginal(kernel_cost, margs, eps, first_tol, cfg.inner_max, init_potentials=potentials)
        iters = sub.iterations
        if cfg.newton_refine and max(sub.residuals) > cfg.inner_tol:
            ref = refine_multimarginal(kernel_cost, margs, eps, sub.potentials, cfg.inner_tol)
            iters += ref.iterations
            if max(ref.residuals) <= max(sub.residuals):
                sub = ref
    return sub, iters


def _dc_step(prob, mass, e, cfg, potentials, counters, warm=False):
    G = dc_gradient(mass, cfg.log_floor)
    sub, iters = _inner_solve(prob.cost_tensor - e * G, prob.marginals, e, cfg, potentials)
    counters["inner"] += iters
    counters["outer"] += 1
    # warm steps only supply a starting point, so their accuracy is not held against the result
    if not warm:
        counters["inner_ok"] = counters["inner_ok"] and max(sub.residuals) <= cfg.inner_tol
    # near a fixed point the previous potentials are close to optimal
    return sub.plan, sub.potentials


def solve_grid(prob: GridProblem, cfg: RelaxedSolveConfig) -> RelaxedSolveResult:
    C = prob.cost_tensor
    eps = float(cfg.eps)
    if eps == 0.0:
        return _solve_eps_zero(prob, cfg)
    scale = max(abs(float(C.mean())), 1e-300)
    mass = _initial_plan(prob)
    prev = relaxed_objective(mass, C, eps)[2]
    warm_trace = [prev]
    counters = {"inner": 0, "outer": 0, "inner_ok": True}
    potentials = None
    schedule = warm_schedule(float(C.mean())) if cfg.warm_schedule else []
    for e in schedule:
        mass, potentials = _dc_step(prob, mass, e, cfg, potentials, counters, warm=True)
        prev = relaxed_objective(mass, C, eps)[2]
        warm_trace.append(prev)
    # DC iterates at the target eps; this is the sequence that must descend
    trace = [prev]
    converged = False
    for _ in range(int(cfg.outer_max)):
        mass, potentials = _dc_step(prob, mass, eps, cfg, potentials, counters)
        cur = relaxed_objective(mass, C, eps)[2]
        trace.append(cur)
        # relative change, with an absolute floor so zero-cost problems stop
        if abs(prev - cur) <= cfg.outer_tol * max(abs(prev), 1e-6 * scale):
            converged = True
            break
        prev = cur
    converged = converged and counters["inner_ok"]
    if not converged:
        warnings.warn(
            NonConvergence(f"relaxed solve at eps={eps:g} stopped after {counters['outer']} outer iterations")
        )
    transport, kl, obj = relaxed_objective(mass, C, eps)
    return RelaxedSolveResult(
        plan=prob.plan(mass),
        eps=eps,
        p=prob.p,
        transport_term=transport,
        kl_term=kl,
        objective=obj,
        distance=max(obj, 0.0) ** (1.0 / prob.p),
        trace=trace,
        converged=converged,
        outer_iters=counters["outer"],
        inner_iters_total=counters["inner"],
        schedule=schedule,
        warm_trace=warm_trace,
    )


def _solve_eps_zero(prob: GridProblem, cfg):
    """eps = 0: exact LP on the expanded products when small enough."""
    src = scm_mod.product_distribution(list(zip(prob.src_axes, prob.src_weights)))
    tgt = scm_mod.product_distribution(list(zip(prob.tgt_axes, prob.tgt_weights)))
    if src.size <= EXACT_OT_CAP and tgt.size <= EXACT_OT_CAP:
        _, lp = exact_ot(src, tgt, CostSpec(prob.p))
        mass = lp.mass.reshape([len(v) for v in prob.src_axes] + [len(v) for v in prob.tgt_axes])
        transport, kl, obj = relaxed_objective(mass, prob.cost_tensor, 0.0)
        return RelaxedSolveResult(
            prob.plan(mass), 0.0, prob.p, transport, kl, obj, max(obj, 0.0) ** (1.0 / prob.p), [obj], True
        )
    smallest = SMALLEST_EPS_RATIO * float(prob.cost_tensor.mean())
    if smallest <= 0:
        smallest = SMALLEST_EPS_RATIO
    warnings.warn(f"eps=0 instance too large for the exact oracle; solving at eps={smallest:g} instead", UserWarning)
    sub = RelaxedSolveConfig(**{**asdict(cfg), "eps": smallest})
    res = solve_grid(prob, sub)
    return res


def solve_relaxed(source, target, model, cost: CostSpec, cfg: RelaxedSolveConfig | None = None):
    """Relaxed structural distance between two samples of the same SCM."""
    cfg = cfg or RelaxedSolveConfig()
    if cfg.p is not None and float(cfg.p) != float(cost.p):
        raise ConfigError(f"p: solve config says {cfg.p}, cost says {cost.p}")
    prob = build_grid_problem(source, target, model, cost)
    return solve_grid(prob, cfg)


def structural_wasserstein_exact(source, target, model, cost: CostSpec):
    """Structural distance between the product reconstructions of both samples."""
    src = scm_mod.coordinate_marginals(_to_exogenous(model, source))
    tgt = scm_mod.coordinate_marginals(_to_exogenous(model, target))
    return factored_wasserstein(src, tgt, cost.p)


def classical_wasserstein_expanded(source, target, model, cost: CostSpec):
    """Exact classical distance between the product reconstructions (LP)."""
    src = scm_mod.product_empirical(model, _to_exogenous(model, source))
    tgt = scm_mod.product_empirical(model, _to_exogenous(model, target))
    return exact_ot(src, tgt, cost)[0]


@dataclass
class SweepRow:
    eps: float
    distance: float
    kl_term: float
    result: RelaxedSolveResult


def epsilon_sweep(source, target, model, cost: CostSpec, eps_list, cfg: RelaxedSolveConfig | None = None):
    eps_list = [float(e) for e in eps_list]
    if not eps_list:
        raise ConfigError("eps list is empty")
    if any(b < a for a, b in zip(eps_list, eps_list[1:])):
        raise ConfigError("eps list must be ascending")
    cfg = cfg or RelaxedSolveConfig()
    prob = build_grid_problem(source, target, model, cost)
    rows = []
    for e in eps_list:
        res = solve_grid(prob, RelaxedSolveConfig(**{**asdict(cfg), "eps": e}))
        rows.append(SweepRow(e, res.distance, res.kl_term, res))
    return rows


__all__ = [
    "RelaxedSolveConfig",
    "RelaxedSolveResult",
    "pi_otimes",
    "relaxed_objective",
    "dc_gradient",
    "solve_relaxed",
    "structural_wasserstein_exact",
    "classical_wasserstein_expanded",
    "epsilon_sweep",
    "DiscreteDistribution",
]
