"""Fitting linear additive-noise equations and checking how the relaxed
distance reacts to errors in the fitted equations."""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from itertools import product as corners

import numpy as np

from . import scm as scm_mod
from .errors import ConfigError, NonConvergence, RankDeficient
from .ot import CostSpec
from .relaxed import RelaxedSolveConfig, build_grid_problem, solve_grid


@dataclass
class FitReport:
    model: scm_mod.ScmModel
    residual_variance: list
    coef_se: list
    sup_gap: float | None = None

    def to_config(self):
        cfg = scm_mod.scm_to_config(self.model)
        cfg["fit"] = {
            "residual_variance": {nm: v for nm, v in zip(self.model.names, self.residual_variance)},
            "coef_se": {nm: se for nm, se in zip(self.model.names, self.coef_se)},
        }
        return cfg


def fit_linear_anm(samples: scm_mod.SampleMatrix, dag: scm_mod.DagSpec, names=None) -> FitReport:
    """Per-node weighted least squares of each node on its parents plus an intercept.

    The fitted model's noise for node i is the empirical distribution of
    its residuals.
    """
    if samples.space != scm_mod.FEATURE:
        raise ConfigError("fit_linear_anm expects feature-space samples")
    if samples.n != dag.node_count:
        raise ConfigError(f"samples have {samples.n} columns, graph has {dag.node_count} nodes")
    X, w = samples.rows, samples.weights
    N = samples.N
    kmax = max((len(ps) for ps in dag.parent_sets), default=0)
    if N <= kmax + 1:
        raise ConfigError(f"need more than {kmax + 1} samples, got {N}")
    sw = np.sqrt(w)
    equations, noise, rvar, ses = [], [], [], []
    for i, ps in enumerate(dag.parent_sets):
        design = np.column_stack([X[:, list(ps)], np.ones(N)])
        A = design * sw[:, None]
        y = X[:, i] * sw
        if np.linalg.matrix_rank(A) < A.shape[1]:
            raise RankDeficient(f"node {i}: parent design matrix is singular (collinear parents)")
        beta, *_ = np.linalg.lstsq(A, y, rcond=None)
        resid = X[:, i] - design @ beta
        dof = N - A.shape[1]
        # weights are normalised, so rescale to the usual unbiased estimate
        s2 = float(N * (w @ resid**2) / dof)
        cov = s2 * np.linalg.inv(A.T @ A) / N
        equations.append(scm_mod.LinearEquation(beta[:-1], beta[-1]))
        noise.append(scm_mod.Empirical(resid))
        rvar.append(s2)
        ses.append(np.sqrt(np.clip(np.diag(cov), 0, None)).tolist())
    model = scm_mod.ScmModel(dag, equations, noise, names)
    return FitReport(model, rvar, ses)


def affine_sup_on_box(coeffs, intercept, lows, highs):
    """max |a.x + b| over the box, by enumerating its corners."""
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.size == 0:
        return abs(float(intercept))
    best = 0.0
    for corner in corners(*zip(lows, highs)):
        best = max(best, abs(float(coeffs @ np.asarray(corner) + intercept)))
    return best


@dataclass
class StabilityRow:
    scale: float
    sup_gap: float
    gap: float
    distance_true: float
    distance_perturbed: float
    converged: bool = True


@dataclass
class StabilityResult:
    rows: list = field(default_factory=list)


def _perturbed_model(model, box_lo, box_hi, scale, directions, mode, node):
    eqs = []
    sup = 0.0
    for i, (eq, ps) in enumerate(zip(model.equations, model.dag.parent_sets)):
        if not isinstance(eq, scm_mod.LinearEquation):
            raise ConfigError("stability_curve perturbs linear equations only")
        if mode == "constant":
            d_coef = np.zeros(len(ps))
            d_icpt = scale if i == node else 0.0
        else:
            direction = directions[i]
            lo, hi = box_lo[list(ps)], box_hi[list(ps)]
            unit = affine_sup_on_box(direction[:-1], direction[-1], lo, hi)
            d = direction * (scale / unit) if unit > 0 else direction * 0
            d_coef, d_icpt = d[:-1], d[-1]
        lo, hi = box_lo[list(ps)], box_hi[list(ps)]
        sup = max(sup, affine_sup_on_box(d_coef, d_icpt, lo, hi))
        eqs.append(scm_mod.LinearEquation(np.asarray(eq.coeffs) + d_coef, eq.intercept + d_icpt))
    return model.with_equations(eqs), sup


def stability_curve(
    source,
    target,
    true_model,
    perturb_scales,
    cost: CostSpec,
    cfg: RelaxedSolveConfig | None = None,
    seed=0,
    mode="jitter",
    node=0,
    n_directions=4,
):
    """Gap between relaxed distances under the true and perturbed models.

    Each perturbation adds to every equation an affine function whose sup
    norm over the bounding box of both samples equals the scale.
    ``n_directions`` random directions are drawn once from ``seed`` and
    each is applied with both signs; the reported gap is the largest over
    these 2 * n_directions models, a Monte-Carlo stand-in for the sup over
    the whole perturbation ball.  ``mode="constant"`` instead adds the scale
    to the intercept of ``node`` only.
    """
    if mode not in ("jitter", "constant"):
        raise ConfigError(f"stability mode must be 'jitter' or 'constant', got {mode!r}")
    scales = [float(s) for s in perturb_scales]
    if any(s < 0 for s in scales):
        raise ConfigError("perturbation scales must be >= 0")
    if n_directions < 1:
        raise ConfigError("n_directions must be >= 1")
    cfg = cfg or RelaxedSolveConfig()
    rows_all = np.vstack([source.rows, target.rows])
    box_lo, box_hi = rows_all.min(axis=0), rows_all.max(axis=0)
    rng = np.random.default_rng(seed)
    draws = [[rng.standard_normal(len(ps) + 1) for ps in true_model.dag.parent_sets] for _ in range(n_directions)]
    if mode == "constant":
        signed = [None]
    else:
        signed = [[sign * d for d in dirs] for dirs in draws for sign in (1.0, -1.0)]

    def distance(model):
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergence)
            res = solve_grid(build_grid_problem(source, target, model, cost), cfg)
        return res.distance, res.converged

    base, ok0 = distance(true_model)
    out = StabilityResult()
    for s in scales:
        best = None
        ok_all = ok0
        for dirs in signed:
            pert, sup = _perturbed_model(true_model, box_lo, box_hi, s, dirs, mode, node)
            d, ok = distance(pert)
            ok_all = ok_all and ok
            if best is None or abs(d - base) > best[0]:
                best = (abs(d - base), sup, d)
        out.rows.append(StabilityRow(s, best[1], best[0], base, best[2], ok_all))
    return out
