"""Additive-noise structural causal models.

Each node is ``x_i = f_i(x_parents) + u_i`` with scalar, independent,
bounded noise.  The reduced form ``g`` maps noise vectors to feature
vectors by forward substitution in topological order; its inverse just
subtracts the structural part.
"""
from __future__ import annotations

import csv
import heapq
import io
import json
import os
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.interpolate import RegularGridInterpolator
from scipy.stats import truncnorm

from .errors import ConfigError, CycleDetected, DimensionMismatch, DomainViolation, GridTooLarge
from .ot import DiscreteDistribution

DEFAULT_GRID_CAP = 10**6
FEATURE = "feature"
EXOGENOUS = "exogenous"


def grid_cap():
    """Atom cap for product grids; ``SCOT_GRID_CAP`` overrides the default."""
    raw = os.environ.get("SCOT_GRID_CAP")
    if raw is None or raw.strip() == "":
        return DEFAULT_GRID_CAP
    try:
        cap = int(float(raw))
    except ValueError:
        raise ConfigError(f"SCOT_GRID_CAP: not a number: {raw!r}")
    if cap < 1:
        raise ConfigError("SCOT_GRID_CAP: must be >= 1")
    return cap


# --------------------------------------------------------------------------
# graph


@dataclass(frozen=True)
class DagSpec:
    parent_sets: tuple

    def __init__(self, parent_sets):
        object.__setattr__(self, "parent_sets", tuple(tuple(int(j) for j in ps) for ps in parent_sets))

    @property
    def node_count(self):
        return len(self.parent_sets)

    @classmethod
    def from_edges(cls, n, edges):
        parents = [[] for _ in range(n)]
        for a, b in edges:
            parents[b].append(a)
        return cls(parents)

    def edges(self):
        return [(j, i) for i, ps in enumerate(self.parent_sets) for j in ps]


def _find_cycle(n, parent_sets, remaining):
    # walk parent links inside the unresolved set; any such walk must revisit a node
    start = min(remaining)
    path, seen = [start], {start: 0}
    node = start
    while True:
        nxt = next(j for j in parent_sets[node] if j in remaining)
        if nxt in seen:
            cyc = path[seen[nxt]:]
            cyc.reverse()
            return cyc + [cyc[0]]
        seen[nxt] = len(path)
        path.append(nxt)
        node = nxt


def validate_dag(dag: DagSpec):
    """Topological order, smallest available index first."""
    n = dag.node_count
    for i, ps in enumerate(dag.parent_sets):
        for j in ps:
            if not 0 <= j < n:
                raise ConfigError(f"parent_sets[{i}]: parent index {j} out of range [0, {n})")
            if j == i:
                raise CycleDetected([i, i])
        if len(set(ps)) != len(ps):
            raise ConfigError(f"parent_sets[{i}]: duplicate parent")
    children = [[] for _ in range(n)]
    indeg = [len(ps) for ps in dag.parent_sets]
    for i, ps in enumerate(dag.parent_sets):
        for j in ps:
            children[j].append(i)
    heap = [i for i in range(n) if indeg[i] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        i = heapq.heappop(heap)
        order.append(i)
        for c in children[i]:
            indeg[c] -= 1
            if indeg[c] == 0:
                heapq.heappush(heap, c)
    if len(order) < n:
        remaining = set(range(n)) - set(order)
        raise CycleDetected(_find_cycle(n, dag.parent_sets, remaining))
    return order


# --------------------------------------------------------------------------
# structural equations


@dataclass(frozen=True)
class LinearEquation:
    coeffs: tuple
    intercept: float = 0.0
    kind = "linear"

    def __init__(self, coeffs=(), intercept=0.0):
        object.__setattr__(self, "coeffs", tuple(float(c) for c in coeffs))
        object.__setattr__(self, "intercept", float(intercept))

    @property
    def arity(self):
        return len(self.coeffs)

    def __call__(self, parent_values):
        pv = np.asarray(parent_values, dtype=float)
        if self.arity == 0:
            return np.full(pv.shape[0], self.intercept)
        return pv @ np.asarray(self.coeffs) + self.intercept


class TabulatedEquation:
    """Piecewise-linear interpolant of a table over a rectangular parent grid.

    Queries outside ``box`` raise DomainViolation instead of extrapolating.
    """

    kind = "tabulated"

    def __init__(self, grid, values, box=None):
        self.grid = tuple(np.asarray(g, dtype=float) for g in grid)
        self.values = np.asarray(values, dtype=float)
        if len(self.grid) == 0:
            raise ConfigError("tabulated equation needs at least one parent axis")
        if self.values.shape != tuple(len(g) for g in self.grid):
            raise ConfigError(
                f"tabulated values shape {self.values.shape} does not match grid {[len(g) for g in self.grid]}"
            )
        if box is None:
            box = [(g[0], g[-1]) for g in self.grid]
        self.box = np.asarray(box, dtype=float).reshape(len(self.grid), 2)
        for k, g in enumerate(self.grid):
            if self.box[k, 0] < g[0] or self.box[k, 1] > g[-1]:
                raise ConfigError(f"tabulated box axis {k} exceeds the table grid")
        self._interp = RegularGridInterpolator(self.grid, self.values, method="linear")

    @classmethod
    def from_function(cls, fn, lows, highs, points=65):
        axes = [np.linspace(lo, hi, points) for lo, hi in zip(lows, highs)]
        mesh = np.meshgrid(*axes, indexing="ij")
        vals = np.vectorize(lambda *a: float(fn(*a)))(*mesh)
        return cls(axes, vals, list(zip(lows, highs)))

    @property
    def arity(self):
        return len(self.grid)

    def __call__(self, parent_values):
        pv = np.asarray(parent_values, dtype=float)
        lo, hi = self.box[:, 0], self.box[:, 1]
        slack = 1e-12 * np.maximum(1.0, np.abs(self.box)).max(axis=1)
        bad = (pv < lo - slack) | (pv > hi + slack)
        if bad.any():
            row = int(np.argwhere(bad.any(axis=1))[0, 0])
            raise DomainViolation(f"parent values {pv[row].tolist()} outside declared box {self.box.tolist()}")
        return self._interp(np.clip(pv, lo, hi))


# --------------------------------------------------------------------------
# noise


@dataclass(frozen=True)
class Uniform:
    a: float
    b: float
    dist = "uniform"

    def __post_init__(self):
        if not (np.isfinite(self.a) and np.isfinite(self.b)) or self.b < self.a:
            raise ConfigError(f"uniform noise needs finite a <= b, got a={self.a}, b={self.b}")

    def draw(self, rng, size):
        return rng.uniform(self.a, self.b, size) if self.b > self.a else np.full(size, float(self.a))

    def support(self):
        return (self.a, self.b)

    def to_dict(self):
        return {"dist": "uniform", "a": self.a, "b": self.b}


@dataclass(frozen=True)
class TruncatedGaussian:
    mean: float
    sd: float
    lo: float
    hi: float
    dist = "truncated_gaussian"

    def __post_init__(self):
        if not (np.isfinite(self.lo) and np.isfinite(self.hi)) or not self.lo < self.hi:
            raise ConfigError("truncated_gaussian needs finite lo < hi")
        if not self.sd > 0:
            raise ConfigError("truncated_gaussian needs sd > 0")

    def draw(self, rng, size):
        a, b = (self.lo - self.mean) / self.sd, (self.hi - self.mean) / self.sd
        return truncnorm.rvs(a, b, loc=self.mean, scale=self.sd, size=size, random_state=rng)

    def support(self):
        return (self.lo, self.hi)

    def to_dict(self):
        return {"dist": "truncated_gaussian", "mean": self.mean, "sd": self.sd, "lo": self.lo, "hi": self.hi}


@dataclass(frozen=True)
class Empirical:
    points: tuple
    dist = "empirical"

    def __init__(self, points):
        pts = tuple(float(v) for v in np.asarray(points, dtype=float).ravel())
        if not pts:
            raise ConfigError("empirical noise needs at least one point")
        if not all(np.isfinite(pts)):
            raise ConfigError("empirical noise points must be finite")
        object.__setattr__(self, "points", pts)

    def draw(self, rng, size):
        return np.asarray(self.points)[rng.integers(len(self.points), size=size)]

    def support(self):
        return (min(self.points), max(self.points))

    def to_dict(self):
        return {"dist": "empirical", "points": list(self.points)}


# --------------------------------------------------------------------------
# model


class ScmModel:
    """Immutable additive-noise SCM with scalar exogenous coordinates."""

    def __init__(self, dag: DagSpec, equations: Sequence, noise: Sequence, names=None):
        n = dag.node_count
        if len(equations) != n or len(noise) != n:
            raise ConfigError(f"need one equation and one noise spec per node (n={n})")
        for i, (eq, ps) in enumerate(zip(equations, dag.parent_sets)):
            if eq.arity != len(ps):
                raise ConfigError(f"equations[{i}]: {eq.arity} inputs for {len(ps)} parents")
        self.dag = dag
        self.equations = tuple(equations)
        self.noise = tuple(noise)
        self.names = tuple(names) if names is not None else tuple(f"X{i}" for i in range(n))
        self.order = tuple(validate_dag(dag))
        self.exogenous_dims = (1,) * n

    @property
    def n(self):
        return self.dag.node_count

    def _structural(self, i, x):
        ps = self.dag.parent_sets[i]
        return self.equations[i](x[:, list(ps)])

    def forward(self, u):
        """g(u): noise to features, vectorised over leading rows."""
        u = np.asarray(u, dtype=float)
        flat = u.reshape(-1, u.shape[-1]) if u.ndim else u
        if flat.shape[-1] != self.n:
            raise DimensionMismatch(f"expected length-{self.n} vectors, got {flat.shape[-1]}")
        x = np.empty_like(flat)
        for i in self.order:
            x[:, i] = self._structural(i, x) + flat[:, i]
        return x.reshape(u.shape)

    def inverse(self, x):
        """g^{-1}(x) = x - f(x)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, x.shape[-1])
        if flat.shape[-1] != self.n:
            raise DimensionMismatch(f"expected length-{self.n} vectors, got {flat.shape[-1]}")
        u = np.empty_like(flat)
        for i in range(self.n):
            u[:, i] = flat[:, i] - self._structural(i, flat)
        return u.reshape(x.shape)

    def is_linear(self):
        return all(isinstance(eq, LinearEquation) for eq in self.equations)

    def linear_matrix(self):
        """(B, c) with f(x) = B x + c, for linear models."""
        if not self.is_linear():
            raise ConfigError("model has non-linear equations")
        B = np.zeros((self.n, self.n))
        c = np.zeros(self.n)
        for i, (eq, ps) in enumerate(zip(self.equations, self.dag.parent_sets)):
            for j, a in zip(ps, eq.coeffs):
                B[i, j] = a
            c[i] = eq.intercept
        return B, c

    def with_equations(self, equations):
        return ScmModel(self.dag, equations, self.noise, self.names)

    def with_noise(self, noise):
        return ScmModel(self.dag, self.equations, noise, self.names)


def reduced_form_forward(model: ScmModel, u):
    return model.forward(u)


def reduced_form_inverse(model: ScmModel, x):
    return model.inverse(x)


# --------------------------------------------------------------------------
# samples


@dataclass
class SampleMatrix:
    rows: np.ndarray
    space: str = FEATURE
    weights: np.ndarray = field(default=None)

    def __post_init__(self):
        rows = np.asarray(self.rows, dtype=float)
        if rows.ndim == 1:
            rows = rows[:, None]
        if rows.ndim != 2 or rows.shape[0] == 0:
            raise DimensionMismatch("sample matrix needs shape (N, n) with N >= 1")
        self.rows = rows
        if self.space not in (FEATURE, EXOGENOUS):
            raise ConfigError(f"unknown space tag {self.space!r}")
        if self.weights is None:
            self.weights = np.full(rows.shape[0], 1.0 / rows.shape[0])
        else:
            w = np.asarray(self.weights, dtype=float)
            if w.shape != (rows.shape[0],) or (w < 0).any() or abs(w.sum() - 1.0) > 1e-12:
                raise ConfigError("sample weights must be nonnegative, one per row, summing to 1")
            self.weights = w

    @property
    def N(self):
        return self.rows.shape[0]

    @property
    def n(self):
        return self.rows.shape[1]

    def as_distribution(self):
        return DiscreteDistribution(self.rows, self.weights)


def sample(model: ScmModel, N: int, seed: int) -> SampleMatrix:
    """N iid feature-space draws; each node's noise uses its own child stream."""
    if N < 1:
        raise ConfigError("N must be >= 1")
    streams = np.random.SeedSequence(seed).spawn(model.n)
    u = np.column_stack([nz.draw(np.random.default_rng(s), N) for nz, s in zip(model.noise, streams)])
    return SampleMatrix(model.forward(u), FEATURE)


def sample_noise(model: ScmModel, N: int, seed: int) -> SampleMatrix:
    streams = np.random.SeedSequence(seed).spawn(model.n)
    u = np.column_stack([nz.draw(np.random.default_rng(s), N) for nz, s in zip(model.noise, streams)])
    return SampleMatrix(u, EXOGENOUS)


def push_to_exogenous(model: ScmModel, s: SampleMatrix) -> SampleMatrix:
    if s.space != FEATURE:
        raise ConfigError("push_to_exogenous expects a feature-space sample")
    return SampleMatrix(model.inverse(s.rows), EXOGENOUS, s.weights.copy())


def push_to_feature(model: ScmModel, s: SampleMatrix) -> SampleMatrix:
    if s.space != EXOGENOUS:
        raise ConfigError("push_to_feature expects an exogenous-space sample")
    return SampleMatrix(model.forward(s.rows), FEATURE, s.weights.copy())


def merge_values(values, weights, rtol=1e-12):
    """Sorted distinct values with aggregated weights.

    Values closer than ``rtol * max(1, |v|)`` are merged so that round-trip
    noise from g and g^{-1} does not split a tie into two atoms.
    """
    v = np.asarray(values, dtype=float).ravel()
    w = np.asarray(weights, dtype=float).ravel()
    idx = np.argsort(v, kind="stable")
    v, w = v[idx], w[idx]
    if v.size == 0:
        return v, w
    gap = np.diff(v) > rtol * np.maximum(1.0, np.abs(v[1:]))
    starts = np.concatenate([[0], np.flatnonzero(gap) + 1])
    return v[starts], np.add.reduceat(w, starts)


def coordinate_marginals(s: SampleMatrix):
    """Per-coordinate empirical marginals as (values, weights) pairs."""
    return [merge_values(s.rows[:, i], s.weights) for i in range(s.n)]


def product_empirical(model: ScmModel | None, s: SampleMatrix, cap=None) -> DiscreteDistribution:
    """Product of the coordinate marginals of an exogenous sample."""
    if s.space != EXOGENOUS:
        raise ConfigError("product_empirical expects an exogenous-space sample")
    margs = coordinate_marginals(s)
    cap = grid_cap() if cap is None else cap
    size = int(np.prod([len(v) for v, _ in margs], dtype=object))
    if size > cap:
        raise GridTooLarge(f"product grid has {size} atoms, cap is {cap}")
    return product_distribution(margs)


def product_distribution(margs):
    vals = [v for v, _ in margs]
    wts = [w for _, w in margs]
    atoms = np.stack(np.meshgrid(*vals, indexing="ij"), axis=-1).reshape(-1, len(vals))
    weights = wts[0]
    for w in wts[1:]:
        weights = np.multiply.outer(weights, w)
    return DiscreteDistribution(atoms, np.ravel(weights))


# --------------------------------------------------------------------------
# config and CSV I/O


def _need(obj, key, path):
    if not isinstance(obj, dict) or key not in obj:
        raise ConfigError(f"{path}.{key}: missing field")
    return obj[key]


def _num(obj, key, path):
    v = _need(obj, key, path)
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{path}.{key}: expected a number, got {v!r}")
    return float(v)


def _noise_from_dict(d, path):
    dist = _need(d, "dist", path)
    if dist == "uniform":
        return Uniform(_num(d, "a", path), _num(d, "b", path))
    if dist in ("truncated_gaussian", "truncated-gaussian"):
        return TruncatedGaussian(_num(d, "mean", path), _num(d, "sd", path), _num(d, "lo", path), _num(d, "hi", path))
    if dist == "empirical":
        pts = _need(d, "points", path)
        if not isinstance(pts, list):
            raise ConfigError(f"{path}.points: expected a list")
        return Empirical(pts)
    raise ConfigError(f"{path}.dist: unknown distribution {dist!r}")


def _equation_from_dict(d, parents, path):
    kind = _need(d, "kind", path)
    if kind == "linear":
        coeffs = d.get("coeffs", {})
        if not isinstance(coeffs, dict):
            raise ConfigError(f"{path}.coeffs: expected an object keyed by parent name")
        extra = set(coeffs) - set(parents)
        if extra:
            raise ConfigError(f"{path}.coeffs: {sorted(extra)} are not parents")
        missing = [p for p in parents if p not in coeffs]
        if missing:
            raise ConfigError(f"{path}.coeffs.{missing[0]}: missing field")
        vals = []
        for p in parents:
            v = coeffs[p]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"{path}.coeffs.{p}: expected a number")
            vals.append(float(v))
        icpt = d.get("intercept", 0.0)
        if isinstance(icpt, bool) or not isinstance(icpt, (int, float)):
            raise ConfigError(f"{path}.intercept: expected a number")
        return LinearEquation(vals, icpt)
    if kind in ("tabulated", "tabulated-nonlinear"):
        grid = _need(d, "grid", path)
        values = _need(d, "values", path)
        if not isinstance(grid, list) or len(grid) != len(parents):
            raise ConfigError(f"{path}.grid: expected one axis per parent ({len(parents)})")
        return TabulatedEquation(grid, values, d.get("box"))
    raise ConfigError(f"{path}.kind: unknown equation kind {kind!r}")


def scm_from_config(cfg) -> ScmModel:
    if not isinstance(cfg, dict):
        raise ConfigError("scm: expected a JSON object")
    names = _need(cfg, "nodes", "scm")
    if not isinstance(names, list) or not names or len(set(names)) != len(names):
        raise ConfigError("scm.nodes: expected a nonempty list of distinct names")
    names = [str(v) for v in names]
    index = {nm: i for i, nm in enumerate(names)}
    edges = cfg.get("edges", [])
    if not isinstance(edges, list):
        raise ConfigError("scm.edges: expected a list of [parent, child] pairs")
    pairs = []
    for k, e in enumerate(edges):
        if not isinstance(e, (list, tuple)) or len(e) != 2 or e[0] not in index or e[1] not in index:
            raise ConfigError(f"scm.edges[{k}]: expected [parent, child] with known node names")
        pairs.append((index[e[0]], index[e[1]]))
    dag = DagSpec.from_edges(len(names), pairs)
    validate_dag(dag)
    eqs_cfg = cfg.get("equations", {})
    noise_cfg = _need(cfg, "noise", "scm")
    if not isinstance(eqs_cfg, dict) or not isinstance(noise_cfg, dict):
        raise ConfigError("scm.equations / scm.noise: expected objects keyed by node name")
    equations, noise = [], []
    for i, nm in enumerate(names):
        parents = [names[j] for j in dag.parent_sets[i]]
        if nm in eqs_cfg:
            equations.append(_equation_from_dict(eqs_cfg[nm], parents, f"scm.equations.{nm}"))
        elif parents:
            raise ConfigError(f"scm.equations.{nm}: missing field")
        else:
            equations.append(LinearEquation())
        noise.append(_noise_from_dict(_need(noise_cfg, nm, "scm.noise"), f"scm.noise.{nm}"))
    return ScmModel(dag, equations, noise, names)


def scm_to_config(model: ScmModel) -> dict:
    names = list(model.names)
    eqs = {}
    for i, (eq, ps) in enumerate(zip(model.equations, model.dag.parent_sets)):
        if isinstance(eq, LinearEquation):
            eqs[names[i]] = {
                "kind": "linear",
                "coeffs": {names[j]: a for j, a in zip(ps, eq.coeffs)},
                "intercept": eq.intercept,
            }
        else:
            eqs[names[i]] = {
                "kind": "tabulated",
                "grid": [g.tolist() for g in eq.grid],
                "values": eq.values.tolist(),
                "box": eq.box.tolist(),
            }
    return {
        "nodes": names,
        "edges": [[names[a], names[b]] for a, b in model.dag.edges()],
        "equations": eqs,
        "noise": {names[i]: nz.to_dict() for i, nz in enumerate(model.noise)},
    }


def load_scm(path) -> ScmModel:
    try:
        with open(path) as fh:
            cfg = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"scm: cannot read {path}: {exc.strerror}")
    except json.JSONDecodeError as exc:
        raise ConfigError(f"scm: {path} is not valid JSON ({exc.msg} at line {exc.lineno})")
    return scm_from_config(cfg)


def save_scm(model: ScmModel, path):
    with open(path, "w") as fh:
        json.dump(scm_to_config(model), fh, indent=2, sort_keys=True)
        fh.write("\n")


def fmt(v):
    return repr(float(v))


def samples_to_csv(s: SampleMatrix, names, header_lines=(), with_weights=None) -> str:
    if len(names) != s.n:
        raise DimensionMismatch("one column name per coordinate required")
    if with_weights is None:
        with_weights = not np.allclose(s.weights, 1.0 / s.N, rtol=0, atol=1e-15)
    buf = io.StringIO()
    for line in header_lines:
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(names) + (["weight"] if with_weights else []))
    for k in range(s.N):
        row = [fmt(v) for v in s.rows[k]]
        if with_weights:
            row.append(fmt(s.weights[k]))
        w.writerow(row)
    return buf.getvalue()


def read_samples_csv(path, names=None, space=FEATURE) -> SampleMatrix:
    """Read a headered CSV; ``#`` lines are metadata and skipped."""
    try:
        with open(path, newline="") as fh:
            lines = [ln for ln in fh if not ln.startswith("#") and ln.strip()]
    except OSError as exc:
        raise ConfigError(f"samples: cannot read {path}: {exc.strerror}")
    if not lines:
        raise ConfigError(f"samples: {path} has no header row")
    reader = csv.reader(lines)
    header = [h.strip() for h in next(reader)]
    cols = [h for h in header if h != "weight"]
    if names is not None:
        missing = [nm for nm in names if nm not in cols]
        if missing:
            raise ConfigError(f"samples: {path} lacks column {missing[0]!r}")
        cols = list(names)
    idx = [header.index(c) for c in cols]
    widx = header.index("weight") if "weight" in header else None
    rows, wts = [], []
    for lineno, rec in enumerate(reader, start=2):
        if len(rec) != len(header):
            raise ConfigError(f"samples: {path} row {lineno} has {len(rec)} fields, expected {len(header)}")
        try:
            rows.append([float(rec[j]) for j in idx])
            if widx is not None:
                wts.append(float(rec[widx]))
        except ValueError:
            raise ConfigError(f"samples: {path} row {lineno} has a non-numeric field")
    if not rows:
        raise ConfigError(f"samples: {path} has no data rows")
    arr = np.asarray(rows)
    if not np.isfinite(arr).all():
        raise ConfigError(f"samples: {path} contains non-finite values")
    return SampleMatrix(arr, space, np.asarray(wts) if widx is not None else None)
