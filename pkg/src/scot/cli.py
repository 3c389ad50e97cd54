"""Command-line front end: ``scot <subcommand> --config run.json``.

Exit codes: 0 success, 2 config or input error, 3 resource cap,
4 solver did not converge (unless --allow-nonconverged).
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import dro, estimation, relaxed
from . import scm as scm_mod
from .errors import ConfigError, GridTooLarge, InstanceTooLarge, NonConvergence, ScotError
from .ot import CostSpec

EXIT_OK, EXIT_CONFIG, EXIT_CAP, EXIT_NONCONVERGED = 0, 2, 3, 4


class _Failed(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


# --------------------------------------------------------------------------
# run config


class RunConfig:
    """Parsed run config plus CLI overrides; paths resolve against the config file."""

    def __init__(self, raw: dict, base_dir: Path, args):
        if not isinstance(raw, dict):
            raise ConfigError("config: expected a JSON object")
        self.raw = raw
        self.base_dir = base_dir
        self.seed = int(args.seed if args.seed is not None else raw.get("seed", 0))
        if self.seed < 0:
            raise ConfigError("seed: must be >= 0")
        self.eps_override = args.eps
        self.delta_override = args.delta
        self._scm_cfg = None

    def path(self, key, section=None):
        obj = self.raw if section is None else self.section(section)
        where = key if section is None else f"{section}.{key}"
        v = obj.get(key)
        if not isinstance(v, str):
            raise ConfigError(f"{where}: missing field (expected a file path)")
        p = (self.base_dir / v).resolve()
        if not p.is_file():
            raise ConfigError(f"{where}: file not found: {v}")
        return p

    def section(self, name, required=False):
        v = self.raw.get(name)
        if v is None:
            if required:
                raise ConfigError(f"{name}: missing field")
            return {}
        if not isinstance(v, dict):
            raise ConfigError(f"{name}: expected an object")
        return v

    def scm_config(self):
        if self._scm_cfg is None:
            v = self.raw.get("scm")
            if v is None:
                raise ConfigError("scm: missing field")
            if isinstance(v, str):
                p = self.path("scm")
                try:
                    v = json.loads(p.read_text())
                except json.JSONDecodeError as e:
                    raise ConfigError(f"scm: {p.name} is not valid JSON ({e})") from e
            self._scm_cfg = v
        return self._scm_cfg

    def model(self):
        return scm_mod.scm_from_config(self.scm_config())

    def cost(self):
        sec = self.section("cost")
        p = sec.get("p", 1)
        if isinstance(p, bool) or not isinstance(p, (int, float)):
            raise ConfigError("cost.p: expected a number")
        try:
            return CostSpec(float(p))
        except ValueError as e:
            raise ConfigError(f"cost.p: {e}") from e

    def solve_config(self, eps=None):
        sec = dict(self.section("solve"))
        sec.pop("eps_list", None)
        sec.pop("eps_units", None)
        sec.pop("plan_out", None)
        if eps is not None:
            sec["eps"] = eps
        try:
            return relaxed.RelaxedSolveConfig(**sec)
        except TypeError as e:
            raise ConfigError(f"solve: {e}") from e

    def hash(self):
        """sha256 of the effective config, with the SCM inlined and overrides applied."""
        eff = dict(self.raw)
        if "scm" in eff:
            try:
                eff["scm"] = self.scm_config()
            except ConfigError:
                pass
        eff["seed"] = self.seed
        eff["_overrides"] = {"eps": self.eps_override, "delta": self.delta_override}
        blob = json.dumps(eff, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def meta(self, command):
        return {"tool": "scot", "version": __version__, "command": command, "seed": self.seed, "config_sha256": self.hash()}


def _float_list(text, flag):
    try:
        vals = [float(t) for t in text.split(",") if t.strip()]
    except ValueError as e:
        raise ConfigError(f"{flag}: expected a comma-separated list of numbers") from e
    if not vals:
        raise ConfigError(f"{flag}: empty list")
    return vals


def _num_list(obj, key, where):
    v = obj.get(key)
    if not isinstance(v, list) or not v:
        raise ConfigError(f"{where}.{key}: expected a nonempty list")
    out = []
    for k, x in enumerate(v):
        if isinstance(x, bool) or not isinstance(x, (int, float)):
            raise ConfigError(f"{where}.{key}[{k}]: expected a number")
        out.append(float(x))
    return out


def _int(obj, key, where, default=None):
    v = obj.get(key, default)
    if v is None:
        raise ConfigError(f"{where}.{key}: missing field")
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{where}.{key}: expected an integer")
    return v


# --------------------------------------------------------------------------
# output


def _csv_header(meta):
    return [f"{k}: {meta[k]}" for k in ("tool", "version", "command", "seed", "config_sha256")]


def _csv_text(meta, columns, rows):
    buf = io.StringIO()
    for line in _csv_header(meta):
        buf.write(f"# {line}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([scm_mod.fmt(v) if isinstance(v, float) else ("" if v is None else v) for v in row])
    return buf.getvalue()


def _json_text(meta, body):
    return json.dumps({"meta": meta, **body}, indent=2, sort_keys=True) + "\n"


def _emit(text, out):
    if out is None:
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _sidecar(out, suffix):
    return None if out is None else str(Path(out).with_suffix(suffix))


# --------------------------------------------------------------------------
# subcommands


def cmd_sample(rc: RunConfig, args):
    model = rc.model()
    N = _int(rc.raw, "N", "config")
    if N < 1:
        raise ConfigError("config.N: must be >= 1")
    s = scm_mod.sample(model, N, rc.seed)
    meta = rc.meta("sample")
    _emit(scm_mod.samples_to_csv(s, model.names, _csv_header(meta)), args.out)


def _read_pair(rc, model):
    src = scm_mod.read_samples_csv(rc.path("source"), model.names)
    tgt = scm_mod.read_samples_csv(rc.path("target"), model.names)
    return src, tgt


def _eps_values(rc):
    sec = rc.section("solve")
    if rc.eps_override is not None:
        vals = _float_list(rc.eps_override, "--eps")
    elif "eps_list" in sec:
        vals = _num_list(sec, "eps_list", "solve")
    else:
        vals = [float(sec.get("eps", relaxed.RelaxedSolveConfig.eps))]
    units = sec.get("eps_units", "absolute")
    if units not in ("absolute", "mean_cost"):
        raise ConfigError("solve.eps_units: expected 'absolute' or 'mean_cost'")
    return vals, units


def _oracles(src, tgt, model, cost):
    out = {"structural": relaxed.structural_wasserstein_exact(src, tgt, model, cost)}
    try:
        out["classical"] = relaxed.classical_wasserstein_expanded(src, tgt, model, cost)
    except InstanceTooLarge:
        # past the LP cap: network simplex on the same expanded products
        a = scm_mod.product_empirical(model, scm_mod.push_to_exogenous(model, src))
        b = scm_mod.product_empirical(model, scm_mod.push_to_exogenous(model, tgt))
        out["classical"] = dro.classical_distance_large(a, b, cost.p)
    return out


def cmd_solve(rc: RunConfig, args):
    model = rc.model()
    cost = rc.cost()
    src, tgt = _read_pair(rc, model)
    eps_vals, units = _eps_values(rc)
    prob = relaxed.build_grid_problem(src, tgt, model, cost)
    if units == "mean_cost":
        eps_vals = [e * float(prob.cost_tensor.mean()) for e in eps_vals]
    meta = rc.meta("solve")
    results = []
    for e in eps_vals:
        cfg = rc.solve_config(eps=e)
        if cfg.p is not None and float(cfg.p) != cost.p:
            raise ConfigError(f"solve.p: {cfg.p} disagrees with cost.p {cost.p}")
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", NonConvergence)
            results.append(relaxed.solve_grid(prob, cfg))
    body = {"oracles": _oracles(src, tgt, model, cost)}
    if len(results) == 1:
        body["result"] = results[0].to_dict()
    else:
        body["sweep"] = [r.to_dict() for r in results]
    _emit(_json_text(meta, body), args.out)
    plan_out = rc.section("solve").get("plan_out")
    if plan_out is not None and len(results) == 1:
        lines = _csv_header(meta)
        (rc.base_dir / plan_out).write_text(results[0].plan.to_csv(header_lines=lines))
    bad = [r.eps for r in results if not r.converged]
    if bad and not args.allow_nonconverged:
        raise _Failed(EXIT_NONCONVERGED, f"solver did not converge at eps={bad}")


def _demo_base(rc: RunConfig, sec):
    grid = _int(sec, "grid_size", "ambiguity", 10)
    if "scm" not in rc.raw:
        alpha = sec.get("alpha", 0.5)
        if isinstance(alpha, bool) or not isinstance(alpha, (int, float)):
            raise ConfigError("ambiguity.alpha: expected a number")
        return dro.GaussianBase(float(alpha), grid)
    model = rc.model()
    ok = (
        model.n == 2
        and list(model.dag.parent_sets[1]) == [0]
        and model.is_linear()
        and all(isinstance(u, scm_mod.TruncatedGaussian) and u.mean == 0 and u.sd == 1 for u in model.noise)
        and model.equations[1].intercept == 0
    )
    if not ok:
        raise ConfigError("scm: worstcase supports the two-node linear model A -> E with standard Gaussian noise")
    return dro.GaussianBase(float(model.equations[1].coeffs[0]), grid)


def cmd_worstcase(rc: RunConfig, args):
    sec = rc.section("ambiguity", required=True)
    base = _demo_base(rc, sec)
    cost = rc.cost()
    if rc.delta_override is not None:
        deltas = _float_list(rc.delta_override, "--delta")
    else:
        deltas = _num_list(sec, "deltas", "ambiguity")
    psis = sec.get("psis", list(dro.LOSSES))
    kinds = sec.get("kinds", list(dro.KINDS))
    if not isinstance(psis, list) or not psis:
        raise ConfigError("ambiguity.psis: expected a nonempty list")
    if not isinstance(kinds, list) or not kinds or any(k not in dro.KINDS for k in kinds):
        raise ConfigError(f"ambiguity.kinds: expected a nonempty subset of {list(dro.KINDS)}")
    losses = [dro.get_loss(name) for name in psis]
    mc = _int(sec, "mc_count", "ambiguity", 10000)
    table = {}
    for delta in deltas:
        for kind in kinds:
            stream = dro.sampler_stream(kind, delta, mc, rc.seed, base, cost)
            for loss, wc in zip(losses, dro.worst_case_table(stream, [l.fn for l in losses])):
                table[(loss.name, delta, kind)] = wc
    rows = []
    for loss in losses:
        for delta in deltas:
            s = table.get((loss.name, delta, "structural"))
            g = table.get((loss.name, delta, "gcausal_mc"))
            gap = 100.0 * (g.value - s.value) / s.value if s is not None and g is not None and s.value != 0 else None
            for kind in kinds:
                wc = table[(loss.name, delta, kind)]
                rows.append([loss.name, float(delta), kind, wc.value, wc.index, mc, rc.seed, wc.standard_error(), gap])
    cols = ["psi", "delta", "kind", "worst_loss", "argmax_index", "mc_count", "seed", "mc_se", "gap_pct"]
    _emit(_csv_text(rc.meta("worstcase"), cols, rows), args.out)


def cmd_radius(rc: RunConfig, args):
    sec = rc.section("radius", required=True)
    fields = dro.RadiusParams.__dataclass_fields__
    extra = set(sec) - set(fields)
    if extra:
        raise ConfigError(f"radius: unknown fields {sorted(extra)}")
    for k, v in sec.items():
        if isinstance(v, bool) or not isinstance(v, (int, float)):
            raise ConfigError(f"radius.{k}: expected a number")
    if "N" not in sec or "eps_conf" not in sec:
        raise ConfigError("radius.N / radius.eps_conf: missing field")
    params = dro.RadiusParams(**sec)
    upper = dro.radius_upper(params)
    factored = dro.radius_factored(params)
    ratio = factored / upper if upper > 0 else None
    body = {"radius_upper": upper, "radius_factored": factored, "ratio_factored_to_upper": ratio}
    _emit(_json_text(rc.meta("radius"), body), args.out)


def cmd_rates(rc: RunConfig, args):
    sec = rc.section("rates", required=True)
    model = rc.model()
    n_list = sec.get("N_list")
    if not isinstance(n_list, list) or not n_list or any(isinstance(v, bool) or not isinstance(v, int) for v in n_list):
        raise ConfigError("rates.N_list: expected a nonempty list of integers")
    trials = _int(sec, "trials", "rates")
    if trials < 1:
        raise ConfigError("rates.trials: must be >= 1")
    p = sec.get("p", rc.cost().p)
    n_ref = sec.get("n_ref")
    res = dro.rate_experiment(model, n_list, trials, float(p), rc.seed, n_ref=n_ref)
    meta = rc.meta("rates")
    rows = [[int(N), int(t), wc, wf] for N, t, wc, wf in res.rows]
    _emit(_csv_text(meta, ["N", "trial", "w_classical", "w_factored"], rows), args.out)
    summary = {
        "N_list": res.n_list,
        "mean_classical": res.mean_classical,
        "mean_factored": res.mean_factored,
        "slope_classical": res.slope_classical,
        "slope_factored": res.slope_factored,
        "se_classical": res.se_classical,
        "se_factored": res.se_factored,
        "slopes_absent": res.slopes_absent,
        "n_ref": res.n_ref,
        "reference_note": "distances are to a reference sample of size n_ref, not the true law; this biases small-N means upward",
    }
    text = _json_text(meta, summary)
    side = _sidecar(args.out, ".json")
    if side is None:
        sys.stdout.write(text)
    else:
        Path(side).write_text(text)


def cmd_fit(rc: RunConfig, args):
    model = rc.model()
    s = scm_mod.read_samples_csv(rc.path("samples"), model.names)
    report = estimation.fit_linear_anm(s, model.dag, model.names)
    _emit(_json_text(rc.meta("fit"), report.to_config()), args.out)


def cmd_stability(rc: RunConfig, args):
    sec = rc.section("stability", required=True)
    model = rc.model()
    cost = rc.cost()
    src, tgt = _read_pair(rc, model)
    scales = _num_list(sec, "scales", "stability")
    eps = sec.get("eps", rc.section("solve").get("eps", relaxed.RelaxedSolveConfig.eps))
    if rc.eps_override is not None:
        eps = _float_list(rc.eps_override, "--eps")[0]
    res = estimation.stability_curve(
        src, tgt, model, scales, cost, rc.solve_config(eps=float(eps)), seed=rc.seed,
        mode=sec.get("mode", "jitter"), node=_int(sec, "node", "stability", 0),
    )
    rows = [[r.scale, r.sup_gap, r.gap, r.distance_true, r.distance_perturbed] for r in res.rows]
    cols = ["scale", "sup_gap", "gap", "distance_true", "distance_perturbed"]
    _emit(_csv_text(rc.meta("stability"), cols, rows), args.out)
    if not all(r.converged for r in res.rows) and not args.allow_nonconverged:
        raise _Failed(EXIT_NONCONVERGED, "solver did not converge for some scales")


COMMANDS = {
    "sample": cmd_sample,
    "solve": cmd_solve,
    "worstcase": cmd_worstcase,
    "radius": cmd_radius,
    "rates": cmd_rates,
    "fit": cmd_fit,
    "stability": cmd_stability,
}


def build_parser():
    ap = argparse.ArgumentParser(prog="scot", description="Structural causal optimal transport tools.")
    ap.add_argument("--version", action="version", version=f"scot {__version__}")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", required=True, help="run config JSON")
        sp.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        sp.add_argument("--out", default=None, help="output path (default stdout)")
        sp.add_argument("--eps", default=None, help="comma-separated eps values")
        sp.add_argument("--delta", default=None, help="comma-separated ball radii")
        sp.add_argument("--allow-nonconverged", action="store_true")
    return ap


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg_path = Path(args.config)
        try:
            raw = json.loads(cfg_path.read_text())
        except FileNotFoundError as e:
            raise ConfigError(f"--config: file not found: {args.config}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"--config: invalid JSON ({e})") from e
        rc = RunConfig(raw, cfg_path.resolve().parent, args)
        with np.errstate(all="ignore"):
            COMMANDS[args.command](rc, args)
    except _Failed as e:
        print(f"scot: {e}", file=sys.stderr)
        return e.code
    except (GridTooLarge, InstanceTooLarge) as e:
        print(f"scot: resource cap: {e}", file=sys.stderr)
        return EXIT_CAP
    except ScotError as e:
        print(f"scot: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, OSError) as e:
        print(f"scot: input error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
