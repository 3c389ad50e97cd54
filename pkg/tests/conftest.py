import os

import numpy as np
import pytest
from hypothesis import settings

from scot import scm

# keep POT away from optional deep-learning backends
for _name in ("TENSORFLOW", "PYTORCH", "JAX", "CUPY"):
    os.environ.setdefault(f"POT_BACKEND_DISABLE_{_name}", "1")

settings.register_profile("repo", max_examples=60, deadline=None)
settings.load_profile("repo")

CONFIG_DIR = os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "configs")


def linear_model(coeffs, noise=None, names=None):
    """Model from {child: {parent: coeff}} over nodes 0..n-1."""
    n = 1 + max([c for c in coeffs] + [p for par in coeffs.values() for p in par], default=0)
    parents = [sorted(coeffs.get(i, {})) for i in range(n)]
    eqs = [scm.LinearEquation([coeffs.get(i, {})[j] for j in ps]) for i, ps in enumerate(parents)]
    noise = noise or [scm.Uniform(-1.0, 1.0)] * n
    return scm.ScmModel(scm.DagSpec(parents), eqs, noise, names)


@pytest.fixture
def demo_model():
    """A = U_A, E = 0.5 A + U_E with uniform(-1, 1) noise."""
    return linear_model({1: {0: 0.5}}, names=["A", "E"])


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


DEMO_SCM = {
    "nodes": ["A", "E"],
    "edges": [["A", "E"]],
    "equations": {"E": {"kind": "linear", "coeffs": {"A": 0.5}, "intercept": 0.0}},
    "noise": {
        "A": {"dist": "truncated_gaussian", "mean": 0.0, "sd": 1.0, "lo": -5.0, "hi": 5.0},
        "E": {"dist": "truncated_gaussian", "mean": 0.0, "sd": 1.0, "lo": -5.0, "hi": 5.0},
    },
}


def cli_workspace(root, n_samples=4):
    """Write an SCM, two sample CSVs and one small run config per subcommand."""
    import json

    from scot import cli

    def put(name, obj):
        (root / name).write_text(json.dumps(obj))
        return str(root / name)

    put("scm.json", DEMO_SCM)
    put("sample_src.json", {"scm": "scm.json", "N": n_samples, "seed": 1})
    put("sample_tgt.json", {"scm": "scm.json", "N": n_samples, "seed": 2})
    assert cli.main(["sample", "--config", str(root / "sample_src.json"), "--out", str(root / "src.csv")]) == 0
    assert cli.main(["sample", "--config", str(root / "sample_tgt.json"), "--out", str(root / "tgt.csv")]) == 0
    return {
        "sample": put("c_sample.json", {"scm": "scm.json", "N": 5}),
        "solve": put(
            "c_solve.json",
            {"scm": "scm.json", "source": "src.csv", "target": "tgt.csv", "cost": {"p": 2}, "solve": {"eps": 0.1}},
        ),
        "worstcase": put(
            "c_wc.json",
            {
                "scm": "scm.json",
                "cost": {"p": 2},
                "ambiguity": {"deltas": [0.1, 0.3], "psis": ["sq_diff", "abs_sum"], "mc_count": 40, "grid_size": 4},
            },
        ),
        "radius": put("c_radius.json", {"radius": {"N": 1000, "eps_conf": 0.5, "p": 1, "d": 3}}),
        "rates": put(
            "c_rates.json",
            {"scm": "scm.json", "rates": {"N_list": [5, 10], "trials": 2, "p": 1, "n_ref": 60}},
        ),
        "fit": put("c_fit.json", {"scm": "scm.json", "samples": "src.csv"}),
        "stability": put(
            "c_stab.json",
            {
                "scm": "scm.json",
                "source": "src.csv",
                "target": "tgt.csv",
                "cost": {"p": 2},
                "stability": {"scales": [0.1, 0.0], "eps": 0.1},
            },
        ),
    }


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
