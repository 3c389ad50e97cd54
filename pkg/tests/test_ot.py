import itertools
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from scot import ot
from scot.errors import AxisOutOfRange, ConfigError, CoordinateCountMismatch, DimensionMismatch, InstanceTooLarge


def brute_force_assignment(x, y, p):
    """min over permutations of mean_k c(x_k, y_sigma(k))^p, then ^(1/p)."""
    best = math.inf
    for perm in itertools.permutations(range(len(y))):
        total = 0.0
        for k, j in enumerate(perm):
            total += sum(abs(a - b) ** p for a, b in zip(x[k], y[j]))
        best = min(best, total / len(x))
    return best ** (1 / p)


def scalar_cost(x, y, p):
    out = []
    for a in x:
        row = []
        for b in y:
            row.append(sum(abs(s - t) ** p for s, t in zip(a, b)))
        out.append(row)
    return np.array(out)


def dist(points, weights=None):
    return ot.DiscreteDistribution(np.asarray(points, dtype=float), weights)


def test_cost_matrix_small():
    a = dist([[0.0], [1.0]])
    np.testing.assert_array_equal(ot.cost_matrix(a, a, ot.CostSpec(1)), [[0, 1], [1, 0]])
    C = ot.cost_matrix(dist([[0.0]]), dist([[3.0]]), ot.CostSpec(2))
    assert C[0, 0] == 9


def test_cost_matrix_matches_scalar_loop(rng):
    x, y = rng.standard_normal((4, 3)), rng.standard_normal((5, 3))
    for p in (1, 1.5, 2):
        C = ot.cost_matrix(dist(x), dist(y), ot.CostSpec(p))
        np.testing.assert_allclose(C, scalar_cost(x, y, p), rtol=0, atol=1e-14)


def test_cost_matrix_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        ot.cost_matrix(dist([[0.0]]), dist([[0.0, 1.0]]), ot.CostSpec(1))


def test_cost_p_below_one_rejected():
    with pytest.raises(ConfigError):
        ot.CostSpec(0.5)


def test_exact_ot_identity():
    a = dist([[0.0], [2.0], [5.0]])
    W, plan = ot.exact_ot(a, a, ot.CostSpec(1))
    assert abs(W) < 1e-12
    np.testing.assert_allclose(plan.mass, np.diag(a.weights), atol=1e-12)


def test_exact_ot_translation():
    W, _ = ot.exact_ot(dist([[0.0], [1.0]]), dist([[1.0], [2.0]]), ot.CostSpec(1))
    assert abs(W - 1) < 1e-12


def test_exact_ot_matches_permutations(rng):
    for _ in range(5):
        x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
        W, plan = ot.exact_ot(dist(x), dist(y), ot.CostSpec(2))
        assert abs(W - brute_force_assignment(x, y, 2)) < 1e-9
        assert max(plan.marginal_residuals()) < 1e-9


def test_exact_ot_cap():
    a = dist(np.arange(65.0)[:, None])
    with pytest.raises(InstanceTooLarge):
        ot.exact_ot(a, a, ot.CostSpec(1))


def test_exact_ot_symmetry(rng):
    for _ in range(50):
        x, y = rng.standard_normal((rng.integers(1, 7), 2)), rng.standard_normal((rng.integers(1, 7), 2))
        wa, wb = rng.dirichlet(np.ones(len(x))), rng.dirichlet(np.ones(len(y)))
        a, b = dist(x, wa), dist(y, wb)
        assert abs(ot.exact_ot(a, b, ot.CostSpec(1))[0] - ot.exact_ot(b, a, ot.CostSpec(1))[0]) < 1e-10
        assert ot.exact_ot(a, a, ot.CostSpec(1))[0] < 1e-10


def test_wasserstein_1d_examples():
    assert ot.wasserstein_1d(dist([[0.0]]), dist([[3.0]]), 2) == pytest.approx(3.0)
    a = dist([[1.0], [4.0]], [0.3, 0.7])
    assert ot.wasserstein_1d(a, a, 1) == 0.0


@given(
    st.integers(1, 6),
    st.integers(1, 6),
    st.sampled_from([1.0, 2.0, 3.0]),
    st.integers(0, 2**31 - 1),
)
def test_wasserstein_1d_matches_lp(na, nb, p, seed):
    r = np.random.default_rng(seed)
    a = dist(r.standard_normal(na)[:, None], r.dirichlet(np.ones(na)))
    b = dist(r.standard_normal(nb)[:, None], r.dirichlet(np.ones(nb)))
    assert abs(ot.wasserstein_1d(a, b, p) - ot.exact_ot(a, b, ot.CostSpec(p))[0]) < 1e-9


def test_factored_examples():
    a = [(np.array([0.0]), np.array([1.0]))] * 2
    b = [(np.array([1.0]), np.array([1.0]))] * 2
    assert ot.factored_wasserstein(a, b, 2) == pytest.approx(math.sqrt(2))
    assert ot.factored_wasserstein(a, a, 2) == 0.0
    with pytest.raises(CoordinateCountMismatch):
        ot.factored_wasserstein(a, b[:1], 2)


def test_factored_matches_expanded_lp(rng):
    from scot.scm import product_distribution

    for p in (1, 2):
        a = [(rng.standard_normal(3), rng.dirichlet(np.ones(3))) for _ in range(2)]
        b = [(rng.standard_normal(3), rng.dirichlet(np.ones(3))) for _ in range(2)]
        W = ot.exact_ot(product_distribution(a), product_distribution(b), ot.CostSpec(p))[0]
        assert abs(ot.factored_wasserstein(a, b, p) - W) < 1e-9


def test_factored_power_is_sum_of_powers(rng):
    a = [(rng.standard_normal(4), np.full(4, 0.25)) for _ in range(3)]
    b = [(rng.standard_normal(4), np.full(4, 0.25)) for _ in range(3)]
    per = [ot.wasserstein_1d(x, y, 2) for x, y in zip(a, b)]
    assert ot.factored_wasserstein(a, b, 2) == sum(w**2 for w in per) ** 0.5


def test_sinkhorn_large_eps_is_product(rng):
    a = dist(rng.standard_normal((4, 1)), rng.dirichlet(np.ones(4)))
    b = dist(rng.standard_normal((3, 1)), rng.dirichlet(np.ones(3)))
    C = ot.cost_matrix(a, b, ot.CostSpec(2))
    plan, _, _ = ot.sinkhorn(a, b, ot.CostSpec(2), 1e6 * C.max())
    np.testing.assert_allclose(plan.mass, np.outer(a.weights, b.weights), atol=1e-6)


def test_sinkhorn_single_point():
    a = dist([[1.0]])
    plan, obj, res = ot.sinkhorn(a, a, ot.CostSpec(1), 0.1)
    assert plan.mass.shape == (1, 1) and abs(plan.mass[0, 0] - 1) < 1e-12


# plain alternating updates converge slowly at the smallest eps
@pytest.mark.filterwarnings("ignore::scot.errors.NonConvergence")
def test_sinkhorn_approaches_lp(rng):
    x, y = rng.standard_normal((5, 2)), rng.standard_normal((5, 2))
    a, b = dist(x), dist(y)
    cost = ot.CostSpec(1)
    exact = ot.exact_ot(a, b, cost)[0]
    mean = ot.cost_matrix(a, b, cost).mean()
    vals = [ot.sinkhorn(a, b, cost, f * mean).objective for f in (1, 0.1, 0.01)]
    assert vals[0] >= vals[1] - 1e-8 >= vals[2] - 2e-8
    assert abs(vals[2] - exact) / exact < 0.01


def test_sinkhorn_transport_nondecreasing_in_eps(rng):
    for _ in range(5):
        a, b = dist(rng.standard_normal((4, 2))), dist(rng.standard_normal((5, 2)))
        mean = ot.cost_matrix(a, b, ot.CostSpec(2)).mean()
        vals = [ot.sinkhorn(a, b, ot.CostSpec(2), f * mean, tol=1e-12).objective for f in (0.01, 0.1, 1, 10)]
        assert all(v2 >= v1 - 1e-8 for v1, v2 in zip(vals, vals[1:]))


def test_sinkhorn_positive_entries(rng):
    a, b = dist(rng.standard_normal((6, 1))), dist(rng.standard_normal((6, 1)))
    plan = ot.sinkhorn(a, b, ot.CostSpec(2), 0.5).plan
    assert (plan.mass > 0).all()


def test_sinkhorn_nonconvergence_warns(rng):
    a, b = dist(rng.standard_normal((6, 1))), dist(rng.standard_normal((6, 1)))
    with pytest.warns(ot.NonConvergence):
        res = ot.sinkhorn(a, b, ot.CostSpec(2), 1e-3, tol=1e-15, max_iter=3)
    assert not res.converged and res.residual > 0


def test_multimarginal_two_axes_matches_sinkhorn(rng):
    wa, wb = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(5))
    C = rng.uniform(0, 1, (4, 5))
    mm = ot.sinkhorn_multimarginal(C, [wa, wb], 0.2, tol=1e-13)
    two = ot.sinkhorn_matrix(C, wa, wb, 0.2, tol=1e-13)
    np.testing.assert_allclose(mm.plan, two.plan.mass, atol=1e-10)


def test_multimarginal_zero_cost_is_product(rng):
    margs = [rng.dirichlet(np.ones(k)) for k in (2, 3, 2)]
    mm = ot.sinkhorn_multimarginal(np.zeros((2, 3, 2)), margs, 1.0)
    np.testing.assert_allclose(mm.plan, np.einsum("i,j,k->ijk", *margs), atol=1e-12)


def test_multimarginal_four_axes_residuals(rng):
    margs = [rng.dirichlet(np.ones(2)) for _ in range(4)]
    mm = ot.sinkhorn_multimarginal(rng.uniform(0, 1, (2, 2, 2, 2)), margs, 0.1, tol=1e-10)
    assert max(mm.residuals) < 1e-8
    for k, m in enumerate(margs):
        others = tuple(j for j in range(4) if j != k)
        assert np.abs(mm.plan.sum(axis=others) - m).sum() < 1e-8


def test_newton_refine_reaches_tolerance(rng):
    margs = [rng.dirichlet(np.ones(3)) for _ in range(4)]
    C = rng.uniform(0, 1, (3, 3, 3, 3))
    rough = ot.sinkhorn_multimarginal(C, margs, 0.01, tol=1e-3)
    ref = ot.refine_multimarginal(C, margs, 0.01, rough.potentials, tol=1e-12)
    assert max(ref.residuals) < 1e-10


def test_negentropy_zero_convention():
    assert ot.negentropy([0.0, 1.0]) == 0.0
    assert ot.negentropy([0.5, 0.5]) == pytest.approx(math.log(0.5))


def test_entropy_single_atom():
    r = ot.entropy_report(np.ones((1, 1, 1, 1)))
    assert r.H == 0 and r.H_i == [0.0, 0.0] and r.kl_to_product == 0


def test_entropy_product_plan_zero_kl(rng):
    m1, m2 = rng.dirichlet(np.ones(6)).reshape(2, 3), rng.dirichlet(np.ones(4)).reshape(2, 2)
    plan = np.einsum("ac,bd->abcd", m1, m2)
    assert abs(ot.entropy_report(plan).kl_to_product) < 1e-10


def test_entropy_matches_direct_kl(rng):
    plan = rng.uniform(0, 1, (2, 2, 2, 2))
    plan /= plan.sum()
    assert abs(ot.entropy_report(plan).kl_to_product - ot.kl_direct(plan)) < 1e-10


def test_pair_marginal_cases(rng):
    m = rng.dirichlet(np.ones(6)).reshape(2, 3)
    np.testing.assert_array_equal(ot.pair_marginal(m, 0), m)
    a, b = rng.dirichlet(np.ones(4)).reshape(2, 2), rng.dirichlet(np.ones(9)).reshape(3, 3)
    prod = np.einsum("ac,bd->abcd", a, b)
    np.testing.assert_allclose(ot.pair_marginal(prod, 1), b, atol=1e-15)
    plan = rng.uniform(0, 1, (2, 3, 2, 3))
    plan /= plan.sum()
    assert abs(ot.pair_marginal(plan, 0).sum() - 1) < 1e-12
    with pytest.raises(AxisOutOfRange):
        ot.pair_marginal(plan, 2)


@given(arrays(np.float64, (2, 3, 2, 2), elements=st.floats(0, 1)))
def test_kl_nonnegative(t):
    if t.sum() <= 0:
        return
    plan = t / t.sum()
    assert ot.entropy_report(plan).kl_to_product >= -1e-10


def test_plan_csv_and_json(rng):
    plan = ot.TransportPlan(np.array([[0.5, 0.0], [0.0, 0.5]]), "matrix", None, [np.full(2, 0.5)] * 2)
    lines = plan.to_csv(header_lines=["x: 1"]).splitlines()
    assert lines[0] == "# x: 1" and lines[1] == "i0,i1,mass" and len(lines) == 4
    assert '"total_mass": 1.0' in plan.to_json()
