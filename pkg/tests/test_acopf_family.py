import numpy as np
import pytest

from dc3 import autodiff as ad
from dc3.acopf import AcopfFamily, acopf_backward, complete_acopf, load_case, parse_matpower_case
from dc3.acopf.case import BR_B, BR_R, BR_X
from dc3.acopf.family import power_injection_jacobian
from dc3.engine import soft_loss
from dc3.errors import CompletionError, ContractError
from dc3.problems import sample_instances

from test_acopf_case import TWO_BUS


@pytest.fixture(scope="module")
def fam():
    return AcopfFamily.from_bundled("case57")


def random_partials(fam, rng, count, margin=0.1):
    a = rng.uniform(margin, 1 - margin, size=(count, fam.m))
    return fam.decode_np(a)


def test_dimensions(fam):
    assert (fam.n, fam.n_eq, fam.m, fam.d) == (128, 115, 13, 114)
    assert fam.n_ineq == 2 * (2 * fam.ng + fam.nb)


def test_decode_partial(fam):
    mid = 0.5 * (fam.z_lo + fam.z_hi)
    assert np.allclose(fam.decode_partial(np.zeros((1, fam.m))), mid)
    assert np.allclose(fam.decode_partial(np.full((1, fam.m), -50.0)), fam.z_hi)
    z = fam.decode_partial(np.random.default_rng(0).normal(0, 10, (100, fam.m)))
    assert np.all(z >= fam.z_lo) and np.all(z <= fam.z_hi)


def test_sampling_split_and_range(fam):
    data = sample_instances(fam, 1200, 0)
    assert len(data.test) == 100
    pd = data.X[:, :fam.nb]
    nz = fam.pd_nom != 0
    ratio = pd[:, nz] / fam.pd_nom[nz]
    assert ratio.min() >= 0.9 and ratio.max() <= 1.1


def test_box_midpoint_and_zero_generation(fam):
    x = fam.nominal_input()
    Y = np.zeros((1, fam.n))
    Y[:, fam.ypg] = 0.5 * (fam.pmin + fam.pmax)
    g = fam.ineq_resid_np(x, Y)
    pg_rows = np.concatenate([np.arange(fam.ng), fam.n_ineq // 2 + np.arange(fam.ng)])
    assert np.all(g[0, pg_rows] <= 0)
    Y[:, fam.ypg] = 0.0
    assert fam.objective_np(x, Y)[0] == 0.0


def test_nominal_newton(fam):
    x = fam.nominal_input()
    Y, trace = complete_acopf(fam, x, fam.decode_partial(np.zeros((1, fam.m))))
    assert trace.converged[0] and trace.iterations[0] <= 25
    assert np.abs(fam.eq_resid_np(x, Y)).max() < 1e-6


def test_completion_guarantee_on_random_instances(fam):
    rng = np.random.default_rng(1)
    X = fam.sample_inputs(200, rng)
    Y, trace = fam.complete_np(X, random_partials(fam, rng, 200, margin=0.0))
    assert trace.converged.mean() >= 0.95
    assert np.abs(fam.eq_resid_np(X[trace.converged], Y[trace.converged])).max() < 1e-6


def test_step2_residuals_exact(fam):
    rng = np.random.default_rng(2)
    X = fam.sample_inputs(20, rng)
    Y, trace = fam.complete_np(X, random_partials(fam, rng, 20))
    h = fam.eq_resid_np(X, Y)
    # rows for the reference angle, P at the reference bus and Q at generator buses
    step2 = np.concatenate([np.arange(fam.R.size), fam.R.size + fam.R, fam.R.size + fam.nb + fam.gen_bus])
    assert np.abs(h[trace.converged][:, step2]).max() < 1e-10


def test_degenerate_two_bus_network():
    fam = AcopfFamily(parse_matpower_case(TWO_BUS.format(r=0.0, gs=0, bs=0), "two"))
    x = np.zeros((1, 4))
    Y, trace = complete_acopf(fam, x, np.array([[1.0]]))
    assert trace.iterations[0] <= 1 and trace.residual[0] < 1e-10
    assert np.abs(Y[0, fam.ypg]).max() < 1e-10 and np.abs(Y[0, fam.yqg]).max() < 1e-10


def test_strict_completion_raises(fam):
    x = fam.nominal_input() * 40
    with pytest.raises(CompletionError) as info:
        complete_acopf(fam, x, fam.initial_partial(x))
    assert not info.value.trace.converged[0]


def test_per_unit_invariance():
    case = load_case("case57")
    big = load_case("case57")
    big.baseMVA = 2 * case.baseMVA
    big.branch[:, [BR_R, BR_X]] *= 2
    big.branch[:, BR_B] /= 2
    a, b = AcopfFamily(case), AcopfFamily(big)
    rng = np.random.default_rng(3)
    Xa = a.sample_inputs(5, rng)
    Za = random_partials(a, rng, 5)
    Zb = Za.copy()
    Zb[:, :a.nG] /= 2
    Ya, _ = a.complete_np(Xa, Za)
    Yb, _ = b.complete_np(Xa / 2, Zb)
    volt = np.concatenate([a.yvm, a.yva])
    assert np.abs(Ya[:, volt] - Yb[:, volt]).max() < 1e-9
    assert np.abs(Ya[:, a.ypg] - 2 * Yb[:, b.ypg]).max() < 1e-9
    Yt = Ya + rng.normal(0, 1e-2, Ya.shape)
    Yt_b = Yt.copy()
    Yt_b[:, np.concatenate([a.ypg, a.yqg])] /= 2
    ha, hb = a.eq_resid_np(Xa, Yt), b.eq_resid_np(Xa / 2, Yt_b)
    power = slice(a.R.size, None)
    assert np.abs(ha[:, power] - 2 * hb[:, power]).max() < 1e-9
    assert a.objective_np(Xa, Ya) == pytest.approx(b.objective_np(Xa / 2, Yb) * 4, rel=1e-12)


def test_injection_jacobian_matches_finite_differences(fam):
    rng = np.random.default_rng(4)
    vm = rng.uniform(0.95, 1.05, fam.nb)
    va = rng.normal(0, 0.1, fam.nb)

    def inj(v):
        V = v[:fam.nb] * np.exp(1j * v[fam.nb:])
        S = V * np.conj(fam.W @ V)
        return np.concatenate([S.real, S.imag])

    S, J = power_injection_jacobian((vm * np.exp(1j * va))[None], fam.W)
    J = J[0]
    v0 = np.concatenate([vm, va])
    eps = 1e-6
    fd = np.empty_like(J)
    for k in range(v0.size):
        e = np.zeros_like(v0)
        e[k] = eps
        fd[:, k] = (inj(v0 + e) - inj(v0 - e)) / (2 * eps)
    assert np.abs(J - fd).max() < 1e-6


def test_backward_matches_finite_differences(fam):
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(20):
        x = fam.sample_inputs(1, rng)
        z0 = random_partials(fam, rng, 1)

        def loss(z):
            Y, _ = fam.complete(x, z)
            return ad.sum(soft_loss(fam, x, Y, 10.0, 10.0))

        worst = max(worst, ad.finite_difference_check(loss, z0, eps=1e-6))
    assert worst < 1e-3


def test_backward_without_dependent_partials_is_identity(fam):
    rng = np.random.default_rng(6)
    x = fam.sample_inputs(3, rng)
    _, trace = fam.complete_np(x, random_partials(fam, rng, 3))
    g = rng.standard_normal((3, fam.m))
    out = acopf_backward(fam, trace, g, np.zeros((3, fam.z1_idx.size)), np.zeros((3, fam.z2_idx.size)))
    assert np.array_equal(out, g)


def test_backward_rejects_gradient_on_unconverged_rows(fam):
    x = fam.nominal_input() * 40
    _, trace = fam.complete_np(x, fam.initial_partial(x))
    with pytest.raises(ContractError):
        acopf_backward(fam, trace, np.ones((1, fam.m)), np.zeros((1, fam.z1_idx.size)),
                       np.zeros((1, fam.z2_idx.size)))


def test_first_order_tangent_keeps_equalities_to_second_order(fam):
    rng = np.random.default_rng(7)
    x = fam.sample_inputs(1, rng)
    z = random_partials(fam, rng, 1)
    Y, trace = fam.complete_np(x, z)
    d = rng.standard_normal((1, fam.m)) * (fam.z_hi - fam.z_lo)
    dy = fam.jvp_np(trace, d)
    r1 = np.linalg.norm(fam.eq_resid_np(x, Y + 1e-3 * dy))
    r2 = np.linalg.norm(fam.eq_resid_np(x, Y + 5e-4 * dy))
    assert r1 / r2 == pytest.approx(4.0, rel=0.05)
    assert r1 < 1e-4
