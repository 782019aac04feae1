import math

import numpy as np
import pytest
import scipy.linalg as sla
from hypothesis import HealthCheck, given, settings, strategies as st

from mppexp.exp_action import build_evaluator
from mppexp.grid_fem import DiscreteOperator, assemble_operators, build_grid, discrete_norm, interpolate
from mppexp.potentials import flory_huggins, ginzburg_landau
from mppexp.time_steppers import (CutoffKind, Forcing, Reaction, SchemeConfig, Status, StepHistory, disabled,
                                  etd_rk2_step, exp_multistep_step, gauss_legendre_step,
                                  lagrange_extrapolation_coeffs, one_sided, reaction_from_potential, solve,
                                  starting_values, two_sided)


def scalar_ev(lam=-1.0):
    return build_evaluator(DiscreteOperator.from_matrices([1.0], [[-lam]], 1.0), "eigen")


# -- extrapolation -------------------------------------------------------------

def test_extrapolation_small_k():
    np.testing.assert_allclose(lagrange_extrapolation_coeffs(1), [[1.0]])
    # rows: powers of theta; columns: L_1, L_2
    np.testing.assert_allclose(lagrange_extrapolation_coeffs(2), [[1.0, 0.0], [1.0, -1.0]], atol=1e-15)


@pytest.mark.parametrize("k", range(1, 7))
def test_extrapolation_reproduces_polynomials(k):
    C = lagrange_extrapolation_coeffs(k)
    rng = np.random.default_rng(k)
    q = np.polynomial.Polynomial(rng.uniform(-1, 1, k))
    samples = q(1.0 - np.arange(1, k + 1))       # q at t_{n-j}, theta = 1 - j
    mono = C @ samples
    for theta in (-0.3, 0.0, 0.5, 1.0):
        assert sum(c * theta ** m for m, c in enumerate(mono)) == pytest.approx(q(theta), abs=1e-12)


def test_extrapolation_cubic_example():
    C = lagrange_extrapolation_coeffs(4)
    theta_nodes = 1.0 - np.arange(1, 5)
    mono = C @ theta_nodes ** 3
    assert abs(sum(c * 0.5 ** m for m, c in enumerate(mono)) - 0.125) < 1e-12


@pytest.mark.parametrize("k", [0, 7])
def test_extrapolation_range(k):
    with pytest.raises(ValueError):
        lagrange_extrapolation_coeffs(k)


# -- single-step oracle --------------------------------------------------------

def small_problem():
    g = build_grid(1, (0.0, 1.0), 4, 4, "neumann")   # 17 nodes
    op = assemble_operators(g, 0.8)
    A = -op.diffusion_coeff * op.stiffness.toarray() / op.mass_diag[:, None]
    return g, op, A


def lagrange_basis(nodes, j, s):
    out = 1.0
    for i, x in enumerate(nodes):
        if i != j:
            out *= (s - x) / (nodes[j] - x)
    return out


def brute_force_step(A, u_prev, f_levels, times, t0, tau, panels=50):
    """u(t0+tau) by composite 4-point Gauss-Legendre (200 points) on the variation-of-constants integral."""
    xg, wg = np.polynomial.legendre.leggauss(4)
    acc = sla.expm(tau * A) @ u_prev
    edges = np.linspace(0.0, tau, panels + 1)
    for a, b in zip(edges[:-1], edges[1:]):
        for x, w in zip(xg, wg):
            s = 0.5 * (a + b) + 0.5 * (b - a) * x
            p = sum(lagrange_basis(times, j, t0 + s) * f for j, f in enumerate(f_levels))
            acc = acc + 0.5 * (b - a) * w * (sla.expm((tau - s) * A) @ p)
    return acc


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_step_matches_brute_force_quadrature_linear(k):
    g, op, A = small_problem()
    ev = build_evaluator(op, "eigen")
    x = g.axis_nodes
    forcing = Forcing(lambda t: np.sin(3 * t + x) + t ** 2 * np.cos(2 * x))
    u0 = np.cos(np.pi * x)
    tau = 0.05
    cfg = SchemeConfig(k=k, tau=tau, num_steps=k, source=forcing)
    hist = starting_values(ev, cfg, u0)
    u_hat, u_new = exp_multistep_step(ev, cfg, hist, tau)
    times = [-j * tau for j in range(k)]
    expected = brute_force_step(A, u0, [forcing(None, t) for t in times], times, 0.0, tau)
    assert np.max(np.abs(u_hat - expected)) <= 1e-9 * np.max(np.abs(expected))
    np.testing.assert_array_equal(u_hat, u_new)


@pytest.mark.parametrize("k", [1, 2, 3, 4])
def test_step_matches_brute_force_quadrature_semilinear(k):
    g, op, A = small_problem()
    ev = build_evaluator(op, "eigen")
    src = reaction_from_potential(ginzburg_landau(0.5))
    u0 = 0.8 * np.cos(np.pi * g.axis_nodes)
    tau = 0.02
    cfg = SchemeConfig(k=k, tau=tau, num_steps=k, source=src)
    hist = starting_values(ev, cfg, u0)
    u_prev = hist.current.copy()
    f_levels = list(hist.f_levels)
    t_prev = (k - 1) * tau
    times = [t_prev - j * tau for j in range(k)]
    u_hat, _ = exp_multistep_step(ev, cfg, hist, t_prev + tau)
    expected = brute_force_step(A, u_prev, f_levels, times, t_prev, tau)
    assert np.max(np.abs(u_hat - expected)) <= 1e-9 * np.max(np.abs(expected))


def test_scalar_k1_closed_form():
    ev = scalar_ev(-1.0)
    tau = 0.3
    cfg = SchemeConfig(k=1, tau=tau, num_steps=1, source=Forcing(lambda t: np.ones(1)))
    res = solve(ev, cfg, np.zeros(1))
    assert res.u[0] == pytest.approx(1 - math.exp(-tau), rel=1e-14)


def test_mode_consistency():
    """A u-independent reaction and the equivalent forcing give the same step."""
    g, op, _ = small_problem()
    ev = build_evaluator(op, "eigen")
    b = np.sin(g.axis_nodes)
    react = Reaction(f=lambda u, guard=False: b.copy(), df=lambda u: np.zeros_like(u))
    forc = Forcing(lambda t: b)
    u0 = np.cos(g.axis_nodes)
    for k in (1, 2, 3, 4):
        outs = []
        for src in (react, forc):
            cfg = SchemeConfig(k=k, tau=0.1, num_steps=k, source=src)
            hist = StepHistory(k=k)
            for j in range(k - 1, -1, -1):
                hist.push(u0, b, -j * 0.1)
            outs.append(exp_multistep_step(ev, cfg, hist, 0.1)[0])
        np.testing.assert_allclose(outs[0], outs[1], rtol=0, atol=1e-12)


# -- equilibria ----------------------------------------------------------------

def test_zero_forcing_constant_equilibrium():
    g = build_grid(1, (0, 1), 10, 3, "neumann")
    ev = build_evaluator(assemble_operators(g, 1.0), "eigen")
    ones = np.ones(g.num_nodes)
    cfg = SchemeConfig(k=3, tau=0.1, num_steps=20, source=Forcing(lambda t: np.zeros(g.num_nodes)),
                       cutoff=one_sided(0.5))
    res = solve(ev, cfg, ones)
    np.testing.assert_allclose(res.u, ones, atol=1e-12)
    assert res.status is Status.OK
    assert np.all(res.rho <= 1e-12)


def test_rho_zero_when_inside_bounds():
    g = build_grid(1, (-1, 1), 8, 2)
    ev = build_evaluator(assemble_operators(g, 0.01), "eigen")
    u0 = interpolate(g, lambda x: 0.3 * np.cos(np.pi * x))
    cfg = SchemeConfig(k=2, tau=0.05, num_steps=20, source=reaction_from_potential(ginzburg_landau()),
                       cutoff=two_sided(1.0))
    res = solve(ev, cfg, u0)
    assert np.all(res.rho == 0.0)


# -- starting procedure ------------------------------------------------------

def test_gauss_legendre_fifth_order_local_error():
    L = np.array([[-1.0]])
    src = Forcing(lambda t: np.zeros(1))
    errs = [abs(gauss_legendre_step(L, np.ones(1), 0.0, tau, src)[0] - math.exp(-tau)) for tau in (0.1, 0.05)]
    assert 28 < errs[0] / errs[1] < 36


def test_gauss_legendre_semilinear_order():
    # u' = -u - u^2, u(0)=1  =>  u(t) = 1 / (2 e^t - 1)
    L = np.array([[-1.0]])
    src = Reaction(f=lambda u, guard=False: -u ** 2, df=lambda u: -2 * u)
    errs = []
    for n in (10, 20):
        u, tau = np.ones(1), 1.0 / n
        for i in range(n):
            u = gauss_legendre_step(L, u, i * tau, tau, src)
        errs.append(abs(u[0] - 1 / (2 * math.e - 1)))
    assert 14 < errs[0] / errs[1] < 18


def test_starting_levels_clamped():
    g = build_grid(1, (-1, 1), 10, 4)
    ev = build_evaluator(assemble_operators(g, 1e-4), "eigen")
    u0 = interpolate(g, lambda x: np.where(x < -0.5, 1.0, np.cos(1.5 * np.pi * (x + 0.5))))
    cfg = SchemeConfig(k=4, tau=0.01, num_steps=10, source=reaction_from_potential(ginzburg_landau()),
                       cutoff=two_sided(1.0))
    hist = starting_values(ev, cfg, u0)
    assert len(hist.levels) == 4
    for lev in hist.levels:
        assert np.max(np.abs(lev)) <= 1.0
    k1 = starting_values(ev, SchemeConfig(k=1, tau=0.01, num_steps=1, source=cfg.source), u0)
    assert len(k1.levels) == 1 and k1.rho == []


def test_starting_failure_is_reported():
    g = build_grid(1, (0, 1), 4, 1)
    ev = build_evaluator(assemble_operators(g, 1.0), "eigen")
    # wrong (zero) Jacobian on a violently nonlinear source: Newton cannot converge
    bad = Reaction(f=lambda u, guard=False: 1e6 * np.sin(50 * u), df=lambda u: np.zeros_like(u))
    cfg = SchemeConfig(k=2, tau=1.0, num_steps=3, source=bad)
    res = solve(ev, cfg, np.full(g.num_nodes, 0.3))
    assert res.status is Status.STARTING_FAILURE
    assert res.status_label == "StartingFailure"


# -- ETD-RK2 -------------------------------------------------------------------

def test_etd_rk2_pure_exponential():
    g = build_grid(1, (0, 1), 6, 2)
    ev = build_evaluator(assemble_operators(g, 0.5), "eigen")
    zero = Reaction(f=lambda u, guard=False: np.zeros_like(u), df=lambda u: np.zeros_like(u))
    cfg = SchemeConfig(k=1, tau=0.1, num_steps=1, source=zero)
    u = np.cos(g.axis_nodes * 3)
    np.testing.assert_allclose(etd_rk2_step(ev, cfg, u, 0.0), ev.exp_action(0.1, u), atol=1e-14)


def test_etd_rk2_second_order():
    ev = scalar_ev(-1.0)
    src = Reaction(f=lambda u, guard=False: -u ** 2, df=lambda u: -2 * u)
    errs = []
    for n in (20, 40, 80):
        cfg = SchemeConfig(k=1, tau=1.0 / n, num_steps=n, source=src, etd_kappa=1.0)
        errs.append(abs(solve(ev, cfg, np.ones(1)).u[0] - 1 / (2 * math.e - 1)))
    assert 3.6 < errs[1] / errs[2] < 4.4


# -- temporal order on a manufactured linear problem ------------------------------

@pytest.mark.parametrize("k", [1, 2, 3, 4, 5, 6])
def test_linear_temporal_order(k):
    g = build_grid(1, (0, 1), 8, 4)        # 33 nodes
    op = assemble_operators(g, 0.05)
    ev = build_evaluator(op, "eigen")
    w = interpolate(g, lambda x: np.cos(np.pi * x) + 0.3)
    Lw = op.apply_generator(w)
    # exact nodal solution u(t) = e^{-t} w of u' = L u + f(t)
    src = Forcing(lambda t: -math.exp(-t) * (w + Lw))
    Ns = (8, 16, 32) if k >= 5 else (10, 20, 40)
    errs = []
    for N in Ns:
        cfg = SchemeConfig(k=k, tau=1.0 / N, num_steps=N, source=src)
        errs.append(discrete_norm(g, solve(ev, cfg, w).u - math.exp(-1.0) * w))
    rate = math.log2(errs[-2] / errs[-1])
    assert k - 0.2 <= rate <= k + 0.5


@pytest.mark.parametrize("k", [2, 3])
def test_allen_cahn_temporal_order(k):
    g = build_grid(1, (-1, 1), 20, 2)
    ev = build_evaluator(assemble_operators(g, 0.01), "eigen")
    src = reaction_from_potential(ginzburg_landau())
    u0 = interpolate(g, lambda x: 0.9 * np.cos(np.pi * x))
    run = lambda kk, N: solve(ev, SchemeConfig(k=kk, tau=1.0 / N, num_steps=N, source=src,
                                                cutoff=two_sided(1.0)), u0).u
    ref = run(4, 1280)
    errs = [discrete_norm(g, run(k, N) - ref) for N in (20, 40, 80)]
    rate = math.log2(errs[-2] / errs[-1])
    assert k - 0.2 <= rate <= k + 0.5


# -- cut-off properties --------------------------------------------------------

vec = st.lists(st.floats(-5, 5), min_size=5, max_size=5).map(np.array)


@settings(max_examples=60, deadline=None)
@given(a=vec, b=vec, alpha=st.floats(0.1, 2.0))
def test_clamp_contraction(a, b, alpha):
    g = build_grid(1, (0, 1), 2, 2)
    c = two_sided(alpha)
    assert discrete_norm(g, c.apply(a) - c.apply(b)) <= discrete_norm(g, a - b) + 1e-15


@settings(max_examples=60, deadline=None)
@given(a=vec, alpha=st.floats(0.1, 2.0))
def test_clamp_bounds_and_idempotence(a, alpha):
    c = two_sided(alpha)
    out = c.apply(a)
    assert np.max(np.abs(out)) <= alpha
    np.testing.assert_array_equal(c.apply(out), out)
    inside = np.abs(a) <= alpha
    np.testing.assert_array_equal(out[inside], a[inside])
    lo = one_sided(-alpha).apply(a)
    assert lo.min() >= -alpha
    np.testing.assert_array_equal(disabled().apply(a), a)


def test_cutoff_validation():
    with pytest.raises(ValueError):
        two_sided(0.0)
    assert one_sided(-1.0).kind is CutoffKind.ONE_SIDED
    assert not disabled().enabled


@settings(max_examples=15, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(seed=st.integers(0, 10 ** 6), k=st.integers(1, 4), N=st.integers(4, 12),
       potential=st.sampled_from(["gl", "fh"]), tau=st.floats(0.01, 2.0))
def test_maximum_principle_bit_exact(seed, k, N, potential, tau):
    spec = ginzburg_landau(0.3) if potential == "gl" else flory_huggins(0.25, 1.0, 0.3)
    alpha = spec.alpha
    g = build_grid(1, (-1, 1), 6, 2)
    ev = build_evaluator(assemble_operators(g, 0.02), "eigen")
    u0 = np.random.default_rng(seed).uniform(-alpha, alpha, g.num_nodes)
    cfg = SchemeConfig(k=k, tau=tau, num_steps=max(N, k), source=reaction_from_potential(spec),
                       cutoff=two_sided(alpha))
    res = solve(ev, cfg, u0)
    if res.status is Status.STARTING_FAILURE:
        return
    assert max(res.history.umax) <= alpha
    assert np.max(np.abs(res.u)) <= alpha
    assert np.all(res.rho >= 0)


def test_config_validation():
    src = Forcing(lambda t: np.zeros(1))
    with pytest.raises(ValueError):
        SchemeConfig(k=7, tau=0.1, num_steps=10, source=src)
    with pytest.raises(ValueError):
        SchemeConfig(k=3, tau=0.1, num_steps=2, source=src)
    with pytest.raises(ValueError):
        SchemeConfig(k=1, tau=0.0, num_steps=2, source=src)
    assert SchemeConfig(k=2, tau=0.25, num_steps=4, source=src).T == 1.0


def test_domain_violation_recorded_without_cutoff():
    spec = flory_huggins(0.25, 1.0, 1.0)
    g = build_grid(1, (-1, 1), 100, 2)
    ev = build_evaluator(assemble_operators(g, 1e-4), "eigen")
    u0 = interpolate(g, lambda x: spec.alpha * np.where(x < -0.5, 1.0, np.cos(1.5 * np.pi * (x + 0.5))))
    src = reaction_from_potential(spec)
    res = solve(ev, SchemeConfig(k=2, tau=0.01, num_steps=100, source=src, cutoff=disabled()), u0)
    assert res.status is Status.DOMAIN_VIOLATION
    assert res.status_label.startswith("DomainViolation(")
    ok = solve(ev, SchemeConfig(k=2, tau=0.01, num_steps=100, source=src, cutoff=two_sided(spec.alpha)), u0)
    assert ok.status is Status.OK
