import math

import numpy as np
import pytest

from kladapt import expr as E
from kladapt import moore_greitzer as mg
from kladapt.matched import ClosedFormRho, damped_controller, residual_radius, standard_controller
from kladapt.model import DesignConstants, MatchedSystem
from kladapt.sim import ClosedLoop, integrate
from kladapt.verify import (VerificationReport, check_exponential_envelope, check_ios, check_lyapunov,
                            check_nonincreasing, check_decrease_chain, check_theorem1_comparison, comparison_solution,
                            decay_rate, hitting_time, residual, uniformity_probe)
from conftest import mg_run

x = E.x(1)
P = E.mul(0.5, E.power(x, 2))
Q = E.power(x, 2)
# rho(P) = Q exactly for this P, Q
RHO = ClosedFormRho(lambda s: 2.0 * s, lambda y: 0.5 * y)


def demo():
    return MatchedSystem(1, 1, [E.mul(-1, x)], [1], [x], P, Q, 0, 1)


def demo_run(ctrl, theta=1.2, x0=2.0, t_end=10.0, th0=0.0):
    return integrate(ClosedLoop(demo(), ctrl, (theta,)), (x0,), (th0,), t_end)


# ---------------------------------------------------------------------------
# pointwise inequalities


def test_lyapunov_equality_demo():
    # standard loop: dV/dt = -x^2 exactly, so the margin sits at zero
    tr = demo_run(standard_controller(demo()))
    c = check_lyapunov(tr, tr.loop.ctrl.diagnostics["V"], E.mul(-1, Q))
    assert c.passed and abs(c.worst_margin) < 1e-12


def test_lyapunov_wrong_bound_fails():
    tr = demo_run(standard_controller(demo()))
    c = check_lyapunov(tr, tr.loop.ctrl.diagnostics["V"], E.mul(-2, Q))
    # margin is -x^2, worst where |x| peaks
    peak = max(np.max(tr.x[:, 0] ** 2), np.max(tr.meta["y_steps"][:, 0] ** 2))
    assert not c.passed and c.worst_margin == pytest.approx(-peak, rel=1e-9)


def test_lyapunov_controller_a():
    tr = mg_run("A", (0.4, -1.0))
    d = tr.loop.ctrl.diagnostics
    c = check_lyapunov(tr, d["V"], d["lyap_bound"])
    assert c.passed and c.worst_margin >= -1e-6


def test_residual_value():
    assert residual((-1.5, -0.5), 2.0) == 0.5
    assert residual((-1.0, -0.5), 2.0) == 0.0


def test_ios_controller_b():
    tr = mg_run("B", (0.4, -1.0))
    c = check_ios(tr, tr.loop.ctrl.T(), 0.5, 1.0, 2.0, (-1.5, -0.5))
    assert c.passed and "residual 0.5" in c.detail


def test_ios_without_residual_fails_for_a_far_start():
    # A has no damping; from (3, 3) its |T|^2 grows at first
    tr = integrate(mg.closed_loop("A"), (3.0, 3.0), (0.0, 0.0), 1.0)
    c = check_ios(tr, [x, E.x(2)], 0.5, 1.0, 2.0, (-1.5, -0.5))
    assert not c.passed


def test_envelope_pass_and_overclaimed_rate():
    th = (-1.0, -0.5)
    tr = mg_run("B", (0.4, -1.0), 20.0, th)
    T = tr.loop.ctrl.T()
    assert check_exponential_envelope(tr, T, 0.5, 1.0, 2.0, th).passed
    (T2,) = tr.loop.eval_exprs([E.add(*[E.power(e, 2) for e in T])], tr.states)
    rate = decay_rate(tr.t, T2)
    # claiming 2 omega above the measured rate has to break the envelope
    c = check_exponential_envelope(tr, T, rate, 1.0, 2.0, th)
    assert not c.passed and c.worst_time > 0


def test_nonincreasing():
    tr = mg_run("A", (0.4, -1.0))
    assert check_nonincreasing(tr, tr.loop.ctrl.diagnostics["V"]).passed
    assert not check_nonincreasing(tr, E.mul(-1, tr.loop.ctrl.diagnostics["V"])).passed


# ---------------------------------------------------------------------------
# comparison machinery on the scalar demo


def test_comparison_solution_closed_form():
    # W' = -lam sqrt(W/2) rho(sqrt(2W)) with rho(s) = 2s gives W' = -2 lam W
    t = np.linspace(0, 5, 51)
    W = comparison_solution(3.0, RHO, 0.5, t)
    assert np.allclose(W, 3.0 * np.exp(-t), rtol=1e-8, atol=1e-12)
    assert np.all(comparison_solution(0.0, RHO, 0.5, t) == 0.0)


@pytest.mark.parametrize("r", [0.0, 2.0])
def test_comparison_demo(r):
    consts = DesignConstants(r=r, delta=1.0, lam=0.5)
    alpha = residual_radius((1.2,), consts, RHO).alpha_val
    assert alpha == pytest.approx(1.44 if r == 0 else 0.0)
    tr = demo_run(damped_controller(demo(), consts), t_end=20.0)
    c = check_theorem1_comparison(tr, P, RHO, alpha, 0.5, t_max=10.0)
    assert c.passed, c.detail
    assert [p.name for p in c.parts] == ["comparison/implication", "comparison/monotone", "comparison/envelope"]
    assert check_decrease_chain(tr, P, RHO, 1.0, r, (1.2,)).passed
    if r > 0:
        assert abs(tr.x[-1, 0]) < 1e-6


def test_comparison_vacuous_at_origin():
    consts = DesignConstants(r=0.0)
    tr = demo_run(damped_controller(demo(), consts), x0=0.0)
    c = check_theorem1_comparison(tr, P, RHO, 1.44, 0.5)
    assert c.passed
    assert c.parts[0].detail == "vacuous"


def test_standard_controller_breaks_implication():
    tr = demo_run(standard_controller(demo()), theta=1.2, x0=2.0, t_end=5.0)
    c = check_theorem1_comparison(tr, P, RHO, 0.0, 0.5)
    assert not c.passed and "implication" in c.detail


# ---------------------------------------------------------------------------
# helpers


def test_hitting_time():
    t = np.arange(6.0)
    assert hitting_time(t, np.array([5, 1, 0.5, 2, 0.1, 0.0]), 1.0) == 4.0
    assert hitting_time(t, np.array([5, 1, 0.5, 0.2, 0.1, 0.0]), 1.0) == 1.0
    assert hitting_time(t, np.full(6, 3.0), 1.0) is None


def test_decay_rate_exact_exponential():
    t = np.linspace(0, 10, 201)
    assert decay_rate(t, 7 * np.exp(-1.7 * t)) == pytest.approx(1.7, rel=1e-10)
    # samples under the floor are ignored
    assert decay_rate(t, np.where(t < 3, np.exp(-2 * t), 0.0), t1=10) == pytest.approx(2.0, rel=1e-10)
    with pytest.raises(ValueError):
        decay_rate(t, np.zeros_like(t))


def test_uniformity_probe_b():
    th = (-1.0, -0.5)
    loop = mg.closed_loop("B", mg.ExampleConfig(theta_true=th))
    (pr,) = uniformity_probe(loop, 1.0, [0.01], 32, 20.0, n_report=400)
    assert pr.attained and len(pr.samples) == 32
    assert 0 < pr.T_max < 20 and pr.spread >= 0
    with pytest.raises(ValueError):
        uniformity_probe(loop, 1.0, [0.01], 4, 1.0)


def test_uniformity_probe_open_loop_not_attained():
    # the standard loop with a large unknown parameter leaves the unit ball first
    loop = ClosedLoop(demo(), standard_controller(demo()), (3.0,))
    (pr,) = uniformity_probe(loop, 1.0, [1e-3], 8, 0.5, n_report=50)
    assert not pr.attained and pr.spread is None


def test_tolerance_monotone():
    tr = mg_run("A", (0.4, -1.0))
    d = tr.loop.ctrl.diagnostics
    bad = E.add(d["lyap_bound"], E.mul(-1e-3, E.power(x, 2)))
    verdicts = [check_lyapunov(tr, d["V"], bad, tol).passed for tol in (0.0, 1e-8, 1e-4, 1e-2, 1.0)]
    assert verdicts == sorted(verdicts)


def test_report_and_margins_csv(tmp_path):
    tr = demo_run(standard_controller(demo()))
    rep = VerificationReport()
    rep.add(check_lyapunov(tr, tr.loop.ctrl.diagnostics["V"], E.mul(-1, Q)))
    c = rep.add(check_lyapunov(tr, tr.loop.ctrl.diagnostics["V"], E.mul(-2, Q), name="wrong", expect="fail"))
    assert c.ok and rep.passed
    text = rep.text()
    assert text.splitlines()[0].startswith("PASS lyapunov") and "FAIL (expected fail) wrong" in text
    assert text.rstrip().endswith("2/2 checks as expected")
    path = tmp_path / "m.csv"
    rep.margins_csv(path)
    rows = path.read_text().splitlines()
    assert rows[0] == "check,t,margin"
    assert len(rows) == 1 + len(c.times) * 2
