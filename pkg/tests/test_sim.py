import math

import numpy as np
import pytest
from scipy import integrate as sint

from kladapt import expr as E
from kladapt import moore_greitzer as mg
from kladapt.model import ModelError
from kladapt.scenario import integrator_chain, matched_demo
from kladapt.matched import damped_controller
from kladapt.model import DesignConstants
from kladapt.backstep import synthesize
from kladapt.sim import (ClosedLoop, NonFiniteState, StepSizeUnderflow, dopri5, integrate, read_csv,
                         sphere_points, sweep)
from conftest import mg_run


def test_linear_decay():
    out, meta = dopri5(lambda y: -y, [1.0], 1.0, np.array([0.0, 0.5, 1.0]))
    assert out[-1, 0] == pytest.approx(math.exp(-1.0), abs=1e-8)
    assert out[1, 0] == pytest.approx(math.exp(-0.5), abs=1e-8)  # dense output
    assert meta["steps"] > 0 and meta["nfev"] > 6 * meta["steps"]


def test_harmonic_energy_drift():
    t = np.linspace(0, 100, 11)
    out, _ = dopri5(lambda y: np.array([y[1], -y[0]]), [1.0, 0.0], 100.0, t, rtol=1e-9, atol=1e-12)
    energy = 0.5 * (out ** 2).sum(axis=1)
    assert np.max(np.abs(energy - 0.5)) < 1e-6


def test_matches_scipy_on_example():
    loop = mg.closed_loop("A")
    tr = integrate(loop, (0.4, -1.0), (0.0, 0.0), 5.0, n_report=11)
    ref = sint.solve_ivp(lambda t, y: loop.field(y), (0, 5), [0.4, -1.0, 0.0, 0.0], method="DOP853",
                         rtol=1e-12, atol=1e-14, t_eval=tr.t)
    assert np.max(np.abs(ref.y.T - tr.states)) < 1e-6


def test_controller_a_regulates():
    tr = mg_run("A", (0.4, -1.0))
    assert tr.x_norm[-1] < 1e-2
    assert len(tr.t) == 2000 and np.all(np.diff(tr.t) > 0)
    assert np.all(np.isfinite(tr.states))


def test_closed_loop_field_controller_b():
    loop = mg.closed_loop("B")
    v = loop.field(np.array([0.4, -1.0, 0.0, 0.0]))
    assert np.all(np.isfinite(v))
    # x1' = theta1 x1^2 + theta2 x1^3 + x2
    assert v[0] == pytest.approx(-1.5 * 0.16 - 0.5 * 0.064 - 1.0)


def test_field_vanishes_on_equilibrium_set(rng):
    for which in "AB":
        loop = mg.closed_loop(which)
        for th in rng.uniform(-3, 3, (10, 2)):
            assert np.all(loop.field(np.array([0.0, 0.0, *th])) == 0.0)


def test_controller_ignores_true_parameters(rng):
    a = mg.closed_loop("B", mg.ExampleConfig(theta_true=(-1.5, -0.5)))
    b = mg.closed_loop("B", mg.ExampleConfig(theta_true=(3.0, 1.0)))
    for s in rng.uniform(-1, 1, (10, 4)):
        assert a.control(s[:2], s[2:]) == b.control(s[:2], s[2:])


def test_dimension_errors():
    with pytest.raises(ModelError):
        ClosedLoop(mg.system(), mg.controller_a(), (1.0,))
    with pytest.raises(ModelError):
        integrate(mg.closed_loop("A"), (0.1, 0.2, 0.3), (0, 0), 1.0)


def test_finite_escape_reported():
    # x1' = 1.5 x1^2 + 0.5 x1^3 from 1 escapes at int_1^inf dx / (1.5 x^2 + 0.5 x^3)
    loop = ClosedLoop(mg.system(), None, (1.5, 0.5))
    escape = sint.quad(lambda v: 1.0 / (1.5 * v * v + 0.5 * v ** 3), 1.0, np.inf)[0]
    with pytest.raises(StepSizeUnderflow) as info:
        integrate(loop, (1.0, 0.0), (), 10.0)
    assert info.value.t_fail == pytest.approx(escape, abs=1e-3)
    part = info.value.partial
    assert part.t[-1] <= info.value.t_fail and np.all(np.isfinite(part.x))


def test_non_finite_initial_field():
    with pytest.raises(NonFiniteState):
        dopri5(lambda y: np.array([np.nan]), [1.0], 1.0, np.array([0.0, 1.0]))


def test_bad_arguments():
    with pytest.raises(ValueError):
        dopri5(lambda y: -y, [1.0], 0.0, np.array([0.0]))
    with pytest.raises(ValueError):
        dopri5(lambda y: -y, [1.0], 1.0, np.array([0.0]), rtol=0.0)


def _terminal(loop, x0, th0, rtol, atol, t_end=10.0):
    tr = integrate(loop, x0, th0, t_end, rtol, atol, n_report=2)
    return tr.states[-1], np.linalg.norm(tr.meta["error_estimate"])


@pytest.mark.parametrize("case", ["A", "B", "S", "chain", "matched"])
def test_tolerance_halving(case):
    if case in "ABS":
        loop, x0, th0 = mg.closed_loop(case), (0.4, -1.0), (0.0, 0.0)
    elif case == "chain":
        ctrl, _ = synthesize(integrator_chain(), DesignConstants(r=1.0))
        loop, x0, th0 = ClosedLoop(integrator_chain(), ctrl, (0.5,)), (1.0, 0.0), (0.0,)
    else:
        sys = matched_demo()
        loop, x0, th0 = ClosedLoop(sys, damped_controller(sys, DesignConstants(r=0.0)), (1.2,)), (2.0,), (0.0,)
    y1, est = _terminal(loop, x0, th0, 1e-8, 1e-10)
    y2, _ = _terminal(loop, x0, th0, 5e-9, 5e-11)
    assert np.linalg.norm(y1 - y2) < 10 * est


def test_csv_round_trip(tmp_path):
    tr = mg_run("B", (0.4, -1.0))
    path = tmp_path / "b.csv"
    tr.to_csv(path)
    header = path.read_text().splitlines()[0]
    assert header.startswith("t,x1,x2,th1,th2,u,")
    cols = read_csv(path)
    assert np.array_equal(cols["x1"], tr.x[:, 0]) and np.array_equal(cols["u"], tr.u)
    assert np.array_equal(cols["U"], tr.diag["U"])


def test_sweep_circle_bounded():
    pts = sphere_points(64, 1.0, 2)
    assert np.allclose(np.linalg.norm(pts, axis=1), 1.0)
    runs = sweep(mg.closed_loop("B"), [(x0, (0.0, 0.0)) for x0 in pts], 10.0, n_report=200)
    assert len(runs) == 64
    assert all(np.max(r.x_norm) < 10 for r in runs)


def test_sweep_empty_and_deterministic():
    assert sweep(mg.closed_loop("A"), [], 1.0) == []
    pts = sphere_points(8, 1.5, 3, seed=4)
    assert np.array_equal(pts, sphere_points(8, 1.5, 3, seed=4))
    init = [(x0, (0.0, 0.0)) for x0 in sphere_points(8, 1.0, 2)]
    a = sweep(mg.closed_loop("A"), init, 5.0, n_report=100, threads=4)
    b = sweep(mg.closed_loop("A"), init, 5.0, n_report=100, threads=1)
    for ra, rb in zip(a, b):
        assert np.array_equal(ra.states, rb.states) and np.array_equal(ra.u, rb.u)


def test_sweep_reports_failures_in_place():
    loop = ClosedLoop(mg.system(), None, (1.5, 0.5))
    runs = sweep(loop, [((1.0, 0.0), ()), ((0.0, 0.0), ())], 5.0, n_report=10)
    assert isinstance(runs[0], StepSizeUnderflow)
    assert np.all(runs[1].x == 0.0)


@pytest.mark.parametrize("which,x0", [("A", (1.5, 1.5)), ("A", (-2.0, 2.0)), ("A", (0.0, 3.0)), ("A", (3.0, 0.0)),
                                      ("A", (-3.0, -3.0)), ("B", (1.5, 1.5)), ("B", (-2.0, 2.0)), ("B", (0.0, 3.0)),
                                      ("S", (0.0, 3.0))])
def test_forward_complete_far_starts(which, x0):
    tr = integrate(mg.closed_loop(which), x0, (0.0, 0.0), 20.0, n_report=200)
    assert np.all(np.isfinite(tr.states)) and tr.x_norm[-1] < 1e-2


def test_rejected_step_keeps_first_stage():
    # a rejection must not leak trial stages into the retry
    out, meta = dopri5(lambda y: np.array([y[1], -y[0]]), [1.0, 0.0], 10.0, np.array([10.0]), rtol=1e-9, atol=1e-12)
    assert meta["rejected"] > 0
    assert np.max(np.abs(out[0] - [math.cos(10.0), -math.sin(10.0)])) < 1e-7
