import numpy as np
import pytest

from kladapt import expr as E
from kladapt import moore_greitzer as mg
from kladapt.model import ModelError, validate_strict_feedback
from kladapt.sim import plant_field
from kladapt.verify import check_exponential_envelope, check_ios, check_lyapunov
from conftest import REFERENCE_X0, mg_run

THETA = (-1.5, -0.5)


# plain numpy transcriptions, independent of the expression machinery

def oracle_a(x1, x2, t1, t2, Q=1.0, mu=1.0, g1=1.0, g2=1.0):
    drift = t1 * x1 ** 2 + t2 * x1 ** 3 + x2
    z = drift + mu * x1
    slope = 2 * t1 * x1 + 3 * t2 * x1 ** 2
    w1 = g1 * Q * x1 ** 2 * z * (slope + mu) + g1 * x1 ** 3
    w2 = g2 * Q * x1 ** 3 * z * (slope + mu) + g2 * x1 ** 4
    u = -(1 / Q + mu ** 2) * x1 - w1 * x1 ** 2 - w2 * x1 ** 3 - (slope + 2 * mu) * drift
    return u, w1, w2


def oracle_b(x1, x2, t1, t2, Q=1.0, mu=1.0, g1=1.0, g2=1.0, eps=1.0, r=2.0):
    s = t1 ** 2 + t2 ** 2 + r
    M = 2 * mu + s / 2 + x1 ** 2 + (1 + 1 / (2 * eps)) * x1 ** 4 + x1 ** 6 / (2 * eps)
    z = x2 + t1 * x1 ** 2 + t2 * x1 ** 3 + M * x1
    ph = 2 * t1 * x1 + 3 * t2 * x1 ** 2 + M + x1 ** 2 * (2 + 2 * (2 * eps + 1) / eps * x1 ** 2 + 3 / eps * x1 ** 4)
    G = mu + Q * x1 ** 2 * (1 + x1 ** 2) * ph ** 2 * (x1 ** 2 / (2 * eps) + s / mu)
    w1 = g1 * x1 ** 2 * (Q * z * ph + x1)
    w2 = g2 * x1 ** 3 * (Q * z * ph + x1)
    u = -x1 / Q - (x1 + t1) * x1 * w1 - (x1 ** 2 + t2) * x1 * w2 - G * z + ph * (M * x1 - z)
    return u, w1, w2


def env(s, theta=THETA):
    return {"x1": s[0], "x2": s[1], "th1": s[2], "th2": s[3], "theta1": theta[0], "theta2": theta[1]}


def test_system_structure():
    sys = mg.system()
    assert sys.n == 2 and sys.p == 2
    assert validate_strict_feedback(sys).valid



@pytest.mark.parametrize("which,oracle", [("A", oracle_a), ("B", oracle_b)])
def test_controllers_match_transcription(which, oracle, rng):
    ctrl = (mg.controller_a if which == "A" else mg.controller_b)()
    for s in rng.uniform(-1.5, 1.5, (200, 4)):
        want = oracle(*s)
        got = [E.evaluate(e, env(s)) for e in (ctrl.u, *ctrl.w)]
        for a, b in zip(got, want):
            assert a == pytest.approx(b, rel=1e-11, abs=1e-11)


def test_nondefault_constants_match(rng):
    cfg = mg.ExampleConfig(Q=2.0, gamma1=0.5, gamma2=3.0, mu=1.7, epsilon=0.3, r=0.5)
    a, b = mg.controller_a(cfg), mg.controller_b(cfg)
    for s in rng.uniform(-1, 1, (50, 4)):
        wa = oracle_a(*s, Q=2.0, mu=1.7, g1=0.5, g2=3.0)
        wb = oracle_b(*s, Q=2.0, mu=1.7, g1=0.5, g2=3.0, eps=0.3, r=0.5)
        for c, want in ((a, wa), (b, wb)):
            got = [E.evaluate(e, env(s)) for e in (c.u, *c.w)]
            assert np.allclose(got, want, rtol=1e-11, atol=1e-11)


def test_open_loop_field_value():
    fld = plant_field(mg.system(), E.ZERO)
    vals = [E.evaluate(e, env((1.0, 0.0, 0.0, 0.0))) for e in fld]
    assert vals == [-2.0, 0.0]


def test_config_validation():
    with pytest.raises(ModelError):
        mg.ExampleConfig(Q=0.0)
    with pytest.raises(ModelError):
        mg.ExampleConfig(r=-1.0)
    with pytest.raises(ModelError):
        mg.ExampleConfig(theta_true=(1.0,))


def test_lyapunov_value_a():
    V = mg.controller_a().diagnostics["V"]
    assert E.evaluate(V, env((0.4, -1.0, 0.0, 0.0))) == pytest.approx(1.51, rel=1e-14)


def test_m_at_origin():
    M = mg.controller_b_parts()["M"]
    assert E.evaluate(M, env((0.0, 0.0, 0.0, 0.0))) == 3.0


def test_controls_vanish_on_equilibrium_set(rng):
    for ctrl in (mg.controller_a(), mg.controller_b()):
        for th in rng.uniform(-4, 4, (20, 2)):
            assert E.evaluate(ctrl.u, env((0.0, 0.0, *th))) == 0.0


@pytest.mark.parametrize("x0", REFERENCE_X0)
def test_controller_a_decrease(x0):
    tr = mg_run("A", x0)
    d = tr.loop.ctrl.diagnostics
    assert check_lyapunov(tr, d["V"], d["lyap_bound"]).passed
    assert tr.x_norm[-1] < 1e-2


@pytest.mark.parametrize("x0", REFERENCE_X0)
def test_controller_b_inequalities(x0):
    tr = mg_run("B", x0)
    d, T = tr.loop.ctrl.diagnostics, tr.loop.ctrl.T()
    assert check_lyapunov(tr, d["W"], E.mul(-1.0, d["U"])).passed
    assert check_lyapunov(tr, d["U"], E.add(E.mul(-1.0, d["U"]), 0.5), name="U").passed
    # |T|^2 = 2U, so the U inequality is the ios form with omega = mu / 2
    assert check_ios(tr, T, 0.5, 1.0, 2.0, THETA).passed
    # the stronger omega = mu reading also holds along these runs
    assert check_ios(tr, T, 1.0, 1.0, 2.0, THETA).passed
    assert check_exponential_envelope(tr, T, 0.5, 1.0, 2.0, THETA).passed
    assert tr.x_norm[-1] < 1e-2


@pytest.mark.parametrize("x0", REFERENCE_X0)
def test_synthesized_controller_on_reference_points(x0):
    tr = mg_run("S", x0)
    c = tr.loop.ctrl
    om = c.certified["omega"]
    assert check_ios(tr, c.T(), om, c.certified["epsilon"], c.certified["r"], THETA).passed
    assert check_exponential_envelope(tr, c.T(), om, c.certified["epsilon"], c.certified["r"], THETA).passed
    assert tr.x_norm[-1] < 1e-2


def test_phase_points():
    pts = mg.phase_initial_points()
    assert len(pts) == 14
    assert np.allclose(np.linalg.norm(np.array(pts[:12]), axis=1), 1.2)
    assert pts[12:] == REFERENCE_X0


def test_figure3_faster_convergence():
    fig = mg.figure_dataset(3)
    assert (fig.xlabel, fig.ylabel) == ("t", "|x(t)|")
    (a,), (b,) = fig.by_controller("A"), fig.by_controller("B")

    def first(s):
        return s.xs[np.argmax(s.ys <= 0.05)]

    assert first(b) < first(a)


@pytest.mark.parametrize("num", [5, 6])
def test_estimates_do_not_converge(num):
    fig = mg.figure_dataset(num)
    for s in fig.series:
        assert s.xs[-1] == 50.0
        assert s.ys[-1] > 0.2
    if num == 5:
        (a,), (b,) = fig.by_controller("A"), fig.by_controller("B")
        assert b.ys[-1] >= a.ys[-1]


def test_figure_number_range():
    with pytest.raises(ValueError):
        mg.figure_dataset(7)
