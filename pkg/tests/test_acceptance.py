"""Acceptance criteria 1-9.  Each test records one PASS/FAIL line; the lines
are printed in the pytest terminal summary (see conftest.py) and when this
file is run as a script."""

import contextlib
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from kladapt import expr as E
from kladapt import moore_greitzer as mg
from kladapt import scenario as S
from kladapt.cli import preset_names, preset_path
from kladapt.matched import ClosedFormRho, damped_controller, residual_radius
from kladapt.model import DesignConstants, MatchedSystem
from kladapt.sim import ClosedLoop, integrate
from kladapt.verify import (check_exponential_envelope, check_ios, check_lyapunov, check_theorem1_comparison,
                            decay_rate, residual, uniformity_probe)
from exprgen import SYMBOLS, random_expr, random_point, rel_err

RESULTS: dict = {}
REFERENCE_X0 = mg.REFERENCE_X0
THETA = (-1.5, -0.5)
SNAPSHOT = Path(__file__).parent / "snapshots" / "figures.json"


@contextlib.contextmanager
def criterion(num: int, text: str):
    try:
        yield
    except BaseException:
        RESULTS[num] = f"criterion {num}: FAIL  {text}"
        print(RESULTS[num])
        raise
    RESULTS[num] = f"criterion {num}: PASS  {text}"
    print(RESULTS[num])


def timed_run(which, x0, theta=THETA, t_end=20.0):
    loop = mg.closed_loop(which, mg.ExampleConfig(theta_true=theta))
    t = time.perf_counter()
    tr = integrate(loop, x0, (0.0, 0.0), t_end)
    return tr, time.perf_counter() - t


def test_criterion_1_equilibrium_and_regulation():
    with criterion(1, "equilibrium set and regulation |x(20)| < 1e-2, < 5 s per run"):
        rng = np.random.default_rng(1)
        for which in "AB":
            for x0 in REFERENCE_X0:
                tr, secs = timed_run(which, x0)
                assert tr.x_norm[-1] < 1e-2, (which, x0, tr.x_norm[-1])
                assert secs < 5.0, (which, x0, secs)
            loop = mg.closed_loop(which)
            for th in rng.uniform(-5, 5, (100, 2)):
                assert np.max(np.abs(loop.field(np.array([0.0, 0.0, *th])))) <= 1e-12


def test_criterion_2_lyapunov_controller_a():
    with criterion(2, "controller A: dV/dt <= -mu x1^2 - mu Q z^2, margin >= -1e-6"):
        for x0 in REFERENCE_X0:
            tr, _ = timed_run("A", x0)
            d = tr.loop.ctrl.diagnostics
            c = check_lyapunov(tr, d["V"], d["lyap_bound"], tol=1e-6)
            assert c.passed and c.worst_margin >= -1e-6, c.line()


def test_criterion_3_paired_inequalities_controller_b():
    with criterion(3, "controller B: dW/dt <= -mu U, dU/dt <= -mu U + eps (|th|^2-r)^+, residual 0.5"):
        assert residual(THETA, 2.0) == 0.5
        for x0 in REFERENCE_X0:
            tr, _ = timed_run("B", x0)
            d = tr.loop.ctrl.diagnostics
            cw = check_lyapunov(tr, d["W"], E.mul(-1.0, d["U"]), tol=1e-6, name="W")
            cu = check_lyapunov(tr, d["U"], E.add(E.mul(-1.0, d["U"]), 1.0 * residual(THETA, 2.0)), tol=1e-6,
                                name="U")
            assert cw.passed and cu.passed, (cw.line(), cu.line())
            assert check_ios(tr, tr.loop.ctrl.T(), 0.5, 1.0, 2.0, THETA).detail == "residual 0.5"


def _preset_runs(controller: str | None, checks: list):
    """Every shipped preset, optionally switched to another controller, de-duplicated by initial data."""
    seen = set()
    for name in preset_names():
        sc = S.load(preset_path(name))
        if controller:
            sc = S.with_controller(sc, controller)
        for r in sc.runs:
            r.checks[:] = checks
            r.expect_fail[:] = []
        runs = []
        for r in sc.runs:
            key = (r.controller, sc.theta_true, tuple(map(tuple, r.x0)), r.t_end)
            if key not in seen:
                seen.add(key)
                runs.append(r)
        sc.runs = runs
        if runs:
            yield name, sc


def _verify_presets(controller, checks, wanted):
    n = 0
    for name, sc in _preset_runs(controller, checks):
        sc.runs = [r for r in sc.runs if r.controller in wanted]
        if not sc.runs:
            continue
        rep = S.verify(sc, S.execute(sc))
        assert rep.passed, f"{name}\n{rep.text()}"
        n += len(rep.checks)
    return n


def test_criterion_4_envelope_on_b_and_synth_presets():
    with criterion(4, "exponential envelope on every controller-B and synthesized preset"):
        assert _verify_presets(None, ["exp-envelope"], {"example-b", "backstep", "file"}) > 0
        assert _verify_presets("backstep", ["exp-envelope"], {"backstep"}) > 0


def test_criterion_5_ugaos_regime():
    with criterion(5, "|th|^2 <= r: |T|^2 decays at >= 2 omega 0.99, uniform hitting time over 32 points"):
        th = (-1.0, -0.5)
        cfg = mg.ExampleConfig(theta_true=th)
        for which in ("B", "S"):
            tr, _ = timed_run(which, REFERENCE_X0[0], th)
            ctrl = tr.loop.ctrl
            om = ctrl.certified["omega"]
            (T2,) = tr.loop.eval_exprs([E.add(*[E.power(e, 2) for e in ctrl.T()])], tr.states)
            rate = decay_rate(tr.t, T2, 0.0, 5.0)
            assert rate >= 2 * om * 0.99, (which, rate, om)
        (pr,) = uniformity_probe(mg.closed_loop("B", cfg), 1.0, [0.01], 32, 20.0)
        assert pr.attained and all(h is not None and math.isfinite(h) for h in pr.samples)


def test_criterion_6_synthesized_controller():
    with criterion(6, "synthesized controller passes criteria 3-4 with its own T, U, W on all presets"):
        checks = ["lyapunov", "lyapunov-U", "ios", "exp-envelope", "regulation"]
        assert _verify_presets("backstep", checks, {"backstep"}) > 0


def _demo():
    x = E.x(1)
    return MatchedSystem(1, 1, [E.mul(-1, x)], [1], [x], E.mul(0.5, E.power(x, 2)), E.power(x, 2), 0, 1)


def test_criterion_7_matched_demo_comparison():
    with criterion(7, "scalar matched demo: comparison envelope W <= W_comp 1.001 on [0, 10]; alpha = 0 decays"):
        sys = _demo()
        rho = ClosedFormRho(lambda s: 2.0 * s, lambda y: 0.5 * y)
        theta = 1.2
        for r in (0.0, 2.0):
            consts = DesignConstants(r=r, delta=1.0, lam=0.5)
            alpha = residual_radius((theta,), consts, rho).alpha_val
            tr = integrate(ClosedLoop(sys, damped_controller(sys, consts), (theta,)), (2.0,), (0.0,), 20.0)
            c = check_theorem1_comparison(tr, sys.P, rho, alpha, 0.5, factor=1.001, t_max=10.0)
            assert c.passed, c.line()
            if r >= theta ** 2:
                assert alpha == 0.0 and abs(tr.x[-1, 0]) < 1e-6


def test_criterion_8_derivative_oracle():
    with criterion(8, "1000 random derivative checks vs central differences, rel err < 1e-5, < 10 s"):
        rng = np.random.default_rng(8)
        t = time.perf_counter()
        worst = 0.0
        for k in range(1000):
            e = random_expr(rng)
            env = random_point(rng)
            name = SYMBOLS[k % len(SYMBOLS)]
            h = 1e-5
            up, dn = dict(env), dict(env)
            up[name] += h
            dn[name] -= h
            fd = (E.evaluate(e, up) - E.evaluate(e, dn)) / (2 * h)
            worst = max(worst, rel_err(E.evaluate(E.partial(e, name), env), fd))
        assert worst < 1e-5, worst
        assert time.perf_counter() - t < 10.0


def _figure_metrics() -> dict:
    fig3, fig4 = mg.figure_dataset(3), mg.figure_dataset(4)
    fig5, fig6 = mg.figure_dataset(5), mg.figure_dataset(6)

    def one(fig, name):
        (s,) = fig.by_controller(name)
        return s

    def reach(s, level=0.05):
        return float(s.xs[np.argmax(s.ys <= level)])

    return {
        "fig3_reach_0.05_A": reach(one(fig3, "A")),
        "fig3_reach_0.05_B": reach(one(fig3, "B")),
        "fig4_peak_A": float(np.max(one(fig4, "A").ys)),
        "fig4_peak_B": float(np.max(one(fig4, "B").ys)),
        "fig5_terminal_A": float(one(fig5, "A").ys[-1]),
        "fig5_terminal_B": float(one(fig5, "B").ys[-1]),
        "fig6_terminal_A": float(one(fig6, "A").ys[-1]),
        "fig6_terminal_B": float(one(fig6, "B").ys[-1]),
    }


def test_criterion_9_figure_regressions():
    with criterion(9, "figure regressions: B reaches 0.05 first, estimates stay > 0.2 away, snapshot match"):
        m = _figure_metrics()
        assert m["fig3_reach_0.05_B"] < m["fig3_reach_0.05_A"]
        for k in ("fig5_terminal_A", "fig5_terminal_B", "fig6_terminal_A", "fig6_terminal_B"):
            assert m[k] > 0.2, (k, m[k])
        if not SNAPSHOT.exists():
            SNAPSHOT.parent.mkdir(exist_ok=True)
            SNAPSHOT.write_text(json.dumps(m, indent=2, sort_keys=True) + "\n")
        ref = json.loads(SNAPSHOT.read_text())
        assert set(ref) == set(m)
        for k, v in ref.items():
            assert m[k] == pytest.approx(v, rel=1e-6, abs=1e-9), k


if __name__ == "__main__":
    for fn in [v for k, v in sorted(globals().items()) if k.startswith("test_criterion_")]:
        try:
            fn()
        except Exception:
            pass
