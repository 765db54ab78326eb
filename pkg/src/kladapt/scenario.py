"""Scenario files: a system, controllers to compare, initial data and checks.

Example::

    schema = kladapt-scenario-v1
    name = fig3
    system = moore-greitzer
    theta_true = [-1.5, -0.5]
    t_end = 20
    plot = norm
    x0 = [[0.4, -1]]
    run_a {
      controller = example-a
      checks = [lyapunov, regulation]
    }

Paths (model files, controller files) are resolved relative to the
scenario file.  Every ``run_<name>`` section is one controller.
"""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np

from . import expr as E
from . import kvtext
from . import moore_greitzer as mg
from . import verify as V
from .backstep import synthesize
from .matched import (AdaptiveController, damped_controller, fit_rho_envelope, load_controller, residual_radius,
                      standard_controller)
from .model import DesignConstants, MatchedSystem, ModelError, StrictFeedbackSystem, load_model
from .sim import ClosedLoop, IntegrationError, Trajectory, circle_points, sweep

SCHEMA = "kladapt-scenario-v1"
PLOTS = ("phase", "norm", "estimate-error", "none")
CONTROLLERS = ("standard", "damped", "backstep", "example-a", "example-b", "file", "none")
CHECKS = ("lyapunov", "lyapunov-U", "ios", "exp-envelope", "nonincreasing", "regulation", "equilibrium",
          "comparison", "decrease-chain", "decay-rate")
TOP_KEYS = {"schema", "name", "system", "theta_true", "theta_hat0", "t_end", "rtol", "atol", "n_report", "tol",
            "plot", "x0", "x0_ring", "constants", "regulation_tol", "log_y"}
RUN_KEYS = {"controller", "controller_file", "checks", "expect_fail", "x0", "x0_ring", "theta_hat0", "t_end", "omega",
            "epsilon", "r", "envelope_t_max", "label"}
EXAMPLE_KEYS = {"Q", "gamma1", "gamma2", "mu", "epsilon", "r"}
DESIGN_KEYS = {"r", "alpha", "omega", "epsilon", "gamma", "delta", "lam", "Gamma"}


class ScenarioError(ValueError):
    pass


# ---------------------------------------------------------------------------
# builtin systems


def matched_demo() -> MatchedSystem:
    """Scalar x' = -x + u + theta x with P = x^2/2, Q = x^2."""
    x = E.x(1)
    return MatchedSystem(1, 1, [E.mul(-1.0, x)], [1], [x], E.mul(0.5, E.power(x, 2)), E.power(x, 2), 0, 1,
                         name="matched-demo")


def integrator_chain() -> StrictFeedbackSystem:
    """x1' = x2 + theta x1, x2' = u."""
    return StrictFeedbackSystem(2, 1, [0, 0], [1, 1], [[E.x(1)], [0]], name="integrator-chain")


BUILTINS = {"moore-greitzer": mg.system, "matched-demo": matched_demo, "integrator-chain": integrator_chain}


# ---------------------------------------------------------------------------
# records


@dataclass
class RunSpec:
    name: str
    controller: str
    x0: list
    theta_hat0: tuple
    t_end: float
    checks: list
    expect_fail: list
    options: dict = field(default_factory=dict)
    controller_file: str | None = None
    label: str = ""


@dataclass
class Scenario:
    name: str
    path: str | None
    system_ref: str
    system: object
    theta_true: tuple
    t_end: float
    rtol: float
    atol: float
    n_report: int
    tol: float
    plot: str
    runs: list
    example: mg.ExampleConfig | None
    design: DesignConstants
    regulation_tol: float = 1e-2
    log_y: bool = False
    _controllers: dict = field(default_factory=dict, repr=False)

    @property
    def is_moore_greitzer(self) -> bool:
        return self.system_ref == "moore-greitzer"

    def base_dir(self) -> str:
        return os.path.dirname(os.path.abspath(self.path)) if self.path else os.getcwd()

    def controller(self, run: RunSpec) -> AdaptiveController | None:
        key = (run.controller, run.controller_file)
        if key not in self._controllers:
            self._controllers[key] = build_controller(self, run)
        return self._controllers[key]

    def closed_loop(self, run: RunSpec) -> ClosedLoop:
        return ClosedLoop(self.system, self.controller(run), self.theta_true)


# ---------------------------------------------------------------------------
# parsing


def _unknown(sec: kvtext.Section, allowed: set, where: str) -> None:
    for k in sec:
        if k not in allowed and not (where == "scenario" and k.startswith("run_")):
            raise ScenarioError(f"unknown field '{k}' in {where}")


def _initial(sec: kvtext.Section, dim: int, default=None) -> list | None:
    """``x0_ring = [count, radius]`` (evenly spaced on a circle) followed by the ``x0`` points."""
    if "x0" not in sec and "x0_ring" not in sec:
        return default
    pts = []
    if "x0_ring" in sec:
        ring = sec.get_floats("x0_ring")
        if len(ring) != 2 or ring[0] < 1 or ring[0] != int(ring[0]) or not ring[1] > 0:
            raise ScenarioError("field 'x0_ring' must be [count, radius]")
        pts += [tuple(float(v) for v in row) for row in circle_points(int(ring[0]), ring[1], dim)]
    if "x0" in sec:
        pts += _points(sec, "x0", dim)
    return pts


def _points(sec: kvtext.Section, key: str, dim: int, default=None) -> list:
    if key not in sec:
        if default is None:
            sec.need(key)
        return default
    items = kvtext.parse_list(sec[key], key)
    try:
        if items and items[0].startswith("["):
            pts = [tuple(float(v) for v in kvtext.parse_list(it, key)) for it in items]
        else:
            pts = [tuple(float(v) for v in items)]
    except ValueError:
        raise ScenarioError(f"field '{key}' must hold numbers") from None
    for p in pts:
        if len(p) != dim:
            raise ScenarioError(f"field '{key}': expected points of dimension {dim}, got {len(p)}")
    return pts


def _vector(sec, key, dim, default=None) -> tuple:
    if key not in sec and default is not None:
        return tuple(default)
    vals = sec.get_floats(key)
    if len(vals) != dim:
        raise ScenarioError(f"field '{key}' needs {dim} entries, got {len(vals)}")
    return tuple(vals)


def _positive(sec, key, default) -> float:
    v = sec.get_float(key, default)
    if not v > 0:
        raise ScenarioError(f"field '{key}' must be > 0")
    return v


def _resolve(base: str, path: str) -> str:
    return path if os.path.isabs(path) else os.path.join(base, path)


def _load_system(ref: str, base: str):
    if ref in BUILTINS:
        return BUILTINS[ref]()
    path = _resolve(base, ref)
    if not os.path.exists(path):
        raise ScenarioError(f"field 'system': no builtin or model file named {ref!r}")
    return load_model(path)


def _constants(sec: kvtext.Section, is_mg: bool, p: int):
    raw = sec.section("constants", required=False)
    _unknown(raw, EXAMPLE_KEYS | DESIGN_KEYS, "section 'constants'")
    example = None
    if is_mg:
        kw = {k: raw.get_float(k) for k in EXAMPLE_KEYS if k in raw}
        example = mg.ExampleConfig(**kw)
        d = example.design_constants()
        base = {"r": d.r, "alpha": d.alpha, "omega": d.omega, "epsilon": d.epsilon, "gamma": d.gamma}
    else:
        base = {}
    for k in ("r", "alpha", "omega", "epsilon", "delta", "lam"):
        if k in raw:
            base[k] = raw.get_float(k)
    if "gamma" in raw:
        base["gamma"] = tuple(raw.get_floats("gamma"))
    if "Gamma" in raw:
        rows = kvtext.parse_list(raw["Gamma"], "Gamma")
        if rows and rows[0].startswith("["):
            base["Gamma"] = [[float(v) for v in kvtext.parse_list(r, "Gamma")] for r in rows]
        else:
            base["Gamma"] = [float(v) for v in rows]
    design = DesignConstants(**base)
    design.gamma_for(p)
    return example, design


def _run(sec: kvtext.Section, name: str, sc_x0, th0_default, t_end, n: int, p: int) -> RunSpec:
    _unknown(sec, RUN_KEYS, f"section '{name}'")
    ctrl = sec.need("controller")
    if ctrl not in CONTROLLERS:
        raise ScenarioError(f"field 'controller' in section '{name}': unknown controller {ctrl!r}")
    x0 = _initial(sec, n, sc_x0)
    if x0 is None:
        raise ScenarioError(f"missing field 'x0' (scenario or section '{name}')")
    th_dim = 0 if ctrl == "none" else p
    th0 = _vector(sec, "theta_hat0", th_dim, th0_default[:th_dim] if th0_default is not None else (0.0,) * th_dim)
    checks = sec.get_list("checks", [])
    expect_fail = sec.get_list("expect_fail", [])
    for c in checks + expect_fail:
        if c not in CHECKS:
            raise ScenarioError(f"field 'checks' in section '{name}': unknown check {c!r}")
    for c in expect_fail:
        if c not in checks:
            checks.append(c)
    opts = {k: sec.get_float(k) for k in ("omega", "epsilon", "r", "envelope_t_max") if k in sec}
    cfile = sec.get("controller_file")
    if ctrl == "file" and not cfile:
        sec.need("controller_file")
    return RunSpec(name[4:], ctrl, x0, th0, _positive(sec, "t_end", t_end), checks, expect_fail, opts, cfile,
                   sec.get("label", name[4:]))


def from_section(sec: kvtext.Section, path: str | None = None) -> Scenario:
    schema = sec.get("schema", SCHEMA)
    if schema != SCHEMA:
        raise ScenarioError(f"field 'schema': unsupported {schema!r}, expected {SCHEMA}")
    _unknown(sec, TOP_KEYS, "scenario")
    base = os.path.dirname(os.path.abspath(path)) if path else os.getcwd()
    ref = sec.need("system")
    system = _load_system(ref, base)
    n, p = system.n, system.p
    is_mg = ref == "moore-greitzer"
    example, design = _constants(sec, is_mg, p)
    theta_default = example.theta_true if example else None
    theta = _vector(sec, "theta_true", p, theta_default)
    t_end = _positive(sec, "t_end", 20.0)
    th0_default = _vector(sec, "theta_hat0", p, (0.0,) * p)
    sc_x0 = _initial(sec, n)
    plot = sec.get("plot", "none")
    if plot not in PLOTS:
        raise ScenarioError(f"field 'plot': must be one of {', '.join(PLOTS)}")
    runs = [_run(v, k, sc_x0, th0_default, t_end, n, p) for k, v in sec.items() if k.startswith("run_")]
    for k, v in sec.items():
        if k.startswith("run_") and not isinstance(v, kvtext.Section):
            raise ScenarioError(f"field '{k}' must be a section")
    if not runs:
        raise ScenarioError("scenario has no run_<name> sections")
    if example is not None:
        example = dataclasses.replace(example, theta_true=theta)
    name = sec.get("name") or (os.path.splitext(os.path.basename(path))[0] if path else "scenario")
    return Scenario(name, path, ref, system, theta, t_end, _positive(sec, "rtol", 1e-8), _positive(sec, "atol", 1e-10),
                    sec.get_int("n_report", 2000), sec.get_float("tol", 1e-6), plot, runs, example, design,
                    _positive(sec, "regulation_tol", 1e-2), sec.get("log_y", "false").lower() in ("1", "true", "yes"))


def load(path) -> Scenario:
    if not os.path.exists(path):
        raise ScenarioError(f"scenario file {path!r} not found")
    return from_section(kvtext.load(path), str(path))


def loads(text: str, path: str | None = None) -> Scenario:
    return from_section(kvtext.loads(text), path)


# ---------------------------------------------------------------------------
# controllers


def build_controller(sc: Scenario, run: RunSpec) -> AdaptiveController | None:
    kind, sys = run.controller, sc.system
    if kind == "none":
        return None
    if kind in ("example-a", "example-b"):
        if not sc.is_moore_greitzer:
            raise ScenarioError(f"controller {kind!r} needs system = moore-greitzer")
        return (mg.controller_a if kind == "example-a" else mg.controller_b)(sc.example)
    if kind == "backstep":
        if not isinstance(sys, StrictFeedbackSystem):
            raise ScenarioError("controller 'backstep' needs a strict-feedback system")
        if sc.is_moore_greitzer:
            ctrl, _ = mg.controller_synth(sc.example)
            return ctrl
        ctrl, _ = synthesize(sys, sc.design)
        return ctrl
    if kind in ("standard", "damped"):
        if not isinstance(sys, MatchedSystem):
            raise ScenarioError(f"controller {kind!r} needs a matched system")
        if kind == "standard":
            return standard_controller(sys, sc.design.Gamma_matrix(sys.p))
        return damped_controller(sys, sc.design)
    path = _resolve(sc.base_dir(), run.controller_file)
    if not os.path.exists(path):
        raise ScenarioError(f"field 'controller_file': {run.controller_file!r} not found")
    return load_controller(path)


def with_controller(sc: Scenario, controller: str) -> Scenario:
    """Copy of the scenario with every run switched to another controller (checks kept)."""
    runs = [RunSpec(r.name, controller, r.x0, r.theta_hat0, r.t_end, list(r.checks), list(r.expect_fail),
                    dict(r.options), None, r.label) for r in sc.runs]
    return Scenario(sc.name, sc.path, sc.system_ref, sc.system, sc.theta_true, sc.t_end, sc.rtol, sc.atol, sc.n_report,
                    sc.tol, sc.plot, runs, sc.example, sc.design, sc.regulation_tol, sc.log_y)


# ---------------------------------------------------------------------------
# execution


@dataclass
class RunResult:
    run: RunSpec
    loop: ClosedLoop
    trajectories: list  # Trajectory or IntegrationError, in x0 order

    @property
    def failures(self) -> list:
        return [t for t in self.trajectories if isinstance(t, IntegrationError)]


def execute(sc: Scenario, rtol: float | None = None, atol: float | None = None, threads: int | None = None) -> list:
    out = []
    for run in sc.runs:
        loop = sc.closed_loop(run)
        th0 = run.theta_hat0 if loop.p else ()
        trajs = sweep(loop, [(x0, th0) for x0 in run.x0], run.t_end, rtol or sc.rtol, atol or sc.atol, sc.n_report,
                      threads)
        for k, tr in enumerate(trajs):
            if isinstance(tr, Trajectory):
                tr.label = run_label(run, k)
        out.append(RunResult(run, loop, trajs))
    return out


def run_label(run: RunSpec, k: int) -> str:
    return run.name if len(run.x0) == 1 else f"{run.name}_{k + 1:02d}"


def _param(sc: Scenario, run: RunSpec, ctrl: AdaptiveController | None, key: str) -> float:
    if key in run.options:
        return run.options[key]
    cert = ctrl.certified if ctrl is not None else {}
    if key in cert:
        return cert[key]
    if key == "omega" and "mu" in cert:
        return cert["mu"]
    if sc.example is not None and key in ("epsilon", "r"):
        return getattr(sc.example, key)
    return getattr(sc.design, key)


def _diag(ctrl, name, check):
    if ctrl is None or name not in ctrl.diagnostics:
        raise ScenarioError(f"check '{check}' needs diagnostic '{name}', which the controller does not provide")
    return ctrl.diagnostics[name]


def _matched_rho(sc: Scenario, ctrl):
    cache = sc._controllers.setdefault(("rho", id(ctrl)), {})
    if "rho" not in cache:
        cache["rho"] = fit_rho_envelope(_diag(ctrl, "P", "comparison"), _diag(ctrl, "Q", "comparison"),
                                        n=sc.system.n, constants=sc.system.constants)
    return cache["rho"]


def run_checks(sc: Scenario, res: RunResult, k: int, tol: float | None = None, seed: int = 0) -> list:
    """Checks of one run on its k-th trajectory."""
    tol = sc.tol if tol is None else tol
    run, loop, traj = res.run, res.loop, res.trajectories[k]
    ctrl = sc.controller(run)
    prefix = f"{run_label(run, k)}/"
    checks = []
    for name in run.checks:
        expect = "fail" if name in run.expect_fail else "pass"
        label = prefix + name
        if name == "lyapunov":
            bound = ctrl.diagnostics.get("lyap_bound") if ctrl else None
            if bound is None:
                bound = E.mul(-1.0, _diag(ctrl, "Q", name))
            c = V.check_lyapunov(traj, _diag(ctrl, "V", name), bound, tol, label, expect)
        elif name == "lyapunov-U":
            W = ctrl.diagnostics.get("W") if ctrl else None
            bound = ctrl.diagnostics.get("lyap_bound_U", ctrl.diagnostics.get("lyap_bound")) if ctrl else None
            if W is None or bound is None:
                raise ScenarioError(f"check '{name}' needs diagnostics W and lyap_bound")
            c = V.check_lyapunov(traj, W, bound, tol, label, expect)
        elif name in ("ios", "exp-envelope"):
            T = ctrl.T() if ctrl else []
            if not T:
                raise ScenarioError(f"check '{name}' needs diagnostics T1..Tn")
            om, ep, r = (_param(sc, run, ctrl, key) for key in ("omega", "epsilon", "r"))
            if name == "ios":
                c = V.check_ios(traj, T, om, ep, r, sc.theta_true, tol, label, expect)
            else:
                c = V.check_exponential_envelope(traj, T, om, ep, r, sc.theta_true, name=label, expect=expect)
        elif name == "nonincreasing":
            c = V.check_nonincreasing(traj, _diag(ctrl, "V", name), tol, label, expect)
        elif name == "regulation":
            final = float(traj.x_norm[-1])
            c = V.Check(label, final < sc.regulation_tol, sc.regulation_tol - final, float(traj.t[-1]), 0.0, expect,
                        f"|x(t_end)| = {final:.6g}")
        elif name == "equilibrium":
            c = equilibrium_check(loop, label, seed, expect)
        elif name in ("comparison", "decrease-chain"):
            rho = _matched_rho(sc, ctrl)
            P = _diag(ctrl, "P", name)
            if name == "comparison":
                alpha = residual_radius(sc.theta_true, sc.design, rho).alpha_val
                c = V.check_theorem1_comparison(traj, P, rho, alpha, sc.design.lam, tol,
                                                t_max=run.options.get("envelope_t_max"), name=label, expect=expect)
            else:
                c = V.check_decrease_chain(traj, P, rho, sc.design.delta, sc.design.r, sc.theta_true, tol, label,
                                           expect)
        else:  # decay-rate
            T = ctrl.T() if ctrl else []
            om = _param(sc, run, ctrl, "omega")
            (T2,) = loop.eval_exprs([E.add(*[E.power(t, 2) for t in T])], traj.states)
            T2 = np.broadcast_to(T2, traj.t.shape)
            rate = V.decay_rate(traj.t, T2, 0.0, 5.0)
            need = 2.0 * om * 0.99
            c = V.Check(label, rate >= need, rate - need, 0.0, 0.0, expect, f"fitted rate {rate:.6g}, need {need:.6g}")
        checks.append(c)
    return checks


def equilibrium_check(loop: ClosedLoop, label: str = "equilibrium", seed: int = 0, expect: str = "pass",
                      count: int = 100, scale: float = 3.0, tol: float = 1e-12) -> V.Check:
    """Closed-loop field at (0, th) for random th must vanish."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(count):
        th = rng.uniform(-scale, scale, loop.p)
        worst = max(worst, float(np.max(np.abs(loop.field(np.concatenate([np.zeros(loop.n), th]))))))
    return V.Check(label, worst <= tol, tol - worst, 0.0, 0.0, expect, f"max |field(0, th)| = {worst:.3g}")


def verify(sc: Scenario, results: list | None = None, tol: float | None = None, seed: int = 0,
           rtol: float | None = None, atol: float | None = None) -> V.VerificationReport:
    results = execute(sc, rtol, atol) if results is None else results
    rep = V.VerificationReport()
    for res in results:
        for k, tr in enumerate(res.trajectories):
            if isinstance(tr, IntegrationError):
                raise tr
            for c in run_checks(sc, res, k, tol, seed):
                rep.add(c)
    return rep


def plot_series(sc: Scenario, results: list) -> list:
    from .svg import Polyline
    lines = []
    for res in results:
        for tr in res.trajectories:
            if isinstance(tr, IntegrationError):
                continue
            xs, ys = mg.series_from(sc.plot, tr, sc.theta_true)
            lines.append(Polyline(tr.label, xs, ys))
    return lines


def axes(kind: str) -> tuple:
    return mg.AXES.get(kind, ("", ""))


def describe(sc: Scenario) -> str:
    lines = [f"scenario {sc.name}: system {sc.system_ref}, theta = {list(sc.theta_true)}, t_end = {sc.t_end:g}"]
    for run in sc.runs:
        lines.append(f"  run {run.name}: controller {run.controller}, {len(run.x0)} initial state(s), "
                     f"checks [{', '.join(run.checks)}]")
    return "\n".join(lines)

