"""Pointwise verification of Lyapunov and output-stability inequalities.

Derivatives along the flow are formed symbolically (gradient dotted with
the closed-loop vector field), so the integrator only supplies the states at
which margins are evaluated.  Samples are the uniform report grid merged
with every accepted integration step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import expr as E
from .sim import ClosedLoop, IntegrationError, Trajectory, dopri5, sphere_points, sweep

DEFAULT_TOL = 1e-6
ENVELOPE_SLACK = 1.0 + 1e-4
ENVELOPE_FLOOR = 1e-12


@dataclass
class Check:
    name: str
    passed: bool
    worst_margin: float
    worst_time: float
    tolerance: float
    expect: str = "pass"
    detail: str = ""
    times: np.ndarray | None = field(default=None, repr=False)
    margins: np.ndarray | None = field(default=None, repr=False)
    parts: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        """Outcome matches the expectation (expected failures count as ok when they fail)."""
        return self.passed if self.expect == "pass" else not self.passed

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        tag = "" if self.expect == "pass" else f" (expected {self.expect})"
        return (f"{status}{tag} {self.name}: worst margin {self.worst_margin:.6g} at t = {self.worst_time:.6g}"
                f" (tolerance {self.tolerance:g}){' ' + self.detail if self.detail else ''}")


@dataclass
class VerificationReport:
    checks: list = field(default_factory=list)

    def add(self, check: Check) -> Check:
        self.checks.append(check)
        return check

    @property
    def passed(self) -> bool:
        return all(c.ok for c in self.checks)

    def summary(self) -> str:
        n_ok = sum(c.ok for c in self.checks)
        return f"{n_ok}/{len(self.checks)} checks as expected"

    def text(self) -> str:
        lines = []
        for c in self.checks:
            lines.append(c.line())
            for part in c.parts:
                lines.append("    " + part.line())
        lines.append(self.summary())
        return "\n".join(lines) + "\n"

    def margins_csv(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write("check,t,margin\n")
            for c in self.checks:
                for part in [c] + list(c.parts):
                    if part.times is None:
                        continue
                    for t, m in zip(part.times, part.margins):
                        fh.write(f"{part.name},{t:.17g},{m:.17g}\n")


def _make_check(name, margins, times, tol, expect="pass", detail="", parts=None) -> Check:
    margins = np.asarray(margins, dtype=float)
    times = np.asarray(times, dtype=float)
    if margins.size == 0:
        return Check(name, True, math.inf, 0.0, tol, expect, detail or "vacuous", times, margins, parts or [])
    k = int(np.argmin(margins))
    worst = float(margins[k])
    return Check(name, worst >= -tol, worst, float(times[k]), tol, expect, detail, times, margins, parts or [])


def samples(traj: Trajectory, include_steps: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Times and full states (x, th) at report points and accepted steps."""
    t, Y = traj.t, traj.states
    steps_t = traj.meta.get("t_steps") if include_steps else None
    if steps_t is not None and len(steps_t):
        t = np.concatenate([t, steps_t])
        Y = np.vstack([Y, traj.meta["y_steps"]])
        order = np.argsort(t, kind="stable")
        t, Y = t[order], Y[order]
    return t, Y


def time_derivative(loop: ClosedLoop, V: E.Expr) -> E.Expr:
    """dV/dt along the closed loop, as an expression."""
    names = E.state_names(loop.n) + E.estimate_names(loop.p)
    terms = []
    for name, fld in zip(names, loop.field_exprs):
        d = E.partial(V, name)
        if not d.is_zero:
            terms.append(E.mul(d, fld))
    return E.add(*terms) if terms else E.ZERO


def _loop(traj: Trajectory) -> ClosedLoop:
    if traj.loop is None:
        raise ValueError("trajectory carries no closed loop; integrate() attaches one")
    return traj.loop


def positive_part(v):
    return max(float(v), 0.0)


def residual(theta_true, r: float) -> float:
    th = np.ravel(np.asarray(theta_true, dtype=float))
    return positive_part(float(np.dot(th, th)) - r)


def check_lyapunov(traj: Trajectory, V: E.Expr, bound: E.Expr, tol: float = DEFAULT_TOL, name: str = "lyapunov",
                   expect: str = "pass", include_steps: bool = True) -> Check:
    """margin = bound - dV/dt >= -tol at every sample."""
    loop = _loop(traj)
    t, Y = samples(traj, include_steps)
    Vd, b = loop.eval_exprs([time_derivative(loop, V), bound], Y)
    return _make_check(name, np.broadcast_to(b - Vd, t.shape), t, tol, expect)


def half_norm2(T_exprs: Sequence[E.Expr]) -> E.Expr:
    return E.mul(0.5, E.add(*[E.power(t, 2) for t in T_exprs]))


def check_ios(traj: Trajectory, T_exprs, omega: float, epsilon: float, r: float, theta_true, tol: float = DEFAULT_TOL,
              name: str = "ios", expect: str = "pass", include_steps: bool = True) -> Check:
    """d/dt |T|^2/2 <= -omega |T|^2 + epsilon (|theta|^2 - r)^+."""
    loop = _loop(traj)
    U = half_norm2(T_exprs)
    t, Y = samples(traj, include_steps)
    Ud, U2 = loop.eval_exprs([time_derivative(loop, U), U], Y)
    res = epsilon * residual(theta_true, r)
    bound = -omega * 2.0 * U2 + res
    return _make_check(name, np.broadcast_to(bound - Ud, t.shape), t, tol, expect, f"residual {res:.6g}")


def check_exponential_envelope(traj: Trajectory, T_exprs, omega: float, epsilon: float, r: float, theta_true,
                               slack: float = ENVELOPE_SLACK, floor: float = ENVELOPE_FLOOR, name: str = "exp-envelope",
                               expect: str = "pass") -> Check:
    """(|T(t)|^2 - c)^+ <= exp(-2 omega t) (|T(0)|^2 - c)^+ * slack, c = epsilon (|theta|^2 - r)^+ / omega."""
    loop = _loop(traj)
    (T2,) = loop.eval_exprs([E.add(*[E.power(e, 2) for e in T_exprs])], traj.states)
    T2 = np.broadcast_to(T2, traj.t.shape)
    c = epsilon * residual(theta_true, r) / omega
    lhs = np.maximum(T2 - c, 0.0)
    rhs = np.exp(-2.0 * omega * traj.t) * max(T2[0] - c, 0.0) * slack
    return _make_check(name, rhs - lhs, traj.t, floor, expect, f"offset {c:.6g}")


def rho_tilde(rho: Callable, lam: float) -> Callable:
    """s -> lam sqrt(s/2) rho(sqrt(2 s))."""
    def f(s):
        s = max(float(s), 0.0)
        return lam * math.sqrt(s / 2.0) * float(rho(math.sqrt(2.0 * s)))
    return f


def comparison_solution(W0: float, rho: Callable, lam: float, t: np.ndarray, rtol: float = 1e-10, atol: float = 1e-14):
    """Solution of W' = -rho_tilde(W) from W0 on the grid t (t[0] = 0)."""
    if W0 <= 0.0:
        return np.zeros_like(t)
    rt = rho_tilde(rho, lam)
    out, _ = dopri5(lambda w: np.array([-rt(w[0])]), np.array([W0]), float(t[-1]), t, rtol, atol, log_steps=False)
    return np.maximum(out[:, 0], 0.0)


def check_theorem1_comparison(traj: Trajectory, P: E.Expr, rho: Callable, alpha: float, lam: float,
                              tol: float = DEFAULT_TOL, factor: float = 1.0 + 1e-3, t_max: float | None = None,
                              name: str = "comparison", expect: str = "pass") -> Check:
    """Implication, monotone decay of (P - alpha)^+ and the comparison-ODE envelope on W = ((P - alpha)^+)^2 / 2."""
    loop = _loop(traj)
    t, Y = samples(traj)
    Pv, Pd = (np.broadcast_to(v, t.shape) for v in loop.eval_exprs([P, time_derivative(loop, P)], Y))
    above = Pv > alpha
    rho_P = np.array([float(rho(s)) for s in Pv[above]])
    imp = _make_check(f"{name}/implication", -0.5 * lam * rho_P - Pd[above], t[above], tol)
    excess = np.maximum(Pv - alpha, 0.0)
    mono = _make_check(f"{name}/monotone", -np.diff(excess), t[1:], tol)
    # envelope on the report grid
    tr, Yr = traj.t, traj.states
    (Pr,) = loop.eval_exprs([P], Yr)
    Pr = np.broadcast_to(Pr, tr.shape)
    keep = tr <= (t_max if t_max is not None else tr[-1])
    tr, Pr = tr[keep], Pr[keep]
    W = 0.5 * np.maximum(Pr - alpha, 0.0) ** 2
    Wc = comparison_solution(float(W[0]), rho, lam, tr)
    env = _make_check(f"{name}/envelope", Wc * factor - W, tr, ENVELOPE_FLOOR)
    parts = [imp, mono, env]
    passed = all(c.passed for c in parts)
    bad = next((c for c in parts if not c.passed), env)
    return Check(name, passed, bad.worst_margin, bad.worst_time, tol, expect,
                 f"alpha {alpha:.6g}" + ("" if passed else f"; failing part {bad.name}"), None, None, parts)


def check_decrease_chain(traj: Trajectory, P: E.Expr, rho: Callable, delta: float, r: float, theta_true,
                         tol: float = DEFAULT_TOL, name: str = "decrease-chain", expect: str = "pass") -> Check:
    """dP/dt <= -rho(P)/2 + (|theta|^2 - r)^+ / (2 delta)."""
    loop = _loop(traj)
    t, Y = samples(traj)
    Pv, Pd = (np.broadcast_to(v, t.shape) for v in loop.eval_exprs([P, time_derivative(loop, P)], Y))
    bound = -0.5 * np.array([float(rho(s)) for s in Pv]) + residual(theta_true, r) / (2.0 * delta)
    return _make_check(name, bound - Pd, t, tol, expect)


def check_nonincreasing(traj: Trajectory, V: E.Expr, tol: float = DEFAULT_TOL, name: str = "nonincreasing",
                        expect: str = "pass") -> Check:
    """V(t) <= V(0) along the trajectory."""
    loop = _loop(traj)
    t, Y = samples(traj)
    (Vv,) = loop.eval_exprs([V], Y)
    Vv = np.broadcast_to(Vv, t.shape)
    return _make_check(name, Vv[0] - Vv, t, tol, expect)


def decay_rate(t: np.ndarray, y: np.ndarray, t0: float = 0.0, t1: float = 5.0, floor: float = 1e-14) -> float:
    """Least-squares slope of -log(y) over [t0, t1], using samples with y above `floor`."""
    t = np.asarray(t)
    y = np.asarray(y)
    sel = (t >= t0) & (t <= t1) & (y > floor)
    if sel.sum() < 2:
        raise ValueError("not enough samples above the floor for a log-linear fit")
    slope, _ = np.polyfit(t[sel], np.log(y[sel]), 1)
    return -float(slope)


# ---------------------------------------------------------------------------
# uniform attractivity


@dataclass
class UniformityProbe:
    R: float
    eps: float
    samples: list  # hitting time per initial condition, None when never settled
    T_max: float | None  # None means "not attained" for at least one sample

    @property
    def attained(self) -> bool:
        return self.T_max is not None

    @property
    def spread(self) -> float | None:
        vals = [v for v in self.samples if v is not None]
        if not vals or not self.attained:
            return None
        return max(vals) - min(vals)


def hitting_time(t: np.ndarray, y: np.ndarray, eps: float) -> float | None:
    """First grid time after which y stays <= eps, or None."""
    suffix = np.maximum.accumulate(np.asarray(y)[::-1])[::-1]
    idx = np.nonzero(suffix <= eps)[0]
    if idx.size == 0:
        return None
    return float(t[idx[0]])


def uniformity_probe(factory, R: float, eps_list: Sequence[float], N: int, t_end: float, theta_hat0=None,
                     output: Callable[[Trajectory], np.ndarray] | None = None, seed: int = 0, rtol: float = 1e-8,
                     atol: float = 1e-10, n_report: int = 2000, threads: int | None = None) -> list:
    """Empirical T(eps, R) over N initial states on the sphere |x0| = R."""
    if N < 8:
        raise ValueError("uniformity probe needs at least 8 samples")
    loop = factory if isinstance(factory, ClosedLoop) else factory()
    th0 = np.zeros(loop.p) if theta_hat0 is None else np.ravel(theta_hat0)
    pts = sphere_points(N, R, loop.n, seed)
    runs = sweep(loop, [(x0, th0) for x0 in pts], t_end, rtol, atol, n_report, threads)
    out_fn = output or (lambda tr: tr.x_norm)
    probes = []
    for eps in eps_list:
        times = []
        for run in runs:
            if isinstance(run, IntegrationError):
                times.append(None)
            else:
                times.append(hitting_time(run.t, out_fn(run), eps))
        T_max = None if any(v is None for v in times) else max(times)
        probes.append(UniformityProbe(R, eps, times, T_max))
    return probes
