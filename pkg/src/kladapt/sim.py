"""Closed-loop assembly and Dormand-Prince integration with dense output."""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from . import expr as E
from .matched import AdaptiveController
from .model import MatchedSystem, ModelError, StrictFeedbackSystem, TrueParameters


class IntegrationError(RuntimeError):
    def __init__(self, msg, t_fail=None, partial=None):
        super().__init__(msg)
        self.t_fail = t_fail
        self.partial = partial


class StepSizeUnderflow(IntegrationError):
    pass


class NonFiniteState(IntegrationError):
    pass


def theta_constants(theta) -> dict:
    th = theta.theta if isinstance(theta, TrueParameters) else tuple(float(v) for v in np.ravel(theta))
    return {f"theta{j + 1}": v for j, v in enumerate(th)}


def plant_field(sys, u: E.Expr) -> list[E.Expr]:
    """Plant right-hand side in x with the input replaced by `u` and theta as constants theta_j."""
    p = sys.p
    thetas = [E.sym(f"theta{j + 1}") for j in range(p)]
    if isinstance(sys, StrictFeedbackSystem):
        return [E.simplify(e) for e in sys.open_loop_field([f"theta{j + 1}" for j in range(p)], u)]
    if isinstance(sys, MatchedSystem):
        inner = E.add(u, *[E.mul(sys.phi[j], thetas[j]) for j in range(p)])
        return [E.simplify(E.add(sys.f[i], E.mul(sys.g[i], inner))) for i in range(sys.n)]
    raise ModelError(f"unsupported system type {type(sys).__name__}")


class ClosedLoop:
    """Autonomous vector field (x, th) -> (x', th') for a plant, a controller and true parameters.

    The controller expressions never see theta; only the plant part does.
    """

    def __init__(self, sys, ctrl: AdaptiveController | None, theta_true, diagnostics: Mapping[str, E.Expr] | None = None):
        self.sys = sys
        self.n = sys.n
        if ctrl is None:
            ctrl = AdaptiveController(sys.n, 0, E.ZERO, (), {}, sys.constants, "open-loop")
        self.ctrl = ctrl
        self.p = ctrl.p
        if ctrl.n != sys.n:
            raise ModelError(f"controller is for n={ctrl.n}, system has n={sys.n}")
        theta = np.ravel(theta_true.theta if isinstance(theta_true, TrueParameters) else theta_true).astype(float)
        if len(theta) != sys.p:
            raise ModelError(f"system has {sys.p} parameters, got {len(theta)} true values")
        if ctrl.p not in (0, sys.p):
            raise ModelError(f"controller estimates {ctrl.p} parameters, system has {sys.p}")
        self.theta = theta
        self.consts = dict(sys.constants)
        self.consts.update(ctrl.constants)
        self.consts.update(theta_constants(theta))
        self.cnames = sorted(self.consts)
        self.x_dot = plant_field(sys, ctrl.u)
        self.th_dot = list(ctrl.w)
        self.field_exprs = self.x_dot + self.th_dot
        self.dim = self.n + self.p
        self._f = E.lambdify(self.field_exprs + [ctrl.u], self.n, self.p, constants=self.cnames)
        self._ctrl_only = E.lambdify([ctrl.u] + list(ctrl.w), self.n, self.p, constants=list(ctrl.constants))
        self.diagnostics = dict(ctrl.diagnostics)
        if diagnostics:
            self.diagnostics.update(diagnostics)

    def field(self, y) -> np.ndarray:
        n = self.n
        out = self._f(y[:n], y[n:], self.consts)
        return np.array(out[:-1])

    def __call__(self, t, y):
        return self.field(y)

    def control(self, x, th) -> float:
        return float(self._ctrl_only(np.asarray(x, float), np.asarray(th, float), self.ctrl.constants)[0])

    def eval_exprs(self, exprs: Sequence[E.Expr], states: np.ndarray) -> list[np.ndarray]:
        """Vectorized evaluation of expressions at rows of `states` (N x (n+p))."""
        states = np.atleast_2d(states)
        f = E.lambdify(list(exprs), self.n, self.p, constants=self.cnames, vectorized=True)
        cols = states.T
        return list(f(cols[: self.n], cols[self.n:], self.consts))


# ---------------------------------------------------------------------------
# Dormand-Prince 5(4)

_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = [
    [],
    [1 / 5],
    [3 / 40, 9 / 40],
    [44 / 45, -56 / 15, 32 / 9],
    [19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729],
    [9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656],
    [35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84],
]
_B = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_E = np.array([-71 / 57600, 0.0, 71 / 16695, -71 / 1920, 17253 / 339200, -22 / 525, 1 / 40])
# continuous extension of order 4
_P = np.array([
    [1.0, -8048581381 / 2820520608, 8663915743 / 2820520608, -12715105075 / 11282082432],
    [0.0, 0.0, 0.0, 0.0],
    [0.0, 131558114200 / 32700410799, -68118460800 / 10900136933, 87487479700 / 32700410799],
    [0.0, -1754552775 / 470086768, 14199869525 / 1410260304, -10690763975 / 1880347072],
    [0.0, 127303824393 / 49829197408, -318862633887 / 49829197408, 701980252875 / 199316789632],
    [0.0, -282668133 / 205662961, 2019193451 / 616988883, -1453857185 / 822651844],
    [0.0, 40617522 / 29380423, -110615467 / 29380423, 69997945 / 29380423],
])

SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 10.0


def _rms(v):
    return math.sqrt(float(np.dot(v, v)) / v.size) if v.size else 0.0


def _initial_step(fun, t0, y0, f0, rtol, atol, t_span):
    scale = atol + np.abs(y0) * rtol
    d0, d1 = _rms(y0 / scale), _rms(f0 / scale)
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, t_span)
    y1 = y0 + h0 * f0
    f1 = fun(y1)
    d2 = _rms((f1 - f0) / scale) / h0
    if d1 <= 1e-15 and d2 <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** (1 / 5)
    return min(100 * h0, h1, t_span)


@dataclass
class StepLog:
    t: list = field(default_factory=list)
    y: list = field(default_factory=list)


def dopri5(fun: Callable[[np.ndarray], np.ndarray], y0, t_end: float, t_eval: np.ndarray, rtol=1e-8, atol=1e-10,
           max_steps: int = 1_000_000, first_step: float | None = None, log_steps: bool = True):
    """Integrate the autonomous system y' = fun(y) from t=0 to t_end.

    Returns (values at t_eval, meta).  Raises StepSizeUnderflow / NonFiniteState
    with ``t_fail`` and the values produced so far in ``partial``.
    """
    if not t_end > 0:
        raise ValueError("t_end must be positive")
    if not (rtol > 0 and atol > 0):
        raise ValueError("tolerances must be positive")
    y = np.array(y0, dtype=float)
    dim = y.size
    out = np.empty((len(t_eval), dim))
    k_eval = 0
    nfev = 0

    def call(v):
        nonlocal nfev
        nfev += 1
        try:
            r = np.asarray(fun(v), dtype=float)
        except (OverflowError, ZeroDivisionError, E.ExprError, FloatingPointError):
            return None
        return r if np.all(np.isfinite(r)) else None

    t = 0.0
    f = call(y)
    if f is None:
        raise NonFiniteState("field is not finite at the initial state", 0.0, (np.asarray(t_eval[:0]), out[:0]))
    while k_eval < len(t_eval) and t_eval[k_eval] <= t:
        out[k_eval] = y
        k_eval += 1

    def safe(v):
        r = call(v)
        return f if r is None else r

    h = first_step or _initial_step(safe, t, y, f, rtol, atol, t_end)
    K = np.empty((7, dim))
    err_acc = np.zeros(dim)
    steps = rejected = 0
    log = StepLog([0.0], [y.copy()]) if log_steps else None

    def fail(cls, msg):
        return cls(msg, t, (np.asarray(t_eval[:k_eval]), out[:k_eval].copy()))

    while t < t_end:
        if steps + rejected >= max_steps:
            raise fail(StepSizeUnderflow, f"step budget exhausted at t = {t:.6g}")
        min_h = 16 * np.spacing(max(t, 1.0))
        if h < min_h:
            raise fail(StepSizeUnderflow, f"step size underflow at t = {t:.6g} (finite escape?)")
        h = min(h, t_end - t)
        K[0] = f
        bad = False
        for s in range(1, 7):
            dy = np.dot(_A[s], K[:s]) * h
            ks = call(y + dy)
            if ks is None:
                bad = True
                break
            K[s] = ks
        if bad:
            rejected += 1
            h *= 0.25
            continue
        y_new = y + h * np.dot(_B[:6], K[:6])
        if not np.all(np.isfinite(y_new)):
            rejected += 1
            h *= 0.25
            continue
        err = h * np.dot(_E, K)
        scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
        en = _rms(err / scale)
        if en > 1.0:
            rejected += 1
            h *= max(MIN_FACTOR, SAFETY * en ** (-1 / 5))
            continue
        # accepted: fill the report grid from the continuous extension
        t_new = t + h if t_end - (t + h) > 4 * np.spacing(t_end) else t_end
        if k_eval < len(t_eval) and t_eval[k_eval] <= t_new:
            Qm = K.T @ _P
            while k_eval < len(t_eval) and t_eval[k_eval] <= t_new:
                s = (t_eval[k_eval] - t) / h
                out[k_eval] = y + h * (Qm @ np.array([s, s * s, s ** 3, s ** 4]))
                k_eval += 1
        err_acc += np.abs(err)
        t, y = t_new, y_new
        f = K[6].copy() if np.all(np.isfinite(K[6])) else call(y)
        if f is None:
            raise fail(NonFiniteState, f"field became non-finite at t = {t:.6g}")
        steps += 1
        if log is not None:
            log.t.append(t)
            log.y.append(y.copy())
        factor = MAX_FACTOR if en == 0 else min(MAX_FACTOR, SAFETY * en ** (-1 / 5))
        h *= factor
    meta = {
        "steps": steps,
        "rejected": rejected,
        "nfev": nfev,
        "rtol": rtol,
        "atol": atol,
        "error_estimate": err_acc,
        "t_steps": np.array(log.t) if log else None,
        "y_steps": np.array(log.y) if log else None,
    }
    return out, meta


# ---------------------------------------------------------------------------
# trajectories


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    theta_hat: np.ndarray
    u: np.ndarray
    diag: dict
    meta: dict
    label: str = ""
    loop: ClosedLoop | None = field(default=None, repr=False, compare=False)

    @property
    def states(self) -> np.ndarray:
        return np.hstack([self.x, self.theta_hat])

    @property
    def x_norm(self) -> np.ndarray:
        return np.linalg.norm(self.x, axis=1)

    def estimate_error(self, theta) -> np.ndarray:
        return np.linalg.norm(self.theta_hat - np.ravel(theta)[None, :], axis=1)

    def columns(self):
        n, p = self.x.shape[1], self.theta_hat.shape[1]
        names = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"th{j + 1}" for j in range(p)] + ["u"] + list(self.diag)
        cols = [self.t] + [self.x[:, i] for i in range(n)] + [self.theta_hat[:, j] for j in range(p)] + [self.u]
        cols += [self.diag[k] for k in self.diag]
        return names, cols

    def to_csv(self, path_or_file) -> None:
        names, cols = self.columns()
        data = np.column_stack(cols)
        own = isinstance(path_or_file, (str, os.PathLike))
        fh = open(path_or_file, "w", encoding="utf-8", newline="") if own else path_or_file
        try:
            fh.write(",".join(names) + "\n")
            for row in data:
                fh.write(",".join("%.17g" % v for v in row) + "\n")
        finally:
            if own:
                fh.close()


def read_csv(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        names = fh.readline().strip().split(",")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    return {nm: data[:, i] for i, nm in enumerate(names)}


def integrate(cl: ClosedLoop, x0, theta_hat0=(), t_end: float = 20.0, rtol: float = 1e-8, atol: float = 1e-10,
              n_report: int = 2000, diagnostics: Sequence[str] | None = None, label: str = "") -> Trajectory:
    x0 = np.ravel(np.asarray(x0, dtype=float))
    th0 = np.ravel(np.asarray(theta_hat0, dtype=float))
    if x0.size != cl.n or th0.size != cl.p:
        raise ModelError(f"initial state has sizes ({x0.size}, {th0.size}), expected ({cl.n}, {cl.p})")
    t_eval = np.linspace(0.0, t_end, n_report)
    y0 = np.concatenate([x0, th0])
    try:
        Y, meta = dopri5(cl.field, y0, t_end, t_eval, rtol, atol)
    except IntegrationError as exc:
        if exc.partial is not None:
            tt, yy = exc.partial
            exc.partial = _assemble(cl, tt, yy, {"t_fail": exc.t_fail}, diagnostics, label, strict=False)
        raise
    return _assemble(cl, t_eval, Y, meta, diagnostics, label)


def _assemble(cl, t, Y, meta, diagnostics, label, strict=True):
    n = cl.n
    names = list(cl.diagnostics) if diagnostics is None else list(diagnostics)
    if len(t):
        vals = cl.eval_exprs([cl.ctrl.u] + [cl.diagnostics[k] for k in names], Y)
        u = np.broadcast_to(vals[0], t.shape).astype(float)
        diag = {k: np.broadcast_to(v, t.shape).astype(float) for k, v in zip(names, vals[1:])}
    else:
        u, diag = np.zeros(0), {k: np.zeros(0) for k in names}
    if strict and not np.all(np.isfinite(Y)):
        raise NonFiniteState("trajectory contains non-finite values")
    return Trajectory(np.asarray(t, float), Y[:, :n].copy(), Y[:, n:].copy(), u, diag, meta, label, cl)


def circle_points(count: int, radius: float, dim: int = 2) -> np.ndarray:
    ang = 2 * np.pi * np.arange(count) / count
    pts = np.zeros((count, dim))
    pts[:, 0] = radius * np.cos(ang)
    if dim > 1:
        pts[:, 1] = radius * np.sin(ang)
    return pts


def sphere_points(count: int, radius: float, dim: int, seed: int = 0) -> np.ndarray:
    """Seeded random points on the sphere |x| = radius (evenly spaced when dim == 2)."""
    if dim == 2:
        return circle_points(count, radius, 2)
    rng = np.random.default_rng(seed)
    g = rng.standard_normal((count, dim))
    return radius * g / np.linalg.norm(g, axis=1, keepdims=True)


def thread_count(default: int | None = None) -> int:
    env = os.environ.get("KLADAPT_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            pass
    return default or min(8, os.cpu_count() or 1)


def sweep(factory: Callable[[], ClosedLoop] | ClosedLoop, initial: Sequence, t_end: float, rtol: float = 1e-8,
          atol: float = 1e-10, n_report: int = 2000, threads: int | None = None) -> list:
    """Run one integration per (x0, theta_hat0) pair; results keep input order.

    Failed runs appear in the result list as their IntegrationError.
    """
    initial = list(initial)
    if not initial:
        return []
    loop = factory if isinstance(factory, ClosedLoop) else factory()

    def run(item):
        x0, th0 = item
        try:
            return integrate(loop, x0, th0, t_end, rtol, atol, n_report)
        except IntegrationError as exc:
            return exc

    workers = min(thread_count(threads), len(initial))
    if workers <= 1:
        return [run(it) for it in initial]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(run, initial))
