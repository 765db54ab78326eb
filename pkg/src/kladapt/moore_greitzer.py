"""Two-state Moore-Greitzer surge model and its adaptive controllers.

    x1' = theta1 x1^2 + theta2 x1^3 + x2
    x2' = u

Controller A is the classical certainty-equivalence design; controller B
adds damping that grows with both the state and the estimate.  A third
controller is produced by the generic recursive synthesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as E
from .backstep import synthesize
from .matched import AdaptiveController
from .model import DesignConstants, ModelError, StrictFeedbackSystem
from .sim import ClosedLoop, IntegrationError, circle_points, integrate, sweep


@dataclass(frozen=True)
class ExampleConfig:
    Q: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    mu: float = 1.0
    epsilon: float = 1.0
    r: float = 2.0
    theta_true: tuple = (-1.5, -0.5)
    x0: tuple = (0.4, -1.0)
    theta_hat0: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("Q", "gamma1", "gamma2", "mu", "epsilon"):
            if not getattr(self, name) > 0:
                raise ModelError(f"{name} must be positive")
        if not self.r >= 0:
            raise ModelError("r must be >= 0")
        object.__setattr__(self, "theta_true", tuple(float(v) for v in self.theta_true))
        object.__setattr__(self, "x0", tuple(float(v) for v in self.x0))
        object.__setattr__(self, "theta_hat0", tuple(float(v) for v in self.theta_hat0))
        if len(self.theta_true) != 2 or len(self.x0) != 2 or len(self.theta_hat0) != 2:
            raise ModelError("theta_true, x0 and theta_hat0 must have two entries")

    @property
    def residual(self) -> float:
        th = np.asarray(self.theta_true)
        return max(float(th @ th) - self.r, 0.0)

    def design_constants(self) -> DesignConstants:
        """Constants for the generic synthesis: alpha = omega = mu."""
        return DesignConstants(r=self.r, alpha=self.mu, omega=self.mu, epsilon=self.epsilon,
                               gamma=(self.gamma1, self.gamma2))


def system() -> StrictFeedbackSystem:
    x1 = E.x(1)
    return StrictFeedbackSystem(2, 2, [0, 0], [1, 1], [[E.power(x1, 2), E.power(x1, 3)], [0, 0]], name="moore-greitzer")


def _estimate_energy(cfg: ExampleConfig) -> E.Expr:
    terms = []
    for j, g in enumerate((cfg.gamma1, cfg.gamma2)):
        err = E.add(E.th(j + 1), E.mul(-1.0, E.sym(f"theta{j + 1}")))
        terms.append(E.mul(0.5 / g, E.power(err, 2)))
    return E.add(*terms)


def controller_a(cfg: ExampleConfig = ExampleConfig()) -> AdaptiveController:
    x1, x2, t1, t2 = E.x(1), E.x(2), E.th(1), E.th(2)
    Q, mu, g1, g2 = cfg.Q, cfg.mu, cfg.gamma1, cfg.gamma2
    drift = E.add(E.mul(t1, E.power(x1, 2)), E.mul(t2, E.power(x1, 3)), x2)
    z = E.add(drift, E.mul(mu, x1))
    slope = E.add(E.mul(2.0, t1, x1), E.mul(3.0, t2, E.power(x1, 2)))
    w1 = E.add(E.mul(g1 * Q, E.power(x1, 2), z, E.add(slope, mu)), E.mul(g1, E.power(x1, 3)))
    w2 = E.add(E.mul(g2 * Q, E.power(x1, 3), z, E.add(slope, mu)), E.mul(g2, E.power(x1, 4)))
    u = E.add(
        E.mul(-(1.0 / Q + mu ** 2), x1),
        E.mul(-1.0, w1, E.power(x1, 2)),
        E.mul(-1.0, w2, E.power(x1, 3)),
        E.mul(-1.0, E.add(slope, 2.0 * mu), drift),
    )
    U = E.add(E.mul(0.5, E.power(x1, 2)), E.mul(Q / 2.0, E.power(z, 2)))
    V = E.add(U, _estimate_energy(cfg))
    diag = {
        "z": z,
        "T1": x1,
        "T2": E.mul(math.sqrt(Q), z),
        "U": U,
        "V": V,
        "lyap_bound": E.add(E.mul(-mu, E.power(x1, 2)), E.mul(-mu * Q, E.power(z, 2))),
    }
    cert = {"mu": mu}
    return AdaptiveController(2, 2, E.simplify(u), (E.simplify(w1), E.simplify(w2)), diag, {}, "example-a", cert)


def controller_b_parts(cfg: ExampleConfig = ExampleConfig()) -> dict:
    x1, x2, t1, t2 = E.x(1), E.x(2), E.th(1), E.th(2)
    Q, mu, eps, r = cfg.Q, cfg.mu, cfg.epsilon, cfg.r
    est2 = E.add(E.power(t1, 2), E.power(t2, 2), r)
    M = E.add(2.0 * mu, E.mul(0.5, est2), E.power(x1, 2), E.mul(1.0 + 1.0 / (2.0 * eps), E.power(x1, 4)),
              E.mul(1.0 / (2.0 * eps), E.power(x1, 6)))
    z = E.add(x2, E.mul(t1, E.power(x1, 2)), E.mul(t2, E.power(x1, 3)), E.mul(M, x1))
    phi_gain = E.add(
        E.mul(2.0, t1, x1), E.mul(3.0, t2, E.power(x1, 2)), M,
        E.mul(E.power(x1, 2), E.add(2.0, E.mul(2.0 * (2.0 * eps + 1.0) / eps, E.power(x1, 2)),
                                    E.mul(3.0 / eps, E.power(x1, 4)))),
    )
    G = E.add(mu, E.mul(Q, E.power(x1, 2), E.add(1.0, E.power(x1, 2)), E.power(phi_gain, 2),
                        E.add(E.mul(1.0 / (2.0 * eps), E.power(x1, 2)), E.mul(1.0 / mu, est2))))
    return {"M": M, "z": z, "phi_gain": phi_gain, "G": G}


def controller_b(cfg: ExampleConfig = ExampleConfig()) -> AdaptiveController:
    x1, t1, t2 = E.x(1), E.th(1), E.th(2)
    Q, mu, g1, g2 = cfg.Q, cfg.mu, cfg.gamma1, cfg.gamma2
    parts = controller_b_parts(cfg)
    M, z, ph, G = parts["M"], parts["z"], parts["phi_gain"], parts["G"]
    common = E.add(E.mul(Q, z, ph), x1)
    w1 = E.mul(g1, E.power(x1, 2), common)
    w2 = E.mul(g2, E.power(x1, 3), common)
    u = E.add(
        E.mul(-1.0 / Q, x1),
        E.mul(-1.0, E.add(x1, t1), x1, w1),
        E.mul(-1.0, E.add(E.power(x1, 2), t2), x1, w2),
        E.mul(-1.0, G, z),
        E.mul(ph, E.add(E.mul(M, x1), E.mul(-1.0, z))),
    )
    U = E.add(E.mul(0.5, E.power(x1, 2)), E.mul(Q / 2.0, E.power(z, 2)))
    W = E.add(U, _estimate_energy(cfg))
    diag = dict(parts)
    diag.update({
        "T1": x1,
        "T2": E.mul(math.sqrt(Q), z),
        "U": U,
        "W": W,
        "V": W,
        "lyap_bound": E.mul(-mu, U),
    })
    # dU/dt <= -mu U + eps (|theta|^2 - r)^+ is the |T|^2 form with omega = mu / 2
    cert = {"mu": mu, "alpha": mu / 2.0, "omega": mu / 2.0, "epsilon": cfg.epsilon, "r": cfg.r}
    return AdaptiveController(2, 2, E.simplify(u), (E.simplify(w1), E.simplify(w2)), diag, {}, "example-b", cert)


def controller_synth(cfg: ExampleConfig = ExampleConfig()):
    """Generic recursive synthesis with alpha = omega = mu; returns (controller, trace)."""
    ctrl, trace = synthesize(system(), cfg.design_constants())
    diag = dict(ctrl.diagnostics)
    diag["lyap_bound_U"] = E.mul(-cfg.mu, diag["U"])
    return AdaptiveController(ctrl.n, ctrl.p, ctrl.u, ctrl.w, diag, ctrl.constants, ctrl.kind, ctrl.certified), trace


def closed_loop(which: str, cfg: ExampleConfig = ExampleConfig()) -> ClosedLoop:
    builders = {"A": controller_a, "B": controller_b, "S": lambda c: controller_synth(c)[0]}
    key = which.upper()[:1] if which.lower() not in ("example-a", "example-b", "synth") else \
        {"example-a": "A", "example-b": "B", "synth": "S"}[which.lower()]
    if key not in builders:
        raise ValueError(f"unknown controller {which!r}")
    return ClosedLoop(system(), builders[key](cfg), cfg.theta_true)


# ---------------------------------------------------------------------------
# figure datasets

REFERENCE_X0 = ((0.4, -1.0), (0.6, 0.5))
PHASE_RING = (12, 1.2)


@dataclass(frozen=True)
class FigureSpec:
    number: int
    kind: str  # phase | norm | estimate-error
    controllers: tuple
    initial: tuple
    t_end: float


def phase_initial_points() -> tuple:
    ring = circle_points(*PHASE_RING)
    return tuple(tuple(float(v) for v in row) for row in ring) + REFERENCE_X0


FIGURES = {
    1: FigureSpec(1, "phase", ("A",), phase_initial_points(), 20.0),
    2: FigureSpec(2, "phase", ("B",), phase_initial_points(), 20.0),
    3: FigureSpec(3, "norm", ("A", "B"), (REFERENCE_X0[0],), 20.0),
    4: FigureSpec(4, "norm", ("A", "B"), (REFERENCE_X0[1],), 20.0),
    5: FigureSpec(5, "estimate-error", ("A", "B"), (REFERENCE_X0[0],), 50.0),
    6: FigureSpec(6, "estimate-error", ("A", "B"), (REFERENCE_X0[1],), 50.0),
}


@dataclass
class Series:
    label: str
    controller: str
    x0: tuple
    xs: np.ndarray
    ys: np.ndarray
    trajectory: object = field(default=None, repr=False)


@dataclass
class FigureData:
    number: int
    kind: str
    xlabel: str
    ylabel: str
    series: list

    def by_controller(self, name: str) -> list:
        return [s for s in self.series if s.controller == name]


def series_from(kind: str, traj, theta_true) -> tuple:
    if kind == "phase":
        return traj.x[:, 0], traj.x[:, 1]
    if kind == "norm":
        return traj.t, traj.x_norm
    if kind == "estimate-error":
        return traj.t, traj.estimate_error(theta_true)
    raise ValueError(f"unknown plot kind {kind!r}")


AXES = {"phase": ("x1", "x2"), "norm": ("t", "|x(t)|"), "estimate-error": ("t", "|th(t) - theta|")}


def figure_dataset(which: int, cfg: ExampleConfig = ExampleConfig(), rtol: float = 1e-8, atol: float = 1e-10,
                   n_report: int = 2000, threads: int | None = None) -> FigureData:
    if which not in FIGURES:
        raise ValueError(f"figure number must be 1..6, got {which}")
    spec = FIGURES[which]
    series = []
    for name in spec.controllers:
        loop = closed_loop(name, cfg)
        runs = sweep(loop, [(x0, cfg.theta_hat0) for x0 in spec.initial], spec.t_end, rtol, atol, n_report, threads)
        for x0, run in zip(spec.initial, runs):
            if isinstance(run, IntegrationError):
                raise run
            xs, ys = series_from(spec.kind, run, cfg.theta_true)
            series.append(Series(f"{name} x0=({x0[0]:g},{x0[1]:g})", name, tuple(x0), xs, ys, run))
    xl, yl = AXES[spec.kind]
    return FigureData(which, spec.kind, xl, yl, series)
