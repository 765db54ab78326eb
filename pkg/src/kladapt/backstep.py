"""Recursive adaptive backstepping with estimate-dependent nonlinear damping.

Each stage carries a coordinate map T(x, th) with explicit inverse, a
virtual control k, an update law w and a damping gain.  A stage guarantees,
with V = |T|^2/2 + sum_j (th_j - theta_j)^2 / (2 gamma_j):

    dV/dt       <= -lyap_rate |T|^2
    d/dt |T|^2/2 <= -ios_rate |T|^2 + eps (|theta|^2 - r)^+

Adding an integrator costs omega/2 of ios_rate and doubles eps.  The
additive part of every stage gain is raised as needed so the final stage
still has ios_rate >= omega; the base stage starts from eps = 2^-n epsilon.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import expr as E
from .matched import AdaptiveController
from .model import DesignConstants, ModelError, StrictFeedbackSystem, validate_strict_feedback, GridSpec

DEFAULT_NODE_CAP = 20000


class RhoPreconditionFailed(ValueError):
    pass


@dataclass(frozen=True)
class Stage:
    dim: int
    T: tuple
    T_inv: tuple  # in z1..z_dim and th
    k: E.Expr
    w: tuple
    M_gain: E.Expr
    rho_bounds: tuple  # Exprs in (x, th)
    eps: float
    ios_rate: float
    lyap_rate: float
    additive: float


@dataclass
class SynthesisTrace:
    stages: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    def text(self) -> str:
        lines = []
        for rec in self.stages:
            lines.append(f"stage {rec['stage']}:")
            for key in ("additive", "ios_rate", "lyap_rate", "eps"):
                lines.append(f"  {key} = {rec[key]:.12g}")
            for key in ("k_nodes", "w_nodes", "M_nodes"):
                lines.append(f"  {key} = {rec[key]}")
            for j, vals in enumerate(rec["rho_probe"]):
                lines.append(f"  rho[{j + 1}] at probes = [{', '.join(f'{v:.6g}' for v in vals)}]")
        for w in self.warnings:
            lines.append(f"warning: {w}")
        return "\n".join(lines) + "\n"


def z(i: int) -> E.Expr:
    return E.sym(f"z{i}")


def _sum(items):
    items = [it for it in items if not (isinstance(it, E.Expr) and it.is_zero)]
    return E.add(*items) if items else E.ZERO


def _keep(e):
    return e


def _needed_rate(consts: DesignConstants, n: int, i: int) -> float:
    return consts.omega + (n - i) * consts.omega / 2.0


def _additive(consts: DesignConstants, n: int, i: int) -> float:
    return max(consts.alpha + consts.omega, _needed_rate(consts, n, i))


def _check_vanishing(h: E.Expr, names, p: int, label: str, samples: int = 32, seed: int = 0):
    f = E.lambdify([h], 0, p, constants=list(names))
    rng = np.random.default_rng(seed)
    zeros = {nm: 0.0 for nm in names}
    for _ in range(samples):
        thv = rng.uniform(-3, 3, size=p)
        (v,) = f((), thv, zeros)
        if abs(v) >= 1e-9:
            raise RhoPreconditionFailed(f"{label} does not vanish at the origin (value {v:.3g})")


def _probe_values(exprs, n, p, points=3, seed=0):
    if not exprs:
        return []
    rng = np.random.default_rng(seed)
    f = E.lambdify(exprs, n, p)
    vals = [[] for _ in exprs]
    for _ in range(points):
        out = f(rng.uniform(-1, 1, size=n), rng.uniform(-1, 1, size=p))
        for j, v in enumerate(out):
            vals[j].append(float(v))
    return vals


def _damping_core(consts: DesignConstants, p: int, rhos, eps_i: float, regressors) -> tuple:
    r = consts.r
    th2 = _sum([E.power(E.th(j + 1), 2) for j in range(p)])
    rho_sum = _sum(rhos)
    est = _sum([E.mul(math.sqrt(r) + 0.5, rhos[j]) for j in range(p)] +
               [E.mul(0.5, E.power(E.th(j + 1), 2), rhos[j]) for j in range(p)])
    reg = E.mul(1.0 / (4.0 * eps_i), _sum([E.power(h, 2) for h in regressors]))
    return th2, rho_sum, est, reg


def synthesize_base(sys: StrictFeedbackSystem, consts: DesignConstants, quad_order: int = E.DEFAULT_QUAD_ORDER,
                    tidy: bool = True) -> Stage:
    simp = E.simplify if tidy else _keep
    n, p = sys.n, sys.p
    gamma = consts.gamma_for(p)
    x1 = E.x(1)
    phi1 = list(sys.phi[0])
    for j, h in enumerate(phi1):
        _check_vanishing(E.substitute(h, {"x1": E.ZERO}), [], p, f"phi[1][{j + 1}]")
    rhos = [E.ray_rho_expr(h, ["x1"], quad_order) for h in phi1]
    eps1 = consts.epsilon * 2.0 ** (-n)
    A = _additive(consts, n, 1)
    _, _, est, reg = _damping_core(consts, p, rhos, eps1, phi1)
    M = simp(E.add(A, reg, est))
    num = _sum([sys.f[0]] + [E.mul(phi1[j], E.th(j + 1)) for j in range(p)] + [E.mul(M, x1)])
    k = simp(E.mul(-1.0, E.div(num, sys.g[0], "g1 is nonvanishing")))
    w = tuple(simp(E.mul(gamma[j], x1, phi1[j])) for j in range(p))
    return Stage(1, (x1,), (z(1),), k, w, M, tuple(rhos), eps1, A, A, A)


def backstep_stage(prev: Stage, sys: StrictFeedbackSystem, stage_index: int, consts: DesignConstants,
                   quad_order: int = E.DEFAULT_QUAD_ORDER, tidy: bool = True) -> Stage:
    simp = E.simplify if tidy else _keep
    i = prev.dim
    if stage_index != i + 1 or stage_index > sys.n:
        raise ValueError(f"stage index {stage_index} does not follow a stage of dimension {i}")
    n, p = sys.n, sys.p
    gamma = consts.gamma_for(p)
    xs = E.state_names(i)
    y = E.x(i + 1)
    k = prev.k
    e = E.add(y, E.mul(-1.0, k))
    dk_dx = [simp(E.partial(k, s)) for s in xs]
    dk_dth = [simp(E.partial(k, s)) for s in E.estimate_names(p)]
    psi = [simp(E.add(sys.phi[i][j], E.mul(-1.0, _sum([E.mul(dk_dx[l], sys.phi[l][j]) for l in range(i)]))))
           for j in range(p)]
    w_new = tuple(simp(E.add(prev.w[j], E.mul(gamma[j], e, psi[j]))) for j in range(p))

    # |psi_j| <= rho_j |T~|: ray bound of psi_j in the T~ coordinates, pulled back
    T_new = tuple(prev.T) + (simp(e),)
    back = {s: prev.T_inv[l] for l, s in enumerate(xs)}
    last_inv = simp(E.add(z(i + 1), E.substitute(k, back)))
    T_inv_new = tuple(prev.T_inv) + (last_inv,)
    inv_map = dict(back)
    inv_map[f"x{i + 1}"] = last_inv
    fwd = {f"z{l + 1}": T_new[l] for l in range(i + 1)}
    znames = [f"z{l + 1}" for l in range(i + 1)]
    rhos = []
    for j in range(p):
        h = simp(E.substitute(psi[j], inv_map))
        if h.is_zero:
            rhos.append(E.ONE)
            continue
        _check_vanishing(E.substitute(h, {nm: E.ZERO for nm in znames}), [], p, f"regressor difference {j + 1}")
        rz = E.ray_rho_expr(h, znames, quad_order)
        rhos.append(simp(E.substitute(rz, fwd)))

    eps_i = prev.eps
    A = _additive(consts, n, i + 1)
    th2, rho_sum, est, reg = _damping_core(consts, p, rhos, eps_i, psi)
    young = E.mul(1.0 / consts.omega, E.add(consts.r, th2), E.power(rho_sum, 2))
    M = simp(E.add(A, young, est, reg))

    TdT_dx_i = _sum([E.mul(Tm, E.partial(Tm, xs[-1])) for Tm in prev.T])
    TdT_dth = [_sum([E.mul(Tm, E.partial(Tm, f"th{j + 1}")) for Tm in prev.T]) for j in range(p)]
    drift = []
    for l in range(i):
        nxt = E.x(l + 2)
        move = _sum([sys.f[l], E.mul(sys.g[l], nxt)] + [E.mul(sys.phi[l][j], E.th(j + 1)) for j in range(p)])
        drift.append(E.mul(dk_dx[l], move))
    kbar = _sum(
        [E.mul(-1.0, sys.f[i])]
        + [E.mul(-1.0, sys.phi[i][j], E.th(j + 1)) for j in range(p)]
        + drift
        + [E.mul(dk_dth[j], w_new[j]) for j in range(p)]
        + [E.mul(-gamma[j], TdT_dth[j], psi[j]) for j in range(p)]
        + [E.mul(-1.0, sys.g[i - 1], TdT_dx_i), E.mul(-1.0, M, e)]
    )
    k_new = simp(E.div(kbar, sys.g[i], f"g{i + 1} is nonvanishing"))
    ios = min(prev.ios_rate - consts.omega / 2.0, A)
    lyap = min(prev.lyap_rate, A)
    return Stage(i + 1, T_new, T_inv_new, k_new, w_new, M, tuple(rhos), 2.0 * eps_i, ios, lyap, A)


def synthesize(sys: StrictFeedbackSystem, consts: DesignConstants, quad_order: int = E.DEFAULT_QUAD_ORDER,
               node_cap: int = DEFAULT_NODE_CAP, validate: bool = True, grid: GridSpec | None = None):
    """Full recursion; returns (AdaptiveController, SynthesisTrace)."""
    if validate:
        rep = validate_strict_feedback(sys, grid or GridSpec(n_random=200))
        if not rep.valid:
            raise ModelError("system is not in parametric strict-feedback form:\n" + rep.text())
    trace = SynthesisTrace()
    stage = synthesize_base(sys, consts, quad_order)
    _record(trace, stage, sys, node_cap)
    for idx in range(2, sys.n + 1):
        stage = backstep_stage(stage, sys, idx, consts, quad_order)
        _record(trace, stage, sys, node_cap)
    p = sys.p
    gamma = consts.gamma_for(p)
    U = E.simplify(E.mul(0.5, _sum([E.power(t, 2) for t in stage.T])))
    est = _sum([E.mul(0.5 / gamma[j], E.power(E.add(E.th(j + 1), E.mul(-1.0, E.sym(f"theta{j + 1}"))), 2)) for j in range(p)])
    diag = {f"T{l + 1}": t for l, t in enumerate(stage.T)}
    diag["U"] = U
    diag["V"] = E.simplify(E.add(U, est))
    diag["W"] = diag["V"]
    diag["M"] = stage.M_gain
    diag["lyap_bound"] = E.simplify(E.mul(-2.0 * consts.alpha, U))
    cert = {"alpha": consts.alpha, "omega": consts.omega, "epsilon": consts.epsilon, "r": consts.r,
            "ios_rate": stage.ios_rate, "lyap_rate": stage.lyap_rate, "residual_coef": stage.eps}
    ctrl = AdaptiveController(sys.n, p, stage.k, stage.w, diag, sys.constants, "backstep", cert)
    return ctrl, trace


def guaranteed_rates(consts: DesignConstants, n: int) -> dict:
    """Rates and residual coefficient certified by the recursion (no synthesis needed)."""
    ios = lyap = _additive(consts, n, 1)
    eps = consts.epsilon * 2.0 ** (-n)
    for i in range(2, n + 1):
        A = _additive(consts, n, i)
        ios = min(ios - consts.omega / 2.0, A)
        lyap = min(lyap, A)
        eps *= 2.0
    return {"ios_rate": ios, "lyap_rate": lyap, "eps": eps}


def _record(trace: SynthesisTrace, stage: Stage, sys: StrictFeedbackSystem, node_cap: int):
    rec = {
        "stage": stage.dim,
        "additive": stage.additive,
        "ios_rate": stage.ios_rate,
        "lyap_rate": stage.lyap_rate,
        "eps": stage.eps,
        "k_nodes": E.node_count(stage.k, unique=True),
        "w_nodes": sum(E.node_count(wj, unique=True) for wj in stage.w),
        "M_nodes": E.node_count(stage.M_gain, unique=True),
        "rho_probe": _probe_values(list(stage.rho_bounds), stage.dim, sys.p),
    }
    trace.stages.append(rec)
    if rec["k_nodes"] > node_cap:
        trace.warnings.append(f"stage {stage.dim}: feedback has {rec['k_nodes']} nodes (cap {node_cap})")
