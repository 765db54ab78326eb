"""Adaptive controllers for uncertainty entering through the input channel.

Two schemes are built for x' = f(x) + g(x)(u + phi(x)' theta):

* standard:  u = k0 - phi' th,  w = Gamma (grad P . g) phi
* damped:    the same plus a damping term -(delta/2 |phi|^2 + mu (r + |th|^2)) (grad P . g)

The damping gain grows with the estimate as well as with the state, which is
what makes the bound on P independent of the initial estimate.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import expr as E
from . import kvtext
from .model import DesignConstants, GridSpec, MatchedSystem, ModelError, TrueParameters

BISECT_TOL = 1e-10


class EnvelopeDegenerate(ValueError):
    pass


class ArgumentAboveRange(ValueError):
    pass


@dataclass(frozen=True)
class AdaptiveController:
    """Feedback u(x, th) and update law th' = w(x, th), plus named diagnostic maps.

    Diagnostics may reference the true parameters through the constant
    symbols theta1..thetap (e.g. a Lyapunov function); the control law and
    the update law never do.
    """

    n: int
    p: int
    u: E.Expr
    w: tuple
    diagnostics: Mapping[str, E.Expr] = field(default_factory=dict)
    constants: Mapping[str, float] = field(default_factory=dict)
    kind: str = ""
    certified: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "certified", dict(self.certified))
        object.__setattr__(self, "u", E.as_expr(self.u))
        object.__setattr__(self, "w", tuple(E.as_expr(v) for v in self.w))
        object.__setattr__(self, "diagnostics", dict(self.diagnostics))
        object.__setattr__(self, "constants", dict(self.constants))
        if len(self.w) != self.p:
            raise ModelError(f"update law needs {self.p} entries, got {len(self.w)}")
        allowed = set(E.state_names(self.n)) | set(E.estimate_names(self.p)) | set(self.constants)
        for label, e in [("u", self.u)] + [(f"w[{j + 1}]", v) for j, v in enumerate(self.w)]:
            extra = E.free_symbols(e) - allowed
            if extra:
                raise ModelError(f"{label} uses symbols {sorted(extra)} outside (x, th)")

    def T(self) -> list[E.Expr]:
        out, i = [], 1
        while f"T{i}" in self.diagnostics:
            out.append(self.diagnostics[f"T{i}"])
            i += 1
        return out


def _Gamma_apply(G: np.ndarray, vec: list[E.Expr]) -> list[E.Expr]:
    out = []
    for i in range(G.shape[0]):
        terms = [E.mul(float(G[i, j]), vec[j]) for j in range(G.shape[1]) if G[i, j] != 0.0]
        out.append(E.simplify(E.add(*terms)) if terms else E.ZERO)
    return out


def _estimation_error_energy(G: np.ndarray) -> E.Expr:
    Ginv = np.linalg.inv(G)
    p = G.shape[0]
    err = [E.add(E.th(j + 1), E.mul(-1.0, E.sym(f"theta{j + 1}"))) for j in range(p)]
    terms = [E.mul(0.5 * float(Ginv[i, j]), err[i], err[j]) for i in range(p) for j in range(p) if Ginv[i, j] != 0.0]
    return E.add(*terms) if terms else E.ZERO


def _as_gamma(Gamma, p: int) -> np.ndarray:
    if isinstance(Gamma, DesignConstants):
        return Gamma.Gamma_matrix(p)
    G = np.asarray(Gamma if Gamma is not None else 1.0, dtype=float)
    if G.ndim == 0:
        G = np.eye(p) * float(G)
    elif G.ndim == 1:
        G = np.diag(G)
    return DesignConstants(Gamma=G).Gamma_matrix(p)


def standard_controller(sys: MatchedSystem, Gamma=None) -> AdaptiveController:
    G = _as_gamma(Gamma, sys.p)
    LgP = sys.LgP()
    phith = E.add(*[E.mul(ph, E.th(j + 1)) for j, ph in enumerate(sys.phi)])
    u = E.simplify(E.add(sys.k0, E.mul(-1.0, phith)))
    w = _Gamma_apply(G, [E.mul(LgP, ph) for ph in sys.phi])
    diag = {"P": sys.P, "Q": sys.Q, "V": E.simplify(E.add(sys.P, _estimation_error_energy(G)))}
    return AdaptiveController(sys.n, sys.p, u, w, diag, sys.constants, "standard")


def damping_gain(sys: MatchedSystem, consts: DesignConstants) -> E.Expr:
    """delta/2 |phi|^2 + mu (r + |th|^2)."""
    phi2 = E.add(*[E.power(ph, 2) for ph in sys.phi])
    th2 = E.add(*[E.power(E.th(j + 1), 2) for j in range(sys.p)])
    return E.simplify(E.add(E.mul(consts.delta / 2.0, phi2), E.mul(sys.mu, E.add(consts.r, th2))))


def damped_controller(sys: MatchedSystem, consts: DesignConstants) -> AdaptiveController:
    base = standard_controller(sys, consts.Gamma_matrix(sys.p))
    LgP = sys.LgP()
    u = E.simplify(E.add(base.u, E.mul(-1.0, damping_gain(sys, consts), LgP)))
    diag = dict(base.diagnostics)
    diag["damping"] = damping_gain(sys, consts)
    return AdaptiveController(sys.n, sys.p, u, base.w, diag, sys.constants, "damped")


def project_ball(theta, r: float) -> np.ndarray:
    """Euclidean projection onto the closed ball of radius sqrt(r)."""
    if r < 0:
        raise ValueError("r must be >= 0")
    th = np.asarray(theta, dtype=float)
    nrm = float(np.linalg.norm(th))
    rad = float(np.sqrt(r))
    if nrm <= rad:
        return th.copy()
    return th * (rad / nrm)


# ---------------------------------------------------------------------------
# rho with rho(P(x)) <= Q(x)


class MonotoneRho:
    """Nondecreasing piecewise-linear map through (0, 0) and the given knots.

    Constant beyond the last knot; ``s_max`` is the end of the fitted range.
    """

    def __init__(self, s, y, margin=float("nan"), check_points=0):
        self.s = np.concatenate([[0.0], np.asarray(s, dtype=float)])
        self.y = np.concatenate([[0.0], np.asarray(y, dtype=float)])
        self.s_max = float(self.s[-1])
        self.y_max = float(self.y[-1])
        self.margin = float(margin)
        self.check_points = check_points

    def __call__(self, s):
        return np.interp(s, self.s, self.y)

    def inverse(self, y: float) -> float:
        return bisect_inverse(self, y, self.s_max)


class ClosedFormRho:
    """Wrap a user-supplied nondecreasing function; optional explicit inverse."""

    def __init__(self, fn: Callable, inverse: Callable | None = None, s_max: float = np.inf):
        self.fn = fn
        self._inv = inverse
        self.s_max = s_max

    def __call__(self, s):
        return self.fn(s)

    def inverse(self, y: float) -> float:
        if self._inv is not None:
            return float(self._inv(y))
        return bisect_inverse(self.fn, y, self.s_max)


def bisect_inverse(fn, y: float, s_max: float = np.inf, tol: float = BISECT_TOL) -> float:
    """Smallest-bracket bisection for fn(s) = y on [0, s_max], fn nondecreasing."""
    if y <= 0.0:
        return 0.0
    hi = s_max
    if not np.isfinite(hi):
        hi = 1.0
        while fn(hi) < y:
            hi *= 2.0
            if hi > 1e300:
                raise ArgumentAboveRange(f"rho never reaches {y:g}")
    elif fn(hi) < y:
        raise ArgumentAboveRange(f"argument {y:g} exceeds the fitted range of rho (max {float(fn(hi)):g})")
    lo = 0.0
    while hi - lo > tol:
        mid = 0.5 * (lo + hi)
        if fn(mid) < y:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def _radial_augment(pts: np.ndarray, levels: int = 24) -> np.ndarray:
    scales = 2.0 ** -np.arange(1, levels + 1)
    return np.vstack([pts] + [pts * s for s in scales])


def fit_rho_envelope(P: E.Expr, Q: E.Expr, grid: GridSpec | np.ndarray = GridSpec(), n: int | None = None,
                     constants: Mapping[str, float] | None = None) -> MonotoneRho:
    """Fit a nondecreasing piecewise-linear rho with rho(P(x)) <= Q(x).

    Knots come from the suffix minima of Q over samples sorted by P, placed
    one level late so the chords stay below the envelope between samples;
    the result is then re-checked on a denser grid (``margin`` attribute).
    """
    constants = dict(constants or {})
    if n is None:
        n = max([int(s[1:]) for s in E.free_symbols(E.add(P, Q)) if s.startswith("x") and s[1:].isdigit()], default=1)
    if isinstance(grid, GridSpec):
        pts = grid.points(n)
        dense = GridSpec(4 * grid.points_per_axis - 3, grid.lo, grid.hi, 4 * grid.n_random, grid.seed + 1).points(n)
    else:
        pts = np.asarray(grid, dtype=float).reshape(-1, n)
        dense = None
    pts = pts[np.linalg.norm(pts, axis=1) > 0.0]
    if len(pts) == 0:
        raise EnvelopeDegenerate("empty fitting grid")
    pts = _radial_augment(pts)
    f = E.lambdify([P, Q], n, 0, constants=list(constants), vectorized=True)
    s, q = f(pts.T, (), constants)
    if np.any(s <= 0.0) or np.any(q <= 0.0):
        raise EnvelopeDegenerate("P and Q must be positive away from the origin")
    order = np.argsort(s, kind="stable")
    s, q = s[order], q[order]
    suffix = np.minimum.accumulate(q[::-1])[::-1]
    # right end of every plateau of the suffix minimum
    ends = np.nonzero(np.diff(suffix) > 0.0)[0]
    ends = np.append(ends, len(s) - 1)
    ks, ky = s[ends], suffix[ends]
    if len(ks) < 2:
        raise EnvelopeDegenerate("envelope has fewer than two distinct levels")
    # shift levels one knot later
    ky = np.concatenate([[0.5 * ky[0] * ks[0] / ks[1]], ky[:-1]]) if len(ky) > 1 else ky
    keep = np.concatenate([[True], np.diff(ky) > 0.0])
    ks, ky = ks[keep], ky[keep]
    if np.any(np.diff(ky) <= 0.0) or len(ks) < 2:
        raise EnvelopeDegenerate("envelope is not strictly increasing")
    rho = MonotoneRho(ks, ky)
    if dense is not None:
        dense = dense[np.linalg.norm(dense, axis=1) > 0.0]
        dense = _radial_augment(dense, 12)
        ds, dq = f(dense.T, (), constants)
        inside = ds <= rho.s_max
        margin = dq[inside] - rho(ds[inside])
        rho.margin = float(np.min(margin)) if margin.size else float("nan")
        rho.check_points = int(inside.sum())
    return rho


@dataclass(frozen=True)
class ResidualRadius:
    alpha_val: float
    lam: float
    delta: float
    r: float
    theta_norm2: float
    argument: float


def residual_radius(theta_true, consts: DesignConstants, rho) -> ResidualRadius:
    """alpha = rho^-1((1-lam)^-1 delta^-1 (|theta|^2 - r)^+)."""
    th = theta_true.theta if isinstance(theta_true, TrueParameters) else tuple(np.ravel(theta_true))
    n2 = float(np.dot(th, th))
    arg = max(n2 - consts.r, 0.0) / ((1.0 - consts.lam) * consts.delta)
    if arg == 0.0:
        alpha = 0.0
    elif hasattr(rho, "inverse"):
        alpha = rho.inverse(arg)
    else:
        alpha = bisect_inverse(rho, arg, getattr(rho, "s_max", np.inf))
    return ResidualRadius(float(alpha), consts.lam, consts.delta, consts.r, n2, arg)


# ---------------------------------------------------------------------------
# controller files


def dump_controller(ctrl: AdaptiveController) -> str:
    sec = kvtext.Section()
    sec["schema"] = "kladapt-controller-v1"
    sec["n"] = str(ctrl.n)
    sec["p"] = str(ctrl.p)
    if ctrl.kind:
        sec["kind"] = ctrl.kind
    if ctrl.constants:
        cs = kvtext.Section("constants")
        for k, v in ctrl.constants.items():
            cs[k] = repr(float(v))
        sec["constants"] = cs
    body = kvtext.Section("controller")
    body["u"] = E.to_sexpr(ctrl.u)
    for j, wj in enumerate(ctrl.w):
        body[f"w[{j + 1}]"] = E.to_sexpr(wj)
    sec["controller"] = body
    if ctrl.certified:
        cert = kvtext.Section("certified")
        for k, v in ctrl.certified.items():
            cert[k] = repr(float(v))
        sec["certified"] = cert
    if ctrl.diagnostics:
        d = kvtext.Section("diagnostics")
        for k, v in ctrl.diagnostics.items():
            d[k] = E.to_sexpr(v)
        sec["diagnostics"] = d
    return kvtext.dumps(sec)


def controller_from_section(sec: kvtext.Section) -> AdaptiveController:
    n, p = sec.get_int("n"), sec.get_int("p")
    body = sec.section("controller")
    consts = {k: float(v) for k, v in sec.section("constants", required=False).items()}
    try:
        u = E.from_sexpr(body.need("u"))
        w = [E.from_sexpr(body.need(f"w[{j + 1}]")) for j in range(p)]
        diag = {k: E.from_sexpr(v) for k, v in sec.section("diagnostics", required=False).items()}
    except E.ParseError as exc:
        raise ModelError(f"controller file: {exc}") from None
    cert = {k: float(v) for k, v in sec.section("certified", required=False).items()}
    return AdaptiveController(n, p, u, w, diag, consts, sec.get("kind", ""), cert)


def load_controller(path) -> AdaptiveController:
    return controller_from_section(kvtext.load(path))


def loads_controller(text: str) -> AdaptiveController:
    return controller_from_section(kvtext.loads(text))
