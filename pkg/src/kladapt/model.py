"""System models, design constants and sampled well-formedness checks."""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from . import expr as E
from . import kvtext

MODEL_SCHEMA = "kladapt-model-v1"
G_MIN = 1e-9
ORIGIN_TOL = 1e-12


class ModelError(ValueError):
    pass


def _symbol_index(name: str):
    m = re.fullmatch(r"(x|th)([0-9]+)", name)
    if not m:
        return None, None
    return m.group(1), int(m.group(2))


def _check_state_only(label: str, e: E.Expr, n: int, constants: Mapping[str, float]) -> None:
    for s in E.free_symbols(e):
        kind, idx = _symbol_index(s)
        if kind == "th":
            raise ModelError(f"{label} may not depend on estimate symbol {s}")
        if kind == "x" and not 1 <= idx <= n:
            raise ModelError(f"{label} uses {s} but the state dimension is {n}")
        if kind is None and s not in constants:
            raise ModelError(f"{label} uses unbound symbol {s}")


@dataclass(frozen=True)
class StrictFeedbackSystem:
    """x_i' = f_i + g_i x_{i+1} + sum_j phi_ij theta_j, with x_{n+1} = u."""

    n: int
    p: int
    f: tuple
    g: tuple
    phi: tuple  # n rows of p entries
    constants: Mapping[str, float] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        f = tuple(E.as_expr(v) for v in self.f)
        g = tuple(E.as_expr(v) for v in self.g)
        phi = tuple(tuple(E.as_expr(v) for v in row) for row in self.phi)
        if self.n < 1 or self.p < 0:
            raise ModelError("need n >= 1 and p >= 0")
        if len(f) != self.n or len(g) != self.n or len(phi) != self.n or any(len(r) != self.p for r in phi):
            raise ModelError("f, g and phi must have n, n and n x p entries")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "constants", dict(self.constants))
        for i in range(self.n):
            _check_state_only(f"f[{i + 1}]", f[i], self.n, self.constants)
            _check_state_only(f"g[{i + 1}]", g[i], self.n, self.constants)
            for j in range(self.p):
                _check_state_only(f"phi[{i + 1}][{j + 1}]", phi[i][j], self.n, self.constants)

    def open_loop_field(self, theta_names: Sequence[str] | None = None, u: E.Expr | None = None) -> list[E.Expr]:
        """Plant right-hand side with parameters as named constant symbols."""
        names = theta_names or [f"theta{j + 1}" for j in range(self.p)]
        out = []
        for i in range(self.n):
            nxt = E.x(i + 2) if i + 1 < self.n else (u if u is not None else E.sym("u"))
            terms = [self.f[i], E.mul(self.g[i], nxt)]
            terms += [E.mul(self.phi[i][j], E.sym(names[j])) for j in range(self.p)]
            out.append(E.add(*terms))
        return out


@dataclass(frozen=True)
class MatchedSystem:
    """x' = f(x) + g(x) (u + phi(x)' theta) with a known CLF P for the nominal loop."""

    n: int
    p: int
    f: tuple
    g: tuple
    phi: tuple
    P: E.Expr
    Q: E.Expr
    k0: E.Expr
    mu: E.Expr
    constants: Mapping[str, float] = field(default_factory=dict)
    name: str = ""

    def __post_init__(self):
        f = tuple(E.as_expr(v) for v in self.f)
        g = tuple(E.as_expr(v) for v in self.g)
        phi = tuple(E.as_expr(v) for v in self.phi)
        if len(f) != self.n or len(g) != self.n or len(phi) != self.p:
            raise ModelError("f and g need n entries, phi needs p entries")
        object.__setattr__(self, "f", f)
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "phi", phi)
        for attr in ("P", "Q", "k0", "mu"):
            object.__setattr__(self, attr, E.as_expr(getattr(self, attr)))
        object.__setattr__(self, "constants", dict(self.constants))
        labelled = [(f"f[{i + 1}]", v) for i, v in enumerate(f)] + [(f"g[{i + 1}]", v) for i, v in enumerate(g)]
        labelled += [(f"phi[{j + 1}]", v) for j, v in enumerate(phi)]
        labelled += [("P", self.P), ("Q", self.Q), ("k0", self.k0), ("mu", self.mu)]
        for label, e in labelled:
            _check_state_only(label, e, self.n, self.constants)
        mu = E.simplify(E.substitute(self.mu, {k: E.const(v) for k, v in self.constants.items()}))
        if mu.is_const and mu.val <= 0.0:
            raise ModelError(f"mu must be positive, got constant {mu.val:g}")

    def grad_P(self) -> list[E.Expr]:
        return [E.simplify(E.partial(self.P, s)) for s in E.state_names(self.n)]

    def LgP(self) -> E.Expr:
        """The scalar grad P . g."""
        return E.simplify(E.add(*[E.mul(dp, gi) for dp, gi in zip(self.grad_P(), self.g)]))


@dataclass(frozen=True)
class DesignConstants:
    r: float = 0.0
    alpha: float = 1.0
    omega: float = 1.0
    epsilon: float = 1.0
    gamma: tuple = (1.0,)
    delta: float = 1.0
    lam: float = 0.5
    Gamma: tuple | None = None

    def __post_init__(self):
        gamma = tuple(float(v) for v in np.ravel(self.gamma))
        object.__setattr__(self, "gamma", gamma)
        if not self.r >= 0.0:
            raise ModelError("r must be >= 0")
        for name in ("alpha", "omega", "epsilon", "delta"):
            if not getattr(self, name) > 0.0:
                raise ModelError(f"{name} must be > 0")
        if not 0.0 < self.lam < 1.0:
            raise ModelError("lambda must lie in (0, 1)")
        if any(not g > 0.0 for g in gamma):
            raise ModelError("adaptation gains gamma must be > 0")
        if self.Gamma is not None:
            G = np.asarray(self.Gamma, dtype=float)
            if G.ndim == 1:
                G = np.diag(G)
            if G.ndim != 2 or G.shape[0] != G.shape[1]:
                raise ModelError("Gamma must be a square matrix or a diagonal vector")
            if not np.allclose(G, G.T):
                raise ModelError("Gamma must be symmetric")
            try:
                np.linalg.cholesky(G)
            except np.linalg.LinAlgError:
                raise ModelError("Gamma must be positive definite") from None
            object.__setattr__(self, "Gamma", tuple(map(tuple, G.tolist())))

    def gamma_for(self, p: int) -> tuple:
        if len(self.gamma) == 1 and p != 1:
            return self.gamma * p
        if len(self.gamma) != p:
            raise ModelError(f"expected {p} adaptation gains, got {len(self.gamma)}")
        return self.gamma

    def Gamma_matrix(self, p: int) -> np.ndarray:
        if self.Gamma is None:
            return np.diag(self.gamma_for(p))
        G = np.asarray(self.Gamma, dtype=float)
        if G.shape != (p, p):
            raise ModelError(f"Gamma must be {p} x {p}")
        return G


@dataclass(frozen=True)
class TrueParameters:
    theta: tuple

    def __post_init__(self):
        object.__setattr__(self, "theta", tuple(float(v) for v in np.ravel(self.theta)))

    @property
    def norm2(self) -> float:
        return float(np.dot(self.theta, self.theta))

    def as_constants(self) -> dict:
        return {f"theta{j + 1}": v for j, v in enumerate(self.theta)}


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class GridSpec:
    """Uniform per-axis grid on [lo, hi]^n plus seeded uniform random points."""

    points_per_axis: int = 41
    lo: float = -3.0
    hi: float = 3.0
    n_random: int = 1000
    seed: int = 0
    max_grid: int = 250_000

    def points(self, n: int) -> np.ndarray:
        k = self.points_per_axis
        while k > 2 and k ** n > self.max_grid:
            k = (k - 1) // 2 + 1  # keep the grid nested so the origin stays on it
        axes = [np.linspace(self.lo, self.hi, k)] * n
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, n) if k > 0 else np.zeros((0, n))
        rng = np.random.default_rng(self.seed)
        rand = rng.uniform(self.lo, self.hi, size=(self.n_random, n))
        return np.vstack([grid, rand])


@dataclass
class Violation:
    check: str
    message: str
    witness: tuple | None = None


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)
    margins: dict = field(default_factory=dict)

    @property
    def valid(self) -> bool:
        return not self.violations

    def add(self, check, message, witness=None):
        self.violations.append(Violation(check, message, None if witness is None else tuple(float(v) for v in witness)))

    def text(self) -> str:
        if self.valid:
            lines = ["valid"]
        else:
            lines = [f"{v.check}: {v.message}" + (f" at x = {list(v.witness)}" if v.witness else "") for v in self.violations]
        lines += [f"margin {k}: {m:.6g}" for k, m in self.margins.items()]
        return "\n".join(lines)


def _grid_eval(exprs, n, pts, constants):
    f = E.lambdify(exprs, n, 0, constants=list(constants), vectorized=True)
    return f(pts.T, (), dict(constants))


def validate_strict_feedback(sys: StrictFeedbackSystem, grid: GridSpec = GridSpec()) -> ValidationReport:
    rep = ValidationReport()
    n, p = sys.n, sys.p
    for i in range(n):
        allowed = set(E.state_names(i + 1))
        items = [(f"f{i + 1}", sys.f[i]), (f"g{i + 1}", sys.g[i])]
        items += [(f"phi{i + 1},{j + 1}", sys.phi[i][j]) for j in range(p)]
        for label, e in items:
            extra = sorted(s for s in E.free_symbols(e) if _symbol_index(s)[0] == "x" and s not in allowed)
            for s in extra:
                rep.add("triangularity", f"{label} depends on {s}")
    zero = np.zeros((1, n))
    origin_items = [(f"f{i + 1}", sys.f[i]) for i in range(n)]
    origin_items += [(f"phi{i + 1},{j + 1}", sys.phi[i][j]) for i in range(n) for j in range(p)]
    vals = _grid_eval([e for _, e in origin_items], n, zero, sys.constants)
    for (label, _), v in zip(origin_items, vals):
        if abs(v[0]) >= ORIGIN_TOL:
            rep.add("origin", f"{label}(0)={v[0]:g}!=0", zero[0])
    pts = grid.points(n)
    try:
        gvals = _grid_eval(list(sys.g), n, pts, sys.constants)
    except E.ExprError as exc:
        rep.add("g-nonvanishing", f"g could not be evaluated on the grid: {exc}")
        return rep
    for i, gv in enumerate(gvals):
        a = np.abs(gv)
        k = int(np.argmin(a))
        rep.margins[f"min|g{i + 1}|"] = float(a[k])
        if a[k] < G_MIN:
            rep.add("g-nonvanishing", f"|g{i + 1}|={a[k]:.3g} < {G_MIN:g}", pts[k])
    return rep


def validate_matched(sys: MatchedSystem, grid: GridSpec = GridSpec(), rel_tol: float = 1e-9) -> ValidationReport:
    rep = ValidationReport()
    n = sys.n
    gradP = sys.grad_P()
    LfP = E.add(*[E.mul(a, b) for a, b in zip(gradP, sys.f)])
    LgP = sys.LgP()
    phi2 = E.add(*[E.mul(v, v) for v in sys.phi])
    zero = np.zeros((1, n))
    labels = [f"f[{i + 1}]" for i in range(n)] + [f"phi[{j + 1}]" for j in range(sys.p)] + ["P", "Q"]
    vals = _grid_eval(list(sys.f) + list(sys.phi) + [sys.P, sys.Q], n, zero, sys.constants)
    for label, v in zip(labels, vals):
        if abs(v[0]) >= ORIGIN_TOL:
            rep.add("origin", f"{label}(0)={v[0]:g}!=0", zero[0])
    pts = grid.points(n)
    pts = pts[np.linalg.norm(pts, axis=1) > 0.0]
    P, Q, lf, lg, k0, mu, ph = _grid_eval([sys.P, sys.Q, LfP, LgP, sys.k0, sys.mu, phi2], n, pts, sys.constants)
    for label, v in (("P", P), ("Q", Q), ("mu", mu)):
        k = int(np.argmin(v))
        rep.margins[f"min {label}"] = float(v[k])
        if v[k] <= 0.0:
            rep.add("positivity", f"{label}={v[k]:.3g} <= 0 away from the origin", pts[k])
    a1 = -Q - (lf + lg * k0)
    scale1 = 1.0 + np.abs(Q) + np.abs(lf) + np.abs(lg * k0)
    _margin(rep, "clf-decrease", a1, scale1, rel_tol, pts)
    a2 = mu * Q - ph
    scale2 = 1.0 + np.abs(mu * Q) + ph
    _margin(rep, "regressor-bound", a2, scale2, rel_tol, pts)
    return rep


def _margin(rep, label, margin, scale, rel_tol, pts):
    k = int(np.argmin(margin))
    rep.margins[label] = float(margin[k])
    bad = margin < -rel_tol * scale
    if np.any(bad):
        kb = int(np.argmin(np.where(bad, margin, np.inf)))
        rep.add(label, f"inequality fails, worst margin {margin[k]:.6g}", pts[kb])


# ---------------------------------------------------------------------------
# model files


def _expr_text(e):
    return E.to_sexpr(e)


def dump_model(sys) -> str:
    sec = kvtext.Section()
    sec["schema"] = MODEL_SCHEMA
    if sys.name:
        sec["name"] = sys.name
    sec["class"] = "strict-feedback" if isinstance(sys, StrictFeedbackSystem) else "matched"
    sec["n"] = str(sys.n)
    sec["p"] = str(sys.p)
    if sys.constants:
        sec["constants"] = kvtext.Section("constants")
        for k, v in sys.constants.items():
            sec["constants"][k] = repr(float(v))
    for i in range(sys.n):
        sec[f"f[{i + 1}]"] = _expr_text(sys.f[i])
        sec[f"g[{i + 1}]"] = _expr_text(sys.g[i])
    if isinstance(sys, StrictFeedbackSystem):
        for i in range(sys.n):
            for j in range(sys.p):
                sec[f"phi[{i + 1}][{j + 1}]"] = _expr_text(sys.phi[i][j])
    else:
        for j in range(sys.p):
            sec[f"phi[{j + 1}]"] = _expr_text(sys.phi[j])
        for attr in ("P", "Q", "k0", "mu"):
            sec[attr] = _expr_text(getattr(sys, attr))
    return kvtext.dumps(sec)


def _parse_expr(sec, key, default=None):
    if key not in sec:
        if default is not None:
            return default
        sec.need(key)
    try:
        return E.from_sexpr(sec[key])
    except E.ParseError as exc:
        raise ModelError(f"field '{key}': {exc}") from None


def model_from_section(sec: kvtext.Section):
    schema = sec.get("schema", MODEL_SCHEMA)
    if schema != MODEL_SCHEMA:
        raise ModelError(f"unsupported schema {schema!r}, expected {MODEL_SCHEMA}")
    n, p = sec.get_int("n"), sec.get_int("p")
    consts = {k: float(v) for k, v in sec.section("constants", required=False).items()}
    kind = sec.get("class", "strict-feedback")
    f = [_parse_expr(sec, f"f[{i + 1}]") for i in range(n)]
    g = [_parse_expr(sec, f"g[{i + 1}]") for i in range(n)]
    name = sec.get("name", "")
    if kind == "strict-feedback":
        phi = [[_parse_expr(sec, f"phi[{i + 1}][{j + 1}]", E.ZERO) for j in range(p)] for i in range(n)]
        return StrictFeedbackSystem(n, p, f, g, phi, consts, name)
    if kind == "matched":
        phi = [_parse_expr(sec, f"phi[{j + 1}]", E.ZERO) for j in range(p)]
        return MatchedSystem(n, p, f, g, phi, *(_parse_expr(sec, k) for k in ("P", "Q", "k0", "mu")), constants=consts, name=name)
    raise ModelError(f"unknown model class {kind!r}")


def load_model(path):
    return model_from_section(kvtext.load(path))


def loads_model(text: str):
    return model_from_section(kvtext.loads(text))
