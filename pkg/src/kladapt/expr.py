"""Immutable symbolic expressions over state, estimate and constant symbols.

Nodes are hash-consed: structurally equal expressions are the same Python
object, so equality is identity and shared subtrees are stored once.  The
node set is deliberately small (constants, symbols, n-ary sums and products,
non-negative integer powers, quotients, square roots and a fixed-order
Gauss-Legendre integral over a bound variable on [0, 1]); it covers every
smooth map that controller synthesis produces.

Symbol naming: ``x1..xn`` are states, ``th1..thp`` are parameter estimates,
anything else is a named constant bound at evaluation time.
"""

from __future__ import annotations

import hashlib
import math
import re
import sys
import threading
import weakref
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

NEAR_SINGULAR = 1e-12
DEFAULT_QUAD_ORDER = 16

_NAME_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")


class ExprError(Exception):
    pass


class UnboundSymbol(ExprError):
    pass


class NearSingularDenominator(ExprError, ArithmeticError):
    pass


class DomainError(ExprError, ArithmeticError):
    pass


class NonFiniteValue(ExprError, ArithmeticError):
    pass


class NonvanishingAtOrigin(ExprError, ValueError):
    pass


class DimensionMismatch(ExprError, ValueError):
    pass


class ParseError(ExprError, ValueError):
    pass


# synthesized expressions nest deeper than the default recursion limit allows
if sys.getrecursionlimit() < 20000:
    sys.setrecursionlimit(20000)


# ---------------------------------------------------------------------------
# nodes

CONST, SYM, ADD, MUL, POW, DIV, SQRT, QUAD = "c", "s", "+", "*", "^", "/", "sqrt", "quad"

_TABLE: "weakref.WeakValueDictionary[bytes, Expr]" = weakref.WeakValueDictionary()
_LOCK = threading.Lock()


class Expr:
    """A node of an expression DAG.  Build with the helpers, never directly."""

    __slots__ = ("op", "args", "val", "key", "note", "_free", "_level", "_fn", "__weakref__")

    def __init__(self):  # pragma: no cover - guarded
        raise TypeError("use const()/sym()/... to build expressions")

    # arithmetic sugar builds raw (unsimplified) nodes
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return add(self, mul(-1.0, other))

    def __rsub__(self, other):
        return add(other, mul(-1.0, self))

    def __neg__(self):
        return mul(-1.0, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __pow__(self, k):
        return power(self, k)

    def __repr__(self):
        text = to_sexpr(self, share=False) if node_count(self) < 200 else f"<{node_count(self, unique=True)} nodes>"
        return f"Expr({text})"

    __str__ = __repr__

    def __reduce__(self):
        return (from_sexpr, (to_sexpr(self),))

    @property
    def is_const(self) -> bool:
        return self.op == CONST

    @property
    def is_zero(self) -> bool:
        return self.op == CONST and self.val == 0.0

    @property
    def is_one(self) -> bool:
        return self.op == CONST and self.val == 1.0


def _make(op: str, args: tuple, val) -> Expr:
    h = hashlib.blake2b(digest_size=16)
    h.update(op.encode())
    h.update(b"|")
    h.update(repr(val).encode())
    for a in args:
        h.update(a.key)
    key = h.digest()
    with _LOCK:
        node = _TABLE.get(key)
        if node is None:
            node = object.__new__(Expr)
            node.op = op
            node.args = args
            node.val = val
            node.key = key
            node.note = None
            node._free = None
            node._level = None
            node._fn = None
            _TABLE[key] = node
    return node


def as_expr(v) -> Expr:
    if isinstance(v, Expr):
        return v
    if isinstance(v, (int, float, np.integer, np.floating)):
        return const(float(v))
    raise TypeError(f"cannot convert {type(v).__name__} to Expr")


def const(v: float) -> Expr:
    v = float(v)
    if v == 0.0:
        v = 0.0  # fold -0.0
    return _make(CONST, (), v)


ZERO = const(0.0)
ONE = const(1.0)


def sym(name: str) -> Expr:
    if not _NAME_RE.match(name):
        raise ValueError(f"invalid symbol name {name!r}")
    return _make(SYM, (), name)


def x(i: int) -> Expr:
    """State symbol x_i (1-based)."""
    return sym(f"x{i}")


def th(j: int) -> Expr:
    """Estimate symbol th_j (1-based)."""
    return sym(f"th{j}")


def state_names(n: int) -> list[str]:
    return [f"x{i}" for i in range(1, n + 1)]


def estimate_names(p: int) -> list[str]:
    return [f"th{j}" for j in range(1, p + 1)]


def add(*terms) -> Expr:
    terms = tuple(as_expr(t) for t in terms)
    if not terms:
        return ZERO
    if len(terms) == 1:
        return terms[0]
    return _make(ADD, terms, None)


def mul(*factors) -> Expr:
    factors = tuple(as_expr(f) for f in factors)
    if not factors:
        return ONE
    if len(factors) == 1:
        return factors[0]
    return _make(MUL, factors, None)


def power(base, k: int) -> Expr:
    if isinstance(k, float) and k.is_integer():
        k = int(k)
    if not isinstance(k, (int, np.integer)) or k < 0:
        raise ValueError("only non-negative integer exponents are supported")
    return _make(POW, (as_expr(base),), int(k))


def div(num, den, note: str | None = None) -> Expr:
    node = _make(DIV, (as_expr(num), as_expr(den)), None)
    if note and node.note is None:
        node.note = note
    return node


def sqrt(arg, note: str | None = None) -> Expr:
    node = _make(SQRT, (as_expr(arg),), None)
    if note and node.note is None:
        node.note = note
    return node


def quad(integrand, var: str, order: int = DEFAULT_QUAD_ORDER) -> Expr:
    """Gauss-Legendre approximation of the integral of `integrand` over var in [0, 1]."""
    if not _NAME_RE.match(var):
        raise ValueError(f"invalid bound variable {var!r}")
    return _make(QUAD, (as_expr(integrand),), (var, int(order)))


def fresh_bound_name(integrand: Expr) -> str:
    """Bound-variable name one level above every quadrature nested inside."""
    return f"_l{quad_level(integrand) + 1}"


def integrate01(build: Callable[[Expr], Expr], order: int = DEFAULT_QUAD_ORDER) -> Expr:
    """quad() with an automatically chosen bound variable.

    `build` receives the bound symbol and returns the integrand.
    """
    probe = build(sym("_lprobe"))
    name = fresh_bound_name(probe)
    return quad(build(sym(name)), name, order)


def sum_exprs(items: Iterable) -> Expr:
    return add(*list(items))


# ---------------------------------------------------------------------------
# structural queries


def free_symbols(e: Expr) -> frozenset:
    if e._free is not None:
        return e._free
    if e.op == SYM:
        out = frozenset((e.val,))
    elif e.op == CONST:
        out = frozenset()
    elif e.op == QUAD:
        out = free_symbols(e.args[0]) - {e.val[0]}
    else:
        out = frozenset().union(*(free_symbols(a) for a in e.args))
    e._free = out
    return out


def quad_level(e: Expr) -> int:
    if e._level is not None:
        return e._level
    if e.op == QUAD:
        lvl = 1 + quad_level(e.args[0])
    elif e.args:
        lvl = max(quad_level(a) for a in e.args)
    else:
        lvl = 0
    e._level = lvl
    return lvl


def depends_on(e: Expr, name: str) -> bool:
    return name in free_symbols(e)


def _postorder(roots: Sequence[Expr], stop: Callable[[Expr], bool] | None = None, into_quad: bool = True) -> list[Expr]:
    seen = set()
    order: list[Expr] = []
    for root in roots:
        if id(root) in seen:
            continue
        stack = [(root, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            if stop is not None and stop(node):
                continue
            if node.op == QUAD and not into_quad:
                continue
            for a in reversed(node.args):
                if id(a) not in seen:
                    stack.append((a, False))
    return order


def node_count(e: Expr, unique: bool = False) -> int:
    """Tree size (every occurrence counted) or DAG size with ``unique=True``."""
    order = _postorder([e])
    if unique:
        return len(order)
    size: dict[int, int] = {}
    for node in order:
        size[id(node)] = 1 + sum(size[id(a)] for a in node.args)
    return size[id(e)]


# ---------------------------------------------------------------------------
# evaluation


@dataclass(frozen=True)
class Point:
    """Evaluation context (x, theta_hat, named constants)."""

    x: tuple = ()
    theta_hat: tuple = ()
    constants: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "x", tuple(float(v) for v in np.ravel(self.x)))
        object.__setattr__(self, "theta_hat", tuple(float(v) for v in np.ravel(self.theta_hat)))

    def check_dims(self, n: int, p: int) -> None:
        if len(self.x) != n or len(self.theta_hat) != p:
            raise DimensionMismatch(f"point has dims ({len(self.x)}, {len(self.theta_hat)}), expected ({n}, {p})")

    def env(self) -> dict:
        env = {f"x{i + 1}": v for i, v in enumerate(self.x)}
        env.update({f"th{j + 1}": v for j, v in enumerate(self.theta_hat)})
        env.update({k: float(v) for k, v in self.constants.items()})
        return env


_GL_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def gauss_legendre01(order: int) -> tuple[np.ndarray, np.ndarray]:
    """Nodes and weights of the Gauss-Legendre rule mapped to [0, 1]."""
    if order not in _GL_CACHE:
        nodes, weights = np.polynomial.legendre.leggauss(order)
        _GL_CACHE[order] = ((nodes + 1.0) / 2.0, weights / 2.0)
    return _GL_CACHE[order]


def _check_den(v):
    if np.any(np.abs(v) < NEAR_SINGULAR):
        raise NearSingularDenominator(f"|denominator| < {NEAR_SINGULAR:g}")
    return v


def _qsum(weights, values) -> float:
    return float(np.sum(weights * values))


def _check_sqrt(v):
    if np.any(np.asarray(v) < 0.0):
        raise DomainError("square root of a negative value")
    return np.sqrt(v) if isinstance(v, np.ndarray) else math.sqrt(v)


def evaluate(e: Expr, pt: Point | Mapping[str, float]) -> float:
    """Reference tree-walking evaluation at a single point.

    Raises UnboundSymbol, NearSingularDenominator, DomainError or
    NonFiniteValue; never returns NaN or Inf.
    """
    env = pt.env() if isinstance(pt, Point) else {k: float(v) for k, v in pt.items()}
    try:
        val = _eval_node(e, env, {})
    except OverflowError:
        raise NonFiniteValue("evaluation overflowed") from None
    if not math.isfinite(val):
        raise NonFiniteValue("evaluation produced a non-finite value")
    return float(val)


def _eval_node(e: Expr, env: dict, memo: dict) -> float:
    got = memo.get(id(e))
    if got is not None:
        return got
    op = e.op
    if op == CONST:
        out = e.val
    elif op == SYM:
        try:
            out = env[e.val]
        except KeyError:
            raise UnboundSymbol(f"symbol {e.val!r} is not bound") from None
    elif op == ADD:
        out = math.fsum(_eval_node(a, env, memo) for a in e.args)
    elif op == MUL:
        out = 1.0
        for a in e.args:
            out *= _eval_node(a, env, memo)
    elif op == POW:
        out = _eval_node(e.args[0], env, memo) ** e.val
    elif op == DIV:
        den = _eval_node(e.args[1], env, memo)
        _check_den(den)
        out = _eval_node(e.args[0], env, memo) / den
    elif op == SQRT:
        out = _check_sqrt(_eval_node(e.args[0], env, memo))
    elif op == QUAD:
        var, order = e.val
        nodes, weights = gauss_legendre01(order)
        # values that depend on the rebound variable must not leak in or out
        tainted = _dependent_ids(e.args[0], var)
        base = {k: v for k, v in memo.items() if k not in tainted}
        total = 0.0
        for lam, wt in zip(nodes, weights):
            inner_env = dict(env)
            inner_env[var] = float(lam)
            total += wt * _eval_node(e.args[0], inner_env, dict(base))
        out = total
    else:  # pragma: no cover
        raise ExprError(f"unknown op {op}")
    if isinstance(out, float) and not math.isfinite(out):
        raise NonFiniteValue("evaluation produced a non-finite value")
    memo[id(e)] = out
    return out


def _dependent_ids(e: Expr, var: str) -> set:
    return {id(n) for n in _postorder([e]) if var in free_symbols(n)}


# ---------------------------------------------------------------------------
# compilation to Python source


def _pyname(name: str) -> str:
    return "s_" + name


class _Codegen:
    def __init__(self, scalar: bool = True):
        self.scalar = scalar
        self.lines: list[str] = []
        self.counter = 0
        self.quad_orders: set[int] = set()

    def fresh(self, prefix="t") -> str:
        self.counter += 1
        return f"{prefix}{self.counter}"

    def block(self, roots: Sequence[Expr], known: dict, symvars: dict, indent: str) -> list[str]:
        """Emit assignments for roots; returns the names holding their values."""

        def stop(node):
            return id(node) in known

        order = _postorder(roots, stop=stop, into_quad=False)
        for node in order:
            if id(node) in known:
                continue
            op = node.op
            if op == CONST:
                known[id(node)] = repr(node.val)
                continue
            if op == SYM:
                known[id(node)] = symvars.get(node.val, _pyname(node.val))
                continue
            a = [known[id(c)] for c in node.args] if op != QUAD else None
            if op == ADD:
                rhs = " + ".join(a)
            elif op == MUL:
                rhs = " * ".join(a)
            elif op == POW:
                k = node.val
                rhs = "1.0" if k == 0 else (a[0] if k == 1 else (f"{a[0]} * {a[0]}" if k == 2 else f"{a[0]} ** {k}"))
            elif op == DIV:
                rhs = f"{a[0]} / _den({a[1]})"
            elif op == SQRT:
                rhs = f"_sqrt({a[0]})"
            elif op == QUAD:
                rhs = self.emit_quad(node, known, symvars, indent)
            name = self.fresh()
            self.lines.append(f"{indent}{name} = {rhs}")
            known[id(node)] = name
        return [known[id(r)] for r in roots]

    def emit_quad(self, node: Expr, known: dict, symvars: dict, indent: str) -> str:
        var, order = node.val
        self.quad_orders.add(order)
        integrand = node.args[0]
        # hoist the parts of the integrand that do not see the bound variable
        frontier = []
        seen = set()
        stack = [integrand]
        while stack:
            n = stack.pop()
            if id(n) in seen:
                continue
            seen.add(id(n))
            if var not in free_symbols(n):
                frontier.append(n)
            elif n.op != QUAD:
                stack.extend(n.args)
        self.block(frontier, known, symvars, indent)
        inner_known = {k: v for k, v in known.items() if k not in _dependent_ids(integrand, var)}
        inner_sym = dict(symvars)
        acc = self.fresh("q")
        if self.scalar and quad_level(integrand) == 0:
            # all nodes at once: the bound variable becomes an array
            inner_sym[var] = f"_GLX{order}"
            (val,) = self.block([integrand], inner_known, inner_sym, indent)
            self.lines.append(f"{indent}{acc} = _qsum(_GLW{order}, {val})")
            return acc
        lamv = self.fresh("lam")
        wv = self.fresh("w")
        self.lines.append(f"{indent}{acc} = 0.0")
        self.lines.append(f"{indent}for {lamv}, {wv} in _GL{order}:")
        inner_sym[var] = lamv
        (val,) = self.block([integrand], inner_known, inner_sym, indent + "    ")
        self.lines.append(f"{indent}    {acc} = {acc} + {wv} * {val}")
        return acc


def lambdify(exprs: Sequence[Expr], n: int, p: int, constants: Sequence[str] = (), vectorized: bool = False):
    """Compile expressions to ``f(x, th, c) -> tuple`` of values.

    ``x`` and ``th`` are indexable (scalars per entry, or arrays when
    ``vectorized``); ``c`` maps constant names to values.  Symbols outside
    x1..xn, th1..thp and ``constants`` raise UnboundSymbol at compile time.
    """
    exprs = [as_expr(e) for e in exprs]
    allowed = set(state_names(n)) | set(estimate_names(p)) | set(constants)
    used = set().union(*(free_symbols(e) for e in exprs)) if exprs else set()
    missing = used - allowed
    if missing:
        raise UnboundSymbol(f"unbound symbols {sorted(missing)}")
    gen = _Codegen(scalar=not vectorized)
    header = ["def _f(x, th, c):"]
    xs, ths = set(state_names(n)), set(estimate_names(p))
    for name in sorted(used):
        if name in xs:
            header.append(f"    {_pyname(name)} = x[{int(name[1:]) - 1}]")
        elif name in ths:
            header.append(f"    {_pyname(name)} = th[{int(name[2:]) - 1}]")
        else:
            header.append(f"    {_pyname(name)} = c[{name!r}]")
    outs = gen.block(exprs, {}, {}, "    ")
    body = header + gen.lines + [f"    return ({', '.join(outs)}{',' if len(outs) == 1 else ''})"]
    src = "\n".join(body)
    ns: dict = {"_den": _check_den, "_sqrt": _check_sqrt}
    for order in gen.quad_orders:
        nodes, weights = gauss_legendre01(order)
        ns[f"_GL{order}"] = tuple(zip(nodes.tolist(), weights.tolist()))
        ns[f"_GLX{order}"] = nodes.copy()
        ns[f"_GLW{order}"] = weights.copy()
    ns["_qsum"] = _qsum
    exec(compile(src, "<kladapt-lambdify>", "exec"), ns)
    raw = ns["_f"]

    if vectorized:
        def f(xv, thv, c=None):
            out = raw(xv, thv, c or {})
            res = []
            for v in out:
                v = np.broadcast_to(np.asarray(v, dtype=float), np.shape(xv[0]) if len(xv) else np.shape(v))
                if not np.all(np.isfinite(v)):
                    raise NonFiniteValue("evaluation produced a non-finite value")
                res.append(np.array(v))
            return tuple(res)
    else:
        def f(xv, thv, c=None):
            try:
                out = raw(xv, thv, c or {})
            except OverflowError:
                raise NonFiniteValue("evaluation overflowed") from None
            for v in out:
                if not math.isfinite(v):
                    raise NonFiniteValue("evaluation produced a non-finite value")
            return out
    f.source = src
    return f


# ---------------------------------------------------------------------------
# differentiation


def partial(e: Expr, name: str | Expr) -> Expr:
    """Exact symbolic partial derivative with respect to a symbol."""
    if isinstance(name, Expr):
        if name.op != SYM:
            raise ValueError("can only differentiate with respect to a symbol")
        name = name.val
    return _partial(e, name, {})


def _partial(e: Expr, name: str, memo: dict) -> Expr:
    got = memo.get(id(e))
    if got is not None:
        return got
    if name not in free_symbols(e):
        out = ZERO
    else:
        op = e.op
        if op == SYM:
            out = ONE
        elif op == ADD:
            parts = [d for d in (_partial(a, name, memo) for a in e.args) if not d.is_zero]
            out = add(*parts) if parts else ZERO
        elif op == MUL:
            terms = []
            for i, a in enumerate(e.args):
                d = _partial(a, name, memo)
                if d.is_zero:
                    continue
                others = e.args[:i] + e.args[i + 1:]
                terms.append(mul(d, *others))
            out = add(*terms) if terms else ZERO
        elif op == POW:
            k = e.val
            base = e.args[0]
            d = _partial(base, name, memo)
            out = ZERO if k == 0 else mul(const(k), power(base, k - 1), d)
        elif op == DIV:
            num, den = e.args
            dn = _partial(num, name, memo)
            dd = _partial(den, name, memo)
            note = e.note or "denominator of a quotient"
            if dd.is_zero:
                out = div(dn, den, note)
            else:
                out = div(add(mul(dn, den), mul(-1.0, num, dd)), power(den, 2), note)
        elif op == SQRT:
            d = _partial(e.args[0], name, memo)
            out = div(d, mul(2.0, e), e.note or "square root of a positive quantity")
        elif op == QUAD:
            var, order = e.val
            if var == name:
                out = ZERO
            else:
                out = quad(_partial(e.args[0], name, memo), var, order)
        else:  # pragma: no cover
            raise ExprError(f"unknown op {op}")
    memo[id(e)] = out
    return out


def gradient(e: Expr, names: Sequence[str]) -> list[Expr]:
    return [partial(e, nm) for nm in names]


# ---------------------------------------------------------------------------
# substitution


def substitute(e: Expr, bindings: Mapping[str | Expr, Expr]) -> Expr:
    """Simultaneous substitution of symbols by expressions."""
    b = {}
    for k, v in bindings.items():
        if isinstance(k, Expr):
            if k.op != SYM:
                raise DimensionMismatch("substitution keys must be symbols")
            k = k.val
        b[k] = as_expr(v)
    if not b:
        return e
    return _subst(e, b, {})


def _subst(e: Expr, b: dict, memo: dict) -> Expr:
    got = memo.get(id(e))
    if got is not None:
        return got
    fs = free_symbols(e)
    if not any(k in fs for k in b):
        out = e
    elif e.op == SYM:
        out = b[e.val]
    elif e.op == QUAD:
        var, order = e.val
        inner = {k: v for k, v in b.items() if k != var}
        out = quad(_subst(e.args[0], inner, {}), var, order) if inner else e
    else:
        new = tuple(_subst(a, b, memo) for a in e.args)
        if e.op == ADD:
            out = add(*new)
        elif e.op == MUL:
            out = mul(*new)
        elif e.op == POW:
            out = power(new[0], e.val)
        elif e.op == DIV:
            out = div(new[0], new[1], e.note)
        elif e.op == SQRT:
            out = sqrt(new[0], e.note)
        else:  # pragma: no cover
            raise ExprError(f"unknown op {e.op}")
    memo[id(e)] = out
    return out


# ---------------------------------------------------------------------------
# simplification


def _order_key(e: Expr):
    return (e.op != CONST, e.op != SYM, e.val if e.op == SYM else "", e.key)


def _split_coef(term: Expr) -> tuple[float, Expr]:
    if term.op == CONST:
        return term.val, ONE
    if term.op == MUL and term.args[0].op == CONST:
        rest = term.args[1:]
        return term.args[0].val, rest[0] if len(rest) == 1 else _make(MUL, rest, None)
    return 1.0, term


def simplify(e: Expr) -> Expr:
    """Evaluation-equivalent rewrite.

    Folds constants, drops zero/one units, flattens nested sums and products,
    merges repeated factors into powers and collects identical monomials.
    Products are never distributed over sums.
    """
    return _simp(e, {})


def _simp(e: Expr, memo: dict) -> Expr:
    got = memo.get(id(e))
    if got is not None:
        return got
    op = e.op
    if op in (CONST, SYM):
        out = e
    elif op == ADD:
        out = _simp_add([_simp(a, memo) for a in e.args])
    elif op == MUL:
        out = _simp_mul([_simp(a, memo) for a in e.args])
    elif op == POW:
        out = _simp_pow(_simp(e.args[0], memo), e.val)
    elif op == DIV:
        num, den = _simp(e.args[0], memo), _simp(e.args[1], memo)
        if num.is_zero:
            out = ZERO
        elif den.is_one:
            out = num
        elif den.op == CONST and abs(den.val) >= NEAR_SINGULAR:
            out = _simp_mul([const(1.0 / den.val), num])
        elif num is den:
            out = ONE
        else:
            out = div(num, den, e.note)
    elif op == SQRT:
        a = _simp(e.args[0], memo)
        if a.op == CONST and a.val >= 0.0:
            out = const(math.sqrt(a.val))
        else:
            out = sqrt(a, e.note)
    elif op == QUAD:
        var, order = e.val
        inner = _simp(e.args[0], memo)
        out = inner if var not in free_symbols(inner) else quad(inner, var, order)
    else:  # pragma: no cover
        raise ExprError(f"unknown op {op}")
    memo[id(e)] = out
    return out


def _simp_add(terms: list[Expr]) -> Expr:
    flat: list[tuple] = []
    for t in terms:
        c, mono = _split_coef(t)
        if mono.op == ADD:
            # numeric coefficients distribute over a sum so opposite copies cancel
            flat.extend(_split_coef(a) if c == 1.0 else (c * _split_coef(a)[0], _split_coef(a)[1]) for a in mono.args)
        else:
            flat.append((c, mono))
    total = 0.0
    coefs: dict[int, list] = {}
    for c, mono in flat:
        if mono is ONE:
            total += c
            continue
        slot = coefs.get(id(mono))
        if slot is None:
            coefs[id(mono)] = [c, mono]
        else:
            slot[0] += c
    out = []
    for c, mono in coefs.values():
        if c == 0.0:
            continue
        if c == 1.0:
            out.append(mono)
        elif mono.op == MUL:
            out.append(_make(MUL, (const(c),) + mono.args, None))
        else:
            out.append(_make(MUL, (const(c), mono), None))
    if total != 0.0:
        out.append(const(total))
    if not out:
        return ZERO
    if len(out) == 1:
        return out[0]
    out.sort(key=_order_key)
    return _make(ADD, tuple(out), None)


def _simp_mul(factors: list[Expr]) -> Expr:
    flat: list[Expr] = []
    for f in factors:
        if f.op == MUL:
            flat.extend(f.args)
        else:
            flat.append(f)
    c = 1.0
    powers: dict[int, list] = {}
    for f in flat:
        if f.op == CONST:
            c *= f.val
            continue
        base, k = (f.args[0], f.val) if f.op == POW else (f, 1)
        slot = powers.get(id(base))
        if slot is None:
            powers[id(base)] = [base, k]
        else:
            slot[1] += k
    if c == 0.0:
        return ZERO
    out = []
    extra = []
    for base, k in powers.values():
        if k == 0:
            continue
        if base.op == SQRT and k >= 2:
            extra.append(_simp_pow(base.args[0], k // 2))
            if k % 2:
                out.append(base)
            continue
        out.append(base if k == 1 else _make(POW, (base,), k))
    if extra:
        return _simp_mul([const(c)] + out + extra)
    out.sort(key=_order_key)
    if c != 1.0:
        out.insert(0, const(c))
    if not out:
        return const(c)
    if len(out) == 1:
        return out[0]
    return _make(MUL, tuple(out), None)


def _simp_pow(base: Expr, k: int) -> Expr:
    if k == 0:
        return ONE
    if k == 1:
        return base
    if base.op == CONST:
        return const(base.val ** k)
    if base.op == POW:
        return _simp_pow(base.args[0], base.val * k)
    if base.op == MUL:
        return _simp_mul([_simp_pow(f, k) for f in base.args])
    if base.op == SQRT and k % 2 == 0:
        return _simp_pow(base.args[0], k // 2)
    return _make(POW, (base,), k)


# ---------------------------------------------------------------------------
# polynomial structure in one variable


def poly_coeffs(e: Expr, var: str) -> list[Expr] | None:
    """Coefficients c_m (var-free Exprs) with e = sum c_m var^m, or None."""
    return _poly(e, var, {})


def _poly(e: Expr, var: str, memo: dict):
    if id(e) in memo:
        return memo[id(e)]
    if var not in free_symbols(e):
        out = [e]
    elif e.op == SYM:
        out = [ZERO, ONE]
    elif e.op == ADD:
        parts = [_poly(a, var, memo) for a in e.args]
        if any(pp is None for pp in parts):
            out = None
        else:
            size = max(len(pp) for pp in parts)
            out = [add(*[pp[m] for pp in parts if m < len(pp)]) for m in range(size)]
    elif e.op == MUL:
        out = [ONE]
        for a in e.args:
            pa = _poly(a, var, memo)
            if pa is None:
                out = None
                break
            out = _poly_mul(out, pa)
    elif e.op == POW:
        pb = _poly(e.args[0], var, memo)
        if pb is None:
            out = None
        else:
            out = [ONE]
            for _ in range(e.val):
                out = _poly_mul(out, pb)
    elif e.op == DIV and var not in free_symbols(e.args[1]):
        pn = _poly(e.args[0], var, memo)
        out = None if pn is None else [div(c, e.args[1], e.note) for c in pn]
    else:
        out = None
    if out is not None:
        out = [simplify(c) for c in out]
    memo[id(e)] = out
    return out


def _poly_mul(a: list[Expr], b: list[Expr]) -> list[Expr]:
    res: list[list[Expr]] = [[] for _ in range(len(a) + len(b) - 1)]
    for i, ca in enumerate(a):
        if ca.is_zero:
            continue
        for j, cb in enumerate(b):
            if cb.is_zero:
                continue
            res[i + j].append(mul(ca, cb))
    return [simplify(add(*r)) if r else ZERO for r in res]


# ---------------------------------------------------------------------------
# growth bound |h(x, th)| <= rho(x, th) |x|


def ray_rho_expr(h: Expr, state: Sequence[str], quad_order: int = DEFAULT_QUAD_ORDER, exact_polynomial: bool = True) -> Expr:
    """rho = sqrt(1 + sum_i int_0^1 (dh/dx_i (lam x, th))^2 dlam) as an Expr.

    When the integrand is a polynomial in lam the integral is taken in
    closed form; otherwise a Gauss-Legendre node of order `quad_order`
    is emitted.
    """
    h = as_expr(h)
    grads = [simplify(partial(h, s)) for s in state]
    probe = add(*[mul(g, g) for g in grads])
    lam_name = fresh_bound_name(probe)
    lam = sym(lam_name)
    scaled = {s: mul(lam, sym(s)) for s in state}
    integrand = simplify(add(*[power(substitute(g, scaled), 2) for g in grads]))
    if exact_polynomial:
        coeffs = poly_coeffs(integrand, lam_name)
        if coeffs is not None:
            integral = simplify(add(*[mul(1.0 / (m + 1), c) for m, c in enumerate(coeffs)]))
            return simplify(sqrt(add(1.0, integral), "1 + squared gradient integral"))
    return sqrt(add(1.0, quad(integrand, lam_name, quad_order)), "1 + squared gradient integral")


def check_vanishes_at_origin(h: Expr, n: int, p: int, samples: int = 64, seed: int = 0, scale: float = 3.0, constants: Mapping[str, float] | None = None) -> None:
    rng = np.random.default_rng(seed)
    f = lambdify([h], n, p, constants=list((constants or {}).keys()))
    for _ in range(samples):
        thv = rng.uniform(-scale, scale, size=p)
        (val,) = f(np.zeros(n), thv, dict(constants or {}))
        if abs(val) >= 1e-12:
            raise NonvanishingAtOrigin(f"h(0, th) = {val:.3g} != 0 at th = {np.round(thv, 4).tolist()}")


def ray_quadrature_rho(h: Expr, n: int, quad_order: int = DEFAULT_QUAD_ORDER, p: int | None = None, constants: Mapping[str, float] | None = None):
    """Numeric callable rho(x, th) >= 1 with |h(x, th)| <= rho(x, th) |x|.

    The integral is evaluated with Gauss-Legendre quadrature of the given
    order (exact for polynomial h once the order reaches deg(h)).
    """
    h = as_expr(h)
    if p is None:
        used = [s for s in free_symbols(h) if s.startswith("th") and s[2:].isdigit()]
        p = max((int(s[2:]) for s in used), default=0)
    check_vanishes_at_origin(h, n, p, constants=constants)
    expr = ray_rho_expr(h, state_names(n), quad_order, exact_polynomial=False)
    f = lambdify([expr], n, p, constants=list((constants or {}).keys()))
    consts = dict(constants or {})

    def rho(xv, thv=()):
        xv = np.atleast_1d(np.asarray(xv, dtype=float))
        thv = np.atleast_1d(np.asarray(thv, dtype=float)) if p else np.zeros(0)
        return f(xv, thv, consts)[0]

    rho.expr = expr
    return rho


# ---------------------------------------------------------------------------
# S-expression text form


def _fmt_num(v: float) -> str:
    if v.is_integer() and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def to_sexpr(e: Expr, share: bool | None = None) -> str:
    """Prefix form, e.g. ``(+ (* 2 (^ x1 2)) th1)``.

    Shared subtrees are factored into a ``(let ((%1 ...) ...) body)``
    wrapper when ``share`` is true (default: only when it pays off).
    """
    order = _postorder([e])
    refs: dict[int, int] = {}
    for node in order:
        for a in node.args:
            refs[id(a)] = refs.get(id(a), 0) + 1
    if share is None:
        share = node_count(e) > 4 * len(order)
    names: dict[int, str] = {}
    lets: list[str] = []
    text: dict[int, str] = {}
    for node in order:
        op = node.op
        if op == CONST:
            s = _fmt_num(node.val)
        elif op == SYM:
            s = node.val
        elif op == POW:
            s = f"(^ {text[id(node.args[0])]} {node.val})"
        elif op == QUAD:
            s = f"(quad {node.val[0]} {node.val[1]} {text[id(node.args[0])]})"
        else:
            s = f"({op} {' '.join(text[id(a)] for a in node.args)})"
        if share and node.args and refs.get(id(node), 0) > 1 and node is not e:
            name = f"%{len(lets) + 1}"
            lets.append(f"({name} {s})")
            s = name
            names[id(node)] = name
        text[id(node)] = s
    body = text[id(e)]
    if lets:
        return f"(let ({' '.join(lets)}) {body})"
    return body


_TOKEN_RE = re.compile(r"\(|\)|[^\s()]+")


def from_sexpr(text: str) -> Expr:
    tokens = _TOKEN_RE.findall(text)
    if not tokens:
        raise ParseError("empty expression")
    pos = 0

    def parse():
        nonlocal pos
        if pos >= len(tokens):
            raise ParseError("unexpected end of input")
        tok = tokens[pos]
        pos += 1
        if tok == "(":
            items = []
            while True:
                if pos >= len(tokens):
                    raise ParseError("unbalanced parentheses")
                if tokens[pos] == ")":
                    pos += 1
                    return items
                items.append(parse())
        if tok == ")":
            raise ParseError("unexpected ')'")
        return tok

    tree = parse()
    if pos != len(tokens):
        raise ParseError("trailing tokens after expression")
    return _build(tree, {})


def _build(t, lets: dict) -> Expr:
    if isinstance(t, str):
        if t in lets:
            return lets[t]
        try:
            return const(float(t))
        except ValueError:
            pass
        if not _NAME_RE.match(t):
            raise ParseError(f"bad token {t!r}")
        return sym(t)
    if not t:
        raise ParseError("empty list")
    head, rest = t[0], t[1:]
    if head == "let":
        if len(rest) != 2 or not isinstance(rest[0], list):
            raise ParseError("malformed let")
        scope = dict(lets)
        for binding in rest[0]:
            if not isinstance(binding, list) or len(binding) != 2 or not isinstance(binding[0], str):
                raise ParseError("malformed let binding")
            scope[binding[0]] = _build(binding[1], scope)
        return _build(rest[1], scope)
    if head == "+":
        return add(*[_build(a, lets) for a in rest])
    if head == "*":
        return mul(*[_build(a, lets) for a in rest])
    if head == "-":
        args = [_build(a, lets) for a in rest]
        if len(args) == 1:
            return mul(-1.0, args[0])
        return add(args[0], *[mul(-1.0, a) for a in args[1:]])
    if head == "^":
        if len(rest) != 2 or not isinstance(rest[1], str):
            raise ParseError("(^ base k) needs an integer exponent")
        try:
            k = int(rest[1])
        except ValueError:
            raise ParseError(f"bad exponent {rest[1]!r}") from None
        if k < 0:
            raise ParseError("exponents must be non-negative integers")
        return power(_build(rest[0], lets), k)
    if head == "/":
        if len(rest) != 2:
            raise ParseError("(/ a b) takes two arguments")
        return div(_build(rest[0], lets), _build(rest[1], lets))
    if head == "sqrt":
        if len(rest) != 1:
            raise ParseError("(sqrt a) takes one argument")
        return sqrt(_build(rest[0], lets))
    if head == "quad":
        if len(rest) != 3:
            raise ParseError("(quad var order body)")
        return quad(_build(rest[2], lets), rest[0], int(rest[1]))
    raise ParseError(f"unknown operator {head!r}")
