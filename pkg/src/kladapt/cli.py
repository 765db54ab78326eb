"""Command-line front end.

Exit codes: 0 success, 1 verification failure, 2 configuration error,
3 runtime failure (integration blow-up).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from importlib import resources

from . import kvtext
from . import svg
from . import scenario as S
from .backstep import synthesize
from .matched import dump_controller
from .model import DesignConstants, ModelError, StrictFeedbackSystem, load_model, validate_strict_feedback
from .sim import IntegrationError, Trajectory
from .verify import uniformity_probe

log = logging.getLogger("kladapt")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2, 3
FIGURE_NUMBERS = range(1, 7)


class ConfigError(Exception):
    pass


def preset_path(name: str) -> str:
    return str(resources.files("kladapt") / "presets" / f"{name}.preset")


def preset_names() -> list:
    return sorted(p.name[:-7] for p in (resources.files("kladapt") / "presets").iterdir() if p.name.endswith(".preset"))


def _out(args, name: str) -> str:
    os.makedirs(args.out_dir, exist_ok=True)
    return os.path.join(args.out_dir, name)


def _load(path):
    try:
        return S.load(path)
    except (S.ScenarioError, kvtext.KVError, ModelError) as exc:
        raise ConfigError(str(exc)) from None


def _write_outputs(args, sc, results) -> list:
    written = []
    for res in results:
        for tr in res.trajectories:
            if isinstance(tr, Trajectory):
                path = _out(args, f"{sc.name}_{tr.label}.csv")
                tr.to_csv(path)
                written.append(path)
    if sc.plot != "none":
        xl, yl = S.axes(sc.plot)
        path = _out(args, f"{sc.name}.svg")
        svg.write(path, S.plot_series(sc, results), xlabel=xl, ylabel=yl, title=sc.name,
                  log_y=sc.log_y)
        written.append(path)
    return written


def _report_blowups(results) -> int:
    code = EXIT_OK
    for res in results:
        for k, tr in enumerate(res.trajectories):
            if isinstance(tr, IntegrationError):
                t_fail = f"{tr.t_fail:.6g}" if tr.t_fail is not None else "?"
                print(f"run {S.run_label(res.run, k)}: integration failed at t = {t_fail}: {tr}", file=sys.stderr)
                code = EXIT_RUNTIME
    return code


def _execute(args, sc):
    return S.execute(sc, args.rtol, args.atol)


def cmd_run(args) -> int:
    sc = _load(args.scenario)
    results = _execute(args, sc)
    for path in _write_outputs(args, sc, results):
        print(path)
    return _report_blowups(results)


def cmd_verify(args) -> int:
    sc = _load(args.scenario)
    results = _execute(args, sc)
    code = _report_blowups(results)
    if code:
        return code
    try:
        rep = S.verify(sc, results, args.tol, args.seed)
    except S.ScenarioError as exc:
        raise ConfigError(str(exc)) from None
    text = rep.text()
    print(text, end="")
    with open(_out(args, f"{sc.name}_report.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    if args.dump_margins:
        rep.margins_csv(_out(args, f"{sc.name}_margins.csv"))
    return EXIT_OK if rep.passed else EXIT_VERIFY


def _design_constants(args, p: int) -> DesignConstants:
    kw = {}
    if args.constants:
        try:
            sec = kvtext.load(args.constants)
        except (OSError, kvtext.KVError) as exc:
            raise ConfigError(f"constants file: {exc}") from None
        sec = sec.section("constants", required=False) if "constants" in sec else sec
        for k in ("r", "alpha", "omega", "epsilon", "delta", "lam"):
            if k in sec:
                kw[k] = sec.get_float(k)
        if "gamma" in sec:
            kw["gamma"] = tuple(sec.get_floats("gamma"))
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects name=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            kw[k.strip()] = tuple(float(t) for t in v.split(",")) if k.strip() == "gamma" else float(v)
        except ValueError:
            raise ConfigError(f"--set {k}: not a number") from None
    try:
        consts = DesignConstants(**kw)
        consts.gamma_for(p)
    except TypeError as exc:
        raise ConfigError(f"unknown design constant: {exc}") from None
    return consts


def cmd_synth(args) -> int:
    if not os.path.exists(args.model):
        raise ConfigError(f"model file {args.model!r} not found")
    try:
        sys_ = load_model(args.model)
    except (kvtext.KVError, ModelError) as exc:
        raise ConfigError(f"model file: {exc}") from None
    if not isinstance(sys_, StrictFeedbackSystem):
        raise ConfigError("synth needs a strict-feedback model")
    rep = validate_strict_feedback(sys_)
    if not rep.valid:
        raise ConfigError("model is not in parametric strict-feedback form:\n" + rep.text())
    consts = _design_constants(args, sys_.p)
    ctrl, trace = synthesize(sys_, consts, args.quad_order, validate=False)
    stem = os.path.splitext(os.path.basename(args.model))[0]
    out = args.output or _out(args, f"{stem}.controller")
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(dump_controller(ctrl))
    tpath = os.path.splitext(out)[0] + ".trace.txt"
    with open(tpath, "w", encoding="utf-8") as fh:
        fh.write(trace.text())
    print(out)
    print(tpath)
    for w in trace.warnings:
        log.warning(w)
    return EXIT_OK


def _figure_list(which: str) -> list:
    if which == "all":
        return list(FIGURE_NUMBERS)
    try:
        nums = [int(v) for v in which.split(",")]
    except ValueError:
        raise ConfigError(f"figure must be 'all' or numbers 1..6, got {which!r}") from None
    bad = [v for v in nums if v not in FIGURE_NUMBERS]
    if bad:
        raise ConfigError(f"figure number must be 1..6, got {bad[0]}")
    return nums


def cmd_figures(args) -> int:
    code = EXIT_OK
    for num in _figure_list(args.which):
        sc = _load(preset_path(f"fig{num}"))
        results = _execute(args, sc)
        for path in _write_outputs(args, sc, results):
            print(path)
        code = max(code, _report_blowups(results))
    return code


def cmd_sweep(args) -> int:
    sc = _load(args.scenario)
    try:
        eps = [float(v) for v in args.eps.split(",")]
    except ValueError:
        raise ConfigError(f"--eps must be comma-separated numbers, got {args.eps!r}") from None
    if args.count < 8:
        raise ConfigError("--count must be at least 8")
    rows = ["run,eps,sample,hitting_time"]
    for run in sc.runs:
        loop = sc.closed_loop(run)
        probes = uniformity_probe(loop, args.radius, eps, args.count, args.t_end or run.t_end,
                                  run.theta_hat0 if loop.p else (), seed=args.seed, rtol=args.rtol or sc.rtol,
                                  atol=args.atol or sc.atol, n_report=sc.n_report)
        for pr in probes:
            T = "not attained" if pr.T_max is None else f"{pr.T_max:.6g}"
            print(f"{run.name}: R = {pr.R:g}, eps = {pr.eps:g}, T_max = {T}")
            for k, h in enumerate(pr.samples):
                rows.append(f"{run.name},{pr.eps:.17g},{k},{'' if h is None else repr(h)}")
    path = _out(args, f"{sc.name}_sweep.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(rows) + "\n")
    print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--rtol", type=float, default=None, help="relative tolerance (default from scenario)")
    common.add_argument("--atol", type=float, default=None, help="absolute tolerance (default from scenario)")
    common.add_argument("--seed", type=int, default=0)
    common.add_argument("--out-dir", default=".", help="directory for written artifacts")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="kladapt", description="Adaptive controller synthesis, simulation and checks.")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", parents=[common], help="integrate a scenario, write CSV and SVG")
    r.add_argument("scenario")
    r.set_defaults(func=cmd_run)

    v = sub.add_parser("verify", parents=[common], help="run a scenario and its checks")
    v.add_argument("scenario")
    v.add_argument("--tol", type=float, default=None, help="margin tolerance (default from scenario)")
    v.add_argument("--dump-margins", action="store_true", help="write per-sample margins as CSV")
    v.set_defaults(func=cmd_verify)

    s = sub.add_parser("synth", parents=[common], help="backstepping synthesis from a model file")
    s.add_argument("model")
    s.add_argument("--constants", help="file with design constants")
    s.add_argument("--set", action="append", metavar="NAME=VALUE", help="override a design constant")
    s.add_argument("-o", "--output", help="controller file to write")
    s.add_argument("--quad-order", type=int, default=16)
    s.set_defaults(func=cmd_synth)

    f = sub.add_parser("figures", parents=[common], help="regenerate the Moore-Greitzer figure datasets")
    f.add_argument("which", help="'all' or a figure number 1..6")
    f.set_defaults(func=cmd_figures)

    w = sub.add_parser("sweep", parents=[common], help="hitting-time probe over a sphere of initial states")
    w.add_argument("scenario")
    w.add_argument("--radius", type=float, default=1.0)
    w.add_argument("--count", type=int, default=32)
    w.add_argument("--eps", default="0.01")
    w.add_argument("--t-end", type=float, default=None)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (S.ScenarioError, kvtext.KVError, ModelError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except IntegrationError as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
