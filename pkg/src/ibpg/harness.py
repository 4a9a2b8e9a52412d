"""Experiment runner for the entropic QAP relaxation.

Subcommands: ``solve`` (one run), ``sweep`` (solvers x tolerance
exponents), ``compare`` (two traces at matched Sinkhorn budgets),
``plotdata`` (series files and an SVG chart) and ``reference`` (compute
and cache ``F*``).

Configuration is a flat ``key = value`` file; every key can be overridden
by a flag with the same name (underscores become dashes).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import tempfile
import time
from dataclasses import dataclass, fields, replace
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .qap import (InstanceError, QapProblem, ReferenceSolveError, build_relaxation, load_instance,
                  problem_definition, reference_solve)
from .schedules import ScheduleError, ThetaSchedule, ToleranceSchedule
from .solvers import (Budget, RunTrace, SolverAbort, check_ibpg_bounds, check_vibpg_bound,
                      ibpg_run, vibpg_run)
from .transport_oracle import SinkhornOracle, round_to_polytope

log = logging.getLogger("ibpg")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INSTANCE = 3
EXIT_SOLVER = 4
EXIT_BOUND = 5

OUT_DIR_ENV = "IBPG_OUT_DIR"
CHECKPOINTS = (1_000, 10_000, 100_000, 500_000)
STAGNATION_LEVEL = 1e-6
PLOT_OUTER_CAP = 20_000


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    instance: str = ""
    solver: str = "ibpg"
    p: float = 1.1
    alpha: float = 5.0
    gamma: float = 2.0
    tau: float = 1.0
    outer_budget: int | None = None
    inner_budget: int | None = 500_000
    wall_seconds: float | None = None
    warm_start: bool = False
    check_every: int = 10
    seed: int = 0
    st: str = "lap"
    out_dir: str = ""
    reference: str = "compute"
    reference_tol: float = 1e-9
    check_bounds: bool = True

    def validate(self) -> "ExperimentConfig":
        if not self.instance:
            raise ConfigError("instance is required")
        if self.solver not in ("ibpg", "vibpg"):
            raise ConfigError(f"solver must be ibpg or vibpg, got {self.solver!r}")
        if not self.p > 0:
            raise ConfigError(f"p must be positive, got {self.p}")
        for name in ("outer_budget", "inner_budget", "wall_seconds"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")
        if self.outer_budget is None and self.inner_budget is None and self.wall_seconds is None:
            raise ConfigError("at least one budget is required")
        if self.check_every < 1:
            raise ConfigError("check_every must be >= 1")
        if self.st not in ("lap", "zero"):
            raise ConfigError(f"st must be lap or zero, got {self.st!r}")
        return self

    @property
    def label(self) -> str:
        return f"{Path(self.instance).stem}_{self.solver}_p{self.p:g}"


def _convert(field_type, raw: str, key: str):
    text = str(raw).strip()
    t = str(field_type)
    if "None" in t and text.lower() in ("none", ""):
        return None
    try:
        if t.startswith("bool"):
            if text.lower() in ("1", "true", "yes", "on"):
                return True
            if text.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if t.startswith("int"):
            return int(float(text))
        if t.startswith("float"):
            return float(text)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}") from None
    return text


_FIELDS = {f.name: f.type for f in fields(ExperimentConfig)}


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value")
        key, val = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in _FIELDS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        out[key] = val
    return out


def make_config(values: dict) -> ExperimentConfig:
    kw = {k: _convert(_FIELDS[k], v, k) if isinstance(v, str) else v for k, v in values.items()}
    return ExperimentConfig(**kw)


def default_out_dir() -> str:
    return os.environ.get(OUT_DIR_ENV, "ibpg_out")


# ---------------------------------------------------------------------------
# reference cache


def _instance_hash(path: Path, st: str, tol: float) -> str:
    h = hashlib.sha256(path.read_bytes())
    h.update(f"|st={st}|tol={tol!r}".encode())
    return h.hexdigest()


def cache_path(instance_path) -> Path:
    p = Path(instance_path)
    return p.with_name(p.stem + ".ref.json")


def _atomic_write(path: Path, text: str) -> None:
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def get_reference(cfg: ExperimentConfig, problem: QapProblem) -> tuple[np.ndarray, float, str]:
    """Return ``(x_star, F_star, provenance)``.

    ``reference = compute`` reuses ``<instance>.ref.json`` when its hash
    matches the instance bytes and settings, otherwise solves and writes it.
    Any other value is read as the path of such a JSON file.
    """
    inst_path = Path(cfg.instance)
    if cfg.reference != "compute":
        with open(cfg.reference) as fh:
            data = json.load(fh)
        return np.array(data["x_star"]), float(data["F_star"]), f"file:{cfg.reference}"
    digest = _instance_hash(inst_path, cfg.st, cfg.reference_tol)
    cp = cache_path(inst_path)
    if cp.exists():
        try:
            data = json.loads(cp.read_text())
            if data.get("hash") == digest:
                return np.array(data["x_star"]), float(data["F_star"]), "cache"
        except (OSError, ValueError, KeyError):
            log.warning("ignoring unreadable reference cache %s", cp)
    res = reference_solve(problem, tol=cfg.reference_tol)
    data = {"hash": digest, "F_star": res.F_star, "residual": res.residual,
            "iterations": res.iterations, "x_star": res.x_star.tolist()}
    try:
        _atomic_write(cp, json.dumps(data))
    except OSError as exc:
        log.warning("could not write reference cache %s: %s", cp, exc)
    return res.x_star, res.F_star, "computed"


# ---------------------------------------------------------------------------
# runs


@dataclass
class RunResult:
    trace: RunTrace
    summary: dict
    csv_path: Path | None = None
    summary_path: Path | None = None


def nfval_at(trace: RunTrace, budget: float) -> float:
    """``nfval`` at a cumulative inner count, interpolating linearly between rows.

    Before the first row the first value is used, after the last row the
    last value is held.
    """
    x = trace.column("cum_inner_iters")
    y = trace.column("nfval")
    if x.size == 0:
        return math.nan
    return float(np.interp(budget, x, y))


def summarize(trace: RunTrace, bound_flags: dict, elapsed: float) -> dict:
    recs = trace.records
    final = recs[-1].nfval if recs else math.nan
    cum = trace.column("cum_inner_iters")
    checkpoints = {}
    for cp in CHECKPOINTS:
        # last row whose cumulative count does not exceed the checkpoint
        idx = int(np.searchsorted(cum, cp, side="right")) - 1
        checkpoints[str(cp)] = recs[idx].nfval if idx >= 0 else None
    return {
        "final_nfval": final,
        "nfval_at_inner": checkpoints,
        "outer_iterations": len(recs),
        "inner_iterations": int(cum[-1]) if cum.size else 0,
        "stop_reason": trace.stop_reason,
        "stagnated": bool(not final < STAGNATION_LEVEL),
        "bounds": bound_flags,
        "elapsed_seconds": elapsed,
    }


def run_experiment(cfg: ExperimentConfig, write: bool = True) -> RunResult:
    cfg.validate()
    inst = load_instance(cfg.instance)
    qp = build_relaxation(inst, st=cfg.st, seed=cfg.seed)
    prob = problem_definition(qp)
    x_star, F_star, provenance = get_reference(cfg, qp)
    n = inst.n
    budget = Budget(cfg.outer_budget, cfg.inner_budget, cfg.wall_seconds)
    tol = ToleranceSchedule.power(cfg.p)
    oracle = SinkhornOracle(check_every=cfg.check_every, warm_start=cfg.warm_start)
    X0 = np.ones((n, n))
    start = time.perf_counter()
    if cfg.solver == "ibpg":
        trace = ibpg_run(prob, oracle, tol, X0, budget, rounding=round_to_polytope,
                         reference=(x_star, F_star))
    else:
        theta = ThetaSchedule("closed_form", cfg.gamma, cfg.alpha)
        prob = replace(prob, smoothness=replace(prob.smoothness, tau=cfg.tau, gamma=cfg.gamma))
        trace = vibpg_run(prob, oracle, theta, tol, round_to_polytope(X0), X0, budget,
                          reference=(x_star, F_star))
    elapsed = time.perf_counter() - start
    flags = {}
    if cfg.check_bounds and trace.records:
        if cfg.solver == "ibpg":
            rep = check_ibpg_bounds(trace, prob, x_star, F_star)
            flags = {"average": rep.average.holds(), "last": rep.last.holds(),
                     "max_violation": rep.max_violation}
        else:
            rep = check_vibpg_bound(trace, prob, x_star, F_star)
            flags = {"bound": rep.bound.holds(), "prefactor": rep.prefactor_ok,
                     "max_violation": rep.bound.max_violation}
    trace.metadata.update(instance=inst.name, n=n, F_star=F_star, reference=provenance,
                          seed=cfg.seed, st=cfg.st, p=cfg.p, check_every=cfg.check_every,
                          warm_start=cfg.warm_start, power_iterations=qp.power_iterations)
    summary = summarize(trace, flags, elapsed)
    summary["config"] = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    result = RunResult(trace, summary)
    if write:
        out = Path(cfg.out_dir or default_out_dir())
        out.mkdir(parents=True, exist_ok=True)
        result.csv_path = out / f"{cfg.label}.csv"
        result.summary_path = out / f"{cfg.label}.summary.json"
        trace.write(result.csv_path, out / f"{cfg.label}.meta.json")
        result.summary_path.write_text(json.dumps(summary, indent=2, sort_keys=True))
    return result


def bounds_ok(summary: dict) -> bool:
    return all(v for k, v in summary["bounds"].items() if k != "max_violation")


def compare_runs(trace_a: RunTrace, trace_b: RunTrace, budgets=(100_000,)) -> dict:
    """``nfval`` of two runs at matched cumulative inner counts and the winner at each."""
    for key in ("instance", "F_star"):
        va, vb = trace_a.metadata.get(key), trace_b.metadata.get(key)
        if va is not None and vb is not None and va != vb:
            raise ValueError(f"traces disagree on {key}: {va!r} vs {vb!r}")
    rows = []
    for b in budgets:
        a, c = nfval_at(trace_a, b), nfval_at(trace_b, b)
        winner = "tie" if a == c else ("a" if a < c else "b")
        rows.append({"budget": b, "nfval_a": a, "nfval_b": c, "winner": winner})
    return {"a": trace_a.solver, "b": trace_b.solver, "points": rows,
            "stagnated_a": bool(not trace_a.records[-1].nfval < STAGNATION_LEVEL),
            "stagnated_b": bool(not trace_b.records[-1].nfval < STAGNATION_LEVEL)}


# ---------------------------------------------------------------------------
# plot data


def emit_plot_data(traces: dict[str, RunTrace], out_dir, svg: bool = True) -> list[Path]:
    """Write ``<label>_out.csv`` (out#, nfval) and ``<label>_sink.csv`` (sink#, nfval) per trace.

    The outer-iteration series stops at 2e4 iterations. With ``svg`` two
    charts (``nfval_out.svg``, ``nfval_sink.svg``) are added.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    series = {"out": {}, "sink": {}}
    for label, tr in traces.items():
        k = tr.column("k") + 1
        sink = tr.column("cum_inner_iters")
        y = tr.column("nfval")
        keep = k <= PLOT_OUTER_CAP
        for kind, x, mask in (("out", k, keep), ("sink", sink, np.ones_like(keep))):
            path = out / f"{label}_{kind}.csv"
            col = "out#" if kind == "out" else "sink#"
            with open(path, "w") as fh:
                fh.write(f"{col},nfval\n")
                for xi, yi in zip(x[mask], y[mask]):
                    fh.write(f"{int(xi)},{yi:.17g}\n")
            written.append(path)
            series[kind][label] = (x[mask], y[mask])
    if svg:
        for kind, data in series.items():
            path = out / f"nfval_{kind}.svg"
            path.write_text(svg_chart(data, "out#" if kind == "out" else "sink#", "nfval"))
            written.append(path)
    return written


_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf")


def svg_chart(series: dict, xlabel: str, ylabel: str, width: int = 640, height: int = 420) -> str:
    """Line chart with linear x axis and log10 y axis."""
    pad = 50
    xs, ys = [], []
    for x, y in series.values():
        ok = np.isfinite(y) & (y > 0)
        xs.append(x[ok])
        ys.append(np.log10(y[ok]))
    allx = np.concatenate(xs) if xs else np.zeros(1)
    ally = np.concatenate(ys) if ys else np.zeros(1)
    if allx.size == 0:
        allx, ally = np.zeros(1), np.zeros(1)
    x0, x1 = float(allx.min()), float(allx.max())
    y0, y1 = math.floor(float(ally.min())), math.ceil(float(ally.max()))
    x1 = x1 if x1 > x0 else x0 + 1
    y1 = y1 if y1 > y0 else y0 + 1

    def px(v):
        return pad + (v - x0) / (x1 - x0) * (width - 2 * pad)

    def py(v):
        return height - pad - (v - y0) / (y1 - y0) * (height - 2 * pad)

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 10}" text-anchor="middle">{escape(xlabel)}</text>',
             f'<text x="12" y="{height / 2}" transform="rotate(-90 12 {height / 2})" '
             f'text-anchor="middle">{escape(ylabel)} (log10)</text>']
    for e in range(int(y0), int(y1) + 1):
        parts.append(f'<text x="{pad - 5}" y="{py(e):.1f}" text-anchor="end" font-size="10">1e{e}</text>')
    for i, (label, x, y) in enumerate(zip(series, xs, ys)):
        color = _COLORS[i % len(_COLORS)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y))
        parts.append(f'<polyline fill="none" stroke="{color}" points="{pts}"/>')
        parts.append(f'<text x="{width - pad + 2}" y="{pad + 14 * i}" font-size="10" '
                     f'fill="{color}">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


# ---------------------------------------------------------------------------
# CLI


def _add_config_flags(ap: argparse.ArgumentParser) -> None:
    ap.add_argument("--config", help="key = value configuration file")
    for name in _FIELDS:
        ap.add_argument("--" + name.replace("_", "-"), dest=name, default=None)


def _config_from_args(args) -> ExperimentConfig:
    values = {}
    if args.config:
        try:
            values.update(parse_config_text(Path(args.config).read_text()))
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
    for name in _FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    return make_config(values)


def _solve_one(cfg: ExperimentConfig) -> int:
    res = run_experiment(cfg)
    s = res.summary
    log.info("%s: final nfval %.3e after %d outer / %d inner iterations (%s)", cfg.label,
             s["final_nfval"], s["outer_iterations"], s["inner_iterations"], s["stop_reason"])
    print(res.csv_path)
    if s["bounds"] and not bounds_ok(s):
        log.error("%s: bound check failed: %s", cfg.label, s["bounds"])
        return EXIT_BOUND
    return EXIT_OK


def cmd_solve(args) -> int:
    return _solve_one(_config_from_args(args))


def cmd_sweep(args) -> int:
    base = _config_from_args(args)
    code = EXIT_OK
    for solver in args.solvers.split(","):
        for p in args.ps.split(","):
            cfg = replace(base, solver=solver.strip(), p=float(p))
            code = max(code, _solve_one(cfg))
    return code


def cmd_compare(args) -> int:
    a = RunTrace.read(args.trace_a, _meta_for(args.trace_a))
    b = RunTrace.read(args.trace_b, _meta_for(args.trace_b))
    budgets = [float(x) for x in args.budgets.split(",")]
    rep = compare_runs(a, b, budgets)
    print(json.dumps(rep, indent=2))
    return EXIT_OK


def _meta_for(csv_path) -> str | None:
    p = Path(csv_path)
    meta = p.with_name(p.stem + ".meta.json")
    return str(meta) if meta.exists() else None


def cmd_plotdata(args) -> int:
    traces = {Path(t).stem: RunTrace.read(t, _meta_for(t)) for t in args.traces}
    for path in emit_plot_data(traces, args.out or default_out_dir(), svg=not args.no_svg):
        print(path)
    return EXIT_OK


def cmd_reference(args) -> int:
    cfg = _config_from_args(args)
    if not cfg.instance:
        raise ConfigError("instance is required")
    inst = load_instance(cfg.instance)
    qp = build_relaxation(inst, st=cfg.st, seed=cfg.seed)
    _, F_star, prov = get_reference(cfg, qp)
    print(json.dumps({"instance": inst.name, "F_star": F_star, "source": prov,
                      "cache": str(cache_path(cfg.instance))}))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="ibpg", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)
    sp = sub.add_parser("solve", help="run one experiment")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_solve)
    sp = sub.add_parser("sweep", help="run every solver for every p")
    _add_config_flags(sp)
    sp.add_argument("--solvers", default="ibpg,vibpg")
    sp.add_argument("--ps", default="3.1,2.1,1.1,0.1")
    sp.set_defaults(func=cmd_sweep)
    sp = sub.add_parser("compare", help="compare two traces at matched Sinkhorn budgets")
    sp.add_argument("trace_a")
    sp.add_argument("trace_b")
    sp.add_argument("--budgets", default="100000")
    sp.set_defaults(func=cmd_compare)
    sp = sub.add_parser("plotdata", help="write plot series and SVG charts")
    sp.add_argument("traces", nargs="+")
    sp.add_argument("--out")
    sp.add_argument("--no-svg", action="store_true")
    sp.set_defaults(func=cmd_plotdata)
    sp = sub.add_parser("reference", help="compute and cache F*")
    _add_config_flags(sp)
    sp.set_defaults(func=cmd_reference)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ScheduleError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (InstanceError, FileNotFoundError) as exc:
        log.error("instance error: %s", exc)
        return EXIT_INSTANCE
    except (SolverAbort, ReferenceSolveError, FloatingPointError) as exc:
        log.error("solver aborted: %s", exc)
        return EXIT_SOLVER


if __name__ == "__main__":
    sys.exit(main())
