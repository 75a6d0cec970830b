"""Command-line entry point.

    oscillab selftest
    oscillab schedule build --depth 1 --mode relaxed --out s.json
    oscillab schedule verify s.json
    oscillab perturb --schedule s.json --out p.json
    oscillab evolve --schedule s.json --probes auto
    oscillab kam --schedule s.json --log kam.jsonl
    oscillab meta --matrix 0,1,-1,0 --state hermite:3

Settings come from ``--config file.toml`` and are overridden by flags.
Exit codes: 0 success, 1 failed check or runtime error, 2 usage error.
Errors are reported on stderr as one JSON object.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .errors import MissingRequired, OscillabError, TypeMismatch, UnknownKey

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - exercised on 3.10
    import tomli as tomllib

COMMANDS = ("selftest", "schedule", "perturb", "evolve", "kam", "meta")


class UsageError(OscillabError):
    code = "UsageError"


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class RunConfig:
    s: float = 1.0
    N: int = 4096
    L: float | None = None
    freq: str = "golden"
    tau: float = 2.0
    schedule: str | None = None
    depth: int = 1
    mode: str = "relaxed"
    profile: str = "power:0.5"
    eps: float = 30.0
    r: float = 0.05
    state: str = "hermite:0"
    dt: float = 1e-3
    probes: str = "auto"
    out: str | None = None
    csv: str = "run.csv"
    svg: str | None = "run.svg"
    log: str = "kam.jsonl"
    precision: str | None = None
    seed: int = 0
    path: str = "fast"
    max_steps: int = 20
    kam_source: str = "schedule"
    kam_majorant: float = 1e-3
    matrix: str | None = None
    workers: int = 4

    def to_json_obj(self) -> dict:
        return asdict(self)


_TYPES: dict[str, type] = {
    "s": float, "N": int, "L": float, "freq": str, "tau": float, "schedule": str, "depth": int,
    "mode": str, "profile": str, "eps": float, "r": float, "state": str, "dt": float,
    "probes": str, "out": str, "csv": str, "svg": str, "log": str, "precision": str,
    "seed": int, "path": str, "max_steps": int, "kam_source": str, "kam_majorant": float,
    "matrix": str, "workers": int,
}  # fmt: skip

_CHOICES = {
    "mode": ("relaxed", "faithful"),
    "precision": ("double", "extended"),
    "path": ("fast", "reference"),
    "kam_source": ("schedule", "random"),
}


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    want = _TYPES[key]
    if want is float:
        if isinstance(value, bool) or not isinstance(value, (int, float, str)):
            raise TypeMismatch(f"{key} must be a number", key=key, value=repr(value))
        try:
            out = float(value)
        except ValueError:
            raise TypeMismatch(f"{key} must be a number", key=key, value=value) from None
        if not math.isfinite(out):
            raise TypeMismatch(f"{key} must be finite", key=key, value=value)
        return out
    if want is int:
        if isinstance(value, bool) or isinstance(value, float) and not value.is_integer():
            raise TypeMismatch(f"{key} must be an integer", key=key, value=repr(value))
        try:
            return int(value)
        except (TypeError, ValueError):
            raise TypeMismatch(f"{key} must be an integer", key=key, value=repr(value)) from None
    if not isinstance(value, str):
        raise TypeMismatch(f"{key} must be a string", key=key, value=repr(value))
    return value


def _validate(cfg: RunConfig) -> None:
    def bad(key, why):
        raise TypeMismatch(f"{key}: {why}", key=key, value=getattr(cfg, key))

    if cfg.s < 0:
        bad("s", "s >= 0 required")
    if cfg.N < 64 or cfg.N & (cfg.N - 1):
        bad("N", "a power of two >= 64 is required")
    if cfg.L is not None:
        from .metaengine import self_dual_half_width

        if abs(cfg.L - self_dual_half_width(cfg.N)) > 1e-9 * cfg.L:
            bad("L", f"the grid is self-dual; L must equal {self_dual_half_width(cfg.N)!r} for N={cfg.N}")
    if cfg.depth < 0:
        bad("depth", "depth >= 0 required")
    for key in ("eps", "r", "dt", "tau", "kam_majorant"):
        if getattr(cfg, key) <= 0:
            bad(key, "must be positive")
    if cfg.max_steps < 1:
        bad("max_steps", "must be at least 1")
    if cfg.workers < 1:
        bad("workers", "must be at least 1")
    for key, opts in _CHOICES.items():
        v = getattr(cfg, key)
        if v is not None and v not in opts:
            bad(key, f"must be one of {list(opts)}")
    if cfg.probes != "auto":
        try:
            _parse_probes(cfg.probes)
        except ValueError as exc:
            bad("probes", str(exc))
    if cfg.matrix is not None:
        try:
            _parse_matrix(cfg.matrix)
        except ValueError as exc:
            bad("matrix", str(exc))


def load_config_file(path: str | Path) -> dict:
    """Flat TOML key/value table; keys must be RunConfig fields."""
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise TypeMismatch(f"config file is not valid TOML: {exc}", key="config") from None
    except OSError as exc:
        raise MissingRequired(f"cannot read config file {path}: {exc.strerror}", key="config") from None
    known = {f.name for f in fields(RunConfig)}
    for key in data:
        if key not in known:
            raise UnknownKey(f"unknown config key {key!r}", key=key)
    return data


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would print usage and exit
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="oscillab", description="Quasi-periodic quadratic Hamiltonians: schedules, growth probes, KAM.")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("args", nargs="*", help="sub-command and positional arguments")
    p.add_argument("--config", help="TOML file with RunConfig keys")
    for f in fields(RunConfig):
        flag = "--" + f.name.replace("_", "-")
        p.add_argument(flag, dest=f.name, default=None, metavar=f.name.upper())
    return p


def parse_config(argv: Sequence[str]) -> tuple[str, list[str], RunConfig]:
    """(command, positional args, resolved config); flags override the file."""
    ns = build_parser().parse_args(list(argv))
    values: dict[str, Any] = {}
    if ns.config:
        for k, v in load_config_file(ns.config).items():
            values[k] = _coerce(k, v)
    for f in fields(RunConfig):
        raw = getattr(ns, f.name)
        if raw is not None:
            values[f.name] = _coerce(f.name, raw)
    cfg = RunConfig(**values)
    _validate(cfg)
    return ns.command, list(ns.args), cfg


def _parse_probes(text: str) -> list:
    from mpmath import mp

    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("empty probe list")
    with mp.workdps(60):
        vals = [mp.mpf(p) for p in parts]
    if any(v < 0 for v in vals) or any(b < a for a, b in zip(vals, vals[1:])):
        raise ValueError("probes must be sorted and non-negative")
    return vals


def _parse_matrix(text: str) -> np.ndarray:
    vals = [float(v) for v in text.split(",")]
    if len(vals) != 4:
        raise ValueError("four comma-separated entries expected")
    M = np.array(vals).reshape(2, 2)
    if abs(np.linalg.det(M) - 1) > 1e-9:
        raise ValueError("determinant must be 1")
    return M


# ---------------------------------------------------------------------------
# helpers


def _frequency(cfg: RunConfig):
    from . import qpfun

    if cfg.freq == "golden":
        return qpfun.golden_frequency(tau=cfg.tau)
    head, _, arg = cfg.freq.partition(":")
    if head == "omega" and arg:
        try:
            om = [float(v) for v in arg.split(",")]
        except ValueError:
            raise TypeMismatch("freq: omega:<w1>,<w2>,... expected", key="freq", value=cfg.freq) from None
        return qpfun.fit_frequency(om, tau=cfg.tau)
    raise TypeMismatch("freq must be 'golden' or 'omega:<w1>,<w2>,...'", key="freq", value=cfg.freq)


def load_schedule(path: str | Path):
    from .akbuilder import AkSchedule

    try:
        obj = json.loads(Path(path).read_text())
    except OSError as exc:
        raise MissingRequired(f"cannot read schedule {path}: {exc.strerror}", key="schedule") from None
    return AkSchedule.from_json_obj(obj)


def _schedule(cfg: RunConfig):
    from . import akbuilder

    if cfg.schedule:
        return load_schedule(cfg.schedule)
    return akbuilder.build_schedule(
        _frequency(cfg), s=cfg.s, profile=cfg.profile, eps=cfg.eps, r=cfg.r, depth=cfg.depth, mode=cfg.mode
    )


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"{type(o).__name__} is not JSON serializable")


def _emit_json(obj, path: str | None) -> None:
    from . import io

    text = json.dumps(obj, indent=2, sort_keys=True, default=_json_default)
    if path:
        io.atomic_write_text(path, text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# commands


def cmd_selftest(args: list[str], cfg: RunConfig) -> int:
    from . import selftest

    results = selftest.run_all(seed=cfg.seed)
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    return 0 if all(ok for _, ok, _ in results) else 1


def cmd_schedule(args: list[str], cfg: RunConfig) -> int:
    from . import akbuilder, io

    if not args or args[0] not in ("build", "verify"):
        raise UsageError("schedule needs a sub-command: build or verify")
    if args[0] == "build":
        sched = _schedule(cfg)
        text = json.dumps(sched.to_json_obj(), indent=2, sort_keys=True) + "\n"
        if cfg.out:
            io.atomic_write_text(cfg.out, text)
        else:
            sys.stdout.write(text)
        rep = akbuilder.verify_schedule(sched)
        for line in rep.lines():
            print(line, file=sys.stderr)
        return 0
    if len(args) < 2 and not cfg.schedule:
        raise MissingRequired("schedule verify needs a schedule file", key="schedule")
    sched = load_schedule(args[1] if len(args) > 1 else cfg.schedule)
    rep = akbuilder.verify_schedule(sched)
    for line in rep.lines():
        print(line)
    if cfg.out:
        io.atomic_write_json(cfg.out, rep.to_json_obj())
    print("all_pass" if rep.all_passed else "FAILED")
    return 0 if rep.all_passed else 1


def cmd_perturb(args: list[str], cfg: RunConfig) -> int:
    from . import akbuilder

    sched = _schedule(cfg)
    asm = akbuilder.assemble(sched)
    obj = {
        "perturbation": asm.perturbation.to_json_obj(),
        "majorant": asm.majorant,
        "dropped_majorant": asm.dropped_majorant,
        "eps": sched.eps,
        "within_budget": asm.majorant < sched.eps,
    }
    _emit_json(obj, cfg.out)
    return 0 if obj["within_budget"] else 1


def _hermite_initial(cfg: RunConfig):
    from . import metaengine, sobolev

    head, _, arg = cfg.state.partition(":")
    if head == "hermite":
        return sobolev.basis_state(int(arg or 0))
    psi = metaengine.state_from_spec(cfg.state, cfg.N)
    return sobolev.hermite_analyze(psi, sobolev.default_nh(cfg.N))


def cmd_evolve(args: list[str], cfg: RunConfig) -> int:
    from . import akbuilder, growthlab, io, metaengine, qpfun, sl2core, sobolev

    sched = _schedule(cfg)
    probes = growthlab.auto_probes(sched) if cfg.probes == "auto" else _parse_probes(cfg.probes)
    if float(cfg.s).is_integer():
        psi0 = _hermite_initial(cfg)
    else:
        psi0 = metaengine.state_from_spec(cfg.state, cfg.N)
    run = growthlab.evolve_cocycle_lift(sched, psi0, probes, cfg.dt, cfg.s, cfg.path, cfg.workers)
    P = akbuilder.assemble_perturbation(sched, check_budget=False)
    beta = qpfun.QpSystem(sched.freq, sl2core.J, P).sup_norm_majorant()
    ups = sobolev.estimate_upsilon(cfg.s, 256)
    env = growthlab.envelope_check(run, beta, ups)
    io.atomic_write_text(cfg.csv, run.to_csv())
    if cfg.svg:
        io.atomic_write_text(cfg.svg, run.to_svg(marks=[float(t) for t in probes if t > 0]))
    report = {
        "csv": cfg.csv,
        "svg": cfg.svg,
        "envelope": env.to_json_obj(),
        "l2_drift": run.l2_drift(),
    }
    if sched.depth >= 1 and float(cfg.s).is_integer() and isinstance(psi0, sobolev.HermiteState):
        report["oscillation"] = growthlab.probe_oscillation(sched, psi0, int(cfg.s)).to_json_obj()
    _emit_json(report, cfg.out)
    ok = env.passed and run.l2_drift() <= growthlab.UNITARITY_TOL
    return 0 if ok else 1


def cmd_kam(args: list[str], cfg: RunConfig) -> int:
    from . import akbuilder, io, kamengine, qpfun, sl2core

    if cfg.kam_source == "random":
        freq = _frequency(cfg)
        rng = np.random.default_rng(cfg.seed)
        keys = [(1,) + (0,) * (freq.d - 1), (0,) * (freq.d - 1) + (1,), (1,) * freq.d]
        F = qpfun.random_trigpoly(rng, freq.d, keys, cfg.kam_majorant, cfg.r)
        system = qpfun.QpSystem(freq, sl2core.J, F)
    else:
        sched = _schedule(cfg)
        system = qpfun.QpSystem(sched.freq, sl2core.J, akbuilder.assemble_perturbation(sched))
    rep = kamengine.almost_reduce(system, max_steps=cfg.max_steps)
    io.atomic_write_text(cfg.log, "".join(json.dumps(r) + "\n" for r in rep.log))
    summary = {
        "reduced": rep.reduced,
        "steps": rep.final.l,
        "final_normF": rep.final.eps,
        "resonances": [list(s.k_res) for s in rep.snapshots if s.k_res is not None],
        "envelope_ok": rep.envelope_ok,
        "log": cfg.log,
    }
    _emit_json(summary, cfg.out)
    return 0


def cmd_meta(args: list[str], cfg: RunConfig) -> int:
    from . import metaengine, sobolev

    if cfg.matrix is None:
        raise MissingRequired("meta needs --matrix a,b,c,d", key="matrix")
    A = _parse_matrix(cfg.matrix)
    psi = metaengine.state_from_spec(cfg.state, cfg.N)
    out = metaengine.apply_meta(A, psi, cfg.path)
    if cfg.out:
        out.save(cfg.out)
    xs, ds, _ = sobolev.aux_norms(out, cfg.s)
    print(json.dumps({"l2": out.norm(), "hs": sobolev.hs_norm_grid(out, cfg.s), "xs": xs, "ds": ds}))
    return 0


_DISPATCH = {
    "selftest": cmd_selftest,
    "schedule": cmd_schedule,
    "perturb": cmd_perturb,
    "evolve": cmd_evolve,
    "kam": cmd_kam,
    "meta": cmd_meta,
}

_USAGE_ERRORS = (UsageError, UnknownKey, TypeMismatch, MissingRequired)


def run_command(cmd: str, args: list[str], cfg: RunConfig) -> int:
    if cfg.precision:
        os.environ["OSCILLAB_PRECISION"] = cfg.precision
    return _DISPATCH[cmd](args, cfg)


def _report(exc: OscillabError | Exception) -> None:
    obj = exc.to_dict() if isinstance(exc, OscillabError) else {"error": type(exc).__name__, "message": str(exc)}
    print(json.dumps(obj, default=str), file=sys.stderr)


def main(argv: Sequence[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        cmd, args, cfg = parse_config(argv)
    except _USAGE_ERRORS as exc:
        _report(exc)
        return 2
    try:
        return run_command(cmd, args, cfg)
    except _USAGE_ERRORS as exc:
        _report(exc)
        return 2
    except (OscillabError, ValueError, ArithmeticError) as exc:
        _report(exc)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
