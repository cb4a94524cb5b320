"""Command line driver: ``hho-plate run --config <path> [overrides]``.

Config files are flat ``key = value`` text with ``#`` comments. Command line
flags override file values. Exit codes: 0 success, 2 configuration error,
1 solver failure.
"""
from __future__ import annotations

import argparse
import math
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .estimate import ConvergenceHistory, StepState, adaptive_eigen, adaptive_source
from .local import DofLayout, ReconstructionError
from .mesh import MeshError, build_initial
from .system import AssemblyError, EigenSolverError, SPDError, leb_alpha_coefficient

MODES = ("source_uniform", "source_adaptive", "eigen_adaptive", "manufactured")
DOMAINS = ("lshape", "unit_square")
LSHAPE_LAMBDA1 = 418.9735


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class RunConfig:
    mode: str = "source_adaptive"
    domain: str = "lshape"
    k: int = 0
    ell: int | None = None  # None means k + 2
    sigma: float = 0.4086
    theta: float = 0.5
    eig_index: int = 1
    max_ndof: int = 10000
    output_dir: str = "output"
    seed: int = 0
    uniform_bisections: int = 2
    record_timing: bool = False
    reference_lambda: float | None = None

    @property
    def resolved_ell(self) -> int:
        return self.k + 2 if self.ell is None else self.ell

    @property
    def layout(self) -> DofLayout:
        return DofLayout(self.k, self.resolved_ell)


def _parse_bool(s: str) -> bool:
    t = s.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {s!r}")


def _parse_optional(conv):
    def parse(s: str):
        return None if s.strip().lower() in ("auto", "none", "") else conv(s)

    return parse


_PARSERS = {
    "mode": str,
    "domain": str,
    "k": int,
    "ell": _parse_optional(int),
    "sigma": float,
    "theta": float,
    "eig_index": int,
    "max_ndof": int,
    "output_dir": str,
    "seed": int,
    "uniform_bisections": int,
    "record_timing": _parse_bool,
    "reference_lambda": _parse_optional(float),
}


def _convert(key: str, raw) -> object:
    if key not in _PARSERS:
        raise ConfigError(key, "unknown key")
    if not isinstance(raw, str):
        return raw
    try:
        return _PARSERS[key](raw.strip())
    except ValueError as exc:
        raise ConfigError(key, f"type mismatch: {exc}") from None


def validate(cfg: RunConfig) -> RunConfig:
    """Check every constraint; raises ConfigError naming the first violated field."""
    if cfg.mode not in MODES:
        raise ConfigError("mode", f"must be one of {', '.join(MODES)}, got {cfg.mode!r}")
    if cfg.domain not in DOMAINS:
        raise ConfigError("domain", f"must be one of {', '.join(DOMAINS)}, got {cfg.domain!r}")
    if not 0 <= cfg.k <= 4:
        raise ConfigError("k", f"must lie in 0..4, got {cfg.k}")
    if cfg.ell is not None and cfg.ell < max(cfg.k - 2, 0):
        raise ConfigError("ell", f"must be >= max(k - 2, 0) = {max(cfg.k - 2, 0)}, got {cfg.ell}")
    if not (cfg.sigma > 0 and math.isfinite(cfg.sigma)):
        raise ConfigError("sigma", f"must be positive, got {cfg.sigma}")
    if not 0 < cfg.theta <= 1:
        raise ConfigError("theta", f"must lie in (0, 1], got {cfg.theta}")
    if cfg.eig_index < 1:
        raise ConfigError("eig_index", f"must be >= 1, got {cfg.eig_index}")
    if cfg.max_ndof < 1:
        raise ConfigError("max_ndof", f"must be >= 1, got {cfg.max_ndof}")
    if cfg.uniform_bisections < 1:
        raise ConfigError("uniform_bisections", f"must be >= 1, got {cfg.uniform_bisections}")
    if cfg.reference_lambda is not None and not cfg.reference_lambda > 0:
        raise ConfigError("reference_lambda", f"must be positive, got {cfg.reference_lambda}")
    if cfg.mode == "eigen_adaptive" and cfg.resolved_ell != cfg.k + 2:
        raise ConfigError("ell", "the eigenvalue problem requires ell = k + 2")
    if cfg.mode == "manufactured" and cfg.domain != "unit_square":
        raise ConfigError("domain", "the manufactured solution is clamped on the unit square only")
    return cfg


def parse_config(path: str | Path | None = None, overrides: dict | None = None) -> RunConfig:
    """Read a key=value file (optional) and apply ``overrides`` on top.

    Override values may be strings (parsed like file values) or typed values.
    """
    values: dict = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError("config", f"file not found: {p}")
        for lineno, line in enumerate(p.read_text().splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError("config", f"line {lineno}: expected key=value, got {line!r}")
            key, raw = (s.strip() for s in line.split("=", 1))
            values[key] = _convert(key, raw)
    for key, raw in (overrides or {}).items():
        if raw is not None:
            values[key] = _convert(key, raw)
    return validate(RunConfig(**values))


# -- manufactured solution sin^2(pi x) sin^2(pi y) ------------------------------
def _s(t, d=0):
    pi = math.pi
    if d == 0:
        return np.sin(pi * t) ** 2
    if d == 1:
        return pi * np.sin(2 * pi * t)
    if d == 2:
        return 2 * pi**2 * np.cos(2 * pi * t)
    if d == 4:
        return -8 * pi**4 * np.cos(2 * pi * t)
    raise ValueError(d)


def manufactured_u(p):
    return _s(p[..., 0]) * _s(p[..., 1])


def manufactured_grad(p):
    x, y = p[..., 0], p[..., 1]
    return np.stack([_s(x, 1) * _s(y), _s(x) * _s(y, 1)], axis=-1)


def manufactured_hessian(p):
    x, y = p[..., 0], p[..., 1]
    xy = _s(x, 1) * _s(y, 1)
    return np.stack([np.stack([_s(x, 2) * _s(y), xy], -1), np.stack([xy, _s(x) * _s(y, 2)], -1)], -2)


def manufactured_f(p):
    x, y = p[..., 0], p[..., 1]
    return _s(x, 4) * _s(y) + 2 * _s(x, 2) * _s(y, 2) + _s(x) * _s(y, 4)


def constant_one(p):
    return np.ones(p.shape[:-1])


# -- driver ----------------------------------------------------------------------
def tail_rate(values, ndof, decades: float = 1.0) -> float:
    """Least-squares slope of -log(values) against log(ndof) over the final ``decades``."""
    v = np.asarray(values, dtype=float)
    n = np.asarray(ndof, dtype=float)
    sel = (n >= n[-1] / 10**decades) & np.isfinite(v) & (v > 0)
    if sel.sum() < 2:
        return float("nan")
    return float(-np.polyfit(np.log(n[sel]), np.log(v[sel]), 1)[0])


def execute(cfg: RunConfig) -> ConvergenceHistory:
    """Run the configured experiment and write its artifacts to ``cfg.output_dir``."""
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    mesh = build_initial(cfg.domain)
    snap = {"ndof": 0}

    def snapshot(state: StepState):
        nd = state.system.n_dofs
        if state.step == 0 or nd >= 2 * snap["ndof"]:
            state.mesh.save_ascii(out / f"mesh_{state.step}.txt")
            snap["ndof"] = nd

    common = dict(theta=cfg.theta, max_ndof=cfg.max_ndof, uniform_bisections=cfg.uniform_bisections,
                  record_timing=cfg.record_timing, callback=snapshot)
    if cfg.mode == "eigen_adaptive":
        hist = adaptive_eigen(mesh, cfg.layout, sigma=cfg.sigma, index=cfg.eig_index, **common)
    elif cfg.mode == "manufactured":
        hist = adaptive_source(mesh, cfg.layout, manufactured_f, adaptive=False,
                               exact=(manufactured_u, manufactured_hessian), **common)
    else:
        hist = adaptive_source(mesh, cfg.layout, constant_one,
                               adaptive=cfg.mode == "source_adaptive", **common)
    (out / "history.csv").write_text(hist.to_csv())
    (out / "estimator.csv").write_text(hist.components_csv())
    (out / "summary.txt").write_text(summary(cfg, hist))
    return hist


def _num(v) -> str:
    return repr(float(v))


def summary(cfg: RunConfig, hist: ConvergenceHistory) -> str:
    ndof = hist.column("ndof")
    lines = [f"{k} = {'auto' if v is None else v}" for k, v in asdict(cfg).items()]
    lines.append(f"steps = {len(hist)}")
    lines.append(f"final_ndof = {int(ndof[-1])}")
    lines.append(f"final_hmax = {_num(hist.rows[-1]['hmax'])}")
    cols = ["eta", "energy_err", "l2_err"]
    for c in cols:
        v = hist.column(c)
        if np.all(np.isfinite(v)):
            lines.append(f"final_{c} = {_num(v[-1])}")
            if len(v) > 1:
                lines.append(f"eoc_{c}_ndof_last = {_num(hist.eoc(c, 'ndof')[-1])}")
                lines.append(f"eoc_{c}_h_last = {_num(hist.eoc(c, 'h')[-1])}")
                lines.append(f"eoc_{c}_ndof_tail_fit = {_num(tail_rate(v, ndof))}")
    if cfg.mode == "eigen_adaptive":
        lam, bound = hist.column("lambda_h"), hist.column("leb")
        alpha = cfg.sigma * leb_alpha_coefficient(2)
        beta = hist.rows[-1]["hmax"] ** 4 / math.pi**4
        lines += [f"final_lambda_h = {_num(lam[-1])}", f"final_leb = {_num(bound[-1])}",
                  f"alpha = {_num(alpha)}", f"beta = {_num(beta)}"]
        ref = cfg.reference_lambda
        if ref is None and cfg.domain == "lshape" and cfg.eig_index == 1:
            ref = LSHAPE_LAMBDA1
        if ref is not None:
            gap = ref - bound
            lines.append(f"reference_lambda = {_num(ref)}")
            if len(gap) > 1 and np.all(gap > 0):
                lines.append(f"eoc_gap_ndof_last = {_num(float(np.log(gap[-2] / gap[-1]) / np.log(ndof[-1] / ndof[-2])))}")
                lines.append(f"eoc_gap_ndof_tail_fit = {_num(tail_rate(gap, ndof))}")
    return "\n".join(lines) + "\n"


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hho-plate", description=__doc__.splitlines()[0])
    sub = ap.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run an experiment")
    run.add_argument("--config", help="key=value configuration file")
    for f in fields(RunConfig):
        run.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None)
    run.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                     help="generic override, may be repeated")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    overrides = {}
    for item in args.set:
        if "=" not in item:
            print(f"config error: --set expects KEY=VALUE, got {item!r}", file=sys.stderr)
            return 2
        key, val = item.split("=", 1)
        overrides[key.strip()] = val
    for f in fields(RunConfig):
        if getattr(args, f.name) is not None:
            overrides[f.name] = getattr(args, f.name)
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    try:
        hist = execute(cfg)
    except (SPDError, EigenSolverError, ReconstructionError, AssemblyError, MeshError,
            np.linalg.LinAlgError) as exc:
        print(f"solver failure ({type(exc).__name__}): {exc}", file=sys.stderr)
        return 1
    print(f"wrote {len(hist)} steps to {cfg.output_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
