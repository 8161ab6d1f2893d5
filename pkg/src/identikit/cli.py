"""``identikit`` command line: analyze -> family -> verify -> report.

Every command reads the model file (a path or the name of a bundled model)
and writes its artifacts into ``--out``. JSON artifacts are written with
sorted keys and carry no timestamps, so reruns with the same seed are
byte-identical.

Exit codes: 0 success, 2 usage/parse/missing-file error, 3 closure not
certified, 4 verification failed, 1 any other failure.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import MODELS_DIR, __version__
from .codistribution import UioOptions, build_uio
from .expr import ExprError, ParseError
from .model import Model, ModelError, load_model

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_UNCERTIFIED, EXIT_VERIFY = 0, 1, 2, 3, 4


class UsageError(Exception):
    pass


@dataclass
class RunConfig:
    model: Path
    command: str
    seed: int = 0
    tol: float = 1e-5
    tau: list | None = None
    tgrid: tuple | None = None  # (t0, t1, step), any entry may be None
    out: Path = Path("identikit-out")
    normalize: bool = False
    svg: bool = False
    xi: list | None = None  # [k] (1-based index) or coefficients over the basis
    mode: str = "symbolic"
    closed_form: str | None = None
    shift: str | None = None

    def uio_options(self) -> UioOptions:
        return UioOptions(seed=self.seed)


# --------------------------------------------------------------------------
# argument parsing


def parse_grid(spec: str) -> list[float]:
    """``a:b:step`` (inclusive of b) or a comma-separated list."""
    spec = spec.strip()
    if not spec:
        raise UsageError("empty grid")
    if ":" in spec:
        parts = spec.split(":")
        if len(parts) != 3:
            raise UsageError(f"range grid needs a:b:step, got {spec!r}")
        a, b, h = (float(p) for p in parts)
        if h <= 0 or b < a:
            raise UsageError(f"range grid {spec!r} is empty or not increasing")
        k = int(np.floor((b - a) / h + 1e-9))
        vals = [round(a + i * h, 12) for i in range(k + 1)]
    else:
        try:
            vals = [float(p) for p in spec.split(",") if p.strip()]
        except ValueError:
            raise UsageError(f"bad grid {spec!r}") from None
    if not vals:
        raise UsageError("empty grid")
    if any(b <= a for a, b in zip(vals, vals[1:])):
        raise UsageError(f"grid must be strictly increasing: {spec!r}")
    return vals


def parse_tgrid(spec: str) -> tuple:
    """``t0:t1:step`` or just ``step``."""
    parts = spec.split(":")
    try:
        if len(parts) == 1:
            h = float(parts[0])
            t0 = t1 = None
        elif len(parts) == 3:
            t0, t1, h = (float(p) for p in parts)
            if t1 <= t0:
                raise UsageError(f"time grid must be increasing: {spec!r}")
        else:
            raise UsageError(f"time grid needs t0:t1:step or step, got {spec!r}")
    except ValueError:
        raise UsageError(f"bad time grid {spec!r}") from None
    if h <= 0:
        raise UsageError("time step must be positive")
    return (t0, t1, h)


def resolve_model(arg: str | None) -> Path:
    if not arg:
        raise UsageError("no model given (use --model PATH or a bundled name)")
    p = Path(arg)
    if p.is_file():
        return p
    bundled = MODELS_DIR / f"{arg}.model"
    if bundled.is_file():
        return bundled
    raise FileNotFoundError(f"model file not found: {arg}")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("model_pos", nargs="?", metavar="MODEL", help="model file or bundled model name")
    common.add_argument("--model", help="model file or bundled model name")
    common.add_argument("--seed", type=int, default=None, help="sampling seed (default $IDENTIKIT_SEED or 0)")
    common.add_argument("--out", default="identikit-out", help="artifact directory")
    common.add_argument("--tol", type=float, default=1e-5, help="relative output tolerance for verify")
    common.add_argument("--normalize", action="store_true", help="normalize orthogonal-distribution fields")

    fam = argparse.ArgumentParser(add_help=False)
    fam.add_argument("--tau", help="tau grid: a:b:step or a comma list (0 is always added)")
    fam.add_argument("--tgrid", help="time grid: t0:t1:step or step")
    fam.add_argument("--xi", help="generator: 1-based basis index or comma list of basis coefficients")
    fam.add_argument("--mode", choices=("symbolic", "numeric"), default="symbolic")
    fam.add_argument("--closed-form", dest="closed_form", help="tabulate a stored closed-form family instead")
    fam.add_argument("--shift", help="shift family for an unknown input that is never identifiable")

    p = argparse.ArgumentParser(prog="identikit", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("analyze", parents=[common], help="identifiability analysis")
    sub.add_parser("family", parents=[common, fam], help="integrate an indistinguishable family")
    sub.add_parser("verify", parents=[common, fam], help="re-simulate family members and compare outputs")
    rp = sub.add_parser("report", parents=[common], help="summarize artifacts")
    rp.add_argument("--svg", action="store_true", help="also write SVG line charts of the family")
    return p


def config_from_args(ns: argparse.Namespace) -> RunConfig:
    if ns.model and ns.model_pos and ns.model != ns.model_pos:
        raise UsageError("model given twice")
    model = resolve_model(ns.model or ns.model_pos)
    seed = ns.seed
    if seed is None:
        env = os.environ.get("IDENTIKIT_SEED", "").strip()
        try:
            seed = int(env) if env else 0
        except ValueError:
            raise UsageError(f"IDENTIKIT_SEED must be an integer, got {env!r}") from None
    cfg = RunConfig(model=model, command=ns.command, seed=seed, tol=ns.tol, out=Path(ns.out),
                    normalize=ns.normalize)
    if getattr(ns, "tau", None) is not None:
        cfg.tau = parse_grid(ns.tau)
    if getattr(ns, "tgrid", None):
        cfg.tgrid = parse_tgrid(ns.tgrid)
    if getattr(ns, "xi", None):
        try:
            vals = [float(v) for v in ns.xi.split(",")]
        except ValueError:
            raise UsageError(f"bad --xi {ns.xi!r}") from None
        if len(vals) == 1 and (vals[0] != int(vals[0]) or vals[0] < 1):
            raise UsageError("--xi index is 1-based")
        cfg.xi = [int(vals[0])] if len(vals) == 1 else vals
    cfg.mode = getattr(ns, "mode", "symbolic")
    cfg.closed_form = getattr(ns, "closed_form", None)
    cfg.shift = getattr(ns, "shift", None)
    cfg.svg = getattr(ns, "svg", False)
    return cfg


# --------------------------------------------------------------------------
# helpers


def dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load(cfg: RunConfig) -> Model:
    return load_model(cfg.model)


def _time_grid(cfg: RunConfig, m: Model):
    from .simverify import time_grid

    sc = m.scenario
    if sc is None:
        raise UsageError(f"{cfg.model} has no simulation scenario")
    if cfg.tgrid is None:
        return time_grid(sc)
    t0, t1, h = cfg.tgrid
    t0 = sc.time_span[0] if t0 is None else t0
    t1 = sc.time_span[1] if t1 is None else t1
    k = int(round((t1 - t0) / h))
    if k < 1:
        raise UsageError("time grid has fewer than two points")
    return np.linspace(t0, t1, k + 1)


def _tau_grid(cfg: RunConfig, m: Model) -> list[float]:
    taus = cfg.tau if cfg.tau is not None else list(m.scenario.tau if m.scenario and m.scenario.tau else [])
    if not taus:
        raise UsageError("empty tau grid (pass --tau or set tau in the model file)")
    return sorted(set(taus) | {0.0})


# --------------------------------------------------------------------------
# commands


def cmd_analyze(cfg: RunConfig) -> int:
    from .identifiability import full_report, report_record, report_text

    m = _load(cfg)
    rep = full_report(m, cfg.uio_options(), normalize=cfg.normalize)
    rec = report_record(rep)
    rec["seed"] = cfg.seed
    text = report_text(rep)
    _write(cfg.out / "report.json", dump_json(rec))
    _write(cfg.out / "report.txt", text)
    sys.stdout.write(text)
    if not rep.certified:
        print("closure depth exhausted: result not certified", file=sys.stderr)
        return EXIT_UNCERTIFIED
    return EXIT_OK


def _generator(cfg: RunConfig, u, basis):
    from .diffgeo import VectorField
    from .flows import combine, default_generator

    if not basis:
        raise UsageError("the state is observable: there is no family to integrate")
    if cfg.xi is None:
        k = default_generator(u, basis)
        return basis[k], f"xi{k + 1}"
    if len(cfg.xi) == 1:
        k = cfg.xi[0]
        if k > len(basis):
            raise UsageError(f"--xi {k} out of range (basis has {len(basis)} fields)")
        return basis[k - 1], f"xi{k}"
    if len(cfg.xi) != len(basis):
        raise UsageError(f"--xi needs {len(basis)} coefficients")
    v = combine(basis, cfg.xi)
    return VectorField(v.components, "combination"), "combination " + ",".join(repr(c) for c in cfg.xi)


def compute_family(cfg: RunConfig):
    """Analysis, base trajectory and family for a config (shared by family and verify)."""
    from .expr import to_text
    from .flows import chi, closed_form, evaluate_closed_form, integrate_family, shift_family
    from .identifiability import mu_nu, orthogonal_basis
    from .simverify import base_trajectory

    m = _load(cfg)
    grid = _time_grid(cfg, m)
    taus = _tau_grid(cfg, m)
    u = build_uio(m, cfg.uio_options())
    base = base_trajectory(u, grid=grid)
    meta = {"model": m.name, "seed": cfg.seed, "mode": cfg.mode}
    if cfg.closed_form:
        cf = closed_form(cfg.closed_form)
        fam = evaluate_closed_form(cf, base, taus)
        meta["closed_form"] = cfg.closed_form
    elif cfg.shift:
        names = [w.name for w in u.model.unknown_inputs]
        if cfg.shift not in names:
            raise UsageError(f"--shift: {cfg.shift} is not an unknown input of the analysed system")
        fam = shift_family(u, names.index(cfg.shift) + 1, taus, base)
    else:
        basis = orthogonal_basis(u, cfg.normalize)
        xi, label = _generator(cfg, u, basis)
        fam = integrate_family(u, xi, base, taus, mode=cfg.mode)
        fam.generator = label
        meta["xi"] = [to_text(c) for c in xi]
        meta["chi"] = [to_text(c) for c in chi(u, xi, mu_nu(u))]
    return u, base, fam, meta


def cmd_family(cfg: RunConfig) -> int:
    u, base, fam, meta = compute_family(cfg)
    rec = fam.record()
    rec["meta"] = meta
    _write(cfg.out / "family.csv", fam.to_csv())
    _write(cfg.out / "family.json", dump_json(rec))
    lo = [r for r in fam.truncation() if r != (float(fam.tau_grid[0]), float(fam.tau_grid[-1]))]
    print(f"family of {meta['model']}: {fam.tau_grid.size} tau values x {fam.time_grid.size} times"
          f" ({fam.generator or fam.provenance})")
    if lo:
        print(f"warning: {len(lo)} time instants truncated at the domain boundary", file=sys.stderr)
    return EXIT_OK


def cmd_verify(cfg: RunConfig) -> int:
    from .flows import FamilySolution
    from .simverify import base_trajectory, verify_family

    path = cfg.out / "family.json"
    if not path.is_file():
        raise FileNotFoundError(f"{path} not found (run `identikit family` first)")
    rec = json.loads(path.read_text())
    fam = FamilySolution.from_record(rec)
    if fam.tau_grid.size == 0:
        raise UsageError("empty tau grid in family artifact")
    m = _load(cfg)
    u = build_uio(m, cfg.uio_options())
    base = base_trajectory(u, grid=fam.time_grid)
    out = verify_family(u.model, base, fam, cfg.tol)
    res = out.record()
    res["model"] = m.name
    res["max_rel_dev"] = _finite(res["max_rel_dev"])
    res["per_tau"] = [{k: _finite(v) for k, v in e.items()} for e in res["per_tau"]]
    _write(cfg.out / "verify.json", dump_json(res))
    for e in out.per_tau:
        dev = e.get("max_rel_dev")
        dev_s = f"{dev:.3e}" if dev is not None else "n/a"
        print(f"tau={e['tau']:+.6g}  rel_dev={dev_s}  {'pass' if e['passed'] else 'FAIL'}"
              + (f"  ({e['note']})" if e.get("note") else ""))
    print("verification " + ("passed" if out.passed else "FAILED"))
    return EXIT_OK if out.passed else EXIT_VERIFY


def _finite(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    return v


def cmd_report(cfg: RunConfig) -> int:
    rep = cfg.out / "report.txt"
    if not rep.is_file():
        raise FileNotFoundError(f"{rep} not found (run `identikit analyze` first)")
    sys.stdout.write(rep.read_text())
    ver = cfg.out / "verify.json"
    if ver.is_file():
        v = json.loads(ver.read_text())
        print(f"\nverification: {'passed' if v['pass'] else 'FAILED'} "
              f"(max rel dev {v['max_rel_dev']}, tol {v['tolerance']})")
    if cfg.svg:
        fam = cfg.out / "family.json"
        if not fam.is_file():
            raise FileNotFoundError(f"{fam} not found (run `identikit family` first)")
        for p in write_svgs(json.loads(fam.read_text()), cfg.out):
            print(f"wrote {p}")
    return EXIT_OK


def write_svgs(rec: dict, out: Path) -> list[Path]:
    """One line chart per column that changes along the family."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    from .flows import FamilySolution

    fam = FamilySolution.from_record(rec)
    names = list(fam.state_names) + list(fam.input_names)
    data = np.concatenate([fam.x_prime, fam.w_prime], axis=2)
    i0 = fam.tau_index(0.0)
    paths = []
    plt.rcParams["svg.hashsalt"] = "identikit"
    for c, nm in enumerate(names):
        col = data[:, :, c]
        ref = col[:, i0:i0 + 1]
        if np.allclose(np.nan_to_num(col), np.nan_to_num(np.repeat(ref, col.shape[1], axis=1))):
            continue
        fig, ax = plt.subplots(figsize=(6, 4))
        for k, tau in enumerate(fam.tau_grid):
            ax.plot(fam.time_grid, col[:, k], lw=1, label=f"tau={tau:g}")
        ax.set_xlabel("t")
        ax.set_ylabel(nm + "'")
        ax.legend(fontsize=7)
        p = out / f"family_{nm}.svg"
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths


COMMANDS = {"analyze": cmd_analyze, "family": cmd_family, "verify": cmd_verify, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:  # argparse usage errors, --help, --version
        return int(exc.code or 0)
    try:
        cfg = config_from_args(ns)
        return COMMANDS[cfg.command](cfg)
    except (UsageError, FileNotFoundError, ParseError, ModelError) as exc:
        print(f"identikit: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ExprError, ValueError, KeyError) as exc:
        print(f"identikit: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
