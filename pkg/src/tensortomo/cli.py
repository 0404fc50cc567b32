"""Command-line entry point: ``tensortomo <command> [--config PATH] [--set KEY=VALUE ...]``.

Exit codes: 0 success, 2 validation error, 3 failed numerical verdict, 4 I/O error.
Every command writes its outputs and a ``manifest.json`` under ``--out``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from . import symbols as S
from .config import config_hash, load_config
from .errors import FoliationError, TensorTomoError, ValidationError
from .tensors import write_tensor_file

EXIT_OK, EXIT_VALIDATION, EXIT_VERDICT, EXIT_IO = 0, 2, 3, 4


class VerdictFailure(Exception):
    """A numerical check ran to completion and failed."""


# ---------------------------------------------------------------------------
# output helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, complex):
        return [obj.real, obj.imag]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_jsonable(obj), indent=2, sort_keys=True) + "\n")


def fan_hash(fan) -> str:
    h = hashlib.sha256()
    for a in (fan.x, fan.y, fan.lam, fan.omega):
        h.update(np.ascontiguousarray(a, "<f8").tobytes())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, files, verdict=None) -> Path:
    c = json.loads(json.dumps(cfg, default=str))
    c.get("output", {}).pop("dir", None)
    man = {"tool": "tensortomo", "version": __version__, "command": command, "config_hash": config_hash(cfg),
           "seed": cfg["seed"], "config": c, "files": {f.name: _sha256(f) for f in sorted(files)}}
    if verdict is not None:
        man["verdict"] = verdict
    p = out / "manifest.json"
    _write_json(p, man)
    return p


# ---------------------------------------------------------------------------
# commands


def cmd_forward(cfg, out: Path) -> list:
    from .experiment import simulate

    data, f_grid, setup = simulate(cfg)
    files = [out / "data.csv", out / "data.bin", out / "phantom.trt"]
    data.to_csv(files[0])
    data.write_binary(files[1])
    write_tensor_file(files[2], f_grid, sidecar=False)
    info = {"rays": len(data), "ok_rays": int(np.sum(data.status == 0)), "fan_hash": fan_hash(setup.fan),
            "max_abs_value": float(np.nanmax(np.abs(data.values))) if data.valid.any() else 0.0}
    _write_json(out / "forward.json", info)
    files.append(out / "forward.json")
    print(f"forward: {info['ok_rays']}/{info['rays']} local rays written to {out}")
    return files


def _read_data(path: str):
    from .transform import RayData

    p = Path(path)
    if not p.is_file():
        raise FileNotFoundError(f"ray data file {p} not found")
    return RayData.read_binary(p) if p.suffix == ".bin" else RayData.from_csv(p)


def cmd_invert(cfg, out: Path) -> list:
    from .experiment import build_fan, build_phantom, build_setup, reconstruct, solenoidal_errors
    from .gauge import check_schedule, layer_strip
    from .transform import forward_fan

    inv = cfg["inversion"]
    taus = [float(t) for t in inv["taus"]]
    setup = build_setup(cfg)
    # aborts with FoliationError (exit 3) when a level of the schedule is not convex
    check_schedule(setup.metric, setup.lens, taus, cfg["foliation"]["probe_samples"])
    f_grid = None
    data_file = inv.get("data", "")
    if data_file:
        if len(taus) > 1:
            raise ValidationError("layer stripping needs simulated data; drop inversion.data or use one level",
                                  )
        data = _read_data(data_file)
        if len(data) != len(setup.fan):
            raise ValidationError(f"data has {len(data)} rows but the configured fan has {len(setup.fan)}")
    else:
        f_grid, f_data = build_phantom(cfg, setup)
        data = forward_fan(f_data, setup.fan, setup.metric, setup.lens, trace=setup.trace)
    gauge = None
    if len(taus) == 1 and taus[0] == 0.0:
        res = reconstruct(cfg, data, setup)
        diag = res.diagnostics
    else:
        tr = cfg["transform"]

        def fan_for(tau, chart):
            return build_fan(cfg, chart)

        def data_for(tau, fan, trace):
            return forward_fan(f_data, fan, setup.metric, setup.lens.shifted(tau), trace=trace)

        res = layer_strip(data_for, fan_for, setup.metric, setup.lens, setup.grid, taus, cfg["weight"]["F"],
                          inv["x_min"], inv["overlap"], check_convexity=False, step=tr["step"], tmax=tr["tmax"],
                          reg=inv["mu_rel"], maxiter=inv["maxiter"], rtol=inv["rtol"])
        diag = res.diagnostics["levels"][0]
        gauge = (setup.lens.shifted(taus[-1]).x(setup.grid.nodes), res.diagnostics["union"])
    files = [out / "solution.trt", out / "diagnostics.json"]
    write_tensor_file(files[0], res.u, sidecar=False)
    report = {"residual": diag["residual"], "residual_curve": diag["residual_curve"],
              "gauge_norm": diag["gauge_norm"], "iterations": diag["iterations"], "F": diag["F"],
              "mu": diag["mu"], "rays": diag["rays"], "unknowns": diag["unknowns"],
              "starved_nodes": len(diag["starved_nodes"]), "taus": taus, "fan_hash": fan_hash(setup.fan)}
    if f_grid is not None:
        report["errors"] = solenoidal_errors(cfg, setup, res.u, f_grid, gauge)
    _write_json(files[1], report)
    msg = f"invert: {report['iterations']} iterations, residual {report['residual']:.3e}"
    if "errors" in report:
        msg += f", interior error {report['errors']['error_sc']:.3%} (sc frame)"
    print(msg)
    return files


def _parse_mutation(s: str):
    if not s:
        return None
    try:
        i, j = (int(v) for v in s.split(","))
    except ValueError as exc:
        raise ValidationError(f"symbols.mutate_entry must look like 'i,j', got {s!r}") from exc
    if not (0 <= i < 5 and 0 <= j < 5):
        raise ValidationError("symbols.mutate_entry indices must lie in 0..4")
    return i, j


def verify_symbols(cfg) -> dict:
    """Run every symbol-level check; returns {name: record} with a ``passed`` flag each."""
    sc = cfg["symbols"]
    n = sc["n"]
    rng = np.random.default_rng(cfg["seed"])
    mutate = _parse_mutation(sc.get("mutate_entry", ""))
    C = float(sc["curvature_bound"])
    checks = {}

    worst, worst_adj, first_bad = 0.0, 0.0, None
    for _ in range(100):
        xi, eta, F = rng.standard_normal(), rng.standard_normal(n - 1), rng.uniform(0, 3)
        curv = S.CurvatureCoefficients.random(C, n, rng) if C > 0 else None
        r = S.symbol_regression(xi, eta, F, curv, n, raise_on_fail=False, mutate=mutate)
        if r["max_error"] > worst:
            worst = r["max_error"]
        if first_bad is None and r["max_error"] > 1e-12:
            first_bad = max(r["entries"], key=r["entries"].get)
        disp = S.deltasF_symbol(xi, eta, F, curv, n, displayed=True).matrix
        adj = S.dsF_symbol(xi, eta, F, curv, n).adjoint().matrix
        worst_adj = max(worst_adj, float(np.max(np.abs(disp - adj))) / max(1.0, xi**2 + F**2 + eta @ eta))
    checks["regression"] = {"max_error": worst, "delta_adjoint_error": worst_adj, "first_failing_entry": first_bad,
                            "passed": worst <= 1e-12 and worst_adj <= 1e-13}

    fib = S.sweep_fiber_infinity(sc["directions"], n)
    checks["fiber_infinity"] = {"directions": len(fib["directions"]), "worst_sigma": fib["worst"],
                                "worst_direction": fib["worst_direction"], "passed": fib["all_trivial"]}
    fin = S.sweep_finite_points(shape=tuple(sc["finite_shape"]), n=n)
    checks["finite_points"] = {"points": int(fin["min_sigma"].size), "worst_sigma": fin["worst"],
                               "worst_point": fin["worst_point"], "families_ok": fin["families_ok"],
                               "passed": fin["all_trivial"] and fin["families_ok"]}

    wr, wok = 0.0, True
    for _ in range(100):
        xi, eta, F = rng.standard_normal(), rng.standard_normal(n - 1), rng.uniform(0, 3)
        curv = S.CurvatureCoefficients.random(C, n, rng) if C > 0 else None
        w = S.witten_factorization_check(xi, eta, F, curv, n)
        wr = max(wr, w.residual)
        wok &= w.passed
    checks["witten"] = {"max_residual": wr, "curvature_bound": C,
                        "passed": bool(wok and (C > 0 or wr <= 1e-12))}

    M = S.BlockLayout(n, 4).weights
    asym, worst_rank = 0.0, 1
    for _ in range(20):
        Y = rng.standard_normal(n - 1)
        P = S.projector_integrand(rng.standard_normal(), Y / np.linalg.norm(Y))
        MP = M[:, None] * P
        asym = max(asym, float(np.max(np.abs(MP - MP.T))) / max(1.0, float(np.max(np.abs(MP)))))
        worst_rank = max(worst_rank, int(np.linalg.matrix_rank(P, tol=1e-10 * np.abs(P).max())))
    checks["projector"] = {"max_asymmetry": asym, "rank": worst_rank, "passed": asym <= 1e-12 and worst_rank == 1}

    g = S.gaussian_cutoff_transform(cfg["cutoff"]["nu"])
    checks["gaussian"] = {"c": g["c"], "c_exact": g["c_exact"], "max_error": g["max_error"],
                          "passed": abs(g["c"] - g["c_exact"]) <= 1e-10 and g["max_error"] <= 1e-10}

    from .gauge import vandermonde_extension_coeffs

    ext = vandermonde_extension_coeffs()
    res = ext.residuals()
    checks["vandermonde"] = {"C": ext.C, "exact": [str(c) for c in ext.exact],
                             "max_residual": float(np.max(np.abs(res))), "passed": bool(np.max(np.abs(res)) <= 1e-12)}
    return checks


def cmd_verify_symbols(cfg, out: Path) -> list:
    checks = verify_symbols(cfg)
    lines = [f"{name:16s} {'PASS' if rec['passed'] else 'FAIL'}  " +
             " ".join(f"{k}={_fmt(v)}" for k, v in rec.items() if k != "passed" and np.ndim(v) == 0)
             for name, rec in checks.items()]
    text = "\n".join(lines) + "\n"
    files = [out / "symbols_report.txt", out / "symbols.json"]
    files[0].write_text(text)
    _write_json(files[1], checks)
    sys.stdout.write(text)
    failed = [k for k, v in checks.items() if not v["passed"]]
    if failed:
        rec = checks[failed[0]]
        detail = f" (entry {rec['first_failing_entry']})" if rec.get("first_failing_entry") else ""
        return files, f"{failed[0]} failed{detail}"
    return files, None


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.3e}"
    return str(v)


def cmd_check_foliation(cfg, out: Path):
    from .experiment import build_lens, build_metric, build_profile
    from .gauge import check_schedule
    from .geometry import herglotz_check

    h = herglotz_check(build_profile(cfg), cfg["metric"]["radius"])
    rec = {"herglotz": {"passed": h.passed, "margin": h.margin}}
    try:
        levels = check_schedule(build_metric(cfg), build_lens(cfg), cfg["foliation"]["taus"],
                                cfg["foliation"]["probe_samples"])
        rec["convexity"] = {"passed": True, "levels": [{"tau": t, "worst": p.worst} for t, p in levels]}
    except FoliationError as exc:
        rec["convexity"] = {"passed": False, "failed_level": exc.level, "message": str(exc)}
    ok = rec["herglotz"]["passed"] and rec["convexity"]["passed"]
    rec["verdict"] = ok
    p = out / "foliation.json"
    _write_json(p, rec)
    print(f"herglotz: {h.passed} (margin {h.margin:.4g}); convexity: {rec['convexity']['passed']}; verdict {ok}")
    return [p], None if ok else "foliation verdict is false"


def cmd_demo_qp(cfg, out: Path):
    from .experiment import build_profile, demo_qp
    from .geometry import herglotz_check

    h = herglotz_check(build_profile(cfg), cfg["metric"]["radius"])
    if not h.passed:
        return [], f"profile fails the Herglotz condition (margin {h.margin:.3g})"
    res = demo_qp(cfg)
    r = res["result"]
    files = [out / "qp_data.csv", out / "qp_solution.trt", out / "qp_report.json"]
    res["data"].to_csv(files[0])
    write_tensor_file(files[1], r.u, sidecar=False)
    rep = {"herglotz_margin": h.margin, "errors": res["errors"], "iterations": r.diagnostics["iterations"],
           "residual": r.diagnostics["residual"], "rays": r.diagnostics["rays"],
           "fan_hash": fan_hash(res["setup"].fan)}
    _write_json(files[2], rep)
    print(f"demo-qp: solenoidal-part error {res['errors']['error_sc']:.3%} (sc frame), "
          f"{res['errors']['error_chart']:.3%} (chart frame)")
    return files, None


COMMANDS = {
    "forward": lambda c, o: (cmd_forward(c, o), None),
    "invert": lambda c, o: (cmd_invert(c, o), None),
    "verify-symbols": cmd_verify_symbols,
    "check-foliation": cmd_check_foliation,
    "demo-qp": cmd_demo_qp,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML experiment config")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        help="override a config field by dotted path (repeatable)")
    common.add_argument("--out", metavar="DIR", help="output directory (default: output.dir)")
    common.add_argument("--seed", type=int, help="random seed")
    common.add_argument("--threads", type=int, help="thread limit for BLAS/OpenMP pools")
    p = argparse.ArgumentParser(prog="tensortomo", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"tensortomo {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return p


def run(args) -> int:
    try:
        cfg = load_config(args.config, args.set, args.seed)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValidationError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    if args.out:
        cfg["output"]["dir"] = args.out
    out = Path(cfg["output"]["dir"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"error: cannot create {out}: {exc}", file=sys.stderr)
        return EXIT_IO
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", RuntimeWarning)
            files, failure = COMMANDS[args.command](cfg, out)
        write_manifest(out, args.command, cfg, files, verdict=failure is None)
    except ValidationError as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (FileNotFoundError, PermissionError, IsADirectoryError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except TensorTomoError as exc:
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_VERDICT
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    if failure:
        print(f"verdict failed: {failure}", file=sys.stderr)
        return EXIT_VERDICT
    return EXIT_OK


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be >= 1", file=sys.stderr)
            return EXIT_VALIDATION
        from threadpoolctl import threadpool_limits

        with threadpool_limits(limits=args.threads):
            return run(args)
    return run(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
