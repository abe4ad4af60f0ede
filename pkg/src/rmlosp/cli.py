"""Command-line entry point: ``rmlosp <command> <preset|config.yaml> [flags]``."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import platform
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, load, serialize, write_preset_files
from .experiments import (PRESETS, _params, gradient_check, heatmap_objective, nearest_target_distance,
                          prepare, run_trial, trial_average, validate_config)
from .kalman import FilterError, are_derivatives, are_gradient, solve_are
from .optimizer import NonFiniteGradientError, tracking_mode
from .spectral import assemble_system

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return f"{float(v):.17g}"
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return v


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


class Output:
    """Output directory with a manifest that is written up front and finalised at exit."""

    def __init__(self, root: Path, cfg, command: str, force: bool):
        root = Path(root)
        if root.exists() and any(root.iterdir()) and not force:
            raise UsageError(f"output directory {root} is not empty; pass --force to overwrite")
        root.mkdir(parents=True, exist_ok=True)
        self.root = root
        self.files: list[str] = []
        self.started = time.time()
        self.manifest = {
            "command": command,
            "version": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "seed": cfg.seed,
            "config": serialize(cfg),
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started)),
            "status": "running",
            "files": [],
        }
        self._flush()

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.root / name

    def _flush(self):
        self.manifest["files"] = sorted(set(self.files) | {"manifest.json"})
        (self.root / "manifest.json").write_text(json.dumps(self.manifest, indent=2) + "\n")

    def finish(self, status: str):
        self.manifest["status"] = status
        self.manifest["wall_clock_s"] = round(time.time() - self.started, 3)
        self._flush()


# --------------------------------------------------------------------------
# commands


def _log_rows(log):
    for r in range(len(log.step)):
        yield [log.step[r], log.t[r], *log.theta[r], *log.o[r], log.loglik[r], log.trace_obj[r], log.mse[r]]


def _log_header(log):
    return ["step", "t", *log.names, *log.o_names, "loglik", "trace_obj", "mse"]


def _write_heatmap(out: Output, hm):
    write_csv(out.path("heatmap.csv"), ["x", "y", "value"], hm.rows())


def cmd_run(cfg, args, out: Output):
    st = prepare(cfg)
    trials = cfg.trials
    logs = []
    for k in range(trials):
        log = run_trial(cfg, k, setup=st)
        logs.append(log)
        name = "log.csv" if trials == 1 else f"log_trial{k:03d}.csv"
        write_csv(out.path(name), _log_header(log), _log_rows(log))
        out._flush()
        print(f"trial {k}: final mse avg {np.mean(log.mse_full[-cfg.mse_window:]):.6g}", flush=True)
    summ = [dict(trial=k, **lg.summary(cfg.mse_window)) for k, lg in enumerate(logs)]
    if cfg.weight == "targets" and logs[0].o_names:
        for row, lg in zip(summ, logs):
            d = nearest_target_distance(lg.final_positions[np.asarray(cfg.sensors.movable)], cfg.targets)
            row["max_target_distance"] = float(d.max())
    keys = list(summ[0])
    write_csv(out.path("summary.csv"), keys, ([r.get(k, "") for k in keys] for r in summ))
    if trials > 1:
        avg = trial_average(logs)
        hdr = ["t", *avg.names, *[f"{n}_se" for n in avg.names], *avg.o_names, *[f"{n}_se" for n in avg.o_names]]
        write_csv(out.path("average.csv"), hdr,
                  ([avg.t[r], *avg.theta_mean[r], *avg.theta_se[r], *avg.o_mean[r], *avg.o_se[r]]
                   for r in range(len(avg.t))))
    # landscape at the final estimate for the first movable sensor
    last = logs[0]
    if last.o_names:
        th = st.theta0.with_values(last.names, last.theta[-1]) if last.names else st.theta0
        sensors = st.sensors0.with_positions(last.final_positions)
        _write_heatmap(out, heatmap_objective(th, sensors, st.ks, args.resolution, M=st.M, B=st.B,
                                              normalize=cfg.normalize))
    _write_conditions(out, cfg, st)
    if args.emit_plots:
        _emit_plots(out, logs[0], trials)
    for c in logs[0].header:
        print(c)
    return EXIT_OK


def _write_conditions(out: Output, cfg, st):
    from .conditions import condition_report

    sys_ = assemble_system(_params(cfg.truth), st.sensors0, st.ks, B=st.B, M=st.M, active=list(cfg.active),
                           normalize=cfg.normalize)
    rep = condition_report(sys_, include_tangents=True, schedule_checks=validate_config(cfg))
    out.path("conditions.txt").write_text(rep.to_text())
    return rep


def cmd_check_conditions(cfg, args, out: Output):
    rep = _write_conditions(out, cfg, prepare(cfg))
    out.path("conditions.csv").write_text(rep.to_csv())
    print(rep.to_text(), end="")
    return EXIT_OK


def cmd_simulate(cfg, args, out: Output):
    from .signal import simulate

    st = prepare(cfg)
    rng = np.random.default_rng(cfg.seed)
    times, alphas, zs = simulate(st.schedule, st.sensors0, st.ks, cfg.steps, cfg.dt, rng, B=st.B,
                                 normalize=cfg.normalize)
    s = cfg.stride
    write_csv(out.path("signal.csv"), ["step", "t", *[f"alpha{j}" for j in range(st.ks.n)]],
              ([i, times[i], *alphas[i]] for i in range(0, len(times), s)))
    write_csv(out.path("observations.csv"), ["step", "t", *[f"z{j + 1}" for j in range(zs.shape[1])]],
              ([i + 1, times[i + 1], *zs[i]] for i in range(0, len(zs), s)))
    print(f"simulated {cfg.steps} steps, {st.ks.n} modes, {zs.shape[1]} sensors")
    return EXIT_OK


def cmd_heatmap(cfg, args, out: Output):
    st = prepare(cfg)
    theta = _params(cfg.truth)
    for item in args.set or []:
        name, _, val = item.partition("=")
        try:
            theta = theta.replace(**{name: float(val)})
        except (TypeError, ValueError, KeyError) as exc:
            raise UsageError(f"bad --set {item!r}: {exc}") from exc
    if not st.sensors0.movable.any():
        raise UsageError("heatmap needs at least one movable sensor")
    hm = heatmap_objective(theta, st.sensors0, st.ks, args.resolution, M=st.M, B=st.B, normalize=cfg.normalize)
    _write_heatmap(out, hm)
    print(f"argmin {hm.argmin[0]:.6f} {hm.argmin[1]:.6f} value {np.nanmin(hm.values):.10g}")
    return EXIT_OK


def cmd_grad_check(cfg, args, out: Output):
    steps = args.steps if args.steps is not None else 500
    checks = gradient_check(dataclasses.replace(cfg, steps=steps), steps=steps)
    # steady-state sensitivities against central differences of the ARE
    st = prepare(cfg)
    sys_ = assemble_system(st.theta0, st.sensors0, st.ks, B=st.B, M=st.M, active=list(cfg.active),
                           normalize=cfg.normalize)
    Sinf = solve_are(sys_).Sinf
    dS = are_derivatives(sys_, Sinf)
    _, g = are_gradient(sys_, Sinf)
    h = 1e-6
    rows = []
    for c, (i, a) in enumerate(st.sensors0.movable_coords):
        vals = []
        for sg in (1, -1):
            pos = st.sensors0.positions.copy()
            pos[i, a] += sg * h
            s2 = assemble_system(st.theta0, st.sensors0.with_positions(pos), st.ks, B=st.B, M=st.M, active=[],
                                 normalize=cfg.normalize)
            vals.append(solve_are(s2).Sinf)
        fd = (vals[0] - vals[1]) / (2 * h)
        p = len(cfg.active)
        rel_S = np.linalg.norm(dS[p + c] - fd) / max(np.linalg.norm(fd), 1e-300)
        fd_tr = float(np.sum(st.M * fd))
        rows.append((f"are_dS:o{i + 1}{'xy'[a]}", np.linalg.norm(dS[p + c]), np.linalg.norm(fd), rel_S, 1e-4))
        rows.append((f"are_grad:o{i + 1}{'xy'[a]}", g[c], fd_tr, abs(g[c] - fd_tr) / max(abs(fd_tr), 1e-300), 1e-4))
    allrows = [(c.name, c.analytic, c.finite_difference, c.rel_error, c.tol) for c in checks] + rows
    ok = True
    for name, an, fd, rel, tol in allrows:
        passed = rel < tol
        ok &= passed
        print(f"{'PASS' if passed else 'FAIL'} {name}: analytic {an:.10g} fd {fd:.10g} rel {rel:.3g} (tol {tol:g})")
    write_csv(out.path("grad_check.csv"), ["check", "analytic", "finite_difference", "rel_error", "tol", "passed"],
              ([*r, int(r[3] < r[4])] for r in allrows))
    return EXIT_OK if ok else EXIT_NUMERIC


def cmd_validate_schedules(cfg, args, out: Output):
    checks = validate_config(cfg)
    write_csv(out.path("schedules.csv"), ["check", "passed", "detail"], ([c.name, int(c.passed), c.detail]
                                                                          for c in checks))
    for c in checks:
        print(f"{'pass' if c.passed else 'FAIL'} {c.name}: {c.detail}")
    if tracking_mode(checks):
        print("WARNING: tracking mode; constant step sizes violate A.1, the iterate tracks rather than converges")
    return EXIT_OK


def _emit_plots(out: Output, log, trials):
    name = "log.csv" if trials == 1 else "log_trial000.csv"
    cols = _log_header(log)
    lines = ["set datafile separator ','", "set key autotitle columnhead", "set terminal pngcairo size 1000,700"]
    lines.append("set output 'theta.png'")
    lines.append("plot " + ", ".join(f"'{name}' using 2:{cols.index(n) + 1} with lines" for n in log.names)
                 if log.names else "# no parameters learned")
    lines.append("set output 'mse.png'")
    lines.append(f"plot '{name}' using 2:{cols.index('mse') + 1} with lines")
    if log.o_names:
        lines += ["set output 'heatmap.png'", "set view map",
                  "splot 'heatmap.csv' using 1:2:3 with image"]
    out.path("plots.gp").write_text("\n".join(lines) + "\n")


COMMANDS = {
    "run": cmd_run,
    "simulate": cmd_simulate,
    "heatmap": cmd_heatmap,
    "check-conditions": cmd_check_conditions,
    "grad-check": cmd_grad_check,
    "validate-schedules": cmd_validate_schedules,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rmlosp", description=__doc__)
    p.add_argument("--version", action="version", version=f"rmlosp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help=f"preset ({', '.join(PRESETS)}) or YAML config file")
        s.add_argument("--seed", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--dt", type=float)
        s.add_argument("--trials", type=int)
        s.add_argument("--stride", type=int)
        s.add_argument("--out", type=Path)
        s.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
        s.add_argument("--emit-plots", action="store_true", help="write gnuplot scripts next to the CSVs")
        s.add_argument("--resolution", type=int, default=24, help="heatmap grid size")
        if name == "heatmap":
            s.add_argument("--set", action="append", metavar="NAME=VALUE", help="override a true parameter")
    d = sub.add_parser("dump-presets", help="write every preset as a YAML file")
    d.add_argument("directory", type=Path)
    return p


def _apply_overrides(cfg, args, command):
    changes = {k: getattr(args, k) for k in ("seed", "dt", "trials", "stride") if getattr(args, k) is not None}
    if args.steps is not None and command != "grad-check":
        changes["steps"] = args.steps
    if not changes:
        return cfg
    try:
        return dataclasses.replace(cfg, **changes).validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    if args.command == "dump-presets":
        for p in write_preset_files(args.directory):
            print(p)
        return EXIT_OK
    out = None
    try:
        cfg = _apply_overrides(load(args.config), args, args.command)
        root = args.out or Path("runs") / f"{cfg.preset}_{args.command}_seed{cfg.seed}"
        out = Output(root, cfg, " ".join(sys.argv[1:] if argv is None else argv), args.force)
        code = COMMANDS[args.command](cfg, args, out)
        out.finish("complete" if code == EXIT_OK else "failed")
        return code
    except (ConfigError, UsageError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        if out is not None:
            out.finish("usage error")
        return EXIT_USAGE
    except (FilterError, NonFiniteGradientError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        if out is not None:
            out.finish(f"numerical failure: {exc}")
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
