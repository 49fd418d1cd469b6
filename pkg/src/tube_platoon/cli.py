"""Command-line front end.

Exit codes: 0 success, 1 configuration or usage error, 2 hard controller
infeasibility during a run.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .controller import HardInfeasibilityError
from .hdv import HdvNoise, estimate_bound_for_theta
from .lqr import UnstableGainError, synthesize_gain
from .sets import Box2, MrpiError, compute_mrpi
from .sim import (
    ConfigError,
    DisturbanceSpec,
    PlatoonSpec,
    RunResult,
    ScenarioConfig,
    penetration_sweep,
    run_many,
    run_scenario,
    segment_uncertainty,
    sweep_lambda,
)

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_INFEASIBLE = 2

LAMBDAS = (10.0, 7.5, 5.0, 2.5)
RATES = (0.1, 0.2, 0.5, 1.0)


def write_atomic(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([f"{x:.9g}" if isinstance(x, float) else x for x in r])
    return buf.getvalue()


def load_config(path: str | None, seed: int | None = None) -> ScenarioConfig:
    if path is None:
        cfg = ScenarioConfig.from_dict({})
    else:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
        cfg = ScenarioConfig.from_json(text)
    if seed is not None:
        if seed < 0:
            raise ConfigError("--seed", "must be >= 0")
        cfg = cfg.with_(seed=seed, noise=cfg.noise.with_seed(seed))
    return cfg


def _run_to_json(res: RunResult) -> str:
    cols = {"step": list(range(res.steps))}
    for j, lab in enumerate(res.labels):
        cols[f"{lab}_s"] = res.s[:-1, j].tolist()
        cols[f"{lab}_v"] = res.v[:-1, j].tolist()
        cols[f"{lab}_u"] = res.u[:, j].tolist()
    for c, i in enumerate(res.cav_index):
        lab = res.labels[i]
        cols[f"{lab}_e_s"] = res.errors[:, c, 0].tolist()
        cols[f"{lab}_e_v"] = res.errors[:, c, 1].tolist()
        cols[f"{lab}_dev_s"] = res.deviations[:, c, 0].tolist()
        cols[f"{lab}_dev_v"] = res.deviations[:, c, 1].tolist()
    return json.dumps(cols) + "\n"


# ---------------------------------------------------------------- commands


def cmd_run(config_path: str | None, output_dir: str, seed: int | None = None, fmt: str = "csv") -> int:
    cfg = load_config(config_path, seed)
    out = Path(output_dir)
    try:
        res = run_scenario(cfg)
    except HardInfeasibilityError as exc:
        write_atomic(out / "summary.json", _dump({"status": "infeasible", "step": exc.step, "message": str(exc)}))
        print(f"hard infeasibility: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    if fmt == "json":
        write_atomic(out / "run.json", _run_to_json(res))
    else:
        write_atomic(out / "run.csv", res.to_csv())
    summary = {"status": "ok", "config": cfg.to_dict(), **res.summary()}
    write_atomic(out / "summary.json", _dump(summary))
    write_atomic(out / "events.jsonl", res.events_jsonl())
    return EXIT_OK


def cmd_sweep_lambda(config_path, output_dir, seed=None, seeds: int = 20, lambdas=LAMBDAS) -> int:
    cfg = load_config(config_path, seed)
    rows = sweep_lambda(cfg, lambdas, range(cfg.seed, cfg.seed + seeds))
    keys = ["lambda", "runs", "infeasible", "mean_triggers", "max_triggers", "mean_disturbances"]
    write_atomic(Path(output_dir) / "sweep_lambda.csv", _csv(keys, [[r[k] for k in keys] for r in rows]))
    return EXIT_OK


def cmd_sweep_penetration(config_path, output_dir, seed=None, length: int = 100, rates=RATES,
                          theta: float | None = None) -> int:
    cfg = load_config(config_path, seed)
    theta = cfg.controller.theta_init if theta is None else theta
    table = penetration_sweep(length, rates, theta, cfg)
    rows = [[rate, j, b.ws, b.wv] for rate, boxes in table.items() for j, b in enumerate(boxes)]
    write_atomic(Path(output_dir) / "sweep_penetration.csv", _csv(["rate", "cav", "w_s", "w_v"], rows))
    return EXIT_OK


def cmd_estimate_bound(config_path, chain_len: int, theta: float | None, runs: int | None, seed=None) -> int:
    cfg = load_config(config_path, seed)
    theta = cfg.controller.theta_init if theta is None else theta
    runs = cfg.uncertainty_runs if runs is None else runs
    est = estimate_bound_for_theta(chain_len, cfg.noise.with_seed(cfg.uncertainty_seed), theta, runs,
                                   cfg.model, cfg.hdv)
    print(json.dumps({"chain_len": chain_len, "theta_target": theta, "theta": est.theta,
                      "w_s": est.bound.ws, "w_v": est.bound.wv, "samples": est.samples}))
    return EXIT_OK


def cmd_gain(config_path, bound: float | None = None, seed=None) -> int:
    cfg = load_config(config_path, seed)
    m = cfg.model
    try:
        g = synthesize_gain(m, cfg.controller.weights_lqr)
    except UnstableGainError as exc:
        print(f"gain synthesis failed: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if bound is None:
        box = segment_uncertainty(cfg.platoon.segments()[0], cfg).bound
    else:
        box = Box2.square(bound)
    tube = compute_mrpi(g.a_k, box, cfg.controller.mrpi)
    eig = np.linalg.eigvals(g.a_k)
    print(json.dumps({
        "k": g.k.tolist(),
        "eigenvalues": [[float(z.real), float(z.imag)] for z in eig],
        "spectral_radius": g.spectral_radius,
        "bound": list(box.half_widths),
        "mrpi_vertices": tube.vertices().tolist(),
    }))
    return EXIT_OK


@dataclass
class FigureOptions:
    seeds: int = 20
    steps: int | None = None
    bound_runs: int = 1000
    penetration_length: int = 100


def _fig4(cfg: ScenarioConfig):
    n = cfg.noise
    quiet = run_scenario(cfg.with_(noise=HdvNoise(0.0, 0.0, n.trunc_s, n.trunc_v, n.seed)))
    fig4a = quiet.first_plans[0].to_csv()
    res = run_scenario(cfg)
    plan = res.first_plans[0]
    c = res.cav_index[0]
    rows = []
    for k in range(res.steps):
        j = k - res.disturbances[0][0]
        u_bar = float(plan.u_bar[j]) if 0 <= j < plan.n_p else 0.0
        rows.append([k, float(res.v[k, 0]), float(res.v[k, c - 1]), float(res.v[k, c]),
                     float(res.deviations[k, 0, 0]), float(res.deviations[k, 0, 1]),
                     float(res.u[k, c]), u_bar, int(res.in_tube[k, 0])])
    head = ["step", "v_lead", "v_hdv_rear", "v_cav", "dev_s", "dev_v", "u", "u_bar", "in_tube"]
    return fig4a, _csv(head, rows)


def cmd_figures(output_dir: str, config_path: str | None = None, opts: FigureOptions = FigureOptions()) -> int:
    base = load_config(config_path)
    if opts.steps is not None:
        base = base.with_(steps=opts.steps)
    base = base.with_(uncertainty_runs=max(opts.bound_runs, 1000))
    out = Path(output_dir)
    files: dict[str, str] = {}
    manifest: dict[str, str] = {}

    def emit(name, text, what):
        files[name] = text
        manifest[name] = what

    try:
        p1 = base.with_(platoon=PlatoonSpec("P1"), disturbance=DisturbanceSpec("single"))
        a, b = _fig4(p1)
        emit("fig4a.csv", a, "f-CAV plan without HDV uncertainty (P-1, scenario 1)")
        emit("fig4b.csv", b, "actual speeds, deviation from the plan, accelerations (P-1, scenario 1)")

        m = base.model
        rows = []
        for n in range(1, 11):
            est = estimate_bound_for_theta(n, base.noise.with_seed(base.uncertainty_seed),
                                           base.controller.theta_init, base.uncertainty_runs, m, base.hdv)
            rows.append([n, est.bound.ws, est.bound.wv, est.theta])
        emit("fig5d.csv", _csv(["n", "w_s", "w_v", "theta"], rows),
             "probabilistic bound versus number of consecutive HDVs")

        table = penetration_sweep(opts.penetration_length, RATES, base.controller.theta_init, base)
        rows = [[rate, j, bx.ws, bx.wv] for rate, boxes in table.items() for j, bx in enumerate(boxes)]
        emit("fig6a.csv", _csv(["rate", "cav", "w_s", "w_v"], rows),
             "per-CAV bound versus penetration rate")

        g = synthesize_gain(m, base.controller.weights_lqr)
        rows = []
        for w in (0.1, 0.2, 0.3):
            for i, (x, y) in enumerate(compute_mrpi(g.a_k, Box2.square(w), base.controller.mrpi).vertices()):
                rows.append([w, i, float(x), float(y)])
        emit("fig6b.csv", _csv(["bound", "vertex", "e_s", "e_v"], rows),
             "mRPI sets for bounds 0.1, 0.2, 0.3")

        sweep = sweep_lambda(p1, LAMBDAS, range(base.seed, base.seed + opts.seeds))
        mpc_cfgs = [p1.with_(baseline="per_step", disturbance=DisturbanceSpec("poisson", lam=lam)) for lam in LAMBDAS]
        mpc = run_many(mpc_cfgs)
        rows = []
        for r, b_res in zip(sweep, mpc):
            if isinstance(b_res, Exception):
                raise b_res
            rows.append([r["lambda"], r["mean_triggers"], r["max_triggers"], b_res.triggers[0]["ff_triggers"],
                         r["mean_disturbances"]])
        emit("fig7.csv", _csv(["lambda", "tube_mean_triggers", "tube_max_triggers", "mpc_triggers",
                               "mean_disturbances"], rows),
             "feedforward/communication triggers, tube controller versus per-step MPC")

        for tag, lam in zip("abcd", LAMBDAS):
            res = run_scenario(p1.with_(disturbance=DisturbanceSpec("poisson", lam=lam)))
            emit(f"fig8{tag}.csv", res.to_csv(), f"P-1, scenario 2, lambda={lam:g}")

        p2 = base.with_(platoon=PlatoonSpec("P2"))
        p2_runs = [("a", DisturbanceSpec("single"), "scenario 1")] + [
            (tag, DisturbanceSpec("poisson", lam=lam), f"scenario 2, lambda={lam:g}")
            for tag, lam in zip("bcd", (7.5, 5.0, 2.5))
        ]
        for tag, dist, what in p2_runs:
            res = run_scenario(p2.with_(disturbance=dist))
            emit(f"fig9{tag}.csv", res.to_csv(), f"P-2, {what}")
    except HardInfeasibilityError as exc:
        print(f"figure run failed: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE

    for name, text in files.items():
        write_atomic(out / name, text)
    write_atomic(out / "manifest.json", _dump(manifest))
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tube-platoon", description="Event-triggered tube MPC for mixed platoons")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, out=True):
        p.add_argument("--config", help="scenario JSON (defaults apply to missing keys)")
        p.add_argument("--seed", type=int, help="override the scenario seed")
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("run", help="simulate one scenario"))
    p.add_argument("--format", choices=("csv", "json"), default="csv")
    p = common(sub.add_parser("sweep-lambda", help="trigger counts over disturbance frequencies"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--lambdas", type=float, nargs="+", default=list(LAMBDAS))
    p = common(sub.add_parser("sweep-penetration", help="bounds over CAV penetration rates"))
    p.add_argument("--length", type=int, default=100)
    p.add_argument("--rates", type=float, nargs="+", default=list(RATES))
    p.add_argument("--theta", type=float)
    p = common(sub.add_parser("estimate-bound", help="Monte-Carlo W_theta for an HDV chain"), out=False)
    p.add_argument("--chain-len", type=int, default=5)
    p.add_argument("--theta", type=float)
    p.add_argument("--runs", type=int)
    p = common(sub.add_parser("figures", help="regenerate the figure data files"))
    p.add_argument("--seeds", type=int, default=20)
    p.add_argument("--steps", type=int)
    p.add_argument("--bound-runs", type=int, default=1000)
    p.add_argument("--penetration-length", type=int, default=100)
    p = common(sub.add_parser("gain", help="print K, closed-loop eigenvalues and the mRPI set"), out=False)
    p.add_argument("--bound", type=float, help="square uncertainty bound (default: estimated W_theta)")
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed, args.format)
        if args.command == "sweep-lambda":
            return cmd_sweep_lambda(args.config, args.out, args.seed, args.seeds, args.lambdas)
        if args.command == "sweep-penetration":
            return cmd_sweep_penetration(args.config, args.out, args.seed, args.length, args.rates, args.theta)
        if args.command == "estimate-bound":
            return cmd_estimate_bound(args.config, args.chain_len, args.theta, args.runs, args.seed)
        if args.command == "figures":
            if args.seed is not None:
                print("figures use fixed seeds; --seed is ignored", file=sys.stderr)
            opts = FigureOptions(args.seeds, args.steps, args.bound_runs, args.penetration_length)
            return cmd_figures(args.out, args.config, opts)
        if args.command == "gain":
            return cmd_gain(args.config, args.bound, args.seed)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (ValueError, MrpiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
