"""Command-line front end: reproducible experiments over the library.

Subcommands: simulate, sweep-tradeoff, rate-curve, optimize, finite-dp,
validate. Every run records its seed; identical config plus seed
reproduces output files byte for byte. CSV outputs carry a header row and
a trailing metadata comment block; a JSON sidecar (<out>.meta.json)
repeats the metadata. Exit codes: 0 success, 2 validation failure,
3 configuration error. PRIVSAMPLE_THREADS caps sweep parallelism.
"""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__
from .configio import config_hash, dump_schedule, finite_model_from_config, load_json, load_schedule, system_from_config
from .errors import ConfigError
from .finite import DpGridSpec, dp_solve
from .loss import mi_accumulate, rollout_losses
from .optimizer import FeedbackPolicyParams, OptimizerConfig, stackelberg_optimize
from .policy import degenerate_schedule, open_loop_schedule
from .reconstruct import evaluate_schedule, kalman_additive_baseline, rollout_closed_loop
from .rngs import substream
from .validation import run_validation


def _max_workers() -> int:
    cap = os.environ.get("PRIVSAMPLE_THREADS")
    if cap:
        try:
            return max(1, int(cap))
        except ValueError as exc:
            raise ConfigError(f"PRIVSAMPLE_THREADS must be an integer, got {cap!r}") from exc
    return min(8, os.cpu_count() or 1)


def _write_csv(path, header, rows, meta: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join("" if v is None else f"{v}" for v in row))
    lines.append("# metadata")
    for key in sorted(meta):
        lines.append(f"# {key}={meta[key]}")
    path.write_text("\n".join(lines) + "\n")
    Path(str(path) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def _meta(args, cfg: dict, extra: dict | None = None) -> dict:
    meta = {
        "config_hash": config_hash(cfg),
        "seed": args.seed,
        "version": __version__,
        "command": args.command,
    }
    if extra:
        meta.update(extra)
    return meta


def _fmt(x, digits=10) -> str:
    return f"{float(x):.{digits}g}"


def _parse_grid(text) -> list:
    try:
        return [float(tok) for tok in str(text).split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from exc


# ---------------------------------------------------------------------------
# simulate
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    system, cfg = _load_system_with_overrides(args)
    horizon = args.horizon if args.horizon is not None else int(cfg.get("K", 100))
    if args.schedule:
        schedule = load_schedule(args.schedule)
        if schedule.horizon < horizon:
            raise ConfigError("schedule horizon shorter than the requested horizon")
    else:
        schedule = degenerate_schedule("always_sample", horizon, system.n_x)
    rng = substream(args.seed, 0)
    max_tracked = cfg.get("max_tracked_y")
    log = rollout_closed_loop(
        system, schedule, horizon, rng, lam=args.lam, max_tracked_y=max_tracked
    )
    header = ["k"]
    header += [f"x{i}" for i in range(system.n_x)]
    header += [f"y{i}" for i in range(system.n_y)]
    header += ["N", "z_present"]
    header += [f"x_hat{i}" for i in range(system.n_x)]
    header += [f"y_hat{i}" for i in range(system.n_y)]
    rows = []
    for k, state in enumerate(log.states):
        rows.append(
            [k]
            + [_fmt(v) for v in state.x]
            + [_fmt(v) for v in state.y]
            + [log.decisions[k], int(log.outputs[k] is not None)]
            + [_fmt(v) for v in log.reconstructions[k]]
            + [_fmt(v) for v in log.y_estimates[k]]
        )
    rate = float(np.mean(log.decisions))
    extra = {"sampling_rate": rate}
    if any(b.approximate for b in log.per_step_loss):
        extra["info_terms_approximate"] = True  # trajectory window truncated
    _write_csv(args.out, header, rows, _meta(args, cfg, extra))
    if args.belief_trace:
        _write_belief_trace(args, system, schedule, horizon, cfg)
    return 0


def _write_belief_trace(args, system, schedule, horizon, cfg):
    from . import belief as bel
    from .linalg import logdet_psd

    rng = substream(args.seed, 0)  # same stream: replays the same rollout
    b = bel.init_belief(system)
    state = system.draw_initial(rng)
    rows = []

    def record(phase_belief):
        pyy = phase_belief.p_yy
        try:
            ld = _fmt(logdet_psd(pyy))
        except Exception:
            ld = ""
        rows.append(
            [phase_belief.k, phase_belief.phase]
            + [_fmt(v) for v in phase_belief.mean[: system.n_x + system.n_y]]
            + [_fmt(v) for v in np.diag(phase_belief.cov)[: system.n_x + system.n_y]]
            + [ld]
        )

    for k in range(horizon + 1):
        record(b)
        x = state[: system.n_x]
        f = schedule.effective_f_at(k)
        g = schedule.g_at(k, x_pred=b.x_mean)
        n_k, _ = (
            (1, x) if schedule.kind == "always_sample" else (0, None)
            if schedule.kind == "never_sample"
            else schedule.decide_at(k, x, rng, x_pred=b.x_mean)
        )
        b = bel.update_sample(b, x) if n_k else bel.update_no_sample(b, f, g)
        record(b)
        if k < horizon:
            b = bel.predict(system, b)
            state = system.a_matrix @ state + system.draw_noise(rng)
    header = (
        ["k", "phase"]
        + [f"mean{i}" for i in range(system.n_x + system.n_y)]
        + [f"var{i}" for i in range(system.n_x + system.n_y)]
        + ["logdet_pyy"]
    )
    _write_csv(args.belief_trace, header, rows, _meta(args, cfg))


# ---------------------------------------------------------------------------
# sweep-tradeoff / rate-curve
# ---------------------------------------------------------------------------


def _leak_estimate(system, schedule, horizon, rollouts, seed):
    from .optimizer import _fast_schedule_batch, _ScalarBatchEngine

    rng = substream(seed, 7)
    if _ScalarBatchEngine.applicable(system):
        _, totals, _ = _fast_schedule_batch(system, schedule, 1.0, rollouts, horizon, rng)
    else:
        totals = np.empty(rollouts)
        for r in range(rollouts):
            losses, _ = rollout_losses(system, schedule, 1.0, horizon, rng, mode="belief")
            totals[r] = mi_accumulate(losses)
    se = float(totals.std(ddof=1) / np.sqrt(rollouts)) if rollouts > 1 else 0.0
    return float(totals.mean()), se


def _optimize_one_lambda(system, lam, horizon, args, task_seed):
    """Coarse f-scan for an initial point, then gradient polishing."""
    best_init, best_obj = None, np.inf
    for f0 in (0.3, 1.0, 3.0, 10.0, 30.0):
        params = FeedbackPolicyParams.constant(system, horizon, f0=f0, tied=True)
        rng = substream(task_seed, 1)
        from .optimizer import _NoTangents, _rollout_gradient_terms

        losses = [
            _rollout_gradient_terms(_NoTangents(params), system, lam, horizon, rng)[0]
            for _ in range(48)
        ]
        obj = float(np.mean(losses))
        if obj < best_obj:
            best_obj, best_init = obj, params
    config = OptimizerConfig(
        alpha=args.opt_alpha,
        rollouts_per_step=args.opt_rollouts,
        max_iters=args.opt_iters,
        seed=task_seed,
        validation_rollouts=args.opt_validation,
    )
    return stackelberg_optimize(config, system, lam, best_init)


def _evaluate_family_rows(system, horizon, rollouts, seed, lambdas, f_grid, noise_grid, args):
    rows = []
    workers = _max_workers()

    def eval_open_loop(f_val):
        sched = open_loop_schedule(np.array([[f_val]]), horizon)
        report = evaluate_schedule(system, sched, horizon, rollouts, substream(seed, 100))
        leak, leak_se = _leak_estimate(system, sched, horizon, args.leak_rollouts, seed)
        return ("open_loop", f"f={f_val:g}", "", report, leak, leak_se)

    def eval_noise(var):
        report = kalman_additive_baseline(
            system, [[var]], horizon, rollouts, substream(seed, 200)
        )
        return ("additive_noise", f"var={var:g}", "", report, None, None)

    def eval_lambda(lam):
        result = _optimize_one_lambda(system, lam, horizon, args, substream_seed(seed, lam))
        report = evaluate_schedule(
            system, result.schedule, horizon, rollouts, substream(seed, 300)
        )
        leak, leak_se = _leak_estimate(
            system, result.schedule, horizon, args.leak_rollouts, seed
        )
        return ("optimized", f"lambda={lam:g}", lam, report, leak, leak_se)

    tasks = [(eval_open_loop, f) for f in f_grid]
    tasks += [(eval_noise, v) for v in noise_grid]
    tasks += [(eval_lambda, lam) for lam in lambdas]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        results = list(pool.map(lambda t: t[0](t[1]), tasks))
    for family, param, lam, report, leak, leak_se in results:
        n = rollouts
        rows.append(
            [
                family,
                param,
                _fmt(lam) if lam != "" else "",
                _fmt(report.mean_x_error),
                _fmt(report.x_errors.std(ddof=1) / np.sqrt(len(report.x_errors))),
                _fmt(report.mean_y_error),
                _fmt(report.y_errors.std(ddof=1) / np.sqrt(len(report.y_errors))),
                _fmt(leak) if leak is not None else "",
                _fmt(leak_se) if leak_se is not None else "",
                _fmt(report.sampling_rate),
            ]
        )
    return rows


def substream_seed(seed: int, lam: float) -> int:
    # stable per-lambda child seed
    return (seed * 1_000_003 + int(round(lam * 1e6))) % (2**63)


def cmd_sweep_tradeoff(args) -> int:
    system, cfg = _load_system_with_overrides(args)
    horizon = args.horizon if args.horizon is not None else int(cfg.get("K", 100))
    rows = _evaluate_family_rows(
        system,
        horizon,
        args.rollouts,
        args.seed,
        _parse_grid(args.lambdas),
        _parse_grid(args.f_grid),
        _parse_grid(args.noise_grid),
        args,
    )
    header = [
        "family",
        "f_spec",
        "lambda",
        "mean_x_error",
        "x_error_stderr",
        "mean_y_error",
        "y_error_stderr",
        "mean_leak_nats",
        "leak_stderr",
        "sampling_rate",
    ]
    _write_csv(args.out, header, rows, _meta(args, cfg, {"horizon": horizon}))
    return 0


def cmd_rate_curve(args) -> int:
    system, cfg = _load_system_with_overrides(args)
    horizon = args.horizon if args.horizon is not None else int(cfg.get("K", 100))
    rows = _evaluate_family_rows(
        system,
        horizon,
        args.rollouts,
        args.seed,
        _parse_grid(args.lambdas),
        _parse_grid(args.f_grid),
        [],
        args,
    )
    out_rows = [[r[0], r[1], r[9], r[3], r[4]] for r in rows]
    header = ["family", "f_spec", "sampling_rate", "mean_x_error", "x_error_stderr"]
    _write_csv(args.out, header, out_rows, _meta(args, cfg, {"horizon": horizon}))
    return 0


# ---------------------------------------------------------------------------
# optimize / finite-dp / validate
# ---------------------------------------------------------------------------


def cmd_optimize(args) -> int:
    system, cfg = _load_system_with_overrides(args)
    horizon = args.horizon if args.horizon is not None else int(cfg.get("K", 100))
    result = _optimize_one_lambda(system, args.lam, horizon, args, args.seed)
    dump_schedule(result.schedule, args.out)
    meta = _meta(
        args,
        cfg,
        {"lambda": args.lam, "objective": result.objective, "converged": result.converged},
    )
    Path(str(args.out) + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    if args.trace_out:
        header = [
            "iter",
            "objective",
            "stderr",
            "sampling_rate",
            "grad_norm_theta",
            "grad_norm_phi",
        ]
        rows = [
            [
                row.iteration,
                _fmt(row.objective),
                _fmt(row.stderr),
                _fmt(row.sampling_rate),
                _fmt(row.grad_norm_theta),
                _fmt(row.grad_norm_phi),
            ]
            for row in result.trace
        ]
        _write_csv(args.trace_out, header, rows, meta)
    return 0


def cmd_finite_dp(args) -> int:
    cfg = load_json(args.config)
    model = finite_model_from_config(cfg)
    horizon = args.horizon if args.horizon is not None else int(cfg.get("K", 2))
    if horizon > 3:
        raise ConfigError("finite-dp supports horizons up to 3")
    result = dp_solve(model, args.lam, horizon, DpGridSpec())
    header = ["stage", "node", "value", "argmin_policy"]
    rows = []
    for node in result.nodes:
        stage = len(node.history)
        hist = "root" if not node.history else "/".join(node.history)
        policy_txt = ";".join(
            f"a0({x},{','.join(map(str, mem))})={p:.3f}"
            for (x, mem), p in sorted(node.policy.table.items())
        )
        rows.append([stage, hist, _fmt(node.value), policy_txt])
    _write_csv(
        args.out,
        header,
        rows,
        _meta(args, cfg, {"lambda": args.lam, "value": result.value, "refine_drop": result.refine_drop}),
    )
    return 0


def cmd_validate(args) -> int:
    names = args.names.split(",") if args.names else None
    results = run_validation(names=names)
    failed = [r for r in results if not r.passed]
    for r in results:
        print(f"{'PASS' if r.passed else 'FAIL'}  {r.name:36s} {r.seconds:6.1f}s  {r.detail}")
    if args.out:
        header = ["name", "passed", "seconds", "detail"]
        rows = [[r.name, int(r.passed), _fmt(r.seconds, 4), r.detail.replace(",", ";")] for r in results]
        _write_csv(args.out, header, rows, {"command": "validate", "version": __version__})
    if failed:
        print(f"{len(failed)} check(s) failed", file=sys.stderr)
        return 2
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def _load_system_with_overrides(args):
    cfg = load_json(args.config)
    system = system_from_config(cfg)
    return system, cfg


def _add_common(p, with_system=True):
    if with_system:
        p.add_argument("--config", required=True, help="system config JSON")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output path")


def _add_opt_flags(p):
    p.add_argument("--opt-iters", type=int, default=60)
    p.add_argument("--opt-rollouts", type=int, default=48)
    p.add_argument("--opt-alpha", type=float, default=0.25)
    p.add_argument("--opt-validation", type=int, default=256)
    p.add_argument("--leak-rollouts", type=int, default=200)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="privsample",
        description="Privacy-aware stochastic sampling experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="one closed-loop rollout to CSV")
    _add_common(p)
    p.add_argument("--schedule", help="schedule JSON (default: always sample)")
    p.add_argument("--horizon", type=int)
    p.add_argument("--lambda", dest="lam", type=float, default=1.0)
    p.add_argument("--belief-trace", help="optional belief trace CSV path")
    p.set_defaults(fn=cmd_simulate)

    p = sub.add_parser("sweep-tradeoff", help="x-error vs y-error trade-off families")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--rollouts", type=int, default=10_000)
    p.add_argument("--lambdas", default="0.2,0.6,1.5,4.0")
    p.add_argument("--f-grid", default="0.05,0.15,0.5,1.5,4,10,25,60")
    p.add_argument("--noise-grid", default="0.05,0.2,0.5,1.5,4,10,25")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_sweep_tradeoff)

    p = sub.add_parser("rate-curve", help="sampling rate vs x-error")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--rollouts", type=int, default=10_000)
    p.add_argument("--lambdas", default="0.2,0.6,1.5,4.0")
    p.add_argument("--f-grid", default="0.05,0.15,0.5,1.5,4,10,25,60")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_rate_curve)

    p = sub.add_parser("optimize", help="optimize a schedule for one lambda")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--lambda", dest="lam", type=float, required=True)
    p.add_argument("--trace-out", help="convergence trace CSV path")
    _add_opt_flags(p)
    p.set_defaults(fn=cmd_optimize)

    p = sub.add_parser("finite-dp", help="belief-recursion DP on a finite model")
    _add_common(p)
    p.add_argument("--horizon", type=int)
    p.add_argument("--lambda", dest="lam", type=float, default=0.5)
    p.set_defaults(fn=cmd_finite_dp)

    p = sub.add_parser("validate", help="run the oracle validation suite")
    p.add_argument("--names", help="comma-separated name filters")
    p.add_argument("--out", help="optional results CSV")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_validate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
