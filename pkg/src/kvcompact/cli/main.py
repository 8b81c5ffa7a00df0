"""``kvcompact`` command-line entry point."""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

from ..errors import ConfigError, InvalidInputError, KVCompactError, OutOfMemoryError, SchemaVersionError, TraceError
from .config import SimConfig, load_config
from .report import Report, parse_report, write_report
from .trace import read_trace, write_trace
from .workload import Workload, example_workload, generate

EXIT_OK, EXIT_CONFIG, EXIT_TRACE, EXIT_OOM = 0, 2, 3, 4


def _config(args) -> SimConfig:
    return load_config(args.config, {"seed": args.seed, "threads": args.threads})


def _config_echo(cfg: SimConfig) -> dict:
    # thread count is left out so outputs do not depend on it
    return {k: v for k, v in cfg.items() if k != "threads"}


def build_workload(cfg: SimConfig) -> Workload:
    if cfg.scenario == "example":
        return example_workload(cfg.seed, cfg.head_dim)
    return generate(cfg.seed, cfg.shape, cfg.num_requests, (cfg.prompt_len_min, cfg.prompt_len_max),
                    (cfg.gen_len_min, cfg.gen_len_max), cfg.arrival_rate, (cfg.zipf_min, cfg.zipf_max))


def _trace_config(cfg: SimConfig, wl: Workload) -> SimConfig:
    s = wl.shape
    if "head_dim" in cfg.explicit and cfg.head_dim != s.head_dim:
        raise ConfigError(f"config head_dim={cfg.head_dim} but the trace has {s.head_dim}")
    return replace(cfg, layers=s.layers, kv_heads=s.kv_heads, queries_per_kv=s.queries_per_kv, head_dim=s.head_dim)


def _fraction_dict(payload, full) -> dict:
    return {"payload": float(payload), "payload_exact": f"{payload.numerator}/{payload.denominator}",
            "full": float(full)}


def cmd_gen_workload(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "trace.jsonl"
    write_trace(build_workload(cfg), path)
    print(path)
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import run_workload

    cfg = _config(args)
    wl = read_trace(args.trace)
    cfg = _trace_config(cfg, wl)
    res = run_workload(wl, cfg.policy(), cfg.geometry(), cfg.total_pages or None, cfg.threads)
    report = Report(
        kind="run", config=_config_echo(cfg), memory_fraction=_fraction_dict(res.payload_fraction, res.full_fraction),
        breakdown=res.breakdown, batch_size=res.batch_size, bytes_touched=res.bytes_touched,
        quality_error=res.quality_error,
        simulation={"key_fraction": float(res.key_fraction), "value_fraction": float(res.value_fraction),
                    "requests": res.per_request, "pages_allocated": res.pages_allocated,
                    "pages_freed": res.pages_freed},
    )
    for p in write_report(report, args.out):
        print(p)
    print(f"memory fraction (payload) {report.memory_fraction['payload_exact']} = "
          f"{report.memory_fraction['payload']:.6f}")
    return EXIT_OK


def _serving_dict(run) -> dict:
    return {"batch_size": run.batch_size, "queue_length": run.queue_length, "held_pages": run.held_pages,
            "mean_active_batch": run.mean_active_batch, "saturated_batch": run.saturated_batch,
            "peak_batch": run.peak_batch, "completed": run.completed, "ticks": run.ticks,
            "pages_allocated": run.pages_allocated, "pages_freed": run.pages_freed,
            "terminal_free": run.terminal_free, "total_pages": run.total_pages}


def cmd_simulate(args) -> int:
    from .runner import default_pages
    from .simulate import simulate

    cfg = _config(args)
    wl = read_trace(args.trace) if args.trace else build_workload(cfg)
    if args.trace:
        cfg = _trace_config(cfg, wl)
    params, geom = cfg.policy(), cfg.geometry()
    pages = cfg.total_pages or default_pages(wl, geom, params)
    res = simulate(wl, params, geom, pages, cfg.threads, cfg.max_ticks)
    report = Report(
        kind="simulate", config=_config_echo(cfg),
        memory_fraction={"payload": float(res.payload_fraction),
                         "payload_exact": f"{res.payload_fraction.numerator}/{res.payload_fraction.denominator}",
                         "reservation": res.reservation_fraction},
        batch_size=res.compressed.batch_size,
        simulation={"compressed": _serving_dict(res.compressed), "baseline": _serving_dict(res.baseline),
                    "capacity_ratio": res.capacity_ratio},
    )
    for p in write_report(report, args.out):
        print(p)
    print(f"saturated batch {res.compressed.saturated_batch:.3f} vs baseline {res.baseline.saturated_batch:.3f} "
          f"(x{res.capacity_ratio:.2f})")
    return EXIT_OK


def _grid(text: str | None, default) -> list[float]:
    if text is None:
        return list(default)
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad threshold grid {text!r}") from None


def cmd_calibrate(args) -> int:
    from ..calibration import DEFAULT_ALPHA_H, DEFAULT_ALPHA_L, calibrate

    cfg = _config(args)
    wl = read_trace(args.trace) if args.trace else build_workload(cfg)
    if args.trace:
        cfg = _trace_config(cfg, wl)
    points, frontier = calibrate(wl, cfg.policy(), cfg.geometry(), _grid(args.alpha_h, DEFAULT_ALPHA_H),
                                 _grid(args.alpha_l, DEFAULT_ALPHA_L), cfg.threads)

    def row(p):
        return {"alpha_h": p.alpha_h, "alpha_l": p.alpha_l, "memory_fraction": p.memory_fraction,
                "quality_error": p.quality_error}

    report = Report(kind="calibrate", config=_config_echo(cfg), points=[row(p) for p in points],
                    frontier=[row(p) for p in frontier])
    for p in write_report(report, args.out):
        print(p)
    return EXIT_OK


def cmd_report(args) -> int:
    try:
        text = Path(args.input).read_text(encoding="utf-8")
    except OSError as exc:
        raise TraceError(f"cannot read report: {exc}") from None
    try:
        report = parse_report(text)
    except InvalidInputError as exc:
        raise TraceError(f"malformed report: {exc}") from None
    for p in write_report(report, args.out, Path(args.input).stem):
        print(p)
    mf = report.memory_fraction
    if mf:
        print("memory fraction: " + ", ".join(f"{k}={v}" for k, v in mf.items()))
    if report.breakdown:
        print("breakdown: " + ", ".join(f"{k}={v:.4f}" for k, v in report.breakdown.items()))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="override the config seed")
    common.add_argument("--config", default=None, help="key = value config file")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--threads", type=int, default=None, help="worker threads (results do not depend on it)")

    parser = argparse.ArgumentParser(prog="kvcompact", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-workload", parents=[common], help="write a seeded synthetic trace").set_defaults(
        func=cmd_gen_workload)
    p = sub.add_parser("run", parents=[common], help="compress a trace and report memory and quality")
    p.add_argument("--trace", required=True)
    p.set_defaults(func=cmd_run)
    p = sub.add_parser("simulate", parents=[common], help="serving simulation against a 16-bit baseline")
    p.add_argument("--trace", default=None, help="use this trace instead of generating one")
    p.set_defaults(func=cmd_simulate)
    p = sub.add_parser("calibrate", parents=[common], help="sweep alpha_h x alpha_l")
    p.add_argument("--trace", default=None)
    p.add_argument("--alpha-h", default=None, help="comma-separated grid")
    p.add_argument("--alpha-l", default=None, help="comma-separated grid")
    p.set_defaults(func=cmd_calibrate)
    p = sub.add_parser("report", parents=[common], help="validate a report and re-render its CSV files")
    p.add_argument("--input", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None and args.threads < 1:
        print("error: --threads must be positive", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TraceError, SchemaVersionError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_TRACE
    except OutOfMemoryError as exc:
        print(f"out of memory: {exc}", file=sys.stderr)
        return EXIT_OOM
    except KVCompactError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
