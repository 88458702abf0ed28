"""Command-line entry point: ``packprefetch {stage,serve,calibrate,validate-config}``.

Precedence: command-line flags override the config file, which overrides the
built-in defaults.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional

from . import calibration
from .config import ExperimentConfig, load_config
from .datasets import TraceError
from .service import (
    ServiceConfig,
    SloUnreachable,
    bandwidth_savings,
    capacity_search,
    run,
    slo_threshold,
)
from .stage import PACKING, POLICIES, speedup_grid
from .workload import ConfigError

log = logging.getLogger("packprefetch")

EXIT_OK, EXIT_CONFIG, EXIT_BAND = 0, 2, 3


def _ms(seconds: Optional[float]) -> Optional[str]:
    return None if seconds is None else f"{seconds * 1e3:.3f}"


def _resolve(args: argparse.Namespace) -> ExperimentConfig:
    cfg = load_config(args.config)
    serve, stage = cfg.serve, cfg.stage
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, output_dir=args.out)
    if args.policy is not None:
        cfg = replace(cfg, policy=args.policy)
        serve = replace(serve, policies=[args.policy])
    if args.chunk_size is not None:
        serve = replace(serve, chunk_sizes=[args.chunk_size])
    if args.buffer_bytes is not None:
        stage = replace(stage, buffer_bytes=[args.buffer_bytes])
    if args.bw_savings:
        serve = replace(serve, bw_savings=True)
    if args.target_qps is not None:
        serve = replace(serve, target_qps=args.target_qps)
    if getattr(args, "num_requests", None) is not None:
        serve = replace(serve, num_requests=args.num_requests)
    cfg = replace(cfg, stage=stage, serve=serve)
    try:
        return cfg.validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(cfg: ExperimentConfig) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_report(out: Path, cfg: ExperimentConfig, command: str, body: dict) -> None:
    report = {"command": command, "seed": cfg.seed, "config": cfg.to_dict(), **body}
    with open(out / "report.json", "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_stage(cfg: ExperimentConfig) -> int:
    if cfg.policy == "serial":
        raise ConfigError("stage grids compare packing policies against serial; pick packing or packing-prefetch")
    spec, hw = cfg.model_spec(), cfg.hardware_spec()
    ax = cfg.stage
    cells = speedup_grid(spec, hw, ax.prefill_tokens, ax.kv_tokens, ax.buffer_bytes,
                         ax.decode_requests, ax.attribution)
    header = ["prefill_tokens", "kv_tokens", "buffer_bytes", "policy", "decode_speedup", "overall_speedup",
              "serial_decode_ms", "serial_total_ms", "packed_decode_ms", "packed_total_ms"]
    rows = [[c.prefill_tokens, c.kv_tokens, c.buffer_bytes, c.policy, f"{c.decode_speedup:.4f}",
             f"{c.overall_speedup:.4f}", _ms(c.serial_decode_s), _ms(c.serial_total_s),
             _ms(c.packed_decode_s), _ms(c.packed_total_s)] for c in cells]
    out = _out_dir(cfg)
    _write_csv(out / "grid.csv", header, rows)
    _write_report(out, cfg, "stage", {"cells": len(rows), "grid": [dict(zip(header, r)) for r in rows]})
    for r in rows:
        print(",".join(str(x) for x in r))
    return EXIT_OK


def cmd_serve(cfg: ExperimentConfig) -> int:
    spec, hw = cfg.model_spec(), cfg.hardware_spec()
    s = cfg.serve
    slo_tbt = s.slo_tbt_ms / 1e3 if s.slo_tbt_ms is not None else slo_threshold(spec, hw)
    sweep = [v / 1e3 for v in s.tbt_slo_sweep_ms] or [slo_tbt]
    results, sample_rows, savings = [], [], []
    for name, workload in cfg.workloads().items():
        for chunk in s.chunk_sizes:
            svc = ServiceConfig(chunk_size=chunk, max_decode=s.max_decode,
                                budget_counts_decode=s.budget_counts_decode, warmup_fraction=s.warmup_fraction)
            capacities = {}
            for slo in sweep:
                for pol in s.policies:
                    if workload.fixed_arrivals is not None:
                        m = run(spec, hw, workload.requests(None), POLICIES[pol], svc)
                        entry = {"workload": name, "chunk_size": chunk, "policy": pol, "slo_tbt_ms": _ms(slo),
                                 "metrics": m.summary()}
                        qps = None
                    else:
                        res = capacity_search(spec, hw, workload, POLICIES[pol], slo, s.slo_delay_s, svc,
                                              resolution=s.resolution_qps)
                        qps = res.qps
                        m = run(spec, hw, workload.requests(qps), POLICIES[pol], svc)
                        entry = {"workload": name, "chunk_size": chunk, **res.summary(), "metrics": m.summary()}
                    capacities[(slo, pol)] = qps
                    results.append(entry)
                    print(f"{name} chunk={chunk} slo={_ms(slo)}ms {pol}: "
                          f"qps={'trace' if qps is None else f'{qps:.3f}'} p99_tbt={_ms(m.p99_tbt)}ms")
                    for metric, samples in (("ttft", m.ttft_samples), ("tbt", m.tbt_samples),
                                            ("sched_delay", m.sched_delay_samples)):
                        sample_rows.extend([name, chunk, _ms(slo), pol, qps, metric, _ms(v)] for v in samples)
            if s.bw_savings and workload.fixed_arrivals is None:
                target = s.target_qps if s.target_qps is not None else capacities.get((slo_tbt, "packing-prefetch"))
                if target is None:
                    raise ConfigError("bw_savings needs target_qps or the packing-prefetch policy in the run")
                b = bandwidth_savings(spec, hw, workload, target, slo_tbt, s.slo_delay_s, svc)
                savings.append({"workload": name, "chunk_size": chunk, "target_qps": target,
                                "scale": round(b.scale, 4), "saturated": b.saturated,
                                "probes": [[round(x, 4), ok] for x, ok in b.probes]})
                print(f"{name} chunk={chunk}: packing-only needs {b.scale:.3f}x HBM bandwidth at {target:.3f} QPS"
                      + (" (saturated)" if b.saturated else ""))
    out = _out_dir(cfg)
    _write_csv(out / "samples.csv", ["workload", "chunk_size", "slo_tbt_ms", "policy", "qps", "metric", "value_ms"],
               sample_rows)
    _write_report(out, cfg, "serve", {"slo_tbt_ms": _ms(slo_tbt), "capacity": results,
                                      "bandwidth_savings": savings})
    return EXIT_OK


def cmd_calibrate(cfg: ExperimentConfig, service: bool = True) -> int:
    rows = calibration.calibrate(cfg.serve.num_requests, cfg.seed, service)
    for r in rows:
        print(r.line())
    out = _out_dir(cfg)
    _write_csv(out / "grid.csv", ["criterion", "metric", "reference", "simulated", "ratio", "lo", "hi", "passed"],
               [[r.criterion, r.metric, r.reference, f"{r.simulated:.6g}",
                 None if r.ratio is None else f"{r.ratio:.4f}", r.lo, r.hi, r.passed] for r in rows])
    failed = [r for r in rows if r.passed is False]
    _write_report(out, cfg, "calibrate", {"rows": [r.to_dict() for r in rows], "failed": len(failed)})
    print(f"{len(rows)} rows, {len(failed)} outside their band")
    return EXIT_BAND if failed else EXIT_OK


def cmd_validate(cfg: ExperimentConfig) -> int:
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment TOML file")
    common.add_argument("--policy", choices=sorted(POLICIES))
    common.add_argument("--chunk-size", type=int)
    common.add_argument("--buffer-bytes", type=int, help="prefetch buffer size for stage grids")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--bw-savings", action="store_true", help="also search HBM bandwidth savings")
    common.add_argument("--target-qps", type=float)
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="packprefetch", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("stage", parents=[common], help="stage-level speedup grid")
    serve = sub.add_parser("serve", parents=[common], help="SLO-constrained capacity search")
    serve.add_argument("--num-requests", type=int)
    cal = sub.add_parser("calibrate", parents=[common], help="compare against reference numbers")
    cal.add_argument("--num-requests", type=int)
    cal.add_argument("--stage-only", action="store_true", help="skip the service-level scenarios")
    sub.add_parser("validate-config", parents=[common], help="parse and validate a config")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _resolve(args)
        if args.command == "stage":
            return cmd_stage(cfg)
        if args.command == "serve":
            return cmd_serve(cfg)
        if args.command == "calibrate":
            return cmd_calibrate(cfg, service=not args.stage_only)
        return cmd_validate(cfg)
    except (ConfigError, TraceError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SloUnreachable as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
