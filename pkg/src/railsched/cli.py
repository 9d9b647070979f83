"""Command line front end.

Every subcommand builds the same request model the HTTP service accepts and
either runs it in-process (default) or posts it to ``--server URL``.  Output
is a short human-readable summary on stdout; errors go to stderr and flip
the exit code to 1.
"""
from __future__ import annotations

import argparse
import json
import sys
from typing import Optional

from .service import ops
from .service.schemas import (
    CompareRequest,
    EvaluateRequest,
    RenderRequest,
    SimulateRequest,
    TrainRequest,
)


def _dispatch(server: Optional[str], endpoint: str, request, local_fn,
              **local_kw):
    """Run locally, or POST the request to a running service."""
    if not server:
        return local_fn(request, **local_kw).model_dump()
    import httpx

    resp = httpx.post(f"{server.rstrip('/')}/{endpoint}",
                      json=request.model_dump(), timeout=None)
    if resp.status_code != 200:
        try:
            detail = resp.json().get("detail", resp.text)
        except ValueError:
            detail = resp.text
        raise RuntimeError(f"server returned {resp.status_code}: {detail}")
    return resp.json()


def _metrics_table(metrics: dict) -> str:
    rows = [("arrived", metrics["arrived"]),
            ("stop_seconds", metrics["stop_seconds"]),
            ("stop_events", metrics["stop_events"]),
            ("mean_deviation", f"{metrics['mean_deviation']:.3f}")]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"  {k:<{width}}  {v}" for k, v in rows)


def _cmd_simulate(args) -> int:
    req = SimulateRequest(
        route_path=args.route, timetable_path=args.timetable,
        od_path=args.od, scenario_path=args.scenario,
        controller=args.controller, checkpoint_path=args.checkpoint,
        horizon_s=args.horizon_s, seed=args.seed, out_dir=args.out_dir,
        svg=args.svg)
    out = _dispatch(args.server, "simulate", req, ops.simulate)
    print(f"simulated with controller={args.controller}; "
          f"wall {out['wall_clock_s']:.1f}s")
    print(_metrics_table(out["metrics"]))
    print(f"  conservation_error  {out['conservation_error']}")
    for key in ("record_path", "metrics_path", "timetable_path", "svg_path"):
        if out.get(key):
            print(f"wrote {out[key]}")
    return 0


def _cmd_train(args) -> int:
    req = TrainRequest(config_path=args.config, out_dir=args.out_dir,
                       iterations=args.iterations, seed=args.seed)
    log = None if args.server or args.quiet else print
    out = _dispatch(args.server, "train", req, ops.run_training, log=log)
    print(f"trained {out['iterations']} iterations "
          f"({out['total_steps']} decisions) in {out['wall_clock_s']:.1f}s; "
          f"final mean return {out['final_mean_return']:.1f}")
    print(f"wrote {out['checkpoint_path']}")
    print(f"wrote {out['curve_path']}")
    return 0


def _cmd_evaluate(args) -> int:
    req = EvaluateRequest(
        checkpoint_path=args.checkpoint, config_path=args.config,
        n_seeds=args.n_seeds, base_seed=args.base_seed,
        stochastic_passengers=not args.deterministic_passengers,
        out_path=args.out)
    out = _dispatch(args.server, "evaluate", req, ops.run_evaluation)
    summary = out["summary"]
    print(f"evaluated {summary['n_seeds']} seeds")
    for key in sorted(summary):
        if key == "n_seeds":
            continue
        print(f"  {key:<26}  {summary[key]:.2f}")
    if out.get("out_path"):
        print(f"wrote {out['out_path']}")
    return 0


def _cmd_render(args) -> int:
    req = RenderRequest(record_path=args.record, route_path=args.route,
                        out_path=args.out, width=args.width,
                        height=args.height)
    out = _dispatch(args.server, "render", req, ops.render)
    print(f"wrote {out['out_path']} ({out['bytes_written']} bytes)")
    return 0


def _cmd_compare(args) -> int:
    req = CompareRequest(baseline_path=args.baseline,
                         candidate_path=args.candidate)
    out = _dispatch(args.server, "compare", req, ops.compare)
    keys = ("arrived", "stop_seconds", "stop_events", "mean_deviation")
    b, c, d = out["baseline"], out["candidate"], out["delta_pct"]
    print(f"{'metric':<16} {'baseline':>12} {'candidate':>12} {'delta':>9}")
    print(f"{'controller':<16} {b['controller']:>12} {c['controller']:>12}")
    for k in keys:
        bv, cv = b[k], c[k]
        delta = "n/a" if d[k] is None else f"{d[k]:+.1f}%"
        if isinstance(bv, float):
            print(f"{k:<16} {bv:>12.3f} {cv:>12.3f} {delta:>9}")
        else:
            print(f"{k:<16} {bv:>12} {cv:>12} {delta:>9}")
    if args.json:
        print(json.dumps(out, sort_keys=True))
    return 0


def _cmd_fixtures(args) -> int:
    from .fixtures import service_fixture

    paths = service_fixture().write_files(args.out_dir)
    for key in sorted(paths):
        print(f"wrote {paths[key]}")
    return 0


def _cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    uvicorn.run(create_app(), host=args.host, port=args.port,
                log_level="warning")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="railsched",
        description="Railway traffic replay, rescheduling and evaluation")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_server(p):
        p.add_argument("--server", default=None,
                       help="base URL of a running service; default in-process")

    p = sub.add_parser("simulate", help="run one scenario and record it")
    p.add_argument("--route", required=True)
    p.add_argument("--timetable", required=True)
    p.add_argument("--od", default=None)
    p.add_argument("--scenario", required=True)
    p.add_argument("--controller", default="timetable",
                   choices=("timetable", "all_proceed", "policy"))
    p.add_argument("--checkpoint", default=None,
                   help="policy checkpoint (.npz), for --controller policy")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--horizon-s", type=int, default=None, dest="horizon_s")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--svg", action="store_true",
                   help="also write a time-space diagram")
    add_server(p)
    p.set_defaults(fn=_cmd_simulate)

    p = sub.add_parser("train", help="train a rescheduling policy")
    p.add_argument("--config", required=True, help="training config YAML")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    add_server(p)
    p.set_defaults(fn=_cmd_train)

    p = sub.add_parser("evaluate",
                       help="score a checkpoint against the timetable baseline")
    p.add_argument("--checkpoint", default=None,
                   help="policy checkpoint; omit to score all-proceed")
    p.add_argument("--config", default=None, help="episode config YAML")
    p.add_argument("--n-seeds", type=int, default=20, dest="n_seeds")
    p.add_argument("--base-seed", type=int, default=0, dest="base_seed")
    p.add_argument("--deterministic-passengers", action="store_true")
    p.add_argument("--out", default=None, help="write per-seed results JSONL")
    add_server(p)
    p.set_defaults(fn=_cmd_evaluate)

    p = sub.add_parser("render", help="draw a recorded run as SVG")
    p.add_argument("--record", required=True)
    p.add_argument("--route", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int, default=1100)
    p.add_argument("--height", type=int, default=560)
    add_server(p)
    p.set_defaults(fn=_cmd_render)

    p = sub.add_parser("compare", help="diff the metrics of two recorded runs")
    p.add_argument("--baseline", required=True)
    p.add_argument("--candidate", required=True)
    p.add_argument("--json", action="store_true",
                   help="also print the full comparison as JSON")
    add_server(p)
    p.set_defaults(fn=_cmd_compare)

    p = sub.add_parser("fixtures",
                       help="write the bundled demo line, plans and scenarios")
    p.add_argument("--out-dir", required=True, dest="out_dir")
    p.set_defaults(fn=_cmd_fixtures)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8000)
    p.set_defaults(fn=_cmd_serve)

    return parser


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
