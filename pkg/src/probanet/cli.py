"""Command-line front end.

Subcommands: gradcheck (finite-difference verification), count (gate
parameter/MAC accounting), train (baseline-vs-gated experiment runner),
heatmap (gate-weight visualizations for an existing run).

Exit codes: 0 success, 1 validation failure, 2 usage or configuration
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace

from .artifacts import (
    heatmap_files,
    summary_csv,
    variant_name,
    write_run_dir,
)
from .config import format_config, parse_config
from .errors import ConfigError, DomainError, ProbanetError
from .gate import mac_count, param_count, param_megabytes
from .gradcheck import CHECKS, DEFAULT_SHAPES, REL_TOL, run_suite
from .sim import SimConfig
from .training import (
    TrainConfig,
    build_scene_pool,
    run_experiment,
    run_partial,
    run_training,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="probanet",
        description=(
            "Proposal-weighting gate with threshold truncation and a "
            "variance-constraint loss, on a synthetic imbalance simulator."
        ),
    )
    sub = parser.add_subparsers(dest="command")

    p_count = sub.add_parser(
        "count", help="report the gate's extra parameters and MACs"
    )
    p_count.add_argument("--channels", type=int, required=True)
    p_count.add_argument("--anchors", type=int, required=True)
    p_count.add_argument("--reduction", type=int, required=True)
    p_count.add_argument("--height", type=int, default=38)
    p_count.add_argument("--width", type=int, default=50)
    p_count.set_defaults(func=cmd_count)

    p_grad = sub.add_parser(
        "gradcheck", help="verify analytic gradients against differencing"
    )
    p_grad.add_argument("--seed", type=int, default=0)
    p_grad.add_argument(
        "--eps", type=float, default=1e-5, help="central-difference step"
    )
    p_grad.add_argument(
        "--shapes",
        type=str,
        default=None,
        help="comma-separated HxWxC list, e.g. 4x4x4,6x6x8",
    )
    p_grad.add_argument(
        "--op", choices=sorted(CHECKS), default=None, help="check one op only"
    )
    p_grad.add_argument("--seeds", type=int, default=5)
    p_grad.set_defaults(func=cmd_gradcheck)

    p_train = sub.add_parser(
        "train", help="run the paired experiment (or one variant)"
    )
    p_train.add_argument("--config", type=str, default=None)
    p_train.add_argument("--out", type=str, required=True)
    group = p_train.add_mutually_exclusive_group()
    group.add_argument("--baseline", action="store_true")
    group.add_argument("--probanet", action="store_true")
    p_train.add_argument("--seeds", type=int, default=10)
    p_train.set_defaults(func=cmd_train)

    p_heat = sub.add_parser(
        "heatmap", help="render gate-weight images for an existing run"
    )
    p_heat.add_argument("--run", type=str, required=True)
    p_heat.add_argument("--channel", type=int, required=True)
    p_heat.add_argument("--step", type=int, required=True)
    p_heat.add_argument("--scale", type=int, default=16)
    p_heat.add_argument(
        "--plain", action="store_true", help="emit P2/P3 instead of P5/P6"
    )
    p_heat.set_defaults(func=cmd_heatmap)

    return parser


def cmd_count(args) -> int:
    try:
        params = param_count(args.channels, args.anchors, args.reduction)
        macs = mac_count(
            args.height, args.width, args.channels, args.anchors, args.reduction
        )
    except DomainError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    mb = param_megabytes(params)
    giga = macs / 1e9
    print(
        f"extra cost of the gate (C={args.channels}, C'={args.anchors}, "
        f"r={args.reduction}, grid {args.height}x{args.width})"
    )
    print(f"params {params} ({mb:.2f} MB), macs {macs} ({giga:.2f} G)")
    return 0


def cmd_gradcheck(args) -> int:
    shapes = DEFAULT_SHAPES
    if args.shapes:
        parsed = []
        for tok in args.shapes.split(","):
            parts = tok.strip().split("x")
            if len(parts) != 3:
                raise ConfigError(f"bad shape {tok!r}, expected HxWxC")
            parsed.append(tuple(int(p) for p in parts))
        shapes = tuple(parsed)
    ops = [args.op] if args.op else None
    results = run_suite(
        seed=args.seed, h=args.eps, shapes=shapes, ops=ops, n_seeds=args.seeds
    )
    failed = []
    for res in results:
        status = "PASS" if res.passed else "FAIL"
        print(f"{res.op}: worst relative error {res.worst:.3e} [{status}]")
        if not res.passed:
            failed.append(res.op)
    if failed:
        print(f"gradcheck FAIL (tolerance {REL_TOL:g}): {', '.join(failed)}")
        return 1
    print(f"gradcheck PASS (tolerance {REL_TOL:g})")
    return 0


def _load_configs(path: str | None) -> tuple[TrainConfig, SimConfig]:
    if path is None:
        return TrainConfig(), SimConfig()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def cmd_train(args) -> int:
    train_cfg, sim_cfg = _load_configs(args.config)
    if args.seeds < 1:
        raise ConfigError(f"--seeds must be >= 1, got {args.seeds}")
    os.makedirs(args.out, exist_ok=True)

    if args.baseline or args.probanet:
        cfg = replace(train_cfg, probanet_enabled=bool(args.probanet))
        for s in range(args.seeds):
            cfg_s = replace(cfg, seed=cfg.seed + s)
            pool = build_scene_pool(cfg_s, sim_cfg)
            result = run_training(cfg_s, sim_cfg, pool)
            run_dir = write_run_dir(args.out, result, sim_cfg, pool)
            print(
                f"{variant_name(cfg_s)} seed {cfg_s.seed}: "
                f"tail hard ratio {result.tail_hard_ratio:.4f} -> {run_dir}"
            )
        return 0

    cfg_base = replace(train_cfg, probanet_enabled=False)
    cfg_gate = replace(train_cfg, probanet_enabled=True)
    report = run_experiment(cfg_base, cfg_gate, args.seeds, sim_cfg)
    for pair in report.pairs:
        for result in (pair.baseline, pair.variant):
            write_run_dir(args.out, result, sim_cfg)
        print(
            f"seed {pair.seed}: baseline {pair.baseline.tail_hard_ratio:.4f}, "
            f"probanet {pair.variant.tail_hard_ratio:.4f}, "
            f"uplift {pair.variant.tail_hard_ratio - pair.baseline.tail_hard_ratio:+.4f}"
        )
    summary_path = os.path.join(args.out, "summary.csv")
    with open(summary_path, "w", encoding="ascii", newline="\n") as fh:
        fh.write(summary_csv(report))
    print(
        f"mean uplift {report.mean_uplift():+.4f} over {len(report.pairs)} seeds "
        f"({report.uplift_wins()} wins) -> {summary_path}"
    )
    return 0


def cmd_heatmap(args) -> int:
    config_path = os.path.join(args.run, "resolved-config.txt")
    with open(config_path, "r", encoding="utf-8") as fh:
        train_cfg, sim_cfg = parse_config(fh.read())
    if not 0 <= args.step <= train_cfg.total_steps:
        raise ConfigError(
            f"step must lie in [0, {train_cfg.total_steps}], got {args.step}"
        )
    if not 0 <= args.channel < sim_cfg.anchors_per_cell:
        raise ConfigError(
            f"channel must lie in [0, {sim_cfg.anchors_per_cell}), "
            f"got {args.channel}"
        )
    state, pool, _ = run_partial(train_cfg, sim_cfg, args.step)
    scene_index = (train_cfg.scenes_per_batch * args.step) % len(pool)
    files = heatmap_files(
        state,
        pool[scene_index],
        sim_cfg,
        channel=args.channel,
        step=args.step,
        scale=args.scale,
        raw=not args.plain,
    )
    for name, payload in files.items():
        path = os.path.join(args.run, name)
        with open(path, "wb") as fh:
            fh.write(payload)
        print(path)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if not getattr(args, "command", None):
        parser.print_help()
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except ProbanetError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
