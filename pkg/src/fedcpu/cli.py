"""Command-line interface: experiment runner plus validation oracles."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .channel import ChannelConfig, sample_channel
from .config import (
    PRESETS,
    apply_overrides,
    config_from_dict,
    config_hash,
    deep_merge,
    default_config_dict,
    load_config,
    preset_variants,
)
from .lattices import brute_force_nearest, make_lattice, nearest_point
from .selection import (
    MetricParams,
    SelectionConfig,
    aggregation_metric,
    brute_force_oracle,
    default_theta,
    select_coefficients,
)
from .simulate import run_experiment


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedcpu",
        description="Simulate lattice-coded over-the-air federated learning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment from a config file or preset")
    run.add_argument("--config", help="JSON configuration file")
    run.add_argument("--preset", help=f"bundled preset, one of: {', '.join(sorted(PRESETS))}")
    run.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="KEY=VALUE",
        help="dotted-key override, e.g. --set training.tau=5 (repeatable)",
    )
    run.add_argument("--seeds", help="comma-separated seed list overriding the config")
    run.add_argument("--out", help="output directory for CSV/manifest files")

    presets = sub.add_parser("presets", help="list bundled experiment presets")

    oracle = sub.add_parser("oracle", help="exhaustive validation oracles")
    okind = oracle.add_subparsers(dest="oracle_kind", required=True)

    coeffs = okind.add_parser("coeffs", help="compare coefficient selection with enumeration")
    coeffs.add_argument("--devices", type=int, default=3)
    coeffs.add_argument("--antennas", type=int, default=4)
    coeffs.add_argument("--snr", type=float, default=10.0)
    coeffs.add_argument("--fading-scale", type=float, default=5.0)
    coeffs.add_argument("--sigma-q2", type=float, default=0.08)
    coeffs.add_argument("--theta", type=float, help="DMSE threshold (default: packing rule)")
    coeffs.add_argument("--bound", type=int, default=5, help="max enumerated coordinate")
    coeffs.add_argument("--model-size", type=int, default=24)
    coeffs.add_argument("--trials", type=int, default=10)
    coeffs.add_argument("--seed", type=int, default=0)

    lat = okind.add_parser("lattice", help="check exact decoders against enumeration")
    lat.add_argument("--name", choices=["identity", "hexagonal", "e8"], default="e8")
    lat.add_argument("--rho", type=float, default=1.0)
    lat.add_argument("--trials", type=int, default=200)
    lat.add_argument("--seed", type=int, default=0)

    return parser


def _cmd_run(args: argparse.Namespace) -> int:
    base = default_config_dict()
    if args.preset:
        variants = preset_variants(args.preset)
    elif args.config:
        variants = [("run", base)]
    else:
        print("error: provide --config and/or --preset", file=sys.stderr)
        return 2

    exit_code = 0
    for name, doc in variants:
        if args.config:
            doc = deep_merge(doc, load_config(args.config))
        if args.overrides:
            doc = apply_overrides(doc, args.overrides)
        if args.seeds:
            doc["seeds"] = [int(s) for s in args.seeds.split(",") if s.strip()]
        cfg = config_from_dict(doc)
        out = None
        if args.out:
            out = os.path.join(args.out, name) if args.preset else args.out
        result = run_experiment(cfg, output_dir=out)
        finals = result.final_accuracies()
        summary = (
            f"final_accuracy={finals.mean():.4f}+/-{finals.std():.4f} "
            f"decode_error_rate={result.decode_error_rate():.4f}"
            if finals.size
            else "no rounds"
        )
        where = f" -> {result.output_dir}" if result.output_dir else ""
        print(f"[{name}] hash={result.config_hash} {summary}{where}")
    return exit_code


def _cmd_presets() -> int:
    for name in sorted(PRESETS):
        spec = PRESETS[name]
        print(f"{name:16s} {spec['description']} (variants: {', '.join(spec['variants'])})")
    return 0


def _cmd_oracle_coeffs(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    cfg = ChannelConfig(args.antennas, args.devices, args.snr, 1.0, args.fading_scale)
    theta = args.theta
    if theta is None:
        theta = default_theta(make_lattice("e8"), args.model_size)
    sel = SelectionConfig(theta=theta, brute_force_bound=args.bound)
    print(f"theta={theta:.6g} bound={args.bound} trials={args.trials}")
    worst = 0.0
    for trial in range(args.trials):
        h = sample_channel(cfg, rng)
        sigmas = rng.uniform(0.8, 1.2, args.devices)
        params = MetricParams(0.05, 1.0, 20, 3, sigmas, args.sigma_q2, args.model_size)
        chosen = select_coefficients(h, args.snr, args.sigma_q2, sel, params)
        oracle = brute_force_oracle(h, args.snr, args.sigma_q2, sel, params)
        ratio = chosen.metric / oracle.metric if oracle.metric > 0 else float("inf")
        worst = max(worst, ratio)
        print(
            f"trial {trial}: selected={chosen.a.tolist()} metric={chosen.metric:.6g} "
            f"(fallback={chosen.fallback}) oracle={oracle.a.tolist()} "
            f"metric={oracle.metric:.6g} ratio={ratio:.4f}"
        )
    print(f"worst metric ratio: {worst:.4f}")
    return 0


def _cmd_oracle_lattice(args: argparse.Namespace) -> int:
    rng = np.random.default_rng(args.seed)
    spec = make_lattice(args.name, args.rho)
    points = rng.uniform(-2.0, 2.0, (args.trials, spec.block_dim)) * spec.scale
    fast = nearest_point(spec, points)
    slow = brute_force_nearest(spec, points)
    mismatches = int(np.sum(np.any(~np.isclose(fast, slow, atol=1e-9 * spec.scale), axis=1)))
    gap = float(np.max(np.abs(fast - slow)))
    print(
        f"{args.name} rho={args.rho}: {args.trials - mismatches}/{args.trials} decodes "
        f"match enumeration (max deviation {gap:.3g})"
    )
    return 0 if mismatches == 0 else 1


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return _cmd_run(args)
    if args.command == "presets":
        return _cmd_presets()
    if args.command == "oracle":
        if args.oracle_kind == "coeffs":
            return _cmd_oracle_coeffs(args)
        return _cmd_oracle_lattice(args)
    return 2


if __name__ == "__main__":
    sys.exit(main())
