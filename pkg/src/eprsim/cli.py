"""Command-line entry point.

Exit statuses: 0 success, 2 usage error, 3 runtime or protocol failure,
4 referee FAIL verdict.
"""

from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
from typing import Optional, Sequence

from eprsim import io as eio
from eprsim import net
from eprsim.analysis import PAIRS, Mode, running_report, tally_sides
from eprsim.core import (
    DEFAULT_LEFT_ANGLES,
    DEFAULT_RIGHT_ANGLES,
    ConfigError,
    DetectorRule,
    EprSimError,
    ExperimentConfig,
    canonicalize,
)
from eprsim.protocol import ProtocolError, Verdict, referee_verify, run_session
from eprsim.tautology import (
    align_runs,
    bell_statistic,
    random_four_runs,
    random_quad,
    tautology_rng,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_FAILURE = 3
EXIT_VERDICT_FAIL = 4


class UsageError(Exception):
    pass


def parse_angle(token: str) -> float:
    token = token.strip()
    if token.endswith("deg"):
        return math.radians(float(token[:-3]))
    return float(token)


def angle_pair(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated angles, got {text!r}")
    try:
        angles = tuple(parse_angle(p) for p in parts)
    except ValueError:
        raise argparse.ArgumentTypeError(f"cannot parse angles {text!r}") from None
    if not all(math.isfinite(a) for a in angles):
        raise argparse.ArgumentTypeError("angles must be finite")
    return angles


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if value < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {value}")
    return value


def seed_int(text: str) -> int:
    try:
        value = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {text!r}") from None
    if not 0 <= value < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 unsigned bits")
    return value


def peer_spec(text: str) -> tuple[str, str]:
    role, sep, addr = text.partition("=")
    if not sep:
        raise argparse.ArgumentTypeError(f"expected ROLE=HOST:PORT, got {text!r}")
    return role, addr


def _add_config_flags(p: argparse.ArgumentParser, *, trials_default: Optional[int] = 100_000) -> None:
    p.add_argument("--trials", type=positive_int, default=trials_default, help="number of trials T")
    p.add_argument("--seed", type=seed_int, default=0, help="64-bit master seed")
    p.add_argument(
        "--left-angles",
        type=angle_pair,
        default=DEFAULT_LEFT_ANGLES,
        help="polarizer angles for labels 1,2 at X, radians or with a 'deg' suffix (default 0,pi/4)",
    )
    p.add_argument(
        "--right-angles",
        type=angle_pair,
        default=DEFAULT_RIGHT_ANGLES,
        help="polarizer angles for labels 1,2 at Y (default pi/8,-pi/8); "
        "use --right-angles=-a,b when the first angle is negative",
    )
    p.add_argument(
        "--detector-rule",
        choices=[r.value for r in DetectorRule],
        default=DetectorRule.STRICT_LESS.value,
    )
    p.add_argument("--config", help="read the experiment configuration from a JSON file instead")


def _config_from(args) -> ExperimentConfig:
    if args.config:
        return eio.read_config(args.config)
    return ExperimentConfig(
        left_angles=args.left_angles,
        right_angles=args.right_angles,
        trials=args.trials,
        master_seed=args.seed,
        detector_rule=DetectorRule(args.detector_rule),
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eprsim", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="run the five-role protocol in-process and write a trial log")
    _add_config_flags(p)
    p.add_argument("--out", required=True, help="trial log path")
    p.add_argument("--disclosures-a", help="write randomizer A's disclosed labels here")
    p.add_argument("--disclosures-b", help="write randomizer B's disclosed labels here")
    p.add_argument("--save-config", help="also write the configuration as JSON")

    p = sub.add_parser("analyze", help="correlations and CHSH contrast of a trial log")
    p.add_argument("--in", dest="in_path", required=True, help="trial log path")
    p.add_argument("--mode", choices=[m.value for m in Mode], default=Mode.MALUS.value)
    p.add_argument("--stride", type=positive_int, default=1, help="running-curve stride")
    p.add_argument("--curve-out", help="write the running curve CSV here")
    p.add_argument("--left-angles", type=angle_pair, help="expected X angles; must match the log")
    p.add_argument("--right-angles", type=angle_pair, help="expected Y angles; must match the log")
    p.add_argument("--config", help="expected configuration file; its digest must match the log")

    p = sub.add_parser("tautology", help="Bell-inequality tautology and rearrangement experiments")
    p.add_argument("--length", type=positive_int, default=1000)
    p.add_argument("--runs", type=positive_int, default=1000)
    p.add_argument("--seed", type=seed_int, default=0)
    p.add_argument("--mode", choices=("quad", "rearrange"), default="quad")

    p = sub.add_parser("net", help="run one role of a networked session")
    p.add_argument("--role", required=True, choices=net.ROLES)
    p.add_argument("--listen", help="HOST:PORT this role listens on (X, Y, collector, referee)")
    p.add_argument(
        "--peer",
        type=peer_spec,
        action="append",
        default=[],
        metavar="ROLE=HOST:PORT",
        help="address of an outbound neighbour; repeatable. "
        f"Missing addresses are read from {net.ENV_PREFIX}<ROLE>.",
    )
    _add_config_flags(p)
    p.add_argument("--out", help="collector only: write the assembled trial log here")
    p.add_argument("--timeout", type=float, default=60.0, help="seconds before the role gives up")

    p = sub.add_parser("verify", help="referee check of disclosed labels against a trial log")
    p.add_argument("--log", required=True)
    p.add_argument("--disclosures-a", required=True)
    p.add_argument("--disclosures-b", required=True)
    return parser


def _fmt(v: float) -> str:
    return f"{v:.10f}"


def cmd_simulate(args) -> int:
    config = _config_from(args)
    session = run_session(config)
    eio.write_log(session.log, config, args.out)
    if args.disclosures_a:
        eio.write_disclosures(session.disclosed_a, args.disclosures_a)
    if args.disclosures_b:
        eio.write_disclosures(session.disclosed_b, args.disclosures_b)
    if args.save_config:
        eio.write_config(config, args.save_config)
    left, right = tally_sides(session.log, config)
    print(f"trials {config.trials}")
    print(f"digest {eio.config_digest(config)}")
    print("side,label,axis,exposures,detections")
    for counts in (left, right):
        for (label, axis), cell in counts.cells.items():
            axis_name = "0" if axis == 0.0 else "pi/2"
            print(f"{counts.side.value},{label},{axis_name},{cell.exposures},{cell.detections}")
    return EXIT_OK


def _same_angles(a, b) -> bool:
    return all(math.isclose(canonicalize(x), canonicalize(y), abs_tol=1e-9) for x, y in zip(a, b))


def cmd_analyze(args) -> int:
    config, log = eio.read_log(args.in_path)
    if args.config:
        expected = eio.read_config(args.config)
        if eio.config_digest(expected) != eio.config_digest(config):
            raise EprSimError("configuration digest does not match the log header")
    for flag, given, actual in (
        ("--left-angles", args.left_angles, config.left_angles),
        ("--right-angles", args.right_angles, config.right_angles),
    ):
        if given is not None and not _same_angles(given, actual):
            raise EprSimError(f"{flag} {given} does not match the log's angles {actual}")
    mode = Mode(args.mode)
    report = running_report(log, config, mode, args.stride)
    print(f"mode {mode.value}")
    print(f"trials {len(log)}")
    for a, b in PAIRS:
        value = report.kappa.get((a, b))
        print(f"kappa_{a}{b} {'undefined' if value is None else _fmt(value)}")
    print(f"S {'undefined' if report.contrast_S is None else _fmt(report.contrast_S)}")
    if args.curve_out:
        eio.write_curve(report, args.curve_out)
        print(f"curve_points {len(report.running_curve)}")
    if report.undefined:
        pairs = " ".join(f"{a}{b}" for a, b in report.undefined)
        print(f"error: zero-denominator setting pairs: {pairs}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_tautology(args) -> int:
    rng = tautology_rng(args.seed)
    print(f"mode {args.mode}")
    print(f"length {args.length}")
    print(f"runs {args.runs}")
    if args.mode == "quad":
        values = [bell_statistic(random_quad(rng, args.length)) for _ in range(args.runs)]
        print(f"max_bell_statistic {_fmt(max(values))}")
        print(f"exceeding_2 {sum(v > 2 for v in values)}")
        return EXIT_OK
    print("run,value,b_match_fraction")
    values = []
    for n in range(args.runs):
        res = align_runs(random_four_runs(rng, args.length))
        values.append(res.value)
        print(f"{n},{_fmt(res.value)},{_fmt(res.b_match_fraction)}")
    print(f"min {_fmt(min(values))}")
    print(f"median {_fmt(statistics.median(values))}")
    print(f"max {_fmt(max(values))}")
    print(f"fraction_exceeding_2 {_fmt(sum(v > 2 for v in values) / len(values))}")
    return EXIT_OK


def cmd_net(args) -> int:
    explicit = dict(args.peer)
    if args.role in explicit:
        raise UsageError(f"use --listen for the role's own address, not --peer {args.role}=...")
    if args.listen:
        if not net.is_listener(args.role):
            raise UsageError(f"role {args.role} has no inbound edges and cannot --listen")
        explicit[args.role] = args.listen
    try:
        endpoints = net.resolve_endpoints(args.role, explicit)
    except net.TopologyError as exc:
        raise UsageError(str(exc)) from None
    if args.out and args.role != "collector":
        raise UsageError("--out is only meaningful for the collector")
    config = _config_from(args)
    report_out = sys.stdout if args.role == "referee" else None
    return net.serve_role(
        args.role, config, endpoints, timeout=args.timeout, log_out=args.out, report_out=report_out
    )


def cmd_verify(args) -> int:
    config, log = eio.read_log(args.log)
    report = referee_verify(
        eio.read_disclosures(args.disclosures_a),
        eio.read_disclosures(args.disclosures_b),
        log,
        config.trials,
    )
    print(f"verdict {report.verdict.value}")
    print(f"trials_checked {report.trials_checked}")
    print(f"mismatches {report.mismatches}")
    if report.diagnostic:
        print(f"diagnostic {report.diagnostic}", file=sys.stderr)
    return EXIT_OK if report.verdict is Verdict.PASS else EXIT_VERDICT_FAIL


COMMANDS = {
    "simulate": cmd_simulate,
    "analyze": cmd_analyze,
    "tautology": cmd_tautology,
    "net": cmd_net,
    "verify": cmd_verify,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(name)s %(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (EprSimError, ProtocolError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
