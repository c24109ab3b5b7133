"""``b4f`` command line: key=value lines on stdout, files only where flags say."""

from __future__ import annotations

import argparse
import hashlib
import sys

from . import crypto
from .crypto import CertificateAuthority, generate_keypair, issue_pseudonym_batch
from .encoding import EncodingError
from .investigation import Intersection, investigate, read_case_dir, write_case_dir
from .ledger import SharedLedger, verify_chain
from .netsim import ScenarioError, load_scenario

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_UNDETERMINED = 2
EXIT_USAGE = 64


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _nonneg_int(s: str) -> int:
    try:
        v = int(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an integer: {s!r}") from None
    if v < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _positive_int(s: str) -> int:
    v = _nonneg_int(s)
    if v == 0:
        raise argparse.ArgumentTypeError("must be > 0")
    return v


def _seconds(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    if not v >= 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return v


def _seed(s: str) -> int:
    v = _nonneg_int(s)
    if v >= 2**64:
        raise argparse.ArgumentTypeError("seed must fit in 64 bits")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=_seed, default=argparse.SUPPRESS,
                        help="RNG seed (unsigned 64-bit); for sim commands it overrides the scenario's seed line")
    common.add_argument("--quiet", action="store_true", default=argparse.SUPPRESS,
                        help="print only the seed and the final result line")

    p = _Parser(prog="b4f", description="Vehicular forensics ledger toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    ca = sub.add_parser("ca", help="certificate authority operations", parents=[common])
    ca_sub = ca.add_subparsers(dest="ca_command", metavar="ACTION", parser_class=_Parser)
    ca_sub.required = True
    issue = ca_sub.add_parser("issue", help="issue a batch of consecutive 300 s pseudonym certificates",
                              parents=[common])
    issue.add_argument("--count", type=_positive_int, required=True, help="number of certificates")
    issue.add_argument("--start", type=_nonneg_int, default=0, help="valid_from of the first certificate (s)")
    issue.add_argument("--holder", default="vehicle", help="holder label recorded in the CA's private table")
    issue.add_argument("--out", help="write one hex-encoded certificate per line to this file")

    sim = sub.add_parser("sim", help="simulation", parents=[common])
    sim_sub = sim.add_subparsers(dest="sim_command", metavar="ACTION", parser_class=_Parser)
    sim_sub.required = True
    run = sim_sub.add_parser("run", help="run a scenario and report metrics", parents=[common])
    run.add_argument("--scenario", required=True, help="scenario file")
    run.add_argument("--until", type=_seconds, required=True, help="simulated end time (s)")
    run.add_argument("--trace", help="write the event trace to this file")
    run.add_argument("--metrics", help="write metrics (key=value lines) to this file")

    vc = sub.add_parser("verify-chain", help="check links and digests of a ledger dump", parents=[common])
    vc.add_argument("--ledger", required=True, help="ledger dump file")

    lg = sub.add_parser("ledger", help="ledger operations", parents=[common])
    lg_sub = lg.add_subparsers(dest="ledger_command", metavar="ACTION", parser_class=_Parser)
    lg_sub.required = True
    ex = lg_sub.add_parser("export", help="run a scenario and export a node's ledger", parents=[common])
    ex.add_argument("--scenario", required=True, help="scenario file")
    ex.add_argument("--until", type=_seconds, required=True, help="simulated end time (s)")
    ex.add_argument("--out", required=True, help="ledger dump output file")
    ex.add_argument("--node", help="validator or monitor whose ledger to export (default: longest honest chain)")
    ex.add_argument("--disclosure-dir", help="also write every stored record plus CA material to this directory")

    inv = sub.add_parser("investigate", help="verify disclosed records and classify the accident", parents=[common])
    inv.add_argument("--ledger", required=True, help="ledger dump file")
    inv.add_argument("--disclosure", required=True, help="disclosure directory")
    inv.add_argument("--intersection", help="intersection config file (default: built-in 30 m box, no conflicts)")
    inv.add_argument("--accident-time", type=_nonneg_int, required=True, help="accident time (s)")
    inv.add_argument("--vehicles", required=True, help="comma-separated ids of the colliding vehicles")
    return p


class _Out:
    def __init__(self, quiet: bool):
        self.quiet = quiet

    def info(self, line: str) -> None:
        if not self.quiet:
            print(line)

    def result(self, line: str) -> None:
        print(line)


def _read(path: str, mode: str = "r"):
    with open(path, mode) as fh:
        return fh.read()


def _write(path: str, data) -> None:
    mode = "wb" if isinstance(data, bytes) else "w"
    with open(path, mode) as fh:
        fh.write(data)


def _cmd_ca_issue(args, out: _Out) -> int:
    ca = CertificateAuthority(generate_keypair(crypto.derive_seed(args.seed, "ca")))
    keys = [generate_keypair(crypto.derive_seed(args.seed, "subject", args.holder, i)) for i in range(args.count)]
    certs = issue_pseudonym_batch(ca, [k.public_key for k in keys], args.start, holder=args.holder)
    out.info(f"ca_public_key={ca.public_key.hex()}")
    for c in certs:
        out.info(f"pseudonym={c.pseudonym_id.hex()} valid_from={c.valid_from} valid_until={c.valid_until}")
    if args.out:
        _write(args.out, "".join(c.encode().hex() + "\n" for c in certs))
    out.result(f"issued={len(certs)}")
    return EXIT_OK


def _load_sim(args):
    text = _read(args.scenario)
    return load_scenario(text, seed=getattr(args, "seed_override", None))


def _cmd_sim_run(args, out: _Out) -> int:
    sim = _load_sim(args)
    metrics = sim.run_until(args.until)
    text = metrics.to_text()
    if args.metrics:
        _write(args.metrics, text)
    if args.trace:
        _write(args.trace, sim.trace_text())
    for line in text.splitlines():
        out.info(line)
    out.result(f"safety_violation={int(metrics.safety_violation)}")
    return EXIT_OK


def _cmd_verify_chain(args, out: _Out) -> int:
    data = _read(args.ledger, "rb")
    try:
        ledger = SharedLedger.load(data)
    except EncodingError as exc:
        out.result(f"chain=corrupt reason=undecodable detail={str(exc).replace(' ', '_')}")
        return EXIT_FAIL
    if not verify_chain(ledger):
        out.result("chain=corrupt reason=link_or_digest")
        return EXIT_FAIL
    out.info(f"blocks={len(ledger)} txs={sum(len(b.transactions) for b in ledger.blocks)}")
    out.result(f"chain=ok height={ledger.height}")
    return EXIT_OK


def _cmd_ledger_export(args, out: _Out) -> int:
    sim = _load_sim(args)
    sim.run_until(args.until)
    if args.node:
        node = sim.nodes.get(args.node)
        if node is None:
            raise UsageError(f"unknown node {args.node!r}")
        ledger = node.ledger
    else:
        ledger = sim.reference_ledger()
    dump = ledger.dump()
    _write(args.out, dump)
    if args.disclosure_dir:
        write_case_dir(
            args.disclosure_dir, sim.disclosures(), sim.ca.public_key, sim.certs, sim.ca.holders, sim.ca.providers
        )
        out.info(f"disclosed_records={len(sim.disclosures())}")
    out.info(f"blocks={len(ledger)} txs={sum(len(b.transactions) for b in ledger.blocks)}")
    out.result(f"ledger_bytes={len(dump)} sha256={hashlib.sha256(dump).hexdigest()}")
    return EXIT_OK


def _cmd_investigate(args, out: _Out) -> int:
    colliding = [v for v in args.vehicles.split(",") if v]
    if not colliding:
        raise UsageError("--vehicles needs at least one id")
    try:
        ledger = SharedLedger.load(_read(args.ledger, "rb"))
    except EncodingError:
        ledger = None
    if ledger is None or not verify_chain(ledger):
        out.result("chain=corrupt")
        return EXIT_FAIL
    case = read_case_dir(args.disclosure)
    ix = Intersection.parse(_read(args.intersection)) if args.intersection else Intersection()
    report, bundle, verdict = investigate(
        case.disclosure,
        ledger,
        case.ca_public_key,
        case.certs.get,
        case.providers,
        case.resolve,
        args.accident_time,
        colliding,
        ix,
    )
    out.info(f"chain=ok height={ledger.height}")
    for check in report.checks:
        out.info(check.line())
    failed = len(report.checks) - len(report.passing)
    out.info(f"integrity={'ok' if report.overall else 'fail'} records={len(report.checks)} failed={failed}")
    out.result(verdict.line())
    if not report.overall:
        return EXIT_FAIL
    return EXIT_UNDETERMINED if verdict.party is None and verdict.rule == "none" else EXIT_OK


COMMANDS = {
    ("ca", "issue"): _cmd_ca_issue,
    ("sim", "run"): _cmd_sim_run,
    ("verify-chain", None): _cmd_verify_chain,
    ("ledger", "export"): _cmd_ledger_export,
    ("investigate", None): _cmd_investigate,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    action = getattr(args, f"{args.command.replace('-', '_')}_command", None)
    handler = COMMANDS[(args.command, action)]

    explicit = hasattr(args, "seed")
    args.seed_override = args.seed if explicit else None
    if not explicit:
        args.seed = 0
    args.quiet = getattr(args, "quiet", False)
    out = _Out(args.quiet)

    if args.command in ("sim", "ledger"):
        try:
            sim = _load_sim(args)
        except OSError as exc:
            print(f"seed={args.seed}")
            print(f"error={exc}")
            return EXIT_FAIL
        except ScenarioError as exc:
            print(f"seed={args.seed}")
            print(f"error=scenario {exc}")
            return EXIT_FAIL
        args.seed = sim.seed
    print(f"seed={args.seed}")
    try:
        return handler(args, out)
    except UsageError as exc:
        print(f"b4f: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"error={exc}")
        return EXIT_FAIL


if __name__ == "__main__":
    sys.exit(main())
