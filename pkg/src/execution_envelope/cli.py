"""envelopectl - validate, diff, replay, and account over envelope data.

Exit codes are a scriptable contract:

* 0 - success / everything valid
* 1 - validation findings (bad document, broken chain, no grant)
* 2 - usage error (argparse exits with 2 on bad flags)
* 3 - I/O error (unreadable file, missing config)
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import codec, consumers, gateway, lifecycle, store as store_mod
from .errors import CodecError, EnvelopeError, NoGrant
from .store import FileEventStore, PhaseEvent

EXIT_OK = 0
EXIT_FINDINGS = 1
EXIT_USAGE = 2
EXIT_IO = 3


def _read_bytes(path: str) -> bytes:
    return Path(path).read_bytes()


def _open_log(path: str) -> FileEventStore:
    """Read-only commands must not create a log as a side effect."""
    if not Path(path).exists():
        raise FileNotFoundError(f"event log not found: {path}")
    return FileEventStore(path, fsync=False)


def _print_findings(path: str, report, out) -> None:
    for violation in report:
        print(f"{path}:{violation.path}: {violation.code} {violation.message}", file=out)


def cmd_validate(args, out=sys.stdout, err=sys.stderr) -> int:
    status = EXIT_OK
    for path in args.paths:
        try:
            document = _read_bytes(path)
        except OSError as exc:
            print(f"{path}: {exc}", file=err)
            return EXIT_IO
        report = codec.validate_document(document)
        if report.ok:
            if args.json:
                print(json.dumps({"file": path, "valid": True}), file=out)
            else:
                print(f"{path}: ok", file=out)
        else:
            status = EXIT_FINDINGS
            if args.json:
                print(
                    json.dumps(
                        {
                            "file": path,
                            "valid": False,
                            "findings": [
                                {"path": v.path, "code": v.code, "message": v.message}
                                for v in report
                            ],
                        }
                    ),
                    file=out,
                )
            else:
                _print_findings(path, report, out)
    return status


def _drift_rows(report: lifecycle.DriftReport) -> list[dict]:
    rows = []
    for name, drift in report.per_dimension.items():
        rows.append(
            {
                "dimension": name,
                "requested": drift.requested,
                "granted": drift.granted,
                "relation": drift.relation.value,
            }
        )
    return rows


def _print_table(rows: list[dict], columns: list[str], out) -> None:
    widths = {
        column: max([len(column), *(len(str(row.get(column, ""))) for row in rows)])
        for column in columns
    }
    header = "  ".join(column.ljust(widths[column]) for column in columns)
    print(header, file=out)
    print("  ".join("-" * widths[column] for column in columns), file=out)
    for row in rows:
        print(
            "  ".join(str(row.get(column, "")).ljust(widths[column]) for column in columns),
            file=out,
        )


def cmd_diff(args, out=sys.stdout, err=sys.stderr) -> int:
    try:
        if args.id is not None:
            event_store = _open_log(args.log)
            event = event_store.latest(args.id)
            if event is None:
                print(f"{args.id}: no events", file=err)
                return EXIT_FINDINGS
            document = event.document
        else:
            document = _read_bytes(args.envelope)
    except OSError as exc:
        print(f"error: {exc}", file=err)
        return EXIT_IO
    try:
        envelope = codec.decode(document)
        report = lifecycle.diff_requested_granted(envelope)
    except NoGrant as exc:
        print(f"NoGrant: {exc}", file=err)
        return EXIT_FINDINGS
    except CodecError as exc:
        print(f"invalid document: {exc}", file=err)
        return EXIT_FINDINGS
    rows = _drift_rows(report)
    if args.json:
        print(json.dumps({"envelope_id": report.envelope_id, "drift": rows}, indent=2), file=out)
    else:
        print(f"envelope {report.envelope_id}", file=out)
        blanked = [
            {k: ("" if v is None else v) for k, v in row.items()} for row in rows
        ]
        _print_table(blanked, ["dimension", "requested", "granted", "relation"], out)
    return EXIT_OK


def _phase_narrative(envelope, event: PhaseEvent) -> str:
    phase = event.phase.value
    if phase == "admission":
        ask = ", ".join(
            f"{k}={v}" for k, v in envelope.resources_requested.dimensions().items()
        )
        return (
            f"admission: envelope {event.envelope_id} admitted for tenant "
            f"{envelope.caller.tenant} ({envelope.execution.kind.value}/"
            f"{envelope.execution.operation}); requested {{{ask}}}"
        )
    if phase == "resolved":
        grant = ", ".join(
            f"{k}={v}" for k, v in envelope.resources_granted.dimensions().items()
        )
        routing = envelope.resolution.routing_method or "unspecified"
        return (
            f"resolved: granted {{{grant}}} on backend {envelope.resolution.backend} "
            f"(routing={routing})"
        )
    if phase == "finalized":
        res = envelope.resolution
        return (
            f"finalized: deployment {res.deployment_id}, serve_path={res.serve_path}, "
            f"public_path={res.public_path}"
        )
    failure = envelope.failure
    kept = "grant preserved" if envelope.resources_granted is not None else "no grant recorded"
    return (
        f"failed: stage={failure.stage.value} code={failure.code} "
        f"reason={failure.reason!r} ({kept})"
    )


def cmd_replay(args, out=sys.stdout, err=sys.stderr) -> int:
    try:
        event_store = _open_log(args.log)
    except OSError as exc:
        print(f"{args.log}: {exc}", file=err)
        return EXIT_IO
    chain = event_store.load(args.envelope_id)
    if not chain:
        print(f"{args.envelope_id}: no events", file=err)
        return EXIT_FINDINGS
    try:
        final = store_mod.replay(chain)
    except (EnvelopeError, ValueError) as exc:
        print(f"{args.envelope_id}: {type(exc).__name__}: {exc}", file=err)
        return EXIT_FINDINGS
    if args.json:
        print(
            json.dumps(
                {
                    "envelope_id": args.envelope_id,
                    "phases": [event.phase.value for event in chain],
                    "final_phase": final.phase.value,
                },
                indent=2,
            ),
            file=out,
        )
        return EXIT_OK
    for event in chain:
        envelope = codec.decode(event.document)
        print(_phase_narrative(envelope, event), file=out)
    print(f"chain verified: {len(chain)} events, final phase {final.phase.value}", file=out)
    return EXIT_OK


def cmd_account(args, out=sys.stdout, err=sys.stderr) -> int:
    try:
        event_store = _open_log(args.log)
    except OSError as exc:
        print(f"{args.log}: {exc}", file=err)
        return EXIT_IO
    summaries = consumers.aggregate(event_store.events(), group_by=args.group_by)
    if args.json:
        print(consumers.summaries_to_json(summaries), file=out)
        return EXIT_OK
    if not summaries:
        print("no chains", file=out)
        return EXIT_OK
    for summary in summaries:
        print(f"group {summary.group_key}", file=out)
        rows = []
        for name, totals in summary.totals.items():
            ratio = "" if totals.drift_ratio is None else f"{totals.drift_ratio:.6g}"
            rows.append(
                {
                    "dimension": name,
                    "requested_sum": totals.requested_sum,
                    "granted_sum": totals.granted_sum,
                    "drift_ratio": ratio,
                }
            )
        if rows:
            _print_table(rows, ["dimension", "requested_sum", "granted_sum", "drift_ratio"], out)
        chains = ", ".join(f"{phase}={count}" for phase, count in summary.chain_counts.items())
        print(f"  chains: {chains}", file=out)
        if summary.failure_counts:
            failures = ", ".join(
                f"{stage}={count}" for stage, count in summary.failure_counts.items()
            )
            print(f"  failures: {failures}", file=out)
    return EXIT_OK


def cmd_serve(args, out=sys.stdout, err=sys.stderr) -> int:
    try:
        config = gateway.load_config(args.config)
    except OSError as exc:
        print(f"{args.config}: {exc}", file=err)
        return EXIT_IO
    except (ValueError, KeyError) as exc:
        print(f"{args.config}: invalid config: {exc}", file=err)
        return EXIT_IO
    gateway.run(config)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="envelopectl",
        description="Inspect, validate, replay, and account over execution envelopes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_validate = sub.add_parser("validate", help="validate envelope documents")
    p_validate.add_argument("paths", nargs="+", help="envelope JSON files")
    p_validate.add_argument("--json", action="store_true", help="machine-readable output")
    p_validate.set_defaults(func=cmd_validate)

    p_diff = sub.add_parser("diff", help="requested-vs-granted drift for one envelope")
    p_diff.add_argument("envelope", nargs="?", help="envelope JSON file")
    p_diff.add_argument("--id", help="envelope id to look up in an event log")
    p_diff.add_argument("--log", help="event log path (with --id)")
    p_diff.add_argument("--json", action="store_true")
    p_diff.set_defaults(func=cmd_diff)

    p_replay = sub.add_parser("replay", help="verify and narrate one chain")
    p_replay.add_argument("log", help="event log path")
    p_replay.add_argument("envelope_id", help="envelope id")
    p_replay.add_argument("--json", action="store_true")
    p_replay.set_defaults(func=cmd_replay)

    p_account = sub.add_parser("account", help="drift accounting over an event log")
    p_account.add_argument("log", help="event log path")
    p_account.add_argument(
        "--group-by", choices=["tenant", "requester_urn"], default="tenant"
    )
    p_account.add_argument("--json", action="store_true")
    p_account.set_defaults(func=cmd_account)

    p_serve = sub.add_parser("serve", help="run the deploy gateway")
    p_serve.add_argument("config", help="gateway config JSON file")
    p_serve.set_defaults(func=cmd_serve)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "diff" and (args.envelope is None) == (args.id is None):
        parser.error("diff needs an envelope file or --id with --log")
    if args.command == "diff" and args.id is not None and args.log is None:
        parser.error("--id requires --log")
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
