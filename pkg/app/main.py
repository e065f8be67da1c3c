"""
Operator command line for the RFID voting simulator.

    python app/main.py gen-registry --count 100 --seed 0 --registry-key keys/registry.key --out registry.bvr
    python app/main.py issue-cards  --registry registry.bvr --registry-key ... --card-key ... --out cards.json
    python app/main.py run          --scenario scenarios/baseline.json --out-dir out/baseline
    python app/main.py verify-log   --log out/baseline/devices/<id>.bvl --journal ... --device-key ...
    python app/main.py report       --archive out/baseline/archive.bva --keys-dir out/baseline/keys --ballot ...

Exit codes: 0 success, 1 integrity or invariant failure, 2 usage or input error.
Keys are always read from files holding 32 hex characters.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, ValidationError

# ---------------------------------------------------------
# sys.path: src/voting first so the modules' bare "from config import" works
# ---------------------------------------------------------
_PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
_VOTING_DIR = os.path.join(_PROJECT_ROOT, "src", "voting")
if _VOTING_DIR not in sys.path:
    sys.path.insert(0, _VOTING_DIR)

from card_auth import issue_card, load_registry, new_registry, save_registry  # noqa: E402
from config import DEFAULT_SEED, get_logger  # noqa: E402
from crypto_engine import Aes128Key  # noqa: E402
from errors import ConfigError, JournalCorrupt, RegistryCorrupt, StorageError, TamperedError  # noqa: E402
from scenario_orchestrator import ScenarioConfig, ScenarioReport, ScenarioRunner, load_scenario  # noqa: E402
from tally_server import TallyServer  # noqa: E402
from voting_terminal import Ballot  # noqa: E402
from worm_log import MemoryStorage, SyncJournal, TamperedAt, WormLog, read_unsynced, verify_chain  # noqa: E402

logger = get_logger("voting.cli")

EXIT_OK = 0
EXIT_INTEGRITY = 1
EXIT_USAGE = 2


class ReportRecord(BaseModel):
    """One machine-readable output record. emitted_at is simulated time, never wall clock."""
    kind: Literal["Tally", "Snapshot", "SyncReport", "VerifyResult"]
    payload: dict[str, Any] = Field(default_factory=dict)
    emitted_at: int = 0


# ---------------------------------------------------------
# Helpers
# ---------------------------------------------------------
def read_key(path: str | Path) -> Aes128Key:
    try:
        text = Path(path).read_text().strip()
        key = bytes.fromhex(text)
    except OSError as e:
        raise ConfigError(f"cannot read key file: {e}", field=str(path)) from e
    except ValueError as e:
        raise ConfigError("key file is not hex", field=str(path)) from e
    if len(key) != 16:
        raise ConfigError(f"key must be 16 bytes, got {len(key)}", field=str(path))
    return Aes128Key(key)


def _write(path: Path, data: str | bytes) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, bytes):
        path.write_bytes(data)
    else:
        path.write_text(data)


def _records_json(records: list[ReportRecord]) -> str:
    return "[\n" + ",\n".join(r.model_dump_json(indent=2) for r in records) + "\n]\n"


# ---------------------------------------------------------
# Subcommands
# ---------------------------------------------------------
def cmd_gen_registry(count: int, seed: int, out_path: str | Path, key_path: str | Path,
                     uid_length: int = 4) -> int:
    """Writes a BVR1 registry of `count` seeded-random UIDs, all NotVoted."""
    if count < 0:
        print("error: --count must be ≥ 0", file=sys.stderr)
        return EXIT_USAGE
    key = read_key(key_path)
    rng = np.random.default_rng(seed)
    uids: set[bytes] = set()
    while len(uids) < count:
        uids.add(rng.bytes(uid_length))
    blob = save_registry(new_registry(sorted(uids), key), key)
    try:
        _write(Path(out_path), blob)
    except OSError as e:
        print(f"error: cannot write {out_path}: {e}", file=sys.stderr)
        return EXIT_USAGE
    logger.info("Registry of %d voters written to %s", count, out_path)
    print(f"registry: {count} voters → {out_path}")
    return EXIT_OK


def cmd_issue_cards(registry_path: str | Path, registry_key_path: str | Path, card_key_path: str | Path,
                    out_path: str | Path) -> int:
    """Writes one card image (uid, token) per registered voter as JSON."""
    registry_key = read_key(registry_key_path)
    card_key = read_key(card_key_path)
    try:
        registry = load_registry(Path(registry_path).read_bytes(), registry_key)
    except OSError as e:
        print(f"error: cannot read registry: {e}", file=sys.stderr)
        return EXIT_USAGE
    except RegistryCorrupt as e:
        print(f"registry rejected: {e}", file=sys.stderr)
        return EXIT_INTEGRITY

    cards = [issue_card(uid, card_key) for uid in sorted(registry.entries)]
    _write(Path(out_path), json.dumps([{"uid": c.uid.hex(), "token": c.token.hex()} for c in cards], indent=2))
    print(f"cards: {len(cards)} issued → {out_path}")
    return EXIT_OK


def _write_run_outputs(out: Path, config: ScenarioConfig, runner: ScenarioRunner, report: ScenarioReport) -> None:
    _write(out / "report.json", report.to_json())
    _write(out / "report.txt", report.to_table())
    _write(out / "tally.json", ReportRecord(kind="Tally", payload=report.tally.model_dump(mode="json"),
                                            emitted_at=report.finished_at_ms).model_dump_json(indent=2))
    _write(out / "snapshot.json", ReportRecord(kind="Snapshot", payload=report.snapshot.model_dump(mode="json"),
                                               emitted_at=report.finished_at_ms).model_dump_json(indent=2))
    sync_records = [ReportRecord(kind="SyncReport", payload=r.model_dump(mode="json"),
                                 emitted_at=r.started_at + r.duration_ms)
                    for reports in report.sync_reports.values() for r in reports]
    _write(out / "sync.json", _records_json(sync_records))
    runner.server.save_archive(out / "archive.bva")

    _write(out / "keys" / "card.key", config.keys.card_key + "\n")
    _write(out / "keys" / "vote.key", config.keys.vote_key + "\n")
    _write(out / "keys" / "registry.key", config.keys.registry_key + "\n")
    _write(out / "keys" / "devices.json",
           json.dumps({d.device_id.lower(): d.device_key.lower() for d in config.devices}, indent=2))
    _write(out / "ballot.json", config.ballot.model_dump_json(indent=2))


def cmd_run(scenario_path: str | Path, out_dir: str | Path, seed: Optional[int] = None,
            batch_size: Optional[int] = None) -> int:
    """Runs a scenario and writes the report, tally, archive, device files and keys under out_dir."""
    config = load_scenario(scenario_path)
    if seed is not None:
        config = config.model_copy(update={"seed": seed})
    if batch_size is not None:
        if batch_size < 1:
            raise ConfigError("must be ≥ 1", field="batch_size")
        config = config.model_copy(update={"sync": config.sync.model_copy(update={"batch_size": batch_size})})

    out = Path(out_dir)
    try:
        runner = ScenarioRunner(config, work_dir=out / "devices")
        report = runner.run()
        _write_run_outputs(out, config, runner, report)
    except (OSError, StorageError) as e:
        print(f"error: cannot write under {out}: {e}", file=sys.stderr)
        return EXIT_USAGE

    print(report.to_table())
    failed = [name for name, check in report.invariants.items() if not check.ok]
    if failed:
        print(f"invariant failures: {', '.join(failed)}", file=sys.stderr)
        return EXIT_INTEGRITY
    return EXIT_OK


def cmd_verify_log(log_path: str | Path, journal_path: str | Path, device_key_path: str | Path) -> int:
    """Verifies a log file and its journal without modifying either."""
    key = read_key(device_key_path)
    log_path, journal_path = Path(log_path), Path(journal_path)
    for path in (log_path, journal_path):
        if not path.is_file():
            print(f"error: {path} does not exist", file=sys.stderr)
            return EXIT_USAGE

    try:
        verdict = verify_chain(log_path, key)
    except StorageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    if isinstance(verdict, TamperedAt):
        print(f"TamperedAt{{seq={verdict.seq_no}}} {verdict.reason}")
        print(ReportRecord(kind="VerifyResult",
                           payload={"ok": False, "seq_no": verdict.seq_no, "reason": verdict.reason})
              .model_dump_json())
        return EXIT_INTEGRITY

    try:
        log = WormLog.open(MemoryStorage(log_path.read_bytes()), key)
        journal = SyncJournal.open(MemoryStorage(journal_path.read_bytes()))
        read_unsynced(log, journal)
    except (JournalCorrupt, TamperedError) as e:
        print(f"journal inconsistent: {e}")
        print(ReportRecord(kind="VerifyResult", payload={"ok": False, "reason": str(e)}).model_dump_json())
        return EXIT_INTEGRITY

    print(f"Ok - {verdict.entry_count} entries, {journal.head + 1} synced")
    print(ReportRecord(kind="VerifyResult",
                       payload={"ok": True, "entry_count": verdict.entry_count, "synced": journal.head + 1})
          .model_dump_json())
    return EXIT_OK


def cmd_report(archive_path: str | Path, keys_dir: str | Path, ballot_path: str | Path) -> int:
    """Re-tallies an archive: per-candidate counts, exclusions and anomalies."""
    keys = Path(keys_dir)
    vote_key = read_key(keys / "vote.key")
    try:
        device_map = json.loads((keys / "devices.json").read_text())
        device_keys = {bytes.fromhex(d): Aes128Key(bytes.fromhex(k)) for d, k in device_map.items()}
        ballot = Ballot.model_validate_json(Path(ballot_path).read_text())
        server = TallyServer.load_archive(archive_path, device_keys, vote_key)
    except (OSError, ValueError, ValidationError, StorageError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE

    tally = server.tally(ballot)
    server.detect_anomalies()
    snapshot = server.snapshot()

    names = {c.candidate_id: c.name for c in ballot.candidates}
    counts = pd.DataFrame([{"candidate_id": cid, "name": names[cid], "votes": n} for cid, n in tally.counts.items()])
    print(counts.to_markdown(index=False))
    if tally.excluded:
        print()
        print(pd.DataFrame([e.model_dump(mode="json") for e in tally.excluded]).to_markdown(index=False))
    if snapshot.anomalies:
        print()
        print(pd.DataFrame([a.model_dump(mode="json") for a in snapshot.anomalies]).to_markdown(index=False))
    print()
    print(_records_json([
        ReportRecord(kind="Tally", payload=tally.model_dump(mode="json")),
        ReportRecord(kind="Snapshot", payload=snapshot.model_dump(mode="json")),
    ]), end="")
    return EXIT_OK


# ---------------------------------------------------------
# Entry point
# ---------------------------------------------------------
def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(description="RFID voting terminal simulator")
    parser.add_argument("--verbose", action="store_true", help="Debug logging for every voting module")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-registry", help="Generate an encrypted voter registry")
    p.add_argument("--count", type=int, required=True, help="Number of voters")
    p.add_argument("--seed", type=int, default=DEFAULT_SEED, help="UID seed (default: 0)")
    p.add_argument("--uid-length", type=int, choices=(4, 7, 10), default=4, help="UID bytes (default: 4)")
    p.add_argument("--registry-key", required=True, help="File with the registry key in hex")
    p.add_argument("--out", required=True, help="Output registry file")

    p = sub.add_parser("issue-cards", help="Issue a card image for every registered voter")
    p.add_argument("--registry", required=True)
    p.add_argument("--registry-key", required=True)
    p.add_argument("--card-key", required=True)
    p.add_argument("--out", required=True, help="Output JSON file")

    p = sub.add_parser("run", help="Run a scenario file")
    p.add_argument("--scenario", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=None, help="Override the scenario seed")
    p.add_argument("--batch-size", type=int, default=None, help="Override the batch size (scenario default: 20)")

    p = sub.add_parser("verify-log", help="Verify a device log and its sync journal")
    p.add_argument("--log", required=True)
    p.add_argument("--journal", required=True)
    p.add_argument("--device-key", required=True)

    p = sub.add_parser("report", help="Tally an archive")
    p.add_argument("--archive", required=True)
    p.add_argument("--keys-dir", required=True, help="Directory with vote.key and devices.json")
    p.add_argument("--ballot", required=True, help="Ballot JSON")
    return parser


def _set_verbose() -> None:
    for name in list(logging.root.manager.loggerDict):
        if name.startswith("voting"):
            logging.getLogger(name).setLevel(logging.DEBUG)


def main(argv: Optional[list[str]] = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_USAGE
    if args.verbose:
        _set_verbose()

    try:
        if args.command == "gen-registry":
            return cmd_gen_registry(args.count, args.seed, args.out, args.registry_key, args.uid_length)
        if args.command == "issue-cards":
            return cmd_issue_cards(args.registry, args.registry_key, args.card_key, args.out)
        if args.command == "run":
            return cmd_run(args.scenario, args.out_dir, args.seed, args.batch_size)
        if args.command == "verify-log":
            return cmd_verify_log(args.log, args.journal, args.device_key)
        return cmd_report(args.archive, args.keys_dir, args.ballot)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
