"""Command-line interface."""

from __future__ import annotations

import argparse
import asyncio
from collections.abc import Callable, Sequence
import json
import logging
from pathlib import Path

import voluptuous as vol

from .adversary import Adversary, resolve_script
from .bench import run_benchmark
from .config import address
from .const import (
    DEFAULT_CLONES,
    DEFAULT_ITERATIONS,
    DEFAULT_LISTEN,
    DEFAULT_ORCHESTRATOR_LISTEN,
    DEFAULT_REGISTRY_MODE,
    DEFAULT_RESUME_MARKER,
    DEFAULT_SCENARIO,
    DEFAULT_SEED,
    DEFAULT_TIMEOUT,
    DEFAULT_TRIALS,
    LOGGER,
    REGISTRY_MODES,
    SCENARIOS,
)
from .diagnostics import get_node_diagnostics
from .elf_fixture import describe_elf, generate_elf
from .elf_introspect import parse_elf
from .exceptions import ConfigError, TalosError
from .guest_model import GuestProgram, profile_reload_graph
from .harness import Game, run_game
from .node import MigrationNode, NodeConfig
from .orchestrator import ApplicationProfile, Orchestrator
from .protocol import Outcome
from .storage import NodeStore, OrchestratorStore, read_bytes
from .tee_sim import EnclaveMeasurement, MockTeeBackend
from .transport import enroll, migrate, serve_node, serve_orchestrator

type Handler = Callable[[argparse.Namespace], int]


def _listen(value: str) -> str:
    try:
        return address(value)
    except vol.Invalid as err:
        raise argparse.ArgumentTypeError(str(err)) from err


async def _serve_forever(server: asyncio.Server) -> None:
    async with server:
        await server.serve_forever()


# --- orchestrator ---


def _orchestrator_init(args: argparse.Namespace) -> int:
    orchestrator = Orchestrator.initialize(OrchestratorStore(args.dir), listen=args.listen)
    print(orchestrator.public_key.hex())
    return 0


def _orchestrator_trust(args: argparse.Namespace) -> int:
    orchestrator = Orchestrator.from_store(OrchestratorStore(args.dir))
    if args.key:
        try:
            key = bytes.fromhex(args.key)
        except ValueError as err:
            raise ConfigError(f"invalid attestation key: {err}") from err
    else:
        store = NodeStore(args.node)
        key = MockTeeBackend.load_or_create(
            store.root_secret_path, store.attestation_key_path
        ).attestation_public_key
    orchestrator.trust_platform(key)
    print(key.hex())
    return 0


def _orchestrator_provision(args: argparse.Namespace) -> int:
    orchestrator = Orchestrator.from_store(OrchestratorStore(args.dir))
    node = MigrationNode.from_store(NodeStore(args.node))
    program = GuestProgram.from_fixture(args.scenario)
    profile = ApplicationProfile(
        program.measurement,
        profile_reload_graph(program, args.marker),
        args.marker,
        program.signer,
    )
    node.install_program(program)
    node.install_profile(orchestrator.provision_profile(profile, node.node_id))
    if args.launch:
        node.launch(program.measurement)
    print(program.measurement.hex())
    return 0


def _orchestrator_serve(args: argparse.Namespace) -> int:
    orchestrator = Orchestrator.from_store(OrchestratorStore(args.dir))
    listen = args.listen or orchestrator.listen

    async def run() -> None:
        await _serve_forever(await serve_orchestrator(orchestrator, listen, args.timeout))

    asyncio.run(run())
    return 0


# --- node ---


def _node_init(args: argparse.Namespace) -> int:
    config = NodeConfig.from_dict(
        {
            "node_id": args.node_id,
            "registry_mode": args.registry_mode,
            "listen": args.listen,
            "provisioned_measurements": args.provisioned,
        }
    )
    node = MigrationNode.initialize(NodeStore(args.dir), config)
    print(node.tee.attestation_public_key.hex())
    return 0


def _node_serve(args: argparse.Namespace) -> int:
    node = MigrationNode.from_store(NodeStore(args.dir))

    async def run() -> None:
        await _serve_forever(await serve_node(node, node.config.listen, args.timeout))

    asyncio.run(run())
    return 0


def _node_status(args: argparse.Namespace) -> int:
    node = MigrationNode.from_store(NodeStore(args.dir))
    print(json.dumps(get_node_diagnostics(node), indent=2, sort_keys=True))
    return 0


# --- protocol ---


def _enroll(args: argparse.Namespace) -> int:
    node = MigrationNode.from_store(NodeStore(args.dir))
    asyncio.run(enroll(node, args.orchestrator, args.timeout))
    print(node.cert.subject_node_id)
    return 0


def _measurement(args: argparse.Namespace) -> EnclaveMeasurement:
    if args.measurement:
        return EnclaveMeasurement.from_hex(args.measurement)
    return GuestProgram.from_fixture(args.scenario).measurement


def _migrate(args: argparse.Namespace) -> int:
    node = MigrationNode.from_store(NodeStore(args.dir))
    adversary = Adversary(resolve_script(args.adversary)) if args.adversary else None
    session = asyncio.run(
        migrate(node, args.source, _measurement(args), args.timeout, adversary)
    )
    digest = session.reference.digest.hex() if session.reference is not None else "-"
    outcome = session.outcome or Outcome.ABORTED
    print(f"{outcome} {digest}")
    if outcome is not Outcome.CONFIRMED:
        reason = session.abort_reason.name if session.abort_reason else session.phase
        LOGGER.error("Migration aborted: %s", reason)
        return 1
    return 0


# --- harness ---


def _game(args: argparse.Namespace) -> int:
    report = run_game(
        Game(args.game),
        args.trials,
        args.seed,
        scenario=args.scenario,
        clones=args.clones,
        honest=args.honest,
    )
    print(report.to_tsv() if args.tsv else report.to_text(), end="")
    if report.adversary_wins or not report.control_confirmed:
        LOGGER.error(
            "Game %s failed: %d adversary wins, %d/%d controls confirmed",
            report.game,
            report.adversary_wins,
            report.controls_confirmed,
            report.controls,
        )
        return 1
    return 0


def _bench(args: argparse.Namespace) -> int:
    report = run_benchmark(args.scenario, args.iterations, state_size=args.state_size)
    print(report.to_tsv() if args.tsv else report.to_text(), end="")
    return 0


def _fixture_gen_elf(args: argparse.Namespace) -> int:
    elf = generate_elf(args.spec, args.out)
    LOGGER.info("Wrote %d bytes to %s", len(elf), args.out)
    return 0


def _fixture_parse(args: argparse.Namespace) -> int:
    img = parse_elf(read_bytes(args.elf), name=args.elf.name)
    print("\n".join(describe_elf(img)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    """Return the argument parser."""
    parser = argparse.ArgumentParser(prog="talos", description="Secure live-migration simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    parser.add_argument(
        "--timeout", type=float, default=DEFAULT_TIMEOUT, help="network read timeout (s)"
    )
    commands = parser.add_subparsers(dest="command", required=True)

    orchestrator = commands.add_parser("orchestrator", help="enrollment authority")
    orch_commands = orchestrator.add_subparsers(dest="action", required=True)
    cmd = orch_commands.add_parser("init", help="create an orchestrator directory")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("--listen", type=_listen, default=DEFAULT_ORCHESTRATOR_LISTEN)
    cmd.set_defaults(handler=_orchestrator_init)
    cmd = orch_commands.add_parser("trust", help="trust a node platform's attestation key")
    cmd.add_argument("dir", type=Path)
    source = cmd.add_mutually_exclusive_group(required=True)
    source.add_argument("--node", type=Path, help="node directory")
    source.add_argument("--key", help="attestation public key (hex)")
    cmd.set_defaults(handler=_orchestrator_trust)
    cmd = orch_commands.add_parser("provision", help="profile and install a fixture app")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("node", type=Path, help="node directory")
    cmd.add_argument("--scenario", type=int, choices=SCENARIOS, default=DEFAULT_SCENARIO)
    cmd.add_argument("--marker", default=DEFAULT_RESUME_MARKER)
    cmd.add_argument("--launch", action="store_true", help="start the app on this node")
    cmd.set_defaults(handler=_orchestrator_provision)
    cmd = orch_commands.add_parser("serve", help="answer enrollment requests")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("--listen", type=_listen)
    cmd.set_defaults(handler=_orchestrator_serve)

    node = commands.add_parser("node", help="migration node")
    node_commands = node.add_subparsers(dest="action", required=True)
    cmd = node_commands.add_parser("init", help="create a node directory")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("--node-id", required=True)
    cmd.add_argument("--listen", type=_listen, default=DEFAULT_LISTEN)
    cmd.add_argument(
        "--registry-mode", choices=sorted(REGISTRY_MODES), default=DEFAULT_REGISTRY_MODE
    )
    cmd.add_argument("--provisioned", nargs="*", default=[], help="measurements (hex)")
    cmd.set_defaults(handler=_node_init)
    cmd = node_commands.add_parser("serve", help="accept migrations")
    cmd.add_argument("dir", type=Path)
    cmd.set_defaults(handler=_node_serve)
    cmd = node_commands.add_parser("status", help="print a redacted status dump")
    cmd.add_argument("dir", type=Path)
    cmd.set_defaults(handler=_node_status)

    cmd = commands.add_parser("enroll", help="enroll a node with the orchestrator")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("--orchestrator", type=_listen, default=DEFAULT_ORCHESTRATOR_LISTEN)
    cmd.set_defaults(handler=_enroll)

    cmd = commands.add_parser("migrate", help="pull an app to this node")
    cmd.add_argument("dir", type=Path)
    cmd.add_argument("--source", type=_listen, required=True)
    what = cmd.add_mutually_exclusive_group()
    what.add_argument("--measurement", help="enclave measurement (hex)")
    what.add_argument("--scenario", type=int, choices=SCENARIOS, default=DEFAULT_SCENARIO)
    cmd.add_argument("--adversary", help="named adversary script or script file")
    cmd.set_defaults(handler=_migrate)

    cmd = commands.add_parser("game", help="run a security game")
    cmd.add_argument("game", choices=[g.value for g in Game])
    cmd.add_argument("--trials", type=int, default=DEFAULT_TRIALS)
    cmd.add_argument("--seed", type=int, default=DEFAULT_SEED)
    cmd.add_argument("--scenario", type=int, choices=SCENARIOS, default=DEFAULT_SCENARIO)
    cmd.add_argument("--clones", type=int, default=DEFAULT_CLONES)
    cmd.add_argument("--honest", action="store_true", help="run without tampering")
    cmd.add_argument("--tsv", action="store_true", help="tab-separated output")
    cmd.set_defaults(handler=_game)

    cmd = commands.add_parser("bench", help="time the protocol sub-steps")
    cmd.add_argument("--scenario", type=int, choices=SCENARIOS, default=DEFAULT_SCENARIO)
    cmd.add_argument("--iterations", type=int, default=DEFAULT_ITERATIONS)
    cmd.add_argument("--state-size", type=int, default=0, help="guest heap bytes")
    cmd.add_argument("--tsv", action="store_true", help="tab-separated output")
    cmd.set_defaults(handler=_bench)

    fixture = commands.add_parser("fixture", help="ELF fixtures")
    fixture_commands = fixture.add_subparsers(dest="action", required=True)
    cmd = fixture_commands.add_parser("gen-elf", help="build an ELF from a description")
    cmd.add_argument("spec", type=Path)
    cmd.add_argument("out", type=Path)
    cmd.set_defaults(handler=_fixture_gen_elf)
    cmd = fixture_commands.add_parser("parse", help="print the description of an ELF")
    cmd.add_argument("elf", type=Path)
    cmd.set_defaults(handler=_fixture_parse)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    """Run the command line; return the exit status."""
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    handler: Handler = args.handler
    try:
        return handler(args)
    except ConfigError as err:
        LOGGER.error("Configuration error: %s", err)
        return 1
    except TalosError as err:
        LOGGER.error("%s: %s", type(err).__name__, err)
        return 1
    except OSError as err:
        LOGGER.error("%s", err)
        return 1
    except KeyboardInterrupt:
        return 130
