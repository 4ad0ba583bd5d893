"""Common fixtures for TALOS tests."""

from __future__ import annotations

from collections.abc import Generator
from pathlib import Path

import pytest

from talos.crypto_channel import NodeKeyPair, SessionKeys, derive_session_keys
from talos.elf_fixture import build_elf, parse_description
from talos.guest_model import GuestProgram
from talos.harness import Testbed
from talos.node import MigrationNode, NodeConfig
from talos.orchestrator import Orchestrator
from talos.registry import PigeonholeRegistry
from talos.storage import NodeStore
from talos.tee_sim import EnclaveMeasurement, MockTeeBackend

MOCK_NODE_ID = "node-a"
MOCK_TARGET_ID = "node-b"
MOCK_SESSION_ID = bytes.fromhex("00112233445566778899aabbccddeeff")
MOCK_OTHER_SESSION_ID = bytes.fromhex("ffeeddccbbaa99887766554433221100")
MOCK_COUNTER_ID = bytes.fromhex("0000000000000001")
MOCK_MEASUREMENT = EnclaveMeasurement(bytes(range(32)))
MOCK_OTHER_MEASUREMENT = EnclaveMeasurement(bytes(range(32, 64)))
MOCK_TEXT = bytes.fromhex(
    "554889e5b83c0000000f05c3554889e54883ec10c745fc00000000e8d0ffffff"
)

MOCK_ELF_SPEC = f"""\
# Two loadable segments and a small symbol table.
entry 0x401000
section .text 0x401000 0x20 r-x {MOCK_TEXT.hex()}
section .data 0x402000 0x10 rw- 0102030405060708
symbol main 0x401000 0x10 .text
symbol helper 0x401010 0x10 .text
"""

MOCK_SCRIPT = """\
[init]
syscall brk
heap-write 0 6d6f636b
[reload]
syscall brk
syscall read 00
emit-resume-marker
[main]
counter-inc 0000000000000001
heap-write 4 01
stack-push aabb
syscall write 6f6b
fd-open 3 /var/lib/mock.db
fd-seek 3 16
stack-pop 1
secret-set 0f0e0d0c
"""


@pytest.fixture
def mock_elf() -> bytes:
    """Return the ELF built from the mock description."""
    return build_elf(parse_description(MOCK_ELF_SPEC))


@pytest.fixture
def mock_program(mock_elf: bytes) -> GuestProgram:
    """Return a measured program over the mock ELF and script."""
    return GuestProgram.build("mock", mock_elf, MOCK_SCRIPT)


@pytest.fixture
def tee() -> MockTeeBackend:
    """Return an in-memory platform."""
    return MockTeeBackend.generate()


@pytest.fixture
def session_keys() -> SessionKeys:
    """Return keys derived from a fixed secret and transcript."""
    return derive_session_keys(bytes(range(32)), bytes(32))


@pytest.fixture
def registry() -> PigeonholeRegistry:
    """Return an empty dynamic registry."""
    return PigeonholeRegistry("dynamic")


@pytest.fixture
def orchestrator() -> Orchestrator:
    """Return an in-memory orchestrator."""
    return Orchestrator(NodeKeyPair.generate())


@pytest.fixture
def enrolled_node(orchestrator: Orchestrator) -> MigrationNode:
    """Return an in-memory node enrolled with the orchestrator."""
    node = MigrationNode.create(MOCK_NODE_ID)
    orchestrator.trust_platform(node.tee.attestation_public_key)
    node.apply_enrollment(orchestrator.handle_message(node.enrollment_request()))
    return node


@pytest.fixture
def testbed() -> Testbed:
    """Return two enrolled nodes with scenario 1 running on the first."""
    return Testbed.create(1)


@pytest.fixture
def node_dir(tmp_path: Path) -> Generator[Path]:
    """Return an initialized node directory."""
    root = tmp_path / MOCK_NODE_ID
    MigrationNode.initialize(NodeStore(root), NodeConfig(MOCK_NODE_ID))
    yield root
