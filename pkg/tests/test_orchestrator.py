"""Tests for enrollment and profile provisioning."""

from __future__ import annotations

from dataclasses import replace
from pathlib import Path

import pytest

from talos.crypto_channel import NodeKeyPair, cert_verify
from talos.exceptions import (
    ConfigError,
    DuplicateNodeId,
    EnrollmentRejected,
    MarkerMissingFromGraph,
    MeasurementUnexpected,
    NodeNotEnrolled,
    ProfileSignatureInvalid,
    QuoteInvalid,
)
from talos.node import MigrationNode
from talos.orchestrator import (
    ApplicationProfile,
    MigrationPolicy,
    Orchestrator,
    SignedProfile,
    enrollment_report_data,
)
from talos.sccfg import graph_of_names
from talos.storage import OrchestratorStore
from talos.tee_sim import MockTeeBackend, SignerMeasurement, measure_enclave

from .conftest import MOCK_MEASUREMENT, MOCK_NODE_ID, MOCK_TARGET_ID

MARKER = "talos_state_resumed"


def _profile(marker: str = MARKER) -> ApplicationProfile:
    return ApplicationProfile(
        MOCK_MEASUREMENT,
        graph_of_names(["brk", "read", MARKER]),
        marker,
        SignerMeasurement(bytes(32)),
    )


def test_report_data_binds_key() -> None:
    """Test report data is the key hash padded to 64 bytes."""
    key = NodeKeyPair.generate().public_bytes()
    data = enrollment_report_data(key)
    assert len(data) == 64
    assert data[32:] == bytes(32)
    assert data != enrollment_report_data(NodeKeyPair.generate().public_bytes())


def test_enroll_node(orchestrator: Orchestrator, enrolled_node: MigrationNode) -> None:
    """Test a trusted platform running the service gets a certificate."""
    assert enrolled_node.enrolled
    assert enrolled_node.orchestrator_key == orchestrator.public_key
    assert cert_verify(orchestrator.public_key, enrolled_node.cert)
    assert enrolled_node.cert.subject_node_id == MOCK_NODE_ID
    assert MOCK_NODE_ID in orchestrator.records


def test_enroll_duplicate(orchestrator: Orchestrator, enrolled_node: MigrationNode) -> None:
    """Test a node id is certified only once."""
    request = enrolled_node.enrollment_request()
    with pytest.raises(DuplicateNodeId):
        orchestrator.enroll_node(request.node_id, request.node_pubkey, request.quote)


def test_enroll_untrusted_platform(orchestrator: Orchestrator) -> None:
    """Test quotes from unknown platforms are refused."""
    node = MigrationNode.create(MOCK_NODE_ID)
    request = node.enrollment_request()
    with pytest.raises(QuoteInvalid):
        orchestrator.enroll_node(request.node_id, request.node_pubkey, request.quote)


def test_enroll_unbound_key(orchestrator: Orchestrator) -> None:
    """Test a quote must bind the key being certified."""
    node = MigrationNode.create(MOCK_NODE_ID)
    orchestrator.trust_platform(node.tee.attestation_public_key)
    request = node.enrollment_request()
    with pytest.raises(QuoteInvalid):
        orchestrator.enroll_node(
            request.node_id, NodeKeyPair.generate().public_bytes(), request.quote
        )


def test_enroll_wrong_service(orchestrator: Orchestrator, tee: MockTeeBackend) -> None:
    """Test a quote for another enclave is refused."""
    orchestrator.trust_platform(tee.attestation_public_key)
    pubkey = NodeKeyPair.generate().public_bytes()
    quote = tee.quote(measure_enclave(b"other service"), enrollment_report_data(pubkey))
    with pytest.raises(MeasurementUnexpected):
        orchestrator.enroll_node(MOCK_NODE_ID, pubkey, quote)


@pytest.mark.parametrize("node_id", ["", "-leading-dash", "has space", "x" * 65])
def test_enroll_bad_node_id(orchestrator: Orchestrator, node_id: str) -> None:
    """Test node ids must match the allowed pattern."""
    node = MigrationNode.create(MOCK_NODE_ID)
    orchestrator.trust_platform(node.tee.attestation_public_key)
    request = node.enrollment_request()
    with pytest.raises(EnrollmentRejected):
        orchestrator.enroll_node(node_id, request.node_pubkey, request.quote)


def test_handle_message_rejection(orchestrator: Orchestrator) -> None:
    """Test refusals come back as a response naming the error."""
    node = MigrationNode.create(MOCK_NODE_ID)
    response = orchestrator.handle_message(node.enrollment_request())
    assert not response.accepted
    assert response.cert is None
    assert response.error.startswith("QuoteInvalid:")
    with pytest.raises(EnrollmentRejected):
        node.apply_enrollment(response)
    assert not node.enrolled


def test_apply_enrollment_for_other_key(orchestrator: Orchestrator) -> None:
    """Test a node refuses a certificate issued for another key."""
    node = MigrationNode.create(MOCK_NODE_ID)
    other = MigrationNode.create(MOCK_TARGET_ID)
    orchestrator.trust_platform(other.tee.attestation_public_key)
    response = orchestrator.handle_message(other.enrollment_request())
    assert response.accepted
    with pytest.raises(EnrollmentRejected):
        node.apply_enrollment(response)


def test_provision_profile(orchestrator: Orchestrator, enrolled_node: MigrationNode) -> None:
    """Test a provisioned profile verifies on the node."""
    signed = orchestrator.provision_profile(_profile(), MOCK_NODE_ID)
    assert enrolled_node.install_profile(signed) == _profile()
    assert enrolled_node.profiles[MOCK_MEASUREMENT].resume_marker == MARKER
    assert SignedProfile.from_bytes(signed.to_bytes()) == signed


def test_provision_errors(orchestrator: Orchestrator, enrolled_node: MigrationNode) -> None:
    """Test profiles need an enrolled node and a marker inside the graph."""
    with pytest.raises(NodeNotEnrolled):
        orchestrator.provision_profile(_profile(), MOCK_TARGET_ID)
    with pytest.raises(MarkerMissingFromGraph):
        orchestrator.provision_profile(_profile("other_marker"), MOCK_NODE_ID)


def test_profile_signature(orchestrator: Orchestrator, enrolled_node: MigrationNode) -> None:
    """Test tampered or foreign profiles are refused."""
    signed = orchestrator.provision_profile(_profile(), MOCK_NODE_ID)
    tampered = replace(signed, profile=replace(signed.profile, resume_marker="brk"))
    with pytest.raises(ProfileSignatureInvalid):
        enrolled_node.install_profile(tampered)
    foreign = Orchestrator(NodeKeyPair.generate())
    foreign.records = orchestrator.records
    with pytest.raises(ProfileSignatureInvalid):
        enrolled_node.install_profile(foreign.provision_profile(_profile(), MOCK_NODE_ID))
    with pytest.raises(ProfileSignatureInvalid):
        SignedProfile.from_bytes(signed.to_bytes()[:-3])


def test_migration_policy() -> None:
    """Test policies check their mode and static measurements."""
    MigrationPolicy("dynamic")
    MigrationPolicy("static", frozenset({MOCK_MEASUREMENT}))
    with pytest.raises(ConfigError):
        MigrationPolicy("static")
    with pytest.raises(ConfigError):
        MigrationPolicy("roaming")


def test_store_round_trip(tmp_path: Path) -> None:
    """Test records, profiles and trusted platforms survive a restart."""
    store = OrchestratorStore(tmp_path / "orchestrator")
    orchestrator = Orchestrator.initialize(store, listen="127.0.0.1:0")
    node = MigrationNode.create(MOCK_NODE_ID)
    orchestrator.trust_platform(node.tee.attestation_public_key)
    node.apply_enrollment(orchestrator.handle_message(node.enrollment_request()))
    orchestrator.provision_profile(_profile(), MOCK_NODE_ID)

    reloaded = Orchestrator.from_store(store)
    assert reloaded.public_key == orchestrator.public_key
    assert reloaded.listen == "127.0.0.1:0"
    assert reloaded.trusted_platforms == {node.tee.attestation_public_key}
    assert reloaded.records == orchestrator.records
    assert reloaded.profiles[MOCK_MEASUREMENT] == orchestrator.profiles[MOCK_MEASUREMENT]
    with pytest.raises(ConfigError):
        Orchestrator.initialize(store)


def test_store_config_errors(tmp_path: Path) -> None:
    """Test missing or invalid configuration raises ConfigError."""
    store = OrchestratorStore(tmp_path / "orchestrator")
    with pytest.raises(ConfigError):
        Orchestrator.from_store(store)
    Orchestrator.initialize(store)
    store.config.save({"listen": "no-port"})
    with pytest.raises(ConfigError):
        Orchestrator.from_store(store)
