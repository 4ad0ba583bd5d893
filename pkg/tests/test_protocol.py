"""Tests for the migration protocol state machines."""

from __future__ import annotations

import pytest

from talos.adversary import NAMED_SCRIPTS, Adversary
from talos.crypto_channel import Nonce, NodeKeyPair, SessionKeys, cert_issue, hmac_compute
from talos.exceptions import AbortReason, PhaseViolation
from talos.harness import Testbed, extra_syscall_launcher
from talos.node import MigrationNode
from talos.protocol import (
    Outcome,
    Phase,
    Role,
    attestation_digest,
    channel_offer,
    establish_channel,
    smn_handle_challenge,
    smn_prepare_package,
    smn_verify_and_finalize,
    tmn_create_challenge,
    tmn_handle_verdict,
    tmn_import,
)
from talos.registry import InstanceState
from talos.state_manager import mask_state
from talos.tee_sim import EnclaveMeasurement
from talos.wire import Abort, AttestationDigest, ChannelKey, StatePackage, VerificationResult

from .conftest import MOCK_OTHER_MEASUREMENT

SCENARIO_COUNTER_ID = bytes.fromhex("0000000000000001")


def _status(node: MigrationNode, measurement: EnclaveMeasurement) -> InstanceState | None:
    entry = node.registry.status(measurement)
    return entry.status if entry else None


def _dummy_package(node: MigrationNode, session_id: bytes, keys: SessionKeys) -> StatePackage:
    return StatePackage(
        session_id, mask_state(b"", keys), node.keypair.public_bytes(), node.cert, Nonce(bytes(32))
    )


def test_honest_migration(testbed: Testbed) -> None:
    """Test an honest pull moves the instance and its state intact."""
    source, target = testbed.nodes
    before = testbed.guest().snapshot()
    result = testbed.migrate()

    assert result.confirmed
    assert result.target_session.outcome is Outcome.CONFIRMED
    assert _status(source, testbed.measurement) is InstanceState.FINALIZED
    assert _status(target, testbed.measurement) is InstanceState.ACTIVE
    assert testbed.holder() is target
    assert testbed.measurement not in source.guests
    assert testbed.guest().snapshot() == before
    assert testbed.violations == []


def test_migration_round_trips(testbed: Testbed) -> None:
    """Test the app can move back and forth with counters only increasing."""
    values = [testbed.guest().counter_value(SCENARIO_COUNTER_ID)]
    for _ in range(4):
        assert testbed.migrate().confirmed
        guest = testbed.guest()
        guest.step(8)
        values.append(guest.counter_value(SCENARIO_COUNTER_ID))
    assert values == sorted(values)
    assert len(set(values)) == len(values)
    assert testbed.violations == []


def test_out_of_order_operations(testbed: Testbed) -> None:
    """Test every step rejects calls made out of phase order."""
    source, target = testbed.nodes
    measurement = testbed.measurement

    tmn, challenge = tmn_create_challenge(target, measurement)
    sid = tmn.session_id
    dummy_keys = SessionKeys(bytes(32), bytes(32), bytes(32))
    with pytest.raises(PhaseViolation):
        tmn_import(target, tmn, _dummy_package(source, sid, dummy_keys))
    with pytest.raises(PhaseViolation):
        tmn_handle_verdict(target, tmn, VerificationResult(sid, True))

    smn = smn_handle_challenge(source, challenge)
    assert smn.phase is Phase.CHALLENGE_RECEIVED
    assert _status(source, measurement) is InstanceState.MIGRATING_OUT
    with pytest.raises(PhaseViolation):
        smn_prepare_package(source, smn)
    with pytest.raises(PhaseViolation):
        smn_verify_and_finalize(source, smn, AttestationDigest(sid, bytes(32)))
    with pytest.raises(PhaseViolation):
        establish_channel(source, smn, ChannelKey(sid, bytes(33), None, b""))

    offer = channel_offer(source, smn)
    with pytest.raises(PhaseViolation):
        channel_offer(source, smn)

    reply = establish_channel(target, tmn, offer)
    assert reply is not None
    assert tmn.phase is Phase.CHANNEL_ESTABLISHED
    with pytest.raises(PhaseViolation):
        establish_channel(target, tmn, offer)

    assert establish_channel(source, smn, reply) is None
    assert smn.keys is not None
    assert tmn.keys is not None
    assert (smn.keys.enc_key, smn.keys.mac_key) == (tmn.keys.enc_key, tmn.keys.mac_key)
    with pytest.raises(PhaseViolation):
        channel_offer(source, smn)

    package = smn_prepare_package(source, smn)
    assert smn.phase is Phase.AWAITING_DIGEST
    with pytest.raises(PhaseViolation):
        smn_prepare_package(source, smn)
    with pytest.raises(PhaseViolation):
        establish_channel(source, smn, reply)

    digest = tmn_import(target, tmn, package)
    assert tmn.phase is Phase.PACKAGE_RECEIVED
    assert _status(target, measurement) is InstanceState.ACTIVE
    with pytest.raises(PhaseViolation):
        tmn_import(target, tmn, package)

    assert smn_verify_and_finalize(source, smn, digest) is Outcome.CONFIRMED
    with pytest.raises(PhaseViolation):
        smn_verify_and_finalize(source, smn, digest)
    assert tmn_handle_verdict(target, tmn, VerificationResult(sid, True)) is Outcome.CONFIRMED
    with pytest.raises(PhaseViolation):
        tmn_handle_verdict(target, tmn, VerificationResult(sid, True))
    assert (smn.phase, tmn.phase) == (Phase.VERIFIED, Phase.VERIFIED)
    assert (smn.role, tmn.role) == (Role.SMN, Role.TMN)


def test_attestation_digest() -> None:
    """Test the digest is HMAC over reference and nonce."""
    nonce = Nonce(bytes(range(32)))
    expected = hmac_compute(b"k" * 32, b"r" * 32 + nonce.value)
    assert attestation_digest(b"k" * 32, b"r" * 32, nonce) == expected


def test_digest_mismatch_restores_source(testbed: Testbed) -> None:
    """Test a wrong digest aborts and gives the instance back to the source."""
    source, target = testbed.nodes
    tmn, challenge = tmn_create_challenge(target, testbed.measurement)
    smn = smn_handle_challenge(source, challenge)
    reply = establish_channel(target, tmn, channel_offer(source, smn))
    establish_channel(source, smn, reply)
    smn_prepare_package(source, smn)

    outcome = smn_verify_and_finalize(source, smn, AttestationDigest(smn.session_id, bytes(32)))
    assert outcome is Outcome.ABORTED
    assert smn.abort_reason is AbortReason.DIGEST_MISMATCH
    assert source.registry.is_active(testbed.measurement)
    assert source.guests[testbed.measurement].is_running


def test_tampered_package(testbed: Testbed) -> None:
    """Test a flipped ciphertext bit is caught by the MAC."""
    source = testbed.holder()
    result = testbed.migrate(Adversary(NAMED_SCRIPTS["mutate-package"]))
    assert not result.confirmed
    assert result.target_session.abort_reason is AbortReason.MAC_MISMATCH
    assert testbed.holder() is source
    assert _status(testbed.other(source), testbed.measurement) is None


def test_graph_deviation(testbed: Testbed) -> None:
    """Test an extra reload call makes the target refuse the import."""
    source, target = testbed.nodes
    target.launcher = extra_syscall_launcher()
    result = testbed.migrate()
    assert not result.confirmed
    assert result.target_session.abort_reason is AbortReason.GRAPH_DEVIATION
    assert testbed.holder() is source
    assert testbed.measurement not in target.guests


def test_reflected_package(testbed: Testbed) -> None:
    """Test a package reflected at the source in place of the digest is refused."""
    source, target = testbed.nodes
    result = testbed.migrate(Adversary(NAMED_SCRIPTS["replay-package"]))
    assert not result.confirmed
    assert result.source_session.abort_reason is AbortReason.PHASE_VIOLATION
    assert _status(source, testbed.measurement) is InstanceState.ACTIVE
    assert _status(target, testbed.measurement) is InstanceState.FINALIZED
    assert source.guests[testbed.measurement].is_running
    assert testbed.violations == []


def test_dropped_digest_stalls(testbed: Testbed) -> None:
    """Test a lost digest ends in an abort with the source restored."""
    source, target = testbed.nodes
    result = testbed.migrate(Adversary(NAMED_SCRIPTS["drop-digest"]))
    assert not result.confirmed
    assert result.target_session.abort_reason is AbortReason.STALLED
    assert testbed.holder() is source
    assert not target.registry.is_active(testbed.measurement)
    assert testbed.violations == []


def test_duplicated_package_is_ignored(testbed: Testbed) -> None:
    """Test a repeated package does not disturb a migration."""
    result = testbed.migrate(Adversary(NAMED_SCRIPTS["duplicate-package"]))
    assert result.confirmed
    assert testbed.holder() is testbed.nodes[1]
    assert testbed.violations == []


def test_self_signed_challenger(testbed: Testbed) -> None:
    """Test a challenger without an orchestrator certificate is refused."""
    source = testbed.holder()
    rogue = MigrationNode.create("rogue")
    rogue.orchestrator_key = testbed.orchestrator.public_key
    rogue.cert = cert_issue(NodeKeyPair.generate(), rogue.keypair.public_bytes(), "rogue")
    replies = source.handle_message(rogue.start_migration(testbed.measurement))
    assert len(replies) == 1
    assert isinstance(replies[0], Abort)
    assert replies[0].reason is AbortReason.CERT_INVALID
    assert source.registry.is_active(testbed.measurement)


def test_stolen_certificate(testbed: Testbed) -> None:
    """Test a certificate presented with another key is refused."""
    source, target = testbed.nodes
    rogue = MigrationNode.create(target.node_id)
    rogue.orchestrator_key = testbed.orchestrator.public_key
    rogue.cert = target.cert
    [reply] = source.handle_message(rogue.start_migration(testbed.measurement))
    assert isinstance(reply, Abort)
    assert reply.reason is AbortReason.CERT_INVALID


def test_unknown_measurement(testbed: Testbed) -> None:
    """Test a challenge for an app the source does not run is refused."""
    source, target = testbed.nodes
    [reply] = source.handle_message(target.start_migration(MOCK_OTHER_MEASUREMENT))
    assert isinstance(reply, Abort)
    assert reply.reason is AbortReason.APP_NOT_RUNNING


def test_second_challenge_refused() -> None:
    """Test only one session at a time may hold the migration slot."""
    bed = Testbed.create(1, nodes=3)
    source, first, second = bed.nodes
    [offer] = source.handle_message(first.start_migration(bed.measurement))
    assert isinstance(offer, ChannelKey)
    [refusal] = source.handle_message(second.start_migration(bed.measurement))
    assert isinstance(refusal, Abort)
    assert refusal.reason is AbortReason.MIGRATION_IN_PROGRESS


def test_unknown_session(testbed: Testbed) -> None:
    """Test messages for unknown sessions are answered with an abort."""
    source = testbed.holder()
    [reply] = source.handle_message(AttestationDigest(bytes(16), bytes(32)))
    assert isinstance(reply, Abort)
    assert reply.reason is AbortReason.PHASE_VIOLATION
    assert source.handle_message(Abort(bytes(16), AbortReason.STALLED)) == []


def _package_sent(testbed: Testbed) -> tuple[bytes, StatePackage]:
    source, target = testbed.nodes
    challenge = target.start_migration(testbed.measurement)
    [offer] = source.handle_message(challenge)
    [reply] = target.handle_message(offer)
    [package] = source.handle_message(reply)
    assert isinstance(package, StatePackage)
    return challenge.session_id, package


def test_unproven_abort_waits_for_teardown(testbed: Testbed) -> None:
    """Test an abort without a teardown tag keeps the source paused until the target acks."""
    source, target = testbed.nodes
    measurement = testbed.measurement
    sid, package = _package_sent(testbed)
    target.handle_message(package)
    assert target.registry.is_active(measurement)

    [abort] = source.handle_message(Abort(sid, AbortReason.STALLED, tag=bytes(32)))
    assert isinstance(abort, Abort)
    assert not source.registry.is_active(measurement)
    assert source.handle_message(Abort(sid, AbortReason.STALLED)) == []
    assert not source.registry.is_active(measurement)

    [ack] = target.handle_message(abort)
    assert isinstance(ack, VerificationResult)
    assert not ack.confirmed
    assert len(ack.tag) == 32
    assert not target.registry.is_active(measurement)

    assert source.handle_message(VerificationResult(sid, False)) == []
    assert not source.registry.is_active(measurement)
    assert source.handle_message(ack) == []
    assert source.registry.is_active(measurement)
    assert source.guests[measurement].is_running


def test_mismatch_restores_on_teardown_ack(testbed: Testbed) -> None:
    """Test after a digest mismatch only the target's tagged ack restores the source."""
    source, target = testbed.nodes
    measurement = testbed.measurement
    sid, package = _package_sent(testbed)
    target.handle_message(package)

    [verdict] = source.handle_message(AttestationDigest(sid, bytes(32)))
    assert verdict == VerificationResult(sid, False)
    assert source.handle_message(Abort(sid, AbortReason.STALLED)) == []
    assert not source.registry.is_active(measurement)

    [ack] = target.handle_message(verdict)
    assert source.handle_message(ack) == []
    assert source.registry.is_active(measurement)
    assert not target.registry.is_active(measurement)


def test_target_abort_restores_source(testbed: Testbed) -> None:
    """Test the target's own abort proves its teardown and restores the source."""
    source, target = testbed.nodes
    sid, package = _package_sent(testbed)
    target.handle_message(package)
    abort = target.stall(sid)
    assert abort is not None
    assert len(abort.tag) == 32
    assert source.handle_message(abort) == []
    assert source.registry.is_active(testbed.measurement)
    assert not target.registry.is_active(testbed.measurement)
