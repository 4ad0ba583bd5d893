"""Enrollment authority: node certificates and application profiles.

The orchestrator is only on the trust path during setup. After a node is
enrolled and its profiles are provisioned, migrations run without it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import hashlib
import re
import threading
import time

from .codec import ByteReader, lp, lp_str, u64
from .config import ORCHESTRATOR_SCHEMA, validate
from .const import (
    CONF_EXPECTED_SERVICE,
    CONF_LISTEN,
    CONF_TRUSTED_PLATFORMS,
    DEFAULT_ORCHESTRATOR_LISTEN,
    HASH_SIZE,
    LOGGER,
    MAX_SIGNATURE_SIZE,
    NODE_ID_PATTERN,
    REGISTRY_MODE_STATIC,
    REGISTRY_MODES,
)
from .crypto_channel import (
    Certificate,
    NodeKeyPair,
    PublicKeyLike,
    cert_issue,
    sign,
    verify_quietly,
)
from .exceptions import (
    ConfigError,
    DuplicateNodeId,
    EnrollmentRejected,
    MarkerMissingFromGraph,
    MeasurementUnexpected,
    NodeNotEnrolled,
    ProfileSignatureInvalid,
    QuoteInvalid,
    StorageError,
    TalosError,
)
from .sccfg import SysCallGraph, graph_canonical_bytes
from .storage import OrchestratorStore, read_bytes, write_atomic
from .tee_sim import (
    SERVICE_MEASUREMENT,
    AttestationQuote,
    EnclaveMeasurement,
    SignerMeasurement,
    quote_verify,
)
from .wire import EnrollRequest, EnrollResponse


def enrollment_report_data(node_pubkey: bytes) -> bytes:
    """Bind a node key into quote report data."""
    return hashlib.sha256(node_pubkey).digest() + bytes(HASH_SIZE)


@dataclass(frozen=True)
class EnrollmentRecord:
    """A node the orchestrator has certified."""

    node_id: str
    node_pubkey: bytes
    certificate: Certificate
    enrolled_at: int

    def to_bytes(self) -> bytes:
        """Serialize the record."""
        return (
            lp_str(self.node_id)
            + lp(self.node_pubkey)
            + lp(self.certificate.to_bytes())
            + u64(self.enrolled_at)
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> EnrollmentRecord:
        """Parse a stored record."""
        reader = ByteReader(data, StorageError)
        node_id = reader.lp_str()
        pubkey = reader.lp()
        cert = Certificate.from_bytes(reader.lp())
        enrolled_at = reader.u64()
        reader.finish()
        return cls(node_id, pubkey, cert, enrolled_at)


@dataclass(frozen=True)
class ApplicationProfile:
    """Reference behavior of one migration-enabled application."""

    measurement: EnclaveMeasurement
    reference_graph: SysCallGraph
    resume_marker: str
    signer: SignerMeasurement

    @property
    def marker_in_graph(self) -> bool:
        """Return whether the reference graph contains the resume marker."""
        return self.resume_marker in self.reference_graph.nodes

    def canonical_bytes(self) -> bytes:
        """Return the signed encoding."""
        return (
            self.measurement.digest
            + self.signer.digest
            + lp_str(self.resume_marker)
            + lp(graph_canonical_bytes(self.reference_graph))
        )

    @classmethod
    def from_bytes(cls, data: bytes) -> ApplicationProfile:
        """Parse the canonical encoding."""
        reader = ByteReader(data, ProfileSignatureInvalid)
        measurement = EnclaveMeasurement(reader.take(HASH_SIZE))
        signer = SignerMeasurement(reader.take(HASH_SIZE))
        marker = reader.lp_str()
        try:
            graph = SysCallGraph.from_bytes(reader.lp())
        except TalosError as err:
            raise ProfileSignatureInvalid(f"profile graph: {err}") from err
        reader.finish()
        return cls(measurement, graph, marker, signer)


@dataclass(frozen=True)
class SignedProfile:
    """Profile plus the orchestrator's signature over its canonical bytes."""

    profile: ApplicationProfile
    signature: bytes

    def to_bytes(self) -> bytes:
        """Serialize for the store."""
        return lp(self.profile.canonical_bytes()) + lp(self.signature)

    @classmethod
    def from_bytes(cls, data: bytes) -> SignedProfile:
        """Parse the stored form."""
        reader = ByteReader(data, ProfileSignatureInvalid)
        profile = ApplicationProfile.from_bytes(reader.lp())
        signature = reader.lp(MAX_SIGNATURE_SIZE)
        reader.finish()
        return cls(profile, signature)

    def verify(self, orchestrator_public_key: PublicKeyLike) -> ApplicationProfile:
        """Return the profile if its signature and marker check out."""
        if not verify_quietly(
            orchestrator_public_key, self.profile.canonical_bytes(), self.signature
        ):
            raise ProfileSignatureInvalid(str(self.profile.measurement))
        if not self.profile.marker_in_graph:
            raise MarkerMissingFromGraph(self.profile.resume_marker)
        return self.profile


@dataclass(frozen=True)
class MigrationPolicy:
    """Pigeonhole mode for a node."""

    mode: str
    provisioned_measurements: frozenset[EnclaveMeasurement] = field(
        default_factory=frozenset
    )

    def __post_init__(self) -> None:
        """Reject unknown modes and empty static policies."""
        if self.mode not in REGISTRY_MODES:
            raise ConfigError(f"unknown registry mode {self.mode!r}")
        if self.mode == REGISTRY_MODE_STATIC and not self.provisioned_measurements:
            raise ConfigError("static policy needs at least one measurement")


class Orchestrator:
    """Issues node certificates and signs application profiles."""

    def __init__(
        self,
        key: NodeKeyPair,
        *,
        store: OrchestratorStore | None = None,
        trusted_platforms: set[bytes] | None = None,
        expected_service: EnclaveMeasurement = SERVICE_MEASUREMENT,
        listen: str = DEFAULT_ORCHESTRATOR_LISTEN,
    ) -> None:
        """Initialize the orchestrator, loading any stored records."""
        self.key = key
        self.store = store
        self.listen = listen
        self.trusted_platforms: set[bytes] = set(trusted_platforms or ())
        self.expected_service = expected_service
        self.records: dict[str, EnrollmentRecord] = {}
        self.profiles: dict[EnclaveMeasurement, SignedProfile] = {}
        self._lock = threading.Lock()
        if store is not None:
            for blob in store.record_blobs().values():
                record = EnrollmentRecord.from_bytes(blob)
                self.records[record.node_id] = record
            for blob in store.profile_blobs().values():
                signed = SignedProfile.from_bytes(blob)
                self.profiles[signed.profile.measurement] = signed

    @classmethod
    def initialize(
        cls, store: OrchestratorStore, *, listen: str = DEFAULT_ORCHESTRATOR_LISTEN
    ) -> Orchestrator:
        """Create an orchestrator directory with a fresh signing key."""
        if store.config.load() is not None:
            raise ConfigError(f"{store.root} already holds an orchestrator")
        store.ensure()
        write_atomic(store.key_path, NodeKeyPair.generate().to_pem(), 0o600)
        orchestrator = cls.from_store(store, {CONF_LISTEN: listen})
        orchestrator.save_config()
        LOGGER.info("Initialized orchestrator in %s", store.root)
        return orchestrator

    @classmethod
    def from_store(
        cls, store: OrchestratorStore, data: dict[str, object] | None = None
    ) -> Orchestrator:
        """Load an orchestrator directory."""
        raw = data if data is not None else store.config.load()
        if raw is None:
            raise ConfigError(f"{store.root} holds no orchestrator configuration")
        conf = validate(ORCHESTRATOR_SCHEMA, raw, "orchestrator configuration")
        expected = conf.get(CONF_EXPECTED_SERVICE)
        return cls(
            NodeKeyPair.from_pem(read_bytes(store.key_path)),
            store=store,
            trusted_platforms={bytes.fromhex(k) for k in conf[CONF_TRUSTED_PLATFORMS]},
            expected_service=(
                EnclaveMeasurement.from_hex(expected) if expected else SERVICE_MEASUREMENT
            ),
            listen=conf[CONF_LISTEN],
        )

    def save_config(self) -> None:
        """Persist listen address, expected service and trusted platforms."""
        if self.store is None:
            return
        data: dict[str, object] = {
            CONF_LISTEN: self.listen,
            CONF_TRUSTED_PLATFORMS: sorted(key.hex() for key in self.trusted_platforms),
        }
        if self.expected_service != SERVICE_MEASUREMENT:
            data[CONF_EXPECTED_SERVICE] = self.expected_service.hex()
        self.store.config.save(data)

    @property
    def public_key(self) -> bytes:
        """Return the certificate-signing public key."""
        return self.key.public_bytes()

    def trust_platform(self, attestation_public_key: bytes) -> None:
        """Accept quotes signed by a platform attestation key."""
        with self._lock:
            self.trusted_platforms.add(bytes(attestation_public_key))
            self.save_config()

    def _quote_trusted(self, quote: AttestationQuote) -> bool:
        return any(quote_verify(key, quote) for key in self.trusted_platforms)

    def enroll_node(
        self, node_id: str, node_pubkey: bytes, quote: AttestationQuote
    ) -> EnrollmentRecord:
        """Check a node's quote and issue its certificate."""
        if not re.match(NODE_ID_PATTERN, node_id):
            raise EnrollmentRejected(f"invalid node id {node_id!r}")
        with self._lock:
            if node_id in self.records:
                raise DuplicateNodeId(node_id)
            if not self._quote_trusted(quote):
                raise QuoteInvalid(f"quote from {node_id!r} is not from a trusted platform")
            if quote.report_data != enrollment_report_data(node_pubkey):
                raise QuoteInvalid(f"quote from {node_id!r} does not bind its key")
            if quote.measurement != self.expected_service:
                raise MeasurementUnexpected(
                    f"{node_id!r} runs {quote.measurement}, expected {self.expected_service}"
                )
            cert = cert_issue(
                self.key, node_pubkey, node_id, issued_ids=frozenset(self.records)
            )
            record = EnrollmentRecord(node_id, bytes(node_pubkey), cert, int(time.time()))
            self.records[node_id] = record
            if self.store is not None:
                write_atomic(self.store.record_path(node_id), record.to_bytes())
        LOGGER.info("Enrolled node %s", node_id)
        return record

    def provision_profile(self, profile: ApplicationProfile, node_id: str) -> SignedProfile:
        """Sign a profile for an enrolled node."""
        if node_id not in self.records:
            raise NodeNotEnrolled(node_id)
        if not profile.marker_in_graph:
            raise MarkerMissingFromGraph(
                f"{profile.resume_marker!r} is not a node of the reference graph"
            )
        signed = SignedProfile(profile, sign(self.key, profile.canonical_bytes()))
        with self._lock:
            self.profiles[profile.measurement] = signed
            if self.store is not None:
                write_atomic(
                    self.store.profile_path(profile.measurement.hex()), signed.to_bytes()
                )
        LOGGER.info("Provisioned profile %s for %s", profile.measurement, node_id)
        return signed

    def handle_message(self, request: EnrollRequest) -> EnrollResponse:
        """Answer an enrollment request."""
        try:
            record = self.enroll_node(request.node_id, request.node_pubkey, request.quote)
        except TalosError as err:
            LOGGER.warning("Enrollment of %s rejected: %s", request.node_id, err)
            return EnrollResponse(False, None, self.public_key, f"{type(err).__name__}: {err}")
        return EnrollResponse(True, record.certificate, self.public_key)
