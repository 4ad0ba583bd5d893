"""Constants for the TALOS migration simulator."""

from __future__ import annotations

import logging

DOMAIN = "talos"
LOGGER = logging.getLogger(__package__)

SERVICE_VERSION = "1.0"
# Canonical content of the Migration Service enclave; nodes quote over its hash.
SERVICE_IDENTITY = f"talos-migration-service/{SERVICE_VERSION}".encode()

HASH_SIZE = 32
ROOT_SECRET_SIZE = 32
PLATFORM_ID_SIZE = 16
AEAD_NONCE_SIZE = 12
AEAD_TAG_SIZE = 16
SESSION_ID_SIZE = 16
NONCE_SIZE = 32
REPORT_DATA_SIZE = 64
COUNTER_ID_SIZE = 8
MAX_NODE_ID_BYTES = 64
MAX_SIGNATURE_SIZE = 72
U64_MAX = 2**64 - 1

WIRE_MAGIC = b"TALOS1"
FRAME_HEADER_SIZE = 11
MAX_FRAME_PAYLOAD = 64 * 1024 * 1024
STATE_MAGIC = b"TVS1"

CONF_NODE_ID = "node_id"
CONF_CERTIFICATE = "certificate"
CONF_ORCHESTRATOR_KEY = "orchestrator_public_key"
CONF_REGISTRY_MODE = "registry_mode"
CONF_LISTEN = "listen"
CONF_EXPECTED_SERVICE = "expected_service_measurement"
CONF_TRUSTED_PLATFORMS = "trusted_platforms"
CONF_SEED = "seed"
CONF_HOOKS = "hooks"

DEFAULT_RESUME_MARKER = "talos_state_resumed"
DEFAULT_LISTEN = "127.0.0.1:7100"
DEFAULT_ORCHESTRATOR_LISTEN = "127.0.0.1:7000"
DEFAULT_TIMEOUT = 5.0
DEFAULT_TRIALS = 100
DEFAULT_ITERATIONS = 100
DEFAULT_SEED = 0

REGISTRY_MODE_STATIC = "static"
REGISTRY_MODE_DYNAMIC = "dynamic"
DEFAULT_REGISTRY_MODE = REGISTRY_MODE_DYNAMIC
REGISTRY_MODES: frozenset[str] = frozenset(
    {REGISTRY_MODE_STATIC, REGISTRY_MODE_DYNAMIC}
)

STORAGE_VERSION = 1

NODE_CONFIG_FILE = "node.json"
NODE_KEY_FILE = "node_key.pem"
ATTESTATION_KEY_FILE = "attestation_key.pem"
ROOT_SECRET_FILE = "root_secret.bin"
REGISTRY_JOURNAL_FILE = "registry.journal"
NONCE_LOG_FILE = "nonces.log"
ORCHESTRATOR_CONFIG_FILE = "orchestrator.json"
ORCHESTRATOR_KEY_FILE = "orchestrator_key.pem"

CONF_PROVISIONED = "provisioned_measurements"
CONF_NAME = "name"
CONF_ACTION = "action"
CONF_SESSION = "session"
CONF_MESSAGE = "message"
CONF_OFFSET = "offset"
CONF_XOR = "xor"
CONF_INDEX = "index"
CONF_PAYLOAD = "payload"
CONF_RETARGET = "retarget"

NODE_ID_PATTERN = r"^[A-Za-z0-9][A-Za-z0-9._-]{0,63}$"
DEFAULT_CLONES = 100
DEFAULT_SCENARIO = 1
SCENARIOS = (1, 2, 3)
# Main-loop steps a fixture app runs before its first migration.
WARMUP_STEPS = 8
# Finished sessions a node keeps for late messages before forgetting the oldest.
MAX_FINISHED_SESSIONS = 64
# Guest script operand limits.
MAX_REPEAT = 4096
MAX_HEAP_OFFSET = 1 << 20
