"""Length-framed protocol messages over asyncio TCP streams."""

from __future__ import annotations

import asyncio
from typing import TYPE_CHECKING

from .config import parse_address
from .const import DEFAULT_TIMEOUT, FRAME_HEADER_SIZE, LOGGER
from .exceptions import (
    EnrollmentRejected,
    MalformedPayload,
    PeerClosed,
    PeerTimeout,
    TalosError,
)
from .tee_sim import EnclaveMeasurement
from .wire import (
    AnyMessage,
    EnrollRequest,
    EnrollResponse,
    Message,
    Opaque,
    decode_message,
    encode_message,
    parse_header,
    session_of,
)

if TYPE_CHECKING:
    from .adversary import Adversary
    from .node import MigrationNode
    from .orchestrator import Orchestrator
    from .protocol import MigrationSession

# The source waits longer than the target so the target's teardown wins.
SOURCE_TIMEOUT_FACTOR = 2.0


class FramedStream:
    """One connection carrying whole frames."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        """Initialize the stream."""
        self._reader = reader
        self._writer = writer

    @property
    def peer(self) -> str:
        """Return the remote address."""
        peer = self._writer.get_extra_info("peername")
        return f"{peer[0]}:{peer[1]}" if peer else "?"

    async def send(self, message: Message | Opaque) -> None:
        """Write one message."""
        self._writer.write(encode_message(message))
        await self._writer.drain()

    async def send_raw(self, frame: bytes) -> None:
        """Write raw frame bytes."""
        self._writer.write(frame)
        await self._writer.drain()

    async def receive_raw(self, timeout: float = DEFAULT_TIMEOUT) -> bytes:
        """Read one frame's bytes."""
        try:
            async with asyncio.timeout(timeout):
                header = await self._reader.readexactly(FRAME_HEADER_SIZE)
                _msg_type, length = parse_header(header)
                return header + await self._reader.readexactly(length)
        except TimeoutError as err:
            raise PeerTimeout(f"no frame from {self.peer} within {timeout}s") from err
        except asyncio.IncompleteReadError as err:
            raise PeerClosed(f"{self.peer} closed the connection") from err

    async def receive(self, timeout: float = DEFAULT_TIMEOUT) -> AnyMessage:
        """Read and decode one message."""
        return decode_message(await self.receive_raw(timeout))

    async def close(self) -> None:
        """Close the connection."""
        self._writer.close()
        try:
            await self._writer.wait_closed()
        except (ConnectionError, OSError):
            LOGGER.debug("Connection to %s closed uncleanly", self.peer)


async def open_stream(address: str, timeout: float = DEFAULT_TIMEOUT) -> FramedStream:
    """Connect to ``host:port``."""
    host, port = parse_address(address)
    try:
        async with asyncio.timeout(timeout):
            reader, writer = await asyncio.open_connection(host, port)
    except TimeoutError as err:
        raise PeerTimeout(f"connecting to {address} timed out") from err
    except OSError as err:
        raise PeerClosed(f"cannot connect to {address}: {err}") from err
    return FramedStream(reader, writer)


async def _serve_node_connection(
    node: MigrationNode, stream: FramedStream, timeout: float
) -> None:
    sessions: set[bytes] = set()
    try:
        while True:
            try:
                message = await stream.receive(timeout * SOURCE_TIMEOUT_FACTOR)
            except MalformedPayload as err:
                LOGGER.warning("Dropping malformed frame from %s: %s", stream.peer, err)
                continue
            session_id = session_of(message)
            if session_id is not None:
                sessions.add(session_id)
            for reply in node.handle_message(message):
                await stream.send(reply)
    except (PeerTimeout, PeerClosed) as err:
        LOGGER.debug("Connection from %s ended: %s", stream.peer, err)
    except TalosError as err:
        LOGGER.warning("Connection from %s failed: %s", stream.peer, err)
    finally:
        for session_id in sessions:
            abort = node.stall(session_id)
            if abort is not None:
                try:
                    await stream.send(abort)
                except (ConnectionError, OSError):
                    LOGGER.debug("Could not deliver abort to %s", stream.peer)
        await stream.close()


async def serve_node(
    node: MigrationNode, address: str, timeout: float = DEFAULT_TIMEOUT
) -> asyncio.Server:
    """Accept migration connections for node."""
    host, port = parse_address(address)

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        await _serve_node_connection(node, FramedStream(reader, writer), timeout)

    server = await asyncio.start_server(handle, host, port)
    LOGGER.info("Node %s listening on %s", node.node_id, address)
    return server


async def serve_orchestrator(
    orchestrator: Orchestrator, address: str, timeout: float = DEFAULT_TIMEOUT
) -> asyncio.Server:
    """Accept enrollment requests."""
    host, port = parse_address(address)

    async def handle(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        stream = FramedStream(reader, writer)
        try:
            message = await stream.receive(timeout)
            if isinstance(message, EnrollRequest):
                await stream.send(orchestrator.handle_message(message))
            else:
                LOGGER.warning("Orchestrator got %s from %s", type(message).__name__, stream.peer)
        except TalosError as err:
            LOGGER.warning("Enrollment connection from %s failed: %s", stream.peer, err)
        finally:
            await stream.close()

    server = await asyncio.start_server(handle, host, port)
    LOGGER.info("Orchestrator listening on %s", address)
    return server


async def enroll(
    node: MigrationNode, orchestrator_address: str, timeout: float = DEFAULT_TIMEOUT
) -> EnrollResponse:
    """Enroll node with a running orchestrator."""
    stream = await open_stream(orchestrator_address, timeout)
    try:
        await stream.send(node.enrollment_request())
        response = await stream.receive(timeout)
    finally:
        await stream.close()
    if not isinstance(response, EnrollResponse):
        raise EnrollmentRejected(f"unexpected {type(response).__name__} from orchestrator")
    node.apply_enrollment(response)
    return response


async def migrate(
    node: MigrationNode,
    source_address: str,
    measurement: EnclaveMeasurement,
    timeout: float = DEFAULT_TIMEOUT,
    adversary: Adversary | None = None,
) -> MigrationSession:
    """Pull measurement from the source node to node.

    With an adversary, every frame in either direction passes through its
    hooks before it reaches the wire or the node.
    """

    def tamper(frame: bytes) -> list[bytes]:
        return adversary.intercept(frame) if adversary is not None else [frame]

    stream = await open_stream(source_address, timeout)
    challenge = node.start_migration(measurement)
    session = node.session(challenge.session_id)
    assert session is not None
    try:
        for frame in tamper(challenge.to_frame()):
            await stream.send_raw(frame)
        while not session.phase.terminal:
            for frame in tamper(await stream.receive_raw(timeout)):
                try:
                    message = decode_message(frame)
                except TalosError as err:
                    LOGGER.warning("Dropping malformed frame from source: %s", err)
                    continue
                for reply in node.handle_message(message):
                    for out in tamper(reply.to_frame()):
                        await stream.send_raw(out)
    except TalosError as err:
        LOGGER.warning("Migration %s: %s", challenge.session_id.hex(), err)
        abort = node.stall(challenge.session_id)
        if abort is not None:
            try:
                await stream.send(abort)
            except (ConnectionError, OSError):
                LOGGER.debug("Could not deliver abort to source")
    finally:
        await stream.close()
        if adversary is not None:
            adversary.next_run()
    return session
