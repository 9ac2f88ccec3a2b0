"""
Aggregator / collaborator federation over length-prefixed TCP frames

Frame: payload length u32 LE | type u8 | payload. Payload layouts:

    HELLO         id (u16 length + UTF-8) | n_i u64
    ROUND_START   round u32 | model count u8 | (u32 length + MFLW blob) per model
    LOCAL_UPDATE  round u32 | n_i u64 | model count u8 | blobs as ROUND_START
    SHUTDOWN      model count u8 | blobs as ROUND_START
    ERROR         code u16 | UTF-8 detail

No frame type carries image data; only weights cross the wire.
"""

import asyncio
import logging
import struct
from contextlib import suppress
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .cascade import MODEL_NAMES
from .exceptions import (
    ErrorCode, FederationError, FileError, FormatError, ProtocolError, ProtocolErrorCode,
    ShapeError, create_file_not_found_error, create_shape_mismatch_error
)
from .interfaces import LocalTrainer
from .models import CollaboratorInfo
from .serialization import decode_weights, encode_weights
from .tensor_nn import ModelWeights

logger = logging.getLogger(__name__)

DEFAULT_MAX_FRAME_BYTES = 256 * 1024 * 1024
DEFAULT_ROUND_TIMEOUT = 3600.0

_FRAME_HEADER = struct.Struct("<IB")


class MessageType(IntEnum):
    HELLO = 0x01
    ROUND_START = 0x02
    LOCAL_UPDATE = 0x03
    SHUTDOWN = 0x04
    ERROR = 0x7F


@dataclass(frozen=True)
class Hello:
    collaborator_id: str
    sample_count: int


@dataclass(frozen=True)
class RoundStart:
    round_index: int
    models: Tuple[ModelWeights, ...]


@dataclass(frozen=True)
class LocalUpdate:
    round_index: int
    sample_count: int
    models: Tuple[ModelWeights, ...]


@dataclass(frozen=True)
class Shutdown:
    models: Tuple[ModelWeights, ...]


@dataclass(frozen=True)
class ErrorMessage:
    code: int
    detail: str = ""


Message = Union[Hello, RoundStart, LocalUpdate, Shutdown, ErrorMessage]


# ---------------------------------------------------------------------------
# Codec
# ---------------------------------------------------------------------------

def _encode_models(models: Sequence[ModelWeights]) -> bytes:
    parts = [struct.pack("<B", len(models))]
    for weights in models:
        blob = encode_weights(weights)
        parts.append(struct.pack("<I", len(blob)))
        parts.append(blob)
    return b"".join(parts)


def encode_message(message: Message) -> bytes:
    """Serialise a message into one complete frame"""
    if isinstance(message, Hello):
        name = message.collaborator_id.encode("utf-8")
        payload = struct.pack("<H", len(name)) + name + struct.pack("<Q", message.sample_count)
        frame_type = MessageType.HELLO
    elif isinstance(message, RoundStart):
        payload = struct.pack("<I", message.round_index) + _encode_models(message.models)
        frame_type = MessageType.ROUND_START
    elif isinstance(message, LocalUpdate):
        payload = struct.pack("<IQ", message.round_index, message.sample_count) + _encode_models(message.models)
        frame_type = MessageType.LOCAL_UPDATE
    elif isinstance(message, Shutdown):
        payload = _encode_models(message.models)
        frame_type = MessageType.SHUTDOWN
    elif isinstance(message, ErrorMessage):
        payload = struct.pack("<H", int(message.code)) + message.detail.encode("utf-8")
        frame_type = MessageType.ERROR
    else:
        raise TypeError(f"Not a federation message: {message!r}")
    return _FRAME_HEADER.pack(len(payload), frame_type) + payload


class _PayloadReader:
    """Bounds-checked cursor over a frame payload"""

    def __init__(self, payload: bytes):
        self.payload = payload
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.payload):
            raise ProtocolError("Frame payload shorter than its contents", ProtocolErrorCode.BAD_FRAME)
        chunk = self.payload[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str) -> Tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def models(self) -> Tuple[ModelWeights, ...]:
        (count,) = self.unpack("<B")
        models = []
        for _ in range(count):
            (length,) = self.unpack("<I")
            try:
                models.append(decode_weights(self.take(length)))
            except FormatError as e:
                raise ProtocolError(f"Invalid weight blob: {e.message}", ProtocolErrorCode.BAD_FRAME)
        return tuple(models)

    def finish(self) -> None:
        if self.pos != len(self.payload):
            raise ProtocolError(
                f"{len(self.payload) - self.pos} unexpected trailing payload bytes", ProtocolErrorCode.BAD_FRAME
            )


def decode_message(frame_type: int, payload: bytes) -> Message:
    """
    Parse a frame payload

    Raises:
        ProtocolError: UNKNOWN_TYPE for unknown type bytes, BAD_FRAME for
            payloads that do not match their declared layout
    """
    reader = _PayloadReader(payload)
    if frame_type == MessageType.HELLO:
        (length,) = reader.unpack("<H")
        try:
            collaborator_id = reader.take(length).decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolError("Collaborator id is not UTF-8", ProtocolErrorCode.BAD_FRAME)
        (sample_count,) = reader.unpack("<Q")
        if not collaborator_id or sample_count < 1:
            raise ProtocolError("HELLO needs a non-empty id and n_i >= 1", ProtocolErrorCode.BAD_FRAME)
        message: Message = Hello(collaborator_id, sample_count)
    elif frame_type == MessageType.ROUND_START:
        (round_index,) = reader.unpack("<I")
        message = RoundStart(round_index, reader.models())
    elif frame_type == MessageType.LOCAL_UPDATE:
        round_index, sample_count = reader.unpack("<IQ")
        message = LocalUpdate(round_index, sample_count, reader.models())
    elif frame_type == MessageType.SHUTDOWN:
        message = Shutdown(reader.models())
    elif frame_type == MessageType.ERROR:
        (code,) = reader.unpack("<H")
        detail = reader.take(len(payload) - reader.pos).decode("utf-8", errors="replace")
        message = ErrorMessage(code, detail)
    else:
        raise ProtocolError(f"Unknown frame type {frame_type:#04x}", ProtocolErrorCode.UNKNOWN_TYPE)
    reader.finish()
    return message


def split_frames(data: bytes) -> List[Tuple[Message, bytes]]:
    """Parse a byte string holding whole frames back to back"""
    frames = []
    pos = 0
    while pos < len(data):
        if pos + _FRAME_HEADER.size > len(data):
            raise ProtocolError("Truncated frame header", ProtocolErrorCode.BAD_FRAME)
        length, frame_type = _FRAME_HEADER.unpack_from(data, pos)
        end = pos + _FRAME_HEADER.size + length
        if end > len(data):
            raise ProtocolError("Truncated frame payload", ProtocolErrorCode.BAD_FRAME)
        frames.append((decode_message(frame_type, data[pos + _FRAME_HEADER.size:end]), data[pos:end]))
        pos = end
    return frames


async def read_message(reader: asyncio.StreamReader,
                       max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> Tuple[Message, bytes]:
    """
    Read one frame from a stream

    Returns:
        The decoded message and the raw frame bytes

    Raises:
        asyncio.IncompleteReadError: Peer closed the stream
        ProtocolError: Oversized frame, unknown type or malformed payload
    """
    header = await reader.readexactly(_FRAME_HEADER.size)
    length, frame_type = _FRAME_HEADER.unpack(header)
    if length > max_frame_bytes:
        raise ProtocolError(f"Frame of {length} bytes exceeds the {max_frame_bytes}-byte limit",
                            ProtocolErrorCode.BAD_FRAME)
    try:
        MessageType(frame_type)
    except ValueError:
        raise ProtocolError(f"Unknown frame type {frame_type:#04x}", ProtocolErrorCode.UNKNOWN_TYPE)
    payload = await reader.readexactly(length)
    return decode_message(frame_type, payload), header + payload


# ---------------------------------------------------------------------------
# Aggregation
# ---------------------------------------------------------------------------

def aggregate(updates: Sequence[Tuple[ModelWeights, int]]) -> ModelWeights:
    """
    Sample-count-weighted average of model weights

    Each parameter is sum(n_i * w_i) / sum(n_i), accumulated in float64
    in the given order and stored back in the input dtype.

    Args:
        updates: (weights, n_i) pairs, n_i >= 1

    Raises:
        ShapeError: Names or shapes differ between updates
        FederationError: No updates or a non-positive sample count
    """
    if not updates:
        raise FederationError("Cannot aggregate zero updates")
    reference = updates[0][0]
    names, shapes = list(reference), reference.shapes()
    total = 0
    for weights, sample_count in updates:
        if sample_count < 1:
            raise FederationError(f"Sample counts must be >= 1, got {sample_count}")
        if list(weights) != names:
            raise create_shape_mismatch_error("update parameter names", names, list(weights))
        if weights.shapes() != shapes:
            raise create_shape_mismatch_error("update parameter shapes", shapes, weights.shapes())
        total += sample_count
    averaged = {}
    for name in names:
        accumulator = np.zeros(shapes[name], dtype=np.float64)
        for weights, sample_count in updates:
            accumulator += float(sample_count) * weights[name].astype(np.float64)
        averaged[name] = (accumulator / float(total)).astype(reference[name].dtype)
    return ModelWeights(averaged)


def aggregate_round(received: Mapping[str, Tuple[Sequence[ModelWeights], int]]) -> Tuple[ModelWeights, ...]:
    """
    Aggregate every model of one round

    Updates are summed in ascending collaborator-id order, so the arrival
    order of LOCAL_UPDATE frames never changes the result.
    """
    ordered = [received[peer] for peer in sorted(received)]
    model_counts = {len(models) for models, _ in ordered}
    if len(model_counts) != 1:
        raise create_shape_mismatch_error("models per update", sorted(model_counts)[0], sorted(model_counts))
    return tuple(
        aggregate([(models[index], sample_count) for models, sample_count in ordered])
        for index in range(model_counts.pop())
    )


@dataclass
class FederationResult:
    """Outcome of a completed federation"""
    weights: Dict[str, ModelWeights]
    rounds_completed: int
    participants: List[CollaboratorInfo] = field(default_factory=list)
    round_sample_counts: List[Dict[str, int]] = field(default_factory=list)


# ---------------------------------------------------------------------------
# Session recording
# ---------------------------------------------------------------------------

SESSION_MAGIC = b"MFLS"
SESSION_VERSION = 1
INBOUND = 0
OUTBOUND = 1


class SessionRecorder:
    """Appends every frame the aggregator sends or receives to a session file"""

    def __init__(self, path: Union[str, Path]):
        self.path = Path(path)
        try:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._handle = open(self.path, "wb")
        except OSError as e:
            raise FileError(f"Cannot open session file {self.path}: {e}", ErrorCode.FILE_ERROR,
                            file_path=str(self.path))
        self._handle.write(SESSION_MAGIC + struct.pack("<H", SESSION_VERSION))

    def record(self, direction: int, peer_id: str, frame: bytes) -> None:
        name = peer_id.encode("utf-8")
        self._handle.write(struct.pack("<BH", direction, len(name)) + name + frame)

    def close(self) -> None:
        if not self._handle.closed:
            self._handle.close()


def read_session(path: Union[str, Path]) -> List[Tuple[int, str, Message, bytes]]:
    """
    Parse a session file into (direction, peer id, message, frame) records

    Raises:
        FileError: Missing file
        FormatError: Bad magic, version or truncated record
    """
    source = Path(path)
    if not source.exists():
        raise create_file_not_found_error(str(source))
    data = source.read_bytes()
    if data[:4] != SESSION_MAGIC or len(data) < 6:
        raise FormatError(f"{source} is not a session recording", ErrorCode.MALFORMED_HEADER, format_name="MFLS")
    (version,) = struct.unpack_from("<H", data, 4)
    if version != SESSION_VERSION:
        raise FormatError(f"Unsupported session version {version}", ErrorCode.UNSUPPORTED_FORMAT,
                          format_name="MFLS")
    records = []
    pos = 6
    try:
        while pos < len(data):
            direction, name_length = struct.unpack_from("<BH", data, pos)
            pos += 3
            peer_id = data[pos:pos + name_length].decode("utf-8")
            pos += name_length
            length, frame_type = _FRAME_HEADER.unpack_from(data, pos)
            end = pos + _FRAME_HEADER.size + length
            if end > len(data):
                raise FormatError("Truncated session record", ErrorCode.TRUNCATED_PAYLOAD, format_name="MFLS")
            frame = data[pos:end]
            records.append((direction, peer_id, decode_message(frame_type, frame[_FRAME_HEADER.size:]), frame))
            pos = end
    except (struct.error, UnicodeDecodeError) as e:
        raise FormatError(f"Malformed session record at byte {pos}: {e}", ErrorCode.TRUNCATED_PAYLOAD,
                          format_name="MFLS")
    except ProtocolError as e:
        raise FormatError(f"Malformed frame in session: {e.message}", ErrorCode.MALFORMED_HEADER,
                          format_name="MFLS")
    return records


@dataclass
class ReplayResult:
    """Offline recomputation of a recorded federation"""
    weights: Dict[str, ModelWeights]
    rounds: int
    matches: bool


def replay_session(path: Union[str, Path],
                   model_names: Sequence[str] = MODEL_NAMES) -> ReplayResult:
    """
    Recompute every round's aggregate from the recorded LOCAL_UPDATE frames

    ``matches`` is true when each recomputed aggregate equals the next
    recorded ROUND_START broadcast and the last one equals the SHUTDOWN
    payload, bit for bit.
    """
    records = read_session(path)
    updates: Dict[int, Dict[str, Tuple[Sequence[ModelWeights], int]]] = {}
    broadcasts: Dict[int, Tuple[ModelWeights, ...]] = {}
    final: Optional[Tuple[ModelWeights, ...]] = None
    for direction, peer_id, message, _ in records:
        if direction == INBOUND and isinstance(message, LocalUpdate):
            updates.setdefault(message.round_index, {})[peer_id] = (message.models, message.sample_count)
        elif direction == OUTBOUND and isinstance(message, RoundStart):
            broadcasts.setdefault(message.round_index, message.models)
        elif direction == OUTBOUND and isinstance(message, Shutdown) and final is None:
            final = message.models
    if final is None:
        raise FormatError("Session ended without a SHUTDOWN frame", ErrorCode.TRUNCATED_PAYLOAD,
                          format_name="MFLS")

    matches = True
    recomputed: Tuple[ModelWeights, ...] = final
    for round_index in sorted(updates):
        recomputed = aggregate_round(updates[round_index])
        following = broadcasts.get(round_index + 1)
        if following is not None and not _same_models(following, recomputed):
            matches = False
    if updates:
        matches = matches and _same_models(recomputed, final)
    return ReplayResult(dict(zip(model_names, recomputed)), len(updates), matches)


def _same_models(a: Sequence[ModelWeights], b: Sequence[ModelWeights]) -> bool:
    return len(a) == len(b) and all(x.bit_equal(y) for x, y in zip(a, b))


# ---------------------------------------------------------------------------
# Aggregator
# ---------------------------------------------------------------------------

class _Connection:
    """One accepted socket; peer_id is set once its HELLO is accepted"""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, index: int):
        self.reader = reader
        self.writer = writer
        self.index = index
        self.peer_id: Optional[str] = None
        self.sample_count = 0

    @property
    def label(self) -> str:
        return self.peer_id or f"connection-{self.index}"


class Aggregator:
    """
    Coordinator of synchronous federated rounds

    Connection handlers only read frames and queue them; registration,
    round bookkeeping and aggregation all happen in ``run``.
    """

    def __init__(self, initial_weights: Mapping[str, ModelWeights], rounds: int,
                 expected: Union[int, Sequence[str]], host: str = "127.0.0.1", port: int = 0,
                 max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES,
                 round_timeout: float = DEFAULT_ROUND_TIMEOUT,
                 recorder: Optional[SessionRecorder] = None,
                 logger: Optional[logging.Logger] = None):
        if rounds < 0:
            raise FederationError(f"rounds must be >= 0, got {rounds}", ErrorCode.INVALID_CONFIG)
        self.model_names = tuple(initial_weights)
        self.initial_weights = tuple(initial_weights[name] for name in self.model_names)
        self.rounds = rounds
        if isinstance(expected, int):
            self.expected_count, self.expected_ids = expected, None
        else:
            self.expected_ids = frozenset(expected)
            self.expected_count = len(self.expected_ids)
        if self.expected_count < 1:
            raise FederationError("A federation needs at least one collaborator", ErrorCode.INVALID_CONFIG)
        self.host = host
        self.port = port
        self.max_frame_bytes = max_frame_bytes
        self.round_timeout = round_timeout
        self.recorder = recorder
        self.logger = logger or logging.getLogger(__name__)
        self._events: Optional["asyncio.Queue[Tuple[str, _Connection, object]]"] = None
        self._connections: List[_Connection] = []
        self._peers: Dict[str, _Connection] = {}
        self._server: Optional[asyncio.AbstractServer] = None

    async def start(self) -> Tuple[str, int]:
        """Bind the listening socket; returns the bound (host, port)"""
        self._events = asyncio.Queue()
        try:
            self._server = await asyncio.start_server(self._handle_connection, self.host, self.port)
        except OSError as e:
            raise FederationError(
                f"Cannot listen on {self.host}:{self.port}: {e}", ErrorCode.CONNECTION_FAILED,
                suggestions=["Choose another federation.port", "Use port 0 for an ephemeral port"],
            )
        self.host, self.port = self._server.sockets[0].getsockname()[:2]
        self.logger.info(f"Aggregator listening on {self.host}:{self.port}")
        return self.host, self.port

    async def _handle_connection(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        connection = _Connection(reader, writer, len(self._connections))
        self._connections.append(connection)
        while True:
            try:
                message, frame = await read_message(reader, self.max_frame_bytes)
            except (asyncio.IncompleteReadError, ConnectionError):
                await self._events.put(("closed", connection, None))
                return
            except ProtocolError as e:
                await self._events.put(("error", connection, e))
                return
            await self._events.put(("frame", connection, (message, frame)))

    async def _send(self, connection: _Connection, message: Message) -> None:
        frame = encode_message(message)
        if self.recorder is not None:
            self.recorder.record(OUTBOUND, connection.label, frame)
        with suppress(ConnectionError):
            connection.writer.write(frame)
            await connection.writer.drain()

    async def _close(self, connection: _Connection) -> None:
        connection.writer.close()
        with suppress(ConnectionError, OSError):
            await connection.writer.wait_closed()

    async def _reject(self, connection: _Connection, code: ProtocolErrorCode, detail: str) -> None:
        self.logger.warning(f"Rejecting {connection.label}: {detail}")
        await self._send(connection, ErrorMessage(code, detail))
        await self._close(connection)

    async def _abort(self, code: ProtocolErrorCode, detail: str) -> None:
        self.logger.error(f"Aborting federation ({code.name}): {detail}")
        for connection in self._peers.values():
            await self._send(connection, ErrorMessage(code, detail))
        for connection in self._peers.values():
            await self._close(connection)
        raise FederationError(f"Federation aborted: {detail}", wire_code=code)

    async def _next_event(self) -> Tuple[str, _Connection, object]:
        try:
            return await asyncio.wait_for(self._events.get(), timeout=self.round_timeout)
        except asyncio.TimeoutError:
            await self._abort(ProtocolErrorCode.TIMEOUT, f"No frame within {self.round_timeout}s")
            raise

    async def _dispatch(self, round_index: int,
                        received: Dict[str, Tuple[Sequence[ModelWeights], int]]) -> None:
        """Handle one queued event; round_index 0 is the join phase"""
        kind, connection, payload = await self._next_event()
        registered = connection.peer_id is not None and self._peers.get(connection.peer_id) is connection

        if kind == "closed":
            if registered:
                await self._abort(ProtocolErrorCode.PEER_DISCONNECTED, f"{connection.label} disconnected")
            return
        if kind == "error":
            error: ProtocolError = payload  # type: ignore[assignment]
            if registered:
                await self._abort(error.wire_code, f"{connection.label}: {error.message}")
            else:
                await self._reject(connection, error.wire_code, error.message)
            return

        message, frame = payload  # type: ignore[misc]
        if self.recorder is not None:
            label = message.collaborator_id if isinstance(message, Hello) and not registered else connection.label
            self.recorder.record(INBOUND, label, frame)

        if isinstance(message, Hello) and not registered:
            await self._register(connection, message, round_index)
        elif not registered:
            await self._reject(connection, ProtocolErrorCode.UNEXPECTED_MESSAGE, "HELLO expected first")
        elif isinstance(message, LocalUpdate) and round_index > 0:
            if message.round_index != round_index:
                await self._abort(
                    ProtocolErrorCode.WRONG_ROUND,
                    f"{connection.label} sent an update for round {message.round_index} during round {round_index}",
                )
            if connection.peer_id in received:
                await self._abort(ProtocolErrorCode.UNEXPECTED_MESSAGE,
                                  f"{connection.label} sent two updates for round {round_index}")
            if len(message.models) != len(self.model_names):
                await self._abort(ProtocolErrorCode.SHAPE_MISMATCH,
                                  f"{connection.label} sent {len(message.models)} models")
            received[connection.peer_id] = (message.models, message.sample_count)  # type: ignore[index]
        else:
            await self._abort(ProtocolErrorCode.UNEXPECTED_MESSAGE,
                              f"{connection.label} sent an unexpected {type(message).__name__}")

    async def _register(self, connection: _Connection, hello: Hello, round_index: int) -> None:
        if hello.collaborator_id in self._peers:
            await self._reject(connection, ProtocolErrorCode.DUPLICATE_ID,
                               f"Duplicate collaborator id '{hello.collaborator_id}'")
            return
        if round_index > 0 or len(self._peers) >= self.expected_count or (
                self.expected_ids is not None and hello.collaborator_id not in self.expected_ids):
            await self._reject(connection, ProtocolErrorCode.UNKNOWN_COLLABORATOR,
                               f"Collaborator '{hello.collaborator_id}' is not expected")
            return
        connection.peer_id = hello.collaborator_id
        connection.sample_count = hello.sample_count
        self._peers[hello.collaborator_id] = connection
        self.logger.info(f"Collaborator '{hello.collaborator_id}' joined with n_i={hello.sample_count} "
                         f"({len(self._peers)}/{self.expected_count})")

    async def run(self) -> FederationResult:
        """
        Run every round and shut the federation down

        Raises:
            FederationError: Disconnects, protocol violations, shape
                mismatches or timeouts; survivors receive an ERROR frame
        """
        if self._server is None:
            await self.start()
        try:
            while len(self._peers) < self.expected_count:
                await self._dispatch(0, {})

            global_models = self.initial_weights
            round_counts: List[Dict[str, int]] = []
            for round_index in range(1, self.rounds + 1):
                for connection in self._peers.values():
                    await self._send(connection, RoundStart(round_index, global_models))
                received: Dict[str, Tuple[Sequence[ModelWeights], int]] = {}
                while len(received) < len(self._peers):
                    await self._dispatch(round_index, received)
                try:
                    global_models = aggregate_round(received)
                except ShapeError as e:
                    await self._abort(ProtocolErrorCode.SHAPE_MISMATCH, e.message)
                round_counts.append({peer: received[peer][1] for peer in sorted(received)})
                self.logger.info(f"Round {round_index}/{self.rounds} aggregated from {sorted(received)}")

            for connection in self._peers.values():
                await self._send(connection, Shutdown(global_models))
            for connection in self._peers.values():
                await self._close(connection)
            participants = [CollaboratorInfo(peer, self._peers[peer].sample_count) for peer in sorted(self._peers)]
            return FederationResult(dict(zip(self.model_names, global_models)), self.rounds,
                                    participants, round_counts)
        finally:
            await self.stop()

    async def stop(self) -> None:
        for connection in self._connections:
            connection.writer.close()
        if self._server is not None:
            self._server.close()
            with suppress(asyncio.TimeoutError):
                await asyncio.wait_for(self._server.wait_closed(), timeout=5.0)
        if self.recorder is not None:
            self.recorder.close()


async def run_aggregator(initial_weights: Mapping[str, ModelWeights], rounds: int,
                         expected: Union[int, Sequence[str]], host: str = "127.0.0.1", port: int = 0,
                         session_path: Optional[Union[str, Path]] = None,
                         on_listening: Optional[Callable[[str, int], None]] = None,
                         max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES,
                         round_timeout: float = DEFAULT_ROUND_TIMEOUT) -> FederationResult:
    """
    Serve a complete federation

    Args:
        initial_weights: Model name -> initial weights (broadcast in round 1)
        rounds: Number of rounds R; 0 sends the initial weights in SHUTDOWN
        expected: Collaborator count or the exact set of collaborator ids
        host: Listen address
        port: Listen port, 0 for an ephemeral one
        session_path: Record every frame to this file when given
        on_listening: Called with the bound (host, port) before waiting for HELLOs

    Returns:
        FederationResult with the final aggregated weights
    """
    recorder = SessionRecorder(session_path) if session_path else None
    aggregator = Aggregator(initial_weights, rounds, expected, host, port,
                            max_frame_bytes, round_timeout, recorder)
    bound_host, bound_port = await aggregator.start()
    if on_listening is not None:
        on_listening(bound_host, bound_port)
    return await aggregator.run()


# ---------------------------------------------------------------------------
# Collaborator
# ---------------------------------------------------------------------------

class Collaborator:
    """Institution-side participant: trains locally, shares only weights"""

    def __init__(self, collaborator_id: str, trainer: LocalTrainer, host: str, port: int,
                 connect_attempts: int = 3, backoff_seconds: float = 0.5,
                 max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES,
                 model_names: Sequence[str] = MODEL_NAMES,
                 logger: Optional[logging.Logger] = None):
        self.collaborator_id = collaborator_id
        self.trainer = trainer
        self.host = host
        self.port = port
        self.connect_attempts = max(1, connect_attempts)
        self.backoff_seconds = backoff_seconds
        self.max_frame_bytes = max_frame_bytes
        self.model_names = tuple(model_names)
        self.logger = logger or logging.getLogger(__name__)
        self.final_weights: Optional[Dict[str, ModelWeights]] = None
        self.rounds_completed = 0

    async def _connect(self) -> Tuple[asyncio.StreamReader, asyncio.StreamWriter]:
        for attempt in range(1, self.connect_attempts + 1):
            try:
                return await asyncio.open_connection(self.host, self.port)
            except OSError as e:
                self.logger.warning(f"[{self.collaborator_id}] connection attempt {attempt}/"
                                    f"{self.connect_attempts} to {self.host}:{self.port} failed: {e}")
                if attempt < self.connect_attempts:
                    await asyncio.sleep(self.backoff_seconds * (2 ** (attempt - 1)))
        raise FederationError(
            f"Could not reach aggregator at {self.host}:{self.port} after {self.connect_attempts} attempts",
            ErrorCode.CONNECTION_FAILED,
            suggestions=["Check that the aggregator is running", "Check federation.host and federation.port"],
        )

    async def run(self) -> Dict[str, ModelWeights]:
        """
        Join, train every round, return the final weights from SHUTDOWN

        Raises:
            FederationError: Connection failure, ERROR frame or lost aggregator
        """
        reader, writer = await self._connect()
        try:
            writer.write(encode_message(Hello(self.collaborator_id, self.trainer.sample_count)))
            await writer.drain()
            while True:
                try:
                    message, _ = await read_message(reader, self.max_frame_bytes)
                except asyncio.IncompleteReadError:
                    raise FederationError("Aggregator closed the connection",
                                          wire_code=ProtocolErrorCode.PEER_DISCONNECTED)
                except ProtocolError as e:
                    raise FederationError(f"Aggregator sent a bad frame: {e.message}", wire_code=e.wire_code)

                if isinstance(message, RoundStart):
                    global_weights = dict(zip(self.model_names, message.models))
                    updated = await asyncio.to_thread(self.trainer.train_round, global_weights)
                    reply = LocalUpdate(message.round_index, self.trainer.sample_count,
                                        tuple(updated[name] for name in self.model_names))
                    writer.write(encode_message(reply))
                    await writer.drain()
                    self.rounds_completed += 1
                    self.logger.info(f"[{self.collaborator_id}] sent update for round {message.round_index}")
                elif isinstance(message, Shutdown):
                    self.final_weights = dict(zip(self.model_names, message.models))
                    self.logger.info(f"[{self.collaborator_id}] federation finished after "
                                     f"{self.rounds_completed} rounds")
                    return self.final_weights
                elif isinstance(message, ErrorMessage):
                    try:
                        code: Optional[ProtocolErrorCode] = ProtocolErrorCode(message.code)
                    except ValueError:
                        code = None
                    raise FederationError(f"Aggregator reported error {message.code}: {message.detail}",
                                          wire_code=code)
                else:
                    raise FederationError(f"Unexpected {type(message).__name__} from aggregator",
                                          wire_code=ProtocolErrorCode.UNEXPECTED_MESSAGE)
        finally:
            writer.close()
            with suppress(ConnectionError, OSError):
                await writer.wait_closed()


async def run_collaborator(collaborator_id: str, trainer: LocalTrainer, host: str, port: int,
                           connect_attempts: int = 3, backoff_seconds: float = 0.5,
                           max_frame_bytes: int = DEFAULT_MAX_FRAME_BYTES) -> int:
    """
    Run a collaborator to completion

    Returns:
        Exit status: 0 after SHUTDOWN, 1 on any federation failure
    """
    collaborator = Collaborator(collaborator_id, trainer, host, port, connect_attempts,
                                backoff_seconds, max_frame_bytes)
    try:
        await collaborator.run()
    except FederationError as e:
        logger.error(f"[{collaborator_id}] {e.message}")
        return 1
    return 0
