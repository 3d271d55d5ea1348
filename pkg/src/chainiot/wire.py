"""Length-prefixed, signed message frames over TCP.

Frame: 4-byte big-endian body length, then the canonical envelope
``{"payload", "senderCertificate", "signature", "type"}``.  The signature
covers the canonical encoding of ``{"payload", "type"}``.

Requests carry ``payload["id"]``; the server answers with an ``Ack``
(``{"id", "result"}``) or an ``Error`` (``{"id", "code", "message"}``).
Streams (``Subscribe``, ``Deliver``) are acknowledged the same way and then
push ``Event``/``Block`` frames tagged with ``payload["sub"]``.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
import struct
from dataclasses import dataclass
from typing import Any, Awaitable, Callable, NamedTuple, Optional

from . import canonical
from .canonical import b64d, b64e
from .errors import BadSignature, PlatformError, StreamClosed, Timeout, ValidationError, error_from_wire
from .identity import Certificate, Identity, verify_signature

log = logging.getLogger(__name__)

_LEN = struct.Struct(">I")
MAX_FRAME = 128 * 1024 * 1024

CLIENT_TYPES = ("Evaluate", "Submit", "Subscribe", "Event", "Ack", "Error")


class TrafficCounters:
    def __init__(self):
        self.bytes_in = 0
        self.bytes_out = 0
        self.frames_in = 0
        self.frames_out = 0


traffic = TrafficCounters()


class Message(NamedTuple):
    type: str
    payload: Any
    sender: Certificate
    size: int  # body length in bytes


def seal(identity: Identity, msg_type: str, payload: Any) -> bytes:
    return seal_raw(identity, msg_type, canonical.encode(payload))


def seal_raw(identity: Identity, msg_type: str, p: bytes) -> bytes:
    """Frame an already canonically encoded payload."""
    t = canonical.encode(msg_type)
    signature = identity.sign(b'{"payload":' + p + b',"type":' + t + b"}")
    body = b"".join(
        (
            b'{"payload":', p,
            b',"senderCertificate":', identity.certificate.encoded,
            b',"signature":"', b64e(signature).encode("ascii"),
            b'","type":', t, b"}",
        )
    )
    return _LEN.pack(len(body)) + body


def unseal(body: bytes) -> Message:
    try:
        d = canonical.decode(body)
        msg_type = d["type"]
        payload = d["payload"]
        sender = Certificate.from_dict(d["senderCertificate"])
        signature = b64d(d["signature"])
    except (ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"malformed frame: {exc}") from None
    t = canonical.encode(msg_type)
    tail = b"".join(
        (b',"senderCertificate":', sender.encoded, b',"signature":"', d["signature"].encode("ascii"), b'","type":', t, b"}")
    )
    head = b'{"payload":'
    if body.startswith(head) and body.endswith(tail):
        signed = head + body[len(head):len(body) - len(tail)] + b',"type":' + t + b"}"
    else:
        signed = canonical.encode({"payload": payload, "type": msg_type})
    if not verify_signature(sender, signed, signature):
        raise BadSignature(f"{msg_type} frame signature does not verify")
    return Message(msg_type, payload, sender, len(body))


async def read_frame(reader: asyncio.StreamReader) -> bytes:
    try:
        header = await reader.readexactly(4)
        (n,) = _LEN.unpack(header)
        if n > MAX_FRAME:
            raise ValidationError(f"frame of {n} bytes exceeds limit")
        body = await reader.readexactly(n)
    except (asyncio.IncompleteReadError, ConnectionError) as exc:
        raise StreamClosed("connection closed") from exc
    traffic.bytes_in += 4 + n
    traffic.frames_in += 1
    return body


class Connection:
    """One framed TCP connection with optional fixed one-way send delay."""

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter, identity: Identity,
                 delay: float = 0.0):
        self.reader = reader
        self.writer = writer
        self.identity = identity
        self.delay = delay
        self.closed = False
        self._drain_lock = asyncio.Lock()
        self._queue: Optional[asyncio.Queue] = None
        self._sender: Optional[asyncio.Task] = None
        self.peer_cert: Optional[Certificate] = None

    def _write(self, frame: bytes) -> None:
        self.writer.write(frame)
        traffic.bytes_out += len(frame)
        traffic.frames_out += 1

    async def send(self, msg_type: str, payload: Any) -> None:
        await self.send_raw(msg_type, canonical.encode(payload))

    async def send_raw(self, msg_type: str, payload: bytes) -> None:
        if self.closed:
            raise StreamClosed("connection closed")
        frame = seal_raw(self.identity, msg_type, payload)
        if self.delay > 0:
            if self._queue is None:
                self._queue = asyncio.Queue()
                self._sender = asyncio.get_running_loop().create_task(self._delayed_sender())
            self._queue.put_nowait((asyncio.get_running_loop().time() + self.delay, frame))
            return
        self._write(frame)
        if self.writer.transport.get_write_buffer_size() > 1 << 20:
            async with self._drain_lock:
                try:
                    await self.writer.drain()
                except ConnectionError as exc:
                    self.closed = True
                    raise StreamClosed("connection lost") from exc

    async def _delayed_sender(self) -> None:
        loop = asyncio.get_running_loop()
        try:
            while True:
                due, frame = await self._queue.get()
                wait = due - loop.time()
                if wait > 0:
                    await asyncio.sleep(wait)
                self._write(frame)
                await self.writer.drain()
        except (ConnectionError, asyncio.CancelledError):
            pass

    async def recv(self) -> Message:
        body = await read_frame(self.reader)
        msg = unseal(body)
        if self.peer_cert is None:
            self.peer_cert = msg.sender
        return msg

    def close(self) -> None:
        if self.closed:
            return
        self.closed = True
        if self._sender is not None:
            self._sender.cancel()
        try:
            self.writer.close()
        except (ConnectionError, RuntimeError):
            pass


async def connect(host: str, port: int, identity: Identity, delay: float = 0.0, timeout: float = 5.0) -> Connection:
    try:
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port, limit=MAX_FRAME), timeout)
    except (OSError, asyncio.TimeoutError) as exc:
        raise StreamClosed(f"cannot connect to {host}:{port}: {exc}") from None
    return Connection(reader, writer, identity, delay)


class RpcClient:
    """Client side of a multiplexed connection: concurrent calls plus pushed streams."""

    def __init__(self, conn: Connection):
        self.conn = conn
        self._ids = itertools.count(1)
        self._pending: dict[int, asyncio.Future] = {}
        self._streams: dict[int, asyncio.Queue] = {}
        self._reader = asyncio.get_running_loop().create_task(self._read_loop())
        self.closed = asyncio.Event()

    @classmethod
    async def open(cls, host: str, port: int, identity: Identity, delay: float = 0.0, timeout: float = 5.0) -> "RpcClient":
        return cls(await connect(host, port, identity, delay, timeout))

    @property
    def is_closed(self) -> bool:
        return self.closed.is_set()

    async def _read_loop(self) -> None:
        exc: BaseException = StreamClosed("connection closed")
        try:
            while True:
                msg = await self.conn.recv()
                p = msg.payload
                if msg.type in ("Ack", "Error"):
                    rid = p.get("id")
                    fut = self._pending.pop(rid, None)
                    if fut is not None and not fut.done():
                        if msg.type == "Ack":
                            fut.set_result(p.get("result"))
                        else:
                            fut.set_exception(error_from_wire(p))
                    elif msg.type == "Error" and rid in self._streams:
                        # a stream terminated by the server after its Ack
                        self._streams.pop(rid).put_nowait(error_from_wire(p))
                else:
                    q = self._streams.get(p.get("sub"))
                    if q is not None:
                        q.put_nowait(msg)
        except StreamClosed as e:
            exc = e
        except asyncio.CancelledError:
            exc = StreamClosed("connection closed locally")
        except Exception as e:  # noqa: BLE001 - a corrupt frame ends the connection
            log.warning("closing connection after bad frame: %s", e)
            exc = StreamClosed(f"bad frame: {e}")
        finally:
            self.conn.close()
            self.closed.set()
            for fut in self._pending.values():
                if not fut.done():
                    fut.set_exception(StreamClosed(str(exc)))
            self._pending.clear()
            for q in self._streams.values():
                q.put_nowait(StreamClosed(str(exc)))
            self._streams.clear()

    async def call(self, msg_type: str, payload: dict | None = None, timeout: float | None = None) -> Any:
        if self.closed.is_set():
            raise StreamClosed("connection closed")
        rid = next(self._ids)
        fut = asyncio.get_running_loop().create_future()
        self._pending[rid] = fut
        await self.conn.send(msg_type, {**(payload or {}), "id": rid})
        try:
            if timeout is None:
                return await fut
            return await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._pending.pop(rid, None)
            raise Timeout(f"{msg_type} timed out after {timeout}s") from None

    async def stream(self, msg_type: str, payload: dict | None = None, timeout: float | None = 10.0) -> "Stream":
        """Open a server-push stream; the returned object yields pushed messages."""
        if self.closed.is_set():
            raise StreamClosed("connection closed")
        rid = next(self._ids)
        q: asyncio.Queue = asyncio.Queue()
        self._streams[rid] = q
        fut = asyncio.get_running_loop().create_future()
        self._pending[rid] = fut
        await self.conn.send(msg_type, {**(payload or {}), "id": rid})
        try:
            result = await asyncio.wait_for(fut, timeout)
        except asyncio.TimeoutError:
            self._streams.pop(rid, None)
            raise Timeout(f"{msg_type} not acknowledged") from None
        except PlatformError:
            self._streams.pop(rid, None)
            raise
        return Stream(self, rid, q, result)

    async def close(self) -> None:
        self._reader.cancel()
        try:
            await self._reader
        except (asyncio.CancelledError, Exception):  # noqa: BLE001
            pass


class Stream:
    def __init__(self, client: RpcClient, sub: int, queue: asyncio.Queue, ack: Any):
        self.client = client
        self.sub = sub
        self.queue = queue
        self.ack = ack

    async def next(self, timeout: float | None = None) -> Message:
        try:
            item = await (self.queue.get() if timeout is None else asyncio.wait_for(self.queue.get(), timeout))
        except asyncio.TimeoutError:
            raise Timeout("no stream message within timeout") from None
        if isinstance(item, BaseException):
            raise item
        return item

    def __aiter__(self):
        return self

    async def __anext__(self) -> Message:
        try:
            return await self.next()
        except StreamClosed:
            raise StopAsyncIteration from None


# -- server side ---------------------------------------------------------------

NO_REPLY = object()

Handler = Callable[["ServerConnection", Message], Awaitable[Any]]


class ServerConnection(Connection):
    """Connection accepted by a server; handlers can push stream frames through it."""

    def __init__(self, reader, writer, identity, delay_for: Callable[[Certificate], float] | None = None):
        super().__init__(reader, writer, identity)
        self._delay_for = delay_for
        self.tasks: set[asyncio.Task] = set()
        self.on_close: list[Callable[[], None]] = []

    async def recv(self) -> Message:
        msg = await super().recv()
        if self._delay_for is not None and self.peer_cert is msg.sender:
            self.delay = self._delay_for(msg.sender)
            self._delay_for = None
        return msg

    async def reply(self, request: Message, result: Any) -> None:
        await self.send("Ack", {"id": request.payload.get("id"), "result": result})

    async def reply_error(self, request: Message, err: PlatformError) -> None:
        await self.send("Error", {"id": request.payload.get("id"), **err.to_wire()})

    async def push(self, msg_type: str, sub: int, body: dict) -> None:
        await self.send(msg_type, {"sub": sub, **body})


async def _dispatch(conn: ServerConnection, msg: Message, handler: Handler) -> None:
    try:
        result = await handler(conn, msg)
        if result is not NO_REPLY:
            await conn.reply(msg, result)
    except PlatformError as err:
        try:
            await conn.reply_error(msg, err)
        except StreamClosed:
            pass
    except StreamClosed:
        pass
    except asyncio.CancelledError:
        raise
    except Exception as exc:  # noqa: BLE001 - report, keep serving
        log.exception("handler failure for %s", msg.type)
        try:
            await conn.reply_error(msg, PlatformError(f"internal error: {exc!r}"))
        except StreamClosed:
            pass


async def serve(host: str, port: int, identity: Identity, handler: Handler,
                delay_for: Callable[[Certificate], float] | None = None,
                connections: set | None = None) -> asyncio.base_events.Server:
    async def on_client(reader, writer):
        conn = ServerConnection(reader, writer, identity, delay_for)
        if connections is not None:
            connections.add(conn)
        try:
            while True:
                try:
                    msg = await conn.recv()
                except BadSignature as err:
                    log.warning("dropping connection: %s", err)
                    break
                except ValidationError as err:
                    log.warning("dropping connection: %s", err)
                    break
                task = asyncio.get_running_loop().create_task(_dispatch(conn, msg, handler))
                conn.tasks.add(task)
                task.add_done_callback(conn.tasks.discard)
        except StreamClosed:
            pass
        finally:
            conn.close()
            for cb in conn.on_close:
                try:
                    cb()
                except Exception:  # noqa: BLE001
                    log.exception("on_close callback failed")
            for t in list(conn.tasks):
                t.cancel()
            if connections is not None:
                connections.discard(conn)

    return await asyncio.start_server(on_client, host, port, limit=MAX_FRAME, reuse_address=True)
