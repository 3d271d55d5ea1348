"""Client SDK: signed proposals to a gateway, typed helpers for the registry and broker."""

from __future__ import annotations

import asyncio
from dataclasses import dataclass
from datetime import datetime
from typing import Any, AsyncIterator, Iterable, Optional, Sequence

from . import canonical, wire
from .canonical import b64d
from .contracts import ServiceRequestRecord, ServiceResponseRecord
from .contracts.records import ServiceRef
from .errors import StreamClosed
from .execution import create_proposal
from .identity import Identity, derive_device_id
from .ledger import ValidationCode
from .topology import Endpoint


@dataclass(frozen=True)
class TxResult:
    tx_id: str
    code: ValidationCode
    block: int
    payload: bytes

    @property
    def valid(self) -> bool:
        return self.code is ValidationCode.VALID

    def json(self) -> Any:
        return canonical.decode(self.payload) if self.payload else None


class EventStream:
    def __init__(self, client: wire.RpcClient, stream: wire.Stream, owns_client: bool):
        self._client = client
        self._stream = stream
        self._owns = owns_client
        self.last_cursor: Optional[tuple[int, int]] = None

    async def next(self, timeout: float | None = None) -> dict:
        msg = await self._stream.next(timeout)
        ev = msg.payload["event"]
        self.last_cursor = (ev["blockNumber"], ev["txIndex"])
        return ev

    def __aiter__(self) -> AsyncIterator[dict]:
        return self

    async def __anext__(self) -> dict:
        try:
            return await self.next()
        except StreamClosed as exc:
            if exc.code != StreamClosed.code:
                raise  # overflow and other distinguishable terminations surface
            raise StopAsyncIteration from None

    async def close(self) -> None:
        if self._owns:
            await self._client.close()


class GatewayClient:
    """One connection to one gateway, acting as one identity."""

    def __init__(self, rpc: wire.RpcClient, identity: Identity, timeout: float = 60.0):
        self.rpc = rpc
        self.identity = identity
        self.timeout = timeout
        self.endpoint: Optional[Endpoint] = None

    @classmethod
    async def connect(cls, endpoint: Endpoint, identity: Identity, timeout: float = 60.0) -> "GatewayClient":
        rpc = await wire.RpcClient.open(endpoint.host, endpoint.port, identity)
        c = cls(rpc, identity, timeout)
        c.endpoint = endpoint
        return c

    @property
    def org(self) -> str:
        return self.identity.org_id

    @property
    def device_id(self) -> str:
        return derive_device_id(self.identity.certificate)

    async def close(self) -> None:
        await self.rpc.close()

    async def __aenter__(self):
        return self

    async def __aexit__(self, *exc):
        await self.close()

    # -- generic paths -------------------------------------------------------------

    async def evaluate(self, op: str, args: Iterable[bytes | str] = (), timestamp: datetime | None = None) -> bytes:
        prop = create_proposal(self.identity, op, args, timestamp)
        res = await self.rpc.call("Evaluate", {"proposal": prop.to_dict()}, timeout=self.timeout)
        return b64d(res["result"])

    async def evaluate_json(self, op: str, args: Iterable[bytes | str] = ()) -> Any:
        return canonical.decode(await self.evaluate(op, args))

    async def submit(self, op: str, args: Iterable[bytes | str] = (), timestamp: datetime | None = None,
                     tx_id: str | None = None) -> TxResult:
        prop = create_proposal(self.identity, op, args, timestamp, tx_id)
        res = await self.rpc.call("Submit", {"proposal": prop.to_dict()}, timeout=self.timeout)
        return TxResult(res["txId"], ValidationCode(res["validationCode"]), int(res["blockNumber"]), b64d(res["result"]))

    async def subscribe(self, *, device: tuple[str, str] | None = None, requester_id: str | None = None,
                        all_events: bool = False, cursor: tuple[int, int] | None = None,
                        dedicated: bool = True) -> EventStream:
        """Open an event stream; by default on its own connection so closing it is clean."""
        flt: dict = {}
        if all_events:
            flt["all"] = True
        if device is not None:
            flt["orgId"], flt["deviceId"] = device
        if requester_id is not None:
            flt["requesterId"] = requester_id
        payload = {"filter": flt, "cursor": None if cursor is None else list(cursor)}
        rpc = self.rpc
        if dedicated and self.endpoint is not None:
            rpc = await wire.RpcClient.open(self.endpoint.host, self.endpoint.port, self.identity)
        try:
            stream = await rpc.stream("Subscribe", payload)
        except BaseException:
            if rpc is not self.rpc:
                await rpc.close()
            raise
        return EventStream(rpc, stream, rpc is not self.rpc)

    async def subscribe_own(self, cursor: tuple[int, int] | None = None) -> EventStream:
        """Request notifications for this device and responses to its own requests."""
        return await self.subscribe(device=(self.org, self.device_id), requester_id=self.device_id, cursor=cursor)

    # -- typed helpers -------------------------------------------------------------

    async def register_device(self, name: str, description: str = "") -> TxResult:
        return await self.submit("device-registry/register", [name, description])

    async def deregister_device(self, org: str | None = None, device_id: str | None = None) -> TxResult:
        target = [] if org is None else [org, device_id]
        return await self.submit("device-registry/deregister", target)

    async def get_device(self, org: str, device_id: str) -> dict:
        return await self.evaluate_json("device-registry/get", [org, device_id])

    async def get_all_devices(self, org: str) -> list:
        return await self.evaluate_json("device-registry/get-all", [org])

    async def register_service(self, name: str, version: int, description: str = "") -> TxResult:
        return await self.submit("service-registry/register", [name, str(version), description])

    async def deregister_service(self, name: str) -> TxResult:
        return await self.submit("service-registry/deregister", [name])

    async def get_service(self, org: str, device_id: str, name: str) -> dict:
        return await self.evaluate_json("service-registry/get", [org, device_id, name])

    async def get_all_services(self, org: str) -> list:
        return await self.evaluate_json("service-registry/get-all", [org])

    async def request_service(self, org: str, device_id: str, service: str, method: str = "call",
                              arguments: Sequence[str] = (), request_id: str | None = None,
                              time: datetime | None = None) -> tuple[str, TxResult]:
        rec = ServiceRequestRecord.new(ServiceRef(service, device_id, org), method, tuple(arguments),
                                       time=time, request_id=request_id)
        res = await self.submit("service-broker/request", [canonical.encode(rec.to_dict())])
        return rec.id, res

    async def respond(self, request_id: str, status_code: int = 200, return_value: bytes | None = None,
                      time: datetime | None = None) -> TxResult:
        rsp = ServiceResponseRecord(request_id, time or canonical.utcnow(), status_code, return_value)
        return await self.submit("service-broker/respond", [canonical.encode(rsp.to_dict())])

    async def remove_request(self, request_id: str) -> TxResult:
        return await self.submit("service-broker/remove", [request_id])

    async def get_request(self, request_id: str) -> dict:
        return await self.evaluate_json("service-broker/get", [request_id])

    async def get_pending_requests(self, org: str, device_id: str) -> list:
        return await self.evaluate_json("service-broker/get-all", [org, device_id])

    async def get_response(self, request_id: str) -> dict:
        return await self.evaluate_json("service-broker/get-response", [request_id])


async def node_stats(endpoint: Endpoint, identity: Identity, timeout: float = 5.0) -> dict:
    c = await wire.RpcClient.open(endpoint.host, endpoint.port, identity, timeout=timeout)
    try:
        return await c.call("Stats", {}, timeout=timeout)
    finally:
        await c.close()


async def gather_clients(endpoints: Sequence[Endpoint], identities: Sequence[Identity]) -> list[GatewayClient]:
    return list(await asyncio.gather(*(GatewayClient.connect(e, i) for e, i in zip(endpoints, identities))))
