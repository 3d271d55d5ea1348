"""Service registry and service broker, packaged as one operation table.

Each operation receives a :class:`ContractContext` and its raw byte-string
arguments and returns the canonical result payload.  Operations never read
clocks or randomness: every timestamp comes from the client's proposal.
"""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime
from typing import Callable, Optional, Protocol

from .. import canonical
from ..errors import (
    AccessDenied,
    AlreadyResponded,
    DeviceNotRegistered,
    DuplicateRequestId,
    NotFound,
    RequestNotFound,
    ServiceNotFound,
    StaleVersion,
    ValidationError,
)
from ..identity import Certificate, Role, derive_device_id
from . import keys
from .records import (
    DeviceRecord,
    ServiceRecord,
    ServiceRequestRecord,
    ServiceResponseRecord,
    dumps,
)


class StateView(Protocol):
    def get(self, key: str) -> Optional[bytes]: ...
    def put(self, key: str, value: bytes) -> None: ...
    def delete(self, key: str) -> None: ...
    def scan(self, prefix: str) -> list[tuple[str, bytes]]: ...


@dataclass
class ContractContext:
    state: StateView
    caller_cert: Certificate
    caller_org: str
    caller_role: Role
    timestamp: datetime
    tx_id: str

    @property
    def caller_device_id(self) -> str:
        return derive_device_id(self.caller_cert)

    def require_writer(self) -> None:
        if not self.caller_role.can_write:
            raise AccessDenied(f"role {self.caller_role.value!r} may not modify the ledger")

    def require_owner(self, org: str, device_id: str) -> None:
        if org != self.caller_org or device_id != self.caller_device_id:
            raise AccessDenied("only the owning device may modify this record")


@dataclass(frozen=True)
class Operation:
    name: str
    fn: Callable[..., bytes]
    read_only: bool


OPERATIONS: dict[str, Operation] = {}


def operation(name: str, read_only: bool = False):
    def register(fn):
        OPERATIONS[name] = Operation(name, fn, read_only)
        return fn

    return register


def _text(arg: bytes, what: str) -> str:
    try:
        return arg.decode("utf-8")
    except (UnicodeDecodeError, AttributeError):
        raise ValidationError(f"{what} must be UTF-8 text") from None


def _json(arg: bytes, what: str) -> dict:
    try:
        d = canonical.decode(arg)
    except ValueError:
        raise ValidationError(f"{what} must be a JSON object") from None
    if not isinstance(d, dict):
        raise ValidationError(f"{what} must be a JSON object")
    return d


def _target(ctx: ContractContext, args: tuple[bytes, ...], offset: int) -> tuple[str, str]:
    """Optional trailing (orgId, deviceId) target; defaults to the caller's own device."""
    if len(args) >= offset + 2:
        return _text(args[offset], "orgId"), _text(args[offset + 1], "deviceId")
    return ctx.caller_org, ctx.caller_device_id


def _list_payload(records) -> bytes:
    return canonical.encode([r.to_dict() for r in records])


# -- service registry: devices ---------------------------------------------------

@operation("device-registry/register")
def register_device(ctx: ContractContext, name: bytes, description: bytes = b"") -> bytes:
    ctx.require_writer()
    record = DeviceRecord(
        device_id=ctx.caller_device_id,
        organization_id=ctx.caller_org,
        name=_text(name, "name"),
        description=_text(description, "description"),
        last_update_time=ctx.timestamp,
    )
    payload = dumps(record)
    ctx.state.put(keys.device_key(record.organization_id, record.device_id), payload)
    return payload


@operation("device-registry/deregister")
def deregister_device(ctx: ContractContext, *args: bytes) -> bytes:
    ctx.require_writer()
    org, device_id = _target(ctx, args, 0)
    key = keys.device_key(org, device_id)
    if ctx.state.get(key) is None:
        raise NotFound(f"device {org}/{device_id} is not registered")
    ctx.require_owner(org, device_id)
    ctx.state.delete(key)
    for svc_key, _ in ctx.state.scan(keys.service_prefix(org, device_id)):
        ctx.state.delete(svc_key)
    return b"{}"


@operation("device-registry/get", read_only=True)
def get_device(ctx: ContractContext, org: bytes, device_id: bytes) -> bytes:
    value = ctx.state.get(keys.device_key(_text(org, "orgId"), _text(device_id, "deviceId")))
    if value is None:
        raise NotFound("device not found")
    return value


@operation("device-registry/get-all", read_only=True)
def get_all_devices(ctx: ContractContext, org: bytes) -> bytes:
    records = [DeviceRecord.from_dict(canonical.decode(v)) for _, v in ctx.state.scan(keys.device_prefix(_text(org, "orgId")))]
    records.sort(key=lambda r: r.device_id)
    return _list_payload(records)


# -- service registry: services --------------------------------------------------

def _parse_version(raw: bytes) -> int:
    try:
        version = int(_text(raw, "version"))
    except ValueError:
        raise ValidationError("version must be an integer") from None
    if version < 1:
        raise ValidationError("version must be >= 1")
    return version


@operation("service-registry/register")
def register_service(ctx: ContractContext, name: bytes, version: bytes, description: bytes = b"", *target: bytes) -> bytes:
    ctx.require_writer()
    org, device_id = _target(ctx, target, 0)
    ctx.require_owner(org, device_id)
    if ctx.state.get(keys.device_key(org, device_id)) is None:
        raise DeviceNotRegistered("register the device before its services")
    record = ServiceRecord(
        name=_text(name, "service name"),
        device_id=device_id,
        organization_id=org,
        version=_parse_version(version),
        description=_text(description, "description"),
        last_update_time=ctx.timestamp,
    )
    key = keys.service_key(org, device_id, record.name)
    existing = ctx.state.get(key)
    if existing is not None:
        current = ServiceRecord.from_dict(canonical.decode(existing))
        if record.version <= current.version:
            raise StaleVersion(f"version {record.version} is not greater than registered version {current.version}")
    payload = dumps(record)
    ctx.state.put(key, payload)
    return payload


@operation("service-registry/deregister")
def deregister_service(ctx: ContractContext, name: bytes, *target: bytes) -> bytes:
    ctx.require_writer()
    org, device_id = _target(ctx, target, 0)
    key = keys.service_key(org, device_id, _text(name, "service name"))
    if ctx.state.get(key) is None:
        raise NotFound("service not found")
    ctx.require_owner(org, device_id)
    ctx.state.delete(key)
    return b"{}"


@operation("service-registry/get", read_only=True)
def get_service(ctx: ContractContext, org: bytes, device_id: bytes, name: bytes) -> bytes:
    value = ctx.state.get(keys.service_key(_text(org, "orgId"), _text(device_id, "deviceId"), _text(name, "service name")))
    if value is None:
        raise NotFound("service not found")
    return value


@operation("service-registry/get-all", read_only=True)
def get_all_services(ctx: ContractContext, org: bytes) -> bytes:
    records = [ServiceRecord.from_dict(canonical.decode(v)) for _, v in ctx.state.scan(keys.service_prefix(_text(org, "orgId")))]
    records.sort(key=lambda r: (r.device_id, r.name))
    return _list_payload(records)


# -- service broker ----------------------------------------------------------------

def _load_request(ctx: ContractContext, request_id: str) -> Optional[ServiceRequestRecord]:
    raw = ctx.state.get(keys.request_key(request_id))
    return None if raw is None else ServiceRequestRecord.from_dict(canonical.decode(raw))


@operation("service-broker/request")
def request_service(ctx: ContractContext, request: bytes) -> bytes:
    ctx.require_writer()
    rec = ServiceRequestRecord.from_dict(_json(request, "request"))
    svc = rec.service
    if ctx.state.get(keys.request_key(rec.id)) is not None:
        raise DuplicateRequestId(f"request {rec.id} already exists")
    if ctx.state.get(keys.service_key(svc.organization_id, svc.device_id, svc.name)) is None:
        raise ServiceNotFound(f"service {svc.organization_id}/{svc.device_id}/{svc.name} not found")
    stored = ServiceRequestRecord(rec.id, rec.time, svc, rec.method, rec.arguments,
                                  requester=ctx.caller_device_id, requester_org=ctx.caller_org)
    payload = dumps(stored)
    ctx.state.put(keys.request_key(rec.id), payload)
    ctx.state.put(keys.pending_key(svc.organization_id, svc.device_id, rec.id), b"1")
    return payload


@operation("service-broker/respond")
def respond_to_request(ctx: ContractContext, response: bytes) -> bytes:
    ctx.require_writer()
    rsp = ServiceResponseRecord.from_dict(_json(response, "response"))
    req = _load_request(ctx, rsp.request_id)
    if req is None:
        raise RequestNotFound(f"request {rsp.request_id} not found")
    ctx.require_owner(req.service.organization_id, req.service.device_id)
    if ctx.state.get(keys.response_key(rsp.request_id)) is not None:
        raise AlreadyResponded(f"request {rsp.request_id} already has a response")
    stored = ServiceResponseRecord(rsp.request_id, rsp.time, rsp.status_code, rsp.return_value, requester=req.requester)
    payload = dumps(stored)
    ctx.state.put(keys.response_key(rsp.request_id), payload)
    ctx.state.delete(keys.pending_key(req.service.organization_id, req.service.device_id, req.id))
    return payload


@operation("service-broker/get", read_only=True)
def get_request(ctx: ContractContext, request_id: bytes) -> bytes:
    value = ctx.state.get(keys.request_key(_text(request_id, "request id")))
    if value is None:
        raise NotFound("request not found")
    return value


@operation("service-broker/get-all", read_only=True)
def get_all_requests(ctx: ContractContext, org: bytes, device_id: bytes) -> bytes:
    prefix = keys.pending_prefix(_text(org, "orgId"), _text(device_id, "deviceId"))
    records = []
    for key, _ in ctx.state.scan(prefix):
        req = _load_request(ctx, key[len(prefix):])
        if req is not None:
            records.append(req)
    records.sort(key=lambda r: (r.time, r.id))
    return _list_payload(records)


@operation("service-broker/get-response", read_only=True)
def get_response(ctx: ContractContext, request_id: bytes) -> bytes:
    value = ctx.state.get(keys.response_key(_text(request_id, "request id")))
    if value is None:
        raise NotFound("response not found")
    return value


@operation("service-broker/remove")
def remove_request(ctx: ContractContext, request_id: bytes) -> bytes:
    ctx.require_writer()
    rid = _text(request_id, "request id")
    req = _load_request(ctx, rid)
    if req is None:
        raise NotFound(f"request {rid} not found")
    is_requester = req.requester == ctx.caller_device_id and req.requester_org == ctx.caller_org
    is_target = (req.service.organization_id, req.service.device_id) == (ctx.caller_org, ctx.caller_device_id)
    if not (is_requester or is_target):
        raise AccessDenied("only the requester or the target device may remove a request")
    ctx.state.delete(keys.request_key(rid))
    ctx.state.delete(keys.response_key(rid))
    ctx.state.delete(keys.pending_key(req.service.organization_id, req.service.device_id, rid))
    return b"{}"


READ_OPERATIONS = frozenset(name for name, op in OPERATIONS.items() if op.read_only)
WRITE_OPERATIONS = frozenset(name for name, op in OPERATIONS.items() if not op.read_only)


def notification_hints(contract_op: str, write_set) -> tuple[Optional[tuple[str, str]], Optional[str]]:
    """(target (org, deviceId), requesterId) derived from a committed write set."""
    target = None
    requester = None
    if contract_op == "service-broker/request":
        for key, value in write_set:
            if key.startswith("req/") and value is not None:
                svc = canonical.decode(value)["service"]
                target = (svc["organizationId"], svc["deviceId"])
    elif contract_op == "service-broker/respond":
        for key, value in write_set:
            if key.startswith("rsp/") and value is not None:
                requester = canonical.decode(value).get("requester")
    return target, requester
