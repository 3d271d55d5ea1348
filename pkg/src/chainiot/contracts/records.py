"""Device, service, request and response records as stored in world state."""

from __future__ import annotations

import uuid
from dataclasses import dataclass, field
from datetime import datetime
from typing import Optional

from .. import canonical
from ..canonical import b64d, b64e
from ..errors import ValidationError


def _require(d: dict, *names: str) -> None:
    missing = [n for n in names if n not in d]
    if missing:
        raise ValidationError(f"missing fields: {', '.join(missing)}")


@dataclass(frozen=True)
class DeviceRecord:
    device_id: str
    organization_id: str
    name: str
    description: str
    last_update_time: datetime

    def to_dict(self) -> dict:
        return {
            "deviceId": self.device_id,
            "organizationId": self.organization_id,
            "name": self.name,
            "description": self.description,
            "lastUpdateTime": canonical.format_time(self.last_update_time),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DeviceRecord":
        _require(d, "deviceId", "organizationId", "name", "description", "lastUpdateTime")
        return cls(d["deviceId"], d["organizationId"], d["name"], d["description"],
                   canonical.parse_time(d["lastUpdateTime"]))


@dataclass(frozen=True)
class ServiceRecord:
    name: str
    device_id: str
    organization_id: str
    version: int
    description: str
    last_update_time: datetime

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "deviceId": self.device_id,
            "organizationId": self.organization_id,
            "version": self.version,
            "description": self.description,
            "lastUpdateTime": canonical.format_time(self.last_update_time),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceRecord":
        _require(d, "name", "deviceId", "organizationId", "version", "description", "lastUpdateTime")
        return cls(d["name"], d["deviceId"], d["organizationId"], int(d["version"]), d["description"],
                   canonical.parse_time(d["lastUpdateTime"]))


@dataclass(frozen=True)
class ServiceRef:
    name: str
    device_id: str
    organization_id: str

    def to_dict(self) -> dict:
        return {"name": self.name, "deviceId": self.device_id, "organizationId": self.organization_id}

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceRef":
        _require(d, "name", "deviceId", "organizationId")
        return cls(d["name"], d["deviceId"], d["organizationId"])


@dataclass(frozen=True)
class ServiceRequestRecord:
    id: str
    time: datetime
    service: ServiceRef
    method: str
    arguments: tuple[str, ...] = ()
    # filled in by the broker from the caller's certificate
    requester: Optional[str] = None
    requester_org: Optional[str] = None

    @classmethod
    def new(cls, service: ServiceRef, method: str, arguments=(), time: datetime | None = None,
            request_id: str | None = None) -> "ServiceRequestRecord":
        return cls(request_id or str(uuid.uuid4()), time or canonical.utcnow(), service, method, tuple(arguments))

    def to_dict(self) -> dict:
        d = {
            "id": self.id,
            "time": canonical.format_time(self.time),
            "service": self.service.to_dict(),
            "method": self.method,
            "arguments": list(self.arguments),
        }
        if self.requester is not None:
            d["requester"] = self.requester
            d["requesterOrg"] = self.requester_org
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceRequestRecord":
        _require(d, "id", "time", "service", "method")
        args = d.get("arguments") or []
        if not isinstance(args, list) or not all(isinstance(a, str) for a in args):
            raise ValidationError("arguments must be a list of strings")
        try:
            uuid.UUID(str(d["id"]))
        except ValueError:
            raise ValidationError(f"request id {d['id']!r} is not a UUID") from None
        return cls(str(d["id"]), canonical.parse_time(d["time"]), ServiceRef.from_dict(d["service"]),
                   str(d["method"]), tuple(args), d.get("requester"), d.get("requesterOrg"))


@dataclass(frozen=True)
class ServiceResponseRecord:
    request_id: str
    time: datetime
    status_code: int
    return_value: Optional[bytes] = None
    requester: Optional[str] = None

    def to_dict(self) -> dict:
        d = {
            "requestId": self.request_id,
            "time": canonical.format_time(self.time),
            "statusCode": self.status_code,
            "returnValue": None if self.return_value is None else b64e(self.return_value),
        }
        if self.requester is not None:
            d["requester"] = self.requester
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ServiceResponseRecord":
        _require(d, "requestId", "time", "statusCode")
        rv = d.get("returnValue")
        return cls(str(d["requestId"]), canonical.parse_time(d["time"]), int(d["statusCode"]),
                   None if rv is None else b64d(rv), d.get("requester"))


def dumps(record) -> bytes:
    return canonical.encode(record.to_dict())
