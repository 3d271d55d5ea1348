"""World-state key layout (a stable compatibility surface).

    dev/{org}/{deviceId}            device record
    svc/{org}/{deviceId}/{name}     service record
    req/{requestId}                 service request
    rsp/{requestId}                 service response
    pend/{org}/{deviceId}/{reqId}   pending-request index entry
"""

from __future__ import annotations

from ..errors import ValidationError


def _segment(value: str, what: str) -> str:
    if not isinstance(value, str) or not value:
        raise ValidationError(f"{what} must be a non-empty string")
    if "/" in value:
        raise ValidationError(f"'/' is not allowed in {what}: {value!r}")
    return value


def device_key(org: str, device_id: str) -> str:
    return f"dev/{_segment(org, 'orgId')}/{_segment(device_id, 'deviceId')}"


def device_prefix(org: str) -> str:
    return f"dev/{_segment(org, 'orgId')}/"


def service_key(org: str, device_id: str, name: str) -> str:
    return f"svc/{_segment(org, 'orgId')}/{_segment(device_id, 'deviceId')}/{_segment(name, 'service name')}"


def service_prefix(org: str, device_id: str | None = None) -> str:
    if device_id is None:
        return f"svc/{_segment(org, 'orgId')}/"
    return f"svc/{_segment(org, 'orgId')}/{_segment(device_id, 'deviceId')}/"


def request_key(request_id: str) -> str:
    return f"req/{_segment(request_id, 'request id')}"


def response_key(request_id: str) -> str:
    return f"rsp/{_segment(request_id, 'request id')}"


def pending_key(org: str, device_id: str, request_id: str) -> str:
    return f"pend/{_segment(org, 'orgId')}/{_segment(device_id, 'deviceId')}/{_segment(request_id, 'request id')}"


def pending_prefix(org: str, device_id: str) -> str:
    return f"pend/{_segment(org, 'orgId')}/{_segment(device_id, 'deviceId')}/"
