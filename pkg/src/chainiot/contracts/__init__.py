"""Service registry and service broker contracts sharing one world state."""

from .chaincode import (
    OPERATIONS,
    READ_OPERATIONS,
    WRITE_OPERATIONS,
    ContractContext,
    Operation,
    notification_hints,
)
from .records import (
    DeviceRecord,
    ServiceRecord,
    ServiceRef,
    ServiceRequestRecord,
    ServiceResponseRecord,
)

__all__ = [
    "OPERATIONS",
    "READ_OPERATIONS",
    "WRITE_OPERATIONS",
    "ContractContext",
    "Operation",
    "notification_hints",
    "DeviceRecord",
    "ServiceRecord",
    "ServiceRef",
    "ServiceRequestRecord",
    "ServiceResponseRecord",
]
