"""Count-, size- and time-triggered block cutting."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Generic, Optional, TypeVar

from ..errors import MessageTooLarge, ValidationError

T = TypeVar("T")


@dataclass(frozen=True)
class BatchConfig:
    max_message_count: int = 500
    preferred_max_bytes: int = 512 * 1024
    absolute_max_bytes: int = 10 * 1024 * 1024
    batch_timeout: float = 2.0  # seconds

    def __post_init__(self):
        if self.max_message_count < 1 or self.preferred_max_bytes < 1:
            raise ValidationError("maxMessageCount and preferredMaxBytes must be >= 1")
        if self.absolute_max_bytes < self.preferred_max_bytes:
            raise ValidationError("absoluteMaxBytes must be >= preferredMaxBytes")
        if not self.batch_timeout > 0:
            raise ValidationError("batchTimeout must be positive")

    def to_dict(self) -> dict:
        return {
            "maxMessageCount": self.max_message_count,
            "preferredMaxBytes": self.preferred_max_bytes,
            "absoluteMaxBytes": self.absolute_max_bytes,
            "batchTimeoutMs": int(round(self.batch_timeout * 1000)),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BatchConfig":
        base = cls()
        return cls(
            max_message_count=int(d.get("maxMessageCount", base.max_message_count)),
            preferred_max_bytes=int(d.get("preferredMaxBytes", base.preferred_max_bytes)),
            absolute_max_bytes=int(d.get("absoluteMaxBytes", base.absolute_max_bytes)),
            batch_timeout=int(d.get("batchTimeoutMs", base.batch_timeout * 1000)) / 1000.0,
        )


@dataclass
class PendingBatch(Generic[T]):
    messages: list[T] = field(default_factory=list)
    byte_size: int = 0
    timer_deadline: Optional[float] = None

    @property
    def message_count(self) -> int:
        return len(self.messages)


class BlockCutter(Generic[T]):
    """Groups envelopes into batches.

    ``enqueue`` returns every batch cut as a consequence of the arrival, in
    order.  Times are plain floats (seconds on any monotonic clock).
    """

    def __init__(self, config: BatchConfig):
        self.config = config
        self.pending: PendingBatch[T] = PendingBatch()

    def enqueue(self, message: T, size: int, now: float) -> list[list[T]]:
        cfg = self.config
        if size > cfg.absolute_max_bytes:
            raise MessageTooLarge(f"envelope of {size} bytes exceeds absoluteMaxBytes={cfg.absolute_max_bytes}")
        batches: list[list[T]] = []
        expired = self.on_timeout(now)
        if expired is not None:
            batches.append(expired)
        if size > cfg.preferred_max_bytes:
            if self.pending.messages:
                batches.append(self.cut())
            batches.append([message])
            return batches
        if self.pending.messages and self.pending.byte_size + size > cfg.preferred_max_bytes:
            batches.append(self.cut())
        if not self.pending.messages:
            self.pending.timer_deadline = now + cfg.batch_timeout
        self.pending.messages.append(message)
        self.pending.byte_size += size
        if self.pending.message_count >= cfg.max_message_count:
            batches.append(self.cut())
        return batches

    def on_timeout(self, now: float) -> Optional[list[T]]:
        p = self.pending
        if p.messages and p.timer_deadline is not None and now >= p.timer_deadline:
            return self.cut()
        return None

    def cut(self) -> list[T]:
        batch = self.pending.messages
        self.pending = PendingBatch()
        return batch

    def discard(self) -> list[T]:
        return self.cut()

    @property
    def deadline(self) -> Optional[float]:
        return self.pending.timer_deadline
