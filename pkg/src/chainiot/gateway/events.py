"""Commit events and their fan-out to subscribers.

Events are derived from committed blocks only, so invalidated requests never
notify anyone.  Each subscriber has a bounded queue; a subscriber that falls
behind by more than its limit is cut off with ``SUBSCRIBER_OVERFLOW``.
"""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass
from typing import Optional

from ..contracts import notification_hints
from ..errors import StreamClosed, SubscriberOverflow, ValidationError
from ..ledger import Block, BlockStore, ValidationCode

log = logging.getLogger(__name__)


def commit_events(block: Block) -> list[dict]:
    out = []
    for index, tx in enumerate(block.transactions):
        code = block.metadata[index]
        target = requester = None
        if code is ValidationCode.VALID:
            target, requester = notification_hints(tx.contract_op, tx.write_set)
        out.append({
            "blockNumber": block.number,
            "txIndex": index,
            "txId": tx.tx_id,
            "validationCode": code.value,
            "contractOp": tx.contract_op,
            "target": None if target is None else {"orgId": target[0], "deviceId": target[1]},
            "requesterId": requester,
        })
    return out


@dataclass(frozen=True)
class EventFilter:
    all: bool = False
    org_id: Optional[str] = None
    device_id: Optional[str] = None
    requester_id: Optional[str] = None

    def __post_init__(self):
        if (self.org_id is None) != (self.device_id is None):
            raise ValidationError("device filters need both orgId and deviceId")
        if not (self.all or self.device_id or self.requester_id):
            raise ValidationError("empty event filter")

    @classmethod
    def from_dict(cls, d: dict) -> "EventFilter":
        return cls(bool(d.get("all", False)), d.get("orgId"), d.get("deviceId"), d.get("requesterId"))

    def to_dict(self) -> dict:
        d: dict = {}
        if self.all:
            d["all"] = True
        if self.device_id is not None:
            d["orgId"], d["deviceId"] = self.org_id, self.device_id
        if self.requester_id is not None:
            d["requesterId"] = self.requester_id
        return d

    def matches(self, ev: dict) -> bool:
        if self.all:
            return True
        t = ev["target"]
        if self.device_id is not None and t is not None and t["deviceId"] == self.device_id and t["orgId"] == self.org_id:
            return True
        return self.requester_id is not None and ev["requesterId"] == self.requester_id


class Subscriber:
    def __init__(self, hub: "EventHub", send, fail, flt: EventFilter, backlog: list[dict], max_queue: int):
        self.hub = hub
        self.send = send  # coroutine(event) -> None
        self.fail = fail  # coroutine(error) -> None, tells the client why the stream ended
        self.filter = flt
        self.queue: asyncio.Queue = asyncio.Queue()
        self.max_queue = max_queue
        self.closed = False
        for ev in backlog:
            self.queue.put_nowait(ev)
        self.task = asyncio.get_running_loop().create_task(self._pump())

    def offer(self, ev: dict) -> None:
        if self.closed:
            return
        if self.queue.qsize() >= self.max_queue:
            self.closed = True
            self.queue.put_nowait(SubscriberOverflow(f"subscriber fell more than {self.max_queue} events behind"))
            return
        self.queue.put_nowait(ev)

    async def _pump(self) -> None:
        try:
            while True:
                item = await self.queue.get()
                if isinstance(item, BaseException):
                    raise item
                await self.send(item)
        except SubscriberOverflow as exc:
            self.closed = True
            self.hub.discard(self)
            try:
                await self.fail(exc)
            except StreamClosed:
                pass
        except (StreamClosed, asyncio.CancelledError):
            self.closed = True
            self.hub.discard(self)

    def cancel(self) -> None:
        self.closed = True
        self.task.cancel()


class EventHub:
    def __init__(self, store: BlockStore, max_queue: int = 10_000):
        self.store = store
        self.max_queue = max_queue
        self.subscribers: set[Subscriber] = set()
        self.events_published = 0

    def subscribe(self, send, fail, flt: EventFilter, cursor: Optional[tuple[int, int]] = None) -> Subscriber:
        """Live events from now on, preceded by stored events after *cursor* if given."""
        backlog: list[dict] = []
        if cursor is not None:
            b, t = cursor
            for n in range(max(0, b), self.store.height):
                for ev in commit_events(self.store[n]):
                    if (ev["blockNumber"], ev["txIndex"]) > (b, t) and flt.matches(ev):
                        backlog.append(ev)
        sub = Subscriber(self, send, fail, flt, backlog, self.max_queue + len(backlog))
        self.subscribers.add(sub)
        return sub

    def discard(self, sub: Subscriber) -> None:
        self.subscribers.discard(sub)

    def publish(self, block: Block) -> None:
        if not self.subscribers:
            return
        events = commit_events(block)
        self.events_published += len(events)
        for sub in list(self.subscribers):
            flt = sub.filter
            for ev in events:
                if flt.matches(ev):
                    sub.offer(ev)
