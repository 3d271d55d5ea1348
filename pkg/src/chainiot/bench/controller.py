"""Fixed-load rate control: keep a constant number of operations in flight."""

from __future__ import annotations

import asyncio


class FixedLoadController:
    """A new op may start only while fewer than ``target`` are outstanding.

    All updates happen on one event loop, so the counter needs no lock.
    """

    def __init__(self, target: int):
        if target < 1:
            raise ValueError("fixed load must be >= 1")
        self.target = target
        self.in_flight = 0
        self.max_in_flight = 0
        self.dispatched = 0
        self.completed = 0
        self._slot = asyncio.Condition()

    async def acquire(self) -> None:
        async with self._slot:
            await self._slot.wait_for(lambda: self.in_flight < self.target)
            self.in_flight += 1
            self.dispatched += 1
            if self.in_flight > self.max_in_flight:
                self.max_in_flight = self.in_flight
            assert self.in_flight <= self.target

    async def release(self) -> None:
        async with self._slot:
            self.in_flight -= 1
            self.completed += 1
            self._slot.notify_all()

    async def drain(self) -> None:
        async with self._slot:
            await self._slot.wait_for(lambda: self.in_flight == 0)
