"""Client-facing gateway embedded in each peer process."""

from .events import EventFilter, EventHub, commit_events
from .gateway import CommitTracker, Gateway, OrdererClient, SubmitResult

__all__ = ["CommitTracker", "EventFilter", "EventHub", "Gateway", "OrdererClient", "SubmitResult", "commit_events"]
