"""Block cutting and replicated ordering of endorsed transactions."""

from .cutter import BatchConfig, BlockCutter, PendingBatch

__all__ = ["BatchConfig", "BlockCutter", "PendingBatch"]
