from __future__ import annotations

from abc import ABC, abstractmethod
from typing import Optional, Tuple


class MainMemoryModel(ABC):
    """Timing model behind the DMA backends. Storage lives in ``self.store``."""

    @abstractmethod
    def channel_of(self, addr: int) -> int: ...

    @abstractmethod
    def submit(self, cycle: int, channel: int, nbytes: int, hbm_addr: int, key: Optional[int] = None) -> Tuple[int, int]:
        """Returns (service_end_cycle, completion_cycle)."""
        ...

    def hbm_submit(self, cycle: int, channel: int, burst) -> int:
        """Queue one burst on ``channel`` and stamp its service end and completion."""
        service_end, completion = self.submit(cycle, channel, burst.bytes, burst.hbm_addr, burst.uid)
        burst.issue_cycle = cycle
        burst.service_end = service_end
        burst.completion = completion
        return completion

    @property
    @abstractmethod
    def peak_bytes_per_cycle(self) -> float: ...

    @property
    @abstractmethod
    def model_name(self) -> str: ...
