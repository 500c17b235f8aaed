# taskq.py: the lifelong task stream
#
# Tasks wait on a heap ordered by (arrival, priority, entry id). The entry id
# increases monotonically, so tasks with equal arrival and priority leave in
# insertion order and the trainer sees the same stream on every run.

import heapq
import threading
from typing import Dict, List, Optional, Tuple

from mtgan.environments import PlantSpec

# InvalidEntryID is never returned by TaskQueue.insert()
InvalidEntryID = 0


class Entry:
    """
    entryID: unique identifier of every task inserted into the queue
    spec: the queued task
    arrival: primary ordering key
    priority: secondary ordering key, lower leaves first
    cancel: marked for removal; skipped when it reaches the top
    """
    __slots__ = ("entryID", "spec", "arrival", "priority", "cancel")

    def __init__(self, entryID: int, spec: PlantSpec, arrival: float, priority: int):
        self.entryID = entryID
        self.spec = spec
        self.arrival = arrival
        self.priority = priority
        self.cancel = False

    def key(self) -> Tuple[float, int, int]:
        return (self.arrival, self.priority, self.entryID)

    def __lt__(self, other: "Entry"):
        return self.key() < other.key()


class TaskQueue:
    """
    entryID: monotonically increasing counter, also the default arrival key
    heap: entries ordered by key()
    lookup: entry id to live entry, used by remove()
    mu: guards every operation
    """

    def __init__(self, specs: Optional[List[PlantSpec]] = None):
        self.entryID = InvalidEntryID
        self.heap: List[Entry] = []
        self.lookup: Dict[int, Entry] = {}
        self.mu = threading.Lock()
        for spec in specs or ():
            self.insert(spec)

    def __len__(self) -> int:
        with self.mu:
            return len(self.lookup)

    def __bool__(self) -> bool:
        return len(self) > 0

    def _drop_cancelled(self):
        while self.heap and self.heap[0].cancel:
            heapq.heappop(self.heap)

    def insert(self, spec: PlantSpec, arrival: Optional[float] = None, priority: int = 0) -> int:
        """Queues a task. Without an explicit arrival the task arrives after everything inserted so far."""
        with self.mu:
            self.entryID += 1
            arrival = float(self.entryID) if arrival is None else float(arrival)
            entry = Entry(self.entryID, spec, arrival, priority)
            heapq.heappush(self.heap, entry)
            self.lookup[self.entryID] = entry
            return self.entryID

    def pop(self) -> Optional[PlantSpec]:
        """Removes and returns the next task, or None when the stream is exhausted."""
        with self.mu:
            self._drop_cancelled()
            if not self.heap:
                return None
            entry = heapq.heappop(self.heap)
            self.lookup.pop(entry.entryID, None)
            return entry.spec

    def peek_arrival(self) -> Optional[float]:
        with self.mu:
            self._drop_cancelled()
            return self.heap[0].arrival if self.heap else None

    def remove(self, entryID: int) -> bool:
        """Withdraws a queued task. Returns True on success."""
        with self.mu:
            entry = self.lookup.pop(entryID, None)
            if entry is None:
                return False
            entry.cancel = True
            return True
