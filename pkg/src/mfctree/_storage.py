"""Allocation of large level arrays with a RAM budget and disk spill.

Fields on deep trees (levels x nodes x particles) can exceed physical memory.
Arrays allocated here stay in RAM while the budget allows and otherwise live
in unlinked temporary files mapped with ``numpy.memmap``. The backing store
never changes the numbers, only where they are kept.
"""
import os
import tempfile
import threading
import weakref

import numpy as np


def _physical_memory():
    try:
        return os.sysconf("SC_PAGE_SIZE") * os.sysconf("SC_PHYS_PAGES")
    except (ValueError, OSError, AttributeError):
        return 4 * 2**30


class FieldAllocator:
    """Hand out float arrays, spilling to memory-mapped files past ``budget`` bytes."""

    def __init__(self, budget=None, spill_dir=None):
        self.budget = int(0.7 * _physical_memory()) if budget is None else int(budget)
        self.spill_dir = spill_dir
        self.in_ram = 0
        self.spilled = 0
        self._lock = threading.Lock()

    def _release(self, nbytes):
        with self._lock:
            self.in_ram -= nbytes

    def empty(self, shape, dtype=np.float64):
        shape = tuple(int(s) for s in shape)
        nbytes = int(np.prod(shape, dtype=np.int64)) * np.dtype(dtype).itemsize
        with self._lock:
            fits = self.in_ram + nbytes <= self.budget or nbytes == 0
            if fits:
                self.in_ram += nbytes
        if fits:
            arr = np.empty(shape, dtype=dtype)
            weakref.finalize(arr, self._release, nbytes)
            return arr
        fd, path = tempfile.mkstemp(prefix="mfctree-", suffix=".bin", dir=self.spill_dir)
        try:
            os.ftruncate(fd, nbytes)
            arr = np.memmap(path, dtype=dtype, mode="r+", shape=shape)
        finally:
            os.close(fd)
            os.unlink(path)
        with self._lock:
            self.spilled += nbytes
        return arr

    def zeros(self, shape, dtype=np.float64):
        arr = self.empty(shape, dtype)
        arr[...] = 0.0
        return arr


ALLOCATOR = FieldAllocator()


def set_memory_budget(nbytes):
    """Set the RAM budget (bytes) for large level arrays."""
    ALLOCATOR.budget = int(nbytes)


def chunk_ranges(n_items, per_chunk):
    """Split ``range(n_items)`` into consecutive ``(start, stop)`` pairs."""
    per_chunk = max(1, int(per_chunk))
    return [(s, min(s + per_chunk, n_items)) for s in range(0, n_items, per_chunk)]
