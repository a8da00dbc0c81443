import logging
import os
from collections import Counter
from typing import Iterable, Optional, Tuple

from atomicwrites import atomic_write

logger = logging.getLogger()

FNV_OFFSET_64 = 0xcbf29ce484222325
FNV_PRIME_64 = 0x100000001b3
MASK_64 = 0xFFFFFFFFFFFFFFFF


def fnv1a_64(data: bytes, seed: int = FNV_OFFSET_64) -> int:
    """FNV-1a/64 over raw bytes; `seed` lets callers chain several buffers."""
    value = seed
    for byte in data:
        value ^= byte
        value = (value * FNV_PRIME_64) & MASK_64
    return value


def fnv1a_64_parts(parts: Iterable[bytes]) -> int:
    """Hash a sequence of byte strings, each followed by a NUL separator."""
    value = FNV_OFFSET_64
    for part in parts:
        value = fnv1a_64(part, value)
        value = fnv1a_64(b'\x00', value)
    return value


def wrap_int64(value: int) -> int:
    """Two's-complement wraparound to a signed 64-bit integer."""
    value &= MASK_64
    return value - (1 << 64) if value & (1 << 63) else value


def write_atomic(path: str, data: bytes) -> None:
    """Write-temp-then-rename; readers see either the old file or the new one."""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with atomic_write(path, mode='wb', overwrite=True) as f:
        f.write(data)


class SourceFS:
    """Filesystem access used by the dependency checker and the interface cache.

    Every metadata lookup goes through `stat`, so the number of calls per path
    can be counted; the library shortcut is judged by these counters.
    """

    def __init__(self):
        self.stat_calls = Counter()
        self.read_calls = Counter()

    def stat(self, path: str) -> Optional[Tuple[int, int]]:
        """Return (mtime_ns, size) or None when the file does not exist."""
        self.stat_calls[path] += 1
        try:
            st = os.stat(path)
        except FileNotFoundError:
            return None
        return st.st_mtime_ns, st.st_size

    def read_bytes(self, path: str) -> bytes:
        self.read_calls[path] += 1
        with open(path, 'rb') as f:
            return f.read()

    def stats_under(self, directory: str) -> int:
        """Number of stat calls issued for paths below `directory`."""
        prefix = os.path.abspath(directory).rstrip(os.sep) + os.sep
        return sum(count for path, count in self.stat_calls.items()
                   if os.path.abspath(path).startswith(prefix))

    def reset_counters(self) -> None:
        self.stat_calls.clear()
        self.read_calls.clear()
