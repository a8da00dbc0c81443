"""Smart recompilation: decide which units to recompile.

A unit is recompiled when its own source changed, its object file is gone, or
one of the imported declarations it used at its last compile now has a
different fingerprint. An edit to an imported file is not enough by itself.
"""
import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Set, Tuple

from src.toolchain.frontend import ABSENT, DeclRef, InterfaceAST, SourceUnit
from src.utils.helpers import fnv1a_64_parts, write_atomic

logger = logging.getLogger()

STATE_FILE = '.m3state'
STATE_MAGIC = b'M3S1'
STATE_VERSION = 1

SOURCE_MODIFIED = 'source-modified'
USED_DECL_CHANGED = 'used-decl-changed'
MISSING_OBJECT = 'missing-object'


class DepcheckError(Exception):
    """Base class for dependency-check errors."""
    pass


class StateCorrupt(DepcheckError):
    """The build state file cannot be decoded."""
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"corrupt build state: {reason}")


class PersistError(DepcheckError):
    """The build state could not be written."""
    def __init__(self, detail):
        self.detail = detail
        super().__init__(f"cannot persist build state: {detail}")


@dataclass(frozen=True)
class UnitState:
    text_hash: int
    mtime: int                          # nanoseconds
    used: Dict[DeclRef, int] = field(default_factory=dict, hash=False)


@dataclass
class BuildState:
    """What the last successful build saw, per compiled unit (keyed by unit id)."""
    units: Dict[str, UnitState] = field(default_factory=dict)

    @property
    def package_stamp(self) -> int:
        parts = []
        for unit_id in sorted(self.units):
            entry = self.units[unit_id]
            parts.append(unit_id.encode('utf-8'))
            parts.append(struct.pack('<Qq', entry.text_hash, entry.mtime))
            for (iface, name), fp in sorted(entry.used.items()):
                parts.append(f"{iface}.{name}".encode('utf-8') + struct.pack('<Q', fp))
        return fnv1a_64_parts(parts)

    def is_empty(self) -> bool:
        return not self.units


@dataclass(frozen=True)
class Reason:
    kind: str
    interface: Optional[str] = None
    name: Optional[str] = None

    def __str__(self):
        if self.kind == USED_DECL_CHANGED:
            return f"{self.kind}({self.interface}.{self.name})"
        return self.kind


@dataclass
class DirtySet:
    units: Set[str] = field(default_factory=set)
    reasons: Dict[str, List[Reason]] = field(default_factory=dict)

    def add(self, unit_id: str, reason: Reason) -> None:
        self.units.add(unit_id)
        self.reasons.setdefault(unit_id, []).append(reason)

    def __contains__(self, unit_id):
        return unit_id in self.units

    def __len__(self):
        return len(self.units)


# ---------------------------------------------------------------------------
# .m3state codec

def _pack_str(text: str) -> bytes:
    raw = text.encode('utf-8')
    return struct.pack('<H', len(raw)) + raw


def encode_state(state: BuildState) -> bytes:
    out = bytearray(STATE_MAGIC)
    out += struct.pack('<HI', STATE_VERSION, len(state.units))
    for unit_id in sorted(state.units):
        entry = state.units[unit_id]
        secs, nanos = divmod(entry.mtime, 1_000_000_000)
        out += _pack_str(unit_id)
        out += struct.pack('<QqII', entry.text_hash, secs, nanos, len(entry.used))
        for (iface, name), fp in sorted(entry.used.items()):
            out += _pack_str(iface) + _pack_str(name) + struct.pack('<Q', fp)
    return bytes(out)


class _Cursor:

    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str) -> tuple:
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.data):
            raise StateCorrupt(f"truncated at byte {self.pos}")
        values = struct.unpack_from(fmt, self.data, self.pos)
        self.pos += size
        return values

    def text(self) -> str:
        (n,) = self.take('<H')
        if self.pos + n > len(self.data):
            raise StateCorrupt(f"truncated string at byte {self.pos}")
        raw = self.data[self.pos:self.pos + n]
        self.pos += n
        try:
            return raw.decode('utf-8')
        except UnicodeDecodeError:
            raise StateCorrupt(f"bad string at byte {self.pos - n}") from None


def decode_state(data: bytes) -> BuildState:
    if data[:4] != STATE_MAGIC:
        raise StateCorrupt('bad magic')
    cursor = _Cursor(data)
    cursor.pos = 4
    version, count = cursor.take('<HI')
    if version != STATE_VERSION:
        raise StateCorrupt(f"unsupported version {version}")
    units: Dict[str, UnitState] = {}
    for _ in range(count):
        unit_id = cursor.text()
        text_hash, secs, nanos, n_used = cursor.take('<QqII')
        if nanos >= 1_000_000_000:
            raise StateCorrupt(f"{unit_id}: bad mtime")
        used = {}
        for _ in range(n_used):
            iface = cursor.text()
            name = cursor.text()
            (fp,) = cursor.take('<Q')
            used[(iface, name)] = fp
        units[unit_id] = UnitState(text_hash, secs * 1_000_000_000 + nanos, used)
    if cursor.pos != len(data):
        raise StateCorrupt(f"{len(data) - cursor.pos} trailing bytes")
    return BuildState(units)


def state_path(build_dir: str) -> str:
    return os.path.join(build_dir, STATE_FILE)


def load_build_state(path: str) -> BuildState:
    """Previous build state; missing or corrupt files yield an empty state (full rebuild)."""
    try:
        with open(path, 'rb') as f:
            data = f.read()
    except FileNotFoundError:
        return BuildState()
    try:
        return decode_state(data)
    except StateCorrupt as e:
        logger.warning(f"{path}: {e.reason}; rebuilding everything")
        return BuildState()


def save_build_state(state: BuildState, path: str) -> None:
    try:
        write_atomic(path, encode_state(state))
    except OSError as e:
        raise PersistError(str(e)) from e


# ---------------------------------------------------------------------------
# Change detection

def detect_modified(units: Iterable[SourceUnit], prev: BuildState) -> Tuple[Set[str], Set[str]]:
    """Return (modified, deleted) unit ids.

    mtime is the cheap gate; the content hash confirms. Every unit counts as
    modified when there is no previous state.
    """
    units = list(units)
    present = {u.unit_id for u in units}
    deleted = {unit_id for unit_id in prev.units if unit_id not in present}
    if prev.is_empty():
        return present, deleted
    modified = set()
    for unit in units:
        old = prev.units.get(unit.unit_id)
        if old is None:
            modified.add(unit.unit_id)
        elif old.mtime != unit.mtime and old.text_hash != unit.text_hash:
            modified.add(unit.unit_id)
    for unit in units:
        # instantiations follow their generic
        if unit.generic and f"{unit.generic}.ig" in modified:
            modified.add(unit.unit_id)
    return modified, deleted


def compiled_units(units: Iterable[SourceUnit]) -> List[SourceUnit]:
    """Units that produce an object file; generic interfaces only feed instantiations."""
    return [u for u in units if u.kind != 'generic-interface']


def compute_dirty_set(modified: Set[str], units: Iterable[SourceUnit], prev: BuildState,
                      current_interfaces: Dict[str, InterfaceAST],
                      object_exists: Callable[[str], bool]) -> DirtySet:
    """Units to recompile, each with the reasons that made it dirty."""
    dirty = DirtySet()
    for unit in compiled_units(units):
        unit_id = unit.unit_id
        if unit_id in modified:
            dirty.add(unit_id, Reason(SOURCE_MODIFIED))
        if not object_exists(unit_id):
            dirty.add(unit_id, Reason(MISSING_OBJECT))
        old = prev.units.get(unit_id)
        if old is None:
            if unit_id not in dirty:
                dirty.add(unit_id, Reason(SOURCE_MODIFIED))
            continue
        for (iface_name, name), fp in sorted(old.used.items()):
            iface = current_interfaces.get(iface_name)
            current = iface.decl_fps.get(name, ABSENT) if iface is not None else ABSENT
            if current != fp:
                dirty.add(unit_id, Reason(USED_DECL_CHANGED, iface_name, name))
    if dirty.units:
        logger.info(f"Dirty units: {', '.join(sorted(dirty.units))}")
    return dirty


def interface_unit_id(name: str) -> str:
    return f"{name}.i3"


def importers_closure(modified: Set[str], units: Iterable[SourceUnit]) -> Set[str]:
    """Make-style dirty set: the modified units plus every unit that imports
    one of them, transitively. A module also depends on its own interface."""
    units = compiled_units(units)
    dependents: Dict[str, Set[str]] = {}
    for unit in units:
        deps = {interface_unit_id(name) for name in unit.imports}
        if unit.kind == 'module':
            deps.add(interface_unit_id(unit.unit_name))
        for dep in deps:
            dependents.setdefault(dep, set()).add(unit.unit_id)
    ids = {u.unit_id for u in units}
    result = set(modified) & ids
    stack = list(result)
    while stack:
        for user in dependents.get(stack.pop(), ()):
            if user not in result:
                result.add(user)
                stack.append(user)
    return result


def record_build_state(prev: BuildState, units: Iterable[SourceUnit],
                       results: Dict[str, Dict[DeclRef, int]], path: Optional[str] = None) -> BuildState:
    """Refresh entries of recompiled units (`results`: unit id -> used map),
    carry the rest over, drop deleted units, and persist when `path` is set."""
    state = BuildState()
    for unit in units:
        unit_id = unit.unit_id
        if unit.kind == 'generic-interface':
            state.units[unit_id] = UnitState(unit.text_hash, unit.mtime, {})
            continue
        if unit_id in results:
            state.units[unit_id] = UnitState(unit.text_hash, unit.mtime, dict(sorted(results[unit_id].items())))
            continue
        old = prev.units.get(unit_id)
        if old is None:
            raise PersistError(f"{unit_id} was neither compiled nor recorded before")
        # a touched but unchanged file keeps its entry with the fresh mtime
        mtime = unit.mtime if old.text_hash == unit.text_hash else old.mtime
        state.units[unit_id] = UnitState(old.text_hash, mtime, old.used)
    if path is not None:
        save_build_state(state, path)
    return state
