"""Relocatable object files (.m3o).

One object per compiled unit: text and data sections, symbol table,
relocations and debug line records. The byte layout is documented in
docs/objformat.md; writing is deterministic and reading validates every
offset and length.
"""
import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple

from src.utils.helpers import write_atomic

logger = logging.getLogger()

OBJ_MAGIC = b'M3O1'
OBJ_VERSION = 1
HEADER = struct.Struct('<4sHBBQII' + 'II' * 8)
ALIGN = 8
NO_STRING = 0xFFFFFFFF

SYMBOL_ENTRY = struct.Struct('<IBBBBII')
RELOC_ENTRY = struct.Struct('<BBHII')
DEBUG_ENTRY = struct.Struct('<II')
STRREF = struct.Struct('<I')
REVEAL_ENTRY = struct.Struct('<III')

SECTIONS = ('text', 'data', 'extern')
SYMBOL_KINDS = ('proc', 'data')
RELOC_KINDS = ('pc-relative-32', 'indirect-slot')
UNIT_KINDS = ('interface', 'module')


class ObjectFormatError(Exception):
    """Base class for object and image format errors."""
    pass


class BadMagic(ObjectFormatError):
    def __init__(self, found):
        self.found = found
        super().__init__(f"bad magic {found!r}")


class TruncatedFile(ObjectFormatError):
    def __init__(self, needed, size):
        self.needed = needed
        self.size = size
        super().__init__(f"file truncated: need {needed} bytes, have {size}")


class OffsetOutOfRange(ObjectFormatError):
    def __init__(self, field_name, value=None):
        self.field = field_name
        self.value = value
        super().__init__(f"{field_name} out of range" + (f": {value}" if value is not None else ''))


class InvalidObject(ObjectFormatError):
    """An in-memory object violates the format invariants."""
    pass


class ObjectWriteError(ObjectFormatError):
    def __init__(self, path, detail):
        self.path = path
        self.detail = detail
        super().__init__(f"cannot write {path}: {detail}")


@dataclass(frozen=True)
class Symbol:
    name: str
    section: str        # text, data or extern
    offset: int
    kind: str           # proc or data
    size: int
    exported: bool


@dataclass(frozen=True)
class Relocation:
    section: str
    offset: int
    symbol: str
    kind: str           # pc-relative-32 or indirect-slot


@dataclass(frozen=True)
class DebugLine:
    offset: int
    line: int


@dataclass(frozen=True)
class RelocatableObject:
    unit_name: str
    unit_kind: str
    text: bytes = b''
    data: bytes = b''
    init: Optional[str] = None
    symbols: Tuple[Symbol, ...] = ()
    relocations: Tuple[Relocation, ...] = ()
    debug_lines: Tuple[DebugLine, ...] = ()
    imports_digest: int = 0
    imports: Tuple[str, ...] = ()
    revelations: Tuple[Tuple[str, str, str], ...] = ()

    def symbol(self, name: str) -> Optional[Symbol]:
        for sym in self.symbols:
            if sym.name == name:
                return sym
        return None

    def defined(self) -> List[Symbol]:
        return [s for s in self.symbols if s.section != 'extern']

    def externals(self) -> List[Symbol]:
        return [s for s in self.symbols if s.section == 'extern']


def check_object(obj: RelocatableObject) -> None:
    """Raise InvalidObject unless the format invariants hold."""
    if obj.unit_kind not in UNIT_KINDS:
        raise InvalidObject(f"{obj.unit_name}: unknown unit kind {obj.unit_kind}")
    sizes = {'text': len(obj.text), 'data': len(obj.data)}
    names = set()
    for sym in obj.symbols:
        if sym.name in names:
            raise InvalidObject(f"{obj.unit_name}: symbol {sym.name} listed twice")
        names.add(sym.name)
        if sym.section not in SECTIONS or sym.kind not in SYMBOL_KINDS:
            raise InvalidObject(f"{obj.unit_name}: bad symbol {sym}")
        if sym.section != 'extern' and sym.offset + sym.size > sizes[sym.section]:
            raise InvalidObject(f"{obj.unit_name}: symbol {sym.name} outside its section")
    for rel in obj.relocations:
        if rel.section not in sizes or rel.kind not in RELOC_KINDS:
            raise InvalidObject(f"{obj.unit_name}: bad relocation {rel}")
        if rel.offset + 4 > sizes[rel.section]:
            raise InvalidObject(f"{obj.unit_name}: relocation at {rel.offset} outside {rel.section}")
        if rel.symbol not in names:
            raise InvalidObject(f"{obj.unit_name}: relocation against unlisted symbol {rel.symbol}")
    for d in obj.debug_lines:
        if d.offset > len(obj.text):
            raise InvalidObject(f"{obj.unit_name}: debug record past end of text")
    if obj.init is not None and obj.init not in names:
        raise InvalidObject(f"{obj.unit_name}: init symbol {obj.init} not defined")


class StringTable:
    """u16-length-prefixed UTF-8 strings, referenced by byte offset, interned in first-use order."""

    def __init__(self):
        self.buf = bytearray()
        self.refs: Dict[str, int] = {}

    def ref(self, text: Optional[str]) -> int:
        if text is None:
            return NO_STRING
        if text not in self.refs:
            raw = text.encode('utf-8')
            self.refs[text] = len(self.buf)
            self.buf += struct.pack('<H', len(raw)) + raw
        return self.refs[text]


def pad(buf: bytearray) -> None:
    buf.extend(b'\x00' * (-len(buf) % ALIGN))


class ByteReader:
    """Bounds-checked access to a serialized file; every failure is typed."""

    def __init__(self, data: bytes):
        self.data = data

    def table(self, name: str, offset: int, count: int, entry_size: int) -> Tuple[int, int]:
        if offset > len(self.data):
            raise OffsetOutOfRange(f"{name} offset", offset)
        end = offset + count * entry_size
        if end > len(self.data):
            raise TruncatedFile(end, len(self.data))
        return offset, end

    def unpack(self, st: struct.Struct, offset: int):
        if offset + st.size > len(self.data):
            raise TruncatedFile(offset + st.size, len(self.data))
        return st.unpack_from(self.data, offset)

    def strings(self, offset: int, length: int):
        start, end = self.table('strtab', offset, length, 1)
        strtab = self.data[start:end]

        def get(ref: int, field_name: str) -> Optional[str]:
            if ref == NO_STRING:
                return None
            if ref + 2 > len(strtab):
                raise OffsetOutOfRange(field_name, ref)
            n = struct.unpack_from('<H', strtab, ref)[0]
            if ref + 2 + n > len(strtab):
                raise OffsetOutOfRange(field_name, ref)
            try:
                return strtab[ref + 2:ref + 2 + n].decode('utf-8')
            except UnicodeDecodeError:
                raise OffsetOutOfRange(field_name, ref) from None
        return get


def _enum(values, index, field_name):
    if index >= len(values):
        raise OffsetOutOfRange(field_name, index)
    return values[index]


def encode_object(obj: RelocatableObject) -> bytes:
    check_object(obj)
    strings = StringTable()
    unit_ref = strings.ref(obj.unit_name)
    init_ref = strings.ref(obj.init)

    body = bytearray()
    tables = []

    def section(raw: bytes, count: int):
        start = HEADER.size + len(body)
        body.extend(raw)
        pad(body)
        tables.append((start, count))

    section(obj.text, len(obj.text))
    section(obj.data, len(obj.data))
    section(b''.join(SYMBOL_ENTRY.pack(strings.ref(s.name), SECTIONS.index(s.section),
                                       SYMBOL_KINDS.index(s.kind), int(s.exported), 0, s.offset, s.size)
                     for s in obj.symbols), len(obj.symbols))
    section(b''.join(RELOC_ENTRY.pack(SECTIONS.index(r.section), RELOC_KINDS.index(r.kind), 0,
                                      r.offset, strings.ref(r.symbol))
                     for r in obj.relocations), len(obj.relocations))
    section(b''.join(DEBUG_ENTRY.pack(d.offset, d.line) for d in obj.debug_lines), len(obj.debug_lines))
    section(b''.join(STRREF.pack(strings.ref(name)) for name in obj.imports), len(obj.imports))
    section(b''.join(REVEAL_ENTRY.pack(*(strings.ref(x) for x in rev)) for rev in obj.revelations),
            len(obj.revelations))
    section(bytes(strings.buf), len(strings.buf))

    flat = [v for pair in tables for v in pair]
    header = HEADER.pack(OBJ_MAGIC, OBJ_VERSION, UNIT_KINDS.index(obj.unit_kind), 0,
                         obj.imports_digest, unit_ref, init_ref, *flat)
    return header + bytes(body)


def decode_object(data: bytes) -> RelocatableObject:
    """Parse .m3o bytes; any malformed input raises an ObjectFormatError."""
    if len(data) < 4:
        raise TruncatedFile(4, len(data))
    if data[:4] != OBJ_MAGIC:
        raise BadMagic(bytes(data[:4]))
    reader = ByteReader(data)
    fields = reader.unpack(HEADER, 0)
    _, version, kind, _, digest, unit_ref, init_ref = fields[:7]
    if version != OBJ_VERSION:
        raise OffsetOutOfRange('version', version)
    (text_off, text_len, data_off, data_len, sym_off, sym_n, rel_off, rel_n,
     dbg_off, dbg_n, imp_off, imp_n, rev_off, rev_n, str_off, str_len) = fields[7:]

    get = reader.strings(str_off, str_len)
    t0, t1 = reader.table('text', text_off, text_len, 1)
    d0, d1 = reader.table('data', data_off, data_len, 1)

    symbols = []
    start, _ = reader.table('symbols', sym_off, sym_n, SYMBOL_ENTRY.size)
    for i in range(sym_n):
        name, sec, skind, flags, _, off, size = reader.unpack(SYMBOL_ENTRY, start + i * SYMBOL_ENTRY.size)
        symbols.append(Symbol(get(name, 'symbol name'), _enum(SECTIONS, sec, 'symbol section'), off,
                              _enum(SYMBOL_KINDS, skind, 'symbol kind'), size, bool(flags & 1)))

    relocations = []
    start, _ = reader.table('relocations', rel_off, rel_n, RELOC_ENTRY.size)
    for i in range(rel_n):
        sec, rkind, _, off, sym = reader.unpack(RELOC_ENTRY, start + i * RELOC_ENTRY.size)
        relocations.append(Relocation(_enum(SECTIONS[:2], sec, 'relocation section'), off,
                                      get(sym, 'relocation symbol'), _enum(RELOC_KINDS, rkind, 'relocation kind')))

    start, _ = reader.table('debug', dbg_off, dbg_n, DEBUG_ENTRY.size)
    debug = [DebugLine(*reader.unpack(DEBUG_ENTRY, start + i * DEBUG_ENTRY.size)) for i in range(dbg_n)]

    start, _ = reader.table('imports', imp_off, imp_n, STRREF.size)
    imports = [get(reader.unpack(STRREF, start + i * STRREF.size)[0], 'import') for i in range(imp_n)]

    start, _ = reader.table('revelations', rev_off, rev_n, REVEAL_ENTRY.size)
    revelations = []
    for i in range(rev_n):
        refs = reader.unpack(REVEAL_ENTRY, start + i * REVEAL_ENTRY.size)
        revelations.append(tuple(get(r, 'revelation') for r in refs))

    unit_name = get(unit_ref, 'unit name')
    if unit_name is None or None in imports or any(None in r for r in revelations):
        raise OffsetOutOfRange('string reference', NO_STRING)
    if any(s.name is None for s in symbols) or any(r.symbol is None for r in relocations):
        raise OffsetOutOfRange('string reference', NO_STRING)

    obj = RelocatableObject(
        unit_name=unit_name, unit_kind=_enum(UNIT_KINDS, kind, 'unit kind'),
        text=bytes(data[t0:t1]), data=bytes(data[d0:d1]), init=get(init_ref, 'init symbol'),
        symbols=tuple(symbols), relocations=tuple(relocations), debug_lines=tuple(debug),
        imports_digest=digest, imports=tuple(imports), revelations=tuple(revelations))
    try:
        check_object(obj)
    except InvalidObject as e:
        raise OffsetOutOfRange('object contents', str(e)) from None
    return obj


def write_object(obj: RelocatableObject, path: str) -> None:
    try:
        write_atomic(path, encode_object(obj))
    except OSError as e:
        raise ObjectWriteError(path, str(e)) from e


def read_object(path: str) -> RelocatableObject:
    with open(path, 'rb') as f:
        return decode_object(f.read())
