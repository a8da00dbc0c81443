"""Prelink and link.

Prelink computes the module initialization order, checks that every opaque
type has exactly one revelation, and builds the runtime type repository with
[pre, post] intervals for constant-time subtype tests. Link concatenates the
objects into an executable image whose indirection table binds data eagerly
and leaves procedure slots as lazy stubs.
"""
import heapq
import logging
import struct
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from src.toolchain.objfile import (
    NO_STRING, BadMagic, ByteReader, OffsetOutOfRange, RelocatableObject,
    StringTable, TruncatedFile, pad,
)
from src.utils.helpers import fnv1a_64_parts, write_atomic

logger = logging.getLogger()

UNBOUND = 0xFFFFFFFF
NO_PARENT = -1


class LinkError(Exception):
    """Base class for prelink and link errors."""
    pass


class InitCycle(LinkError):
    def __init__(self, modules):
        self.modules = list(modules)
        super().__init__(f"module initialization cycle: {' -> '.join(self.modules)}")


class MissingRevelation(LinkError):
    def __init__(self, opaque):
        self.opaque = opaque
        super().__init__(f"opaque type {opaque} is never revealed")


class DuplicateRevelation(LinkError):
    def __init__(self, opaque, sites):
        self.opaque = opaque
        self.sites = list(sites)
        super().__init__(f"opaque type {opaque} revealed more than once: {', '.join(self.sites)}")


class RevelationMismatch(LinkError):
    def __init__(self, opaque, site, reason):
        self.opaque = opaque
        self.site = site
        super().__init__(f"{site}: bad revelation of {opaque}: {reason}")


class UnknownTypeId(LinkError):
    def __init__(self, type_id):
        self.type_id = type_id
        super().__init__(f"unknown type id {type_id}")


class UndefinedSymbol(LinkError):
    def __init__(self, name, unit):
        self.name = name
        self.unit = unit
        super().__init__(f"undefined symbol {name} referenced from {unit}")


class DuplicateSymbol(LinkError):
    def __init__(self, name):
        self.name = name
        super().__init__(f"symbol {name} defined more than once")


# ---------------------------------------------------------------------------
# Initialization order

def module_dependencies(objects: Sequence[RelocatableObject],
                        interfaces: Optional[Mapping] = None) -> Dict[str, List[str]]:
    """For each module: the modules it must follow (imports of the module and of its own interface)."""
    modules = {o.unit_name: o for o in objects if o.unit_kind == 'module'}
    iface_imports: Dict[str, Tuple[str, ...]] = {}
    for o in objects:
        if o.unit_kind == 'interface':
            iface_imports[o.unit_name] = o.imports
    for name, iface in (interfaces or {}).items():
        iface_imports.setdefault(name, tuple(iface.imports))
    deps = {}
    for name, obj in modules.items():
        wanted = set(obj.imports) | set(iface_imports.get(name, ()))
        deps[name] = sorted(n for n in wanted if n in modules and n != name)
    return deps


def init_order(deps: Mapping[str, Iterable[str]]) -> List[str]:
    """Kahn's algorithm with a lexicographic heap; importees come first."""
    indegree = {m: 0 for m in deps}
    dependents: Dict[str, List[str]] = {m: [] for m in deps}
    for module, needs in deps.items():
        for n in set(needs):
            indegree[module] += 1
            dependents[n].append(module)
    ready = [m for m, d in indegree.items() if d == 0]
    heapq.heapify(ready)
    order = []
    while ready:
        module = heapq.heappop(ready)
        order.append(module)
        for dep in dependents[module]:
            indegree[dep] -= 1
            if indegree[dep] == 0:
                heapq.heappush(ready, dep)
    if len(order) != len(indegree):
        raise InitCycle(_find_cycle({m: list(deps[m]) for m in indegree if m not in order}))
    return order


def _find_cycle(graph: Dict[str, List[str]]) -> List[str]:
    """A cycle among the nodes Kahn could not place, as a path."""
    state: Dict[str, int] = {}
    stack: List[str] = []

    def visit(node):
        state[node] = 1
        stack.append(node)
        for nxt in sorted(graph.get(node, ())):
            if nxt not in graph:
                continue
            if state.get(nxt) == 1:
                return stack[stack.index(nxt):] + [nxt]
            if nxt not in state:
                found = visit(nxt)
                if found:
                    return found
        stack.pop()
        state[node] = 2
        return None

    for node in sorted(graph):
        if node not in state:
            found = visit(node)
            if found:
                return found
    return sorted(graph)


# ---------------------------------------------------------------------------
# Type repository

@dataclass
class TypeRepo:
    fingerprints: List[int] = field(default_factory=list)
    parents: List[int] = field(default_factory=list)
    pre: List[int] = field(default_factory=list)
    post: List[int] = field(default_factory=list)
    names: Dict[str, int] = field(default_factory=dict)
    revelations: Dict[str, str] = field(default_factory=dict)

    def __len__(self):
        return len(self.fingerprints)

    def id_of(self, name: str) -> int:
        if name not in self.names:
            raise UnknownTypeId(name)
        return self.names[name]

    @classmethod
    def from_forest(cls, parents: Sequence[int], fingerprints: Optional[Sequence[int]] = None) -> 'TypeRepo':
        repo = cls(fingerprints=list(fingerprints or [0] * len(parents)), parents=list(parents))
        repo.number()
        return repo

    def number(self) -> None:
        """Preorder-number the supertype forest; post = largest preorder number in the subtree."""
        n = len(self.parents)
        children: List[List[int]] = [[] for _ in range(n)]
        roots = []
        for tid, parent in enumerate(self.parents):
            (roots if parent == NO_PARENT else children[parent]).append(tid)
        self.pre = [0] * n
        self.post = [0] * n
        counter = 0
        for root in roots:
            stack = [(root, False)]
            while stack:
                tid, done = stack.pop()
                if done:
                    self.post[tid] = max([self.pre[tid]] + [self.post[c] for c in children[tid]])
                    continue
                self.pre[tid] = counter
                counter += 1
                stack.append((tid, True))
                for child in reversed(children[tid]):
                    stack.append((child, False))


def is_subtype(repo: TypeRepo, a: int, b: int) -> bool:
    """Constant time: a <: b iff a's interval lies inside b's."""
    n = len(repo.pre)
    for tid in (a, b):
        if not isinstance(tid, int) or not 0 <= tid < n:
            raise UnknownTypeId(tid)
    return repo.pre[b] <= repo.pre[a] and repo.post[a] <= repo.post[b]


def _type_decls(interfaces: Mapping) -> Dict[str, object]:
    found = {}
    for iface_name in sorted(interfaces):
        iface = interfaces[iface_name]
        for decl in iface.decls:
            if decl.kind in ('type', 'object-type', 'opaque-type'):
                found[f"{iface_name}.{decl.name}"] = decl
    return found


def _qualified(ref, default_iface: str) -> str:
    return f"{ref.qual or default_iface}.{ref.name}"


def build_type_repo(interfaces: Mapping, revelations: Sequence[Tuple[str, str, str]]) -> TypeRepo:
    """Structural dedup of record/object types, opaque types mapped through their revelation."""
    decls = _type_decls(interfaces)

    sites: Dict[str, List[Tuple[str, str]]] = {}
    for opaque, concrete, site in revelations:
        sites.setdefault(opaque, []).append((concrete, site))
    for opaque, entries in sorted(sites.items()):
        decl = decls.get(opaque)
        if decl is None or decl.kind != 'opaque-type':
            raise RevelationMismatch(opaque, entries[0][1], 'not an opaque type')
        if len(entries) > 1:
            raise DuplicateRevelation(opaque, [s for _, s in entries])
        concrete = entries[0][0]
        if concrete not in decls or decls[concrete].kind == 'opaque-type' and concrete == opaque:
            raise RevelationMismatch(opaque, entries[0][1], f"{concrete} is not a known type")
    for name, decl in decls.items():
        if decl.kind == 'opaque-type' and name not in sites:
            raise MissingRevelation(name)

    repo = TypeRepo()
    struct_fp: Dict[str, int] = {}
    resolving: List[str] = []

    def resolve(name: str) -> str:
        seen = []
        while decls[name].kind == 'opaque-type':
            if name in seen:
                raise RevelationMismatch(name, sites[name][0][1], 'revelation cycle')
            seen.append(name)
            name = sites[name][0][0]
        return name

    def type_id(name: str) -> int:
        """Canonical id of a (possibly opaque) named type."""
        concrete = resolve(name)
        fp = fingerprint(concrete)
        return canonical[fp]

    canonical: Dict[int, int] = {}

    def fingerprint(name: str) -> int:
        if name in struct_fp:
            return struct_fp[name]
        if name in resolving:
            raise RevelationMismatch(name, name, 'type refers to itself')
        resolving.append(name)
        decl = decls[name]
        node = decl.node.node
        iface = name.split('.', 1)[0]
        if decl.kind == 'type':
            parts = [b'RECORD'] + [f.encode() for f in node.fields]
            parent = NO_PARENT
        else:
            if node.supertype is None or (node.supertype.qual is None and node.supertype.name == 'ROOT'
                                          and f"{iface}.ROOT" not in decls):
                parent = NO_PARENT
                parts = [b'OBJECT', b'ROOT']
            else:
                super_name = _qualified(node.supertype, iface)
                parent = type_id(super_name)
                parts = [b'OBJECT', struct.pack('<Q', repo.fingerprints[parent])]
            parts += [f.encode() for f in node.fields]
        fp = fnv1a_64_parts(parts)
        resolving.pop()
        struct_fp[name] = fp
        if fp not in canonical:
            canonical[fp] = len(repo.fingerprints)
            repo.fingerprints.append(fp)
            repo.parents.append(parent)
        return fp

    for name in decls:
        repo.names[name] = type_id(name)
    repo.revelations = {opaque: entries[0][1] for opaque, entries in sorted(sites.items())}

    for opaque in sites:
        bound = decls[opaque].node.node.bound
        iface = opaque.split('.', 1)[0]
        if bound.qual is None and bound.name == 'ROOT' and f"{iface}.ROOT" not in decls:
            continue
        bound_name = _qualified(bound, iface)
        if bound_name not in decls:
            raise RevelationMismatch(opaque, sites[opaque][0][1], f"unknown bound {bound_name}")
        repo.number()
        if not is_subtype(repo, repo.names[opaque], repo.names[bound_name]):
            raise RevelationMismatch(opaque, sites[opaque][0][1], f"revealed type is not a subtype of {bound_name}")
    repo.number()
    return repo


def prelink(objects: Sequence[RelocatableObject], interfaces: Mapping) -> Tuple[List[str], TypeRepo]:
    """Initialization order and type repository for a whole program."""
    order = init_order(module_dependencies(objects, interfaces))
    revelations = [rev for obj in objects for rev in obj.revelations]
    repo = build_type_repo(interfaces, revelations)
    logger.info(f"Prelinked {len(order)} modules, {len(repo)} canonical types")
    return order, repo


# ---------------------------------------------------------------------------
# Link

@dataclass(frozen=True)
class ImageSlot:
    name: str
    kind: str               # data or proc
    target: Optional[int]   # data/text offset; None when the procedure is undefined


@dataclass
class ExecutableImage:
    text: bytes
    data: bytes
    slots: Tuple[ImageSlot, ...]
    init_order: Tuple[str, ...]
    init_symbols: Tuple[str, ...]
    type_repo: TypeRepo
    symbols: Dict[str, Tuple[str, int]]
    entry: Optional[str] = None

    def find_entry(self, name: str) -> str:
        """Exact symbol, or an unqualified name that matches exactly one procedure."""
        if name in self.symbols and self.symbols[name][0] == 'text':
            return name
        matches = [s for s, (sec, _) in self.symbols.items() if sec == 'text' and s.split('.', 1)[-1] == name]
        if len(matches) != 1:
            raise UndefinedSymbol(name, '<entry>')
        return matches[0]


def _ordered(objects: Sequence[RelocatableObject], order: Sequence[str]) -> List[RelocatableObject]:
    modules = {o.unit_name: o for o in objects if o.unit_kind == 'module'}
    ordered = [modules[m] for m in order if m in modules]
    chosen = {id(o) for o in ordered}
    rest = sorted((o for o in objects if id(o) not in chosen), key=lambda o: (o.unit_name, o.unit_kind))
    return ordered + rest


def link(objects: Sequence[RelocatableObject], init_order: Sequence[str], type_repo: TypeRepo,
         entry: Optional[str] = None, allow_unresolved: bool = False) -> ExecutableImage:
    """Merge objects into an image: pc-relative calls patched, indirection slots created."""
    ordered = _ordered(objects, init_order)
    text = bytearray()
    data = bytearray()
    text_base: Dict[int, int] = {}
    defined: Dict[str, Tuple[str, int, str]] = {}
    for obj in ordered:
        text_base[id(obj)] = len(text)
        data_base = len(data)
        for sym in obj.defined():
            if sym.name in defined:
                raise DuplicateSymbol(sym.name)
            base = len(text) if sym.section == 'text' else data_base
            defined[sym.name] = (sym.section, base + sym.offset, sym.kind)
        text += obj.text
        pad(text)
        data += obj.data
        pad(data)

    slot_index: Dict[str, int] = {}
    slots: List[ImageSlot] = []
    for obj in ordered:
        base = text_base[id(obj)]
        kinds = {s.name: s.kind for s in obj.symbols}
        for rel in obj.relocations:
            at = base + rel.offset
            target = defined.get(rel.symbol)
            ref_kind = kinds.get(rel.symbol, 'proc')
            if rel.kind == 'pc-relative-32':
                if target is None or target[0] != 'text':
                    raise UndefinedSymbol(rel.symbol, obj.unit_name)
                struct.pack_into('<i', text, at, target[1] - (at + 4))
                continue
            if rel.symbol not in slot_index:
                if target is None:
                    if ref_kind == 'data' or not allow_unresolved:
                        raise UndefinedSymbol(rel.symbol, obj.unit_name)
                    slots.append(ImageSlot(rel.symbol, 'proc', None))
                else:
                    kind = 'data' if target[0] == 'data' else 'proc'
                    if kind != ref_kind:
                        raise LinkError(f"{obj.unit_name}: {rel.symbol} used as {ref_kind} but defined as {kind}")
                    slots.append(ImageSlot(rel.symbol, kind, target[1]))
                slot_index[rel.symbol] = len(slots) - 1
            struct.pack_into('<I', text, at, slot_index[rel.symbol])

    init_symbols = tuple(o.init for o in ordered if o.unit_kind == 'module' and o.init)
    symbols = {name: (sec, off) for name, (sec, off, _) in sorted(defined.items())}
    if entry is not None and entry not in symbols:
        raise UndefinedSymbol(entry, '<entry>')
    image = ExecutableImage(text=bytes(text), data=bytes(data), slots=tuple(slots),
                            init_order=tuple(init_order), init_symbols=init_symbols,
                            type_repo=type_repo, symbols=symbols, entry=entry)
    logger.info(f"Linked {len(ordered)} objects: {len(text)} text bytes, {len(slots)} slots")
    return image


# ---------------------------------------------------------------------------
# Image file (.m3x)

IMG_MAGIC = b'M3X1'
IMG_VERSION = 1
IMG_HEADER = struct.Struct('<4sHHI' + 'II' * 9)
SLOT_ENTRY = struct.Struct('<IBxxxI')
STR_ENTRY = struct.Struct('<I')
TYPE_ENTRY = struct.Struct('<QiII')
NAME_ENTRY = struct.Struct('<II')
SYM_ENTRY = struct.Struct('<IBxxxI')
SLOT_KINDS = ('data', 'proc')
SYM_SECTIONS = ('text', 'data')


def encode_image(image: ExecutableImage) -> bytes:
    strings = StringTable()
    entry_ref = strings.ref(image.entry)
    body = bytearray()
    tables = []

    def section(raw: bytes, count: int):
        tables.append((IMG_HEADER.size + len(body), count))
        body.extend(raw)
        pad(body)

    repo = image.type_repo
    section(image.text, len(image.text))
    section(image.data, len(image.data))
    section(b''.join(SLOT_ENTRY.pack(strings.ref(s.name), SLOT_KINDS.index(s.kind),
                                     UNBOUND if s.target is None else s.target) for s in image.slots),
            len(image.slots))
    section(b''.join(STR_ENTRY.pack(strings.ref(m)) for m in image.init_order), len(image.init_order))
    section(b''.join(STR_ENTRY.pack(strings.ref(s)) for s in image.init_symbols), len(image.init_symbols))
    section(b''.join(TYPE_ENTRY.pack(repo.fingerprints[i], repo.parents[i], repo.pre[i], repo.post[i])
                     for i in range(len(repo))), len(repo))
    section(b''.join(NAME_ENTRY.pack(strings.ref(name), tid) for name, tid in sorted(repo.names.items())),
            len(repo.names))
    section(b''.join(SYM_ENTRY.pack(strings.ref(name), SYM_SECTIONS.index(sec), off)
                     for name, (sec, off) in image.symbols.items()), len(image.symbols))
    section(bytes(strings.buf), len(strings.buf))
    flat = [v for pair in tables for v in pair]
    return IMG_HEADER.pack(IMG_MAGIC, IMG_VERSION, 0, entry_ref, *flat) + bytes(body)


def decode_image(data: bytes) -> ExecutableImage:
    """Parse .m3x bytes; malformed input raises an ObjectFormatError subclass."""
    if len(data) < 4:
        raise TruncatedFile(4, len(data))
    if data[:4] != IMG_MAGIC:
        raise BadMagic(bytes(data[:4]))
    reader = ByteReader(data)
    fields = reader.unpack(IMG_HEADER, 0)
    version, entry_ref = fields[1], fields[3]
    if version != IMG_VERSION:
        raise OffsetOutOfRange('version', version)
    (text_off, text_len, data_off, data_len, slot_off, slot_n, ord_off, ord_n, init_off, init_n,
     type_off, type_n, name_off, name_n, sym_off, sym_n, str_off, str_len) = fields[4:]
    get = reader.strings(str_off, str_len)

    def need(value, field_name):
        if value is None:
            raise OffsetOutOfRange(field_name, NO_STRING)
        return value

    def kind(values, index, field_name):
        if index >= len(values):
            raise OffsetOutOfRange(field_name, index)
        return values[index]

    t0, t1 = reader.table('text', text_off, text_len, 1)
    d0, d1 = reader.table('data', data_off, data_len, 1)

    slots = []
    start, _ = reader.table('slots', slot_off, slot_n, SLOT_ENTRY.size)
    for i in range(slot_n):
        name, skind, target = reader.unpack(SLOT_ENTRY, start + i * SLOT_ENTRY.size)
        skind = kind(SLOT_KINDS, skind, 'slot kind')
        limit = (t1 - t0) if skind == 'proc' else (d1 - d0)
        if target != UNBOUND and target >= max(limit, 1):
            raise OffsetOutOfRange('slot target', target)
        slots.append(ImageSlot(need(get(name, 'slot name'), 'slot name'), skind,
                               None if target == UNBOUND else target))

    start, _ = reader.table('init order', ord_off, ord_n, STR_ENTRY.size)
    order = [need(get(reader.unpack(STR_ENTRY, start + i * 4)[0], 'init order'), 'init order') for i in range(ord_n)]
    start, _ = reader.table('init symbols', init_off, init_n, STR_ENTRY.size)
    inits = [need(get(reader.unpack(STR_ENTRY, start + i * 4)[0], 'init symbol'), 'init symbol') for i in range(init_n)]

    repo = TypeRepo()
    start, _ = reader.table('types', type_off, type_n, TYPE_ENTRY.size)
    for i in range(type_n):
        fp, parent, pre, post = reader.unpack(TYPE_ENTRY, start + i * TYPE_ENTRY.size)
        if parent != NO_PARENT and not 0 <= parent < type_n:
            raise OffsetOutOfRange('type parent', parent)
        repo.fingerprints.append(fp)
        repo.parents.append(parent)
        repo.pre.append(pre)
        repo.post.append(post)
    start, _ = reader.table('type names', name_off, name_n, NAME_ENTRY.size)
    for i in range(name_n):
        name, tid = reader.unpack(NAME_ENTRY, start + i * NAME_ENTRY.size)
        if tid >= type_n:
            raise OffsetOutOfRange('type id', tid)
        repo.names[need(get(name, 'type name'), 'type name')] = tid

    symbols = {}
    start, _ = reader.table('symbols', sym_off, sym_n, SYM_ENTRY.size)
    for i in range(sym_n):
        name, sec, off = reader.unpack(SYM_ENTRY, start + i * SYM_ENTRY.size)
        sec = kind(SYM_SECTIONS, sec, 'symbol section')
        if off > ((t1 - t0) if sec == 'text' else (d1 - d0)):
            raise OffsetOutOfRange('symbol offset', off)
        symbols[need(get(name, 'symbol name'), 'symbol name')] = (sec, off)

    return ExecutableImage(text=bytes(data[t0:t1]), data=bytes(data[d0:d1]), slots=tuple(slots),
                           init_order=tuple(order), init_symbols=tuple(inits), type_repo=repo,
                           symbols=symbols, entry=get(entry_ref, 'entry'))


def write_image(image: ExecutableImage, path: str) -> None:
    write_atomic(path, encode_image(image))


def read_image(path: str) -> ExecutableImage:
    with open(path, 'rb') as f:
        return decode_image(f.read())
