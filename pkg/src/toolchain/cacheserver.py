"""Compilation server: the interface cache kept across builds, the build
pipeline with its phase timers, and the socket front end.

Interfaces parsed in one build stay in the cache. At the start of the next
build each cached interface is revalidated depth-first: its source must be
unchanged and every imported declaration it uses must keep its fingerprint.
A valid interface is stamped with the build epoch so later encounters in the
same build skip the check. Interfaces of a library whose state file did not
change are stamped valid without looking at their sources.
"""
import json
import logging
import os
import queue
import socket
import socketserver
import threading
import time
from collections import Counter
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Set, Tuple

from src.toolchain import codegen, protocol
from src.toolchain.depcheck import (compiled_units, compute_dirty_set, detect_modified,
                                    importers_closure, load_build_state, record_build_state, state_path)
from src.toolchain.frontend import (FrontendError, GenericAST, InterfaceAST, ModuleAST, SourceUnit, TypeCheckError,
                                    build_interface, build_module, fold_generic_hash, instantiate, parse_source,
                                    scan_unit, unit_kind_for)
from src.toolchain.linker import link, prelink, write_image
from src.toolchain.lowering import lower_interface, lower_module
from src.toolchain.objfile import RelocatableObject, read_object, write_object
from src.toolchain.validation import PackageManifest, load_manifest
from src.utils.config import config
from src.utils.helpers import SourceFS, fnv1a_64

logger = logging.getLogger()

PHASES = ('smart_recomp', 'frontend', 'codegen', 'assemble', 'link', 'other')
PHASE_LABELS = {
    'smart_recomp': 'smart recomp.',
    'frontend': 'frontend',
    'codegen': 'codegen',
    'assemble': 'assembler',
    'link': 'linking',
    'other': 'other',
}
BACKENDS = ('integrated', 'assembler')

SKIP_MTIME_CHECKS = 'skip-mtime-checks'
FULL_CHECK = 'full-check'


class CacheError(Exception):
    """Base class for interface cache and server errors."""
    pass


class CycleDetected(CacheError):
    def __init__(self, path):
        self.path = list(path)
        super().__init__(f"import cycle: {' -> '.join(self.path)}")


class MissingStateFile(CacheError):
    def __init__(self, library):
        self.library = library
        super().__init__(f"library {library} has no build state file")


class ManifestError(CacheError):
    pass


# ---------------------------------------------------------------------------
# Phase timing

class PhaseTimer:
    """Exclusive accounting: elapsed time goes to the innermost open phase,
    `other` when none is open, so the phases always add up to the total."""

    def __init__(self, clock: Callable[[], float] = time.perf_counter):
        self.clock = clock
        self.seconds = dict.fromkeys(PHASES, 0.0)
        self._stack = ['other']
        self._started = self._mark = clock()

    def _charge(self) -> None:
        now = self.clock()
        self.seconds[self._stack[-1]] += now - self._mark
        self._mark = now

    @contextmanager
    def phase(self, name: str):
        if name not in self.seconds:
            raise KeyError(name)
        self._charge()
        self._stack.append(name)
        try:
            yield
        finally:
            self._charge()
            self._stack.pop()

    def stop(self) -> float:
        self._charge()
        return self._mark - self._started


@dataclass
class PhaseReport:
    package: str = ''
    backend: str = 'integrated'
    seconds: Dict[str, float] = field(default_factory=lambda: dict.fromkeys(PHASES, 0.0))
    total: float = 0.0
    interfaces_parsed: int = 0
    interfaces_reused: int = 0
    units_compiled: int = 0
    compiled: List[str] = field(default_factory=list)
    dirty: Dict[str, List[str]] = field(default_factory=dict)
    file_grain: List[str] = field(default_factory=list)
    linked: bool = False
    failed: bool = False
    error: Optional[str] = None
    queue_wait: float = 0.0
    epoch: int = 0

    @property
    def interfaces_visited(self) -> int:
        return self.interfaces_parsed + self.interfaces_reused

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, record: dict) -> 'PhaseReport':
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in record.items() if k in known})

    def table(self) -> str:
        lines = [f"{'phase':<16}{'ms':>10}"]
        for name in PHASES:
            lines.append(f"{PHASE_LABELS[name]:<16}{self.seconds.get(name, 0.0) * 1000:>10.2f}")
        lines.append(f"{'total':<16}{self.total * 1000:>10.2f}")
        lines.append(f"interfaces parsed {self.interfaces_parsed}, reused {self.interfaces_reused}; "
                     f"units compiled {self.units_compiled}")
        if self.failed:
            lines.append('build FAILED')
        return '\n'.join(lines)

    def key_values(self, prefix: str = '') -> List[str]:
        out = [f"{prefix}{name}_ms={self.seconds.get(name, 0.0) * 1000:.3f}" for name in PHASES]
        out += [
            f"{prefix}total_ms={self.total * 1000:.3f}",
            f"{prefix}interfaces_parsed={self.interfaces_parsed}",
            f"{prefix}interfaces_reused={self.interfaces_reused}",
            f"{prefix}units_compiled={self.units_compiled}",
            f"{prefix}failed={int(self.failed)}",
        ]
        return out


# ---------------------------------------------------------------------------
# Interface cache

@dataclass(frozen=True)
class SourceLoc:
    path: str
    kind: str
    origin: str                 # 'local' or the library directory


@dataclass
class CacheEntry:
    ast: InterfaceAST
    source_path: str
    text_hash: int
    mtime: int
    origin: str
    valid_stamp: int
    size: int = 0
    generic_path: Optional[str] = None
    generic_mtime: Optional[int] = None


@dataclass
class LibraryStamp:
    mtime: int
    digest: int


@dataclass
class Validation:
    valid: Set[str]
    evicted: Set[str]


class InterfaceCache:

    def __init__(self, byte_budget: Optional[int] = None, fs: Optional[SourceFS] = None):
        self.entries: Dict[str, CacheEntry] = {}
        self.epoch = 0
        self.library_stamps: Dict[str, LibraryStamp] = {}
        self.byte_budget = byte_budget
        self.fs = fs or SourceFS()
        self.sources: Dict[str, SourceLoc] = {}
        self.libraries: Dict[str, PackageManifest] = {}
        self.library_objects: Dict[str, List[RelocatableObject]] = {}
        self.parse_counts = Counter()
        self.visit_counts = Counter()
        self.interfaces_parsed = 0
        self.interfaces_reused = 0
        self.validated: Set[str] = set()
        self.evicted: Set[str] = set()
        self._pending_stamps: Dict[str, LibraryStamp] = {}
        self._counted: Set[str] = set()
        self._active: List[str] = []
        self._generics: Dict[str, GenericAST] = {}

    # per-build bookkeeping
    def begin_build(self) -> int:
        self.epoch += 1
        self.parse_counts.clear()
        self.visit_counts.clear()
        self.interfaces_parsed = self.interfaces_reused = 0
        self.validated = set()
        self.evicted = set()
        self._pending_stamps = {}
        self._counted = set()
        self._active = []
        self._generics = {}
        return self.epoch

    def set_sources(self, sources: Dict[str, SourceLoc]) -> None:
        self.sources = dict(sources)
        for name in [n for n in self.entries if n not in self.sources]:
            self._evict(name)

    def end_build(self, success: bool) -> None:
        if success:
            self.library_stamps.update(self._pending_stamps)
        self._enforce_budget(protect_current=False)

    @property
    def resident_bytes(self) -> int:
        return sum(e.size for e in self.entries.values())

    def _evict(self, name: str) -> None:
        if self.entries.pop(name, None) is not None:
            self.evicted.add(name)
            self.validated.discard(name)

    def _enforce_budget(self, protect_current: bool) -> None:
        if self.byte_budget is None:
            return
        resident = self.resident_bytes
        for name in sorted(self.entries, key=lambda n: (self.entries[n].valid_stamp, n)):
            if resident <= self.byte_budget:
                break
            entry = self.entries[name]
            if protect_current and entry.valid_stamp == self.epoch:
                continue
            resident -= entry.size
            self._evict(name)
            logger.debug(f"Evicted {name} from the interface cache ({entry.size} bytes)")

    def _count(self, name: str, parsed: bool) -> None:
        if name in self._counted:
            return
        self._counted.add(name)
        if parsed:
            self.interfaces_parsed += 1
        else:
            self.interfaces_reused += 1

    def _enter(self, name: str) -> None:
        if name in self._active:
            raise CycleDetected(self._active[self._active.index(name):] + [name])
        self._active.append(name)

    # sources
    def _source_hash(self, path: str, generic_path: Optional[str]) -> int:
        text_hash = fnv1a_64(self.fs.read_bytes(path))
        if generic_path is not None:
            text_hash = fold_generic_hash(text_hash, fnv1a_64(self.fs.read_bytes(generic_path)))
        return text_hash

    def _source_unchanged(self, name: str, entry: CacheEntry) -> bool:
        loc = self.sources.get(name)
        if loc is None or loc.path != entry.source_path:
            return False
        st = self.fs.stat(entry.source_path)
        if st is None:
            return False
        generic_st = None
        if entry.generic_path is not None:
            generic_st = self.fs.stat(entry.generic_path)
            if generic_st is None:
                return False
        if st[0] == entry.mtime and (generic_st is None or generic_st[0] == entry.generic_mtime):
            return True
        if self._source_hash(entry.source_path, entry.generic_path) != entry.text_hash:
            return False
        entry.mtime = st[0]
        entry.generic_mtime = generic_st[0] if generic_st else None
        return True

    def generic(self, name: str) -> GenericAST:
        """Generic interfaces are parsed per build and never cached."""
        if name in self._generics:
            return self._generics[name]
        loc = self.sources.get(name)
        if loc is None or loc.kind != 'generic-interface':
            raise KeyError(name)
        data = self.fs.read_bytes(loc.path)
        syntax = parse_source(data.decode('utf-8'), loc.path)
        if syntax.kind != 'generic-interface':
            raise FrontendError(f"{loc.path} does not contain a generic interface")
        generic = GenericAST(syntax.name, tuple(syntax.formals), syntax, fnv1a_64(data))
        self._generics[name] = generic
        return generic

    # validation
    def validate(self, name: str) -> bool:
        """Recursive time-stamp validation of one cached interface."""
        entry = self.entries.get(name)
        if entry is None:
            return False
        if entry.valid_stamp == self.epoch:
            return True
        self._enter(name)
        try:
            self.visit_counts[name] += 1
            ok = self._source_unchanged(name, entry)
            for imp in entry.ast.imports:
                self.validate(imp)
            if ok:
                for (iface, decl), fp in entry.ast.used.items():
                    try:
                        current = self.get_or_parse(iface).decl_fps.get(decl)
                    except (KeyError, FrontendError) as e:
                        logger.debug(f"{name}: import {iface} unavailable: {e}")
                        current = None
                    if current != fp:
                        ok = False
                        break
        finally:
            self._active.pop()
        if ok:
            entry.valid_stamp = self.epoch
            self.validated.add(name)
        else:
            self._evict(name)
            logger.debug(f"Interface {name} is stale")
        return ok

    def stamp_library(self, library: str) -> int:
        count = 0
        for name, entry in self.entries.items():
            if entry.origin == library and self.sources.get(name, SourceLoc('', '', '')).path == entry.source_path:
                entry.valid_stamp = self.epoch
                self.validated.add(name)
                count += 1
        return count

    # lookup
    def get_or_parse(self, name: str) -> InterfaceAST:
        entry = self.entries.get(name)
        if entry is not None and entry.valid_stamp != self.epoch:
            self.validate(name)
            entry = self.entries.get(name)
        if entry is not None:
            self._count(name, parsed=False)
            return entry.ast
        return self._parse(name).ast

    def _parse(self, name: str) -> CacheEntry:
        loc = self.sources.get(name)
        if loc is None or loc.kind != 'interface':
            raise KeyError(name)
        self._enter(name)
        try:
            st = self.fs.stat(loc.path)
            if st is None:
                raise KeyError(name)
            data = self.fs.read_bytes(loc.path)
            syntax = parse_source(data.decode('utf-8'), loc.path)
            if syntax.kind != 'interface':
                raise FrontendError(f"{loc.path} does not contain an interface")
            if syntax.name != name:
                raise TypeCheckError(f"{os.path.basename(loc.path)}:1", f"file declares {syntax.name}, not {name}")
            text_hash = fnv1a_64(data)
            generic_path = generic_mtime = None
            if syntax.generic is not None:
                generic = self.generic(syntax.generic)
                generic_path = self.sources[syntax.generic].path
                generic_mtime = self.fs.stat(generic_path)[0]
                syntax = instantiate(syntax, generic)
                identity = fold_generic_hash(text_hash, generic.text_hash)
            else:
                identity = text_hash
            ast = build_interface(syntax, self.get_or_parse, text_hash)
        finally:
            self._active.pop()
        entry = CacheEntry(ast=ast, source_path=loc.path, text_hash=identity, mtime=st[0], origin=loc.origin,
                           valid_stamp=self.epoch, size=ast.approx_size(), generic_path=generic_path,
                           generic_mtime=generic_mtime)
        self.entries[name] = entry
        self.validated.add(name)
        self.parse_counts[name] += 1
        self._count(name, parsed=True)
        self._enforce_budget(protect_current=True)
        return entry


def validate_cache(roots: Iterable[str], cache: InterfaceCache) -> Validation:
    """Depth-first revalidation from `roots`; stale entries leave the cache."""
    for name in roots:
        cache.validate(name)
    return Validation(valid=set(cache.validated), evicted=set(cache.evicted))


def library_shortcut(cache: InterfaceCache, library: str) -> str:
    """One stat of the library's state file decides whether its interfaces
    need per-file checks this build."""
    path = state_path(os.path.join(library, config.get('build.dir', 'build')))
    try:
        st = cache.fs.stat(path)
        if st is None:
            raise MissingStateFile(library)
    except MissingStateFile as e:
        logger.warning(f"{e}; checking its interfaces one by one")
        cache.library_stamps.pop(library, None)
        return FULL_CHECK
    known = cache.library_stamps.get(library)
    if known is not None and known.mtime == st[0]:
        cache.stamp_library(library)
        return SKIP_MTIME_CHECKS
    digest = fnv1a_64(cache.fs.read_bytes(path))
    cache._pending_stamps[library] = LibraryStamp(st[0], digest)
    if known is not None and known.digest == digest:
        cache.stamp_library(library)
        return SKIP_MTIME_CHECKS
    return FULL_CHECK


# ---------------------------------------------------------------------------
# Build pipeline

@dataclass
class CompileRequest:
    package_dir: str
    options: List[str] = field(default_factory=list)

    def __post_init__(self):
        self.package_dir = os.path.abspath(self.package_dir)


def _build_options(options: Sequence[str], manifest: PackageManifest) -> Tuple[str, bool]:
    backend = manifest.options.get('backend') or config.get('build.backend', 'integrated')
    allow_unresolved = bool(manifest.options.get('allow_unresolved', False))
    for option in options:
        if option.startswith('--backend='):
            backend = option.split('=', 1)[1]
        elif option == '--allow-unresolved':
            allow_unresolved = True
        else:
            raise ManifestError(f"unknown build option {option}")
    if backend not in BACKENDS:
        raise ManifestError(f"unknown backend {backend}")
    return backend, allow_unresolved


def _libraries(manifest: PackageManifest, cache: InterfaceCache) -> Tuple[List[str], bool]:
    """Library closure in dependency order; second item tells whether any needed a full check."""
    ordered: List[str] = []
    changed = False
    pending = list(manifest.libraries)
    while pending:
        lib = pending.pop(0)
        if lib in ordered:
            continue
        decision = library_shortcut(cache, lib)
        if decision == FULL_CHECK or lib not in cache.libraries:
            cache.libraries[lib] = load_manifest(lib)
            cache.library_objects.pop(lib, None)
            changed = True
        ordered.append(lib)
        pending.extend(cache.libraries[lib].libraries)
    return ordered, changed


def _collect_sources(manifest: PackageManifest, libraries: Sequence[str],
                     cache: InterfaceCache) -> Tuple[List[SourceUnit], Dict[str, SourceLoc]]:
    sources: Dict[str, SourceLoc] = {}

    def add(name: str, loc: SourceLoc):
        other = sources.get(name)
        if other is not None:
            raise ManifestError(f"interface {name} is defined by {other.path} and {loc.path}")
        sources[name] = loc

    for unit_file in manifest.units:
        kind = unit_kind_for(unit_file)
        if kind != 'module':
            add(os.path.splitext(unit_file)[0], SourceLoc(manifest.unit_path(unit_file), kind, 'local'))
    for lib in libraries:
        lib_manifest = cache.libraries[lib]
        for unit_file in lib_manifest.units:
            kind = unit_kind_for(unit_file)
            if kind != 'module':
                add(os.path.splitext(unit_file)[0], SourceLoc(lib_manifest.unit_path(unit_file), kind, lib))

    def generic_hash(name: str) -> Optional[int]:
        loc = sources.get(name)
        if loc is None or loc.kind != 'generic-interface':
            return None
        return fnv1a_64(cache.fs.read_bytes(loc.path))

    units = [scan_unit(manifest.unit_path(u), fs=cache.fs, generic_hash=generic_hash) for u in manifest.units]
    return units, sources


def _library_objects(lib: str, cache: InterfaceCache) -> List[RelocatableObject]:
    if lib not in cache.library_objects:
        lib_manifest = cache.libraries[lib]
        objects = []
        for unit_file in lib_manifest.units:
            if unit_kind_for(unit_file) == 'generic-interface':
                continue
            objects.append(read_object(os.path.join(lib_manifest.build_dir, f"{unit_file}.m3o")))
        cache.library_objects[lib] = objects
    return cache.library_objects[lib]


def object_path(manifest: PackageManifest, unit_id: str) -> str:
    return os.path.join(manifest.build_dir, f"{unit_id}.m3o")


def image_path(manifest: PackageManifest) -> str:
    return os.path.join(manifest.build_dir, f"{manifest.program}.m3x")


def _discard(paths: Sequence[str]) -> None:
    """Remove objects of a failed build; the missing-object rule recompiles them."""
    for path in paths:
        try:
            os.remove(path)
        except FileNotFoundError:
            pass
        except OSError as e:
            logger.warning(f"Could not remove {path} after a failed build: {e}")


def _parse_module(unit: SourceUnit, cache: InterfaceCache) -> ModuleAST:
    data = cache.fs.read_bytes(unit.path)
    syntax = parse_source(data.decode('utf-8'), unit.path)
    return build_module(syntax, cache.get_or_parse, fnv1a_64(data))


def _qualified_entry(manifest: PackageManifest) -> Optional[str]:
    if manifest.entry is None:
        return None
    return manifest.entry if '.' in manifest.entry else f"{manifest.program}.{manifest.entry}"


def compile_package(req: CompileRequest, cache: InterfaceCache,
                    reply: Optional[Callable[[str], None]] = None) -> PhaseReport:
    """Run one build; errors are streamed to `reply` and flagged in the report."""
    emit = reply or (lambda text: None)
    timer = PhaseTimer()
    report = PhaseReport(package=req.package_dir)
    success = False
    written: List[str] = []
    cache.begin_build()
    try:
        with timer.phase('other'):
            manifest = load_manifest(req.package_dir)
            backend, allow_unresolved = _build_options(req.options, manifest)
            report.backend = backend
            os.makedirs(manifest.build_dir, exist_ok=True)

        with timer.phase('smart_recomp'):
            libraries, libraries_changed = _libraries(manifest, cache)
            units, sources = _collect_sources(manifest, libraries, cache)
            cache.set_sources(sources)
            prev = load_build_state(state_path(manifest.build_dir))
            modified, deleted = detect_modified(units, prev)
            roots = sorted(name for name, loc in sources.items() if loc.kind == 'interface')
            validate_cache(roots, cache)

        with timer.phase('frontend'):
            interfaces = {name: cache.get_or_parse(name) for name in roots}

        with timer.phase('smart_recomp'):
            for unit_id in sorted(deleted):
                stale = object_path(manifest, unit_id)
                if os.path.exists(stale):
                    os.remove(stale)
            dirty = compute_dirty_set(modified, units, prev, interfaces,
                                      lambda unit_id: os.path.exists(object_path(manifest, unit_id)))
            report.dirty = {u: [str(r) for r in reasons] for u, reasons in sorted(dirty.reasons.items())}
            report.file_grain = sorted(importers_closure(modified, units))

        results = {}
        objects: Dict[str, RelocatableObject] = {}
        image = None
        for unit in sorted(compiled_units(units), key=lambda u: u.unit_id):
            if unit.unit_id not in dirty:
                continue
            with timer.phase('frontend'):
                if unit.kind == 'module':
                    lowered = lower_module(_parse_module(unit, cache))
                else:
                    lowered = lower_interface(interfaces[unit.unit_name])
            if backend == 'assembler':
                with timer.phase('codegen'):
                    text = codegen.generate_assembly(lowered)
                with timer.phase('assemble'):
                    obj = codegen.assemble(text)
            else:
                with timer.phase('codegen'):
                    obj = codegen.compile_unit(lowered)
            objects[unit.unit_id] = obj
            results[unit.unit_id] = lowered.used
            report.compiled.append(unit.unit_id)
        report.units_compiled = len(report.compiled)

        with timer.phase('link'):
            if manifest.program is not None:
                target = image_path(manifest)
                if report.compiled or deleted or libraries_changed or not os.path.exists(target):
                    program_objects = [objects.get(u.unit_id) or read_object(object_path(manifest, u.unit_id))
                                       for u in sorted(compiled_units(units), key=lambda u: u.unit_id)]
                    for lib in libraries:
                        program_objects.extend(_library_objects(lib, cache))
                    order, repo = prelink(program_objects, interfaces)
                    image = link(program_objects, order, repo, _qualified_entry(manifest), allow_unresolved)

        # nothing reaches build/ until the whole build has succeeded in memory
        with timer.phase('codegen'):
            for unit_id, obj in objects.items():
                written.append(object_path(manifest, unit_id))
                write_object(obj, written[-1])
        if image is not None:
            with timer.phase('link'):
                write_image(image, image_path(manifest))
            report.linked = True

        with timer.phase('smart_recomp'):
            record_build_state(prev, units, results, state_path(manifest.build_dir))
        success = True
        logger.info(f"Built {manifest.name}: {report.units_compiled} unit(s) compiled")
    except Exception as e:
        report.failed = True
        report.error = f"{e.__class__.__name__}: {e}"
        logger.error(f"Build of {req.package_dir} failed: {report.error}")
        emit(f"error: {e}\n")
        _discard(written)
    finally:
        cache.end_build(success)
        report.total = timer.stop()
        report.seconds = dict(timer.seconds)
        report.interfaces_parsed = cache.interfaces_parsed
        report.interfaces_reused = cache.interfaces_reused
        report.epoch = cache.epoch
    return report


def build_local(package_dir: str, options: Sequence[str] = (),
                reply: Optional[Callable[[str], None]] = None) -> PhaseReport:
    """Standard (cold) build: a fresh cache that dies with the process."""
    return compile_package(CompileRequest(package_dir, list(options)), InterfaceCache(), reply)


# ---------------------------------------------------------------------------
# Server

class _BuildJob:

    def __init__(self, request: CompileRequest, conn: Optional[socket.socket]):
        self.request = request
        self.conn = conn
        self.enqueued = time.perf_counter()
        self.done = threading.Event()
        self.report: Optional[PhaseReport] = None
        self.dropped = False

    def send(self, kind: int, payload: bytes = b'') -> None:
        if self.dropped or self.conn is None:
            return
        try:
            protocol.send_message(self.conn, kind, payload)
        except OSError as e:
            self.dropped = True
            logger.warning(f"Client for {self.request.package_dir} went away: {e}")

    def reply(self, text: str) -> None:
        self.send(protocol.TEXT, text.encode('utf-8'))


class CompilationServer:
    """One acceptor thread per connection, one executor running builds in FIFO order."""

    def __init__(self, socket_path: str, cache: Optional[InterfaceCache] = None):
        self.socket_path = socket_path
        self.cache = cache or InterfaceCache(byte_budget=config.get('server.cache_bytes'))
        self.jobs: 'queue.Queue[Optional[_BuildJob]]' = queue.Queue()
        self.builds = 0
        self._in_build = False
        self._flag = threading.Lock()
        self._shutdown = threading.Event()
        self._server: Optional[socketserver.UnixStreamServer] = None
        self.ready = threading.Event()

    def submit(self, request: CompileRequest, conn: Optional[socket.socket]) -> _BuildJob:
        job = _BuildJob(request, conn)
        if self._shutdown.is_set():
            job.reply('error: server is shutting down\n')
            job.send(protocol.DONE, bytes([1]))
            job.done.set()
            return job
        self.jobs.put(job)
        return job

    def request_shutdown(self) -> None:
        if not self._shutdown.is_set():
            self._shutdown.set()
            self.jobs.put(None)

    def _execute(self) -> None:
        while True:
            job = self.jobs.get()
            if job is None:
                break
            with self._flag:
                if self._in_build:
                    raise AssertionError('two builds overlap')
                self._in_build = True
            try:
                wait = time.perf_counter() - job.enqueued
                report = compile_package(job.request, self.cache, job.reply)
                report.queue_wait = wait
                job.report = report
                job.send(protocol.REPORT, json.dumps(report.to_dict(), sort_keys=True).encode('utf-8'))
                job.send(protocol.DONE, bytes([1 if report.failed else 0]))
            finally:
                with self._flag:
                    self._in_build = False
                self.builds += 1
                job.done.set()
        if self._server is not None:
            self._server.shutdown()

    def serve_forever(self) -> None:
        _claim_socket(self.socket_path)
        owner = self

        class Handler(socketserver.BaseRequestHandler):
            def handle(self):
                owner._handle(self.request)

        class Server(socketserver.ThreadingMixIn, socketserver.UnixStreamServer):
            daemon_threads = True

        executor = threading.Thread(target=self._execute, name='m3-build-executor', daemon=True)
        with Server(self.socket_path, Handler) as server:
            self._server = server
            executor.start()
            logger.info(f"Compilation server listening on {self.socket_path}")
            self.ready.set()
            try:
                server.serve_forever(poll_interval=0.05)
            finally:
                self.request_shutdown()
                executor.join()
                try:
                    os.unlink(self.socket_path)
                except FileNotFoundError:
                    pass
        logger.info(f"Compilation server stopped after {self.builds} build(s), epoch {self.cache.epoch}")

    def _handle(self, conn: socket.socket) -> None:
        try:
            hello = protocol.recv_message(conn)
            protocol.send_hello(conn)
            protocol.check_hello(hello)
            msg = protocol.recv_message(conn)
            if msg is None:
                return
            if msg.kind == protocol.SHUTDOWN:
                self.request_shutdown()
                protocol.send_message(conn, protocol.DONE, bytes([0]))
                return
            if msg.kind != protocol.BUILD:
                raise protocol.MalformedMessage(f"unexpected {protocol.KIND_NAMES[msg.kind]}")
            body = msg.json()
            if not isinstance(body, dict) or not isinstance(body.get('package_dir'), str):
                raise protocol.MalformedMessage('BUILD needs a package_dir')
            options = body.get('options', [])
            if not isinstance(options, list) or not all(isinstance(o, str) for o in options):
                raise protocol.MalformedMessage('BUILD options must be strings')
            job = self.submit(CompileRequest(body['package_dir'], options), conn)
            job.done.wait()
        except protocol.ProtocolError as e:
            logger.warning(f"Rejected request: {e}")
            try:
                protocol.send_message(conn, protocol.TEXT, f"error: {e}\n".encode('utf-8'))
                protocol.send_message(conn, protocol.DONE, bytes([1]))
            except OSError:
                pass
        except OSError as e:
            logger.warning(f"Client connection dropped: {e}")


def _claim_socket(socket_path: str) -> None:
    if not os.path.exists(socket_path):
        return
    peer = socket.socket(socket.AF_UNIX, socket.SOCK_STREAM)
    try:
        peer.connect(socket_path)
    except OSError:
        os.unlink(socket_path)
        return
    finally:
        peer.close()
    raise CacheError(f"another server is listening on {socket_path}")


def serve(socket_path: Optional[str] = None, cache: Optional[InterfaceCache] = None) -> CompilationServer:
    """Run the server until a SHUTDOWN request; returns the stopped server."""
    server = CompilationServer(socket_path or config.get('server.socket'), cache)
    server.serve_forever()
    return server


# ---------------------------------------------------------------------------
# Client

def _exchange(sock: socket.socket, kind: int, payload: bytes,
              on_text: Callable[[str], None]) -> Tuple[int, Optional[PhaseReport]]:
    protocol.send_hello(sock)
    protocol.check_hello(protocol.recv_message(sock))
    protocol.send_message(sock, kind, payload)
    report = None
    while True:
        msg = protocol.recv_message(sock)
        if msg is None:
            raise protocol.MalformedMessage('server closed the connection before DONE')
        if msg.kind == protocol.TEXT:
            on_text(msg.text())
        elif msg.kind == protocol.REPORT:
            report = PhaseReport.from_dict(msg.json())
        elif msg.kind == protocol.DONE:
            if len(msg.payload) != 1:
                raise protocol.MalformedMessage('DONE carries one status byte')
            return msg.payload[0], report
        else:
            raise protocol.MalformedMessage(f"unexpected {protocol.KIND_NAMES[msg.kind]} from server")


def client_request(socket_path: Optional[str], package_dir: str, options: Sequence[str] = (),
                   fallback_local: bool = False, attempts: Optional[int] = None,
                   on_text: Optional[Callable[[str], None]] = None) -> Tuple[int, str, Optional[PhaseReport]]:
    """Ask the server for a build: (exit code, streamed text, report)."""
    socket_path = socket_path or config.get('server.socket')
    attempts = attempts or config.get('server.connect_attempts', 1)
    chunks: List[str] = []

    def emit(text: str):
        chunks.append(text)
        if on_text is not None:
            on_text(text)

    try:
        sock = protocol.connect_with_retry(socket_path, attempts)
    except protocol.ConnectFailed as e:
        if not fallback_local:
            raise
        logger.warning(f"{e}; building in-process")
        report = build_local(package_dir, options, emit)
        return (1 if report.failed else 0), ''.join(chunks), report

    request = {'package_dir': os.path.abspath(package_dir), 'options': list(options)}
    with sock:
        status, report = _exchange(sock, protocol.BUILD,
                                   json.dumps(request, sort_keys=True).encode('utf-8'), emit)
    return (0 if status == 0 else 1), ''.join(chunks), report


def shutdown_server(socket_path: Optional[str] = None, attempts: Optional[int] = None) -> None:
    socket_path = socket_path or config.get('server.socket')
    sock = protocol.connect_with_retry(socket_path, attempts or config.get('server.connect_attempts', 1))
    with sock:
        _exchange(sock, protocol.SHUTDOWN, b'', lambda text: None)
