"""Frontend for the mini modular language.

Parses interfaces (.i3), modules (.m3) and generic interfaces (.ig), builds the
AST, computes per-declaration fingerprints and the map of imported
declarations each unit actually uses.
"""
from __future__ import annotations

import logging
import os
import re
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Callable, Dict, List, NewType, Optional, Tuple, Union

from lark import Lark, Transformer, v_args
from lark.exceptions import UnexpectedInput

from src.utils.helpers import fnv1a_64, fnv1a_64_parts, wrap_int64

logger = logging.getLogger()

Fingerprint = NewType('Fingerprint', int)
DeclRef = Tuple[str, str]

# used-map value for a name the interface does not declare
ABSENT = 0

EXTENSION_KINDS = {
    '.i3': 'interface',
    '.m3': 'module',
    '.ig': 'generic-interface',
}

DECL_KINDS = ('const', 'type', 'opaque-type', 'revelation', 'object-type',
              'procedure-sig', 'procedure-impl', 'var')


class FrontendError(Exception):
    """Base class for frontend errors."""
    pass


class SourceSyntaxError(FrontendError):
    """Source text does not match the grammar."""
    def __init__(self, line, col, message, path=None):
        self.line = line
        self.col = col
        self.path = path
        self.message = message
        where = f"{path}:" if path else ''
        super().__init__(f"{where}{line}:{col}: syntax error: {message}")


class ImportOfUnknownUnit(FrontendError):
    """An IMPORT names an interface that cannot be found."""
    def __init__(self, name):
        self.name = name
        super().__init__(f"imported interface {name} not found")


class MissingRefFingerprint(FrontendError):
    """A declaration references something with no known fingerprint."""
    def __init__(self, name):
        self.name = name
        super().__init__(f"no fingerprint for referenced declaration {name}")


class UnknownImportedName(FrontendError):
    """A qualified name refers to a declaration its interface lacks."""
    def __init__(self, interface, name):
        self.interface = interface
        self.name = name
        super().__init__(f"interface {interface} has no declaration {name}")


class TypeCheckError(FrontendError):
    """Static semantic error at a source site."""
    def __init__(self, site, message):
        self.site = site
        self.message = message
        super().__init__(f"{site}: {message}")


class CircularDeclaration(FrontendError):
    """Declarations inside one interface reference each other in a cycle."""
    def __init__(self, names):
        self.names = list(names)
        super().__init__(f"circular declarations: {' -> '.join(self.names)}")


class GenericInstantiationError(FrontendError):
    pass


# ---------------------------------------------------------------------------
# Syntax tree

@dataclass(frozen=True)
class Num:
    value: int


@dataclass(frozen=True)
class NameRef:
    qual: Optional[str]
    name: str
    line: int = field(default=0, compare=False)

    def text(self) -> str:
        return f"{self.qual}.{self.name}" if self.qual else self.name


@dataclass(frozen=True)
class Neg:
    operand: 'Expr'


@dataclass(frozen=True)
class BinOp:
    op: str
    left: 'Expr'
    right: 'Expr'


@dataclass(frozen=True)
class Call:
    target: NameRef
    args: Tuple['Expr', ...]
    line: int = field(default=0, compare=False)


Expr = Union[Num, NameRef, Neg, BinOp, Call]


@dataclass(frozen=True)
class Assign:
    target: NameRef
    expr: Expr
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class Return:
    expr: Optional[Expr]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class CallStmt:
    call: Call
    line: int = field(default=0, compare=False)


Stmt = Union[Assign, Return, CallStmt]


@dataclass(frozen=True)
class ConstNode:
    expr: Expr


@dataclass(frozen=True)
class VarNode:
    init: Optional[Expr]


@dataclass(frozen=True)
class RecordNode:
    fields: Tuple[str, ...]


@dataclass(frozen=True)
class ObjectNode:
    supertype: Optional[NameRef]
    fields: Tuple[str, ...]


@dataclass(frozen=True)
class OpaqueNode:
    bound: NameRef


@dataclass(frozen=True)
class ProcSigNode:
    params: Tuple[str, ...]
    has_result: bool


@dataclass(frozen=True)
class RevealNode:
    opaque: NameRef
    concrete: NameRef


@dataclass(frozen=True)
class ProcImpl:
    name: str
    params: Tuple[str, ...]
    has_result: bool
    locals: Tuple[str, ...]
    body: Tuple[Stmt, ...]
    line: int = field(default=0, compare=False)


@dataclass(frozen=True)
class RawDecl:
    """A declaration as written, before reference resolution."""
    name: str
    kind: str
    node: object
    line: int = 0


@dataclass
class UnitSyntax:
    kind: str
    name: str
    imports: List[str]
    decls: List[RawDecl]
    procs: List[ProcImpl] = field(default_factory=list)
    init_body: Optional[Tuple[Stmt, ...]] = None
    formals: List[str] = field(default_factory=list)
    generic: Optional[str] = None
    actuals: List[str] = field(default_factory=list)
    path: Optional[str] = None


@dataclass(frozen=True)
class _ImportClause:
    names: Tuple[str, ...]
    line: int


class _ToSyntax(Transformer):
    """Turn the lark parse tree into UnitSyntax and the node classes above."""

    def start(self, children):
        return children[0]

    def name_list(self, children):
        return [str(tok) for tok in children]

    @v_args(meta=True)
    def import_clause(self, meta, children):
        return _ImportClause(tuple(children[0]), meta.line)

    def qualname(self, children):
        line = children[0].line
        if len(children) == 2:
            return NameRef(str(children[0]), str(children[1]), line)
        return NameRef(None, str(children[0]), line)

    # expressions
    def number(self, children):
        return Num(int(children[0]))

    def neg(self, children):
        return Neg(children[0])

    def add(self, children):
        return BinOp('+', children[0], children[1])

    def sub(self, children):
        return BinOp('-', children[0], children[1])

    def mul(self, children):
        return BinOp('*', children[0], children[1])

    def name_ref(self, children):
        return children[0]

    def args(self, children):
        return tuple(children)

    def call(self, children):
        target, args = children
        return Call(target, tuple(args or ()), target.line)

    # statements
    @v_args(meta=True)
    def assign_stmt(self, meta, children):
        return Assign(children[0], children[1], meta.line)

    @v_args(meta=True)
    def return_stmt(self, meta, children):
        return Return(children[0], meta.line)

    @v_args(meta=True)
    def call_stmt(self, meta, children):
        return CallStmt(children[0], meta.line)

    def init_block(self, children):
        return ('init', tuple(children))

    # declarations
    @v_args(meta=True)
    def const_decl(self, meta, children):
        return RawDecl(str(children[0]), 'const', ConstNode(children[1]), meta.line)

    @v_args(meta=True)
    def var_decl(self, meta, children):
        return RawDecl(str(children[0]), 'var', VarNode(children[1]), meta.line)

    @v_args(meta=True)
    def reveal_decl(self, meta, children):
        opaque, concrete = children
        return RawDecl(f"REVEAL {opaque.text()}", 'revelation', RevealNode(opaque, concrete), meta.line)

    def field(self, children):
        return children[0]

    @staticmethod
    def _flatten_fields(groups):
        return tuple(name for group in groups for name in group)

    @v_args(meta=True)
    def record_decl(self, meta, children):
        return RawDecl(str(children[0]), 'type', RecordNode(self._flatten_fields(children[1:])), meta.line)

    @v_args(meta=True)
    def object_decl(self, meta, children):
        node = ObjectNode(children[1], self._flatten_fields(children[2:]))
        return RawDecl(str(children[0]), 'object-type', node, meta.line)

    @v_args(meta=True)
    def opaque_decl(self, meta, children):
        return RawDecl(str(children[0]), 'opaque-type', OpaqueNode(children[1]), meta.line)

    def param_group(self, children):
        return children[0]

    def params(self, children):
        return tuple(name for group in children for name in group)

    def result(self, children):
        return True

    def local_group(self, children):
        return children[0]

    def local_vars(self, children):
        return tuple(name for group in children for name in group)

    @v_args(meta=True)
    def proc_sig(self, meta, children):
        name, params, result = children
        return RawDecl(str(name), 'procedure-sig', ProcSigNode(tuple(params or ()), bool(result)), meta.line)

    @v_args(meta=True)
    def proc_impl(self, meta, children):
        name, params, result, local_names = children[:4]
        end_name = children[-1]
        body = tuple(children[4:-1])
        return ProcImpl(str(name), tuple(params or ()), bool(result), tuple(local_names),
                        body, meta.line), str(end_name), meta.line

    # units
    @staticmethod
    def _split(children):
        imports, decls, procs, init_body = [], [], [], None
        for child in children:
            if isinstance(child, _ImportClause):
                imports.append(child)
            elif isinstance(child, RawDecl):
                decls.append(child)
            elif isinstance(child, tuple) and child and child[0] == 'init':
                init_body = child[1]
            elif isinstance(child, tuple):
                procs.append(child)
        return imports, decls, procs, init_body

    def interface(self, children):
        imports, decls, _, _ = self._split(children[1:-1])
        return ('interface', str(children[0]), str(children[-1]), imports, decls, [], None, [], None, [])

    def generic_interface(self, children):
        formals = children[1] or []
        imports, decls, _, _ = self._split(children[2:-1])
        return ('generic-interface', str(children[0]), str(children[-1]), imports, decls, [], None,
                formals, None, [])

    def instantiation(self, children):
        name, generic, actuals, end_name = children
        return ('instantiation', str(name), str(end_name), [], [], [], None, [], str(generic),
                list(actuals or []))

    def module(self, children):
        imports, decls, procs, init_body = self._split(children[1:-1])
        return ('module', str(children[0]), str(children[-1]), imports, decls, procs, init_body, [], None, [])


GRAMMAR_PATH = Path(__file__).with_name('m3.lark')


@lru_cache(maxsize=1)
def _parser() -> Lark:
    with open(GRAMMAR_PATH, encoding='utf-8') as f:
        return Lark(f.read(), parser='lalr', propagate_positions=True, maybe_placeholders=True)


def _site(path: Optional[str], line: int) -> str:
    return f"{os.path.basename(path) if path else '<text>'}:{line}"


def parse_source(text: str, path: Optional[str] = None) -> UnitSyntax:
    """Parse one unit's text into UnitSyntax; raises SourceSyntaxError."""
    try:
        tree = _parser().parse(text)
    except UnexpectedInput as e:
        line = getattr(e, 'line', -1)
        col = getattr(e, 'column', -1)
        message = str(e).strip().splitlines()[0] if str(e).strip() else e.__class__.__name__
        raise SourceSyntaxError(line, col, message, path) from None

    kind, name, end_name, import_clauses, decls, procs, init_body, formals, generic, actuals = \
        _ToSyntax().transform(tree)

    if end_name != name:
        raise SourceSyntaxError(-1, -1, f"unit {name} ends with END {end_name}", path)

    imports: List[str] = []
    for clause in import_clauses:
        for imp in clause.names:
            if imp in imports:
                raise TypeCheckError(_site(path, clause.line), f"duplicate import {imp}")
            imports.append(imp)

    impls = []
    for impl, proc_end, line in procs:
        if proc_end != impl.name:
            raise SourceSyntaxError(line, -1, f"procedure {impl.name} ends with END {proc_end}", path)
        impls.append(impl)

    if kind == 'instantiation':
        kind = 'interface'
    return UnitSyntax(kind=kind, name=name, imports=imports, decls=list(decls), procs=impls,
                      init_body=init_body, formals=list(formals), generic=generic,
                      actuals=list(actuals), path=path)


# ---------------------------------------------------------------------------
# Source units

@dataclass(frozen=True)
class SourceUnit:
    path: str
    kind: str
    unit_name: str
    imports: Tuple[str, ...]
    text_hash: int
    mtime: int
    generic: Optional[str] = None

    @property
    def unit_id(self) -> str:
        return os.path.basename(self.path)


_COMMENT_RE = re.compile(r'\(\*.*?\*\)', re.S)
_HEADER_RE = re.compile(
    r'^\s*(?P<generic>GENERIC\s+)?(?P<kw>INTERFACE|MODULE)\s+(?P<name>[A-Za-z_]\w*)\s*'
    r'(?:=\s*(?P<of>[A-Za-z_]\w*)\s*\((?P<actuals>[^)]*)\))?')
_IMPORT_RE = re.compile(r'\bIMPORT\s+([^;]*);')
_FIRST_DECL_RE = re.compile(r'\b(CONST|TYPE|VAR|PROCEDURE|REVEAL|BEGIN|END)\b')


def unit_kind_for(path: str) -> Optional[str]:
    return EXTENSION_KINDS.get(os.path.splitext(path)[1])


def scan_header(text: str) -> Tuple[str, List[str], Optional[str]]:
    """Cheap header scan: (declared name, imports, generic-of) without a full parse."""
    stripped = _COMMENT_RE.sub(' ', text)
    m = _HEADER_RE.match(stripped)
    if not m:
        raise SourceSyntaxError(1, 1, 'missing INTERFACE/MODULE header')
    body = stripped[m.end():]
    first = _FIRST_DECL_RE.search(body)
    head = body[:first.start()] if first else body
    imports: List[str] = []
    for clause in _IMPORT_RE.findall(head):
        for name in clause.split(','):
            name = name.strip()
            if name and name not in imports:
                imports.append(name)
    generic = m.group('of')
    if generic:
        imports.extend(a.strip() for a in m.group('actuals').split(',') if a.strip() and a.strip() not in imports)
    return m.group('name'), imports, generic


def fold_generic_hash(text_hash: int, generic_hash: int) -> int:
    """Source identity of an instantiation: its own text plus its generic's."""
    return fnv1a_64(struct.pack('<Q', generic_hash), text_hash)


def scan_unit(path: str, fs=None, generic_hash: Optional[Callable[[str], Optional[int]]] = None) -> SourceUnit:
    """Build the SourceUnit identity for a file: name, imports, content hash, mtime."""
    kind = unit_kind_for(path)
    if kind is None:
        raise FrontendError(f"{path}: unknown source extension")
    if fs is not None:
        st = fs.stat(path)
        if st is None:
            raise FileNotFoundError(path)
        mtime = st[0]
        data = fs.read_bytes(path)
    else:
        mtime = os.stat(path).st_mtime_ns
        with open(path, 'rb') as f:
            data = f.read()
    name, imports, generic = scan_header(data.decode('utf-8'))
    stem = os.path.splitext(os.path.basename(path))[0]
    if name != stem:
        raise TypeCheckError(_site(path, 1), f"unit {name} must live in a file named {name}{os.path.splitext(path)[1]}")
    text_hash = fnv1a_64(data)
    if generic and generic_hash is not None:
        # an instantiation is stale whenever its generic changes
        g = generic_hash(generic)
        if g is not None:
            text_hash = fold_generic_hash(text_hash, g)
    return SourceUnit(path=path, kind=kind, unit_name=name, imports=tuple(imports),
                      text_hash=text_hash, mtime=mtime, generic=generic)


# ---------------------------------------------------------------------------
# Declarations and fingerprints

@dataclass(frozen=True)
class Declaration:
    name: str
    kind: str
    body: Tuple[str, ...]
    refs: Tuple[DeclRef, ...]
    node: object = field(default=None, compare=False, repr=False)
    line: int = field(default=0, compare=False)


def _expr_tokens(expr: Expr, out: List[str]) -> None:
    if isinstance(expr, Num):
        out.append(str(expr.value))
    elif isinstance(expr, NameRef):
        out.append(expr.text())
    elif isinstance(expr, Neg):
        out.append('-')
        _expr_tokens(expr.operand, out)
    elif isinstance(expr, BinOp):
        out.append('(')
        _expr_tokens(expr.left, out)
        out.append(expr.op)
        _expr_tokens(expr.right, out)
        out.append(')')
    elif isinstance(expr, Call):
        out.append(expr.target.text())
        out.append('(')
        for i, arg in enumerate(expr.args):
            if i:
                out.append(',')
            _expr_tokens(arg, out)
        out.append(')')


def canonical_tokens(raw: RawDecl) -> Tuple[str, ...]:
    """Canonical body tokens; comments, layout and redundant parentheses vanish."""
    node = raw.node
    out: List[str] = []
    if isinstance(node, ConstNode):
        out += ['CONST', '=']
        _expr_tokens(node.expr, out)
    elif isinstance(node, VarNode):
        out += ['VAR', 'INTEGER']
        if node.init is not None:
            out.append(':=')
            _expr_tokens(node.init, out)
    elif isinstance(node, RecordNode):
        out.append('RECORD')
        for f in node.fields:
            out += [f, ':', 'INTEGER']
        out.append('END')
    elif isinstance(node, ObjectNode):
        out.append(node.supertype.text() if node.supertype else 'ROOT')
        out.append('OBJECT')
        for f in node.fields:
            out += [f, ':', 'INTEGER']
        out.append('END')
    elif isinstance(node, OpaqueNode):
        out += ['<:', node.bound.text()]
    elif isinstance(node, ProcSigNode):
        out += ['PROCEDURE', '(']
        out += list(node.params)
        out += [')', 'INTEGER' if node.has_result else 'VOID']
    elif isinstance(node, RevealNode):
        out += ['REVEAL', node.opaque.text(), '=', node.concrete.text()]
    return tuple(out)


def _expr_names(expr: Expr, out: List[NameRef]) -> None:
    if isinstance(expr, NameRef):
        out.append(expr)
    elif isinstance(expr, Neg):
        _expr_names(expr.operand, out)
    elif isinstance(expr, BinOp):
        _expr_names(expr.left, out)
        _expr_names(expr.right, out)
    elif isinstance(expr, Call):
        out.append(expr.target)
        for arg in expr.args:
            _expr_names(arg, out)


def _decl_names(raw: RawDecl) -> List[NameRef]:
    node = raw.node
    names: List[NameRef] = []
    if isinstance(node, ConstNode):
        _expr_names(node.expr, names)
    elif isinstance(node, VarNode) and node.init is not None:
        _expr_names(node.init, names)
    elif isinstance(node, ObjectNode) and node.supertype is not None:
        names.append(node.supertype)
    elif isinstance(node, OpaqueNode):
        names.append(node.bound)
    elif isinstance(node, RevealNode):
        names += [node.opaque, node.concrete]
    return names


def fingerprint_declaration(decl: Declaration, env: Dict[DeclRef, int]) -> Fingerprint:
    """FNV-1a/64 over kind, name, canonical body tokens and the referenced
    fingerprints in refs order."""
    parts = [decl.kind.encode(), decl.name.encode()]
    parts += [tok.encode() for tok in decl.body]
    for ref in decl.refs:
        if ref not in env:
            raise MissingRefFingerprint(f"{ref[0]}.{ref[1]}")
        parts.append(struct.pack('<Q', env[ref]))
    return Fingerprint(fnv1a_64_parts(parts))


@dataclass
class InterfaceAST:
    unit_name: str
    decls: Tuple[Declaration, ...]
    decl_fps: Dict[str, int]
    imports: Tuple[str, ...]
    used: Dict[DeclRef, int] = field(default_factory=dict)
    const_values: Dict[str, int] = field(default_factory=dict)
    var_values: Dict[str, int] = field(default_factory=dict)
    path: Optional[str] = None
    text_hash: int = 0

    def __post_init__(self):
        self._by_name = {d.name: d for d in self.decls}

    def decl(self, name: str) -> Optional[Declaration]:
        return self._by_name.get(name)

    def approx_size(self) -> int:
        """Resident-size estimate used by the cache byte budget."""
        size = 64 + len(self.unit_name)
        for d in self.decls:
            size += 64 + len(d.name) + sum(len(t) for t in d.body) + 16 * len(d.refs)
        return size


@dataclass
class GenericAST:
    unit_name: str
    formals: Tuple[str, ...]
    syntax: UnitSyntax
    text_hash: int = 0


@dataclass
class ModuleAST:
    unit_name: str
    imports: Tuple[str, ...]
    decls: Tuple[Declaration, ...]
    procs: Tuple[ProcImpl, ...]
    init_body: Optional[Tuple[Stmt, ...]]
    exports: Optional[InterfaceAST]
    interfaces: Dict[str, InterfaceAST]
    path: Optional[str] = None
    text_hash: int = 0
    used: Dict[DeclRef, int] = field(default_factory=dict)

    def decl(self, name: str) -> Optional[Declaration]:
        for d in self.decls:
            if d.name == name:
                return d
        return None

    def proc(self, name: str) -> Optional[ProcImpl]:
        for p in self.procs:
            if p.name == name:
                return p
        return None


Lookup = Callable[[str], InterfaceAST]


def _resolve_interface(lookup: Lookup, name: str) -> InterfaceAST:
    try:
        return lookup(name)
    except KeyError:
        raise ImportOfUnknownUnit(name) from None


def _decl_refs(raw: RawDecl, unit_name: str, local_names: set, imported: Dict[str, InterfaceAST],
               path: Optional[str]) -> Tuple[DeclRef, ...]:
    refs: List[DeclRef] = []
    for ref in _decl_names(raw):
        if ref.qual is None or ref.qual == unit_name:
            if ref.name == 'ROOT' and ref.qual is None and ref.name not in local_names:
                continue
            if ref.name not in local_names:
                raise TypeCheckError(_site(path, ref.line or raw.line), f"unknown identifier {ref.text()}")
            key = (unit_name, ref.name)
        else:
            if ref.qual not in imported:
                raise TypeCheckError(_site(path, ref.line or raw.line), f"interface {ref.qual} is not imported")
            if imported[ref.qual].decl(ref.name) is None:
                raise UnknownImportedName(ref.qual, ref.name)
            key = (ref.qual, ref.name)
        if key not in refs:
            refs.append(key)
    return tuple(refs)


def eval_const(expr: Expr, resolve: Callable[[NameRef], int], site: str) -> int:
    """Fold a constant expression with 64-bit wraparound."""
    if isinstance(expr, Num):
        return wrap_int64(expr.value)
    if isinstance(expr, NameRef):
        return resolve(expr)
    if isinstance(expr, Neg):
        return wrap_int64(-eval_const(expr.operand, resolve, site))
    if isinstance(expr, BinOp):
        left = eval_const(expr.left, resolve, site)
        right = eval_const(expr.right, resolve, site)
        if expr.op == '+':
            return wrap_int64(left + right)
        if expr.op == '-':
            return wrap_int64(left - right)
        return wrap_int64(left * right)
    raise TypeCheckError(site, 'procedure call in constant expression')


def build_interface(syntax: UnitSyntax, lookup: Lookup, text_hash: int = 0) -> InterfaceAST:
    """Resolve references, compute fingerprints and constant values."""
    if syntax.kind != 'interface':
        raise FrontendError(f"{syntax.name} is a {syntax.kind}, not an interface")
    path = syntax.path
    imported = {name: _resolve_interface(lookup, name) for name in syntax.imports}
    raws: Dict[str, RawDecl] = {}
    for raw in syntax.decls:
        if raw.name in raws:
            raise TypeCheckError(_site(path, raw.line), f"{raw.name} declared twice")
        raws[raw.name] = raw
    local_names = set(raws)

    decls = tuple(
        Declaration(raw.name, raw.kind, canonical_tokens(raw),
                    _decl_refs(raw, syntax.name, local_names, imported, path), raw, raw.line)
        for raw in syntax.decls)
    by_name = {d.name: d for d in decls}

    env: Dict[DeclRef, int] = {}
    for iface in imported.values():
        for dname, fp in iface.decl_fps.items():
            env[(iface.unit_name, dname)] = fp

    fps: Dict[str, int] = {}
    visiting: List[str] = []

    def fp_of(name: str) -> int:
        if name in fps:
            return fps[name]
        if name in visiting:
            raise CircularDeclaration(visiting[visiting.index(name):] + [name])
        visiting.append(name)
        decl = by_name[name]
        for iface, ref_name in decl.refs:
            if iface == syntax.name:
                env[(iface, ref_name)] = fp_of(ref_name)
        visiting.pop()
        fps[name] = fingerprint_declaration(decl, env)
        return fps[name]

    for d in decls:
        fp_of(d.name)

    const_values: Dict[str, int] = {}

    def const_value(name: str) -> int:
        if name in const_values:
            return const_values[name]
        decl = by_name[name]
        site = _site(path, decl.line)
        if decl.kind != 'const':
            raise TypeCheckError(site, f"{name} is not a constant")
        value = eval_const(decl.node.node.expr, resolve, site)
        const_values[name] = value
        return value

    def resolve(ref: NameRef) -> int:
        if ref.qual is None or ref.qual == syntax.name:
            if by_name.get(ref.name) is None or by_name[ref.name].kind != 'const':
                raise TypeCheckError(_site(path, ref.line), f"{ref.text()} is not a constant")
            return const_value(ref.name)
        iface = imported[ref.qual]
        if ref.name not in iface.const_values:
            raise TypeCheckError(_site(path, ref.line), f"{ref.text()} is not a constant")
        return iface.const_values[ref.name]

    var_values: Dict[str, int] = {}
    for d in decls:
        if d.kind == 'const':
            const_value(d.name)
        elif d.kind == 'var':
            init = d.node.node.init
            var_values[d.name] = 0 if init is None else eval_const(init, resolve, _site(path, d.line))
        elif d.kind == 'procedure-sig' and len(set(d.node.node.params)) != len(d.node.node.params):
            raise TypeCheckError(_site(path, d.line), f"duplicate parameter in {d.name}")

    used: Dict[DeclRef, int] = {}
    for d in decls:
        for ref in d.refs:
            if ref[0] != syntax.name:
                used[ref] = env[ref]

    return InterfaceAST(unit_name=syntax.name, decls=decls, decl_fps=fps, imports=tuple(syntax.imports),
                        used=used, const_values=const_values, var_values=var_values, path=path,
                        text_hash=text_hash)


def _read_text(path: str) -> Tuple[str, int]:
    with open(path, 'rb') as f:
        data = f.read()
    return data.decode('utf-8'), fnv1a_64(data)


def parse_interface(path: str, lookup: Optional[Lookup] = None,
                    generic_lookup: Optional[Callable[[str], GenericAST]] = None) -> InterfaceAST:
    """Parse an interface file (or a generic instantiation) with fingerprints."""
    text, text_hash = _read_text(path)
    syntax = parse_source(text, path)
    if syntax.generic is not None:
        if generic_lookup is None:
            raise GenericInstantiationError(f"{path}: no generic interfaces available for {syntax.generic}")
        syntax = instantiate(syntax, generic_lookup(syntax.generic))
    if syntax.kind != 'interface':
        raise FrontendError(f"{path} does not contain an interface")
    return build_interface(syntax, lookup or _no_imports, text_hash)


def _no_imports(name: str) -> InterfaceAST:
    raise ImportOfUnknownUnit(name)


def parse_generic(path: str) -> GenericAST:
    """Generic interfaces are parsed but never fingerprinted or cached."""
    text, text_hash = _read_text(path)
    syntax = parse_source(text, path)
    if syntax.kind != 'generic-interface':
        raise FrontendError(f"{path} does not contain a generic interface")
    return GenericAST(syntax.name, tuple(syntax.formals), syntax, text_hash)


def _subst_ref(ref: Optional[NameRef], mapping: Dict[str, str]) -> Optional[NameRef]:
    if ref is None or ref.qual is None or ref.qual not in mapping:
        return ref
    return NameRef(mapping[ref.qual], ref.name, ref.line)


def _subst_expr(expr: Optional[Expr], mapping: Dict[str, str]) -> Optional[Expr]:
    if expr is None or isinstance(expr, Num):
        return expr
    if isinstance(expr, NameRef):
        return _subst_ref(expr, mapping)
    if isinstance(expr, Neg):
        return Neg(_subst_expr(expr.operand, mapping))
    if isinstance(expr, BinOp):
        return BinOp(expr.op, _subst_expr(expr.left, mapping), _subst_expr(expr.right, mapping))
    return Call(_subst_ref(expr.target, mapping), tuple(_subst_expr(a, mapping) for a in expr.args), expr.line)


def _subst_node(node, mapping):
    if isinstance(node, ConstNode):
        return ConstNode(_subst_expr(node.expr, mapping))
    if isinstance(node, VarNode):
        return VarNode(_subst_expr(node.init, mapping))
    if isinstance(node, ObjectNode):
        return ObjectNode(_subst_ref(node.supertype, mapping), node.fields)
    if isinstance(node, OpaqueNode):
        return OpaqueNode(_subst_ref(node.bound, mapping))
    if isinstance(node, RevealNode):
        return RevealNode(_subst_ref(node.opaque, mapping), _subst_ref(node.concrete, mapping))
    return node


def instantiate(inst: UnitSyntax, generic: GenericAST) -> UnitSyntax:
    """Name substitution of formal interface names by the actuals."""
    if len(inst.actuals) != len(generic.formals):
        raise GenericInstantiationError(
            f"{inst.name}: {generic.unit_name} takes {len(generic.formals)} arguments, got {len(inst.actuals)}")
    mapping = dict(zip(generic.formals, inst.actuals))
    imports = [mapping.get(i, i) for i in generic.syntax.imports]
    for actual in inst.actuals:
        if actual not in imports:
            imports.append(actual)
    decls = [RawDecl(raw.name if raw.kind != 'revelation' else
                     f"REVEAL {_subst_ref(raw.node.opaque, mapping).text()}",
                     raw.kind, _subst_node(raw.node, mapping), raw.line)
             for raw in generic.syntax.decls]
    return UnitSyntax(kind='interface', name=inst.name, imports=imports, decls=decls, path=inst.path,
                      generic=inst.generic, actuals=list(inst.actuals))


# ---------------------------------------------------------------------------
# Modules and name resolution

@dataclass(frozen=True)
class Resolved:
    """What a name in a module body denotes."""
    kind: str                       # 'slot', 'const', 'global', 'proc'
    symbol: Optional[str] = None
    value: int = 0
    slot: Optional[Tuple[str, int]] = None
    n_params: int = 0
    has_result: bool = False
    ref: Optional[DeclRef] = None
    local: bool = False             # procedure body lives in this unit


class Scope:
    """Name resolution for module bodies: params/locals, module declarations,
    the exported interface, then imported interfaces (qualified)."""

    def __init__(self, module: ModuleAST, proc: Optional[ProcImpl] = None):
        self.module = module
        self.proc = proc
        self.slots: Dict[str, Tuple[str, int]] = {}
        if proc is not None:
            for i, p in enumerate(proc.params):
                self.slots[p] = ('param', i)
            for i, loc in enumerate(proc.locals):
                self.slots[loc] = ('local', i)

    def site(self, line: int) -> str:
        return _site(self.module.path, line)

    def resolve(self, ref: NameRef) -> Resolved:
        module = self.module
        name = ref.name
        if ref.qual is None:
            if name in self.slots:
                return Resolved('slot', slot=self.slots[name])
            local = self._module_level(name)
            if local is not None:
                return local
            if module.exports is not None and module.exports.decl(name) is not None:
                return self._from_interface(module.exports, name, ref)
            raise TypeCheckError(self.site(ref.line), f"unknown identifier {name}")
        if ref.qual == module.unit_name and module.exports is not None:
            return self._from_interface(module.exports, name, ref)
        if ref.qual not in module.interfaces or ref.qual not in module.imports:
            raise TypeCheckError(self.site(ref.line), f"interface {ref.qual} is not imported")
        return self._from_interface(module.interfaces[ref.qual], name, ref)

    def _module_level(self, name: str) -> Optional[Resolved]:
        module = self.module
        decl = module.decl(name)
        if decl is not None:
            if decl.kind == 'const':
                return Resolved('const', value=module_const(module, name))
            if decl.kind == 'var':
                return Resolved('global', symbol=f"{module.unit_name}.{name}")
        impl = module.proc(name)
        if impl is not None:
            return Resolved('proc', symbol=f"{module.unit_name}.{name}", n_params=len(impl.params),
                            has_result=impl.has_result, local=True)
        return None

    def _from_interface(self, iface: InterfaceAST, name: str, ref: NameRef) -> Resolved:
        decl = iface.decl(name)
        if decl is None:
            raise UnknownImportedName(iface.unit_name, name)
        key = (iface.unit_name, name)
        if decl.kind == 'const':
            return Resolved('const', value=iface.const_values[name], ref=key)
        if decl.kind == 'var':
            return Resolved('global', symbol=f"{iface.unit_name}.{name}", ref=key)
        if decl.kind == 'procedure-sig':
            sig = decl.node.node
            local = iface.unit_name == self.module.unit_name and self.module.proc(name) is not None
            return Resolved('proc', symbol=f"{iface.unit_name}.{name}", n_params=len(sig.params),
                            has_result=sig.has_result, ref=key, local=local)
        raise TypeCheckError(self.site(ref.line), f"{ref.text()} is a {decl.kind}, not a value")


def module_const(module: ModuleAST, name: str, _active: Optional[set] = None) -> int:
    decl = module.decl(name)
    active = _active or set()
    if name in active:
        raise CircularDeclaration(sorted(active) + [name])
    active.add(name)
    scope = Scope(module)

    def resolve(ref: NameRef) -> int:
        if ref.qual is None and module.decl(ref.name) is not None and module.decl(ref.name).kind == 'const':
            return module_const(module, ref.name, active)
        r = scope.resolve(ref)
        if r.kind != 'const':
            raise TypeCheckError(scope.site(ref.line), f"{ref.text()} is not a constant")
        return r.value

    try:
        return eval_const(decl.node.node.expr, resolve, scope.site(decl.line))
    finally:
        active.discard(name)


def _stmt_exprs(stmt: Stmt) -> List[Expr]:
    if isinstance(stmt, Assign):
        return [stmt.target, stmt.expr]
    if isinstance(stmt, Return):
        return [stmt.expr] if stmt.expr is not None else []
    return [stmt.call]


def build_module(syntax: UnitSyntax, lookup: Lookup, text_hash: int = 0) -> ModuleAST:
    """Resolve imports and the exported interface of a module; compute its used map."""
    if syntax.kind != 'module':
        raise FrontendError(f"{syntax.name} is a {syntax.kind}, not a module")
    path = syntax.path
    interfaces = {name: _resolve_interface(lookup, name) for name in syntax.imports}
    exports = None
    try:
        exports = lookup(syntax.name)
    except (KeyError, ImportOfUnknownUnit):
        exports = None
    if exports is not None:
        interfaces.setdefault(syntax.name, exports)

    seen = set()
    for item in list(syntax.decls) + list(syntax.procs):
        if item.name in seen:
            raise TypeCheckError(_site(path, item.line), f"{item.name} declared twice")
        seen.add(item.name)
    decls = tuple(Declaration(raw.name, raw.kind, canonical_tokens(raw), (), raw, raw.line)
                  for raw in syntax.decls)
    module = ModuleAST(unit_name=syntax.name, imports=tuple(syntax.imports), decls=decls,
                       procs=tuple(syntax.procs), init_body=syntax.init_body, exports=exports,
                       interfaces=interfaces, path=path, text_hash=text_hash)
    if exports is not None:
        for d in decls:
            if d.kind == 'var' and exports.decl(d.name) is not None:
                raise TypeCheckError(_site(path, d.line), f"{d.name} redeclares {exports.unit_name}.{d.name}")
    module.used = _module_used(module)
    return module


def _module_used(module: ModuleAST) -> Dict[DeclRef, int]:
    used: Dict[DeclRef, int] = {}

    def note(resolved: Resolved):
        if resolved.ref is not None:
            iface = module.interfaces[resolved.ref[0]]
            used[resolved.ref] = iface.decl_fps[resolved.ref[1]]

    module_scope = Scope(module)
    for d in module.decls:
        names: List[NameRef] = []
        if d.kind == 'revelation':
            for ref in (d.node.node.opaque, d.node.node.concrete):
                iface_name = ref.qual or module.unit_name
                iface = module.interfaces.get(iface_name)
                if iface is None or (ref.qual and ref.qual not in module.imports and ref.qual != module.unit_name):
                    raise TypeCheckError(module_scope.site(d.line), f"interface {iface_name} is not imported")
                if iface.decl(ref.name) is None:
                    raise UnknownImportedName(iface_name, ref.name)
                used[(iface_name, ref.name)] = iface.decl_fps[ref.name]
            continue
        _decl_names_into(d, names)
        for ref in names:
            if ref.qual is None and module.decl(ref.name) is not None:
                continue
            note(module_scope.resolve(ref))

    # every procedure and variable name against the own interface, declared there or not
    own_fps = module.exports.decl_fps if module.exports is not None else {}
    for name in [impl.name for impl in module.procs] + [d.name for d in module.decls if d.kind == 'var']:
        used[(module.unit_name, name)] = own_fps.get(name, ABSENT)

    for impl in module.procs:
        scope = Scope(module, impl)
        for stmt in impl.body:
            for expr in _stmt_exprs(stmt):
                names = []
                _expr_names(expr, names)
                for ref in names:
                    note(scope.resolve(ref))

    if module.init_body:
        scope = Scope(module)
        for stmt in module.init_body:
            for expr in _stmt_exprs(stmt):
                names = []
                _expr_names(expr, names)
                for ref in names:
                    note(scope.resolve(ref))
    return dict(sorted(used.items()))


def _decl_names_into(decl: Declaration, out: List[NameRef]) -> None:
    out.extend(_decl_names(decl.node))


def parse_module(path: str, lookup: Lookup) -> ModuleAST:
    text, text_hash = _read_text(path)
    syntax = parse_source(text, path)
    if syntax.kind != 'module':
        raise FrontendError(f"{path} does not contain a module")
    return build_module(syntax, lookup, text_hash)


def used_fingerprints(unit: Union[SourceUnit, InterfaceAST, ModuleAST],
                      lookup: Optional[Lookup] = None,
                      generic_lookup: Optional[Callable[[str], GenericAST]] = None) -> Dict[DeclRef, int]:
    """Exactly the imported declarations a unit references, with their
    current fingerprints."""
    if isinstance(unit, (InterfaceAST, ModuleAST)):
        return dict(unit.used)
    if unit.kind == 'module':
        return dict(parse_module(unit.path, lookup or _no_imports).used)
    if unit.kind == 'interface':
        return dict(parse_interface(unit.path, lookup, generic_lookup).used)
    return {}
