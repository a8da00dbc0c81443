"""Type check module bodies and lower them to the method-call IR.

The IR is a flat list of events the code generator consumes in a single pass:
begin_procedure, declare_local, load, store, literal, add, sub, mul, call,
load_global, store_global, exit_proc, end_procedure, init_begin, init_end.
"""
import logging
import os
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Set, Tuple

from src.toolchain.frontend import (
    Assign, BinOp, Call, CallStmt, InterfaceAST, ModuleAST, NameRef, Neg, Num,
    ProcImpl, Return, Scope, TypeCheckError, eval_const, module_const,
)

logger = logging.getLogger()

BINARY_OPS = {'+': 'add', '-': 'sub', '*': 'mul'}

# events popping / pushing operand-stack entries; call is computed per event
STACK_EFFECT = {
    'load': 1, 'literal': 1, 'load_global': 1,
    'store': -1, 'store_global': -1,
    'add': -1, 'sub': -1, 'mul': -1,
}


class IRError(Exception):
    """IR event stream violates nesting or the static stack-depth rule."""
    pass


@dataclass(frozen=True)
class Slot:
    kind: str       # 'param' or 'local'
    index: int
    name: str = field(default='', compare=False)

    def __str__(self):
        return self.name or f"{self.kind}{self.index}"


@dataclass(frozen=True)
class IREvent:
    op: str
    args: tuple = ()
    line: int = field(default=0, compare=False)

    def __str__(self):
        return f"{self.op}({', '.join(str(a) for a in self.args)})" if self.args else self.op


class IRStream:
    """Ordered IR events for one unit."""

    def __init__(self, unit_name: str):
        self.unit_name = unit_name
        self.events: List[IREvent] = []
        self.returns: Dict[str, bool] = {}

    def emit(self, op: str, *args, line: int = 0) -> None:
        self.events.append(IREvent(op, tuple(args), line))

    def ops(self) -> List[str]:
        return [e.op for e in self.events]

    def __iter__(self) -> Iterator[IREvent]:
        return iter(self.events)

    def __len__(self):
        return len(self.events)


@dataclass(frozen=True)
class ProcShape:
    name: str
    n_params: int
    n_locals: int
    max_depth: int
    has_calls: bool
    returns: bool


def check_ir(stream: IRStream) -> Dict[str, ProcShape]:
    """Simulate operand-stack depth over the stream and return per-procedure shapes."""
    shapes: Dict[str, ProcShape] = {}
    current = None
    depth = max_depth = 0
    has_calls = False
    n_params = n_locals = 0
    exited = False

    for event in stream:
        op = event.op
        if op in ('begin_procedure', 'init_begin'):
            if current is not None:
                raise IRError(f"{op} inside open procedure {current}")
            current = event.args[0]
            n_params, n_locals = (event.args[1], event.args[2]) if op == 'begin_procedure' else (0, 0)
            depth = max_depth = 0
            has_calls = exited = False
            continue
        if current is None:
            raise IRError(f"{op} outside any procedure")
        if op == 'declare_local':
            if not 0 <= event.args[0] < n_locals:
                raise IRError(f"{current}: local index {event.args[0]} out of range")
            continue
        if op in ('load', 'store'):
            slot = event.args[0]
            limit = n_params if slot.kind == 'param' else n_locals
            if not 0 <= slot.index < limit:
                raise IRError(f"{current}: slot {slot} out of range")
        if op == 'call':
            _, n_args, returns = event.args
            depth -= n_args
            if depth < 0:
                raise IRError(f"{current}: call pops below empty operand stack")
            depth += 1 if returns else 0
            has_calls = True
        elif op in STACK_EFFECT:
            depth += STACK_EFFECT[op]
            if op in ('add', 'sub', 'mul') and depth < 1:
                raise IRError(f"{current}: {op} needs two operands")
        elif op == 'exit_proc':
            expected = 1 if stream.returns.get(current) else 0
            if depth != expected:
                raise IRError(f"{current}: depth {depth} at exit_proc, expected {expected}")
            depth = 0
            exited = True
            continue
        elif op in ('end_procedure', 'init_end'):
            if op == 'end_procedure' and not exited:
                raise IRError(f"{current}: end_procedure without exit_proc")
            if depth != 0:
                raise IRError(f"{current}: depth {depth} at {op}")
            shapes[current] = ProcShape(current, n_params, n_locals, max_depth, has_calls,
                                        bool(stream.returns.get(current)))
            current = None
            continue
        else:
            raise IRError(f"unknown IR event {op}")
        if depth < 0:
            raise IRError(f"{current}: operand stack underflow at {op}")
        max_depth = max(max_depth, depth)

    if current is not None:
        raise IRError(f"procedure {current} never closed")
    return shapes


@dataclass(frozen=True)
class DataItem:
    symbol: str
    value: int
    exported: bool


@dataclass
class LoweredUnit:
    """Everything code generation needs from one unit."""
    unit_name: str
    unit_id: str
    kind: str
    ir: IRStream
    data: List[DataItem]
    imports: Tuple[str, ...]
    revelations: List[Tuple[str, str, str]]
    exported_procs: Set[str]
    init_symbol: Optional[str]
    used: Dict[Tuple[str, str], int]


def init_symbol_for(unit_name: str) -> str:
    return f"{unit_name}$init"


class _Lowerer:

    def __init__(self, module: ModuleAST):
        self.module = module
        self.stream = IRStream(module.unit_name)

    def _site(self, line):
        return f"{os.path.basename(self.module.path) if self.module.path else '<text>'}:{line}"

    def lower(self) -> IRStream:
        for proc in self.module.procs:
            self._check_signature(proc)
            self._lower_proc(proc)
        if self.module.init_body is not None:
            self._lower_init(self.module.init_body)
        return self.stream

    def _check_signature(self, proc: ProcImpl):
        names = list(proc.params) + list(proc.locals)
        if len(set(names)) != len(names):
            raise TypeCheckError(self._site(proc.line), f"duplicate parameter or local in {proc.name}")
        exports = self.module.exports
        if exports is None:
            return
        decl = exports.decl(proc.name)
        if decl is None:
            return
        if decl.kind != 'procedure-sig':
            raise TypeCheckError(self._site(proc.line), f"{proc.name} is a {decl.kind} in interface {exports.unit_name}")
        sig = decl.node.node
        if len(sig.params) != len(proc.params) or sig.has_result != proc.has_result:
            raise TypeCheckError(self._site(proc.line),
                                 f"{proc.name} does not match its signature in interface {exports.unit_name}")

    def _lower_proc(self, proc: ProcImpl):
        symbol = f"{self.module.unit_name}.{proc.name}"
        scope = Scope(self.module, proc)
        self.stream.returns[symbol] = proc.has_result
        self.stream.emit('begin_procedure', symbol, len(proc.params), len(proc.locals), line=proc.line)
        for i in range(len(proc.locals)):
            self.stream.emit('declare_local', i, line=proc.line)
        returned = False
        for i, stmt in enumerate(proc.body):
            if isinstance(stmt, Return):
                if i != len(proc.body) - 1:
                    raise TypeCheckError(self._site(stmt.line), 'RETURN must be the last statement')
                if proc.has_result and stmt.expr is None:
                    raise TypeCheckError(self._site(stmt.line), f"{proc.name} must return a value")
                if not proc.has_result and stmt.expr is not None:
                    raise TypeCheckError(self._site(stmt.line), f"{proc.name} has no result")
                if stmt.expr is not None:
                    self._expr(stmt.expr, scope)
                returned = True
            else:
                self._stmt(stmt, scope)
        if proc.has_result and not returned:
            raise TypeCheckError(self._site(proc.line), f"{proc.name} ends without RETURN")
        self.stream.emit('exit_proc', line=proc.line)
        self.stream.emit('end_procedure', line=proc.line)

    def _lower_init(self, body):
        scope = Scope(self.module)
        self.stream.emit('init_begin', init_symbol_for(self.module.unit_name))
        for stmt in body:
            if isinstance(stmt, Return):
                raise TypeCheckError(self._site(stmt.line), 'RETURN in module initializer')
            self._stmt(stmt, scope)
        self.stream.emit('init_end')

    def _stmt(self, stmt, scope: Scope):
        if isinstance(stmt, Assign):
            target = scope.resolve(stmt.target)
            if target.kind == 'slot':
                self._expr(stmt.expr, scope)
                kind, index = target.slot
                self.stream.emit('store', Slot(kind, index, stmt.target.name), line=stmt.line)
            elif target.kind == 'global':
                self._expr(stmt.expr, scope)
                self.stream.emit('store_global', target.symbol, line=stmt.line)
            else:
                raise TypeCheckError(self._site(stmt.line), f"cannot assign to {target.kind} {stmt.target.text()}")
        elif isinstance(stmt, CallStmt):
            returns = self._call(stmt.call, scope, stmt.line)
            if returns:
                raise TypeCheckError(self._site(stmt.line), f"result of {stmt.call.target.text()} is discarded")

    def _call(self, call: Call, scope: Scope, line: int) -> bool:
        target = scope.resolve(call.target)
        if target.kind != 'proc':
            raise TypeCheckError(self._site(line), f"{call.target.text()} is not a procedure")
        if len(call.args) != target.n_params:
            raise TypeCheckError(self._site(line),
                                 f"{call.target.text()} takes {target.n_params} arguments, got {len(call.args)}")
        for arg in call.args:
            self._expr(arg, scope)
        self.stream.emit('call', target.symbol, len(call.args), target.has_result, line=line)
        return target.has_result

    def _expr(self, expr, scope: Scope):
        if isinstance(expr, Num):
            self.stream.emit('literal', expr.value)
        elif isinstance(expr, NameRef):
            target = scope.resolve(expr)
            if target.kind == 'slot':
                kind, index = target.slot
                self.stream.emit('load', Slot(kind, index, expr.name), line=expr.line)
            elif target.kind == 'const':
                self.stream.emit('literal', target.value, line=expr.line)
            elif target.kind == 'global':
                self.stream.emit('load_global', target.symbol, line=expr.line)
            else:
                raise TypeCheckError(self._site(expr.line), f"procedure {expr.text()} used as a value")
        elif isinstance(expr, Neg):
            self.stream.emit('literal', 0)
            self._expr(expr.operand, scope)
            self.stream.emit('sub')
        elif isinstance(expr, BinOp):
            self._expr(expr.left, scope)
            self._expr(expr.right, scope)
            self.stream.emit(BINARY_OPS[expr.op])
        elif isinstance(expr, Call):
            if not self._call(expr, scope, expr.line):
                raise TypeCheckError(self._site(expr.line), f"{expr.target.text()} has no result")


def lower_to_ir(module: ModuleAST) -> IRStream:
    """Type check a parsed module and produce its IR stream."""
    stream = _Lowerer(module).lower()
    check_ir(stream)
    return stream


def lower_module(module: ModuleAST) -> LoweredUnit:
    ir = lower_to_ir(module)
    scope = Scope(module)

    def const_expr(expr, line):
        def resolve(ref: NameRef) -> int:
            if ref.qual is None and module.decl(ref.name) is not None and module.decl(ref.name).kind == 'const':
                return module_const(module, ref.name)
            r = scope.resolve(ref)
            if r.kind != 'const':
                raise TypeCheckError(scope.site(ref.line), f"{ref.text()} is not a constant")
            return r.value
        return eval_const(expr, resolve, scope.site(line))

    data = []
    revelations = []
    for decl in module.decls:
        if decl.kind == 'const':
            module_const(module, decl.name)
        elif decl.kind == 'var':
            init = decl.node.node.init
            value = 0 if init is None else const_expr(init, decl.line)
            data.append(DataItem(f"{module.unit_name}.{decl.name}", value, False))
        elif decl.kind == 'revelation':
            node = decl.node.node
            revelations.append((_qualify(node.opaque, module.unit_name), _qualify(node.concrete, module.unit_name),
                                f"{_basename(module.path)}:{decl.line}"))

    exported = set()
    if module.exports is not None:
        for proc in module.procs:
            decl = module.exports.decl(proc.name)
            if decl is not None and decl.kind == 'procedure-sig':
                exported.add(f"{module.unit_name}.{proc.name}")

    return LoweredUnit(unit_name=module.unit_name, unit_id=_basename(module.path) or f"{module.unit_name}.m3",
                       kind='module', ir=ir, data=data, imports=tuple(module.imports),
                       revelations=revelations, exported_procs=exported,
                       init_symbol=init_symbol_for(module.unit_name) if module.init_body is not None else None,
                       used=dict(module.used))


def lower_interface(iface: InterfaceAST) -> LoweredUnit:
    """Interfaces compile to data-only units holding their exported variables."""
    data = []
    revelations = []
    for decl in iface.decls:
        if decl.kind == 'var':
            data.append(DataItem(f"{iface.unit_name}.{decl.name}", iface.var_values[decl.name], True))
        elif decl.kind == 'revelation':
            node = decl.node.node
            revelations.append((_qualify(node.opaque, iface.unit_name), _qualify(node.concrete, iface.unit_name),
                                f"{_basename(iface.path)}:{decl.line}"))
    return LoweredUnit(unit_name=iface.unit_name, unit_id=_basename(iface.path) or f"{iface.unit_name}.i3",
                       kind='interface', ir=IRStream(iface.unit_name), data=data, imports=tuple(iface.imports),
                       revelations=revelations, exported_procs=set(), init_symbol=None, used=dict(iface.used))


def _qualify(ref: NameRef, default: str) -> str:
    return f"{ref.qual or default}.{ref.name}"


def _basename(path: Optional[str]) -> str:
    return os.path.basename(path) if path else ''
