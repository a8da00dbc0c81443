"""Single-pass code generator for the abstract register machine.

The generator consumes IR events one at a time. Operands are pushed on an
operand stack as descriptors (frame slot, register, immediate, global) and
only materialized when an operation needs them; registers are allocated on
demand and the oldest register is spilled to a frame temporary when none is
free. Output goes to a CodeBuffer (machine code plus relocations) or, for the
assembler backend, to an AsmBuffer whose text `assemble` turns into the same
object.

Frame layout (word = 8 bytes):

    FP + 8*(2+i)     argument i
    FP + 8           return address
    FP + 0           caller's FP
    FP - 8*(1+i)     local i, then temporaries
    below            saved R3, R4, R5
"""
import logging
import struct
from dataclasses import dataclass
from typing import Dict, List, Optional, Set, Tuple

from src.toolchain import isa
from src.toolchain.isa import FP, IMM, NO_OPERAND, R0, REG, REL, SLOT, SP, WORD, Operand
from src.toolchain.lowering import LoweredUnit, check_ir
from src.toolchain.objfile import DebugLine, RelocatableObject, Relocation, Symbol
from src.utils.helpers import fnv1a_64_parts, wrap_int64

logger = logging.getLogger()


class CodegenError(Exception):
    """Base class for code generation errors."""
    pass


class NestedProcedure(CodegenError):
    pass


class NoOpenProcedure(CodegenError):
    pass


class StackUnderflow(CodegenError):
    pass


class DepthMismatch(CodegenError):
    def __init__(self, name, depth):
        self.name = name
        self.depth = depth
        super().__init__(f"{name}: operand stack depth {depth} at exit")


class AssemblerError(CodegenError):
    def __init__(self, line_no, message):
        self.line_no = line_no
        super().__init__(f"asm line {line_no}: {message}")


def param_offset(i: int) -> int:
    return WORD * (2 + i)


def local_offset(i: int) -> int:
    return -WORD * (1 + i)


# ---------------------------------------------------------------------------
# Code buffers

class CodeBuffer:
    """Encodes instructions; symbolic slot and rel32 operands become relocations."""

    def __init__(self):
        self.text = bytearray()
        self.relocations: List[Relocation] = []
        self.debug_lines: List[DebugLine] = []
        self.procs: List[Tuple[str, int, int, bool]] = []
        self.refs: Dict[str, str] = {}
        self._open: Optional[Tuple[str, int, bool]] = None

    @property
    def offset(self) -> int:
        return len(self.text)

    def begin_symbol(self, name: str, exported: bool) -> None:
        self._open = (name, self.offset, exported)

    def end_symbol(self, name: str) -> None:
        sym, start, exported = self._open
        self.procs.append((sym, start, self.offset - start, exported))
        self._open = None

    def line(self, line: int) -> None:
        if self.debug_lines and self.debug_lines[-1].offset == self.offset:
            self.debug_lines[-1] = DebugLine(self.offset, line)
        elif not self.debug_lines or self.debug_lines[-1].line != line:
            self.debug_lines.append(DebugLine(self.offset, line))

    def instr(self, mnemonic: str, dst: Operand = NO_OPERAND, src: Operand = NO_OPERAND) -> None:
        at = self.offset
        field_at = at + 2
        for op in (dst, src):
            if op.kind in (SLOT, REL) and isinstance(op.value, str):
                kind = 'pc-relative-32' if op.kind == REL else 'indirect-slot'
                self.relocations.append(Relocation('text', field_at, op.value, kind))
                self.refs.setdefault(op.value, 'proc' if mnemonic in ('CALL', 'CALLI') else 'data')
            field_at += isa.OPERAND_SIZE[op.kind]
        self.text += isa.encode(mnemonic, dst, src)


class AsmBuffer:
    """Renders the same instruction stream as assembly text."""

    def __init__(self):
        self.lines: List[str] = []

    def begin_symbol(self, name: str, exported: bool) -> None:
        self.lines.append(f".proc {name} {'exported' if exported else 'local'}")

    def end_symbol(self, name: str) -> None:
        self.lines.append(f".endproc {name}")

    def line(self, line: int) -> None:
        self.lines.append(f".line {line}")

    def instr(self, mnemonic: str, dst: Operand = NO_OPERAND, src: Operand = NO_OPERAND) -> None:
        ops = [_asm_operand(op, mnemonic) for op in (dst, src) if op.kind != isa.NONE]
        self.lines.append(f"    {mnemonic}" + (' ' + ', '.join(ops) if ops else ''))


def _asm_operand(op: Operand, mnemonic: str) -> str:
    if op.kind in (SLOT, REL) and isinstance(op.value, str):
        return isa.format_operand(op, op.value, mnemonic=mnemonic)
    return isa.format_operand(op, mnemonic=mnemonic)


# ---------------------------------------------------------------------------
# Operand stack

@dataclass
class Descriptor:
    kind: str                   # frame, reg, imm, global
    value: object
    temp: Optional[int] = None  # temporary slot index holding a spilled value

    def operand(self) -> Operand:
        if self.kind == 'reg':
            return Operand(REG, self.value)
        if self.kind == 'imm':
            return Operand(IMM, self.value)
        if self.kind == 'frame':
            return Operand(isa.FRAME, self.value)
        return Operand(SLOT, self.value)


class OperandStack:
    """Descriptors plus register ownership; a register backs at most one descriptor."""

    def __init__(self, code, temp_base: int, n_temps: int):
        self.code = code
        self.items: List[Descriptor] = []
        self.owner: Dict[int, Descriptor] = {}
        self.reg_order: List[int] = []
        self.temp_base = temp_base
        self.free_temps = list(range(n_temps))

    def __len__(self):
        return len(self.items)

    def push(self, desc: Descriptor) -> None:
        if desc.kind == 'reg':
            self.owner[desc.value] = desc
            self.reg_order.append(desc.value)
        self.items.append(desc)

    def pop(self) -> Descriptor:
        if not self.items:
            raise StackUnderflow('operand stack is empty')
        return self.items.pop()

    def release(self, desc: Descriptor) -> None:
        """Free the register or temporary a consumed descriptor occupied."""
        if desc.kind == 'reg' and self.owner.get(desc.value) is desc:
            del self.owner[desc.value]
            self.reg_order.remove(desc.value)
        if desc.temp is not None:
            self.free_temps.append(desc.temp)
            self.free_temps.sort()
            desc.temp = None

    def claim(self, reg: int, desc: Descriptor) -> None:
        desc.kind, desc.value = 'reg', reg
        self.owner[reg] = desc
        self.reg_order.append(reg)

    def alloc(self, exclude: Tuple[int, ...] = ()) -> int:
        for reg in isa.SCRATCH_REGS:
            if reg not in self.owner and reg not in exclude:
                return reg
        for reg in self.reg_order:
            if reg in isa.SCRATCH_REGS and reg not in exclude:
                self.spill(self.owner[reg])
                return reg
        raise CodegenError('no register available')

    def spill(self, desc: Descriptor) -> None:
        if not self.free_temps:
            raise CodegenError('temporary area exhausted')
        temp = self.free_temps.pop(0)
        disp = self.temp_base - WORD * temp
        if desc.kind == 'global':
            reg = self.alloc()
            self.code.instr('MOV', Operand(REG, reg), desc.operand())
            self.code.instr('MOV', Operand(isa.FRAME, disp), Operand(REG, reg))
        else:
            reg = desc.value
            self.code.instr('MOV', Operand(isa.FRAME, disp), Operand(REG, reg))
            del self.owner[reg]
            self.reg_order.remove(reg)
        desc.kind, desc.value, desc.temp = 'frame', disp, temp


# ---------------------------------------------------------------------------
# Generator

class CodeGenerator:
    """IR event methods; one instance per unit."""

    def __init__(self, code=None, local_procs: Optional[Set[str]] = None,
                 exported: Optional[Set[str]] = None):
        self.code = code if code is not None else CodeBuffer()
        self.local_procs = local_procs or set()
        self.exported = exported or set()
        self.stack: Optional[OperandStack] = None
        self.proc: Optional[str] = None

    def _require_open(self):
        if self.proc is None:
            raise NoOpenProcedure('no open procedure')

    def mark_line(self, line: int) -> None:
        if line and self.proc is not None:
            self.code.line(line)

    def begin_procedure(self, name: str, n_params: int, n_locals: int, n_temps: int = 0) -> None:
        if self.proc is not None:
            raise NestedProcedure(f"{name} begins inside {self.proc}")
        self.proc = name
        self.n_params = n_params
        self.stack = OperandStack(self.code, local_offset(n_locals), n_temps)
        code = self.code
        code.begin_symbol(name, name in self.exported)
        code.instr('PUSH', src=Operand(REG, FP))
        code.instr('MOV', Operand(REG, FP), Operand(REG, SP))
        if n_locals + n_temps:
            code.instr('SUB', Operand(REG, SP), Operand(IMM, WORD * (n_locals + n_temps)))
        for reg in isa.CALLEE_SAVE:
            code.instr('PUSH', src=Operand(REG, reg))

    def declare_local(self, index: int) -> None:
        self._require_open()

    def load(self, slot) -> None:
        self._require_open()
        disp = param_offset(slot.index) if slot.kind == 'param' else local_offset(slot.index)
        self.stack.push(Descriptor('frame', disp))

    def literal(self, value: int) -> None:
        self._require_open()
        self.stack.push(Descriptor('imm', wrap_int64(value)))

    def load_global(self, symbol: str) -> None:
        self._require_open()
        self.stack.push(Descriptor('global', symbol))

    def _binary(self, mnemonic: str, fold, commutative: bool) -> None:
        self._require_open()
        if len(self.stack) < 2:
            raise StackUnderflow(f"{mnemonic} needs two operands")
        stack = self.stack
        right = stack.pop()
        left = stack.pop()
        if left.kind == 'imm' and right.kind == 'imm':
            stack.push(Descriptor('imm', wrap_int64(fold(left.value, right.value))))
            return
        if left.kind == 'reg':
            dst, other = left, right
        elif right.kind == 'reg' and commutative:
            dst, other = right, left
        else:
            busy = tuple(d.value for d in (left, right) if d.kind == 'reg')
            reg = stack.alloc(exclude=busy)
            self.code.instr('MOV', Operand(REG, reg), left.operand())
            stack.release(left)
            dst = Descriptor('reg', reg)
            stack.claim(reg, dst)
            other = right
        self.code.instr(mnemonic, Operand(REG, dst.value), other.operand())
        stack.release(other)
        stack.items.append(dst)

    def add(self) -> None:
        self._binary('ADD', lambda a, b: a + b, True)

    def sub(self) -> None:
        self._binary('SUB', lambda a, b: a - b, False)

    def mul(self) -> None:
        self._binary('MUL', lambda a, b: a * b, True)

    def _store_operand(self, dst: Operand) -> None:
        self._require_open()
        value = self.stack.pop()
        if value.kind in ('reg', 'imm'):
            self.code.instr('MOV', dst, value.operand())
        else:
            reg = self.stack.alloc()
            self.code.instr('MOV', Operand(REG, reg), value.operand())
            self.code.instr('MOV', dst, Operand(REG, reg))
        self.stack.release(value)

    def store(self, slot) -> None:
        disp = param_offset(slot.index) if slot.kind == 'param' else local_offset(slot.index)
        self._store_operand(Operand(isa.FRAME, disp))

    def store_global(self, symbol: str) -> None:
        self._store_operand(Operand(SLOT, symbol))

    def call(self, symbol: str, n_args: int, returns: bool = True) -> None:
        self._require_open()
        stack = self.stack
        if len(stack) < n_args:
            raise StackUnderflow(f"call {symbol} needs {n_args} arguments")
        live = stack.items[:len(stack) - n_args]
        for desc in live:
            if desc.kind == 'reg':
                stack.spill(desc)
        for desc in live:
            if desc.kind == 'global':
                stack.spill(desc)
        args = [stack.pop() for _ in range(n_args)]
        for desc in args:
            self.code.instr('PUSH', src=desc.operand())
            stack.release(desc)
        if symbol in self.local_procs:
            self.code.instr('CALL', src=Operand(REL, symbol))
        else:
            self.code.instr('CALLI', src=Operand(SLOT, symbol))
        if n_args:
            self.code.instr('ADD', Operand(REG, SP), Operand(IMM, WORD * n_args))
        if returns:
            stack.push(Descriptor('reg', R0))

    def exit_proc(self) -> None:
        self._require_open()
        depth = len(self.stack)
        if depth == 1:
            top = self.stack.pop()
            if not (top.kind == 'reg' and top.value == R0):
                self.code.instr('MOV', Operand(REG, R0), top.operand())
            self.stack.release(top)
        elif depth != 0:
            raise DepthMismatch(self.proc, depth)

    def end_procedure(self) -> None:
        self._require_open()
        if len(self.stack):
            raise DepthMismatch(self.proc, len(self.stack))
        code = self.code
        for reg in reversed(isa.CALLEE_SAVE):
            code.instr('POP', Operand(REG, reg))
        code.instr('LEAVE')
        code.instr('RET')
        code.end_symbol(self.proc)
        self.proc = None
        self.stack = None

    def init_begin(self, symbol: str, n_temps: int = 0) -> None:
        self.begin_procedure(symbol, 0, 0, n_temps)

    def init_end(self) -> None:
        self.end_procedure()


def temps_needed(max_depth: int, has_calls: bool) -> int:
    """Frame temporaries reserved in the prologue; spills need depth > 2 or a call."""
    return max_depth if (max_depth > 2 or has_calls) else 0


def generate(unit: LoweredUnit, code) -> None:
    """Drive the generator over a unit's IR into `code`."""
    shapes = check_ir(unit.ir)
    local_procs = {e.args[0] for e in unit.ir if e.op == 'begin_procedure'}
    gen = CodeGenerator(code, local_procs, unit.exported_procs)
    for event in unit.ir:
        op, args = event.op, event.args
        if op == 'begin_procedure':
            shape = shapes[args[0]]
            gen.begin_procedure(*args, n_temps=temps_needed(shape.max_depth, shape.has_calls))
            gen.mark_line(event.line)
        elif op == 'init_begin':
            shape = shapes[args[0]]
            gen.init_begin(args[0], n_temps=temps_needed(shape.max_depth, shape.has_calls))
        else:
            gen.mark_line(event.line)
            getattr(gen, op)(*args)


def imports_digest(used: Dict[Tuple[str, str], int]) -> int:
    """Fingerprint of the imported declarations a unit was compiled against."""
    parts = []
    for (iface, name), fp in sorted(used.items()):
        parts.append(f"{iface}.{name}".encode())
        parts.append(struct.pack('<Q', fp))
    return fnv1a_64_parts(parts)


class ObjectBuilder:
    """Collects unit metadata and code into a RelocatableObject (the object-file writer role)."""

    def __init__(self, unit_name: str, unit_kind: str):
        self.unit_name = unit_name
        self.unit_kind = unit_kind
        self.data: List[Tuple[str, int, bool]] = []
        self.imports: List[str] = []
        self.revelations: List[Tuple[str, str, str]] = []
        self.init: Optional[str] = None
        self.digest = 0

    def build(self, code: CodeBuffer) -> RelocatableObject:
        symbols = [Symbol(name, 'text', start, 'proc', size, exported)
                   for name, start, size, exported in code.procs]
        data = bytearray()
        for name, value, exported in self.data:
            symbols.append(Symbol(name, 'data', len(data), 'data', WORD, exported))
            data += struct.pack('<q', wrap_int64(value))
        defined = {s.name for s in symbols}
        for name, kind in code.refs.items():
            if name not in defined:
                symbols.append(Symbol(name, 'extern', 0, kind, 0, False))
        return RelocatableObject(
            unit_name=self.unit_name, unit_kind=self.unit_kind, text=bytes(code.text), data=bytes(data),
            init=self.init, symbols=tuple(symbols), relocations=tuple(code.relocations),
            debug_lines=tuple(code.debug_lines), imports_digest=self.digest,
            imports=tuple(self.imports), revelations=tuple(self.revelations))


def _builder_for(unit: LoweredUnit) -> ObjectBuilder:
    builder = ObjectBuilder(unit.unit_name, unit.kind)
    builder.data = [(d.symbol, d.value, d.exported) for d in unit.data]
    builder.imports = list(unit.imports)
    builder.revelations = list(unit.revelations)
    builder.init = unit.init_symbol
    builder.digest = imports_digest(unit.used)
    return builder


def compile_unit(unit: LoweredUnit) -> RelocatableObject:
    """Integrated backend: IR straight to a relocatable object."""
    code = CodeBuffer()
    generate(unit, code)
    return _builder_for(unit).build(code)


# ---------------------------------------------------------------------------
# Assembler backend

def generate_assembly(unit: LoweredUnit) -> str:
    """First step of the two-step backend: render the unit as assembly text."""
    asm = AsmBuffer()
    asm.lines.append(f".unit {unit.unit_name} {unit.kind}")
    asm.lines.append(f".digest {imports_digest(unit.used)}")
    for name in unit.imports:
        asm.lines.append(f".import {name}")
    for opaque, concrete, site in unit.revelations:
        asm.lines.append(f".reveal {opaque} {concrete} {site}")
    for item in unit.data:
        asm.lines.append(f".data {item.symbol} {item.value} {'exported' if item.exported else 'local'}")
    if unit.init_symbol:
        asm.lines.append(f".init {unit.init_symbol}")
    generate(unit, asm)
    return '\n'.join(asm.lines) + '\n'


def assemble(text: str) -> RelocatableObject:
    """Second step: parse assembly text back into a relocatable object."""
    code = CodeBuffer()
    builder = None
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.split(';', 1)[0].strip()
        if not line:
            continue
        try:
            if line.startswith('.'):
                directive, *fields = line.split()
                if directive == '.unit':
                    builder = ObjectBuilder(fields[0], fields[1])
                    continue
                if builder is None:
                    raise AssemblerError(line_no, 'missing .unit directive')
                if directive == '.digest':
                    builder.digest = int(fields[0])
                elif directive == '.import':
                    builder.imports.append(fields[0])
                elif directive == '.reveal':
                    builder.revelations.append((fields[0], fields[1], fields[2]))
                elif directive == '.data':
                    builder.data.append((fields[0], int(fields[1]), fields[2] == 'exported'))
                elif directive == '.init':
                    builder.init = fields[0]
                elif directive == '.proc':
                    code.begin_symbol(fields[0], fields[1] == 'exported')
                elif directive == '.endproc':
                    code.end_symbol(fields[0])
                elif directive == '.line':
                    code.line(int(fields[0]))
                else:
                    raise AssemblerError(line_no, f"unknown directive {directive}")
                continue
            mnemonic, _, rest = line.partition(' ')
            if mnemonic not in isa.OPCODES:
                raise AssemblerError(line_no, f"unknown mnemonic {mnemonic}")
            operands = [isa.parse_operand(p, mnemonic) for p in _split_asm_operands(rest)]
            dst, src = isa.split_operands(mnemonic, operands)
            code.instr(mnemonic, dst, src)
        except (IndexError, ValueError) as e:
            raise AssemblerError(line_no, str(e)) from e
    if builder is None:
        raise AssemblerError(0, 'empty assembly')
    return builder.build(code)


def _split_asm_operands(rest: str) -> List[str]:
    rest = rest.strip()
    return [p.strip() for p in rest.split(',')] if rest else []
