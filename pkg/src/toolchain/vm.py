"""Interpreter for linked images.

The image is loaded at a base address into a flat memory: text, then data,
then the stack. Data slots of the indirection table are bound at load;
procedure slots stay stubs until the first CALLI through them resolves the
target (or all of them up front with bind_now).
"""
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

from src.toolchain import isa
from src.toolchain.isa import FP, IMM, REG, SP, WORD, DecodeError
from src.toolchain.linker import ExecutableImage
from src.utils.config import config
from src.utils.helpers import wrap_int64

logger = logging.getLogger()

DEFAULT_BASE = 0x10000
HALT = 0
TRAP_KINDS = ('bad-opcode', 'stack-overflow', 'callee-save-violation', 'unresolvable-stub', 'bad-address')


class Trap(Exception):
    """Execution stopped by the machine."""
    def __init__(self, kind, detail=''):
        self.kind = kind
        self.detail = detail
        super().__init__(f"trap {kind}: {detail}" if detail else f"trap {kind}")


@dataclass
class RunStats:
    instructions: int = 0
    calls: int = 0
    resolutions: Counter = field(default_factory=Counter)


@dataclass(frozen=True)
class _Saved:
    regs: tuple
    sp: int


class VM:

    def __init__(self, image: ExecutableImage, base: int = DEFAULT_BASE, stack_words: Optional[int] = None,
                 bind_now: bool = False):
        if base <= HALT or base % WORD:
            raise ValueError(f"load base must be a positive multiple of {WORD}")
        self.image = image
        self.base = base
        self.text_base = base
        self.data_base = base + _align(len(image.text))
        stack_words = stack_words or config.get('vm.stack_words', 65536)
        self.stack_limit = self.data_base + _align(len(image.data))
        self.stack_top = self.stack_limit + stack_words * WORD
        self.memory = bytearray(self.stack_top - base)
        self.memory[0:len(image.text)] = image.text
        offset = self.data_base - base
        self.memory[offset:offset + len(image.data)] = image.data
        self.regs = [0] * 8
        self.pc = HALT
        self.stats = RunStats()
        self.shadow: List[_Saved] = []
        self._decoded: Dict[int, isa.Instruction] = {}
        self.slots: List[Optional[int]] = []
        for slot in image.slots:
            if slot.kind == 'data':
                self.slots.append(self.data_base + slot.target)
            else:
                self.slots.append(None)
        if bind_now:
            for i, slot in enumerate(image.slots):
                if slot.kind == 'proc' and slot.target is not None:
                    self.resolve_stub(i)
        self.initialized: List[str] = []

    # memory
    def _index(self, addr: int, size: int = WORD) -> int:
        i = addr - self.base
        if i < 0 or i + size > len(self.memory):
            raise Trap('bad-address', f"{addr:#x}")
        return i

    def read(self, addr: int) -> int:
        return struct.unpack_from('<q', self.memory, self._index(addr))[0]

    def write(self, addr: int, value: int) -> None:
        struct.pack_into('<q', self.memory, self._index(addr), wrap_int64(value))

    def push(self, value: int) -> None:
        sp = self.regs[SP] - WORD
        if sp < self.stack_limit:
            raise Trap('stack-overflow', f"SP {sp:#x}")
        self.regs[SP] = sp
        self.write(sp, value)

    def pop(self) -> int:
        value = self.read(self.regs[SP])
        self.regs[SP] += WORD
        return value

    # binding
    def resolve_stub(self, index: int) -> int:
        """Bind a procedure slot on first use and count the resolution."""
        slot = self.image.slots[index]
        if slot.kind != 'proc':
            raise Trap('bad-address', f"slot {index} holds data")
        if slot.target is None:
            raise Trap('unresolvable-stub', slot.name)
        addr = self.text_base + slot.target
        self.slots[index] = addr
        self.stats.resolutions[slot.name] += 1
        logger.debug(f"Resolved stub {slot.name} -> {addr:#x}")
        return addr

    def _slot_data_addr(self, index: int) -> int:
        if index >= len(self.slots) or self.image.slots[index].kind != 'data':
            raise Trap('bad-address', f"slot {index} is not a data slot")
        return self.slots[index]

    # operands
    def _get(self, op: isa.Operand) -> int:
        if op.kind == REG:
            return self.regs[op.value]
        if op.kind == IMM:
            return op.value
        if op.kind == isa.FRAME:
            return self.read(self.regs[FP] + op.value)
        return self.read(self._slot_data_addr(op.value))

    def _set(self, op: isa.Operand, value: int) -> None:
        value = wrap_int64(value)
        if op.kind == REG:
            self.regs[op.value] = value
        elif op.kind == isa.FRAME:
            self.write(self.regs[FP] + op.value, value)
        else:
            self.write(self._slot_data_addr(op.value), value)

    def _fetch(self, pc: int) -> isa.Instruction:
        ins = self._decoded.get(pc)
        if ins is None:
            i = pc - self.text_base
            if not 0 <= i < len(self.image.text):
                raise Trap('bad-address', f"PC {pc:#x} outside text")
            try:
                ins = isa.decode(self.image.text, i)
            except DecodeError as e:
                raise Trap('bad-opcode', str(e)) from None
            self._decoded[pc] = ins
        return ins

    # control
    def _enter(self, target: int, return_to: int) -> None:
        self.shadow.append(_Saved(tuple(self.regs[3:7]), self.regs[SP]))
        self.push(return_to)
        self.pc = target
        self.stats.calls += 1

    def op_PUSH(self, ins):
        self.push(self._get(ins.src))

    def op_POP(self, ins):
        self._set(ins.dst, self.pop())

    def op_MOV(self, ins):
        self._set(ins.dst, self._get(ins.src))

    def op_ADD(self, ins):
        self._set(ins.dst, self._get(ins.dst) + self._get(ins.src))

    def op_SUB(self, ins):
        self._set(ins.dst, self._get(ins.dst) - self._get(ins.src))

    def op_MUL(self, ins):
        self._set(ins.dst, self._get(ins.dst) * self._get(ins.src))

    def op_CALL(self, ins):
        self._enter(self.pc + ins.src.value, self.pc)

    def op_CALLI(self, ins):
        index = ins.src.value
        if index >= len(self.slots):
            raise Trap('bad-address', f"slot {index}")
        target = self.slots[index]
        if target is None:
            target = self.resolve_stub(index)
        self._enter(target, self.pc)

    def op_LEAVE(self, ins):
        self.regs[SP] = self.regs[FP]
        self.regs[FP] = self.pop()

    def op_RET(self, ins):
        self.pc = self.pop()
        saved = self.shadow.pop()
        if tuple(self.regs[3:7]) != saved.regs or self.regs[SP] != saved.sp:
            raise Trap('callee-save-violation', f"returning to {self.pc:#x}")

    def run_op(self, ins: isa.Instruction) -> None:
        getattr(self, f"op_{ins.mnemonic}")(ins)

    def call(self, symbol: str, args: Sequence[int] = ()) -> int:
        """Call a procedure by symbol with integer arguments; returns R0."""
        section, offset = self.image.symbols[symbol]
        if section != 'text':
            raise Trap('bad-address', f"{symbol} is not a procedure")
        if not self.shadow:
            self.regs[SP] = self.stack_top
            self.regs[FP] = self.stack_top
        for value in reversed(list(args)):
            self.push(wrap_int64(value))
        depth = len(self.shadow)
        self._enter(self.text_base + offset, HALT)
        while len(self.shadow) > depth:
            ins = self._fetch(self.pc)
            self.pc += ins.size
            self.stats.instructions += 1
            self.run_op(ins)
        self.regs[SP] += WORD * len(args)
        return self.regs[isa.R0]

    def run_initializers(self) -> None:
        for symbol in self.image.init_symbols:
            if symbol in self.initialized:
                continue
            self.call(symbol)
            self.initialized.append(symbol)

    def read_global(self, symbol: str) -> int:
        section, offset = self.image.symbols[symbol]
        if section != 'data':
            raise KeyError(symbol)
        return self.read(self.data_base + offset)


def _align(n: int) -> int:
    return n + (-n % WORD)


def load_and_run(image: ExecutableImage, entry: str, args: Sequence[int] = (), base: int = DEFAULT_BASE,
                 bind_now: bool = False, stack_words: Optional[int] = None) -> int:
    """Load the image, run module initializers in order, then the entry procedure."""
    vm = VM(image, base=base, stack_words=stack_words, bind_now=bind_now)
    vm.run_initializers()
    return vm.call(image.find_entry(entry), args)
