"""Abstract register machine: registers, instruction encoding, disassembly.

Every instruction is an opcode byte, a mode byte `(dst_kind << 4) | src_kind`,
then the destination operand bytes and the source operand bytes, little-endian.
See docs/isa.md.
"""
import re
import struct
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

WORD = 8

R0, R1, R2, R3, R4, R5, FP, SP = range(8)
REG_NAMES = ('R0', 'R1', 'R2', 'R3', 'R4', 'R5', 'FP', 'SP')
REG_BY_NAME = {name: i for i, name in enumerate(REG_NAMES)}

RESULT_REG = R0
SCRATCH_REGS = (R1, R2)
CALLER_SAVE = (R0, R1, R2)
CALLEE_SAVE = (R3, R4, R5)

# operand kinds
NONE, REG, IMM, FRAME, SLOT, REL = range(6)
OPERAND_SIZE = {NONE: 0, REG: 1, IMM: 8, FRAME: 4, SLOT: 4, REL: 4}
_OPERAND_FMT = {REG: '<B', IMM: '<q', FRAME: '<i', SLOT: '<I', REL: '<i'}

OPCODES = {
    'PUSH': 0x01, 'POP': 0x02, 'MOV': 0x03, 'ADD': 0x04, 'SUB': 0x05,
    'MUL': 0x06, 'CALL': 0x07, 'CALLI': 0x08, 'LEAVE': 0x09, 'RET': 0x0A,
}
MNEMONICS = {code: name for name, code in OPCODES.items()}

# legal (dst_kind, src_kind) per mnemonic
_VALUE_KINDS = (REG, IMM, FRAME, SLOT)
LEGAL_MODES = {
    'PUSH': {(NONE, k) for k in _VALUE_KINDS},
    'POP': {(REG, NONE)},
    'MOV': {(REG, k) for k in _VALUE_KINDS} | {(FRAME, REG), (FRAME, IMM), (SLOT, REG), (SLOT, IMM)},
    'ADD': {(REG, k) for k in _VALUE_KINDS},
    'SUB': {(REG, k) for k in _VALUE_KINDS},
    'MUL': {(REG, k) for k in _VALUE_KINDS},
    'CALL': {(NONE, REL)},
    'CALLI': {(NONE, SLOT)},
    'LEAVE': {(NONE, NONE)},
    'RET': {(NONE, NONE)},
}


class DecodeError(Exception):
    """Bytes at an offset are not a valid instruction."""
    def __init__(self, offset, reason):
        self.offset = offset
        self.reason = reason
        super().__init__(f"bad instruction at {offset:#x}: {reason}")


@dataclass(frozen=True)
class Operand:
    kind: int
    value: object = 0       # register number, immediate, displacement, slot index or symbol name

    @staticmethod
    def reg(r):
        return Operand(REG, r)

    @staticmethod
    def imm(k):
        return Operand(IMM, k)

    @staticmethod
    def frame(disp):
        return Operand(FRAME, disp)


NO_OPERAND = Operand(NONE, 0)


@dataclass(frozen=True)
class Instruction:
    mnemonic: str
    dst: Operand = NO_OPERAND
    src: Operand = NO_OPERAND
    offset: int = 0
    size: int = 0


def instruction_size(dst: Operand, src: Operand) -> int:
    return 2 + OPERAND_SIZE[dst.kind] + OPERAND_SIZE[src.kind]


def operand_field_offset(dst: Operand) -> int:
    """Offset of the source operand bytes inside an instruction."""
    return 2 + OPERAND_SIZE[dst.kind]


def encode(mnemonic: str, dst: Operand = NO_OPERAND, src: Operand = NO_OPERAND) -> bytes:
    """Encode one instruction; symbolic slot/rel operands encode as zero for later patching."""
    if (dst.kind, src.kind) not in LEGAL_MODES[mnemonic]:
        raise ValueError(f"illegal operands for {mnemonic}: {dst}, {src}")
    out = bytearray((OPCODES[mnemonic], (dst.kind << 4) | src.kind))
    for op in (dst, src):
        if op.kind == NONE:
            continue
        value = op.value if isinstance(op.value, int) else 0
        out += struct.pack(_OPERAND_FMT[op.kind], value)
    return bytes(out)


def decode(code: bytes, offset: int) -> Instruction:
    """Decode the instruction at `offset`; raises DecodeError."""
    if offset + 2 > len(code):
        raise DecodeError(offset, 'truncated instruction')
    opcode, mode = code[offset], code[offset + 1]
    mnemonic = MNEMONICS.get(opcode)
    if mnemonic is None:
        raise DecodeError(offset, f"unknown opcode {opcode:#04x}")
    dst_kind, src_kind = mode >> 4, mode & 0x0F
    if (dst_kind, src_kind) not in LEGAL_MODES[mnemonic]:
        raise DecodeError(offset, f"illegal mode {mode:#04x} for {mnemonic}")
    pos = offset + 2
    operands = []
    for kind in (dst_kind, src_kind):
        size = OPERAND_SIZE[kind]
        if kind == NONE:
            operands.append(NO_OPERAND)
            continue
        if pos + size > len(code):
            raise DecodeError(offset, 'truncated operand')
        value = struct.unpack_from(_OPERAND_FMT[kind], code, pos)[0]
        if kind == REG and value >= len(REG_NAMES):
            raise DecodeError(offset, f"no register {value}")
        operands.append(Operand(kind, value))
        pos += size
    return Instruction(mnemonic, operands[0], operands[1], offset, pos - offset)


def iter_instructions(code: bytes) -> Iterator[Instruction]:
    offset = 0
    while offset < len(code):
        ins = decode(code, offset)
        yield ins
        offset += ins.size


def format_operand(op: Operand, symbol: Optional[str] = None, at: int = 0, mnemonic: str = '') -> str:
    if op.kind == REG:
        return REG_NAMES[op.value]
    if op.kind == IMM:
        return f"${op.value}"
    if op.kind == FRAME:
        return f"[FP{op.value:+d}]"
    if op.kind == SLOT:
        target = f"@{symbol}" if symbol else f"slot {op.value}"
        return target if mnemonic == 'CALLI' else f"[{target}]"
    if op.kind == REL:
        return symbol if symbol else f"{at + op.value:04x}"
    return ''


def format_instruction(ins: Instruction, relocs: Optional[Dict[int, str]] = None) -> str:
    """`mnemonic operands` with symbols taken from relocations at operand offsets."""
    relocs = relocs or {}
    parts = []
    src_at = ins.offset + operand_field_offset(ins.dst)
    end = ins.offset + ins.size
    for op, field_at in ((ins.dst, ins.offset + 2), (ins.src, src_at)):
        if op.kind != NONE:
            parts.append(format_operand(op, relocs.get(field_at), end, ins.mnemonic))
    return ins.mnemonic + (' ' + ', '.join(parts) if parts else '')


def disassemble(code: bytes, relocs: Optional[Dict[int, str]] = None) -> List[str]:
    """Stable listing, one line per instruction: `offset: bytes  mnemonic operands`."""
    lines = []
    for ins in iter_instructions(code):
        raw = ' '.join(f"{b:02x}" for b in code[ins.offset:ins.offset + ins.size])
        lines.append(f"{ins.offset:04x}: {raw}  {format_instruction(ins, relocs)}")
    return lines


_FRAME_RE = re.compile(r'^\[FP([+-]\d+)\]$')


def parse_operand(text: str, mnemonic: str) -> Operand:
    """Inverse of format_operand for assembler input; symbols stay symbolic."""
    text = text.strip()
    if text in REG_BY_NAME:
        return Operand(REG, REG_BY_NAME[text])
    if text.startswith('$'):
        return Operand(IMM, int(text[1:]))
    m = _FRAME_RE.match(text)
    if m:
        return Operand(FRAME, int(m.group(1)))
    if text.startswith('[@') and text.endswith(']'):
        return Operand(SLOT, text[2:-1])
    if text.startswith('@') and mnemonic == 'CALLI':
        return Operand(SLOT, text[1:])
    if mnemonic == 'CALL':
        return Operand(REL, text)
    raise ValueError(f"cannot parse operand {text!r} for {mnemonic}")


def split_operands(mnemonic: str, operands: List[Operand]) -> Tuple[Operand, Operand]:
    """Place parsed operands into (dst, src) slots for the mnemonic."""
    if mnemonic in ('PUSH', 'CALL', 'CALLI'):
        return NO_OPERAND, operands[0]
    if mnemonic == 'POP':
        return operands[0], NO_OPERAND
    if mnemonic in ('LEAVE', 'RET'):
        return NO_OPERAND, NO_OPERAND
    return operands[0], operands[1]
