#!/usr/bin/env python3
"""
Tests for the machine: stub binding, traps and load addresses.
"""
from context import *

import os
import random
import sys

import pytest

from oracles import program_entries, random_program, scale, write_files
from src.toolchain import isa
from src.toolchain.cacheserver import build_local
from src.toolchain.isa import IMM, REG, REL, Operand
from src.toolchain.linker import ExecutableImage, TypeRepo, read_image
from src.toolchain.vm import VM, Trap, load_and_run


def built_program(tmp_path, seed):
    rng = random.Random(seed)
    root = write_files(tmp_path, random_program(rng))
    report = build_local(root)
    assert not report.failed, report.error
    return root, read_image(os.path.join(root, 'build', 'Prog.m3x')), rng


def hand_image(*instructions):
    text = b''.join(isa.encode(*ins) for ins in instructions)
    return ExecutableImage(text=text, data=b'', slots=(), init_order=(), init_symbols=(),
                           type_repo=TypeRepo(), symbols={'X.F': ('text', 0)})


@pytest.mark.parametrize('seed', range(scale(200)))
def test_lazy_and_eager_binding_agree(tmp_path, seed):
    root, image, rng = built_program(tmp_path, seed)
    calls = [(f"Prog.{name}", [rng.randint(-1000, 1000) for _ in range(n)]) for name, n in program_entries(root)]
    results = []
    for bind_now in (False, True):
        vm = VM(image, bind_now=bind_now)
        vm.run_initializers()
        results.append([vm.call(symbol, args) for symbol, args in calls])
    assert results[0] == results[1]


@pytest.mark.parametrize('seed', range(scale(200)))
def test_only_called_procedures_are_resolved(tmp_path, seed):
    root, image, _ = built_program(tmp_path, seed)
    vm = VM(image)
    vm.run_initializers()
    for name, n in program_entries(root):
        vm.call(f"Prog.{name}", [1] * n)
    resolved = vm.stats.resolutions
    assert all(count == 1 for count in resolved.values())
    assert not any(name.startswith('Lib.U') for name in resolved)
    assert set(resolved) <= {s.name for s in image.slots if s.kind == 'proc'}

    eager = VM(image, bind_now=True)
    assert 'Lib.U0' in eager.stats.resolutions


def test_results_do_not_depend_on_load_address(tmp_path):
    root, image, _ = built_program(tmp_path, 17)
    entries = program_entries(root)
    seen = set()
    for base in (8, 0x10000, 0x7f0000, 0x123456788):
        vm = VM(image, base=base)
        vm.run_initializers()
        seen.add(tuple(vm.call(f"Prog.{name}", [5] * n) for name, n in entries))
    assert len(seen) == 1


def test_load_base_must_be_word_aligned():
    image = hand_image(('RET',))
    for base in (0, 4, -8):
        with pytest.raises(ValueError):
            VM(image, base=base)


def test_runaway_recursion_overflows_the_stack(tmp_path):
    root = write_files(tmp_path, {
        'm3package.toml': 'name = "deep"\nprogram = "Deep"\nentry = "Down"\n',
        'Deep.m3': 'MODULE Deep;\nPROCEDURE Down(n: INTEGER): INTEGER =\n  BEGIN\n    RETURN Down(n - 1) + 1;\n'
                   '  END Down;\nEND Deep.\n',
    })
    assert not build_local(root).failed
    image = read_image(os.path.join(root, 'build', 'Deep.m3x'))
    with pytest.raises(Trap) as exc:
        load_and_run(image, 'Down', [10], stack_words=512)
    assert exc.value.kind == 'stack-overflow'


def test_calling_a_missing_procedure_traps(tmp_path):
    root = write_files(tmp_path, {
        'm3package.toml': 'name = "gap"\nprogram = "Main"\nentry = "Run"\n',
        'Lib.i3': 'INTERFACE Lib;\nPROCEDURE Missing(): INTEGER;\nEND Lib.\n',
        'Main.m3': 'MODULE Main;\nIMPORT Lib;\nPROCEDURE Run(): INTEGER =\n  BEGIN\n    RETURN 2;\n  END Run;\n'
                   'PROCEDURE Never(): INTEGER =\n  BEGIN\n    RETURN Lib.Missing();\n  END Never;\nEND Main.\n',
    })
    assert not build_local(root, ['--allow-unresolved']).failed
    image = read_image(os.path.join(root, 'build', 'Main.m3x'))
    vm = VM(image, bind_now=True)
    assert vm.call('Main.Run') == 2
    with pytest.raises(Trap) as exc:
        vm.call('Main.Never')
    assert exc.value.kind == 'unresolvable-stub'
    assert exc.value.detail == 'Lib.Missing'


def test_bad_opcode():
    image = ExecutableImage(text=b'\xee\x00', data=b'', slots=(), init_order=(), init_symbols=(),
                            type_repo=TypeRepo(), symbols={'X.F': ('text', 0)})
    with pytest.raises(Trap) as exc:
        VM(image).call('X.F')
    assert exc.value.kind == 'bad-opcode'


def test_jump_outside_text():
    image = hand_image(('CALL', isa.NO_OPERAND, Operand(REL, 4096)))
    with pytest.raises(Trap) as exc:
        VM(image).call('X.F')
    assert exc.value.kind == 'bad-address'


def test_clobbered_callee_save_register():
    image = hand_image(('MOV', Operand(REG, isa.R3), Operand(IMM, 7)), ('RET',))
    with pytest.raises(Trap) as exc:
        VM(image).call('X.F')
    assert exc.value.kind == 'callee-save-violation'


def test_data_symbols_are_not_callable(tmp_path):
    root, image, _ = built_program(tmp_path, 3)
    vm = VM(image)
    with pytest.raises(Trap) as exc:
        vm.call('Prog.g')
    assert exc.value.kind == 'bad-address'
    with pytest.raises(KeyError):
        vm.read_global('Prog.H0')


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
