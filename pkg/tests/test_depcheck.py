#!/usr/bin/env python3
"""
Tests for smart recompilation: modification detection, dirty sets and the
persisted build state.
"""
from context import *

import collections
import logging
import os
import random
import shutil
import sys

import atomicwrites
import pytest

from oracles import (
    EDIT_KINDS, apply_random_edit, apply_structural_edit, bump_mtime, copy_fixture, oracle_dirty, rewrite, scale,
    write_files,
)
from src.toolchain.cacheserver import build_local
from src.toolchain.depcheck import (
    BuildState, PersistError, StateCorrupt, UnitState, decode_state, detect_modified, encode_state,
    load_build_state, record_build_state, state_path,
)
from src.toolchain.frontend import SourceUnit
from src.toolchain.genpkg import GenParams, gen_package

logger = logging.getLogger()


def state_of(package_dir):
    return load_build_state(state_path(os.path.join(package_dir, 'build')))


@pytest.fixture
def six(tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    report = build_local(root)
    assert not report.failed, report.error
    return root


def unit(name, text_hash, mtime, kind='interface'):
    return SourceUnit(path=f"/pkg/{name}", kind=kind, unit_name=name.split('.')[0], imports=(),
                      text_hash=text_hash, mtime=mtime)


def test_cold_build_compiles_everything(tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    report = build_local(root)
    assert report.units_compiled == 6
    assert report.interfaces_reused == 0
    assert set(state_of(root).units) == {'A.i3', 'B.i3', 'C.i3', 'D.i3', 'E.i3', 'P.m3'}


def test_rebuild_without_changes_compiles_nothing(six):
    report = build_local(six)
    assert report.units_compiled == 0
    assert report.dirty == {}
    assert not report.linked


def test_used_declaration_edit_stops_at_unaffected_importers(six):
    rewrite(os.path.join(six, 'E.i3'), 'Base = 10', 'Base = 11')
    report = build_local(six)
    assert set(report.dirty) == {'E.i3', 'B.i3'}
    assert report.dirty['E.i3'] == ['source-modified']
    assert report.dirty['B.i3'] == ['used-decl-changed(E.Base)']
    assert set(report.file_grain) == {'E.i3', 'B.i3', 'A.i3', 'C.i3', 'P.m3'}


def test_changed_declaration_reaches_the_program_that_uses_it(six):
    rewrite(os.path.join(six, 'P.m3'), 'C.Span;', 'C.Span + B.FromE;')
    assert build_local(six).compiled == ['P.m3']
    rewrite(os.path.join(six, 'E.i3'), 'Base = 10', 'Base = 11')
    report = build_local(six)
    assert set(report.dirty) == {'E.i3', 'B.i3', 'P.m3'}
    assert report.dirty['P.m3'] == ['used-decl-changed(B.FromE)']


def test_unused_declaration_only_recompiles_its_own_unit(six):
    rewrite(os.path.join(six, 'E.i3'), 'END E.', 'CONST Extra = 1;\nEND E.')
    report = build_local(six)
    assert set(report.dirty) == {'E.i3'}
    assert report.linked


def test_touch_without_content_change(six):
    before = state_of(six).units['D.i3']
    bump_mtime(os.path.join(six, 'D.i3'))
    report = build_local(six)
    assert report.units_compiled == 0
    after = state_of(six).units['D.i3']
    assert after.text_hash == before.text_hash
    assert after.mtime == os.stat(os.path.join(six, 'D.i3')).st_mtime_ns


def test_missing_object_is_rebuilt(six):
    os.remove(os.path.join(six, 'build', 'C.i3.m3o'))
    report = build_local(six)
    assert report.dirty == {'C.i3': ['missing-object']}


def test_corrupt_state_means_full_rebuild(six):
    path = state_path(os.path.join(six, 'build'))
    with open(path, 'r+b') as f:
        f.write(b'XXXX')
    report = build_local(six)
    assert report.units_compiled == 6
    assert not report.failed


def test_failed_build_keeps_previous_state(six):
    path = state_path(os.path.join(six, 'build'))
    with open(path, 'rb') as f:
        saved = f.read()
    rewrite(os.path.join(six, 'E.i3'), 'Base = 10;', 'Base = ;')
    report = build_local(six)
    assert report.failed
    with open(path, 'rb') as f:
        assert f.read() == saved


def test_persist_failure_is_reported(six, monkeypatch):
    path = state_path(os.path.join(six, 'build'))
    with open(path, 'rb') as f:
        saved = f.read()

    real_replace = atomicwrites.replace_atomic

    def refuse_state(src, dst):
        if dst.endswith('.m3state'):
            raise OSError('disk full')
        return real_replace(src, dst)

    monkeypatch.setattr(atomicwrites, 'replace_atomic', refuse_state)
    rewrite(os.path.join(six, 'D.i3'), 'Scale = 3', 'Scale = 4')
    report = build_local(six)
    assert report.failed
    assert 'PersistError' in report.error
    with open(path, 'rb') as f:
        assert f.read() == saved
    with pytest.raises(PersistError):
        record_build_state(BuildState(), [], {}, path)


def test_modification_needs_both_mtime_and_hash():
    prev = BuildState({'A.i3': UnitState(111, 1_000), 'B.i3': UnitState(222, 1_000), 'C.i3': UnitState(333, 1_000)})
    units = [
        unit('A.i3', 111, 2_000),       # touched only
        unit('B.i3', 999, 1_000),       # same mtime
        unit('C.i3', 999, 2_000),       # really edited
        unit('N.i3', 444, 2_000),       # new
    ]
    modified, deleted = detect_modified(units, prev)
    assert modified == {'C.i3', 'N.i3'}
    assert deleted == set()
    modified, deleted = detect_modified(units[:1], prev)
    assert deleted == {'B.i3', 'C.i3'}


def test_empty_previous_state_marks_everything():
    units = [unit('A.i3', 1, 1), unit('M.m3', 2, 2, kind='module')]
    assert detect_modified(units, BuildState()) == ({'A.i3', 'M.m3'}, set())


def test_state_codec():
    state = BuildState({
        'B.i3': UnitState(0xdeadbeefcafef00d, 1_700_000_000_123_456_789, {('D', 'Scale'): 7, ('E', 'Base'): 2 ** 64 - 1}),
        'P.m3': UnitState(5, 0),
    })
    data = encode_state(state)
    assert data[:4] == b'M3S1'
    assert decode_state(data) == state
    with pytest.raises(StateCorrupt):
        decode_state(data[:-3])
    with pytest.raises(StateCorrupt):
        decode_state(data + b'\x00')


def test_dirty_set_matches_brute_force_oracle(tmp_path):
    trials = scale(1000)
    rng = random.Random(20240611)
    kinds = collections.Counter()
    done = 0
    seed = 0
    while done < trials:
        package = gen_package(GenParams(units=rng.randint(3, 8), decls_per_unit=rng.randint(1, 4),
                                        fanout=rng.randint(1, 3), modules=rng.random() < 0.7),
                              seed, str(tmp_path / f"pkg{seed}"))
        seed += 1
        assert not build_local(package.root).failed
        for _ in range(min(10, trials - done)):
            kinds[apply_structural_edit(package, rng)] += 1
            expected = oracle_dirty(package.root, state_of(package.root))
            report = build_local(package.root)
            assert not report.failed, report.error
            assert set(report.dirty) == expected
            assert set(report.dirty) <= set(report.file_grain)
            done += 1
    logger.info(f"{done} dirty-set trials over {seed} packages: {dict(kinds)}")
    if trials >= 500:
        assert set(kinds) == set(EDIT_KINDS)


def test_exporting_a_private_procedure_dirties_its_module(tmp_path):
    root = write_files(tmp_path / 'pkg', {
        'm3package.toml': 'name = "export"\nprogram = "P"\nentry = "Run"\n',
        'X.i3': 'INTERFACE X; PROCEDURE G(): INTEGER; END X.\n',
        'X.m3': ('MODULE X;\n'
                 'PROCEDURE G(): INTEGER = BEGIN RETURN 1; END G;\n'
                 'PROCEDURE F(a: INTEGER): INTEGER = BEGIN RETURN a; END F;\n'
                 'END X.\n'),
        'P.m3': 'MODULE P; IMPORT X; PROCEDURE Run(): INTEGER = BEGIN RETURN X.G(); END Run; END P.\n',
    })
    assert not build_local(root).failed
    rewrite(os.path.join(root, 'X.i3'), 'END X.', 'PROCEDURE F(a, b: INTEGER): INTEGER;\nEND X.')
    report = build_local(root)
    assert 'X.m3' in report.dirty
    assert report.failed and 'TypeCheckError' in report.error
    assert 'does not match its signature' in report.error

    shutil.rmtree(os.path.join(root, 'build'))
    cold = build_local(root)
    assert cold.failed and 'does not match its signature' in cold.error


def test_fine_grain_never_exceeds_file_grain(tmp_path):
    rng = random.Random(7)
    package = gen_package(GenParams(units=12, fanout=2), 3, str(tmp_path / 'pkg'))
    build_local(package.root)
    for _ in range(scale(30)):
        apply_random_edit(package, rng)
        report = build_local(package.root)
        assert set(report.compiled) <= set(report.file_grain)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
