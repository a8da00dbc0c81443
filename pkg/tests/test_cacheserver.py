#!/usr/bin/env python3
"""
Tests for the interface cache, the library shortcut and the compilation server.
"""
from context import *

import json
import logging
import os
import random
import shutil
import struct
import sys
import threading

import pytest

from oracles import apply_random_edit, bump_mtime, copy_fixture, rewrite, scale, write_files
from src.toolchain import cacheserver, protocol
from src.toolchain.cacheserver import (
    CompilationServer, CompileRequest, InterfaceCache, PhaseReport, PhaseTimer, build_local, client_request,
    compile_package, shutdown_server,
)
from src.toolchain.genpkg import GenParams, gen_package
from src.toolchain.linker import read_image
from src.toolchain.vm import load_and_run

logger = logging.getLogger()

DIAMOND = {
    'm3package.toml': 'name = "diamond"\nprogram = "Top"\nentry = "Run"\n',
    'Base.i3': 'INTERFACE Base; CONST One = 1; END Base.\n',
    'Left.i3': 'INTERFACE Left; IMPORT Base; CONST L = Base.One + 1; END Left.\n',
    'Right.i3': 'INTERFACE Right; IMPORT Base; CONST R = Base.One + 2; END Right.\n',
    'Top.m3': ('MODULE Top; IMPORT Left, Right;\n'
               'PROCEDURE Run(): INTEGER = BEGIN RETURN Left.L * Right.R; END Run;\n'
               'END Top.\n'),
}


def build(cache, package_dir, options=()):
    report = compile_package(CompileRequest(package_dir, list(options)), cache)
    assert not report.failed, report.error
    return report


def build_outputs(package_dir):
    """Object and image bytes of a package; the state file is excluded."""
    out = {}
    build_dir = os.path.join(package_dir, 'build')
    for name in sorted(os.listdir(build_dir)):
        if name.endswith(('.m3o', '.m3x')):
            with open(os.path.join(build_dir, name), 'rb') as f:
                out[name] = f.read()
    return out


@pytest.fixture
def server(tmp_path):
    sock = str(tmp_path / 's.sock')
    srv = CompilationServer(sock, InterfaceCache())
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    assert srv.ready.wait(10)
    yield srv
    if thread.is_alive():
        shutdown_server(sock, attempts=5)
        thread.join(10)


# ---------------------------------------------------------------------------
# Interface cache

def test_phase_timer_charges_time_exclusively():
    ticks = iter([0.0, 1.0, 3.0, 6.0, 10.0, 15.0])
    timer = PhaseTimer(clock=lambda: next(ticks))
    with timer.phase('frontend'):
        with timer.phase('codegen'):
            pass
    total = timer.stop()
    assert timer.seconds['frontend'] == pytest.approx(2.0 + 4.0)
    assert timer.seconds['codegen'] == pytest.approx(3.0)
    assert timer.seconds['other'] == pytest.approx(1.0 + 5.0)
    assert total == pytest.approx(sum(timer.seconds.values()))


def test_warm_build_reuses_interfaces(tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    cache = InterfaceCache()
    first = build(cache, root)
    assert first.interfaces_parsed == 5 and first.interfaces_reused == 0
    second = build(cache, root)
    assert second.interfaces_parsed == 0 and second.interfaces_reused == 5
    assert second.units_compiled == 0


def test_diamond_is_validated_once(tmp_path):
    root = write_files(tmp_path / 'diamond', DIAMOND)
    cache = InterfaceCache()
    build(cache, root)
    build(cache, root)
    assert cache.visit_counts['Base'] == 1
    assert max(cache.visit_counts.values()) == 1


def test_edit_evicts_dependent_entries(tmp_path):
    root = write_files(tmp_path / 'diamond', DIAMOND)
    cache = InterfaceCache()
    build(cache, root)
    rewrite(os.path.join(root, 'Base.i3'), 'One = 1', 'One = 5')
    report = build(cache, root)
    assert {'Base', 'Left', 'Right'} <= cache.evicted
    assert report.interfaces_parsed == 3
    image = read_image(os.path.join(root, 'build', 'Top.m3x'))
    assert load_and_run(image, 'Top.Run', []) == 6 * 7


def test_touched_interface_stays_cached(tmp_path):
    root = write_files(tmp_path / 'diamond', DIAMOND)
    cache = InterfaceCache()
    build(cache, root)
    bump_mtime(os.path.join(root, 'Left.i3'))
    report = build(cache, root)
    assert report.interfaces_parsed == 0
    assert not cache.evicted


def test_each_interface_parsed_at_most_once_per_build(tmp_path):
    package = gen_package(GenParams(units=15, fanout=3), 11, str(tmp_path / 'pkg'))
    cache = InterfaceCache()
    rng = random.Random(5)
    for _ in range(scale(20)):
        build(cache, package.root)
        assert max(cache.parse_counts.values(), default=0) <= 1
        apply_random_edit(package, rng)


def test_generic_interfaces_are_never_cached(tmp_path):
    root = write_files(tmp_path / 'gen', {
        'm3package.toml': 'name = "gen"\nprogram = "Use"\nentry = "Run"\n',
        'Cell.ig': 'GENERIC INTERFACE Cell(Elem);\nCONST Width = Elem.Size * 2;\nEND Cell.\n',
        'Ints.i3': 'INTERFACE Ints; CONST Size = 4; END Ints.\n',
        'IntCell.i3': 'INTERFACE IntCell = Cell(Ints) END IntCell.\n',
        'Use.m3': 'MODULE Use; IMPORT IntCell;\nPROCEDURE Run(): INTEGER = BEGIN RETURN IntCell.Width; END Run;\nEND Use.\n',
    })
    cache = InterfaceCache()
    build(cache, root)
    assert 'Cell' not in cache.entries
    assert 'IntCell' in cache.entries

    rewrite(os.path.join(root, 'Cell.ig'), 'Elem.Size * 2', 'Elem.Size * 3')
    report = build(cache, root)
    assert 'IntCell.i3' in report.dirty
    assert 'Use.m3' in report.dirty
    image = read_image(os.path.join(root, 'build', 'Use.m3x'))
    assert load_and_run(image, 'Use.Run', []) == 12


def test_byte_budget_is_respected_after_each_build(tmp_path):
    package = gen_package(GenParams(units=20, fanout=2), 4, str(tmp_path / 'pkg'))
    unbounded = InterfaceCache()
    build(unbounded, package.root)
    budget = unbounded.resident_bytes // 3
    cache = InterfaceCache(byte_budget=budget)
    rng = random.Random(9)
    for _ in range(scale(10)):
        build(cache, package.root)
        assert cache.resident_bytes <= budget
        apply_random_edit(package, rng)


def test_budget_evictions_are_recorded(tmp_path):
    package = gen_package(GenParams(units=20, fanout=2), 4, str(tmp_path / 'pkg'))
    unbounded = InterfaceCache()
    build(unbounded, package.root)
    assert not unbounded.evicted
    cache = InterfaceCache(byte_budget=unbounded.resident_bytes // 3)
    build(cache, package.root)
    assert cache.evicted
    assert not cache.evicted & set(cache.entries)
    assert cache.evicted | set(cache.entries) == set(unbounded.entries)


def test_import_cycle_fails_the_build(tmp_path):
    root = write_files(tmp_path / 'cyc', {
        'm3package.toml': 'name = "cyc"\n',
        'X.i3': 'INTERFACE X; IMPORT Y; CONST A = 1; END X.\n',
        'Y.i3': 'INTERFACE Y; IMPORT X; CONST B = 2; END Y.\n',
    })
    texts = []
    report = compile_package(CompileRequest(root), InterfaceCache(), texts.append)
    assert report.failed
    assert 'CycleDetected' in report.error
    assert texts and texts[0].startswith('error:')


# ---------------------------------------------------------------------------
# Library shortcut

@pytest.fixture
def library_setup(tmp_path):
    lib = gen_package(GenParams(units=6, fanout=2), 21, str(tmp_path / 'lib'))
    assert not build_local(lib.root).failed
    client = write_files(tmp_path / 'client', {
        'm3package.toml': 'name = "client"\nprogram = "Client"\nentry = "Run"\nlibraries = ["../lib"]\n',
        'Client.m3': ('MODULE Client; IMPORT I0, I5;\n'
                      'PROCEDURE Run(): INTEGER = BEGIN RETURN I5.F(2) + I0.K0; END Run;\n'
                      'END Client.\n'),
    })
    return lib, client


def test_library_shortcut_costs_one_stat(library_setup):
    lib, client = library_setup
    cache = InterfaceCache()
    build(cache, client)
    cache.fs.reset_counters()
    report = build(cache, client)
    assert cache.fs.stats_under(lib.root) == 1
    assert report.units_compiled == 0
    assert not report.linked


def test_library_change_is_picked_up(library_setup):
    lib, client = library_setup
    cache = InterfaceCache()
    build(cache, client)

    apply_random_edit(lib, random.Random(1))
    assert not build_local(lib.root).failed
    cache.fs.reset_counters()
    report = build(cache, client)
    assert cache.fs.stats_under(lib.root) > 1
    assert report.linked
    warm = build_outputs(client)

    shutil.rmtree(os.path.join(client, 'build'))
    assert not build_local(client).failed
    assert build_outputs(client) == warm


def test_library_without_state_file_is_fully_checked(library_setup, caplog):
    lib, client = library_setup
    cache = InterfaceCache()
    build(cache, client)
    os.remove(os.path.join(lib.root, 'build', '.m3state'))
    cache.fs.reset_counters()
    with caplog.at_level(logging.WARNING):
        build(cache, client)
    assert cache.fs.stats_under(lib.root) > 1
    assert any('checking its interfaces one by one' in r.getMessage() for r in caplog.records)


# ---------------------------------------------------------------------------
# Transparency: the warm cache never changes what gets built

def test_warm_and_cold_builds_are_byte_identical(tmp_path):
    params = GenParams(units=10, fanout=2)
    warm = gen_package(params, 77, str(tmp_path / 'warm'))
    cold = gen_package(params, 77, str(tmp_path / 'cold'))
    cache = InterfaceCache()
    build(cache, warm.root)
    build_local(cold.root)
    rng = random.Random(77)
    for step in range(scale(200)):
        roll = rng.random()
        if roll < 0.7:
            apply_random_edit(warm, random.Random(step))
            apply_random_edit(cold, random.Random(step))
        elif roll < 0.85:
            name = rng.choice(warm.interfaces)
            extra = f"CONST Extra{step} = {step};\nEND {name}."
            rewrite(os.path.join(warm.root, f"{name}.i3"), f"END {name}.", extra)
            rewrite(os.path.join(cold.root, f"{name}.i3"), f"END {name}.", extra)
        else:
            name = rng.choice(warm.interfaces)
            bump_mtime(os.path.join(warm.root, f"{name}.i3"))
            bump_mtime(os.path.join(cold.root, f"{name}.i3"))
        warm_report = build(cache, warm.root)
        cold_report = build_local(cold.root)
        assert not cold_report.failed, cold_report.error
        assert warm_report.compiled == cold_report.compiled
        assert build_outputs(warm.root) == build_outputs(cold.root)
        assert max(cache.parse_counts.values(), default=0) <= 1
        if step % 50 == 49:
            shutil.rmtree(os.path.join(cold.root, 'build'))
            build_local(cold.root)
            assert build_outputs(warm.root) == build_outputs(cold.root)


STALE = {
    'm3package.toml': 'name = "stale"\nprogram = "P"\nentry = "Run"\n',
    'D.i3': 'INTERFACE D; CONST K = 3; END D.\n',
    'M.i3': 'INTERFACE M; PROCEDURE F(): INTEGER; END M.\n',
    'M.m3': 'MODULE M; IMPORT D; PROCEDURE F(): INTEGER = BEGIN RETURN D.K; END F; END M.\n',
    'P.m3': 'MODULE P; IMPORT M; PROCEDURE Run(): INTEGER = BEGIN RETURN M.F(); END Run; END P.\n',
}


def test_failed_build_writes_no_objects(tmp_path):
    root = write_files(tmp_path / 'stale', STALE)
    cache = InterfaceCache()
    build(cache, root)
    before = build_outputs(root)

    rewrite(os.path.join(root, 'D.i3'), 'K = 3', 'K = 4')
    rewrite(os.path.join(root, 'P.m3'), 'M.F()', 'M.Nope()')
    report = compile_package(CompileRequest(root), cache)
    assert report.failed
    assert 'M.m3' in report.dirty
    assert build_outputs(root) == before

    rewrite(os.path.join(root, 'D.i3'), 'K = 4', 'K = 3')
    rewrite(os.path.join(root, 'P.m3'), 'M.Nope()', 'M.F() + 0')
    build(cache, root)
    assert load_and_run(read_image(os.path.join(root, 'build', 'P.m3x')), 'P.Run', []) == 3
    warm = build_outputs(root)

    shutil.rmtree(os.path.join(root, 'build'))
    assert not build_local(root).failed
    assert build_outputs(root) == warm


def test_objects_written_before_a_failure_are_removed(tmp_path, monkeypatch):
    root = write_files(tmp_path / 'stale', STALE)
    cache = InterfaceCache()
    build(cache, root)
    rewrite(os.path.join(root, 'D.i3'), 'K = 3', 'K = 4')

    def no_image(image, path):
        raise OSError(f"disk full writing {path}")
    monkeypatch.setattr(cacheserver, 'write_image', no_image)
    report = compile_package(CompileRequest(root), cache)
    assert report.failed and 'disk full' in report.error
    for unit_id in report.dirty:
        assert not os.path.exists(os.path.join(root, 'build', f"{unit_id}.m3o"))

    monkeypatch.undo()
    build(cache, root)
    assert load_and_run(read_image(os.path.join(root, 'build', 'P.m3x')), 'P.Run', []) == 4


# ---------------------------------------------------------------------------
# Server

def test_server_builds_and_keeps_its_cache(server, tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    status, text, report = client_request(server.socket_path, root)
    assert status == 0
    assert report.units_compiled == 6
    status, text, report = client_request(server.socket_path, root)
    assert status == 0
    assert report.interfaces_reused == 5
    assert report.units_compiled == 0


def test_server_reports_build_errors(server, tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    rewrite(os.path.join(root, 'D.i3'), 'Scale = 3;', 'Scale = ;')
    status, text, report = client_request(server.socket_path, root)
    assert status == 1
    assert text.startswith('error:')
    assert report.failed


def test_server_runs_builds_one_at_a_time(server, tmp_path):
    roots = [gen_package(GenParams(units=8), seed, str(tmp_path / f"p{seed}")).root for seed in range(4)]
    results = []

    def worker(root):
        results.append(client_request(server.socket_path, root, attempts=5))

    threads = [threading.Thread(target=worker, args=(root,), daemon=True) for root in roots * 2]
    for t in threads:
        t.start()
    for t in threads:
        t.join(120)
    assert len(results) == len(threads)
    assert all(status == 0 for status, _, _ in results)
    assert sorted(report.epoch for _, _, report in results) == list(range(1, len(threads) + 1))


def test_server_survives_client_disconnect(server, tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    sock = protocol.connect_with_retry(server.socket_path, 5)
    protocol.send_hello(sock)
    protocol.send_json(sock, protocol.BUILD, {'package_dir': root, 'options': []})
    sock.close()
    status, _, report = client_request(server.socket_path, root, attempts=5)
    assert status == 0
    assert report.epoch == 2
    assert report.units_compiled == 0


def test_server_rejects_wrong_protocol_version(server):
    sock = protocol.connect_with_retry(server.socket_path, 5)
    with sock:
        protocol.send_message(sock, protocol.HELLO, struct.pack('<H', 99))
        assert protocol.recv_message(sock).kind == protocol.HELLO
        msg = protocol.recv_message(sock)
        assert msg.kind == protocol.TEXT and 'version' in msg.text()
        done = protocol.recv_message(sock)
        assert (done.kind, done.payload) == (protocol.DONE, bytes([1]))


def test_report_survives_the_wire():
    report = PhaseReport(package='/p', units_compiled=3, dirty={'A.i3': ['source-modified']}, epoch=4)
    again = PhaseReport.from_dict(json.loads(json.dumps(report.to_dict())))
    assert again == report
    assert 'build FAILED' not in again.table()


def test_unreachable_server(tmp_path):
    root = copy_fixture('sixunit', tmp_path)
    missing = str(tmp_path / 'nobody.sock')
    with pytest.raises(protocol.ConnectFailed):
        client_request(missing, root)
    status, _, report = client_request(missing, root, fallback_local=True)
    assert status == 0
    assert report.units_compiled == 6


def test_shutdown_stops_the_server(tmp_path):
    sock = str(tmp_path / 'x.sock')
    srv = CompilationServer(sock, InterfaceCache())
    thread = threading.Thread(target=srv.serve_forever, daemon=True)
    thread.start()
    assert srv.ready.wait(10)
    shutdown_server(sock, attempts=5)
    thread.join(10)
    assert not thread.is_alive()
    assert not os.path.exists(sock)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__]))
