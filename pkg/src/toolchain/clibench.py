"""Command-line front door (build, serve, run, bench, shutdown) and the
benchmark harness comparing cold standard builds with a warm server."""
import argparse
import logging
import os
import shutil
import sys
import tempfile
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from src.toolchain import protocol
from src.toolchain.cacheserver import (PHASES, CacheError, CompilationServer, InterfaceCache, PhaseReport,
                                       build_local, client_request, image_path, shutdown_server)
from src.toolchain.genpkg import GenParams, apply_edit, gen_package
from src.toolchain.linker import LinkError, read_image
from src.toolchain.objfile import ObjectFormatError
from src.toolchain.validation import BenchScenario, ScenarioInvalid, ValidationError, load_manifest, load_scenario
from src.toolchain.vm import Trap, load_and_run
from src.utils.config import config
from src.utils.helpers import fnv1a_64

logger = logging.getLogger()

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_UNREACHABLE = 2
EXIT_USAGE = 64

CONFIGS = ('standard', 'server')
STAGES = ('full', 'partial')


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(message)


def setup_logging() -> None:
    level = getattr(logging, str(config.get('log_level', 'INFO')).upper(), logging.INFO)
    logging.basicConfig(level=level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    logging.getLogger().setLevel(level)


# ---------------------------------------------------------------------------
# Benchmark harness

@dataclass
class BenchRow:
    config: str
    backend: str
    stage: str
    reports: List[PhaseReport] = field(default_factory=list)

    @property
    def label(self) -> str:
        return f"{self.config} with {self.backend}"

    @property
    def last(self) -> PhaseReport:
        return self.reports[-1]

    def median_ms(self, phase: str) -> float:
        return float(np.median([r.seconds[phase] for r in self.reports])) * 1000

    def median_total_ms(self) -> float:
        return float(np.median([r.total for r in self.reports])) * 1000

    def key_values(self) -> List[str]:
        prefix = f"{self.config}.{self.backend}.{self.stage}."
        out = [f"{prefix}{phase}_ms={self.median_ms(phase):.3f}" for phase in PHASES]
        out += [
            f"{prefix}total_ms={self.median_total_ms():.3f}",
            f"{prefix}interfaces_parsed={self.last.interfaces_parsed}",
            f"{prefix}interfaces_reused={self.last.interfaces_reused}",
            f"{prefix}units_compiled={self.last.units_compiled}",
        ]
        return out


@dataclass
class BenchResult:
    scenario: BenchScenario
    rows: List[BenchRow]
    fine_grain: List[str]
    file_grain: List[str]
    image_digests: Dict[str, int]

    @property
    def images_identical(self) -> bool:
        return len(set(self.image_digests.values())) <= 1

    def row(self, config_name: str, backend: str, stage: str) -> BenchRow:
        for row in self.rows:
            if (row.config, row.backend, row.stage) == (config_name, backend, stage):
                return row
        raise KeyError((config_name, backend, stage))

    def table(self) -> str:
        head = f"{'configuration':<28}{'build':<9}" + ''.join(f"{PHASE_HEAD[p]:>11}" for p in PHASES)
        head += f"{'total':>11}{'parsed':>8}{'reused':>8}{'units':>7}"
        lines = [f"scenario {self.scenario.name}: {self.scenario.units} interfaces, "
                 f"{len(self.scenario.edits)} edit(s), median of {self.scenario.repetitions} (ms)", head]
        for row in self.rows:
            cells = ''.join(f"{row.median_ms(p):>11.2f}" for p in PHASES)
            lines.append(f"{row.label:<28}{row.stage:<9}{cells}{row.median_total_ms():>11.2f}"
                         f"{row.last.interfaces_parsed:>8}{row.last.interfaces_reused:>8}"
                         f"{row.last.units_compiled:>7}")
        lines.append(f"fine-grain dirty set ({len(self.fine_grain)}): {', '.join(self.fine_grain) or '-'}")
        lines.append(f"file-grain dirty set ({len(self.file_grain)}): {', '.join(self.file_grain) or '-'}")
        return '\n'.join(lines)

    def key_values(self) -> List[str]:
        out = [f"scenario={self.scenario.name}"]
        for row in self.rows:
            out.extend(row.key_values())
        out.append(f"fine_grain={','.join(self.fine_grain)}")
        out.append(f"file_grain={','.join(self.file_grain)}")
        out.append(f"images_identical={int(self.images_identical)}")
        return out


PHASE_HEAD = {
    'smart_recomp': 'smartrec',
    'frontend': 'frontend',
    'codegen': 'codegen',
    'assemble': 'assemble',
    'link': 'link',
    'other': 'other',
}


def _image_digest(package_dir: str) -> int:
    with open(image_path(load_manifest(package_dir)), 'rb') as f:
        return fnv1a_64(f.read())


def _checked(report: Optional[PhaseReport], what: str) -> PhaseReport:
    if report is None or report.failed:
        detail = report.error if report is not None else 'no report'
        raise ScenarioInvalid(f"{what} failed: {detail}")
    return report


class _BenchServer:
    """A compilation server on a private socket, run in a thread."""

    def __init__(self, workdir: str):
        self.socket_path = os.path.join(workdir, 'bench.sock')
        self.server = CompilationServer(self.socket_path, InterfaceCache(config.get('server.cache_bytes')))
        self.thread = threading.Thread(target=self.server.serve_forever, name='m3-bench-server', daemon=True)

    def __enter__(self):
        self.thread.start()
        if not self.server.ready.wait(10):
            raise RuntimeError('bench server did not start')
        return self

    def __exit__(self, *exc):
        shutdown_server(self.socket_path)
        self.thread.join(10)

    def build(self, package_dir: str, options: Sequence[str]) -> PhaseReport:
        _, _, report = client_request(self.socket_path, package_dir, options)
        return report


def bench(scenario: BenchScenario, workdir: Optional[str] = None,
          progress: Optional[Callable[[str], None]] = None) -> BenchResult:
    """Run the standard/server x backend grid, full and partial builds each.

    Builds run strictly one after another. Every repetition regenerates the
    package from the scenario seed, so every configuration sees the same sources.
    """
    own_workdir = workdir is None
    workdir = workdir or tempfile.mkdtemp(prefix='m3bench-')
    params = GenParams(units=scenario.units, decls_per_unit=scenario.decls_per_unit,
                       fanout=scenario.fanout, modules=scenario.modules)
    package_dir = os.path.join(workdir, 'pkg')
    rows = {(c, b, s): BenchRow(c, b, s) for c in CONFIGS for b in scenario.backends for s in STAGES}
    digests: Dict[str, int] = {}
    fine_grain: List[str] = []
    file_grain: List[str] = []
    say = progress or (lambda text: None)

    def regenerate():
        package = gen_package(params, scenario.seed, package_dir)
        for edit in scenario.edits:
            if edit.unit not in package.consts:
                raise ScenarioInvalid(f"edit names unknown interface {edit.unit}")
        return package

    def edit(package):
        try:
            for e in scenario.edits:
                apply_edit(package, e)
        except ValidationError as e:
            raise ScenarioInvalid(str(e)) from None

    try:
        with _BenchServer(workdir) as server:
            for rep in range(scenario.repetitions):
                for backend in scenario.backends:
                    options = [f"--backend={backend}"]
                    say(f"repetition {rep + 1}: standard with {backend}")
                    package = regenerate()
                    full = _checked(build_local(package_dir, options), 'standard full build')
                    edit(package)
                    partial = _checked(build_local(package_dir, options), 'standard partial build')
                    rows[('standard', backend, 'full')].reports.append(full)
                    rows[('standard', backend, 'partial')].reports.append(partial)
                    digests[f"standard.{backend}"] = _image_digest(package_dir)

                    say(f"repetition {rep + 1}: server with {backend}")
                    package = regenerate()
                    _checked(server.build(package_dir, options), 'server warm-up build')
                    shutil.rmtree(load_manifest(package_dir).build_dir)
                    full = _checked(server.build(package_dir, options), 'server full build')
                    edit(package)
                    partial = _checked(server.build(package_dir, options), 'server partial build')
                    rows[('server', backend, 'full')].reports.append(full)
                    rows[('server', backend, 'partial')].reports.append(partial)
                    digests[f"server.{backend}"] = _image_digest(package_dir)
                    fine_grain = sorted(partial.dirty)
                    file_grain = list(partial.file_grain)
    finally:
        if own_workdir:
            shutil.rmtree(workdir, ignore_errors=True)

    result = BenchResult(scenario, list(rows.values()), fine_grain, file_grain, digests)
    if not result.images_identical:
        logger.warning(f"Bench {scenario.name}: configurations produced different images")
    logger.info(f"Bench {scenario.name} finished: {len(result.rows)} rows")
    return result


# ---------------------------------------------------------------------------
# CLI

def _parser() -> _Parser:
    parser = _Parser(prog='m3', description='Fast-recompilation toolchain')
    sub = parser.add_subparsers(dest='command', parser_class=_Parser)

    p = sub.add_parser('build', help='build a package')
    p.add_argument('package')
    where = p.add_mutually_exclusive_group()
    where.add_argument('--local', action='store_true', help='build in-process with a cold cache (default)')
    where.add_argument('--server', nargs='?', const='', metavar='SOCK', help='build through the compilation server')
    p.add_argument('--fallback-local', action='store_true', help='build in-process when the server is unreachable')
    p.add_argument('--backend', choices=('integrated', 'assembler'))
    p.add_argument('--allow-unresolved', action='store_true')

    p = sub.add_parser('serve', help='run the compilation server')
    p.add_argument('--socket')
    p.add_argument('--cache-bytes', type=int)

    p = sub.add_parser('run', help='load an image and call a procedure')
    p.add_argument('image')
    p.add_argument('entry')
    p.add_argument('args', nargs='*')
    p.add_argument('--bind-now', action='store_true')

    p = sub.add_parser('bench', help='run a benchmark scenario')
    p.add_argument('scenario')
    p.add_argument('--workdir')

    p = sub.add_parser('shutdown', help='stop the compilation server')
    p.add_argument('--socket')
    return parser


def _print_text(text: str) -> None:
    sys.stdout.write(text)
    sys.stdout.flush()


def _cmd_build(args) -> int:
    options = []
    if args.backend:
        options.append(f"--backend={args.backend}")
    if args.allow_unresolved:
        options.append('--allow-unresolved')
    if args.server is None:
        report = build_local(args.package, options, _print_text)
        status = EXIT_FAILED if report.failed else EXIT_OK
    else:
        try:
            status, _, report = client_request(args.server or None, args.package, options,
                                               fallback_local=args.fallback_local, on_text=_print_text)
        except protocol.ConnectFailed as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_UNREACHABLE
        except (protocol.ProtocolError, CacheError, OSError) as e:
            print(f"error: {e}", file=sys.stderr)
            return EXIT_FAILED
    if report is not None:
        print(report.table())
    return status


def _cmd_serve(args) -> int:
    cache = InterfaceCache(args.cache_bytes if args.cache_bytes is not None else config.get('server.cache_bytes'))
    server = CompilationServer(args.socket or config.get('server.socket'), cache)
    try:
        server.serve_forever()
    except (OSError, CacheError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


def _cmd_run(args) -> int:
    try:
        values = [int(a) for a in args.args]
    except ValueError:
        raise UsageError(f"arguments must be integers: {' '.join(args.args)}") from None
    try:
        image = read_image(args.image)
        result = load_and_run(image, args.entry, values, bind_now=args.bind_now,
                              stack_words=config.get('vm.stack_words'))
    except (OSError, ObjectFormatError, LinkError, Trap) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    print(result)
    return EXIT_OK


def _cmd_bench(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
        result = bench(scenario, args.workdir)
    except ScenarioInvalid as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    print(result.table())
    for line in result.key_values():
        print(line)
    return EXIT_OK


def _cmd_shutdown(args) -> int:
    try:
        shutdown_server(args.socket)
    except protocol.ConnectFailed as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_UNREACHABLE
    except (protocol.ProtocolError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILED
    return EXIT_OK


COMMANDS = {
    'build': _cmd_build,
    'serve': _cmd_serve,
    'run': _cmd_run,
    'bench': _cmd_bench,
    'shutdown': _cmd_shutdown,
}


def cli(argv: Optional[Sequence[str]] = None) -> int:
    """Parse `argv` and run one subcommand; returns the process exit code."""
    try:
        args = _parser().parse_args(argv)
        if args.command is None:
            raise UsageError('a subcommand is required')
        return COMMANDS[args.command](args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE


def main() -> None:
    setup_logging()
    sys.exit(cli())


if __name__ == '__main__':
    main()
