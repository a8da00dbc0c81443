"""Reference implementations and generators shared by the test suites.

- Interpreter: evaluates parsed modules directly on their syntax trees.
- oracle_dirty: recomputes every used-fingerprint map from scratch and diffs
  it against the previous build state.
- random_program / random_edit / apply_structural_edit: seeded generators
  for property tests.
"""
import os
import random
import re
import shutil
from typing import Dict, List, Optional, Sequence, Set, Tuple

from context import *

from src.toolchain.depcheck import BuildState, compiled_units
from src.toolchain.frontend import (
    Assign, BinOp, Call, CallStmt, ImportOfUnknownUnit, InterfaceAST, ModuleAST, NameRef, Neg, Num, Return,
    Scope, build_module, fnv1a_64, parse_generic, parse_interface, parse_source, scan_unit, unit_kind_for,
)
from src.toolchain.genpkg import GeneratedPackage, SPARE, apply_edit, touch_after
from src.toolchain.validation import Edit, ValidationError, load_manifest
from src.utils.helpers import wrap_int64

FIXTURES = os.path.join(os.path.dirname(os.path.abspath(__file__)), 'fixtures')


def scale(n: int) -> int:
    """Trial count scaled by M3_TEST_SCALE (default 1.0), at least 1."""
    factor = float(os.environ.get('M3_TEST_SCALE', '1') or 1)
    return max(1, int(round(n * factor)))


def copy_fixture(name: str, dest) -> str:
    target = os.path.join(str(dest), name)
    shutil.copytree(os.path.join(FIXTURES, name), target)
    return target


def write_files(root, files: Dict[str, str]) -> str:
    root = str(root)
    os.makedirs(root, exist_ok=True)
    for name, text in files.items():
        with open(os.path.join(root, name), 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
    return root


def bump_mtime(path: str, step_ns: int = 10_000_000) -> None:
    st = os.stat(path)
    os.utime(path, ns=(st.st_atime_ns, st.st_mtime_ns + step_ns))


def rewrite(path: str, old: str, new: str) -> None:
    """Replace text in a source file and move its mtime forward."""
    with open(path, encoding='utf-8') as f:
        text = f.read()
    assert old in text, f"{old!r} not in {path}"
    before = os.stat(path).st_mtime_ns
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text.replace(old, new, 1))
    if os.stat(path).st_mtime_ns <= before:
        os.utime(path, ns=(before + 10_000_000, before + 10_000_000))


# ---------------------------------------------------------------------------
# Fresh (uncached) frontend

class FreshFrontend:
    """Parses every interface of a package directory with no cache at all."""

    def __init__(self, package_dir: str):
        self.manifest = load_manifest(package_dir)
        self.paths = {}
        for unit in self.manifest.units:
            self.paths[os.path.splitext(unit)[0], unit_kind_for(unit)] = self.manifest.unit_path(unit)
        self.interfaces: Dict[str, InterfaceAST] = {}

    def interface(self, name: str) -> InterfaceAST:
        if name not in self.interfaces:
            path = self.paths.get((name, 'interface'))
            if path is None:
                raise KeyError(name)
            self.interfaces[name] = parse_interface(path, self.interface, self.generic)
        return self.interfaces[name]

    def generic(self, name: str):
        return parse_generic(self.paths[(name, 'generic-interface')])

    def module(self, name: str) -> ModuleAST:
        path = self.paths[(name, 'module')]
        with open(path, 'rb') as f:
            data = f.read()
        return build_module(parse_source(data.decode('utf-8'), path), self.interface, fnv1a_64(data))

    def used(self, unit_file: str) -> Dict[Tuple[str, str], int]:
        name, kind = os.path.splitext(unit_file)[0], unit_kind_for(unit_file)
        if kind == 'module':
            return dict(self.module(name).used)
        if kind == 'interface':
            return dict(self.interface(name).used)
        return {}


def oracle_dirty(package_dir: str, prev: BuildState) -> Set[str]:
    """Brute force: recompute all used maps from scratch, diff against prev."""
    fresh = FreshFrontend(package_dir)
    dirty = set()
    units = [scan_unit(fresh.manifest.unit_path(u)) for u in fresh.manifest.units]
    for unit in compiled_units(units):
        old = prev.units.get(unit.unit_id)
        if old is None or old.text_hash != unit.text_hash:
            dirty.add(unit.unit_id)
            continue
        if not os.path.exists(os.path.join(fresh.manifest.build_dir, f"{unit.unit_id}.m3o")):
            dirty.add(unit.unit_id)
            continue
        try:
            now = fresh.used(unit.unit_id)
        except (KeyError, ImportOfUnknownUnit):
            dirty.add(unit.unit_id)
            continue
        for key, fp in old.used.items():
            if now.get(key) != fp:
                dirty.add(unit.unit_id)
                break
    return dirty


def random_edit(package: GeneratedPackage, rng: random.Random) -> Edit:
    unit = rng.choice(sorted(package.consts))
    decl = rng.choice(package.consts[unit])
    return Edit(unit=unit, kind='unused' if decl == SPARE else 'used-by-importers', decl=decl)


def apply_random_edit(package: GeneratedPackage, rng: random.Random) -> Edit:
    """Edit a random constant; K0 and Spare always start with a literal."""
    while True:
        edit = random_edit(package, rng)
        try:
            apply_edit(package, edit)
            return edit
        except ValidationError:
            continue


_PARAM_RE = re.compile(r'PROCEDURE F\((\w+): INTEGER\)')
_RECORD_RE = re.compile(r'(TYPE (\w+) = RECORD)')
EDIT_KINDS = ('const', 'rename-param', 'private-proc', 'export-proc', 'add-type', 'add-field')


def _read(path: str) -> str:
    with open(path, encoding='utf-8') as f:
        return f.read()


def _replace(path: str, text: str) -> None:
    before = os.stat(path).st_mtime_ns
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)
    touch_after(path, before)


def _insert_before_end(path: str, unit: str, line: str) -> None:
    text = _read(path)
    end = f"END {unit}."
    _replace(path, text.replace(end, f"{line}\n{end}", 1))


def _private_procs(module_text: str, iface_text: str) -> List[str]:
    names = re.findall(r'PROCEDURE (G\d+)\(', module_text)
    return [n for n in names if f"PROCEDURE {n}(" not in iface_text]


def apply_structural_edit(package: GeneratedPackage, rng: random.Random) -> str:
    """One build-preserving edit: a constant, a procedure signature or a type.

    Signature edits keep interface and module in step: `rename-param`
    renames F's parameter in both, `private-proc` adds a procedure only the
    module declares, `export-proc` later publishes one in the interface.
    Returns the kind applied.
    """
    while True:
        kind = rng.choice(EDIT_KINDS)
        unit = rng.choice(sorted(package.consts))
        iface = os.path.join(package.root, f"{unit}.i3")
        module = os.path.join(package.root, f"{unit}.m3")
        has_module = os.path.exists(module)
        if kind == 'const':
            apply_random_edit(package, rng)
            return kind
        if kind == 'add-type':
            n = len(re.findall(r'\bTYPE\b', _read(iface)))
            _insert_before_end(iface, unit, f"TYPE T{n} = RECORD a: INTEGER; END;")
            return kind
        if kind == 'add-field':
            text = _read(iface)
            records = _RECORD_RE.findall(text)
            if not records:
                continue
            head, _ = rng.choice(records)
            n_fields = len(re.findall(r'\bf\d+:', text))
            field = f"f{n_fields}: INTEGER;"
            _replace(iface, text.replace(head, f"{head} {field}", 1))
            return kind
        if not has_module:
            continue
        if kind == 'rename-param':
            m = _PARAM_RE.search(_read(iface))
            if m is None:
                continue
            old = m.group(1)
            new = 'y' if old == 'x' else 'x'
            _replace(iface, _read(iface).replace(m.group(0), f"PROCEDURE F({new}: INTEGER)", 1))
            _replace(module, re.sub(rf'\b{old}\b', new, _read(module)))
            return kind
        if kind == 'private-proc':
            text = _read(module)
            name = f"G{len(re.findall(r'PROCEDURE G', text))}"
            impl = f"PROCEDURE {name}(a: INTEGER): INTEGER =\n  BEGIN\n    RETURN a + 1;\n  END {name};\n"
            _replace(module, text.replace('\nBEGIN\n', f"\n{impl}BEGIN\n", 1))
            return kind
        if kind == 'export-proc':
            hidden = _private_procs(_read(module), _read(iface))
            if not hidden:
                continue
            _insert_before_end(iface, unit, f"PROCEDURE {rng.choice(hidden)}(a: INTEGER): INTEGER;")
            return kind


# ---------------------------------------------------------------------------
# AST interpreter

class Interpreter:
    """Runs modules on their syntax trees with 64-bit wraparound arithmetic."""

    def __init__(self, modules: Dict[str, ModuleAST], interfaces: Dict[str, InterfaceAST]):
        self.modules = modules
        self.interfaces = interfaces
        self.globals: Dict[str, int] = {}
        for iface in interfaces.values():
            for name, value in iface.var_values.items():
                self.globals[f"{iface.unit_name}.{name}"] = value
        for module in modules.values():
            scope = Scope(module)
            for decl in module.decls:
                if decl.kind == 'var':
                    init = decl.node.node.init
                    value = 0 if init is None else self._eval(init, scope, {})
                    self.globals[f"{module.unit_name}.{decl.name}"] = value
        self.calls: List[str] = []

    def init_order(self) -> List[str]:
        """Imported modules before importers, ties by name."""
        order: List[str] = []
        seen = set()

        def visit(name):
            if name in seen or name not in self.modules:
                return
            seen.add(name)
            module = self.modules[name]
            deps = set(module.imports)
            if module.exports is not None:
                deps |= set(module.exports.imports)
            for dep in sorted(deps - {name}):
                visit(dep)
            order.append(name)

        for name in sorted(self.modules):
            visit(name)
        return order

    def run_initializers(self) -> None:
        for name in self.init_order():
            module = self.modules[name]
            if module.init_body:
                self._exec(module.init_body, Scope(module), {})

    def call(self, symbol: str, args: Sequence[int]) -> Optional[int]:
        unit, name = symbol.split('.', 1)
        module = self.modules[unit]
        proc = module.proc(name)
        self.calls.append(symbol)
        frame = {p: wrap_int64(a) for p, a in zip(proc.params, args)}
        for loc in proc.locals:
            frame[loc] = 0
        return self._exec(proc.body, Scope(module, proc), frame)

    def _exec(self, body, scope: Scope, frame: Dict[str, int]) -> Optional[int]:
        for stmt in body:
            if isinstance(stmt, Assign):
                value = self._eval(stmt.expr, scope, frame)
                target = scope.resolve(stmt.target)
                if target.kind == 'slot':
                    frame[stmt.target.name] = value
                else:
                    self.globals[target.symbol] = value
            elif isinstance(stmt, CallStmt):
                self._call(stmt.call, scope, frame)
            elif isinstance(stmt, Return):
                return None if stmt.expr is None else self._eval(stmt.expr, scope, frame)
        return None

    def _call(self, call: Call, scope: Scope, frame: Dict[str, int]) -> Optional[int]:
        target = scope.resolve(call.target)
        args = [self._eval(a, scope, frame) for a in call.args]
        return self.call(target.symbol, args)

    def _eval(self, expr, scope: Scope, frame: Dict[str, int]) -> int:
        if isinstance(expr, Num):
            return wrap_int64(expr.value)
        if isinstance(expr, NameRef):
            target = scope.resolve(expr)
            if target.kind == 'slot':
                return frame[expr.name]
            if target.kind == 'const':
                return wrap_int64(target.value)
            return self.globals[target.symbol]
        if isinstance(expr, Neg):
            return wrap_int64(-self._eval(expr.operand, scope, frame))
        if isinstance(expr, BinOp):
            left = self._eval(expr.left, scope, frame)
            right = self._eval(expr.right, scope, frame)
            if expr.op == '+':
                return wrap_int64(left + right)
            if expr.op == '-':
                return wrap_int64(left - right)
            return wrap_int64(left * right)
        if isinstance(expr, Call):
            return self._call(expr, scope, frame)
        raise TypeError(expr)


def interpret_package(package_dir: str) -> Interpreter:
    fresh = FreshFrontend(package_dir)
    modules = {}
    for unit in fresh.manifest.units:
        if unit_kind_for(unit) == 'module':
            name = os.path.splitext(unit)[0]
            modules[name] = fresh.module(name)
    for unit in fresh.manifest.units:
        if unit_kind_for(unit) == 'interface':
            fresh.interface(os.path.splitext(unit)[0])
    interp = Interpreter(modules, fresh.interfaces)
    interp.run_initializers()
    return interp


# ---------------------------------------------------------------------------
# Random programs

LITERALS = (0, 1, 2, 3, 7, 100, 4096, 65537, 2 ** 31, 2 ** 40 + 3, 2 ** 62, 9223372036854775807)


class _ProcGen:

    def __init__(self, rng: random.Random, consts: List[str], globals_: List[str],
                 callables: List[Tuple[str, int]], actions: List[Tuple[str, int]]):
        self.rng = rng
        self.consts = consts
        self.globals = globals_
        self.callables = callables      # (name, n_params) with a result
        self.actions = actions          # (name, n_params) without a result

    def leaf(self, readable: List[str]) -> str:
        rng = self.rng
        pools = [[str(rng.choice(LITERALS))], readable, self.consts, self.globals]
        pools = [p for p in pools if p]
        return rng.choice(rng.choice(pools))

    def expr(self, readable: List[str], depth: int) -> str:
        rng = self.rng
        if depth <= 0 or rng.random() < 0.25:
            return self.leaf(readable)
        roll = rng.random()
        if roll < 0.1:
            return f"-{self.leaf(readable)}"
        if roll < 0.3 and self.callables:
            name, n = rng.choice(self.callables)
            args = ', '.join(self.expr(readable, depth - 2) for _ in range(n))
            return f"{name}({args})"
        op = rng.choice('+-*')
        left = self.expr(readable, depth - 1)
        right = self.expr(readable, depth - 1)
        if rng.random() < 0.5:
            return f"({left} {op} {right})"
        return f"{left} {op} {right}"

    def proc(self, name: str, params: List[str], n_locals: int, has_result: bool,
             assignable_globals: List[str]) -> str:
        rng = self.rng
        locals_ = [f"t{i}" for i in range(n_locals)]
        readable = list(params)
        lines = []
        for _ in range(rng.randint(0, 4)):
            roll = rng.random()
            if roll < 0.2 and self.actions:
                action, n = rng.choice(self.actions)
                args = ', '.join(self.expr(readable, 2) for _ in range(n))
                lines.append(f"    {action}({args});")
                continue
            targets = locals_ + params + assignable_globals
            if not targets:
                continue
            target = rng.choice(targets)
            lines.append(f"    {target} := {self.expr(readable, 4)};")
            if target in locals_ and target not in readable:
                readable.append(target)
        if has_result:
            lines.append(f"    RETURN {self.expr(readable, 5)};")
        head = f"PROCEDURE {name}({', '.join(params)}{': INTEGER' if params else ''})"
        head += ': INTEGER =' if has_result else ' ='
        out = [head]
        if locals_:
            out.append(f"  VAR {', '.join(locals_)}: INTEGER;")
        out.append('  BEGIN')
        out += lines
        out.append(f"  END {name};")
        return '\n'.join(out)


def _params(n: int) -> List[str]:
    return [f"p{i}" for i in range(n)]


def random_program(rng: random.Random, n_lib: int = 3, n_main: int = 4, n_spare: int = 1) -> Dict[str, str]:
    """Package text: interface + module Lib, and a program module Prog importing Lib.

    Lib's `U*` procedures are only called from Prog's `Unused*` procedures,
    which nothing calls.
    """
    lib_procs = [(f"G{i}", rng.randint(0, 3)) for i in range(n_lib)]
    spare = [(f"U{i}", rng.randint(0, 2)) for i in range(n_spare)]
    lib_consts = [f"Base{i}" for i in range(2)]

    iface = ['INTERFACE Lib;']
    for c in lib_consts:
        iface.append(f"CONST {c} = {rng.choice(LITERALS)};")
    iface.append(f"VAR Counter: INTEGER := {rng.randint(0, 50)};")
    for name, n in lib_procs + spare:
        params = ', '.join(_params(n))
        iface.append(f"PROCEDURE {name}({params}{': INTEGER' if n else ''}): INTEGER;")
    iface.append('PROCEDURE Bump(x: INTEGER);')
    iface.append('END Lib.')

    lib_gen_callables: List[Tuple[str, int]] = []
    lib = ['MODULE Lib;', f"VAR hidden: INTEGER := {rng.randint(0, 99)};"]
    body_gen = _ProcGen(rng, lib_consts, ['Counter', 'hidden'], lib_gen_callables, [])
    for name, n in lib_procs + spare:
        lib.append(body_gen.proc(name, _params(n), rng.randint(0, 2), True, ['hidden']))
        lib_gen_callables.append((name, n))
    lib.append('PROCEDURE Bump(x: INTEGER) =\n  BEGIN\n    Counter := Counter + x;\n  END Bump;')
    lib += ['BEGIN', f"  hidden := hidden + {rng.randint(1, 9)};", '  Counter := Counter + 1;', 'END Lib.']

    main_callables = [(f"Lib.{n}", k) for n, k in lib_procs]
    gen = _ProcGen(rng, [f"Lib.{c}" for c in lib_consts] + ['Local'], ['g', 'Lib.Counter'],
                   main_callables, [('Lib.Bump', 1)])
    prog = ['MODULE Prog;', 'IMPORT Lib;', f"CONST Local = {rng.choice(LITERALS)};",
            f"VAR g: INTEGER := {rng.randint(0, 99)};"]
    entries = []
    for i in range(n_main):
        name, n = f"H{i}", rng.randint(0, 3)
        prog.append(gen.proc(name, _params(n), rng.randint(0, 3), True, ['g', 'Lib.Counter']))
        gen.callables.append((name, n))
        entries.append((name, n))
    for i in range(n_spare):
        prog.append(_unused_proc(i, spare))
    prog += ['BEGIN', '  g := g + Local;', 'END Prog.']
    return {
        'm3package.toml': 'name = "prog"\nprogram = "Prog"\n',
        'Lib.i3': '\n'.join(iface) + '\n',
        'Lib.m3': '\n'.join(lib) + '\n',
        'Prog.m3': '\n'.join(prog) + '\n',
        '.entries': ' '.join(f"{n}:{k}" for n, k in entries) + '\n',
    }


def _unused_proc(i: int, spare: List[Tuple[str, int]]) -> str:
    terms = [f"Lib.{name}({', '.join(['1'] * n)})" for name, n in spare] or ['0']
    return (f"PROCEDURE Unused{i}(): INTEGER =\n  BEGIN\n    RETURN {' + '.join(terms)};\n"
            f"  END Unused{i};")


def program_entries(package_dir: str) -> List[Tuple[str, int]]:
    with open(os.path.join(package_dir, '.entries'), encoding='utf-8') as f:
        return [(name, int(n)) for name, n in (item.split(':') for item in f.read().split())]
