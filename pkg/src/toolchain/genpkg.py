"""Deterministic synthetic packages for benchmarks and property tests.

Every node of the import DAG becomes an interface with a few constants (K0
feeds the importers' K0, the rest reference random imported constants) and an
unused `Spare` constant. With modules enabled each node also gets a procedure
F and a module implementing it. A program module ties the top nodes together.
"""
import logging
import os
import random
import re
import shutil
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

from src.toolchain.validation import MANIFEST_FILE, Edit, ValidationError

logger = logging.getLogger()

PROGRAM = 'Main'
ENTRY = 'Run'
SPARE = 'Spare'

# import graph of the six-unit fixture package: P imports A, B, C and so on
SIX_UNIT_TOPOLOGY = {
    'D': (),
    'E': (),
    'B': ('D', 'E'),
    'A': ('D', 'B'),
    'C': ('B',),
    'P': ('A', 'B', 'C'),
}


@dataclass(frozen=True)
class GenParams:
    units: int = 6
    decls_per_unit: int = 3
    fanout: int = 2
    modules: bool = True


@dataclass
class GeneratedPackage:
    root: str
    program: str
    entry: str
    imports: Dict[str, Tuple[str, ...]]
    consts: Dict[str, List[str]] = field(default_factory=dict)

    @property
    def interfaces(self) -> List[str]:
        return [name for name in self.imports if name != self.program]

    def importers(self, name: str) -> List[str]:
        return sorted(n for n, deps in self.imports.items() if name in deps)


def random_topology(units: int, fanout: int, rng: random.Random) -> Dict[str, Tuple[str, ...]]:
    names = [f"I{k}" for k in range(units)]
    topology = {}
    for k, name in enumerate(names):
        chosen = rng.sample(names[:k], min(fanout, k)) if k else []
        topology[name] = tuple(sorted(chosen, key=lambda n: int(n[1:])))
    return topology


def _const_block(name: str, imports: Sequence[str], n_consts: int, rng: random.Random) -> List[str]:
    lines = []
    head = [str(rng.randint(1, 99))] + [f"{imp}.K0" for imp in imports]
    lines.append(f"CONST K0 = {' + '.join(head)};")
    for i in range(1, n_consts):
        lit = rng.randint(1, 50)
        if imports and rng.random() < 0.7:
            imp = rng.choice(list(imports))
            ref = f"{imp}.K{rng.randrange(n_consts)}"
            op = rng.choice(('+', '-', '*'))
            lines.append(f"CONST K{i} = {lit} {op} {ref};")
        elif i > 1 and rng.random() < 0.5:
            lines.append(f"CONST K{i} = K{rng.randrange(1, i)} + {lit};")
        else:
            lines.append(f"CONST K{i} = {lit};")
    lines.append(f"CONST {SPARE} = {rng.randint(1, 999)};")
    return lines


def _interface_text(name: str, imports: Sequence[str], n_consts: int, with_proc: bool,
                    rng: random.Random) -> str:
    out = [f"INTERFACE {name};"]
    if imports:
        out.append(f"IMPORT {', '.join(imports)};")
    out.extend(_const_block(name, imports, n_consts, rng))
    if with_proc:
        out.append('PROCEDURE F(x: INTEGER): INTEGER;')
    out.append(f"END {name}.")
    return '\n'.join(out) + '\n'


def _module_text(name: str, imports: Sequence[str], n_consts: int, rng: random.Random) -> str:
    # F calls only the first import's F, so the call graph stays a chain
    k = rng.randrange(n_consts)
    expr = f"x * K{k} + {rng.randint(1, 9)}"
    if imports:
        expr += f" + {imports[0]}.F(x - 1)"
    out = [f"MODULE {name};"]
    if imports:
        out.append(f"IMPORT {', '.join(imports)};")
    out += [
        'VAR calls: INTEGER;',
        'PROCEDURE F(x: INTEGER): INTEGER =',
        '  VAR t: INTEGER;',
        '  BEGIN',
        '    calls := calls + 1;',
        f"    t := {expr};",
        '    RETURN t - K0;',
        '  END F;',
        'BEGIN',
        '  calls := 0;',
        f"END {name}.",
    ]
    return '\n'.join(out) + '\n'


def _program_text(name: str, imports: Sequence[str], with_procs: bool, rng: random.Random) -> str:
    terms = []
    for i, imp in enumerate(imports):
        terms.append(f"{imp}.F({i + 1})" if with_procs else f"{imp}.K0")
    if not terms:
        terms.append(str(rng.randint(1, 9)))
    out = [f"MODULE {name};"]
    if imports:
        out.append(f"IMPORT {', '.join(imports)};")
    out += [
        f"PROCEDURE {ENTRY}(): INTEGER =",
        '  BEGIN',
        f"    RETURN {' + '.join(terms)};",
        f"  END {ENTRY};",
        f"END {name}.",
    ]
    return '\n'.join(out) + '\n'


def _write(path: str, text: str) -> None:
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(text)


def gen_package(params: GenParams, seed: int, dest: str,
                topology: Optional[Mapping[str, Sequence[str]]] = None,
                program: Optional[str] = None) -> GeneratedPackage:
    """Write a synthetic package to `dest` (replaced if it exists).

    With an explicit `topology` the node nobody imports (or `program`) becomes
    the program module; otherwise the graph is drawn from `seed` and a
    program module imports every top node.
    """
    if params.units <= 0 or params.decls_per_unit <= 0 or params.fanout <= 0:
        raise ValueError('package parameters must be positive')
    rng = random.Random(seed)
    if topology is None:
        graph = random_topology(params.units, params.fanout, rng)
        imported = {dep for deps in graph.values() for dep in deps}
        program = PROGRAM
        graph[program] = tuple(n for n in graph if n not in imported)
    else:
        graph = {name: tuple(deps) for name, deps in topology.items()}
        if program is None:
            imported = {dep for deps in graph.values() for dep in deps}
            tops = [n for n in graph if n not in imported]
            if len(tops) != 1:
                raise ValueError(f"topology needs exactly one top node, found {tops}")
            program = tops[0]

    if os.path.isdir(dest):
        shutil.rmtree(dest)
    os.makedirs(dest)
    package = GeneratedPackage(root=os.path.abspath(dest), program=program, entry=ENTRY, imports=graph)
    for name, deps in graph.items():
        if name == program:
            _write(os.path.join(dest, f"{name}.m3"), _program_text(name, deps, params.modules, rng))
            continue
        _write(os.path.join(dest, f"{name}.i3"),
               _interface_text(name, deps, params.decls_per_unit, params.modules, rng))
        package.consts[name] = [f"K{i}" for i in range(params.decls_per_unit)] + [SPARE]
        if params.modules:
            _write(os.path.join(dest, f"{name}.m3"), _module_text(name, deps, params.decls_per_unit, rng))
    _write(os.path.join(dest, MANIFEST_FILE),
           f'name = "gen-{seed}"\nprogram = "{program}"\nentry = "{ENTRY}"\n')
    logger.info(f"Generated package {dest}: {len(graph)} nodes, seed {seed}")
    return package


_CONST_RE = '(CONST\\s+{name}\\s*=\\s*)(\\d+)'


def default_decl(kind: str) -> str:
    return 'K0' if kind == 'used-by-importers' else SPARE


def apply_edit(package: GeneratedPackage, edit: Edit) -> str:
    """Bump the leading literal of one constant; returns the edited file."""
    if edit.unit not in package.consts:
        raise ValidationError(f"edit names unknown interface {edit.unit}")
    decl = edit.decl or default_decl(edit.kind)
    if decl not in package.consts[edit.unit]:
        raise ValidationError(f"{edit.unit} has no constant {decl}")
    path = os.path.join(package.root, f"{edit.unit}.i3")
    with open(path, encoding='utf-8') as f:
        text = f.read()
    pattern = re.compile(_CONST_RE.format(name=re.escape(decl)))
    m = pattern.search(text)
    if m is None:
        raise ValidationError(f"{edit.unit}.{decl} has no literal to edit")
    text = text[:m.start(2)] + str(int(m.group(2)) + 1) + text[m.end(2):]
    before = os.stat(path).st_mtime_ns
    _write(path, text)
    touch_after(path, before)
    return path


def touch_after(path: str, mtime_ns: int) -> None:
    """Make sure the file's mtime moved past `mtime_ns` on coarse-clock filesystems."""
    if os.stat(path).st_mtime_ns <= mtime_ns:
        bumped = mtime_ns + 1_000_000
        os.utime(path, ns=(bumped, bumped))
