import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from src.toolchain.frontend import EXTENSION_KINDS
from src.utils.config import config

logger = logging.getLogger()

MANIFEST_FILE = 'm3package.toml'
EDIT_KINDS = ('used-by-importers', 'unused')


class ValidationError(Exception):
    """Exception for invalid manifests and bench scenarios"""
    pass


class ScenarioInvalid(ValidationError):
    """A bench scenario that cannot be run"""
    def __init__(self, reason):
        self.reason = reason
        super().__init__(f"invalid scenario: {reason}")


# Schema version tracking
SCHEMAS = {
    'package': {
        'required_fields': ['name'],
        'optional_fields': ['units', 'libraries', 'program', 'entry', 'options'],
    },
    'scenario': {
        'required_fields': ['name', 'package'],
        'optional_fields': ['seed', 'repetitions', 'edits', 'backends'],
    },
    'scenario.package': {
        'required_fields': ['units'],
        'optional_fields': ['decls_per_unit', 'fanout', 'modules'],
    },
}


@dataclass
class PackageManifest:
    root: str
    name: str
    units: List[str]
    libraries: List[str] = field(default_factory=list)
    program: Optional[str] = None
    entry: Optional[str] = None
    options: Dict[str, Any] = field(default_factory=dict)

    @property
    def build_dir(self) -> str:
        return os.path.join(self.root, config.get('build.dir', 'build'))

    def unit_path(self, unit_file: str) -> str:
        return os.path.join(self.root, unit_file)


@dataclass(frozen=True)
class Edit:
    unit: str
    kind: str
    decl: Optional[str] = None


@dataclass
class BenchScenario:
    name: str
    units: int
    decls_per_unit: int = 3
    fanout: int = 2
    modules: bool = True
    seed: int = 0
    repetitions: int = 3
    edits: List[Edit] = field(default_factory=list)
    backends: List[str] = field(default_factory=lambda: ['assembler', 'integrated'])


def _read_toml(path: str) -> Dict[str, Any]:
    try:
        with open(path, 'rb') as f:
            return tomllib.load(f)
    except FileNotFoundError:
        raise ValidationError(f"{path} does not exist") from None
    except tomllib.TOMLDecodeError as e:
        raise ValidationError(f"{path}: {e}") from None


def _check_fields(record: Dict[str, Any], schema_name: str, where: str) -> None:
    schema = SCHEMAS[schema_name]
    for name in schema['required_fields']:
        if name not in record:
            raise ValidationError(f"{where}: missing required field: {name}")
    known = set(schema['required_fields']) | set(schema['optional_fields'])
    for name in record:
        if name not in known:
            logger.warning(f"{where}: ignoring unknown field {name}")


def _string_list(value, where: str) -> List[str]:
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ValidationError(f"{where} must be a list of strings")
    return list(value)


def validate_manifest(record: Dict[str, Any], root: str) -> PackageManifest:
    """Validate a parsed manifest; `root` is the package directory."""
    where = os.path.join(root, MANIFEST_FILE)
    _check_fields(record, 'package', where)
    if not isinstance(record['name'], str) or not record['name']:
        raise ValidationError(f"{where}: name must be a non-empty string")

    if 'units' in record:
        units = _string_list(record['units'], f"{where}: units")
    else:
        units = sorted(f for f in os.listdir(root) if os.path.splitext(f)[1] in EXTENSION_KINDS)
    for unit in units:
        if os.path.splitext(unit)[1] not in EXTENSION_KINDS:
            raise ValidationError(f"{where}: {unit} is not a source file")
        if not os.path.isfile(os.path.join(root, unit)):
            raise ValidationError(f"{where}: unit {unit} does not exist")
    if len(set(units)) != len(units):
        raise ValidationError(f"{where}: duplicate units")

    libraries = [os.path.normpath(os.path.join(root, lib))
                 for lib in _string_list(record.get('libraries', []), f"{where}: libraries")]
    for lib in libraries:
        if not os.path.isfile(os.path.join(lib, MANIFEST_FILE)):
            raise ValidationError(f"{where}: library {lib} has no {MANIFEST_FILE}")

    program = record.get('program')
    if program is not None and f"{program}.m3" not in units:
        raise ValidationError(f"{where}: program {program} has no module {program}.m3")
    entry = record.get('entry')
    if entry is not None and program is None:
        raise ValidationError(f"{where}: entry requires a program")
    options = record.get('options', {})
    if not isinstance(options, dict):
        raise ValidationError(f"{where}: options must be a table")
    return PackageManifest(root=root, name=record['name'], units=units, libraries=libraries,
                           program=program, entry=entry, options=options)


def load_manifest(package_dir: str) -> PackageManifest:
    root = os.path.abspath(package_dir)
    return validate_manifest(_read_toml(os.path.join(root, MANIFEST_FILE)), root)


def _positive(record, name, default, where) -> int:
    value = record.get(name, default)
    if not isinstance(value, int) or isinstance(value, bool) or value <= 0:
        raise ScenarioInvalid(f"{where}: {name} must be a positive integer")
    return value


def validate_scenario(record: Dict[str, Any], where: str = '<scenario>') -> BenchScenario:
    try:
        _check_fields(record, 'scenario', where)
        package = record['package']
        if not isinstance(package, dict):
            raise ScenarioInvalid(f"{where}: package must be a table")
        _check_fields(package, 'scenario.package', f"{where}: package")
    except ScenarioInvalid:
        raise
    except ValidationError as e:
        raise ScenarioInvalid(str(e)) from None

    units = _positive(package, 'units', None, where)
    scenario = BenchScenario(
        name=str(record['name']),
        units=units,
        decls_per_unit=_positive(package, 'decls_per_unit', 3, where),
        fanout=_positive(package, 'fanout', 2, where),
        modules=bool(package.get('modules', True)),
        seed=record.get('seed', 0),
        repetitions=_positive(record, 'repetitions', 3, where),
    )
    if not isinstance(scenario.seed, int):
        raise ScenarioInvalid(f"{where}: seed must be an integer")

    backends = record.get('backends', scenario.backends)
    if not isinstance(backends, list) or not backends or any(b not in ('assembler', 'integrated') for b in backends):
        raise ScenarioInvalid(f"{where}: backends must be a subset of assembler, integrated")
    scenario.backends = list(backends)

    for i, raw in enumerate(record.get('edits', [])):
        if not isinstance(raw, dict) or 'unit' not in raw:
            raise ScenarioInvalid(f"{where}: edit {i} needs a unit")
        kind = raw.get('kind', 'used-by-importers')
        if kind not in EDIT_KINDS:
            raise ScenarioInvalid(f"{where}: edit {i} has unknown kind {kind}")
        scenario.edits.append(Edit(unit=str(raw['unit']), kind=kind, decl=raw.get('decl')))
    return scenario


def load_scenario(path: str) -> BenchScenario:
    try:
        record = _read_toml(path)
    except ValidationError as e:
        raise ScenarioInvalid(str(e)) from None
    return validate_scenario(record, path)
