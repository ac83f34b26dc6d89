"""Molecular structures: XYZ parsing, atomisation energies, cutoff graphs and splits"""

import json
import shlex
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from ase.data import atomic_numbers as SYMBOL_TO_Z
from ase.data import chemical_symbols
from scipy.spatial.distance import cdist

from core.errors import ConfigError, DataError, XYZParseError
from core.models import MolecularGraph, MoleculeRecord, OverlapSplit, SplitSpec
from utils import get_logger, read_json, read_key_values, write_json

logger = get_logger(__name__)

HARTREE_TO_EV = 27.211386245988
DATASET_FORMAT = "moluq-dataset"
DATASET_VERSION = 1
SPLIT_FORMAT = "moluq-split"
SPLIT_VERSION = 1

# Column order of the tab-separated QM9 header line, after the "gdb" tag
_QM9_HEADER = (
    "index", "A", "B", "C", "mu", "alpha", "homo", "lumo", "gap",
    "r2", "zpve", "U0", "U", "H", "G", "Cv",
)
_INCHI_STEREO_LAYERS = ("b", "t", "m", "s")


def _to_float(token: str) -> float:
    # QM9 writes exponents as 1.2*^-6
    return float(token.replace("*^", "e"))


def _element_number(token: str) -> int:
    if token.isdigit():
        z = int(token)
        if 1 <= z < len(chemical_symbols):
            return z
        raise KeyError(token)
    symbol = token[:1].upper() + token[1:].lower()
    return SYMBOL_TO_Z[symbol]


def _parse_properties(line: str) -> Tuple[Optional[str], Dict[str, float], Optional[float], Optional[float]]:
    """Return (id, numeric properties, total energy, zpe) from the comment line"""
    tokens = line.split()
    if tokens and tokens[0] == "gdb" and len(tokens) >= 1 + len(_QM9_HEADER):
        values = dict(zip(_QM9_HEADER, tokens[1:]))
        properties = {k: _to_float(v) for k, v in values.items() if k != "index"}
        u0 = properties["U0"] * HARTREE_TO_EV
        zpe = properties["zpve"] * HARTREE_TO_EV
        properties.update({"U0": u0, "zpe": zpe})
        return f"gdb_{values['index']}", properties, u0, zpe

    try:
        pairs = shlex.split(line)
    except ValueError:
        pairs = tokens

    molecule_id: Optional[str] = None
    properties: Dict[str, float] = {}
    for pair in pairs:
        if "=" not in pair:
            continue
        key, value = pair.split("=", 1)
        if key.lower() in ("id", "name"):
            molecule_id = value
            continue
        try:
            properties[key] = _to_float(value)
        except ValueError:
            continue

    aliases = {"u0": "U0", "e": "E", "energy": "E", "zpe": "zpe"}
    for key in list(properties):
        canonical = aliases.get(key.lower())
        if canonical and canonical not in properties:
            properties[canonical] = properties.pop(key)

    total = properties.get("U0", properties.get("E"))
    return molecule_id, properties, total, properties.get("zpe")


def _parse_block(
    lines: Sequence[str],
    start: int,
    source: Optional[str],
    default_id: str,
) -> Tuple[MoleculeRecord, int]:
    """Parse one molecule starting at lines[start]; return it and the next line index"""
    count_line = start + 1
    if start >= len(lines):
        raise XYZParseError("empty input, expected an atom count", count_line, source)
    try:
        n_atoms = int(lines[start].strip())
    except ValueError:
        raise XYZParseError(f"malformed atom count {lines[start].strip()!r}", count_line, source)
    if n_atoms < 1:
        raise XYZParseError(f"atom count must be positive, got {n_atoms}", count_line, source)

    if start + 1 >= len(lines):
        raise XYZParseError("missing comment/properties line", count_line + 1, source)
    molecule_id, properties, total, zpe = _parse_properties(lines[start + 1])

    elements: List[int] = []
    positions: List[Tuple[float, float, float]] = []
    for i in range(n_atoms):
        index = start + 2 + i
        line_number = index + 1
        if index >= len(lines) or not lines[index].strip():
            raise XYZParseError(
                f"expected atom {i + 1} of {n_atoms}, found end of molecule", line_number, source
            )
        tokens = lines[index].split()
        if len(tokens) < 4:
            raise XYZParseError(
                f"atom line needs a symbol and 3 coordinates, got {lines[index].strip()!r}",
                line_number, source,
            )
        try:
            elements.append(_element_number(tokens[0]))
        except KeyError:
            raise XYZParseError(f"unknown element symbol {tokens[0]!r}", line_number, source)
        try:
            positions.append(tuple(_to_float(t) for t in tokens[1:4]))
        except ValueError:
            raise XYZParseError(f"non-numeric coordinate in {lines[index].strip()!r}", line_number, source)

    record = MoleculeRecord(
        id=molecule_id or default_id,
        elements=tuple(elements),
        positions=np.array(positions, dtype=np.float64),
        total_energy=total,
        zpe=zpe,
        properties=properties,
        source=source,
    )
    return record, start + 2 + n_atoms


def _is_count_line(line: str) -> bool:
    token = line.strip()
    return token.isdigit() and int(token) > 0


def _next_block_start(lines: Sequence[str], index: int) -> int:
    """First line at or after index holding a positive atom count"""
    while index < len(lines) and not _is_count_line(lines[index]):
        index += 1
    return index


def _with_trailer(record: MoleculeRecord, trailer: Sequence[str]) -> MoleculeRecord:
    # QM9 trailers: frequencies, SMILES pair, InChI pair (GDB first)
    for line in trailer:
        for token in line.split():
            if token.startswith("InChI="):
                return replace(record, structure_key=truncate_inchi(token))
    return record


def _block_id(prefix: str, index: int) -> str:
    return prefix if index == 0 else f"{prefix}_{index}"


def parse_xyz(text: str, source: Optional[str] = None, default_id: str = "mol0") -> MoleculeRecord:
    """
    Parse one molecule from (extended) XYZ text

    Non-count lines after the atom block are a trailer; an InChI string in
    it becomes the record's truncated structure key (QM9 files carry one).

    Raises:
        XYZParseError: naming the 1-based line of the first problem, also
            when a second molecule block follows
    """
    lines = text.splitlines()
    record, end = _parse_block(lines, 0, source, default_id)
    trailer_end = _next_block_start(lines, end)
    if trailer_end < len(lines):
        raise XYZParseError(
            "a second molecule block starts here; use parse_xyz_stream for multi-molecule text",
            trailer_end + 1, source,
        )
    return _with_trailer(record, lines[end:])


def parse_xyz_stream(
    text: str,
    source: Optional[str] = None,
    default_id: str = "mol",
    errors: Optional[List[XYZParseError]] = None,
) -> Iterator[MoleculeRecord]:
    """
    Parse concatenated XYZ blocks, each optionally followed by a trailer

    Blocks start at lines holding a positive atom count; anything else
    between blocks (blank lines, QM9 frequency/SMILES/InChI lines) is
    trailer of the preceding block. Without an errors list the first bad
    block raises; with one, each bad block is recorded and parsing resumes
    at the next count line.
    """
    lines = text.splitlines()
    index = 0
    while index < len(lines) and not lines[index].strip():
        index += 1
    count = 0
    while index < len(lines):
        try:
            record, end = _parse_block(lines, index, source, _block_id(default_id, count))
        except XYZParseError as e:
            if errors is None:
                raise
            logger.warning(f"Skipping molecule block {count + 1} of {source or 'input'}: {e}")
            errors.append(e)
            count += 1
            # skip the count and comment lines of the broken block
            index = _next_block_start(lines, index + 2)
            continue
        trailer_end = _next_block_start(lines, end)
        count += 1
        yield _with_trailer(record, lines[end:trailer_end])
        index = trailer_end


def load_xyz_path(path: Union[str, Path]) -> Tuple[List[MoleculeRecord], List[Tuple[str, str]]]:
    """
    Load molecules from a directory of *.xyz files or from one file; either
    may hold several concatenated blocks

    Returns:
        (records, failures) where failures lists (file name, error message),
        one entry per unreadable file or broken molecule block
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.xyz"))
    elif path.is_file():
        files = [path]
    else:
        raise DataError(f"no such file or directory: {path}")

    records: List[MoleculeRecord] = []
    failures: List[Tuple[str, str]] = []
    per_file_ids = path.is_dir()
    for file in files:
        try:
            text = file.read_text(encoding="utf-8")
        except UnicodeDecodeError as e:
            failures.append((file.name, str(e)))
            continue
        errors: List[XYZParseError] = []
        default_id = file.stem if per_file_ids else "mol"
        parsed = list(parse_xyz_stream(text, source=file.name, default_id=default_id, errors=errors))
        if not parsed and not errors:
            errors.append(XYZParseError("empty input, expected an atom count", 1, file.name))
        records.extend(parsed)
        failures.extend((file.name, str(e)) for e in errors)

    logger.info(f"Parsed {len(records)} molecules from {path} ({len(failures)} failures)")
    return records, failures


def load_reference_energies(path: Union[str, Path], target: str) -> Dict[int, float]:
    """
    Read per-element reference energies for one target property

    Keys are `<target>.<symbol>` (e.g. `U0.H = -13.6`); a bare `<symbol>` key
    applies to every target unless a target-specific key overrides it.
    """
    raw = read_key_values(path)
    refs: Dict[int, float] = {}
    specific: Dict[int, float] = {}
    for key, value in raw.items():
        prefix, _, symbol = key.rpartition(".")
        if prefix and prefix != target:
            continue
        try:
            z = _element_number(symbol)
            energy = _to_float(value)
        except (KeyError, ValueError):
            raise ConfigError(f"invalid reference energy entry {key} = {value}", key=key)
        (specific if prefix else refs)[z] = energy
    refs.update(specific)
    if not refs:
        raise ConfigError(f"{path}: no reference energies for target {target}")
    return refs


def atomisation_energy(
    record: MoleculeRecord,
    refs: Mapping[int, float],
    subtract_zpe: bool = False,
) -> float:
    """
    Total energy minus the isolated-atom references (eV)

    Args:
        record: Molecule with total_energy (and zpe when subtract_zpe)
        refs: Reference energy per atomic number
        subtract_zpe: Remove the zero-point energy first (E = U0 - ZPE)
    """
    if record.total_energy is None:
        raise DataError(f"{record.id}: no total energy")
    missing = sorted(set(record.elements) - set(refs))
    if missing:
        symbols = [chemical_symbols[z] for z in missing]
        raise ConfigError(f"no reference energy for elements {symbols}")
    energy = record.total_energy
    if subtract_zpe:
        if record.zpe is None:
            raise DataError(f"{record.id}: zero-point energy required but missing")
        energy -= record.zpe
    return energy - sum(refs[z] for z in record.elements)


def target_energy(record: MoleculeRecord, target: str, refs: Mapping[int, float]) -> float:
    """Atomisation energy of the selected target: U0, or E (explicit or U0 - ZPE)"""
    if target == "U0":
        u0 = record.properties.get("U0", record.total_energy)
        return atomisation_energy(replace(record, total_energy=u0), refs)
    if target == "E":
        if "E" in record.properties:
            return atomisation_energy(replace(record, total_energy=record.properties["E"]), refs)
        u0 = record.properties.get("U0", record.total_energy)
        return atomisation_energy(replace(record, total_energy=u0), refs, subtract_zpe=True)
    raise ConfigError(f"unknown target {target!r}", key="data.target")


def build_graph(record: MoleculeRecord, cutoff: float) -> MolecularGraph:
    """
    Directed cutoff graph: an edge (v, w) for every ordered pair v != w
    with distance <= cutoff; the edge feature is the distance in Å
    """
    if cutoff <= 0:
        raise ConfigError(f"cutoff must be positive, got {cutoff}", key="net.cutoff")
    distances = cdist(record.positions, record.positions)
    mask = distances <= cutoff
    np.fill_diagonal(mask, False)
    src, dst = np.nonzero(mask)
    return MolecularGraph(
        id=record.id,
        atomic_numbers=np.asarray(record.elements, dtype=np.int64),
        edge_index=np.stack([src, dst]).astype(np.int64),
        edge_distance=distances[src, dst].astype(np.float64),
        cutoff=float(cutoff),
        target=record.target,
    )


def random_split(ids: Sequence[str], sizes: Tuple[int, int], seed: int) -> SplitSpec:
    """
    Shuffle the sorted ids with a seeded Fisher-Yates permutation and cut
    train and validation off the front; the remainder is the test set
    """
    n_train, n_val = sizes
    if n_train < 0 or n_val < 0:
        raise DataError(f"split sizes must be non-negative, got {sizes}")
    ordered = sorted(ids)
    if len(set(ordered)) != len(ordered):
        raise DataError("ids are not unique")
    if n_train + n_val > len(ordered):
        raise DataError(
            f"split sizes {n_train} + {n_val} exceed the dataset size {len(ordered)}"
        )
    permutation = np.random.default_rng(seed).permutation(len(ordered))
    shuffled = [ordered[i] for i in permutation]
    return SplitSpec(
        train_ids=tuple(shuffled[:n_train]),
        val_ids=tuple(shuffled[n_train:n_train + n_val]),
        test_ids=tuple(shuffled[n_train + n_val:]),
        seed=seed,
    )


def overlap_split(
    ids_a: Sequence[str],
    keys_a: Mapping[str, str],
    ids_b: Sequence[str],
    keys_b: Mapping[str, str],
) -> OverlapSplit:
    """
    Partition two datasets by shared structure keys

    A molecule is shared when its key occurs anywhere in the other dataset,
    so duplicate keys make |shared_a| and |shared_b| differ.
    """
    missing = [i for i in ids_a if i not in keys_a] + [i for i in ids_b if i not in keys_b]
    if missing:
        preview = ", ".join(missing[:10]) + (" ..." if len(missing) > 10 else "")
        raise DataError(f"{len(missing)} ids have no structure key: {preview}")

    key_counts_a = Counter(keys_a[i] for i in ids_a)
    key_counts_b = Counter(keys_b[i] for i in ids_b)
    shared_a = tuple(i for i in ids_a if keys_a[i] in key_counts_b)
    exclusive_a = tuple(i for i in ids_a if keys_a[i] not in key_counts_b)
    shared_b = tuple(i for i in ids_b if keys_b[i] in key_counts_a)
    exclusive_b = tuple(i for i in ids_b if keys_b[i] not in key_counts_a)
    return OverlapSplit(exclusive_a, shared_a, exclusive_b, shared_b)


def overlap_split_spec(overlap: OverlapSplit, seed: int) -> SplitSpec:
    """Cross-dataset protocol: train on exclusive A, validate on shared A,
    fit the affine correction on shared B, test on exclusive B"""
    return SplitSpec(
        train_ids=overlap.exclusive_a,
        val_ids=overlap.shared_a,
        test_ids=overlap.exclusive_b,
        seed=seed,
        extra={"affine": overlap.shared_b},
    )


def truncate_inchi(inchi: str) -> str:
    """Drop the stereo layers (/b, /t, /m, /s) so stereoisomers share a key"""
    parts = inchi.strip().split("/")
    head, layers = parts[:2], parts[2:]
    kept = [layer for layer in layers if not layer or layer[0] not in _INCHI_STEREO_LAYERS]
    return "/".join(head + kept)


def load_structure_keys(path: Union[str, Path], truncate: bool = True) -> Dict[str, str]:
    """Read `id<TAB>key` lines; InChI values are truncated unless disabled"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"structure key file not found: {path}")
    keys: Dict[str, str] = {}
    for line_number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        if not line.strip():
            continue
        parts = line.split("\t") if "\t" in line else line.split(None, 1)
        if len(parts) != 2 or not parts[1].strip():
            raise DataError(f"{path}:line {line_number}: expected 'id<TAB>key'")
        molecule_id, key = parts[0].strip(), parts[1].strip()
        if molecule_id in keys:
            raise DataError(f"{path}:line {line_number}: duplicate id {molecule_id!r}")
        if truncate and key.startswith("InChI="):
            key = truncate_inchi(key)
        keys[molecule_id] = key
    return keys


@dataclass(frozen=True)
class MolecularDataset:
    """Immutable collection of molecule records with id lookup"""
    records: Tuple[MoleculeRecord, ...]
    name: str = "dataset"
    _index: Dict[str, int] = field(default_factory=dict, init=False, repr=False, compare=False)

    def __post_init__(self):
        index: Dict[str, int] = {}
        for position, record in enumerate(self.records):
            if record.id in index:
                raise DataError(f"duplicate molecule id {record.id!r} in {self.name}")
            index[record.id] = position
        object.__setattr__(self, "_index", index)

    def __len__(self) -> int:
        return len(self.records)

    def __contains__(self, molecule_id: str) -> bool:
        return molecule_id in self._index

    @property
    def ids(self) -> Tuple[str, ...]:
        return tuple(record.id for record in self.records)

    def get(self, molecule_id: str) -> MoleculeRecord:
        try:
            return self.records[self._index[molecule_id]]
        except KeyError:
            raise DataError(f"unknown molecule id {molecule_id!r}")

    def subset(self, ids: Iterable[str]) -> "MolecularDataset":
        return MolecularDataset(tuple(self.get(i) for i in ids), name=self.name)

    def graphs(self, cutoff: float, ids: Optional[Iterable[str]] = None) -> List[MolecularGraph]:
        selected = self.records if ids is None else [self.get(i) for i in ids]
        return [build_graph(record, cutoff) for record in selected]

    def check_elements(self, supported: Iterable[int]) -> None:
        supported = set(supported)
        for record in self.records:
            record.check_elements(supported)


def save_dataset_cache(dataset: MolecularDataset, path: Union[str, Path]) -> Path:
    """Write a JSON-lines cache: a version header, then one record per line"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        header = {"format": DATASET_FORMAT, "version": DATASET_VERSION, "name": dataset.name, "count": len(dataset)}
        f.write(json.dumps(header) + "\n")
        for record in dataset.records:
            f.write(json.dumps(record.to_dict()) + "\n")
    logger.info(f"Dataset cache written: {path} ({len(dataset)} molecules)")
    return path


def load_dataset_cache(path: Union[str, Path]) -> MolecularDataset:
    """Load a cache written by save_dataset_cache"""
    path = Path(path)
    if not path.exists():
        raise DataError(f"dataset cache not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        header = json.loads(f.readline() or "{}")
        if header.get("format") != DATASET_FORMAT or header.get("version") != DATASET_VERSION:
            raise DataError(f"{path}: not a version {DATASET_VERSION} dataset cache")
        records = tuple(MoleculeRecord.from_dict(json.loads(line)) for line in f if line.strip())
    if len(records) != header.get("count"):
        raise DataError(f"{path}: header announces {header.get('count')} records, found {len(records)}")
    return MolecularDataset(records, name=header.get("name", "dataset"))


def save_split(split: SplitSpec, path: Union[str, Path]) -> Path:
    return write_json(path, split.to_dict(), SPLIT_FORMAT, SPLIT_VERSION)


def load_split(path: Union[str, Path]) -> SplitSpec:
    return SplitSpec.from_dict(read_json(path, SPLIT_FORMAT, (SPLIT_VERSION,)))
