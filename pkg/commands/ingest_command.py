"""ingest: parse raw structures, attach targets, write the dataset cache and split"""

from dataclasses import replace
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from commands.base_command import DATASET_FILE, SPLIT_FILE, BaseCommand
from core.chemgraph import (
    MolecularDataset,
    load_reference_energies,
    load_structure_keys,
    load_xyz_path,
    overlap_split,
    overlap_split_spec,
    random_split,
    save_dataset_cache,
    save_split,
    target_energy,
    truncate_inchi,
)
from core.errors import DataError
from core.models import CommandResult, MoleculeRecord, SplitSpec
from core.synthetic import make_synthetic_dataset

OVERLAP_PREFIXES = ("A:", "B:")


class IngestCommand(BaseCommand):
    """Builds dataset.jsonl and split.json in the output directory"""

    name = "ingest"

    async def _execute(self, **kwargs) -> CommandResult:
        data = self.config.data
        if data.source == "synthetic":
            dataset = make_synthetic_dataset(data.synthetic_size, self.config.seed)
            split = random_split(dataset.ids, (data.n_train, data.n_val), self.config.seed)
        elif data.split_mode == "overlap":
            dataset, split = self._ingest_overlap()
        else:
            self.config.require_paths("data.xyz_path", "data.reference_energies")
            dataset = self._load_labelled(data.xyz_path, data.reference_energies)
            split = random_split(dataset.ids, (data.n_train, data.n_val), self.config.seed)

        dataset.check_elements(self.config.net.elements)
        cache = save_dataset_cache(dataset, self.path(DATASET_FILE))
        split_path = save_split(split, self.path(SPLIT_FILE))

        counts = split.counts()
        self.logger.info(f"Molecules: {len(dataset)}")
        for part, count in counts.items():
            self.logger.info(f"  {part:8} {count}")
        return self._ok(
            f"{len(dataset)} molecules ingested",
            {"dataset": cache, "split": split_path},
            {"molecules": len(dataset), **counts},
        )

    def _load_labelled(self, xyz_path: Path, refs_path: Path, prefix: str = "") -> MolecularDataset:
        records, failures = load_xyz_path(xyz_path)
        if failures:
            for file_name, message in failures:
                self.logger.error(f"  ✗ {file_name}: {message}")
            names = ", ".join(name for name, _ in failures[:10])
            raise DataError(f"{len(failures)} molecule blocks failed to parse in: {names}")
        refs = load_reference_energies(refs_path, self.config.data.target)
        labelled = self._with_targets(records, refs, prefix)
        return MolecularDataset(tuple(labelled), name=Path(xyz_path).stem)

    def _with_targets(self, records: List[MoleculeRecord], refs: Dict[int, float], prefix: str) -> List[MoleculeRecord]:
        target = self.config.data.target
        return [
            replace(record, id=f"{prefix}{record.id}", target=target_energy(record, target, refs))
            for record in records
        ]

    def _structure_keys(
        self,
        dataset: MolecularDataset,
        keys_path: Optional[Path],
        prefix: str,
    ) -> Dict[str, str]:
        if keys_path is not None:
            return {f"{prefix}{i}": key for i, key in load_structure_keys(keys_path).items()}
        keys = {}
        for record in dataset.records:
            if record.structure_key is None:
                raise DataError(f"{record.id}: no structure key in the file and no key file configured")
            keys[record.id] = truncate_inchi(record.structure_key)
        return keys

    def _ingest_overlap(self) -> Tuple[MolecularDataset, SplitSpec]:
        data = self.config.data
        self.config.require_paths(
            "data.xyz_path", "data.reference_energies", "data.xyz_path_b", "data.reference_energies_b"
        )
        prefix_a, prefix_b = OVERLAP_PREFIXES
        dataset_a = self._load_labelled(data.xyz_path, data.reference_energies, prefix_a)
        dataset_b = self._load_labelled(data.xyz_path_b, data.reference_energies_b, prefix_b)
        overlap = overlap_split(
            dataset_a.ids,
            self._structure_keys(dataset_a, data.keys_path_a, prefix_a),
            dataset_b.ids,
            self._structure_keys(dataset_b, data.keys_path_b, prefix_b),
        )
        self.logger.info(
            f"Overlap: exclusive A {len(overlap.exclusive_a)}, shared A {len(overlap.shared_a)}, "
            f"exclusive B {len(overlap.exclusive_b)}, shared B {len(overlap.shared_b)}"
        )
        merged = MolecularDataset(dataset_a.records + dataset_b.records, name="overlap")
        return merged, overlap_split_spec(overlap, self.config.seed)
