"""predict: run the ensemble over one split part and dump the prediction CSV"""

from pathlib import Path
from typing import List, Optional

from commands.base_command import MANIFEST_FILE, BaseCommand, predictions_file
from core.chemgraph import MolecularDataset
from core.ensemble import Member, predict_table, save_predictions
from core.members import load_manifest, load_members
from core.models import CommandResult, PredictionTable, SplitSpec


def predict_part(
    members: List[Member],
    dataset: MolecularDataset,
    split: SplitSpec,
    part: str,
    batch_size: int,
) -> PredictionTable:
    ids = split.ids(part)
    graphs = dataset.graphs(members[0].config.cutoff, ids)
    return predict_table(members, graphs, batch_size=batch_size)


class PredictCommand(BaseCommand):
    """Writes predictions_<part>.csv"""

    name = "predict"

    async def _execute(
        self,
        part: str = "test",
        manifest: Optional[Path] = None,
        out: Optional[Path] = None,
        **kwargs,
    ) -> CommandResult:
        manifest_path = Path(manifest) if manifest else self._require(self.path(MANIFEST_FILE), "train")
        members = load_members(load_manifest(manifest_path), expected=self.config.net)
        table = predict_part(
            members, self._load_dataset(), self._load_split(), part, self.app_config.PREDICT_BATCH_SIZE
        )
        path = save_predictions(table, Path(out) if out else self.path(predictions_file(part)))
        return self._ok(
            f"{len(table)} '{part}' molecules predicted by {len(members)} members",
            {"predictions": path},
            {"part": part, "rows": len(table), "members": len(members)},
        )
