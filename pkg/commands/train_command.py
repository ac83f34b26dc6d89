"""train: fit the ensemble members and write the manifest"""

from commands.base_command import MANIFEST_FILE, MEMBERS_DIR, BaseCommand
from core.errors import NumericError
from core.members import save_manifest, train_ensemble
from core.models import CommandResult


class TrainCommand(BaseCommand):
    """Trains ensemble.size members with seeds derived from the global seed"""

    name = "train"

    async def _execute(self, **kwargs) -> CommandResult:
        dataset = self._load_dataset()
        split = self._load_split()
        manifest = await train_ensemble(
            dataset,
            split,
            self.config.net,
            self.config.train,
            size=self.config.ensemble.size,
            global_seed=self.config.seed,
            output_dir=self.path(MEMBERS_DIR),
            workers=self.workers,
        )
        manifest_path = save_manifest(manifest, self.path(MANIFEST_FILE))

        for record in manifest.members:
            nll = "n/a" if record.best_val_nll is None else f"{record.best_val_nll:.4f}"
            self.logger.info(f"  member {record.index}: {record.status}, best val NLL {nll}")

        summary = {
            "members": len(manifest.members),
            "failed": [record.index for record in manifest.failed],
        }
        if manifest.failed:
            return CommandResult(
                command=self.name,
                success=False,
                reason=f"{len(manifest.failed)} of {len(manifest.members)} members failed",
                error="; ".join(f"member {r.index}: {r.error}" for r in manifest.failed),
                exit_code=NumericError.exit_code,
                artifacts={"manifest": str(manifest_path)},
                summary=summary,
            )
        return self._ok(f"{len(manifest.members)} members trained", {"manifest": manifest_path}, summary)
