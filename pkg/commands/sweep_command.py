"""sweep: ensemble-size and learning-curve experiments"""

from typing import Any, Dict, List, Optional

import pandas as pd

from commands.base_command import MANIFEST_FILE, BaseCommand
from commands.evaluate_command import evaluate_table, metric_row
from commands.predict_command import predict_part
from core.calibrate import fit_calibration
from core.ensemble import members_by_nll, select_members
from core.errors import DataError
from core.members import load_manifest, load_members, train_ensemble
from core.models import CommandResult, SplitSpec
from utils import write_csv


class SweepCommand(BaseCommand):
    """Writes sweep_<kind>.csv: metrics against ensemble size or training fraction"""

    name = "sweep"

    async def _execute(self, kind: Optional[str] = None, **kwargs) -> CommandResult:
        kind = kind or self.config.sweep.kind
        if kind == "ensemble_size":
            rows = self._ensemble_size()
        else:
            rows = await self._train_fraction()
        path = write_csv(self.path(f"sweep_{kind}.csv"), pd.DataFrame(rows))
        return self._ok(f"{kind} sweep with {len(rows)} rows", {"sweep": path}, {"rows": rows})

    def _ensemble_size(self) -> List[Dict[str, Any]]:
        """Grow the ensemble best-validation-NLL first; score uncalibrated on validation"""
        max_size = self.config.sweep.max_size
        manifest = load_manifest(self._require(self.path(MANIFEST_FILE), "train"))
        pool = load_members(manifest, expected=self.config.net)
        if len(pool) < max_size:
            raise DataError(f"member pool has {len(pool)} usable members, sweep.max_size is {max_size}")
        ordered = members_by_nll(pool)[:max_size]
        table = predict_part(
            ordered, self._load_dataset(), self._load_split(), "val", self.app_config.PREDICT_BATCH_SIZE
        )

        rows = []
        for size in range(1, max_size + 1):
            result = evaluate_table(select_members(table, range(size)), self.config.eval)
            rows.append({"M": size, "members": ",".join(str(m.index) for m in ordered[:size]), **metric_row(result)})
            self.logger.info(f"  M={size}: NLL={result.nll:.4f} MAE={result.mae:.5f}")
        return rows

    async def _train_fraction(self) -> List[Dict[str, Any]]:
        """Retrain on nested prefixes of the training ids; calibrate on validation, score on test"""
        dataset = self._load_dataset()
        split = self._load_split()
        fractions = self.config.sweep.fractions
        batch_size = self.app_config.PREDICT_BATCH_SIZE

        rows = []
        for step, fraction in enumerate(fractions, start=1):
            n_train = max(1, int(round(fraction * len(split.train_ids))))
            subset = SplitSpec(split.train_ids[:n_train], split.val_ids, split.test_ids, split.seed)
            self.logger.info(f"[{step}/{len(fractions)}] Fraction {fraction:g}: {n_train} training molecules")
            manifest = await train_ensemble(
                dataset,
                subset,
                self.config.net,
                self.config.train,
                size=self.config.ensemble.size,
                global_seed=self.config.seed,
                output_dir=self.path("sweep", f"fraction_{fraction:g}"),
                workers=self.workers,
            )
            members = load_members(manifest, expected=self.config.net)
            val = predict_part(members, dataset, subset, "val", batch_size)
            test = predict_part(members, dataset, subset, "test", batch_size)
            calibration = fit_calibration(
                val.total,
                (val.y - val.mean) ** 2,
                method=self.config.calibration.method,
                floor=self.config.net.min_variance,
                interpolation=self.config.calibration.interpolation,
            )
            result = evaluate_table(test, self.config.eval, calibration)
            rows.append({"fraction": fraction, "n_train": n_train, "M": len(members), **metric_row(result)})
        return rows
