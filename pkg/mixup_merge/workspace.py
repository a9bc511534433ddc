import logging
from collections.abc import Callable, Sequence
from pathlib import Path

import pandas as pd
from hydromt import Model, hydromt_step

from mixup_merge.components.checkpoints import CheckpointsComponent
from mixup_merge.components.config import ToolkitConfig, ToolkitConfigComponent
from mixup_merge.components.tables import DocumentsComponent, ResultTablesComponent
from mixup_merge.methods import apply, merge, sparsify, take_delta
from mixup_merge.recipe import MergeRecipe, RecipeTemplate, SparsifyConfig
from mixup_merge.sampler import SweepSchedule
from mixup_merge.tensors import DeltaSet, TensorMap
from mixup_merge.workflows import lab
from mixup_merge.workflows.evaluators import Evaluator

__all__ = ["MergeWorkspace"]

logger = logging.getLogger(__name__)


class MergeWorkspace(Model):
    """Output folder of merges, sweeps, scans and lab runs.

    Setup methods compute results and keep them in the workspace components;
    nothing touches the disk until :meth:`write`.

    Parameters
    ----------
    root : str or Path
        Workspace folder.
    mode : {'w', 'w+', 'r', 'r+'}, optional
        Mode to open the workspace, by default 'w+' which may overwrite files.
    config : ToolkitConfig, optional
        Effective configuration, the packaged defaults when omitted. In read
        mode the snapshot in the folder is used instead.
    """

    name: str = "MergeWorkspace"

    def __init__(
        self,
        root: str | Path,
        mode: str = "w+",
        config: ToolkitConfig | None = None,
    ):
        self.config = ToolkitConfigComponent(self, filename="config.toml")
        self.checkpoints = CheckpointsComponent(self)
        self.tables = ResultTablesComponent(self)
        self.documents = DocumentsComponent(self)
        self._snapshot = False

        components = {
            "config": self.config,
            "checkpoints": self.checkpoints,
            "tables": self.tables,
            "documents": self.documents,
        }

        super().__init__(root=root, mode=mode, components=components)

        if config is not None or not self.root.is_reading_mode():
            self.config.use(config or ToolkitConfig.from_file())

    # ==================================================================================
    # SETUP METHODS
    @hydromt_step
    def setup_merge(
        self,
        recipe: MergeRecipe,
        models: Sequence[TensorMap],
        base: TensorMap | None = None,
        name: str = "merged",
        path: str | Path | None = None,
        manifest_path: str | Path | None = None,
    ) -> TensorMap:
        """Merge ``models`` with ``recipe`` and keep the result and its manifest.

        Adds checkpoint:

        * **<name>**: merged checkpoint, with manifest
        """
        merged, manifest = merge(recipe, base, models)
        self.checkpoints.set(merged, name=name, path=path)
        self.checkpoints.set_manifest(manifest, name=name, path=manifest_path)
        return merged

    @hydromt_step
    def setup_apply(
        self,
        base: TensorMap,
        deltas: Sequence[tuple[float, DeltaSet]],
        name: str = "merged",
        path: str | Path | None = None,
        manifest_path: str | Path | None = None,
    ) -> TensorMap:
        """Add weighted delta files to ``base`` and keep the result and its manifest."""
        merged, manifest = apply(base, deltas)
        self.checkpoints.set(merged, name=name, path=path)
        self.checkpoints.set_manifest(manifest, name=name, path=manifest_path)
        return merged

    @hydromt_step
    def setup_delta(
        self,
        fine: TensorMap,
        base: TensorMap,
        name: str = "delta",
        path: str | Path | None = None,
        manifest_path: str | Path | None = None,
    ) -> DeltaSet:
        d, manifest = take_delta(fine, base)
        self.checkpoints.set(d, name=name, path=path)
        self.checkpoints.set_manifest(manifest, name=name, path=manifest_path)
        return d

    @hydromt_step
    def setup_sparsify(
        self,
        d: DeltaSet,
        cfg: SparsifyConfig,
        name: str = "sparse",
        path: str | Path | None = None,
        manifest_path: str | Path | None = None,
    ) -> DeltaSet:
        out, manifest = sparsify(d, cfg)
        self.checkpoints.set(out, name=name, path=path)
        self.checkpoints.set_manifest(manifest, name=name, path=manifest_path)
        return out

    @hydromt_step
    def setup_sweep(
        self,
        models: lab.ToyTaskPair | Sequence[TensorMap],
        evaluator: Evaluator | None = None,
        template: RecipeTemplate | None = None,
        schedule: SweepSchedule | None = None,
        base: TensorMap | None = None,
    ) -> lab.SweepResult:
        """Run an alpha sweep and keep every merge and the result table.

        Adds checkpoints:

        * **alpha_<alpha>**: merged checkpoint per alpha, with manifest

        Adds tables and documents:

        * **sweep_table**: columns alpha, lambda_m, one score per task, avg
        * **sweep_result**: every record, its digest and the selected index
        """
        cfg = self.config.settings
        schedule = schedule or SweepSchedule(alphas=cfg.alphas, base_seed=cfg.seed)
        result = lab.run_sweep(models, schedule, template, evaluator, base)
        for i, record in enumerate(result.records):
            name = f"alpha_{record.sampling.alpha:g}"
            if name in self.checkpoints.data:
                name = f"{name}_{i}"
            self.checkpoints.set(record.checkpoint, name=name)
            self.checkpoints.set_manifest(record.manifest, name=name)
        self.tables.set(result.to_table(), name="sweep_table", columns=result.table_columns)
        self.documents.set(result.to_dict(), name="sweep_result")
        self._snapshot = True
        return result

    @hydromt_step
    def setup_scan(
        self,
        a: TensorMap,
        b: TensorMap,
        losses: Callable[[TensorMap], Sequence[float]],
        grid_size: int | None = None,
        name: str = "path_scan",
        path: str | Path | None = None,
    ) -> lab.PathScan:
        """Scan the segment from ``b`` to ``a`` and keep the loss table."""
        scan = lab.scan_segment(a, b, losses, grid_size or self.config.settings.scan_grid)
        self.tables.set(scan.table, name=name, path=path, columns=lab.SCAN_COLUMNS)
        return scan

    @hydromt_step
    def setup_lab(self, seed: int) -> lab.ToyTaskPair:
        """Build the lab pair of ``seed``.

        Adds checkpoints ``pretrained``, ``task1`` and ``task2`` and the
        ``lineage`` document.
        """
        pair = lab.build_toy_pair(seed, self.config.settings.lab)
        self.checkpoints.set(pair.pretrained, name="pretrained")
        self.checkpoints.set(pair.model_t1, name="task1")
        self.checkpoints.set(pair.model_t2, name="task2")
        self.documents.set(pair.lineage(), name="lineage")
        self._snapshot = True
        return pair

    @hydromt_step
    def setup_study(self, seeds: Sequence[int], grid_size: int | None = None) -> dict:
        """Run the basin study and keep the per-seed distribution and its summary."""
        cfg = self.config.settings
        df, summary = lab.basin_study(
            seeds,
            cfg.lab,
            SweepSchedule(alphas=cfg.alphas, base_seed=cfg.seed),
            grid_size or cfg.scan_grid,
        )
        self.tables.set(df, name="basin_study")
        self.documents.set(summary, name="basin_summary")
        self._snapshot = True
        return summary

    @hydromt_step
    def setup_compare(self, seed: int) -> pd.DataFrame:
        """Compare every baseline with and without M3 and DARE on the lab pair of ``seed``.

        Adds table:

        * **method_comparison**: one row per method, M3 switch and DARE switch
        """
        cfg = self.config.settings
        pair = lab.build_toy_pair(seed, cfg.lab)
        df = lab.compare_methods(
            pair,
            SweepSchedule(alphas=cfg.alphas, base_seed=cfg.seed),
            drop_rate=cfg.dare_drop_rate,
            dare_seed=seed,
        )
        self.tables.set(df, name="method_comparison", columns=lab.COMPARE_COLUMNS)
        self._snapshot = True
        return df

    # ==================================================================================
    # IO METHODS
    def write(self, components: list[str] | None = None) -> None:
        """Write the selected components, all of them by default.

        The configuration snapshot is only written next to sweeps, lab runs
        and studies.
        """
        self.root._assert_write_mode()
        Path(self.root.path).mkdir(parents=True, exist_ok=True)
        names = components or list(self.components)
        if not self._snapshot:
            names = [name for name in names if name != "config"]
        return super().write(names)
