import logging
from datetime import datetime
from pathlib import Path
from typing import TYPE_CHECKING

from hydromt import hydromt_step
from hydromt.model.components import ModelComponent

from mixup_merge.checkpoint import read_entry, read_manifest, write_checkpoint, write_manifest
from mixup_merge.components.manifest import MergeManifest
from mixup_merge.errors import CheckpointError
from mixup_merge.tensors import DeltaSet, TensorMap

if TYPE_CHECKING:
    from mixup_merge.workspace import MergeWorkspace

__all__ = ["CheckpointsComponent"]

logger = logging.getLogger(__name__)


class CheckpointsComponent(ModelComponent):
    """Checkpoints produced in a workspace, each with an optional manifest.

    ``filename`` and ``manifest_filename`` are templates relative to the
    workspace root; a checkpoint or manifest may carry its own path instead.
    """

    model: "MergeWorkspace"

    def __init__(
        self,
        model: "MergeWorkspace",
        filename: str = "{name}.ckpt",
        manifest_filename: str = "{name}.manifest.json",
    ):
        self._filename = filename
        self._manifest_filename = manifest_filename
        self._data: dict[str, TensorMap | DeltaSet] = {}
        self._paths: dict[str, Path] = {}
        self._manifests: dict[str, MergeManifest] = {}
        self._manifest_paths: dict[str, Path] = {}
        self.digests: dict[str, str] = {}
        super().__init__(model=model)

    @property
    def data(self) -> dict[str, TensorMap | DeltaSet]:
        return self._data

    @property
    def manifests(self) -> dict[str, MergeManifest]:
        return self._manifests

    def set(
        self, data: TensorMap | DeltaSet, name: str, path: str | Path | None = None
    ) -> None:
        if name in self._data:
            logger.warning(f"{self.model.name}.{self.name_in_model}: Replacing '{name}'.")
        self._data[name] = data
        if path is not None:
            self._paths[name] = Path(path)

    def set_manifest(
        self, manifest: MergeManifest, name: str, path: str | Path | None = None
    ) -> None:
        self._manifests[name] = manifest
        if path is not None:
            self._manifest_paths[name] = Path(path)

    def path_of(self, name: str) -> Path:
        if name in self._paths:
            return self._paths[name]
        return self.root.path / self._filename.format(name=name)

    def manifest_path_of(self, name: str) -> Path:
        if name in self._manifest_paths:
            return self._manifest_paths[name]
        return self.root.path / self._manifest_filename.format(name=name)

    @hydromt_step
    def write(self, created: datetime | None = None) -> None:
        """Write every checkpoint, then its manifest stamped with the write time."""
        self.root._assert_write_mode()
        if not self.data:
            logger.info(
                f"{self.model.name}.{self.name_in_model}: No checkpoints found, skip writing."
            )
            return
        created = created or datetime.now().astimezone()
        for name, t in self.data.items():
            digest = write_checkpoint(t, self.path_of(name))
            self.digests[name] = digest
            manifest = self._manifests.get(name)
            if manifest is None:
                continue
            if manifest.output.digest != digest:
                raise CheckpointError(
                    f"Checkpoint '{name}' has digest {digest}, its manifest records "
                    f"{manifest.output.digest}"
                )
            write_manifest(manifest.stamped(created), self.manifest_path_of(name))

    @hydromt_step
    def read(self) -> None:
        """Read every checkpoint below the root and the manifest next to it."""
        self.root._assert_read_mode()
        suffix = self._filename.replace("{name}", "")
        for path in sorted(Path(self.root.path).glob(f"*{suffix}")):
            name = path.name.removesuffix(suffix)
            self.set(read_entry(path), name=name)
            manifest_path = self.manifest_path_of(name)
            if manifest_path.is_file():
                self._manifests[name] = read_manifest(manifest_path)
