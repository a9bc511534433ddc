import json
import logging
from pathlib import Path
from typing import TYPE_CHECKING

import pandas as pd
from hydromt import hydromt_step
from hydromt.model.components import ModelComponent, TablesComponent

from mixup_merge.checkpoint import atomic_write

if TYPE_CHECKING:
    from mixup_merge.workspace import MergeWorkspace

__all__ = ["DocumentsComponent", "ResultTablesComponent"]

logger = logging.getLogger(__name__)


class ResultTablesComponent(TablesComponent):
    """Result tables written as plain CSV with a fixed column order."""

    model: "MergeWorkspace"

    def __init__(self, model: "MergeWorkspace", filename: str = "{name}.csv"):
        self._columns: dict[str, list[str]] = {}
        self._paths: dict[str, Path] = {}
        super().__init__(model, filename=filename)

    def set(
        self,
        tables: pd.DataFrame,
        name: str,
        path: str | Path | None = None,
        columns: list[str] | None = None,
    ) -> None:
        """Add a table; ``columns`` fixes the exact columns and their order on write."""
        super().set(tables, name=name)
        if columns is not None:
            self._columns[name] = list(columns)
        if path is not None:
            self._paths[name] = Path(path)

    def path_of(self, name: str) -> Path:
        if name in self._paths:
            return self._paths[name]
        return Path(self.root.path, self._filename.format(name=name))

    @hydromt_step
    def write(self, filename: str | None = None, **kwargs) -> None:
        """Write tables to the workspace.

        Parameters
        ----------
        filename: str | None
            Filename template with a ``{name}`` field, the component default if None.
        **kwargs:
            Additional keyword arguments passed to pandas.DataFrame.to_csv().
        """
        self.root._assert_write_mode()
        if len(self.data) == 0:
            logger.info(
                f"{self.model.name}.{self.name_in_model}: No tables found, skip writing."
            )
            return
        decimals = self.model.config.get_value("decimals", fallback=6)
        for name, df in self.data.items():
            columns = self._columns.get(name)
            if columns is not None:
                if not all(col in df.columns for col in columns):
                    raise ValueError(
                        f"Not all required columns found in table '{name}'.\n"
                        f"Required columns are {columns}\n"
                        f"Found columns are {df.columns.tolist()}"
                    )
                df = df.loc[:, columns]
            if decimals is not None:
                df = df.round(decimals)
            if filename is None:
                path = self.path_of(name)
            else:
                path = Path(self.root.path, filename.format(name=name))
            logger.info(
                f"{self.model.name}.{self.name_in_model}: Writing table '{name}' to {path}."
            )
            atomic_write(path, df.to_csv(index=False, sep=",", **kwargs))

    @hydromt_step
    def read(self, filename: str | None = None, **kwargs) -> None:
        """Read every CSV table below the workspace root."""
        self.root._assert_read_mode()
        self._initialize_tables(skip_read=True)
        pattern = Path(self.root.path, (filename or self._filename).format(name="*"))
        suffix = pattern.name.removeprefix("*")
        for path in sorted(pattern.parent.glob(pattern.name)):
            df = pd.read_csv(path, sep=",", **kwargs)
            self.set(df, name=path.name.removesuffix(suffix))


class DocumentsComponent(ModelComponent):
    """JSON documents such as sweep results and lineage records."""

    model: "MergeWorkspace"

    def __init__(self, model: "MergeWorkspace", filename: str = "{name}.json"):
        self._filename = filename
        self._data: dict[str, dict] = {}
        super().__init__(model=model)

    @property
    def data(self) -> dict[str, dict]:
        return self._data

    def set(self, doc: dict, name: str) -> None:
        if name in self._data:
            logger.warning(f"{self.model.name}.{self.name_in_model}: Replacing '{name}'.")
        self._data[name] = doc

    @hydromt_step
    def write(self) -> None:
        self.root._assert_write_mode()
        if not self.data:
            logger.info(
                f"{self.model.name}.{self.name_in_model}: No documents found, skip writing."
            )
            return
        for name, doc in self.data.items():
            path = Path(self.root.path, self._filename.format(name=name))
            logger.info(f"{self.model.name}.{self.name_in_model}: Writing '{name}' to {path}.")
            atomic_write(path, json.dumps(doc, indent=2, sort_keys=True) + "\n")

    @hydromt_step
    def read(self) -> None:
        self.root._assert_read_mode()
        suffix = self._filename.replace("{name}", "")
        for path in sorted(Path(self.root.path).glob(f"*{suffix}")):
            if path.name.endswith(".manifest.json"):
                continue
            self.set(json.loads(path.read_text(encoding="utf-8")), name=path.name.removesuffix(suffix))
