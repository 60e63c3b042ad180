"""save_load.py
Saves and loads model checkpoints, run configuration files and result tables."""

from __future__ import annotations
from abc import ABC
import configparser
from dataclasses import fields
from enum import Enum, StrEnum
import json
import logging
import os
import struct
from typing import Any, Dict, List, Mapping, Type, cast, get_type_hints
import numpy as np
import pandas as pd

from model import Model, ModelConfig

logger = logging.getLogger(__name__)


class ConfigError(ValueError):
    """A configuration file names an unknown section or key, or holds a value of the wrong type."""

    pass


class CheckpointFormatError(ValueError):
    """A checkpoint file is truncated, corrupt or of an unknown version."""

    pass


class Loader(ABC):
    """Base class for anything saved to or loaded from a single file."""

    def __init__(self, filename: str | None) -> None:
        self.filename = filename

    class NotYetLoadedError(Exception):
        """Error that occurs when attempting to access data before it has been loaded."""

        pass

    class NoFilenameProvidedError(Exception):
        """No filename has been provided to save to or load from."""

        pass

    def save(self) -> None:
        """Saves the contents."""
        raise NotImplementedError("Saving is not implemented for this loader.")

    def load(self) -> None:
        """Loads the contents."""
        raise NotImplementedError("Loading is not implemented for this loader.")

    def _check_filename(self) -> str:
        """Checks if a valid filename has been provided to save to / load from.

        Raises:
            self.NoFilenameProvidedError: When there is no filename.
        """
        if self.filename is None:
            raise self.NoFilenameProvidedError("No filename provided to loader.")
        return self.filename

    def _make_parent(self) -> None:
        parent = os.path.dirname(self._check_filename())
        if parent:
            os.makedirs(parent, exist_ok=True)


class CheckpointLoader(Loader):
    """Model parameters in a single binary file.

    Layout: 8-byte magic, uint32 version, uint32 header length (little endian),
    a UTF-8 JSON header holding the config, seed, step and a manifest of
    (name, shape, offset, count), then every parameter as little-endian float32
    in manifest order."""

    MAGIC = b"RATTNCKP"
    VERSION = 1
    _PREFIX = struct.Struct("<8sII")

    def __init__(
        self,
        filename: str | None = None,
        model: Model | None = None,
        step: int = 0,
    ) -> None:
        super().__init__(filename)
        self._model = model
        self.step = step

    class Fields(StrEnum):
        CONFIG = "config"
        SEED = "seed"
        STEP = "step"
        MANIFEST = "manifest"
        NAME = "name"
        SHAPE = "shape"
        OFFSET = "offset"
        COUNT = "count"

    @property
    def model(self) -> Model:
        if self._model is not None:
            return self._model
        else:
            raise self.NotYetLoadedError("The model has not been loaded yet.")

    @model.setter
    def model(self, model: Model) -> None:
        self._model = model

    def save(self) -> None:
        filename = self._check_filename()
        logger.info(f"Saving to '{filename}'")
        self._make_parent()
        manifest: List[Dict[str, Any]] = []
        offset = 0
        arrays: List[np.ndarray] = []
        for name, tensor in self.model.named_parameters():
            manifest.append(
                {
                    self.Fields.NAME: name,
                    self.Fields.SHAPE: [int(extent) for extent in tensor.shape],
                    self.Fields.OFFSET: offset,
                    self.Fields.COUNT: int(tensor.size),
                }
            )
            arrays.append(tensor.data.astype("<f4").reshape(-1))
            offset += tensor.size
        header = json.dumps(
            {
                self.Fields.CONFIG: self.model.cfg.to_dict(),
                self.Fields.SEED: self.model.seed,
                self.Fields.STEP: self.step,
                self.Fields.MANIFEST: manifest,
            }
        ).encode("utf-8")
        payload = np.concatenate(arrays) if arrays else np.zeros(0, dtype="<f4")
        with open(filename, "wb") as file:
            file.write(self._PREFIX.pack(self.MAGIC, self.VERSION, len(header)))
            file.write(header)
            file.write(payload.tobytes())

    def load(self) -> None:
        """Rebuilds the model from the file.

        Raises:
            CheckpointFormatError: On a bad magic number, unknown version, corrupt header or short payload.
        """
        filename = self._check_filename()
        with open(filename, "rb") as file:
            blob = file.read()
        if len(blob) < self._PREFIX.size:
            raise CheckpointFormatError(f"'{filename}' is too short to be a checkpoint.")
        magic, version, header_length = self._PREFIX.unpack_from(blob)
        if magic != self.MAGIC:
            raise CheckpointFormatError(f"'{filename}' is not a checkpoint (bad magic number).")
        if version != self.VERSION:
            raise CheckpointFormatError(f"Checkpoint version {version} is not supported.")
        start = self._PREFIX.size
        try:
            header = json.loads(blob[start : start + header_length].decode("utf-8"))
            cfg = ModelConfig.from_dict(header[self.Fields.CONFIG])
            manifest = header[self.Fields.MANIFEST]
        except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValueError) as error:
            raise CheckpointFormatError(f"'{filename}' has a corrupt header: {error}") from error
        payload = blob[start + header_length :]
        total = sum(entry[self.Fields.COUNT] for entry in manifest)
        if len(payload) != 4 * total:
            raise CheckpointFormatError(
                f"'{filename}' holds {len(payload)} payload bytes, the manifest needs {4 * total}."
            )
        values = np.frombuffer(payload, dtype="<f4")
        state = {
            entry[self.Fields.NAME]: values[
                entry[self.Fields.OFFSET] : entry[self.Fields.OFFSET] + entry[self.Fields.COUNT]
            ].reshape(entry[self.Fields.SHAPE])
            for entry in manifest
        }
        try:
            model = Model(cfg, seed=header.get(self.Fields.SEED, 0), dtype=np.float32)
            model.load_state_dict(state)
        except (KeyError, TypeError, ValueError) as error:
            raise CheckpointFormatError(f"'{filename}' does not match its own config: {error}") from error
        self._model = model
        self.step = header.get(self.Fields.STEP, 0)


def _convert(section: str, key: str, raw: str, kind: Any) -> Any:
    text = raw.strip()
    try:
        if kind is bool:
            lowered = text.lower()
            if lowered not in configparser.ConfigParser.BOOLEAN_STATES:
                raise ValueError(f"'{text}' is not a boolean")
            return configparser.ConfigParser.BOOLEAN_STATES[lowered]
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        if isinstance(kind, type) and issubclass(kind, Enum):
            return kind(text)
        if kind is str:
            return text
    except ValueError as error:
        raise ConfigError(f"'{section}.{key}' has an invalid value: {error}") from error
    raise ConfigError(f"'{section}.{key}' cannot be set from a config file.")


class ConfigLoader(Loader):
    """INI-style run configuration: `[section]` headings, then `key = value` lines.

    Each known section maps onto a config dataclass; keys are that class's field names."""

    def __init__(
        self,
        filename: str | None = None,
        sections: Dict[str, Dict[str, Any]] | None = None,
    ) -> None:
        super().__init__(filename)
        self._sections = sections

    @property
    def sections(self) -> Dict[str, Dict[str, Any]]:
        if self._sections is not None:
            return self._sections
        else:
            raise self.NotYetLoadedError("The configuration has not been loaded yet.")

    def load(self) -> None:
        filename = self._check_filename()
        parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#",))
        try:
            with open(filename, "r") as file:
                parser.read_file(file)
        except configparser.Error as error:
            raise ConfigError(f"'{filename}' could not be parsed: {error}") from error
        self._sections = {name: dict(parser[name]) for name in parser.sections()}

    def save(self) -> None:
        filename = self._check_filename()
        logger.info(f"Saving to '{filename}'")
        self._make_parent()
        parser = configparser.ConfigParser(interpolation=None)
        for name, values in self.sections.items():
            parser[name] = {
                str(key): str(value.value if isinstance(value, Enum) else value)
                for key, value in values.items()
                if not isinstance(value, dict)
            }
        with open(filename, "w") as file:
            parser.write(file)

    def check_sections(self, known: Mapping[str, Type[Any]]) -> None:
        """Raises ConfigError naming the first section that is not in known."""
        for name in self.sections:
            if name not in known:
                raise ConfigError(
                    f"Unknown config section '{name}'. Known sections: {', '.join(known)}."
                )

    def overrides(self, section: str, cls: Type[Any]) -> Dict[str, Any]:
        """The section's values converted to cls's field types.

        Raises:
            ConfigError: On a key cls does not have or a value that does not parse.
        """
        raw = self._sections.get(section, {}) if self._sections is not None else {}
        hints = get_type_hints(cls)
        names = {f.name for f in fields(cls)}
        converted: Dict[str, Any] = {}
        for key, value in raw.items():
            if key not in names:
                raise ConfigError(f"Unknown config key '{section}.{key}'.")
            if isinstance(value, str):
                converted[key] = _convert(section, key, value, hints[key])
            else:
                converted[key] = value
        return converted

    def build(self, section: str, cls: Type[Any], **extra: Any) -> Any:
        """Constructs cls from its defaults, then the section's values, then extra."""
        values = self.overrides(section, cls)
        values.update(extra)
        try:
            return cls(**values)
        except ValueError as error:
            raise ConfigError(f"Section '{section}' is invalid: {error}") from error


class TableLoader(Loader):
    """A result table as CSV, or as JSON (metadata plus a list of row records) when the filename ends in .json."""

    def __init__(
        self,
        filename: str | None = None,
        table: pd.DataFrame | None = None,
        metadata: Dict[str, Any] | None = None,
    ) -> None:
        super().__init__(filename)
        self._table = table
        self.metadata = metadata if metadata is not None else {}

    class Fields(StrEnum):
        METADATA = "metadata"
        ROWS = "rows"

    @property
    def table(self) -> pd.DataFrame:
        if self._table is not None:
            return self._table
        else:
            raise self.NotYetLoadedError("The table has not been loaded yet.")

    @table.setter
    def table(self, table: pd.DataFrame) -> None:
        self._table = table

    def _is_json(self) -> bool:
        return self._check_filename().lower().endswith(".json")

    def save(self) -> None:
        filename = self._check_filename()
        logger.info(f"Saving to '{filename}'")
        self._make_parent()
        if self._is_json():
            combined = {
                self.Fields.METADATA.value: self.metadata,
                self.Fields.ROWS.value: json.loads(self.table.to_json(orient="records")),
            }
            with open(filename, "w") as file:
                json.dump(combined, file, indent=4, default=str)
        else:
            self.table.to_csv(filename, index=False)

    def load(self) -> None:
        filename = self._check_filename()
        if self._is_json():
            with open(filename, "r") as file:
                combined = json.load(file)
            self.metadata = combined.get(self.Fields.METADATA.value, {})
            self._table = pd.DataFrame.from_records(combined[self.Fields.ROWS.value])
        else:
            self._table = pd.read_csv(cast(str, filename))
